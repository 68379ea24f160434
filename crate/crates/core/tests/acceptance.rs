//! Acceptance criteria 1-8. Each test prints one `PASS`/`FAIL` line.
//!
//! Tests share one lock so the wall-clock measurements in criterion 4 do not
//! compete with other work in this binary.

use std::sync::Mutex;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vvt_core::attention::{
    linear_attention, locality_weight, quadratic_oracle, quadratic_oracle_weights, AttentionMode,
    PositionGrid, DEFAULT_EPS,
};
use vvt_core::backbone::{count_params, load_checkpoint, Model, ModelSpec, VariantSpec};
use vvt_core::bench::{
    attention_only_cost, fitted_slopes, flop_model, log_log_slope, sweep, token_count, FlopConvention,
    SweepOptions,
};
use vvt_core::block::BlockParams;
use vvt_core::gradcheck::{grad_check, GradCheckOptions, GradTarget, Mutation};
use vvt_core::train::{evaluate_top1, load_dataset, train, TrainConfig, LOG_FILE, CHECKPOINT_DIR};
use vvt_core::{BlockConfig, ParamSet};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u8, name: &str, ok: bool, detail: String) {
    let status = if ok { "PASS" } else { "FAIL" };
    println!("criterion {id} [{name}]: {status} ({detail})");
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_oracle_equivalence() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut samples = 0;
    for case in 0..100 {
        let mode = AttentionMode::LINEAR[case % 3];
        let batch = rng.random_range(1..=4);
        let grid = PositionGrid::new(rng.random_range(1..=16), rng.random_range(1..=16)).unwrap();
        let d = rng.random_range(1..=32);
        let dv = rng.random_range(1..=32);
        for _ in 0..batch {
            let n = grid.len();
            let (q, k, v) = (uniform(&mut rng, n, d), uniform(&mut rng, n, d), uniform(&mut rng, n, dv));
            let fast = linear_attention(q.view(), k.view(), v.view(), &grid, mode, DEFAULT_EPS).unwrap();
            let slow = quadratic_oracle(q.view(), k.view(), v.view(), &grid, mode, DEFAULT_EPS).unwrap();
            worst = worst.max(max_abs_diff(&fast, &slow));
            samples += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-10 && secs < 60.0;
    report(1, "oracle equivalence", ok, format!("100 cases, {samples} samples, max abs err {worst:.2e}, {secs:.1}s"));
    assert!(ok);
}

#[test]
fn criterion_2_gradient_correctness() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let opts = GradCheckOptions { tol: 1e-5, ..Default::default() };
    let mut targets: Vec<GradTarget> = AttentionMode::LINEAR
        .iter()
        .map(|&m| GradTarget::linear_attention(4, 4, 4, m))
        .collect();
    targets.push(GradTarget::softmax(8, 4));
    for mode in AttentionMode::ALL {
        targets.push(GradTarget::Block {
            config: BlockConfig::new(8, 2, 2, 2, mode),
            rows: 3,
            cols: 4,
        });
    }
    targets.push(GradTarget::mini_backbone(AttentionMode::Vicinity2D));

    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut resampled = 0;
    for target in &targets {
        for seed in [0, 1, 2] {
            let r = grad_check(target, seed, &opts).unwrap();
            worst = worst.max(r.max_rel_error);
            resampled += r.resampled;
            if !r.passed {
                failures.push(format!("{} seed {seed}: {:.2e} in {}", r.target, r.max_rel_error, r.worst));
            }
        }
    }

    let mutated = GradCheckOptions { mutation: Mutation::DropNormalizer, ..opts };
    let control_targets = [
        GradTarget::linear_attention(4, 4, 4, AttentionMode::Vicinity2D),
        GradTarget::Block {
            config: BlockConfig::new(8, 2, 2, 2, AttentionMode::Vicinity2D),
            rows: 3,
            cols: 4,
        },
    ];
    let control_caught = control_targets
        .iter()
        .all(|t| !grad_check(t, 0, &mutated).unwrap().passed);

    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && control_caught && secs < 300.0;
    report(
        2,
        "gradient correctness",
        ok,
        format!(
            "{} checks, max rel err {worst:.2e}, {resampled} resampled, mutated backward caught: {control_caught}, {secs:.1}s",
            targets.len() * 3
        ),
    );
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(ok);
}

#[test]
fn criterion_3_reference_structure() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let expected = [("tiny", 12.9, 3.0), ("small", 25.5, 5.6), ("medium", 47.9, 9.4), ("large", 61.8, 10.8)];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, params_m, gflops) in expected {
        let spec = ModelSpec::new(VariantSpec::by_name(name).unwrap(), 1000);
        let p = count_params(&spec) as f64 / 1e6;
        let f = flop_model(&spec, 224, 224, FlopConvention::MacIsOne).unwrap().gflops;
        let p_err = (p - params_m).abs() / params_m;
        let f_err = (f - gflops).abs() / gflops;
        ok &= p_err <= 0.05 && f_err <= 0.15;
        detail.push(format!("{name} {p:.2}M/{f:.2}G"));
    }
    report(3, "reference params and GFLOPs", ok, detail.join(", "));
    assert!(ok);
}

#[test]
fn criterion_4_complexity_scaling() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let resolutions = [64, 96, 128, 160, 192, 224, 256];
    let tiny = ModelSpec::new(VariantSpec::tiny(), 1000);
    let slope_of = |mode| {
        let spec = tiny.clone().with_mode(mode);
        let n: Vec<f64> = resolutions.iter().map(|&r| token_count(&spec, r).unwrap() as f64).collect();
        let c: Vec<f64> = resolutions
            .iter()
            .map(|&r| {
                let c = attention_only_cost(&spec, r, r).unwrap();
                (c.macs + c.elementwise) as f64
            })
            .collect();
        log_log_slope(&n, &c).unwrap()
    };
    let linear = slope_of(AttentionMode::Vicinity2D);
    let quadratic = slope_of(AttentionMode::SoftmaxOracle);

    // Measured: a desk-sized model of the same layout.
    let desk = ModelSpec::new(VariantSpec::tiny().scaled(4, &[1, 1, 1, 1]).unwrap(), 10);
    let opts = SweepOptions { repeats: 5, ..Default::default() };
    let timed = sweep(&desk, &[AttentionMode::Vicinity2D], &[128, 192, 256, 320, 384], &opts).unwrap();
    let (_, _, measured) = fitted_slopes(&desk, &timed[timed.len() - 3..]).unwrap();
    let measured = measured.unwrap();

    let secs = start.elapsed().as_secs_f64();
    let ok = (linear - 1.0).abs() <= 0.05 && (quadratic - 2.0).abs() <= 0.05 && measured < 1.5 && secs < 900.0;
    let times: Vec<String> = timed
        .iter()
        .map(|p| format!("{}:{:.1}ms", p.resolution, p.wall_ms.unwrap_or(f64::NAN)))
        .collect();
    report(
        4,
        "complexity scaling",
        ok,
        format!(
            "attention-only slope vicinity2d {linear:.4}, softmax {quadratic:.4}; measured vicinity2d slope {measured:.3} over top 3 of [{}], {secs:.1}s",
            times.join(" ")
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_5_locality() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let grid = PositionGrid::square(8).unwrap();
    let ones = Array2::<f64>::ones((64, 4));
    let w = quadratic_oracle_weights(ones.view(), ones.view(), &grid, AttentionMode::Vicinity2D, DEFAULT_EPS).unwrap();
    let mut violations = 0;
    let mut rays = 0;
    for i in 0..64 {
        let (r, c) = grid.unflatten_index(i).unwrap();
        let own = w[[i, i]];
        violations += (0..64).filter(|&j| j != i && w[[i, j]] >= own).count();
        for (dr, dc) in [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)] {
            let (mut pr, mut pc) = (r as isize, c as isize);
            let mut prev = own;
            rays += 1;
            loop {
                pr += dr;
                pc += dc;
                if !(0..8).contains(&pr) || !(0..8).contains(&pc) {
                    break;
                }
                let cur = w[[i, grid.flatten_index(pr as usize, pc as usize).unwrap()]];
                if cur > prev {
                    violations += 1;
                }
                prev = cur;
            }
        }
    }
    let ok = violations == 0;
    report(5, "locality", ok, format!("64 queries, {rays} rays, {violations} violations"));
    assert!(ok);
}

#[test]
fn criterion_6_row_stochastic() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst, mut min_entry) = (0.0f64, f64::INFINITY);
    let (mut rows, mut clamped) = (0, 0);
    let mut clamped_ok = true;
    for case in 0..50 {
        let mode = AttentionMode::LINEAR[case % 3];
        let grid = PositionGrid::new(rng.random_range(1..=12), rng.random_range(1..=12)).unwrap();
        let n = grid.len();
        let d = rng.random_range(1..=16);
        let mut q = uniform(&mut rng, n, d);
        let k = uniform(&mut rng, n, d);
        // Every other case zeroes some query rows: their mass is below eps.
        if case % 2 == 1 {
            for i in 0..n {
                if rng.random_bool(0.4) || i == 0 {
                    q.row_mut(i).fill(0.0);
                }
            }
        }
        let w = quadratic_oracle_weights(q.view(), k.view(), &grid, mode, DEFAULT_EPS).unwrap();
        min_entry = w.iter().copied().fold(min_entry, f64::min);
        for i in 0..n {
            let mass: f64 = (0..n)
                .map(|j| {
                    let dot: f64 = (0..d).map(|c| q[[i, c]].max(0.0) * k[[j, c]].max(0.0)).sum();
                    dot * locality_weight(i, j, &grid, mode).unwrap()
                })
                .sum();
            let sum: f64 = w.row(i).sum();
            if mass > DEFAULT_EPS {
                worst = worst.max((sum - 1.0).abs());
                rows += 1;
            } else {
                clamped += 1;
                clamped_ok &= w.row(i).iter().all(|x| x.is_finite() && x.abs() <= mass / DEFAULT_EPS + 1e-15);
            }
        }
    }
    let ok = worst <= 1e-9 && min_entry >= 0.0 && clamped > 0 && clamped_ok;
    report(
        6,
        "row-stochastic and non-negative",
        ok,
        format!("50 cases, {rows} rows max |sum-1| {worst:.2e}, min weight {min_entry:.2e}, {clamped} clamped rows"),
    );
    assert!(ok);
}

#[test]
fn criterion_7_smoke_training() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let config = TrainConfig::from_json(include_str!("../../../configs/smoke.json")).unwrap();
    let (train_set, val_set) = load_dataset(&config.dataset, None).unwrap();
    let spec = config.model_spec().unwrap();
    let model = Model::<f32>::init(spec.clone(), config.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(model, &train_set, &val_set, &config, Some(dir.path())).unwrap();
    let first = out.log.first().unwrap().train_loss;
    let last = out.log.last().unwrap();
    let chance = 1.0 / config.dataset.class_count as f64;

    let reloaded: Model<f32> = load_checkpoint(dir.path().join(CHECKPOINT_DIR)).unwrap();
    let acc_trained = evaluate_top1(&out.model, &val_set).unwrap();
    let acc_reloaded = evaluate_top1(&reloaded, &val_set).unwrap();
    let log_lines = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap().lines().count();

    // All modes run through the same loop with the same parameter layout.
    let mut parity = true;
    let short = TrainConfig { total_epochs: 2, ..config.clone() };
    let small_train = train_set.clone().truncate(128);
    for mode in AttentionMode::ALL {
        let cfg = TrainConfig { mode, ..short.clone() };
        let m = Model::<f32>::init(cfg.model_spec().unwrap(), cfg.seed).unwrap();
        parity &= m.num_params() == out.model.num_params();
        let o = train(m, &small_train, &val_set, &cfg, None).unwrap();
        parity &= o.log.len() == 2 && o.log.iter().all(|r| r.train_loss.is_finite());
    }

    let secs = start.elapsed().as_secs_f64();
    let ok = last.train_loss < 0.5 * first
        && last.val_top1 > 2.0 * chance
        && acc_trained.to_bits() == acc_reloaded.to_bits()
        && log_lines == config.total_epochs
        && parity
        && secs < 1200.0;
    report(
        7,
        "smoke training",
        ok,
        format!(
            "loss {first:.4} -> {:.4}, val top-1 {:.4} (chance {chance:.2}), reload top-1 {acc_reloaded:.4}, all modes train: {parity}, {secs:.1}s",
            last.train_loss, last.val_top1
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_8_ablation_wiring() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut ok = true;
    let mut blocks = 0;
    for name in VariantSpec::NAMES {
        let spec = ModelSpec::new(VariantSpec::by_name(name).unwrap(), 1000);
        let on = flop_model(&spec, 224, 224, FlopConvention::MacIsOne).unwrap();
        let off = flop_model(&spec.clone().with_fpc(false), 224, 224, FlopConvention::MacIsOne).unwrap();
        for (s, stage) in spec.variant.stages.iter().enumerate() {
            let c = stage.channels as u64;
            for b in 0..stage.depth {
                ok &= on.block_total(s, b).macs - off.block_total(s, b).macs == 2 * c * c;
                blocks += 1;
            }
        }
    }

    let mut widths = Vec::new();
    for r in [1, 2, 4, 8] {
        let variant = VariantSpec::tiny().with_fr_ratio(r).unwrap();
        let spec = ModelSpec::new(variant, 1000);
        let model = Model::<f32>::init(spec.clone(), 0).unwrap();
        ok &= model.num_params() == count_params(&spec);
        for (s, stage) in spec.variant.stages.iter().enumerate() {
            let cfg = spec.block_config(s);
            let p = &model.params.stages[s].blocks[0];
            ok &= p.query.weight.dim() == (stage.channels, stage.channels / r);
            ok &= p.out.weight.dim() == (stage.channels / r, stage.channels);
            ok &= BlockParams::<f32>::param_count(&cfg) == p.num_params();
        }
        widths.push(format!("R={r}: {:.2}M", count_params(&spec) as f64 / 1e6));
    }
    report(
        8,
        "ablation wiring",
        ok,
        format!("fpc off removes 2C^2 MACs in {blocks} blocks; {}", widths.join(", ")),
    );
    assert!(ok);
}
