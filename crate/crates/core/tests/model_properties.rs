use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vvt_core::attention::{AttentionMode, PositionGrid};
use vvt_core::backbone::{count_params, Model, ModelSpec, VariantSpec};
use vvt_core::bench::{
    attention_only_cost, block_attention_cost, flop_model, log_log_slope, write_csv, CurvePoint, FlopConvention,
    CSV_HEADER,
};
use vvt_core::block::{block_forward_sample, BlockConfig, BlockParams};
use vvt_core::nn::FeatureMap;
use vvt_core::ParamSet;

fn any_mode() -> impl Strategy<Value = AttentionMode> {
    prop::sample::select(AttentionMode::ALL.to_vec())
}

fn uniform(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn small_spec(div: usize, depth: usize, fr: usize, fpc: bool, mode: AttentionMode, classes: usize) -> Option<ModelSpec> {
    let variant = VariantSpec::tiny().scaled(div, &[depth; 4]).ok()?.with_fr_ratio(fr).ok()?;
    let spec = ModelSpec::new(variant, classes).with_mode(mode).with_fpc(fpc);
    spec.validate().ok().map(|_| spec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_branches_leave_the_residual(rows in 1usize..=6, cols in 1usize..=6, mode in any_mode(), fpc: bool, seed in any::<u64>()) {
        let mut config = BlockConfig::new(8, 2, 2, 2, mode);
        config.fpc = fpc;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BlockParams::<f64>::init(&config, &mut rng).unwrap();
        params.out.weight.fill(0.0);
        params.out.bias.fill(0.0);
        if let Some(f) = params.fpc.as_mut() {
            f.fc2.weight.fill(0.0);
            f.fc2.bias.fill(0.0);
        }
        params.ffn_out.weight.fill(0.0);
        params.ffn_out.bias.fill(0.0);
        let grid = PositionGrid::new(rows, cols).unwrap();
        let x = uniform(seed, grid.len(), 8);
        let (z, _) = block_forward_sample(x.view(), &grid, &params, &config).unwrap();
        prop_assert_eq!(z, x);
    }

    #[test]
    fn every_mode_accepts_the_same_params(rows in 1usize..=6, cols in 1usize..=6, seed in any::<u64>()) {
        let base = BlockConfig::new(16, 2, 2, 4, AttentionMode::Vicinity2D);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = BlockParams::<f64>::init(&base, &mut rng).unwrap();
        let grid = PositionGrid::new(rows, cols).unwrap();
        let x = uniform(seed, grid.len(), 16);
        for mode in AttentionMode::ALL {
            let config = BlockConfig { mode, ..base };
            let (z, _) = block_forward_sample(x.view(), &grid, &params, &config).unwrap();
            prop_assert_eq!(z.dim(), x.dim());
            prop_assert!(z.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn attention_cost_doubles_or_quadruples(n in 1usize..=4096, mode in any_mode()) {
        let config = BlockConfig::new(64, 2, 2, 4, mode);
        let a = block_attention_cost(&config, n);
        let b = block_attention_cost(&config, 2 * n);
        let k = if mode.is_linear() { 2 } else { 4 };
        prop_assert_eq!(b.macs, k * a.macs);
        prop_assert_eq!(b.elementwise, k * a.elementwise);
    }

    #[test]
    fn analytic_count_matches_materialized(
        div in prop::sample::select(vec![4usize, 8]), depth in 1usize..=2,
        fr in prop::sample::select(vec![1usize, 2, 4]), fpc: bool, mode in any_mode(), classes in 2usize..=20,
    ) {
        let spec = small_spec(div, depth, fr, fpc, mode, classes);
        prop_assume!(spec.is_some());
        let spec = spec.unwrap();
        let model = Model::<f32>::init(spec.clone(), 0).unwrap();
        prop_assert_eq!(model.num_params(), count_params(&spec));
        for s in 0..4 {
            let cfg = spec.block_config(s);
            prop_assert_eq!(model.params.stages[s].blocks[0].num_params(), BlockParams::<f32>::param_count(&cfg));
        }
    }

    #[test]
    fn mode_switch_keeps_layout(mode in any_mode()) {
        let spec = small_spec(8, 1, 2, true, AttentionMode::Vicinity2D, 10).unwrap();
        let a = Model::<f32>::init(spec.clone(), 0).unwrap();
        let b = Model::<f32>::init(spec.with_mode(mode), 0).unwrap();
        let shapes = |m: &Model<f32>| m.params.tensors().iter().map(|t| (t.name.clone(), t.shape.clone())).collect::<Vec<_>>();
        prop_assert_eq!(shapes(&a), shapes(&b));
    }

    #[test]
    fn stage_shapes_follow_strides(k in 1usize..=3, mode in any_mode()) {
        let side = 32 * k;
        let spec = small_spec(8, 1, 2, true, mode, 10).unwrap();
        let model = Model::<f64>::init(spec.clone(), 1).unwrap();
        let image = FeatureMap::new(uniform(k as u64, side * side, 3), side, side).unwrap();
        let (features, _) = model.features_sample(&image).unwrap();
        let mut stride = 1;
        for (f, stage) in features.iter().zip(&spec.variant.stages) {
            stride *= stage.patch_size;
            prop_assert_eq!((f.height, f.width, f.channels()), (side / stride, side / stride, stage.channels));
        }
    }

    #[test]
    fn flop_totals_are_sums_of_parts(name in prop::sample::select(VariantSpec::NAMES.to_vec()), k in 1usize..=12, mode in any_mode(), fpc: bool) {
        let spec = ModelSpec::new(VariantSpec::by_name(name).unwrap(), 1000).with_mode(mode).with_fpc(fpc);
        let r = flop_model(&spec, 32 * k, 32 * k, FlopConvention::MacIsTwo).unwrap();
        let macs: u64 = r.entries.iter().map(|e| e.macs).sum();
        let elementwise: u64 = r.entries.iter().map(|e| e.elementwise).sum();
        prop_assert_eq!((macs, elementwise), (r.total_macs, r.total_elementwise));
        prop_assert!((r.gflops - (2 * macs + elementwise) as f64 / 1e9).abs() < 1e-9);
    }
}

#[test]
fn attention_contraction_is_exactly_linear_or_quadratic() {
    let spec = ModelSpec::new(VariantSpec::small(), 1000);
    for (mode, want) in [
        (AttentionMode::Vicinity2D, 1.0),
        (AttentionMode::Locality1D, 1.0),
        (AttentionMode::NoLocality, 1.0),
        (AttentionMode::SoftmaxOracle, 2.0),
    ] {
        let spec = spec.clone().with_mode(mode);
        let sides = [64usize, 160, 320];
        let n: Vec<f64> = sides.iter().map(|&s| (s * s) as f64).collect();
        let c: Vec<f64> = sides
            .iter()
            .map(|&s| {
                let c = attention_only_cost(&spec, s, s).unwrap();
                (c.macs + c.elementwise) as f64
            })
            .collect();
        assert!((log_log_slope(&n, &c).unwrap() - want).abs() < 1e-12, "{mode}");
    }
}

#[test]
fn vicinity_grows_slower_than_softmax() {
    let growth = |mode| {
        let spec = ModelSpec::new(VariantSpec::tiny(), 1000).with_mode(mode);
        let at = |s| flop_model(&spec, s, s, FlopConvention::MacIsOne).unwrap().gflops;
        at(448) / at(224)
    };
    assert!(growth(AttentionMode::Vicinity2D) < growth(AttentionMode::SoftmaxOracle));
}

#[test]
fn csv_schema_is_stable() {
    let p = CurvePoint {
        mode: AttentionMode::Vicinity2D,
        resolution: 64,
        gflops: 0.25,
        attention_gflops: 0.01,
        wall_ms: None,
        peak_bytes: 1024,
    };
    let mut out = Vec::new();
    write_csv(&[p], &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), format!("{CSV_HEADER}\nvicinity2d,64,0.250000,NA,1024\n"));
    assert_eq!(CSV_HEADER, "mode,resolution,gflops,wall_ms,peak_bytes");
}
