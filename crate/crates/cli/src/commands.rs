use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::Context;
use vvt_core::backbone::{count_params, load_checkpoint};
use vvt_core::bench::{self, FlopConvention, SweepOptions, RESOLUTION_STEP};
use vvt_core::train::{self as trainer, ablation_table, evaluate_top1, load_dataset, TrainConfig, CHECKPOINT_DIR, LOG_FILE};
use vvt_core::verify::{self, Fault as CoreFault, Precision as CorePrecision};
use vvt_core::{AttentionMode, Error, Model, ModelSpec, VariantSpec};

use crate::error::{CliError, CliResult};
use crate::{AblateArgs, BenchArgs, ConfigArgs, Convention, EvalArgs, Fault, ModelArgs, Precision, ReportArgs, Split, TrainArgs, VerifyArgs};

const DATA_DIR_ENV: &str = "VVT_DATA_DIR";

/// Core errors caused by the arguments rather than by the computation.
fn classify(e: Error) -> CliError {
    match e {
        Error::UnknownVariant(_) | Error::Domain(_) => CliError::usage(e.to_string()),
        other => CliError::Failure(other.into()),
    }
}

impl From<Convention> for FlopConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Mac => FlopConvention::MacIsOne,
            Convention::Mac2 => FlopConvention::MacIsTwo,
        }
    }
}

fn check_resolution(res: usize) -> CliResult {
    if res == 0 || !res.is_multiple_of(RESOLUTION_STEP) {
        return Err(CliError::usage(format!("resolution {res} is not a positive multiple of {RESOLUTION_STEP}")));
    }
    Ok(())
}

fn build_spec(args: &ModelArgs, mode: AttentionMode) -> CliResult<ModelSpec> {
    let mut variant = VariantSpec::by_name(&args.variant).map_err(classify)?;
    if args.channel_div != 1 || args.depths.is_some() {
        let depths = args
            .depths
            .clone()
            .unwrap_or_else(|| variant.stages.iter().map(|s| s.depth).collect());
        variant = variant.scaled(args.channel_div, &depths).map_err(classify)?;
    }
    if let Some(r) = args.fr {
        variant = variant.with_fr_ratio(r).map_err(classify)?;
    }
    let spec = ModelSpec::new(variant, args.classes)
        .with_mode(mode)
        .with_fpc(args.fpc.enabled());
    spec.validate().map_err(classify)?;
    Ok(spec)
}

pub fn verify(args: &VerifyArgs, seed: Option<u64>) -> CliResult {
    let precision = match args.precision {
        Precision::Double => CorePrecision::Double,
        Precision::Single => CorePrecision::Single,
    };
    let fault = match args.inject_fault {
        None => CoreFault::None,
        Some(Fault::Oracle) => CoreFault::OracleMismatch,
        Some(Fault::Gradient) => CoreFault::GradientMutation,
    };
    let results = verify::run_all(precision, fault, seed.unwrap_or(0))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        println!("{:<12} {:>7} {:>9} {:>12} {:>10} {:>8}  result", "suite", "checks", "failures", "max_error", "tolerance", "seconds");
        for r in &results {
            let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2e}"));
            println!(
                "{:<12} {:>7} {:>9} {:>12} {:>10} {:>8.2}  {}",
                r.name,
                r.checks,
                r.failures,
                fmt_opt(r.max_error),
                fmt_opt(r.tolerance),
                r.seconds,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow::anyhow!("failed suites: {}", failed.join(", ")).into())
    }
}

pub fn report(args: &ReportArgs) -> CliResult {
    check_resolution(args.res)?;
    let spec = build_spec(&args.model, args.model.mode)?;
    let flops = bench::flop_model(&spec, args.res, args.res, args.convention.into()).map_err(classify)?;
    let params = count_params(&spec);
    let convention = flops.convention;
    let stages: Vec<_> = (0..spec.variant.stages.len())
        .map(|i| serde_json::json!({
            "stage": i + 1,
            "gflops": convention.flops(flops.stage_total(i)) as f64 / 1e9,
        }))
        .collect();
    if args.json {
        let out = serde_json::json!({
            "variant": spec.variant.name,
            "mode": spec.mode,
            "fpc": spec.fpc,
            "resolution": args.res,
            "classes": spec.class_count,
            "params": params,
            "params_m": params as f64 / 1e6,
            "gflops": flops.gflops,
            "convention": convention,
            "convention_note": flops.convention_note,
            "stages": stages,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    println!("variant     {}", spec.variant.name);
    println!("mode        {}", spec.mode);
    println!("fpc         {}", if spec.fpc { "on" } else { "off" });
    println!("resolution  {0}x{0}", args.res);
    println!("params      {:.2}M ({params})", params as f64 / 1e6);
    println!("gflops      {:.3}", flops.gflops);
    println!("convention  {}", flops.convention_note);
    for (i, s) in spec.variant.stages.iter().enumerate() {
        println!(
            "  stage {}: C={:<4} depth={:<3} heads={:<2} R={} gflops={:.3}",
            i + 1,
            s.channels,
            s.depth,
            s.heads,
            s.fr_ratio,
            convention.flops(flops.stage_total(i)) as f64 / 1e9
        );
    }
    Ok(())
}

pub fn bench(args: &BenchArgs, seed: Option<u64>) -> CliResult {
    for &r in &args.res {
        check_resolution(r)?;
    }
    if args.modes.is_empty() {
        return Err(CliError::usage("no modes given"));
    }
    if args.repeats < 3 {
        return Err(CliError::usage("--repeats must be at least 3"));
    }
    let spec = build_spec(&args.model, args.modes[0])?;
    let options = SweepOptions {
        repeats: args.repeats,
        seed: seed.unwrap_or(0),
        convention: args.convention.into(),
        analytic_only: args.analytic_only,
    };
    let points = bench::sweep(&spec, &args.modes, &args.res, &options).map_err(classify)?;
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    bench::write_csv(&points, BufWriter::new(file))?;
    println!("{:<12} {:>11} {:>11} {:>11}", "mode", "attn_slope", "total_slope", "wall_slope");
    for &mode in &args.modes {
        let series: Vec<_> = points.iter().filter(|p| p.mode == mode).cloned().collect();
        if series.len() < 2 {
            continue;
        }
        let (attn, total, measured) = bench::fitted_slopes(&spec.clone().with_mode(mode), &series)?;
        let measured = measured.map_or_else(|| "NA".to_string(), |m| format!("{m:.3}"));
        println!("{:<12} {:>11.3} {:>11.3} {:>11}", mode.name(), attn, total, measured);
    }
    println!("wrote {} rows to {}", points.len(), args.out.display());
    Ok(())
}

/// Reads the config file and applies command-line overrides.
fn load_config(args: &ConfigArgs, seed: Option<u64>) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config: TrainConfig = serde_json::from_str(&text).map_err(|e| {
        CliError::usage(format!(
            "{}: {e}\naccepted keys: {}",
            args.config.display(),
            TrainConfig::KEYS.join(", ")
        ))
    })?;
    if let Some(m) = args.mode {
        config.mode = m;
    }
    if let Some(f) = args.fpc {
        config.fpc = f.enabled();
    }
    if args.fr.is_some() {
        config.fr_ratio = args.fr;
    }
    if let Some(e) = args.epochs {
        config.total_epochs = e;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(|e| CliError::usage(format!("{}: {e}", args.config.display())))?;
    Ok(config)
}

fn data_root(args: &ConfigArgs) -> Option<PathBuf> {
    args.data_dir.clone().or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

fn run_training(config: &TrainConfig, args: &ConfigArgs, out: &std::path::Path) -> CliResult<Vec<trainer::EpochRecord>> {
    let (train_set, val_set) = load_dataset(&config.dataset, data_root(args).as_deref())?;
    let spec = config.model_spec()?;
    let model = Model::<f32>::init(spec, config.seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(config)?)?;
    println!(
        "training {} ({}, fpc {}) on {} samples, {} params",
        config.variant,
        config.mode,
        if config.fpc { "on" } else { "off" },
        train_set.len(),
        model.num_params()
    );
    let result = trainer::train(model, &train_set, &val_set, config, Some(out))?;
    for r in &result.log {
        println!("epoch {:>3}  lr {:.2e}  loss {:.4}  val_top1 {:.4}", r.epoch, r.lr, r.train_loss, r.val_top1);
    }
    println!("log: {}  checkpoint: {}", out.join(LOG_FILE).display(), out.join(CHECKPOINT_DIR).display());
    Ok(result.log)
}

pub fn train(args: &TrainArgs, seed: Option<u64>) -> CliResult {
    let config = load_config(&args.config, seed)?;
    run_training(&config, &args.config, &args.out).map(|_| ())
}

pub fn eval(args: &EvalArgs, seed: Option<u64>) -> CliResult {
    let config = load_config(&args.config, seed)?;
    let (train_set, val_set) = load_dataset(&config.dataset, data_root(&args.config).as_deref())?;
    let model = load_checkpoint::<f32>(&args.checkpoint)?;
    let data = match args.split {
        Split::Train => &train_set,
        Split::Val => &val_set,
    };
    let top1 = evaluate_top1(&model, data)?;
    println!("top1 {top1:.4} on {} samples", data.len());
    Ok(())
}

pub fn ablate(args: &AblateArgs, seed: Option<u64>) -> CliResult {
    let base = load_config(&args.config, seed)?;
    let mut runs = Vec::new();
    for &mode in &args.modes {
        let config = TrainConfig { mode, ..base.clone() };
        let log = run_training(&config, &args.config, &args.out.join(mode.name()))?;
        runs.push((mode, log));
    }
    print!("{}", ablation_table(&runs));
    Ok(())
}
