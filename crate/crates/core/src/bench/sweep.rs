//! Resolution sweeps: analytic cost, measured forward time and an activation
//! memory estimate per `(mode, resolution)`.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::flops::{attention_only_cost, flop_model, FlopConvention};
use crate::attention::AttentionMode;
use crate::backbone::{Model, ModelSpec};
use crate::error::{domain, Error, Result};
use crate::nn::FeatureMap;
use crate::scalar::Real;

pub const CSV_HEADER: &str = "mode,resolution,gflops,wall_ms,peak_bytes";
/// Sweep resolutions must be multiples of this.
pub const RESOLUTION_STEP: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub mode: AttentionMode,
    pub resolution: usize,
    /// Whole model, analytic.
    pub gflops: f64,
    /// Attention contractions only, analytic.
    pub attention_gflops: f64,
    /// Median forward time; `None` when the mode refused the size.
    pub wall_ms: Option<f64>,
    pub peak_bytes: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    pub repeats: usize,
    pub seed: u64,
    pub convention: FlopConvention,
    /// Skip timing and leave `wall_ms` empty.
    pub analytic_only: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            repeats: 3,
            seed: 0,
            convention: FlopConvention::MacIsOne,
            analytic_only: false,
        }
    }
}

/// Largest set of simultaneously live single-precision activations during an
/// inference forward pass, in bytes.
pub fn estimate_peak_bytes(spec: &ModelSpec, side: usize) -> Result<u64> {
    let sides = spec.stage_sides(side)?;
    let mut peak = side * side * spec.in_channels;
    let mut in_ch = spec.in_channels;
    let mut in_side = side;
    for (i, (stage, &s)) in spec.variant.stages.iter().zip(&sides).enumerate() {
        let n = s * s;
        let c = stage.channels;
        let g = spec.embed_geometry(i);
        let embed = in_side * in_side * in_ch + n * g.kernel * g.kernel * in_ch + n * c;
        let cfg = spec.block_config(i);
        let r = cfg.reduced_dim();
        let attention = match cfg.mode.expansion_factor() {
            Some(f) => {
                let de = f * cfg.head_dim();
                cfg.heads * (2 * n * de + de * cfg.head_dim() + n * cfg.head_dim())
            }
            None => cfg.heads * (n * n + n * cfg.head_dim()),
        };
        let block = 3 * n * c + 3 * n * r + attention + n * cfg.hidden_dim();
        peak = peak.max(embed).max(block);
        in_ch = c;
        in_side = s;
    }
    Ok((peak * f32::BYTES) as u64)
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution == 0 || !resolution.is_multiple_of(RESOLUTION_STEP) {
        return Err(domain(format!(
            "resolution {resolution} must be a positive multiple of {RESOLUTION_STEP}"
        )));
    }
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// Median of `repeats` timed forwards after one discarded warmup, or `None`
/// if the model refuses the input size.
fn time_forward(model: &Model<f32>, resolution: usize, repeats: usize, seed: u64) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.spec.in_channels;
    let data = ndarray::Array2::from_shape_simple_fn((resolution * resolution, c), || rng.random_range(-1.0f32..1.0));
    let image = FeatureMap::new(data, resolution, resolution)?;
    let mut times = Vec::with_capacity(repeats);
    for i in 0..=repeats {
        let start = Instant::now();
        match model.logits_sample(&image) {
            Ok(_) => {}
            Err(Error::TooLarge { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
        if i > 0 {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(Some(median(times)))
}

/// One point per `(mode, resolution)`, modes in the given order and
/// resolutions ascending. Timed forwards run one at a time.
pub fn sweep(spec: &ModelSpec, modes: &[AttentionMode], resolutions: &[usize], options: &SweepOptions) -> Result<Vec<CurvePoint>> {
    if options.repeats < 3 {
        return Err(domain("repeats must be at least 3"));
    }
    if modes.is_empty() || resolutions.is_empty() {
        return Err(domain("need at least one mode and one resolution"));
    }
    let mut sorted = resolutions.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &r in &sorted {
        check_resolution(r)?;
        spec.stage_sides(r)?;
    }
    let mut points = Vec::with_capacity(modes.len() * sorted.len());
    for &mode in modes {
        let spec = spec.clone().with_mode(mode);
        let model = if options.analytic_only {
            None
        } else {
            Some(Model::<f32>::init(spec.clone(), options.seed)?)
        };
        for &r in &sorted {
            let report = flop_model(&spec, r, r, options.convention)?;
            let attention = attention_only_cost(&spec, r, r)?;
            let wall_ms = match &model {
                Some(m) => time_forward(m, r, options.repeats, options.seed)?,
                None => None,
            };
            points.push(CurvePoint {
                mode,
                resolution: r,
                gflops: report.gflops,
                attention_gflops: options.convention.flops(attention) as f64 / 1e9,
                wall_ms,
                peak_bytes: estimate_peak_bytes(&spec, r)?,
            });
        }
    }
    Ok(points)
}

/// Writes `points` as CSV; missing timings are written as `NA`.
pub fn write_csv<W: Write>(points: &[CurvePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for p in points {
        let wall = p.wall_ms.map_or_else(|| "NA".to_string(), |w| format!("{w:.3}"));
        writeln!(out, "{},{},{:.6},{},{}", p.mode, p.resolution, p.gflops, wall, p.peak_bytes)?;
    }
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(domain("need at least two paired points"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(domain("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(domain("x values must not all be equal"));
    }
    Ok(sxy / sxx)
}

/// Stage-one token count at `resolution`.
pub fn token_count(spec: &ModelSpec, resolution: usize) -> Result<usize> {
    let s = spec.stage_sides(resolution)?[0];
    Ok(s * s)
}

/// Slopes against the stage-one token count of one mode's points:
/// `(attention-only analytic, whole-model analytic, measured)`. The measured
/// slope is `None` when fewer than two points were timed.
pub fn fitted_slopes(spec: &ModelSpec, points: &[CurvePoint]) -> Result<(f64, f64, Option<f64>)> {
    let n: Vec<f64> = points
        .iter()
        .map(|p| token_count(spec, p.resolution).map(|n| n as f64))
        .collect::<Result<_>>()?;
    let attention: Vec<f64> = points.iter().map(|p| p.attention_gflops).collect();
    let total: Vec<f64> = points.iter().map(|p| p.gflops).collect();
    let timed: Vec<(f64, f64)> = n
        .iter()
        .zip(points)
        .filter_map(|(&n, p)| p.wall_ms.map(|w| (n, w)))
        .collect();
    let measured = if timed.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = timed.into_iter().unzip();
        Some(log_log_slope(&x, &y)?)
    } else {
        None
    };
    Ok((log_log_slope(&n, &attention)?, log_log_slope(&n, &total)?, measured))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::VariantSpec;

    fn small_spec() -> ModelSpec {
        ModelSpec::new(VariantSpec::tiny().scaled(8, &[1, 1, 1, 1]).unwrap(), 10)
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn analytic_sweep_is_ordered_and_deterministic() {
        let opts = SweepOptions { analytic_only: true, ..Default::default() };
        let modes = [AttentionMode::Vicinity2D, AttentionMode::SoftmaxOracle];
        let a = sweep(&small_spec(), &modes, &[128, 64, 96], &opts).unwrap();
        let b = sweep(&small_spec(), &modes, &[64, 96, 128], &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a.iter().map(|p| p.resolution).collect::<Vec<_>>(), [64, 96, 128, 64, 96, 128]);
    }

    #[test]
    fn softmax_refusal_is_recorded_as_na() {
        // 288 / 4 = 72 tokens per side, above the quadratic cap.
        let opts = SweepOptions::default();
        let pts = sweep(&small_spec(), &[AttentionMode::SoftmaxOracle], &[288], &opts).unwrap();
        assert_eq!(pts[0].wall_ms, None);
        let mut csv = Vec::new();
        write_csv(&pts, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        assert!(text.lines().nth(1).unwrap().contains(",NA,"));
    }

    #[test]
    fn rejects_bad_inputs() {
        let opts = SweepOptions::default();
        assert!(sweep(&small_spec(), &[AttentionMode::Vicinity2D], &[100], &opts).is_err());
        let few = SweepOptions { repeats: 2, ..opts };
        assert!(sweep(&small_spec(), &[AttentionMode::Vicinity2D], &[64], &few).is_err());
    }

    #[test]
    fn softmax_memory_grows_faster() {
        let s = small_spec();
        let v = |r| estimate_peak_bytes(&s.clone().with_mode(AttentionMode::Vicinity2D), r).unwrap();
        let q = |r| estimate_peak_bytes(&s.clone().with_mode(AttentionMode::SoftmaxOracle), r).unwrap();
        assert!(q(256) / q(128) > v(256) / v(128));
    }
}
