//! Self-checks bundled with the library: oracle equivalence, structural
//! invariants and gradient checks, each reported as one suite.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    linear_attention, locality_weight, quadratic_oracle, quadratic_oracle_weights, reweight_factor, AttentionMode,
    PositionGrid, DEFAULT_EPS,
};
use crate::backbone::{count_params, Model, ModelSpec, VariantSpec};
use crate::bench::block_attention_cost;
use crate::block::BlockConfig;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradTarget, Mutation};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    /// Oracle-equivalence tolerance.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::Double => 1e-10,
            Precision::Single => 1e-3,
        }
    }
}

/// A deliberate defect, for checking that the suites can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Fault {
    #[default]
    None,
    /// Perturbs one entry of every linear attention output by `1e-2`.
    OracleMismatch,
    /// Drops the normalizer term from every attention backward pass.
    GradientMutation,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checks: usize,
    pub failures: usize,
    /// Largest error observed, for suites that measure one.
    pub max_error: Option<f64>,
    pub tolerance: Option<f64>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.random_range(-1.0..1.0)))
}

fn oracle_cases<T: Real>(cases: usize, tol: f64, fault: Fault, seed: u64) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mode = AttentionMode::LINEAR[case % 3];
        let grid = PositionGrid::new(rng.random_range(1..=16), rng.random_range(1..=16))?;
        let n = grid.len();
        let d = rng.random_range(1..=32);
        let dv = rng.random_range(1..=32);
        let q = uniform::<T>(&mut rng, n, d);
        let k = uniform::<T>(&mut rng, n, d);
        let v = uniform::<T>(&mut rng, n, dv);
        let eps = T::of(DEFAULT_EPS);
        let mut fast = linear_attention(q.view(), k.view(), v.view(), &grid, mode, eps)?;
        if fault == Fault::OracleMismatch {
            fast[[0, 0]] += T::of(1e-2);
        }
        let slow = quadratic_oracle(q.view(), k.view(), v.view(), &grid, mode, eps)?;
        let err = fast
            .iter()
            .zip(&slow)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        failures += usize::from(!(err <= tol));
    }
    Ok((failures, worst))
}

/// Linear attention against the explicit quadratic oracle on random inputs.
pub fn oracle_suite(precision: Precision, fault: Fault, seed: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let cases = 60;
    let tol = precision.tolerance();
    let (failures, worst) = match precision {
        Precision::Double => oracle_cases::<f64>(cases, tol, fault, seed)?,
        Precision::Single => oracle_cases::<f32>(cases, tol, fault, seed)?,
    };
    Ok(SuiteResult {
        name: "oracle equivalence",
        checks: cases,
        failures,
        max_error: Some(worst),
        tolerance: Some(tol),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Structural properties: weight bounds, row sums, locality, cost scaling and
/// parameter accounting.
pub fn invariant_suite(seed: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut checks = 0;
    let mut failures = 0;
    let mut check = |ok: bool| {
        checks += 1;
        failures += usize::from(!ok);
    };

    let grid = PositionGrid::square(8)?;
    for i in 0..grid.len() {
        check(reweight_factor(i, i, &grid)? == 2.0);
        for j in 0..grid.len() {
            let w = reweight_factor(i, j, &grid)?;
            check((0.0..=2.0).contains(&w) && w == reweight_factor(j, i, &grid)?);
        }
    }

    let ones = Array2::<f64>::ones((64, 4));
    let w = quadratic_oracle_weights(ones.view(), ones.view(), &grid, AttentionMode::Vicinity2D, DEFAULT_EPS)?;
    for i in 0..64 {
        let (r, c) = grid.unflatten_index(i)?;
        for cc in c + 1..8 {
            check(w[[i, grid.flatten_index(r, cc)?]] <= w[[i, grid.flatten_index(r, cc - 1)?]]);
        }
        for rr in r + 1..8 {
            check(w[[i, grid.flatten_index(rr, c)?]] <= w[[i, grid.flatten_index(rr - 1, c)?]]);
        }
        check((0..64).all(|j| j == i || w[[i, j]] < w[[i, i]]));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..30 {
        let mode = AttentionMode::LINEAR[case % 3];
        let g = PositionGrid::new(rng.random_range(1..=10), rng.random_range(1..=10))?;
        let q = uniform::<f64>(&mut rng, g.len(), 6);
        let k = uniform::<f64>(&mut rng, g.len(), 6);
        let w = quadratic_oracle_weights(q.view(), k.view(), &g, mode, DEFAULT_EPS)?;
        check(w.iter().all(|&x| x >= 0.0));
        let (qp, kp) = (q.mapv(|x| x.max(0.0)), k.mapv(|x| x.max(0.0)));
        for (i, row) in w.outer_iter().enumerate() {
            let mut mass = 0.0;
            for j in 0..g.len() {
                mass += qp.row(i).dot(&kp.row(j)) * locality_weight(i, j, &g, mode)?;
            }
            let want = if mass > DEFAULT_EPS { 1.0 } else { mass / DEFAULT_EPS };
            check((row.sum() - want).abs() <= 1e-9);
        }
    }

    for mode in AttentionMode::ALL {
        let cfg = BlockConfig::new(64, 2, 2, 4, mode);
        let ratio = if mode.is_linear() { 2 } else { 4 };
        check(block_attention_cost(&cfg, 2048).macs == ratio * block_attention_cost(&cfg, 1024).macs);
    }

    let spec = ModelSpec::new(VariantSpec::tiny().scaled(8, &[1, 1, 1, 1])?, 10);
    check(Model::<f32>::init(spec.clone(), 0)?.num_params() == count_params(&spec));

    Ok(SuiteResult {
        name: "invariants",
        checks,
        failures,
        max_error: None,
        tolerance: None,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Finite-difference checks of every backward pass, plus a mutated backward
/// that must be rejected.
pub fn gradient_suite(fault: Fault, seed: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let opts = GradCheckOptions {
        mutation: if fault == Fault::GradientMutation { Mutation::DropNormalizer } else { Mutation::None },
        ..Default::default()
    };
    let mut targets: Vec<GradTarget> = AttentionMode::LINEAR
        .iter()
        .map(|&m| GradTarget::linear_attention(4, 4, 4, m))
        .collect();
    targets.push(GradTarget::softmax(8, 4));
    targets.extend(AttentionMode::ALL.iter().map(|&mode| GradTarget::Block {
        config: BlockConfig::new(8, 2, 2, 2, mode),
        rows: 3,
        cols: 4,
    }));
    targets.push(GradTarget::mini_backbone(AttentionMode::Vicinity2D));

    let mut checks = 0;
    let mut failures = 0;
    let mut worst = 0.0f64;
    for t in &targets {
        for s in 0..3 {
            let r = grad_check(t, seed.wrapping_add(s), &opts)?;
            worst = worst.max(r.max_rel_error);
            checks += 1;
            failures += usize::from(!r.passed);
        }
    }
    let control = GradCheckOptions { mutation: Mutation::DropNormalizer, ..Default::default() };
    let caught = !grad_check(&GradTarget::linear_attention(4, 4, 4, AttentionMode::Vicinity2D), seed, &control)?.passed;
    checks += 1;
    failures += usize::from(!caught);

    Ok(SuiteResult {
        name: "gradients",
        checks,
        failures,
        max_error: Some(worst),
        tolerance: Some(opts.tol),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// All suites; `seed` fixes every random case.
pub fn run_all(precision: Precision, fault: Fault, seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        oracle_suite(precision, fault, seed)?,
        invariant_suite(seed)?,
        gradient_suite(fault, seed)?,
    ])
}
