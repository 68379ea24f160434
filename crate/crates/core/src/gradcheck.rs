//! Central finite-difference checks of the hand-written backward passes.
//!
//! Each target evaluates the scalar loss `sum(G * output)` for a fixed random
//! weighting `G`, computes its gradient with the analytic backward pass and
//! compares selected coordinates against `(L(x + h) - L(x - h)) / 2h`.
//!
//! The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`.
//! Points where any ReLU input lies within `10 h` of zero are not
//! differentiable at the resolution of the check; such samples are redrawn
//! and the number of redraws is reported.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{
    attention_backward_impl, attention_forward, AttentionMode, PositionGrid, DEFAULT_EPS,
};
use crate::backbone::{Model, ModelParams, ModelSpec, StageSpec, VariantSpec};
use crate::block::{block_backward_impl, block_forward_sample, BlockConfig, BlockParams};
use crate::error::{domain, Result};
use crate::nn::FeatureMap;
use crate::params::ParamSet;

/// What to differentiate.
#[derive(Clone, Debug)]
pub enum GradTarget {
    /// Any attention mode on a `rows x cols` grid; gradients w.r.t. `Q, K, V`.
    Attention {
        rows: usize,
        cols: usize,
        dim: usize,
        value_dim: usize,
        mode: AttentionMode,
    },
    /// One block; gradients w.r.t. its input and parameters.
    Block {
        config: BlockConfig,
        rows: usize,
        cols: usize,
    },
    /// A small backbone; gradients w.r.t. the image and parameters, loss on
    /// the last stage's features.
    Backbone { spec: ModelSpec, image_side: usize },
}

impl GradTarget {
    pub fn linear_attention(rows: usize, cols: usize, dim: usize, mode: AttentionMode) -> Self {
        GradTarget::Attention {
            rows,
            cols,
            dim,
            value_dim: dim,
            mode,
        }
    }

    pub fn softmax(tokens: usize, dim: usize) -> Self {
        GradTarget::Attention {
            rows: 1,
            cols: tokens,
            dim,
            value_dim: dim,
            mode: AttentionMode::SoftmaxOracle,
        }
    }

    /// Two stages with one block each on a 16x16 image.
    pub fn mini_backbone(mode: AttentionMode) -> Self {
        let stage = |channels, patch_size, heads| StageSpec {
            channels,
            patch_size,
            fr_ratio: 2,
            heads,
            expansion: 2,
            depth: 1,
        };
        let variant = VariantSpec {
            name: "mini".to_string(),
            stages: vec![stage(8, 4, 1), stage(16, 2, 2)],
        };
        let mut spec = ModelSpec::new(variant, 3).with_mode(mode);
        spec.in_channels = 2;
        GradTarget::Backbone {
            spec,
            image_side: 16,
        }
    }

    pub fn label(&self) -> String {
        match self {
            GradTarget::Attention { rows, cols, dim, mode, .. } => {
                format!("attention[{mode}, {rows}x{cols}, d={dim}]")
            }
            GradTarget::Block { config, rows, cols } => format!(
                "block[{}, C={}, H={}, R={}, fpc={}, {rows}x{cols}]",
                config.mode, config.dim, config.heads, config.fr_ratio, config.fpc
            ),
            GradTarget::Backbone { spec, image_side } => format!(
                "backbone[{}, {} stages, {image_side}px]",
                spec.mode,
                spec.variant.stages.len()
            ),
        }
    }
}

/// Deliberate corruptions of the backward pass, for negative controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Mutation {
    #[default]
    None,
    /// Drop the gradient path through the attention normalizer.
    DropNormalizer,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates sampled per parameter tensor (all when the tensor is smaller).
    pub coords_per_tensor: usize,
    pub max_resamples: usize,
    pub mutation: Mutation,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-5,
            floor: 1e-3,
            coords_per_tensor: 24,
            max_resamples: 32,
            mutation: Mutation::None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub target: String,
    pub seed: u64,
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
    pub checked: usize,
    pub resampled: usize,
    pub passed: bool,
}

/// A differentiable function of a flat vector with named segments.
trait Problem {
    fn point(&self) -> &[f64];
    fn segments(&self) -> &[(String, Range<usize>)];
    fn loss(&self, x: &[f64]) -> Result<f64>;
    /// Analytic gradient at the stored point and the smallest ReLU input.
    fn analytic(&self, mutation: Mutation) -> Result<(Vec<f64>, Option<f64>)>;
}

fn drop_normalizer(m: Mutation) -> bool {
    m == Mutation::DropNormalizer
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn weighted_sum(a: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (a * w).sum()
}

fn view<'a>(x: &'a [f64], range: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &x[range.clone()]).expect("segment shape")
}

struct AttentionProblem {
    grid: PositionGrid,
    dim: usize,
    value_dim: usize,
    mode: AttentionMode,
    weights: Array2<f64>,
    x: Vec<f64>,
    segments: Vec<(String, Range<usize>)>,
}

impl AttentionProblem {
    fn new(rows: usize, cols: usize, dim: usize, value_dim: usize, mode: AttentionMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        let grid = PositionGrid::new(rows, cols)?;
        let n = grid.len();
        let q = uniform_matrix(rng, n, dim);
        let k = uniform_matrix(rng, n, dim);
        let v = uniform_matrix(rng, n, value_dim);
        let weights = normal_matrix(rng, n, value_dim);
        let qk = n * dim;
        let segments = vec![
            ("Q".to_string(), 0..qk),
            ("K".to_string(), qk..2 * qk),
            ("V".to_string(), 2 * qk..2 * qk + n * value_dim),
        ];
        let x = q.iter().chain(k.iter()).chain(v.iter()).copied().collect();
        Ok(Self { grid, dim, value_dim, mode, weights, x, segments })
    }

    fn operands<'a>(&self, x: &'a [f64]) -> [ArrayView2<'a, f64>; 3] {
        let n = self.grid.len();
        [
            view(x, &self.segments[0].1, n, self.dim),
            view(x, &self.segments[1].1, n, self.dim),
            view(x, &self.segments[2].1, n, self.value_dim),
        ]
    }
}

impl Problem for AttentionProblem {
    fn point(&self) -> &[f64] {
        &self.x
    }

    fn segments(&self) -> &[(String, Range<usize>)] {
        &self.segments
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let [q, k, v] = self.operands(x);
        let c = attention_forward(q, k, v, &self.grid, self.mode, DEFAULT_EPS)?;
        Ok(weighted_sum(c.output(), &self.weights))
    }

    fn analytic(&self, mutation: Mutation) -> Result<(Vec<f64>, Option<f64>)> {
        let [q, k, v] = self.operands(&self.x);
        let c = attention_forward(q, k, v, &self.grid, self.mode, DEFAULT_EPS)?;
        let (dq, dk, dv) = attention_backward_impl(&c, self.weights.view(), drop_normalizer(mutation));
        let g = dq.iter().chain(dk.iter()).chain(dv.iter()).copied().collect();
        Ok((g, c.min_kernel_input()))
    }
}

/// Fills every parameter with `U(-scale, scale)` so all paths carry signal.
fn randomize<P: ParamSet<f64>>(params: &mut P, scale: f64, rng: &mut ChaCha8Rng) {
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn flatten<P: ParamSet<f64>>(params: &P, offset: usize, segments: &mut Vec<(String, Range<usize>)>, x: &mut Vec<f64>) {
    let mut at = offset;
    for t in params.tensors() {
        segments.push((t.name, at..at + t.data.len()));
        x.extend_from_slice(t.data);
        at += t.data.len();
    }
}

fn unflatten<P: ParamSet<f64>>(template: &P, x: &[f64], offset: usize) -> P {
    let mut p = template.clone();
    let mut at = offset;
    for t in p.tensors_mut() {
        let len = t.data.len();
        t.data.copy_from_slice(&x[at..at + len]);
        at += len;
    }
    p
}

struct BlockProblem {
    config: BlockConfig,
    grid: PositionGrid,
    template: BlockParams<f64>,
    weights: Array2<f64>,
    x: Vec<f64>,
    segments: Vec<(String, Range<usize>)>,
}

impl BlockProblem {
    fn new(config: BlockConfig, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let grid = PositionGrid::new(rows, cols)?;
        let n = grid.len();
        let mut template = BlockParams::<f64>::zeros(&config)?;
        randomize(&mut template, 0.5, rng);
        let input = uniform_matrix(rng, n, config.dim);
        let weights = normal_matrix(rng, n, config.dim);
        let mut x: Vec<f64> = input.iter().copied().collect();
        let mut segments = vec![("input".to_string(), 0..x.len())];
        flatten(&template, x.len(), &mut segments, &mut x);
        Ok(Self { config, grid, template, weights, x, segments })
    }

    fn split<'a>(&self, x: &'a [f64]) -> (ArrayView2<'a, f64>, BlockParams<f64>) {
        let input = &self.segments[0].1;
        (
            view(x, input, self.grid.len(), self.config.dim),
            unflatten(&self.template, x, input.end),
        )
    }
}

impl Problem for BlockProblem {
    fn point(&self) -> &[f64] {
        &self.x
    }

    fn segments(&self) -> &[(String, Range<usize>)] {
        &self.segments
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let (input, params) = self.split(x);
        let (z, _) = block_forward_sample(input, &self.grid, &params, &self.config)?;
        Ok(weighted_sum(&z, &self.weights))
    }

    fn analytic(&self, mutation: Mutation) -> Result<(Vec<f64>, Option<f64>)> {
        let (input, params) = self.split(&self.x);
        let (_, cache) = block_forward_sample(input, &self.grid, &params, &self.config)?;
        let mut grad = params.zeros_like();
        let dx = block_backward_impl(
            &cache,
            &params,
            &self.config,
            self.weights.view(),
            &mut grad,
            drop_normalizer(mutation),
        );
        let mut g: Vec<f64> = dx.iter().copied().collect();
        for t in grad.tensors() {
            g.extend_from_slice(t.data);
        }
        let kink = cache
            .attention()
            .iter()
            .filter_map(|a| a.min_kernel_input())
            .reduce(f64::min);
        Ok((g, kink))
    }
}

struct BackboneProblem {
    model: Model<f64>,
    side: usize,
    weights: Array2<f64>,
    x: Vec<f64>,
    segments: Vec<(String, Range<usize>)>,
}

impl BackboneProblem {
    fn new(spec: ModelSpec, side: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut model = Model::<f64>::init(spec, rng.random())?;
        randomize(&mut model.params, 0.5, rng);
        let channels = model.spec.in_channels;
        let image = uniform_matrix(rng, side * side, channels);
        let final_side = model.spec.stage_sides(side)?.last().copied().unwrap_or(0);
        let weights = normal_matrix(rng, final_side * final_side, model.spec.variant.final_channels());
        let mut x: Vec<f64> = image.iter().copied().collect();
        let mut segments = vec![("image".to_string(), 0..x.len())];
        flatten(&model.params, x.len(), &mut segments, &mut x);
        Ok(Self { model, side, weights, x, segments })
    }

    fn split(&self, x: &[f64]) -> Result<(FeatureMap<f64>, Model<f64>)> {
        let image = &self.segments[0].1;
        let map = FeatureMap::new(
            view(x, image, self.side * self.side, self.model.spec.in_channels).to_owned(),
            self.side,
            self.side,
        )?;
        let params: ModelParams<f64> = unflatten(&self.model.params, x, image.end);
        Ok((map, Model { spec: self.model.spec.clone(), params }))
    }
}

impl Problem for BackboneProblem {
    fn point(&self) -> &[f64] {
        &self.x
    }

    fn segments(&self) -> &[(String, Range<usize>)] {
        &self.segments
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let (image, model) = self.split(x)?;
        let (features, _) = model.features_sample(&image)?;
        Ok(weighted_sum(&features.last().unwrap().data, &self.weights))
    }

    fn analytic(&self, mutation: Mutation) -> Result<(Vec<f64>, Option<f64>)> {
        let (image, model) = self.split(&self.x)?;
        let (_, cache) = model.features_sample(&image)?;
        let mut grad = model.params.zeros_like();
        let d_image = model.features_backward_impl(
            &cache,
            self.weights.clone(),
            &mut grad,
            drop_normalizer(mutation),
        );
        let mut g: Vec<f64> = d_image.iter().copied().collect();
        for t in grad.tensors() {
            g.extend_from_slice(t.data);
        }
        Ok((g, cache.min_kernel_input()))
    }
}

fn build(target: &GradTarget, rng: &mut ChaCha8Rng) -> Result<Box<dyn Problem>> {
    Ok(match target {
        GradTarget::Attention { rows, cols, dim, value_dim, mode } => {
            Box::new(AttentionProblem::new(*rows, *cols, *dim, *value_dim, *mode, rng)?)
        }
        GradTarget::Block { config, rows, cols } => Box::new(BlockProblem::new(*config, *rows, *cols, rng)?),
        GradTarget::Backbone { spec, image_side } => {
            Box::new(BackboneProblem::new(spec.clone(), *image_side, rng)?)
        }
    })
}

/// Runs one gradient check. Passes iff the worst relative error is `<= tol`.
pub fn grad_check(target: &GradTarget, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) || !(opts.tol > 0.0) {
        return Err(domain("step and tol must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resampled = 0;
    let (problem, analytic) = loop {
        let problem = build(target, &mut rng)?;
        let (analytic, kink) = problem.analytic(opts.mutation)?;
        if kink.is_none_or(|k| k >= 10.0 * opts.step) {
            break (problem, analytic);
        }
        resampled += 1;
        if resampled > opts.max_resamples {
            return Err(domain(format!(
                "no differentiable sample found for {} after {resampled} draws",
                target.label()
            )));
        }
    };

    let mut x = problem.point().to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0;
    for (name, range) in problem.segments() {
        let len = range.len();
        let picks: Vec<usize> = if len <= opts.coords_per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, opts.coords_per_tensor).into_vec()
        };
        for p in picks {
            let i = range.start + p;
            let orig = x[i];
            x[i] = orig + opts.step;
            let up = problem.loss(&x)?;
            x[i] = orig - opts.step;
            let down = problem.loss(&x)?;
            x[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > max_rel || !rel.is_finite() {
                max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
                worst = name.clone();
            }
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        target: target.label(),
        seed,
        max_rel_error: max_rel,
        worst,
        checked,
        resampled,
        passed: max_rel <= opts.tol,
    })
}
