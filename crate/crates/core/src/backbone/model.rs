use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::spec::{ModelSpec, VariantSpec};
use crate::attention::{AttentionMode, PositionGrid, TokenGrid};
use crate::block::{block_backward_impl, block_forward_sample, BlockCache, BlockParams, INIT_STD};
use crate::error::{domain, shape, Result};
use crate::nn::{Conv2d, FeatureMap, LayerNorm, LayerNormCache, Linear};
use crate::params::{join, ParamSet, TensorMut, TensorRef};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T> {
    pub embed: Conv2d<T>,
    pub embed_norm: LayerNorm<T>,
    pub blocks: Vec<BlockParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub stages: Vec<StageParams<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Real> ParamSet<T> for StageParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.embed.collect(&join(prefix, "embed"), out);
        self.embed_norm.collect(&join(prefix, "embed_norm"), out);
        self.blocks.collect(&join(prefix, "blocks"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.embed.collect_mut(&join(prefix, "embed"), out);
        self.embed_norm.collect_mut(&join(prefix, "embed_norm"), out);
        self.blocks.collect_mut(&join(prefix, "blocks"), out);
    }
}

impl<T: Real> ParamSet<T> for ModelParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.stages.collect(&join(prefix, "stages"), out);
        self.norm.collect(&join(prefix, "norm"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.stages.collect_mut(&join(prefix, "stages"), out);
        self.norm.collect_mut(&join(prefix, "norm"), out);
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}

/// Closed-form parameter count, independent of any materialized model.
pub fn count_params(spec: &ModelSpec) -> usize {
    let mut total = 0;
    let mut in_ch = spec.in_channels;
    for (i, s) in spec.variant.stages.iter().enumerate() {
        let k = spec.embed_geometry(i).kernel;
        total += Conv2d::<f32>::param_count(in_ch, s.channels, k);
        total += LayerNorm::<f32>::param_count(s.channels);
        total += s.depth * BlockParams::<f32>::param_count(&spec.block_config(i));
        in_ch = s.channels;
    }
    let c = spec.variant.final_channels();
    total + LayerNorm::<f32>::param_count(c) + Linear::<f32>::param_count(c, spec.class_count)
}

/// Per-stage forward state for one sample.
pub struct StageCache<T> {
    input_height: usize,
    input_width: usize,
    unfolded: Array2<T>,
    embed_norm: LayerNormCache<T>,
    blocks: Vec<BlockCache<T>>,
}

pub struct ForwardCache<T> {
    stages: Vec<StageCache<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Smallest `|x|` over every ReLU kernel input in the network.
    pub fn min_kernel_input(&self) -> Option<T> {
        self.stages
            .iter()
            .flat_map(|s| s.blocks.iter())
            .flat_map(|b| b.attention().iter())
            .filter_map(|a| a.min_kernel_input())
            .reduce(|a, b| a.min(b))
    }
}

pub struct HeadCache<T> {
    norm: LayerNormCache<T>,
    pooled: Array2<T>,
    tokens: usize,
}

/// A backbone with its classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    /// Truncated-normal weights (std 0.02), zero biases, unit norm scales.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(spec.variant.stages.len());
        let mut in_ch = spec.in_channels;
        for (i, s) in spec.variant.stages.iter().enumerate() {
            let embed = Conv2d::init(in_ch, s.channels, spec.embed_geometry(i), INIT_STD, &mut rng);
            let cfg = spec.block_config(i);
            let blocks = (0..s.depth)
                .map(|_| BlockParams::init(&cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(StageParams {
                embed,
                embed_norm: LayerNorm::new(s.channels),
                blocks,
            });
            in_ch = s.channels;
        }
        let c = spec.variant.final_channels();
        let head = Linear::init(c, spec.class_count, INIT_STD, &mut rng);
        Ok(Self {
            params: ModelParams {
                stages,
                norm: LayerNorm::new(c),
                head,
            },
            spec,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Applies stage `stage`'s patch embedding and its layer norm.
    pub fn patch_embed(&self, stage: usize, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let p = self
            .params
            .stages
            .get(stage)
            .ok_or_else(|| domain(format!("no stage {stage}")))?;
        let y = p.embed.forward(x)?;
        let data = p.embed_norm.forward(y.data.view());
        FeatureMap::new(data, y.height, y.width)
    }

    fn check_image(&self, image: &FeatureMap<T>) -> Result<()> {
        let stride = self.spec.variant.total_stride();
        if image.channels() != self.spec.in_channels {
            return Err(shape(format!(
                "image has {} channels, model expects {}",
                image.channels(),
                self.spec.in_channels
            )));
        }
        if image.height == 0
            || image.width == 0
            || !image.height.is_multiple_of(stride)
            || !image.width.is_multiple_of(stride)
        {
            return Err(domain(format!(
                "image {}x{} must have sides divisible by {stride}",
                image.height, image.width
            )));
        }
        Ok(())
    }

    /// Multi-scale features of one image, one map per stage.
    pub fn features_sample(&self, image: &FeatureMap<T>) -> Result<(Vec<FeatureMap<T>>, ForwardCache<T>)> {
        self.check_image(image)?;
        let mut x = image.clone();
        let mut outputs = Vec::with_capacity(self.params.stages.len());
        let mut caches = Vec::with_capacity(self.params.stages.len());
        for (i, stage) in self.params.stages.iter().enumerate() {
            let (embedded, unfolded) = stage.embed.forward_train(&x)?;
            let (mut tokens, embed_norm) = stage.embed_norm.forward_train(embedded.data.view());
            let grid = PositionGrid::new(embedded.height, embedded.width)?;
            let cfg = self.spec.block_config(i);
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for bp in &stage.blocks {
                let (z, cache) = block_forward_sample(tokens.view(), &grid, bp, &cfg)?;
                tokens = z;
                blocks.push(cache);
            }
            caches.push(StageCache {
                input_height: x.height,
                input_width: x.width,
                unfolded,
                embed_norm,
                blocks,
            });
            x = FeatureMap::new(tokens, embedded.height, embedded.width)?;
            outputs.push(x.clone());
        }
        Ok((outputs, ForwardCache { stages: caches }))
    }

    /// Final norm, token mean pool and linear classifier on the last stage.
    pub fn head_forward(&self, features: ArrayView2<'_, T>) -> Result<(Array1<T>, HeadCache<T>)> {
        if features.ncols() != self.spec.variant.final_channels() || features.nrows() == 0 {
            return Err(shape(format!(
                "head expects (N, {}) features, got {:?}",
                self.spec.variant.final_channels(),
                features.dim()
            )));
        }
        let (normed, norm) = self.params.norm.forward_train(features);
        let pooled = normed.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let logits = self.params.head.forward(pooled.view()).row(0).to_owned();
        Ok((
            logits,
            HeadCache {
                norm,
                pooled,
                tokens: features.nrows(),
            },
        ))
    }

    /// Gradient of the final features from a gradient of the logits.
    pub fn head_backward(&self, cache: &HeadCache<T>, d_logits: &Array1<T>, grad: &mut ModelParams<T>) -> Array2<T> {
        let d_logits = d_logits.view().insert_axis(Axis(0));
        let d_pooled = self.params.head.backward(cache.pooled.view(), d_logits, &mut grad.head);
        let scale = T::one() / T::from_usize(cache.tokens).unwrap();
        let mut d_normed = Array2::zeros((cache.tokens, d_pooled.ncols()));
        d_normed += &d_pooled.mapv(|g| g * scale);
        self.params.norm.backward(&cache.norm, d_normed.view(), &mut grad.norm)
    }

    /// Backpropagates a gradient of the last stage's features through every
    /// stage; returns the image gradient.
    pub fn features_backward(&self, cache: &ForwardCache<T>, d_final: Array2<T>, grad: &mut ModelParams<T>) -> Array2<T> {
        self.features_backward_impl(cache, d_final, grad, false)
    }

    pub(crate) fn features_backward_impl(
        &self,
        cache: &ForwardCache<T>,
        d_final: Array2<T>,
        grad: &mut ModelParams<T>,
        drop_normalizer: bool,
    ) -> Array2<T> {
        let mut d = d_final;
        for (i, (stage, sc)) in self.params.stages.iter().zip(&cache.stages).enumerate().rev() {
            let cfg = self.spec.block_config(i);
            let g = &mut grad.stages[i];
            for (j, (bp, bc)) in stage.blocks.iter().zip(&sc.blocks).enumerate().rev() {
                d = block_backward_impl(bc, bp, &cfg, d.view(), &mut g.blocks[j], drop_normalizer);
            }
            let d_embed = stage.embed_norm.backward(&sc.embed_norm, d.view(), &mut g.embed_norm);
            d = stage.embed.backward(&sc.unfolded, sc.input_height, sc.input_width, d_embed.view(), &mut g.embed);
        }
        d
    }

    pub fn logits_sample(&self, image: &FeatureMap<T>) -> Result<Array1<T>> {
        let (features, _) = self.features_sample(image)?;
        let last = features.last().expect("at least one stage");
        self.head_forward(last.data.view()).map(|(l, _)| l)
    }

    /// Cross-entropy loss and parameter gradients for one labelled image.
    pub fn loss_and_grad_sample(&self, image: &FeatureMap<T>, label: usize) -> Result<(T, ModelParams<T>)> {
        let (features, cache) = self.features_sample(image)?;
        let last = features.last().expect("at least one stage");
        let (logits, head_cache) = self.head_forward(last.data.view())?;
        let (loss, d_logits) = cross_entropy(&logits, label)?;
        let mut grad = self.params.zeros_like();
        let d_final = self.head_backward(&head_cache, &d_logits, &mut grad);
        self.features_backward(&cache, d_final, &mut grad);
        Ok((loss, grad))
    }
}

/// `-log softmax(logits)[label]` and its gradient.
pub fn cross_entropy<T: Real>(logits: &Array1<T>, label: usize) -> Result<(T, Array1<T>)> {
    if label >= logits.len() {
        return Err(domain(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut p = logits.mapv(|x| (x - max).exp());
    let total: T = p.sum();
    p.mapv_inplace(|x| x / total);
    let loss = -(p[label].ln());
    let mut grad = p;
    grad[label] -= T::one();
    Ok((loss, grad))
}

fn image_batch<T: Real>(images: &ArrayView4<'_, T>, b: usize) -> FeatureMap<T> {
    let img = images.index_axis(Axis(0), b);
    let (c, h, w) = img.dim();
    let data = Array2::from_shape_fn((h * w, c), |(p, ch)| img[[ch, p / w, p % w]]);
    FeatureMap { data, height: h, width: w }
}

/// Runs the pyramid on a `(batch, channels, height, width)` image batch and
/// returns one token grid per stage. Samples are evaluated in parallel.
pub fn backbone_forward<T: Real>(images: ArrayView4<'_, T>, model: &Model<T>) -> Result<Vec<TokenGrid<T>>> {
    let batch = images.shape()[0];
    let per_sample = (0..batch)
        .into_par_iter()
        .map(|b| model.features_sample(&image_batch(&images, b)).map(|(f, _)| f))
        .collect::<Result<Vec<_>>>()?;
    let stages = model.params.stages.len();
    (0..stages)
        .map(|s| {
            let first = per_sample
                .first()
                .map(|f| &f[s])
                .ok_or_else(|| domain("empty image batch"))?;
            let mut data = Array3::zeros((batch, first.data.nrows(), first.channels()));
            for (b, f) in per_sample.iter().enumerate() {
                data.index_axis_mut(Axis(0), b).assign(&f[s].data);
            }
            TokenGrid::new(data, PositionGrid::new(first.height, first.width)?)
        })
        .collect()
}

/// Logits `(batch, classes)` from final-stage features.
pub fn classify<T: Real>(features: &TokenGrid<T>, model: &Model<T>) -> Result<Array2<T>> {
    let mut out = Array2::zeros((features.batch(), model.spec.class_count));
    for (sample, mut row) in features.data.outer_iter().zip(out.outer_iter_mut()) {
        let (logits, _) = model.head_forward(sample)?;
        row.assign(&logits);
    }
    Ok(out)
}

/// Builds one of the named variants with freshly initialized weights.
pub fn build_variant<T: Real>(
    name: &str,
    class_count: usize,
    mode: AttentionMode,
    fpc: bool,
    seed: u64,
) -> Result<Model<T>> {
    let spec = ModelSpec::new(VariantSpec::by_name(name)?, class_count)
        .with_mode(mode)
        .with_fpc(fpc);
    Model::init(spec, seed)
}
