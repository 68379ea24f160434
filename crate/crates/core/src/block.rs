//! The vicinity attention block.
//!
//! Pre-norm wiring (default):
//!
//! ```text
//! h = LN1(x)
//! y = x + W_O(concat_h attn_h(h W_Q, h W_K, h W_V)) + FPC(h)
//! z = y + FFN(LN2(y))
//! ```
//!
//! Queries, keys and values are projected to `C / R` channels (feature
//! reduction) before being split into heads. The FPC branch pools `h` over
//! tokens, runs two `C x C` linears with a GELU between them and broadcasts
//! the resulting vector back to every token.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_backward_impl, attention_forward, AttentionCache, AttentionMode, PositionGrid,
    TokenGrid, DEFAULT_EPS,
};
use crate::error::{domain, shape, Result};
use crate::nn::{gelu, gelu_backward, Activation, LayerNorm, LayerNormCache, Linear};
use crate::params::{join, ParamSet, TensorMut, TensorRef};
use crate::scalar::Real;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Channel count `C`.
    pub dim: usize,
    pub heads: usize,
    /// Feature reduction divisor `R`; attention runs on `C / R` channels.
    pub fr_ratio: usize,
    /// FFN widening factor `E`.
    pub expansion: usize,
    pub mode: AttentionMode,
    /// Feature preserving connection on/off.
    pub fpc: bool,
    /// Normalize after each residual add instead of before each branch.
    pub post_norm: bool,
    /// Attention denominator clamp.
    pub eps: f64,
}

impl BlockConfig {
    pub fn new(dim: usize, heads: usize, fr_ratio: usize, expansion: usize, mode: AttentionMode) -> Self {
        Self {
            dim,
            heads,
            fr_ratio,
            expansion,
            mode,
            fpc: true,
            post_norm: false,
            eps: DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 {
            return Err(domain("block needs at least one channel and one head"));
        }
        if self.fr_ratio == 0 || self.expansion == 0 {
            return Err(domain("fr_ratio and expansion must be at least 1"));
        }
        if !self.dim.is_multiple_of(self.fr_ratio * self.heads) {
            return Err(domain(format!(
                "dim {} is not divisible by fr_ratio * heads = {}",
                self.dim,
                self.fr_ratio * self.heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(domain("eps must be positive"));
        }
        Ok(())
    }

    /// Attention width `C / R`.
    pub fn reduced_dim(&self) -> usize {
        self.dim / self.fr_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.reduced_dim() / self.heads
    }

    /// Per-head width after the angle expansion, `None` for softmax.
    pub fn expanded_head_dim(&self) -> Option<usize> {
        self.mode.expansion_factor().map(|f| f * self.head_dim())
    }

    pub fn hidden_dim(&self) -> usize {
        self.expansion * self.dim
    }
}

/// Pooled two-layer side branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FpcParams<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub norm1: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    /// `None` when the block was built with the connection disabled.
    pub fpc: Option<FpcParams<T>>,
    pub norm2: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

impl<T: Real> BlockParams<T> {
    pub fn init<R: Rng + ?Sized>(config: &BlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let r = config.reduced_dim();
        let e = config.hidden_dim();
        let std = INIT_STD;
        Ok(Self {
            norm1: LayerNorm::new(c),
            query: Linear::init(c, r, std, rng),
            key: Linear::init(c, r, std, rng),
            value: Linear::init(c, r, std, rng),
            out: Linear::init(r, c, std, rng),
            fpc: config.fpc.then(|| FpcParams {
                fc1: Linear::init(c, c, std, rng),
                fc2: Linear::init(c, c, std, rng),
            }),
            norm2: LayerNorm::new(c),
            ffn_in: Linear::init(c, e, std, rng),
            ffn_out: Linear::init(e, c, std, rng),
        })
    }

    /// All-zero weights with unit norm scales.
    pub fn zeros(config: &BlockConfig) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let r = config.reduced_dim();
        let e = config.hidden_dim();
        Ok(Self {
            norm1: LayerNorm::new(c),
            query: Linear::zeros(c, r),
            key: Linear::zeros(c, r),
            value: Linear::zeros(c, r),
            out: Linear::zeros(r, c),
            fpc: config.fpc.then(|| FpcParams {
                fc1: Linear::zeros(c, c),
                fc2: Linear::zeros(c, c),
            }),
            norm2: LayerNorm::new(c),
            ffn_in: Linear::zeros(c, e),
            ffn_out: Linear::zeros(e, c),
        })
    }

    /// Closed-form parameter count for a block built from `config`.
    pub fn param_count(config: &BlockConfig) -> usize {
        let c = config.dim;
        let r = config.reduced_dim();
        let e = config.hidden_dim();
        let fpc = if config.fpc { 2 * Linear::<T>::param_count(c, c) } else { 0 };
        2 * LayerNorm::<T>::param_count(c)
            + 3 * Linear::<T>::param_count(c, r)
            + Linear::<T>::param_count(r, c)
            + fpc
            + Linear::<T>::param_count(c, e)
            + Linear::<T>::param_count(e, c)
    }
}

impl<T: Real> ParamSet<T> for FpcParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.fc1.collect_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_mut(&join(prefix, "fc2"), out);
    }
}

impl<T: Real> ParamSet<T> for BlockParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.query.collect(&join(prefix, "query"), out);
        self.key.collect(&join(prefix, "key"), out);
        self.value.collect(&join(prefix, "value"), out);
        self.out.collect(&join(prefix, "out"), out);
        if let Some(fpc) = &self.fpc {
            fpc.collect(&join(prefix, "fpc"), out);
        }
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.ffn_in.collect(&join(prefix, "ffn_in"), out);
        self.ffn_out.collect(&join(prefix, "ffn_out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.norm1.collect_mut(&join(prefix, "norm1"), out);
        self.query.collect_mut(&join(prefix, "query"), out);
        self.key.collect_mut(&join(prefix, "key"), out);
        self.value.collect_mut(&join(prefix, "value"), out);
        self.out.collect_mut(&join(prefix, "out"), out);
        if let Some(fpc) = &mut self.fpc {
            fpc.collect_mut(&join(prefix, "fpc"), out);
        }
        self.norm2.collect_mut(&join(prefix, "norm2"), out);
        self.ffn_in.collect_mut(&join(prefix, "ffn_in"), out);
        self.ffn_out.collect_mut(&join(prefix, "ffn_out"), out);
    }
}

fn check_params<T: Real>(params: &BlockParams<T>, config: &BlockConfig) -> Result<()> {
    config.validate()?;
    if params.query.fan_in() != config.dim || params.query.fan_out() != config.reduced_dim() {
        return Err(shape(format!(
            "projection is {}x{} but config wants {}x{}",
            params.query.fan_in(),
            params.query.fan_out(),
            config.dim,
            config.reduced_dim()
        )));
    }
    if params.ffn_in.fan_out() != config.hidden_dim() {
        return Err(shape("FFN width does not match expansion".to_string()));
    }
    if params.fpc.is_some() != config.fpc {
        return Err(shape("FPC parameters do not match the fpc flag".to_string()));
    }
    Ok(())
}

/// Projects normalized tokens to reduced-width queries, keys and values.
pub fn fra_project<T: Real>(
    x: ArrayView2<'_, T>,
    params: &BlockParams<T>,
    config: &BlockConfig,
) -> Result<(Array2<T>, Array2<T>, Array2<T>)> {
    check_params(params, config)?;
    if x.ncols() != config.dim {
        return Err(shape(format!("expected {} channels, got {}", config.dim, x.ncols())));
    }
    Ok((
        params.query.forward(x),
        params.key.forward(x),
        params.value.forward(x),
    ))
}

struct HeadsCache<T> {
    heads: Vec<AttentionCache<T>>,
    concat: Array2<T>,
}

fn heads_forward<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    grid: &PositionGrid,
    config: &BlockConfig,
    params: &BlockParams<T>,
) -> Result<(Array2<T>, HeadsCache<T>)> {
    let hd = config.head_dim();
    let mut concat = Array2::zeros((q.nrows(), config.reduced_dim()));
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let cache = attention_forward(
            q.slice(cols),
            k.slice(cols),
            v.slice(cols),
            grid,
            config.mode,
            T::of(config.eps),
        )?;
        concat.slice_mut(cols).assign(cache.output());
        heads.push(cache);
    }
    let out = params.out.forward(concat.view());
    Ok((out, HeadsCache { heads, concat }))
}

/// Multi-head attention over reduced-width `Q, K, V`, projected back to `C`.
pub fn multi_head_vicinity<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    grid: &PositionGrid,
    config: &BlockConfig,
    params: &BlockParams<T>,
) -> Result<Array2<T>> {
    check_params(params, config)?;
    if q.ncols() != config.reduced_dim() || k.ncols() != q.ncols() || v.ncols() != q.ncols() {
        return Err(shape(format!(
            "attention operands must have {} channels",
            config.reduced_dim()
        )));
    }
    heads_forward(q, k, v, grid, config, params).map(|(o, _)| o)
}

struct FpcCache<T> {
    pooled: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
}

fn fpc_vector<T: Real>(
    x: ArrayView2<'_, T>,
    fpc: &FpcParams<T>,
    activation: Activation,
) -> (Array1<T>, FpcCache<T>) {
    let pooled = x
        .mean_axis(Axis(0))
        .expect("token axis is non-empty")
        .insert_axis(Axis(0));
    let hidden_pre = fpc.fc1.forward(pooled.view());
    let hidden = match activation {
        Activation::Gelu => gelu(&hidden_pre),
        Activation::Identity => hidden_pre.clone(),
    };
    let out = fpc.fc2.forward(hidden.view()).row(0).to_owned();
    (out, FpcCache { pooled, hidden_pre, hidden })
}

/// The feature preserving connection, broadcast to all `N` tokens.
pub fn fpc_forward<T: Real>(x: ArrayView2<'_, T>, fpc: &FpcParams<T>, activation: Activation) -> Array2<T> {
    let (vec, _) = fpc_vector(x, fpc, activation);
    let mut out = Array2::zeros(x.dim());
    out += &vec;
    out
}

fn fpc_backward<T: Real>(
    cache: &FpcCache<T>,
    fpc: &FpcParams<T>,
    d_vec: Array1<T>,
    tokens: usize,
    grad: &mut FpcParams<T>,
) -> Array1<T> {
    let d_out = d_vec.insert_axis(Axis(0));
    let d_hidden = fpc.fc2.backward(cache.hidden.view(), d_out.view(), &mut grad.fc2);
    let d_pre = gelu_backward(d_hidden.view(), cache.hidden_pre.view());
    let d_pooled = fpc.fc1.backward(cache.pooled.view(), d_pre.view(), &mut grad.fc1);
    d_pooled.row(0).mapv(|g| g / T::from_usize(tokens).unwrap())
}

/// Forward state of one block on one sample.
pub struct BlockCache<T> {
    attn_input: Array2<T>,
    norm1: LayerNormCache<T>,
    heads: HeadsCache<T>,
    fpc: Option<FpcCache<T>>,
    ffn_input: Array2<T>,
    norm2: LayerNormCache<T>,
    ffn_pre: Array2<T>,
    ffn_hidden: Array2<T>,
}

impl<T: Real> BlockCache<T> {
    pub fn attention(&self) -> &[AttentionCache<T>] {
        &self.heads.heads
    }
}

/// Runs one block on a single `(N, C)` sample.
pub fn block_forward_sample<T: Real>(
    x: ArrayView2<'_, T>,
    grid: &PositionGrid,
    params: &BlockParams<T>,
    config: &BlockConfig,
) -> Result<(Array2<T>, BlockCache<T>)> {
    check_params(params, config)?;
    if x.ncols() != config.dim || x.nrows() != grid.len() {
        return Err(shape(format!(
            "block input {:?} does not match {} channels on grid {grid}",
            x.dim(),
            config.dim
        )));
    }

    // attention branch input
    let (attn_input, norm1) = if config.post_norm {
        (x.to_owned(), None)
    } else {
        let (h, c) = params.norm1.forward_train(x);
        (h, Some(c))
    };
    let (q, k, v) = fra_project(attn_input.view(), params, config)?;
    let (attn_out, heads) = heads_forward(q.view(), k.view(), v.view(), grid, config, params)?;
    let mut y = &x + &attn_out;
    let fpc = match &params.fpc {
        Some(p) => {
            let (vec, cache) = fpc_vector(attn_input.view(), p, Activation::Gelu);
            y += &vec;
            Some(cache)
        }
        None => None,
    };

    let (norm1, y) = match norm1 {
        Some(c) => (c, y),
        None => {
            let (yn, c) = params.norm1.forward_train(y.view());
            (c, yn)
        }
    };

    let (ffn_input, norm2) = if config.post_norm {
        (y.clone(), None)
    } else {
        let (g, c) = params.norm2.forward_train(y.view());
        (g, Some(c))
    };
    let ffn_pre = params.ffn_in.forward(ffn_input.view());
    let ffn_hidden = gelu(&ffn_pre);
    let mut z = y + params.ffn_out.forward(ffn_hidden.view());
    let norm2 = match norm2 {
        Some(c) => c,
        None => {
            let (zn, c) = params.norm2.forward_train(z.view());
            z = zn;
            c
        }
    };

    Ok((
        z,
        BlockCache {
            attn_input,
            norm1,
            heads,
            fpc,
            ffn_input,
            norm2,
            ffn_pre,
            ffn_hidden,
        },
    ))
}

/// Input gradient of [`block_forward_sample`]; parameter gradients are
/// accumulated into `grad`.
pub fn block_backward<T: Real>(
    cache: &BlockCache<T>,
    params: &BlockParams<T>,
    config: &BlockConfig,
    d_out: ArrayView2<'_, T>,
    grad: &mut BlockParams<T>,
) -> Array2<T> {
    block_backward_impl(cache, params, config, d_out, grad, false)
}

pub(crate) fn block_backward_impl<T: Real>(
    cache: &BlockCache<T>,
    params: &BlockParams<T>,
    config: &BlockConfig,
    d_out: ArrayView2<'_, T>,
    grad: &mut BlockParams<T>,
    drop_normalizer: bool,
) -> Array2<T> {
    let n = d_out.nrows();

    // z = y + FFN(g), with post-norm z = LN2(y + FFN(y))
    let d_sum = if config.post_norm {
        params.norm2.backward(&cache.norm2, d_out, &mut grad.norm2)
    } else {
        d_out.to_owned()
    };
    let d_hidden = params
        .ffn_out
        .backward(cache.ffn_hidden.view(), d_sum.view(), &mut grad.ffn_out);
    let d_pre = gelu_backward(d_hidden.view(), cache.ffn_pre.view());
    let d_ffn_in = params
        .ffn_in
        .backward(cache.ffn_input.view(), d_pre.view(), &mut grad.ffn_in);
    let mut d_y = d_sum;
    if config.post_norm {
        d_y += &d_ffn_in;
    } else {
        d_y += &params.norm2.backward(&cache.norm2, d_ffn_in.view(), &mut grad.norm2);
    }

    // y = x + attn(h) + fpc(h), with post-norm y = LN1(...) and h = x
    let d_res = if config.post_norm {
        params.norm1.backward(&cache.norm1, d_y.view(), &mut grad.norm1)
    } else {
        d_y
    };

    let mut d_h = Array2::zeros((n, config.dim));
    if let (Some(p), Some(fc), Some(g)) = (&params.fpc, &cache.fpc, grad.fpc.as_mut()) {
        let d_pooled = fpc_backward(fc, p, d_res.sum_axis(Axis(0)), n, g);
        d_h += &d_pooled;
    }

    let d_concat = params
        .out
        .backward(cache.heads.concat.view(), d_res.view(), &mut grad.out);
    let hd = config.head_dim();
    let r = config.reduced_dim();
    let mut dq = Array2::zeros((n, r));
    let mut dk = Array2::zeros((n, r));
    let mut dv = Array2::zeros((n, r));
    for (h, head) in cache.heads.heads.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let (gq, gk, gv) = attention_backward_impl(head, d_concat.slice(cols), drop_normalizer);
        dq.slice_mut(cols).assign(&gq);
        dk.slice_mut(cols).assign(&gk);
        dv.slice_mut(cols).assign(&gv);
    }
    let h = cache.attn_input.view();
    d_h += &params.query.backward(h, dq.view(), &mut grad.query);
    d_h += &params.key.backward(h, dk.view(), &mut grad.key);
    d_h += &params.value.backward(h, dv.view(), &mut grad.value);

    let mut d_x = d_res;
    if config.post_norm {
        d_x += &d_h;
    } else {
        d_x += &params.norm1.backward(&cache.norm1, d_h.view(), &mut grad.norm1);
    }
    d_x
}

/// Applies one block to every sample of a batch.
pub fn block_forward<T: Real>(
    x: &TokenGrid<T>,
    params: &BlockParams<T>,
    config: &BlockConfig,
) -> Result<TokenGrid<T>> {
    let mut out = Array3::zeros((x.batch(), x.tokens(), config.dim));
    for (sample, mut dst) in x.data.outer_iter().zip(out.outer_iter_mut()) {
        let (z, _) = block_forward_sample(sample, &x.grid, params, config)?;
        dst.assign(&z);
    }
    Ok(TokenGrid { data: out, grid: x.grid })
}
