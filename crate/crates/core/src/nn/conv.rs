use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::Distribution;

use super::init::TruncatedNormal;
use crate::error::{domain, Result};
use crate::params::{push_array, push_array_mut, ParamSet, TensorMut, TensorRef};
use crate::scalar::Real;

/// A spatial map stored token-major: row `y * width + x`, one column per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array2<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Array2<T>, height: usize, width: usize) -> Result<Self> {
        if data.nrows() != height * width {
            return Err(domain(format!(
                "{} rows cannot form a {height}x{width} map",
                data.nrows()
            )));
        }
        Ok(Self { data, height, width })
    }

    /// From a channel-planar image `(channels, height, width)`.
    pub fn from_planar(pixels: &[T], channels: usize, height: usize, width: usize) -> Self {
        let plane = height * width;
        let data = Array2::from_shape_fn((plane, channels), |(p, c)| pixels[c * plane + p]);
        Self { data, height, width }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_side(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// 2D convolution lowered to a matrix product over unfolded patches.
///
/// `weight` has shape `(kernel * kernel * in_channels, out_channels)` with the
/// unfolded patch ordered `(ky, kx, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, geometry: ConvGeometry) -> Self {
        let k = geometry.kernel;
        Self {
            weight: Array2::zeros((k * k * in_channels, out_channels)),
            bias: Array1::zeros(out_channels),
            geometry,
            in_channels,
        }
    }

    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, geometry);
        let dist = TruncatedNormal::new(std);
        conv.weight.mapv_inplace(|_| T::of(dist.sample(rng)));
        conv
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        kernel * kernel * in_channels * out_channels + out_channels
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    fn check(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(domain(format!(
                "convolution expects {} channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let g = &self.geometry;
        if !x.height.is_multiple_of(g.stride) || !x.width.is_multiple_of(g.stride) {
            return Err(domain(format!(
                "{}x{} map is not divisible by stride {}",
                x.height, x.width, g.stride
            )));
        }
        if x.height + 2 * g.padding < g.kernel || x.width + 2 * g.padding < g.kernel {
            return Err(domain("map smaller than kernel".to_string()));
        }
        Ok(())
    }

    fn unfold(&self, x: &FeatureMap<T>) -> (Array2<T>, usize, usize) {
        let g = self.geometry;
        let (oh, ow) = (g.output_side(x.height), g.output_side(x.width));
        let c = self.in_channels;
        let mut cols = Array2::zeros((oh * ow, g.kernel * g.kernel * c));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let src = x.data.row(iy as usize * x.width + ix as usize);
                        let at = (ky * g.kernel + kx) * c;
                        row.slice_mut(s![at..at + c]).assign(&src);
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.forward_train(x).map(|(y, _)| y)
    }

    /// Also returns the unfolded input for the backward pass.
    pub fn forward_train(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, Array2<T>)> {
        self.check(x)?;
        let (cols, oh, ow) = self.unfold(x);
        let mut y = cols.dot(&self.weight);
        y += &self.bias;
        Ok((FeatureMap { data: y, height: oh, width: ow }, cols))
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(
        &self,
        cols: &Array2<T>,
        input_height: usize,
        input_width: usize,
        dy: ArrayView2<'_, T>,
        grad: &mut Self,
    ) -> Array2<T> {
        grad.weight += &cols.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        let dcols = dy.dot(&self.weight.t());
        let g = self.geometry;
        let (oh, ow) = (g.output_side(input_height), g.output_side(input_width));
        let c = self.in_channels;
        let mut dx = Array2::zeros((input_height * input_width, c));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = dcols.row(oy * ow + ox);
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= input_height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= input_width as isize {
                            continue;
                        }
                        let at = (ky * g.kernel + kx) * c;
                        let mut dst = dx.row_mut(iy as usize * input_width + ix as usize);
                        dst += &row.slice(s![at..at + c]);
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> ParamSet<T> for Conv2d<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        push_array!(out, prefix, "weight", self.weight);
        push_array!(out, prefix, "bias", self.bias);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        push_array_mut!(out, prefix, "weight", self.weight);
        push_array_mut!(out, prefix, "bias", self.bias);
    }
}
