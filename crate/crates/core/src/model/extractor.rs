//! Small convolutional feature extractor (3x3 convolutions, padding 1).

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{slice, slice_mut, Parameters};
use super::FeatureMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

impl Default for ExtractorConfig {
    /// Four blocks, total stride 4, 64 output channels.
    fn default() -> Self {
        let block = |out_channels, stride, relu| BlockSpec {
            out_channels,
            stride,
            relu,
        };
        Self {
            in_channels: 3,
            blocks: vec![
                block(16, 2, true),
                block(32, 2, true),
                block(32, 1, true),
                block(64, 1, false),
            ],
        }
    }
}

impl ExtractorConfig {
    pub fn stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out, in * 9]`, inner order `(in, ky, kx)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub stride: usize,
    pub relu: bool,
}

pub(crate) struct ConvCache {
    cols: Array2<f64>,
    /// Post-activation output, `[out, Ho * Wo]`.
    out: Array2<f64>,
    in_hw: (usize, usize),
}

fn out_dim(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// `[C, H, W]` -> `[C * 9, Ho * Wo]` patch matrix for a 3x3 kernel with padding 1.
fn im2col(x: &Array3<f64>, stride: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (out_dim(h, stride), out_dim(w, stride));
    let mut cols = Array2::<f64>::zeros((c * 9, ho * wo));
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[row + oy * wo + ox] = src[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, stride: usize) -> Array3<f64> {
    let (ho, wo) = (out_dim(h, stride), out_dim(w, stride));
    let mut x = Array3::<f64>::zeros((c, h, w));
    let src = cols.as_slice().expect("standard layout");
    let dst = x.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[dst_row + ix as usize] += src[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, spec: &BlockSpec, rng: &mut R) -> Self {
        let fan_in = (in_channels * 9) as f64;
        // He initialisation for ReLU blocks, Glorot-like for the linear output block.
        let std = if spec.relu {
            (2.0 / fan_in).sqrt()
        } else {
            (1.0 / fan_in).sqrt()
        };
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            weight: Array2::from_shape_simple_fn((spec.out_channels, in_channels * 9), || normal.sample(rng)),
            bias: Array1::zeros(spec.out_channels),
            in_channels,
            stride: spec.stride,
            relu: spec.relu,
        }
    }

    fn forward_cached(&self, x: &Array3<f64>) -> ConvCache {
        let (_, h, w) = x.dim();
        let cols = im2col(x, self.stride);
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            if self.relu {
                row.mapv_inplace(|v| (v + b).max(0.0));
            } else {
                row.mapv_inplace(|v| v + b);
            }
        }
        ConvCache {
            cols,
            out,
            in_hw: (h, w),
        }
    }

    fn output_map(&self, cache: &ConvCache) -> Array3<f64> {
        let (h, w) = cache.in_hw;
        let (ho, wo) = (out_dim(h, self.stride), out_dim(w, self.stride));
        cache
            .out
            .clone()
            .into_shape_with_order((self.weight.nrows(), ho, wo))
            .expect("conv output shape")
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient
    /// when `need_input_grad`.
    fn backward(
        &self,
        cache: &ConvCache,
        d_out: Array3<f64>,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (c_out, ho, wo) = d_out.dim();
        let mut d = d_out.into_shape_with_order((c_out, ho * wo)).expect("conv grad shape");
        if self.relu {
            ndarray::Zip::from(&mut d).and(&cache.out).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        ndarray::linalg::general_mat_mul(1.0, &d, &cache.cols.t(), 1.0, &mut grad.weight);
        grad.bias += &d.sum_axis(Axis(1));
        need_input_grad.then(|| {
            let d_cols = self.weight.t().dot(&d);
            let (h, w) = cache.in_hw;
            col2im(&d_cols, self.in_channels, h, w, self.stride)
        })
    }
}

impl Parameters for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice(&self.weight));
        f(slice(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_mut(&mut self.weight));
        f(slice_mut(&mut self.bias));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub layers: Vec<Conv2d>,
}

/// Activations kept by a training-mode forward pass.
pub struct ExtractorCache {
    layers: Vec<ConvCache>,
}

impl Extractor {
    pub fn new<R: Rng + ?Sized>(config: ExtractorConfig, rng: &mut R) -> Self {
        let mut in_channels = config.in_channels;
        let layers = config
            .blocks
            .iter()
            .map(|spec| {
                let layer = Conv2d::new(in_channels, spec, rng);
                in_channels = spec.out_channels;
                layer
            })
            .collect();
        Self { config, layers }
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    fn check_input(&self, image: &Array3<f32>) -> Result<()> {
        let (c, h, w) = image.dim();
        let s = self.stride();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not a multiple of the feature stride {s}"
            )));
        }
        Ok(())
    }

    fn normalize(image: &Array3<f32>) -> Array3<f64> {
        image.mapv(|v| f64::from(v) - 0.5)
    }

    /// Evaluation-mode forward pass.
    pub fn extract_features(&self, image: &Array3<f32>) -> Result<FeatureMap> {
        Ok(self.forward_train(image)?.0)
    }

    /// Forward pass that keeps what [`Extractor::backward`] needs.
    pub fn forward_train(&self, image: &Array3<f32>) -> Result<(FeatureMap, ExtractorCache)> {
        self.check_input(image)?;
        let mut x = Self::normalize(image);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cache = layer.forward_cached(&x);
            x = layer.output_map(&cache);
            caches.push(cache);
        }
        Ok((
            FeatureMap {
                values: x,
                stride: self.stride(),
            },
            ExtractorCache { layers: caches },
        ))
    }

    /// Backpropagates `d_features` (`[C, h, w]`) into `grad`.
    pub fn backward(&self, cache: &ExtractorCache, d_features: Array3<f64>, grad: &mut Extractor) {
        let mut d = d_features;
        for (i, ((layer, lc), g)) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .enumerate()
            .rev()
        {
            match layer.backward(lc, d, g, i > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}

impl Parameters for Extractor {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for stride in [1, 2] {
            let x = Array3::from_shape_simple_fn((2, 6, 8), || normal.sample(&mut rng));
            let cols = im2col(&x, stride);
            let y = Array2::from_shape_simple_fn(cols.dim(), || normal.sample(&mut rng));
            let lhs = (&cols * &y).sum();
            let rhs = (&x * &col2im(&y, 2, 6, 8, stride)).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn shapes_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = Extractor::new(ExtractorConfig::default(), &mut rng);
        let f = ex.extract_features(&Array3::zeros((3, 64, 64))).unwrap();
        assert_eq!(f.values.dim(), (64, 16, 16));
        assert!(f.values.iter().all(|v| v.is_finite()));
        assert_eq!(ex.stride(), 4);
        assert!(matches!(
            ex.extract_features(&Array3::zeros((3, 62, 64))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = Extractor::new(ExtractorConfig::default(), &mut rng);
        let img = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c + y * x) % 7) as f32 / 7.0);
        let a = ex.extract_features(&img).unwrap();
        let b = ex.extract_features(&img).unwrap();
        assert_eq!(a.values, b.values);
    }
}
