//! Feature extractor, the softmax baseline head and the class-independent head.

mod bank;
mod extractor;
pub mod params;
mod snapshot;
mod upsample;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use bank::{cit_adapt, BankCache, DecoderConfig, DecoderLayer, FeedForward, QueryBank, QueryInit};
pub use extractor::{BlockSpec, Conv2d, Extractor, ExtractorCache, ExtractorConfig};
pub use params::{zeros_like, Parameters};
pub use snapshot::{probe_images, ModelSnapshot, SnapshotManifest, SNAPSHOT_FORMAT_VERSION};
pub use upsample::Bilinear;

use crate::error::{Error, Result};
use crate::schedule::{ClassId, BACKGROUND};

/// Extractor output, `[C, ceil(H / stride), ceil(W / stride)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    /// `[h * w, C]`, one row per feature pixel.
    pub fn pixel_matrix(&self) -> Array2<f64> {
        let (c, h, w) = self.values.dim();
        self.values
            .view()
            .into_shape_with_order((c, h * w))
            .expect("contiguous feature map")
            .t()
            .as_standard_layout()
            .to_owned()
    }

    pub fn output_hw(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h * self.stride, w * self.stride)
    }
}

/// Pre-sigmoid outputs of the class-independent head.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    pub class_ids: Vec<ClassId>,
    /// `[K]`, image-level class presence.
    pub presence_logits: Array1<f64>,
    /// `[K, H, W]`.
    pub mask_logits: Array3<f64>,
}

impl LogitBundle {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            class_ids: Vec::new(),
            presence_logits: Array1::zeros(0),
            mask_logits: Array3::zeros((0, h, w)),
        }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.mask_logits.dim();
        (h, w)
    }

    pub fn channel_of(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    /// Channels for `classes`, in that order.
    pub fn restrict(&self, classes: &[ClassId]) -> Result<Self> {
        let idx = classes
            .iter()
            .map(|&c| {
                self.channel_of(c)
                    .ok_or_else(|| Error::Contract(format!("bundle has no channel for class {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_ids: classes.to_vec(),
            presence_logits: self.presence_logits.select(Axis(0), &idx),
            mask_logits: self.mask_logits.select(Axis(0), &idx),
        })
    }

    /// Concatenates channel sets; class ids must not repeat.
    pub fn concat(parts: &[LogitBundle]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Argument("nothing to concatenate".into()));
        };
        let hw = first.hw();
        let mut class_ids = Vec::new();
        for p in parts {
            if p.hw() != hw {
                return Err(Error::Shape("bundles differ in spatial size".into()));
            }
            for &c in &p.class_ids {
                if class_ids.contains(&c) {
                    return Err(Error::Contract(format!("class {c} appears twice")));
                }
                class_ids.push(c);
            }
        }
        let presence: Vec<_> = parts.iter().map(|p| p.presence_logits.view()).collect();
        let masks: Vec<_> = parts.iter().map(|p| p.mask_logits.view()).collect();
        Ok(Self {
            class_ids,
            presence_logits: ndarray::concatenate(Axis(0), &presence).map_err(|e| Error::Shape(e.to_string()))?,
            mask_logits: ndarray::concatenate(Axis(0), &masks).map_err(|e| Error::Shape(e.to_string()))?,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.presence_logits.iter().all(|v| v.is_finite()) && self.mask_logits.iter().all(|v| v.is_finite())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel label map from independent sigmoid channels.
///
/// Score `z_c = sigmoid(presence_c) * sigmoid(mask_c)`; a pixel takes the
/// class with the largest score when that score exceeds `tau`, background
/// otherwise. Ties go to the lowest class id.
pub fn semantic_decode(bundle: &LogitBundle, tau: f64) -> Array2<ClassId> {
    let (h, w) = bundle.hw();
    let mut order: Vec<usize> = (0..bundle.len()).collect();
    order.sort_by_key(|&k| bundle.class_ids[k]);
    let presence: Vec<f64> = bundle.presence_logits.iter().map(|&p| sigmoid(p)).collect();
    let mut out = Array2::from_elem((h, w), BACKGROUND);
    let mut best = Array2::from_elem((h, w), f64::NEG_INFINITY);
    for &k in &order {
        let class = bundle.class_ids[k];
        let pk = presence[k];
        ndarray::Zip::from(&mut out)
            .and(&mut best)
            .and(bundle.mask_logits.index_axis(Axis(0), k))
            .for_each(|o, b, &m| {
                let z = pk * sigmoid(m);
                if z > *b {
                    *b = z;
                    *o = class;
                }
            });
    }
    ndarray::Zip::from(&mut out).and(&best).for_each(|o, &b| {
        if !(b > tau) {
            *o = BACKGROUND;
        }
    });
    out
}

/// Per-pixel linear classifier, optionally including a background row.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub class_ids: Vec<ClassId>,
    /// `[K, C]`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    pub fn new<R: Rng + ?Sized>(class_ids: Vec<ClassId>, channels: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / channels as f64).sqrt()).expect("std");
        let k = class_ids.len();
        Self {
            class_ids,
            weight: Array2::from_shape_simple_fn((k, channels), || normal.sample(rng)),
            bias: Array1::zeros(k),
        }
    }

    /// Upsampled per-class scores `[K, H, W]`.
    pub fn logits(&self, features: &FeatureMap) -> Result<Array3<f64>> {
        let (c, h, w) = features.values.dim();
        if c != self.weight.ncols() {
            return Err(Error::Shape(format!(
                "feature map has {c} channels, head expects {}",
                self.weight.ncols()
            )));
        }
        let fmat = features.pixel_matrix();
        let up = Bilinear::new((h, w), features.output_hw());
        let (oh, ow) = up.out_hw();
        let mut out = Array3::zeros((self.class_ids.len(), oh, ow));
        for k in 0..self.class_ids.len() {
            let low = bank::row_scores(fmat.view(), self.weight.row(k), self.bias[k]);
            let low = low.into_shape_with_order((h, w)).expect("score shape");
            out.slice_mut(s![k, .., ..]).assign(&up.forward(low.view()));
        }
        Ok(out)
    }
}

impl Parameters for LinearHead {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(params::slice(&self.weight));
        f(params::slice(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(params::slice_mut(&mut self.weight));
        f(params::slice_mut(&mut self.bias));
    }
}

fn softmax_channels(logits: &mut Array3<f64>) {
    let (k, h, w) = logits.dim();
    for y in 0..h {
        for x in 0..w {
            let mut lane = logits.slice_mut(s![.., y, x]);
            let max = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane /= sum;
        }
    }
    debug_assert!(k > 0);
}

/// Softmax-normalised per-pixel class distribution of a linear head, `[K, H, W]`.
pub fn softmax_head_forward(features: &FeatureMap, head: &LinearHead) -> Result<Array3<f64>> {
    if head.class_ids.len() < 2 {
        return Err(Error::Argument("softmax head needs at least two classes".into()));
    }
    let mut logits = head.logits(features)?;
    softmax_channels(&mut logits);
    Ok(logits)
}

/// Extractor plus class-independent query bank.
#[derive(Debug, Clone, PartialEq)]
pub struct CitModel {
    pub extractor: Extractor,
    pub bank: QueryBank,
}

pub struct CitCache {
    extractor: ExtractorCache,
    bank: BankCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub decoder: DecoderConfig,
}

impl CitModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, class_ids: Vec<ClassId>, rng: &mut R) -> Result<Self> {
        let extractor = Extractor::new(config.extractor.clone(), rng);
        let bank = QueryBank::new(class_ids, extractor.out_channels(), &config.decoder, rng)?;
        Ok(Self { extractor, bank })
    }

    pub fn forward(&self, image: &Array3<f32>) -> Result<LogitBundle> {
        let features = self.extractor.extract_features(image)?;
        self.bank.cit_forward(&features)
    }

    pub fn forward_train(&self, image: &Array3<f32>) -> Result<(LogitBundle, CitCache)> {
        let (features, ex_cache) = self.extractor.forward_train(image)?;
        let (bundle, bank_cache) = self.bank.forward_train(&features)?;
        Ok((
            bundle,
            CitCache {
                extractor: ex_cache,
                bank: bank_cache,
            },
        ))
    }

    /// Accumulates parameter gradients for the given logit gradients into `grad`.
    pub fn backward(&self, cache: &CitCache, d_presence: &Array1<f64>, d_masks: &Array3<f64>, grad: &mut CitModel) {
        let d_features = self.bank.backward(&cache.bank, d_presence, d_masks, &mut grad.bank);
        self.extractor
            .backward(&cache.extractor, d_features, &mut grad.extractor);
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            extractor: self.extractor.config.clone(),
            decoder: self.bank.decoder_config(),
        }
    }
}

impl Parameters for CitModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.extractor.visit(f);
        self.bank.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.extractor.visit_mut(f);
        self.bank.visit_mut(f);
    }
}

/// Extractor plus softmax linear head; the per-pixel baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    pub extractor: Extractor,
    pub head: LinearHead,
}

impl SoftmaxModel {
    /// Head rows cover background plus `1..=num_classes`.
    pub fn new<R: Rng + ?Sized>(config: &ExtractorConfig, num_classes: usize, rng: &mut R) -> Self {
        let extractor = Extractor::new(config.clone(), rng);
        let ids = (0..=num_classes as ClassId).collect();
        let head = LinearHead::new(ids, extractor.out_channels(), rng);
        Self { extractor, head }
    }

    pub fn probabilities(&self, image: &Array3<f32>) -> Result<Array3<f64>> {
        let features = self.extractor.extract_features(image)?;
        softmax_head_forward(&features, &self.head)
    }

    /// Argmax label map (background row competes like any other class).
    pub fn predict(&self, image: &Array3<f32>) -> Result<Array2<ClassId>> {
        let probs = self.probabilities(image)?;
        let (_, h, w) = probs.dim();
        Ok(Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0;
            for k in 1..probs.shape()[0] {
                if probs[[k, y, x]] > probs[[best, y, x]] {
                    best = k;
                }
            }
            self.head.class_ids[best]
        }))
    }

    /// Mean per-pixel cross-entropy and its gradient, accumulated into `grad`.
    pub fn cross_entropy_step(
        &self,
        image: &Array3<f32>,
        label: &Array2<ClassId>,
        grad: &mut SoftmaxModel,
    ) -> Result<f64> {
        let (features, ex_cache) = self.extractor.forward_train(image)?;
        let mut probs = self.head.logits(&features)?;
        softmax_channels(&mut probs);
        let (k, h, w) = probs.dim();
        if label.dim() != (h, w) {
            return Err(Error::Shape("label size differs from output size".into()));
        }
        let n = (h * w) as f64;
        let mut loss = 0.0;
        // d loss / d logits = (p - onehot) / n
        let mut d = probs;
        for ((y, x), &l) in label.indexed_iter() {
            let row = self
                .head
                .class_ids
                .iter()
                .position(|&c| c == l)
                .ok_or_else(|| Error::Contract(format!("label {l} has no head row")))?;
            loss -= d[[row, y, x]].max(1e-300).ln();
            d[[row, y, x]] -= 1.0;
        }
        d /= n;
        loss /= n;

        let (fh, fw) = (features.values.dim().1, features.values.dim().2);
        let up = Bilinear::new((fh, fw), (h, w));
        let fmat = features.pixel_matrix();
        let mut d_low = Array2::<f64>::zeros((k, fh * fw));
        for c in 0..k {
            let g = up.adjoint(d.index_axis(Axis(0), c));
            d_low
                .row_mut(c)
                .assign(&g.into_shape_with_order(fh * fw).expect("grad shape"));
        }
        grad.head.weight += &d_low.dot(&fmat);
        grad.head.bias += &d_low.sum_axis(Axis(1));
        let d_feat = self.head.weight.t().dot(&d_low);
        let d_feat = d_feat
            .into_shape_with_order((self.head.weight.ncols(), fh, fw))
            .expect("feature grad shape");
        self.extractor.backward(&ex_cache, d_feat, &mut grad.extractor);
        Ok(loss)
    }
}

impl Parameters for SoftmaxModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.extractor.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.extractor.visit_mut(f);
        self.head.visit_mut(f);
    }
}
