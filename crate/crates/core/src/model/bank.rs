//! Class-independent query head.
//!
//! One learnable query per known class. Each query is refined by a stack of
//! cross-attention (plus optional feed-forward) layers over the shared image
//! features, then produces
//!
//! * a mask logit per pixel: `m_n = q . f_n + b_c`, bilinearly upsampled;
//! * a presence logit: `gamma * sum_n softmax(m)_n * m_n + beta`.
//!
//! Queries never attend to each other and every per-row computation is done
//! with the same kernels regardless of how many rows the bank holds, so the
//! logits of a class depend only on its own row and the shared parameters,
//! bit for bit.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{slice, slice_mut, Parameters};
use super::upsample::Bilinear;
use super::{FeatureMap, LinearHead, LogitBundle};
use crate::error::{Error, Result};
use crate::schedule::{ClassId, BACKGROUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    /// Hidden width of the per-query feed-forward block; `None` omits it.
    pub ffn_hidden: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            ffn_hidden: Some(64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub gate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub attn_gate: f64,
    pub ffn: Option<FeedForward>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank {
    pub class_ids: Vec<ClassId>,
    /// `[K, C]`, row `k` belongs to `class_ids[k]`.
    pub queries: Array2<f64>,
    pub mask_bias: Array1<f64>,
    pub layers: Vec<DecoderLayer>,
    pub presence_scale: f64,
    pub presence_bias: f64,
}

/// How rows added by [`QueryBank::extend_queries`] are initialised.
#[derive(Debug, Clone, Copy)]
pub enum QueryInit<'a> {
    Random,
    /// Copy one classifier weight row per new class.
    Adapted(ArrayView2<'a, f64>),
}

impl FeedForward {
    fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        let n1 = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("std");
        Self {
            w1: Array2::from_shape_simple_fn((hidden, channels), || n1.sample(rng)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_simple_fn((channels, hidden), || n2.sample(rng)),
            b2: Array1::zeros(channels),
            gate: 0.0,
        }
    }
}

impl Parameters for QueryBank {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice(&self.queries));
        f(slice(&self.mask_bias));
        for layer in &self.layers {
            f(std::slice::from_ref(&layer.attn_gate));
            if let Some(ffn) = &layer.ffn {
                f(slice(&ffn.w1));
                f(slice(&ffn.b1));
                f(slice(&ffn.w2));
                f(slice(&ffn.b2));
                f(std::slice::from_ref(&ffn.gate));
            }
        }
        f(std::slice::from_ref(&self.presence_scale));
        f(std::slice::from_ref(&self.presence_bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_mut(&mut self.queries));
        f(slice_mut(&mut self.mask_bias));
        for layer in &mut self.layers {
            f(std::slice::from_mut(&mut layer.attn_gate));
            if let Some(ffn) = &mut layer.ffn {
                f(slice_mut(&mut ffn.w1));
                f(slice_mut(&mut ffn.b1));
                f(slice_mut(&mut ffn.w2));
                f(slice_mut(&mut ffn.b2));
                f(std::slice::from_mut(&mut ffn.gate));
            }
        }
        f(std::slice::from_mut(&mut self.presence_scale));
        f(std::slice::from_mut(&mut self.presence_bias));
    }
}

/// `F q + b` for one row; shared with the linear head so both paths round identically.
pub(crate) fn row_scores(features: ArrayView2<f64>, q: ArrayView1<f64>, bias: f64) -> Array1<f64> {
    let mut m = features.dot(&q);
    m.mapv_inplace(|v| v + bias);
    m
}

fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// `dst[n, :] += scale * a[n] * b`.
fn add_outer(dst: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>, scale: f64) {
    for (mut row, &an) in dst.axis_iter_mut(Axis(0)).zip(a.iter()) {
        row.scaled_add(scale * an, b);
    }
}

struct LayerCache {
    q_in: Array1<f64>,
    attn: Array1<f64>,
    ctx: Array1<f64>,
    ffn: Option<FfnCache>,
}

struct FfnCache {
    u: Array1<f64>,
    z: Array1<f64>,
    h: Array1<f64>,
    v: Array1<f64>,
}

pub(crate) struct RowCache {
    layers: Vec<LayerCache>,
    q_out: Array1<f64>,
    mask_low: Array1<f64>,
    pool: Array1<f64>,
    pooled: f64,
}

/// Training-mode activations of a whole bank forward.
pub struct BankCache {
    rows: Vec<RowCache>,
    features: Array2<f64>,
    upsample: Bilinear,
    feature_hw: (usize, usize),
}

impl QueryBank {
    pub fn new<R: Rng + ?Sized>(
        class_ids: Vec<ClassId>,
        channels: usize,
        config: &DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut bank = Self {
            class_ids: Vec::new(),
            queries: Array2::zeros((0, channels)),
            mask_bias: Array1::zeros(0),
            layers: (0..config.num_layers)
                .map(|_| DecoderLayer {
                    attn_gate: 0.0,
                    ffn: config.ffn_hidden.map(|h| FeedForward::new(channels, h, rng)),
                })
                .collect(),
            presence_scale: 1.0,
            presence_bias: 0.0,
        };
        bank = bank.extend_queries(&class_ids, QueryInit::Random, rng)?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.queries.ncols()
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            num_layers: self.layers.len(),
            ffn_hidden: self.layers.first().and_then(|l| l.ffn.as_ref()).map(|f| f.w1.nrows()),
        }
    }

    pub fn row_of(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    /// Appends one row per new class. Existing rows and all shared parameters
    /// are left untouched.
    pub fn extend_queries<R: Rng + ?Sized>(
        &self,
        new_class_ids: &[ClassId],
        init: QueryInit<'_>,
        rng: &mut R,
    ) -> Result<Self> {
        for (i, &c) in new_class_ids.iter().enumerate() {
            if c == BACKGROUND {
                return Err(Error::Argument("background cannot own a query".into()));
            }
            if self.class_ids.contains(&c) || new_class_ids[..i].contains(&c) {
                return Err(Error::Argument(format!("class {c} already has a query")));
            }
        }
        let channels = self.channels();
        let new_rows = match init {
            QueryInit::Random => {
                let normal = Normal::new(0.0, (1.0 / channels as f64).sqrt()).expect("std");
                Array2::from_shape_simple_fn((new_class_ids.len(), channels), || normal.sample(rng))
            }
            QueryInit::Adapted(weights) => {
                if weights.dim() != (new_class_ids.len(), channels) {
                    return Err(Error::Shape(format!(
                        "adapted init expects [{}, {channels}] weights, got {:?}",
                        new_class_ids.len(),
                        weights.dim()
                    )));
                }
                weights.to_owned()
            }
        };
        let mut out = self.clone();
        out.class_ids.extend_from_slice(new_class_ids);
        out.queries = ndarray::concatenate![Axis(0), self.queries, new_rows];
        out.mask_bias = ndarray::concatenate![Axis(0), self.mask_bias, Array1::zeros(new_class_ids.len())];
        Ok(out)
    }

    /// Bank holding only `classes`, in the given order.
    pub fn restrict(&self, classes: &[ClassId]) -> Result<Self> {
        let rows = classes
            .iter()
            .map(|&c| {
                self.row_of(c)
                    .ok_or_else(|| Error::Contract(format!("class {c} has no query")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = self.clone();
        out.class_ids = classes.to_vec();
        out.queries = self.queries.select(Axis(0), &rows);
        out.mask_bias = self.mask_bias.select(Axis(0), &rows);
        Ok(out)
    }

    fn forward_row(&self, features: ArrayView2<f64>, row: usize) -> RowCache {
        let inv_sqrt_c = 1.0 / (self.channels() as f64).sqrt();
        let mut q = self.queries.row(row).to_owned();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut scores = features.dot(&q);
            scores.mapv_inplace(|v| v * inv_sqrt_c);
            let attn = softmax(&scores);
            let ctx = features.t().dot(&attn);
            let mut u = q.clone();
            u.scaled_add(layer.attn_gate, &ctx);
            let (next, ffn) = match &layer.ffn {
                Some(ffn) => {
                    let z = ffn.w1.dot(&u) + &ffn.b1;
                    let h = z.mapv(|v| v.max(0.0));
                    let v = ffn.w2.dot(&h) + &ffn.b2;
                    let mut next = u.clone();
                    next.scaled_add(ffn.gate, &v);
                    (next, Some(FfnCache { u, z, h, v }))
                }
                None => (u, None),
            };
            layers.push(LayerCache {
                q_in: q,
                attn,
                ctx,
                ffn,
            });
            q = next;
        }
        let mask_low = row_scores(features, q.view(), self.mask_bias[row]);
        let pool = softmax(&mask_low);
        let pooled = pool.dot(&mask_low);
        RowCache {
            layers,
            q_out: q,
            mask_low,
            pool,
            pooled,
        }
    }

    /// Row gradient: accumulates into `grad` and `d_features`.
    fn backward_row(
        &self,
        features: ArrayView2<f64>,
        row: usize,
        cache: &RowCache,
        d_mask_low: &Array1<f64>,
        d_presence: f64,
        grad: &mut QueryBank,
        d_features: &mut Array2<f64>,
    ) {
        let inv_sqrt_c = 1.0 / (self.channels() as f64).sqrt();
        grad.presence_scale += d_presence * cache.pooled;
        grad.presence_bias += d_presence;
        let d_pooled = d_presence * self.presence_scale;
        let mut dm = d_mask_low.clone();
        ndarray::Zip::from(&mut dm)
            .and(&cache.pool)
            .and(&cache.mask_low)
            .for_each(|d, &w, &m| *d += d_pooled * w * (1.0 + m - cache.pooled));
        grad.mask_bias[row] += dm.sum();
        let mut dq = features.t().dot(&dm);
        add_outer(d_features, &dm, &cache.q_out, 1.0);

        for (layer, (lc, lg)) in self
            .layers
            .iter()
            .zip(cache.layers.iter().zip(grad.layers.iter_mut()))
            .rev()
        {
            let du = match (&layer.ffn, &lc.ffn, lg.ffn.as_mut()) {
                (Some(ffn), Some(fc), Some(fg)) => {
                    fg.gate += dq.dot(&fc.v);
                    let dv = &dq * ffn.gate;
                    fg.b2 += &dv;
                    add_outer(&mut fg.w2, &dv, &fc.h, 1.0);
                    let mut dz = ffn.w2.t().dot(&dv);
                    ndarray::Zip::from(&mut dz).and(&fc.z).for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    add_outer(&mut fg.w1, &dz, &fc.u, 1.0);
                    fg.b1 += &dz;
                    dq + ffn.w1.t().dot(&dz)
                }
                _ => dq,
            };
            lg.attn_gate += du.dot(&lc.ctx);
            let d_ctx = &du * layer.attn_gate;
            let da = features.dot(&d_ctx);
            add_outer(d_features, &lc.attn, &d_ctx, 1.0);
            let mean = lc.attn.dot(&da);
            let ds = ndarray::Zip::from(&lc.attn)
                .and(&da)
                .map_collect(|&a, &d| a * (d - mean));
            let mut dq_prev = du;
            dq_prev.scaled_add(inv_sqrt_c, &features.t().dot(&ds));
            add_outer(d_features, &ds, &lc.q_in, inv_sqrt_c);
            dq = dq_prev;
        }
        grad.queries.row_mut(row).scaled_add(1.0, &dq);
    }

    /// Evaluation-mode class-independent forward pass.
    pub fn cit_forward(&self, features: &FeatureMap) -> Result<LogitBundle> {
        Ok(self.forward_train(features)?.0)
    }

    pub fn forward_train(&self, features: &FeatureMap) -> Result<(LogitBundle, BankCache)> {
        let (c, h, w) = features.values.dim();
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "feature map has {c} channels, bank expects {}",
                self.channels()
            )));
        }
        let fmat = features.pixel_matrix();
        let upsample = Bilinear::new((h, w), (h * features.stride, w * features.stride));
        let (oh, ow) = upsample.out_hw();
        let k = self.len();
        let mut presence = Array1::zeros(k);
        let mut masks = Array3::zeros((k, oh, ow));
        let mut rows = Vec::with_capacity(k);
        for row in 0..k {
            let rc = self.forward_row(fmat.view(), row);
            presence[row] = self.presence_scale * rc.pooled + self.presence_bias;
            let low = rc.mask_low.view().into_shape_with_order((h, w)).expect("mask shape");
            masks.slice_mut(s![row, .., ..]).assign(&upsample.forward(low));
            rows.push(rc);
        }
        let bundle = LogitBundle {
            class_ids: self.class_ids.clone(),
            presence_logits: presence,
            mask_logits: masks,
        };
        Ok((
            bundle,
            BankCache {
                rows,
                features: fmat,
                upsample,
                feature_hw: (h, w),
            },
        ))
    }

    /// Backpropagates logit gradients; returns `d loss / d features` as `[C, h, w]`.
    pub fn backward(
        &self,
        cache: &BankCache,
        d_presence: &Array1<f64>,
        d_masks: &Array3<f64>,
        grad: &mut QueryBank,
    ) -> Array3<f64> {
        let (h, w) = cache.feature_hw;
        let mut d_features = Array2::zeros(cache.features.dim());
        for (row, rc) in cache.rows.iter().enumerate() {
            let d_low = cache
                .upsample
                .adjoint(d_masks.index_axis(Axis(0), row))
                .into_shape_with_order(h * w)
                .expect("mask grad shape");
            self.backward_row(
                cache.features.view(),
                row,
                rc,
                &d_low,
                d_presence[row],
                grad,
                &mut d_features,
            );
        }
        d_features
            .reversed_axes()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((self.channels(), h, w))
            .expect("feature grad shape")
    }
}

/// Converts a linear per-pixel classifier into a class-independent bank.
///
/// Each foreground row becomes a query and its bias the mask bias; the decoder
/// has two cross-attention layers with closed gates and no feed-forward block,
/// so the initial mask logits equal the classifier scores exactly.
pub fn cit_adapt(head: &LinearHead) -> QueryBank {
    let rows: Vec<usize> = head
        .class_ids
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != BACKGROUND)
        .map(|(i, _)| i)
        .collect();
    QueryBank {
        class_ids: rows.iter().map(|&i| head.class_ids[i]).collect(),
        queries: head.weight.select(Axis(0), &rows),
        mask_bias: head.bias.select(Axis(0), &rows),
        layers: (0..2)
            .map(|_| DecoderLayer {
                attn_gate: 0.0,
                ffn: None,
            })
            .collect(),
        presence_scale: 1.0,
        presence_bias: 0.0,
    }
}
