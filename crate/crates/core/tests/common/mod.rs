#![allow(dead_code)]

use citseg::eval::ConfusionMatrix;
use citseg::losses::{total_loss, DistillConfig, LogitGrad, RoutingTable};
use citseg::model::{zeros_like, CitModel, LogitBundle, ModelConfig, Parameters};
use citseg::schedule::{ClassId, SegSample};
use citseg::synthdata::{generate_range, SynthConfig};
use ndarray::{Array1, Array2, Array3};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_samples(n: usize, seed: u64) -> Vec<SegSample> {
    let cfg = SynthConfig {
        image_size: 32,
        seed,
        ..SynthConfig::default()
    };
    generate_range(&cfg, 0, n)
}

/// Model with every gate opened so attention and feed-forward paths matter.
pub fn active_model(class_ids: Vec<ClassId>, seed: u64) -> CitModel {
    let mut r = rng(seed);
    let mut model = CitModel::new(&ModelConfig::default(), class_ids, &mut r).unwrap();
    for layer in &mut model.bank.layers {
        layer.attn_gate = r.random_range(0.3..0.9);
        if let Some(ffn) = &mut layer.ffn {
            ffn.gate = r.random_range(0.3..0.9);
        }
    }
    model.bank.mask_bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
    model.bank.presence_scale = 0.7;
    model.bank.presence_bias = -0.2;
    model
}

/// Per-pixel brute force of the decode rule, ids visited in ascending order.
pub fn brute_decode(bundle: &LogitBundle, tau: f64) -> Array2<ClassId> {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (h, w) = bundle.hw();
    let mut order: Vec<usize> = (0..bundle.len()).collect();
    order.sort_by_key(|&k| bundle.class_ids[k]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best: Option<(f64, ClassId)> = None;
        for &k in &order {
            let z = sig(bundle.presence_logits[k]) * sig(bundle.mask_logits[[k, y, x]]);
            if best.is_none_or(|(b, _)| z > b) {
                best = Some((z, bundle.class_ids[k]));
            }
        }
        match best {
            Some((z, c)) if z > tau => c,
            _ => 0,
        }
    })
}

/// Exact mIoU by set intersection over pixel positions, `None` when no class
/// of `subset` is defined.
pub fn rational_miou(pred: &Array2<ClassId>, gt: &Array2<ClassId>, subset: &[ClassId]) -> Option<Ratio<u64>> {
    let mut ious = Vec::new();
    for &c in subset {
        let p: std::collections::BTreeSet<usize> = pred
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == c)
            .map(|(i, _)| i)
            .collect();
        let g: std::collections::BTreeSet<usize> =
            gt.iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| i).collect();
        let union = p.union(&g).count() as u64;
        if union > 0 {
            ious.push(Ratio::new(p.intersection(&g).count() as u64, union));
        }
    }
    if ious.is_empty() {
        return None;
    }
    let n = ious.len() as u64;
    Some(ious.into_iter().fold(Ratio::from_integer(0), |a, b| a + b) / n)
}

/// Compares confusion-matrix mIoU against [`rational_miou`] on random 8x8
/// maps with up to 6 classes and returns the failing trial indices.
pub fn miou_oracle_mismatches(seed: u64, trials: usize) -> Vec<usize> {
    let mut r = rng(seed);
    let mut failed = Vec::new();
    for trial in 0..trials {
        let k: ClassId = r.random_range(1..=6);
        let pred = Array2::from_shape_fn((8, 8), |_| r.random_range(0..=k));
        let gt = if trial % 5 == 0 {
            pred.clone()
        } else {
            Array2::from_shape_fn((8, 8), |_| r.random_range(0..=k))
        };
        let mut subset: Vec<ClassId> = (1..=k).filter(|_| r.random_bool(0.7)).collect();
        if subset.is_empty() {
            subset.push(k);
        }
        let mut conf = ConfusionMatrix::new(usize::from(k));
        conf.accumulate(pred.view(), gt.view()).unwrap();
        let oracle = rational_miou(&pred, &gt, &subset);
        let defined: Vec<Ratio<u64>> = subset
            .iter()
            .filter_map(|&c| conf.iou_counts(c))
            .map(|(i, u)| Ratio::new(i, u))
            .collect();
        let exact = (!defined.is_empty())
            .then(|| defined.iter().fold(Ratio::from_integer(0), |a, &b| a + b) / defined.len() as u64);
        let float = conf.miou(&subset).unwrap();
        let float_ok = match (float, oracle) {
            (Some(f), Some(o)) => (f - *o.numer() as f64 / *o.denom() as f64).abs() < 1e-12,
            (None, None) => true,
            _ => false,
        };
        if exact != oracle || !float_ok {
            failed.push(trial);
        }
    }
    failed
}

/// Random linear functional of a bundle: `a . presence + sum(B * masks)`.
pub struct Probe {
    pub a: Array1<f64>,
    pub b: Array3<f64>,
}

impl Probe {
    pub fn new(bundle: &LogitBundle, seed: u64) -> Self {
        let mut r = rng(seed);
        Self {
            a: Array1::from_shape_fn(bundle.len(), |_| r.random_range(-1.0..1.0)),
            b: Array3::from_shape_fn(bundle.mask_logits.dim(), |_| r.random_range(-1.0..1.0)),
        }
    }

    pub fn value(&self, bundle: &LogitBundle) -> f64 {
        self.a.dot(&bundle.presence_logits) + (&self.b * &bundle.mask_logits).sum()
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

/// Central difference of `f` at coordinate `i` of the flattened parameters.
pub fn central_diff(model: &CitModel, i: usize, h: f64, f: &dyn Fn(&CitModel) -> f64) -> f64 {
    let base = model.flatten();
    let mut m = model.clone();
    let mut plus = base.clone();
    plus[i] += h;
    m.load_flat(&plus);
    let fp = f(&m);
    let mut minus = base;
    minus[i] -= h;
    m.load_flat(&minus);
    let fm = f(&m);
    (fp - fm) / (2.0 * h)
}

/// Analytic gradient of the full objective for one sample.
pub fn loss_gradient(
    model: &CitModel,
    sample: &SegSample,
    teacher: Option<&LogitBundle>,
    routing: &RoutingTable,
    cfg: &DistillConfig,
) -> (f64, Vec<f64>) {
    let (student, cache) = model.forward_train(&sample.image).unwrap();
    let mut g = LogitGrad::zeros_for(&student);
    let report = total_loss(
        &student,
        sample.label.view(),
        teacher,
        routing,
        cfg,
        Some((&mut g, 1.0)),
    )
    .unwrap();
    let mut grad = zeros_like(model);
    model.backward(&cache, &g.d_presence, &g.d_masks, &mut grad);
    (report.total, grad.flatten())
}

pub fn loss_value(
    model: &CitModel,
    sample: &SegSample,
    teacher: Option<&LogitBundle>,
    routing: &RoutingTable,
    cfg: &DistillConfig,
) -> f64 {
    let student = model.forward(&sample.image).unwrap();
    total_loss(&student, sample.label.view(), teacher, routing, cfg, None)
        .unwrap()
        .total
}

/// Picks `n` coordinates spread over the parameter vector whose analytic
/// gradient is not negligible.
pub fn probe_coordinates(grad: &[f64], n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut guard = 0;
    while out.len() < n && guard < 100_000 {
        guard += 1;
        let i = r.random_range(0..grad.len());
        if grad[i].abs() > 1e-6 && !out.contains(&i) {
            out.push(i);
        }
    }
    out
}
