//! Supervised and distillation objectives for independent sigmoid channels.
//!
//! Every class channel of the student is routed to exactly one branch: old
//! classes (learned in earlier tasks) are distilled from teacher logits, the
//! current task's classes are supervised by ground truth. Loss functions
//! return their value and, when asked, add `weight * d value / d logit` into a
//! [`LogitGrad`] aligned with the student bundle.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{semantic_decode, sigmoid, LogitBundle};
use crate::schedule::{ClassId, BACKGROUND};

/// Clamp applied to student probabilities inside the Bernoulli KL.
pub const KL_EPS: f64 = 1e-6;

/// Additive smoothing of the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Distil teacher probabilities.
    Soft,
    /// Supervise old classes with the teacher's decoded label map.
    Pseudo,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(LabelMode::Soft),
            "pseudo" => Ok(LabelMode::Pseudo),
            other => Err(Error::Argument(format!("unknown label mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight of the presence (class) distillation term.
    pub lambda1: f64,
    /// Weight of the mask distillation term.
    pub lambda2: f64,
    pub temperature: f64,
    pub mode: LabelMode,
    pub pseudo_threshold: f64,
    pub supervised: SupervisedWeights,
}

/// Weights of the three per-class supervised terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedWeights {
    pub mask_bce: f64,
    pub dice: f64,
    /// The presence logit pools the mask logits, so this term also shapes masks.
    pub presence: f64,
}

impl Default for SupervisedWeights {
    fn default() -> Self {
        Self {
            mask_bce: 1.0,
            dice: 1.0,
            presence: 0.1,
        }
    }
}

impl SupervisedWeights {
    pub fn unit() -> Self {
        Self {
            mask_bce: 1.0,
            dice: 1.0,
            presence: 1.0,
        }
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            temperature: 1.0,
            mode: LabelMode::Soft,
            pseudo_threshold: 0.5,
            supervised: SupervisedWeights::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Argument("distillation weights must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Argument("temperature must be positive".into()));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return Err(Error::Argument("pseudo_threshold must be in (0, 1)".into()));
        }
        let w = &self.supervised;
        if !(w.mask_bce >= 0.0 && w.dice >= 0.0 && w.presence >= 0.0) {
            return Err(Error::Argument("supervised weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Gradient of a scalar loss with respect to a bundle's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrad {
    pub d_presence: Array1<f64>,
    pub d_masks: Array3<f64>,
}

impl LogitGrad {
    pub fn zeros_for(bundle: &LogitBundle) -> Self {
        Self {
            d_presence: Array1::zeros(bundle.presence_logits.len()),
            d_masks: Array3::zeros(bundle.mask_logits.dim()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub supervised_term: f64,
    pub distill_class_term: f64,
    pub distill_mask_term: f64,
    /// Unweighted loss contribution of each routed class.
    pub per_class: BTreeMap<ClassId, f64>,
    pub no_teacher: bool,
}

impl LossReport {
    pub fn recompute_total(&mut self, cfg: &DistillConfig) {
        self.total =
            self.supervised_term + cfg.lambda1 * self.distill_class_term + cfg.lambda2 * self.distill_mask_term;
    }

    /// Running mean over a batch: adds `other / n`.
    pub fn accumulate_mean(&mut self, other: &LossReport, n: usize) {
        let s = 1.0 / n as f64;
        self.total += s * other.total;
        self.supervised_term += s * other.supervised_term;
        self.distill_class_term += s * other.distill_class_term;
        self.distill_mask_term += s * other.distill_mask_term;
        for (&c, &v) in &other.per_class {
            *self.per_class.entry(c).or_default() += s * v;
        }
        self.no_teacher = other.no_teacher;
    }
}

/// `KL(Bernoulli(p) || Bernoulli(q))` with `q` clamped to `[KL_EPS, 1 - KL_EPS]`
/// and `0 ln 0 = 0`.
pub fn kl_bernoulli(p: f64, q: f64) -> f64 {
    let q = q.clamp(KL_EPS, 1.0 - KL_EPS);
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * (x / y).ln() };
    (xlogy(p, q) + xlogy(1.0 - p, 1.0 - q)).max(0.0)
}

/// KL of temperature-scaled sigmoids and its derivative w.r.t. the student logit.
fn kl_logits(teacher_logit: f64, student_logit: f64, temperature: f64) -> (f64, f64) {
    let p = sigmoid(teacher_logit / temperature);
    let q = sigmoid(student_logit / temperature);
    let value = kl_bernoulli(p, q);
    let clamped = !(KL_EPS..=1.0 - KL_EPS).contains(&q);
    let d = if clamped { 0.0 } else { (q - p) / temperature };
    (value, d)
}

/// Numerically stable `BCE(sigmoid(x), y)` and its derivative in `x`.
fn bce_logit(x: f64, y: f64) -> (f64, f64) {
    let value = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    (value, sigmoid(x) - y)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillTerms {
    pub class_term: f64,
    pub mask_term: f64,
    pub per_class: BTreeMap<ClassId, f64>,
}

/// Bernoulli KL between teacher and student on the presence logits (class
/// term) and on every mask pixel (mask term), averaged over `old_class_ids`.
///
/// When `grad` is given, `lambda1 * d class + lambda2 * d mask` (times `weight`)
/// is added for the student channels; teachers never receive gradient.
pub fn distill_loss(
    teacher: &LogitBundle,
    student: &LogitBundle,
    old_class_ids: &[ClassId],
    cfg: &DistillConfig,
    mut grad: Option<(&mut LogitGrad, f64)>,
) -> Result<DistillTerms> {
    if teacher.hw() != student.hw() {
        return Err(Error::Shape(format!(
            "teacher {:?} and student {:?} differ in spatial size",
            teacher.hw(),
            student.hw()
        )));
    }
    let mut terms = DistillTerms::default();
    if old_class_ids.is_empty() {
        return Ok(terms);
    }
    let n_old = old_class_ids.len() as f64;
    let (h, w) = student.hw();
    let n_pix = (h * w) as f64;
    let t = cfg.temperature;
    for &c in old_class_ids {
        let missing = |who: &str| Error::Contract(format!("{who} bundle has no channel for class {c}"));
        let tc = teacher.channel_of(c).ok_or_else(|| missing("teacher"))?;
        let sc = student.channel_of(c).ok_or_else(|| missing("student"))?;

        let (class_kl, d_class) = kl_logits(teacher.presence_logits[tc], student.presence_logits[sc], t);
        let mut mask_sum = 0.0;
        let teacher_mask = teacher.mask_logits.index_axis(Axis(0), tc);
        let student_mask = student.mask_logits.index_axis(Axis(0), sc);
        match grad.as_mut() {
            Some((g, weight)) => {
                g.d_presence[sc] += *weight * cfg.lambda1 * d_class / n_old;
                let scale = *weight * cfg.lambda2 / (n_old * n_pix);
                Zip::from(g.d_masks.index_axis_mut(Axis(0), sc))
                    .and(teacher_mask)
                    .and(student_mask)
                    .for_each(|d, &tl, &sl| {
                        let (v, dv) = kl_logits(tl, sl, t);
                        mask_sum += v;
                        *d += scale * dv;
                    });
            }
            None => {
                Zip::from(teacher_mask)
                    .and(student_mask)
                    .for_each(|&tl, &sl| mask_sum += kl_logits(tl, sl, t).0);
            }
        }
        let mask_kl = mask_sum / n_pix;
        terms.class_term += class_kl / n_old;
        terms.mask_term += mask_kl / n_old;
        terms.per_class.insert(c, class_kl + mask_kl);
    }
    Ok(terms)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SupervisedTerms {
    pub value: f64,
    pub per_class: BTreeMap<ClassId, f64>,
}

/// Per-class `BCE(mask) + dice(mask) + BCE(presence)` against the indicator of
/// `gt == c`, weighted by `weights` and averaged over `class_ids`. Dice only
/// counts for classes present in `gt`.
///
/// `gt` may only contain background and `class_ids`; anything else means the
/// label map was not relabelled for this task.
pub fn supervised_loss(
    student: &LogitBundle,
    gt: ArrayView2<ClassId>,
    class_ids: &[ClassId],
    weights: &SupervisedWeights,
    mut grad: Option<(&mut LogitGrad, f64)>,
) -> Result<SupervisedTerms> {
    if gt.dim() != student.hw() {
        return Err(Error::Shape(format!(
            "ground truth {:?} differs from prediction {:?}",
            gt.dim(),
            student.hw()
        )));
    }
    let allowed: BTreeSet<ClassId> = class_ids.iter().copied().chain([BACKGROUND]).collect();
    if let Some(&bad) = gt.iter().find(|v| !allowed.contains(v)) {
        return Err(Error::Contract(format!(
            "ground truth contains class {bad} outside the supervised set {class_ids:?}"
        )));
    }
    let mut terms = SupervisedTerms::default();
    if class_ids.is_empty() {
        return Ok(terms);
    }
    let n_cls = class_ids.len() as f64;
    let (h, w) = student.hw();
    let n_pix = (h * w) as f64;
    for &c in class_ids {
        let ch = student
            .channel_of(c)
            .ok_or_else(|| Error::Contract(format!("student bundle has no channel for class {c}")))?;
        let logits = student.mask_logits.index_axis(Axis(0), ch);

        let mut bce = 0.0;
        let mut inter = 0.0;
        let mut prob_sum = 0.0;
        let mut target_sum = 0.0;
        let mut present = false;
        Zip::from(logits).and(gt).for_each(|&x, &l| {
            let y = if l == c { 1.0 } else { 0.0 };
            present |= l == c;
            bce += bce_logit(x, y).0;
            let p = sigmoid(x);
            inter += p * y;
            prob_sum += p;
            target_sum += y;
        });
        bce /= n_pix;
        let denom = prob_sum + target_sum + DICE_SMOOTH;
        let numer = 2.0 * inter + DICE_SMOOTH;
        let dice = if present { 1.0 - numer / denom } else { 0.0 };
        let y_presence = if present { 1.0 } else { 0.0 };
        let (presence_bce, d_presence) = bce_logit(student.presence_logits[ch], y_presence);

        if let Some((g, weight)) = grad.as_mut() {
            let scale = *weight / n_cls;
            g.d_presence[ch] += scale * weights.presence * d_presence;
            Zip::from(g.d_masks.index_axis_mut(Axis(0), ch))
                .and(logits)
                .and(gt)
                .for_each(|d, &x, &l| {
                    let y = if l == c { 1.0 } else { 0.0 };
                    let p = sigmoid(x);
                    let d_bce = (p - y) / n_pix;
                    let d_dice_dp = if present {
                        -(2.0 * y * denom - numer) / (denom * denom)
                    } else {
                        0.0
                    };
                    *d += scale * (weights.mask_bce * d_bce + weights.dice * d_dice_dp * p * (1.0 - p));
                });
        }

        let class_loss = weights.mask_bce * bce + weights.dice * dice + weights.presence * presence_bce;
        terms.value += class_loss / n_cls;
        terms.per_class.insert(c, class_loss);
    }
    Ok(terms)
}

/// Hard label map decoded from teacher logits.
pub fn pseudo_targets(teacher: &LogitBundle, threshold: f64) -> Array2<ClassId> {
    semantic_decode(teacher, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Distill,
    Supervised,
}

/// Which branch trains each student channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub entries: Vec<(ClassId, Branch)>,
}

impl RoutingTable {
    /// Routes `student_ids` so that `old` are distilled and `new` supervised.
    /// Every student channel must land in exactly one branch.
    pub fn build(student_ids: &[ClassId], old: &[ClassId], new: &[ClassId]) -> Result<Self> {
        let entries = student_ids
            .iter()
            .map(|&c| match (old.contains(&c), new.contains(&c)) {
                (true, false) => Ok((c, Branch::Distill)),
                (false, true) => Ok((c, Branch::Supervised)),
                (true, true) => Err(Error::Routing(format!("class {c} routed to both branches"))),
                (false, false) => Err(Error::Routing(format!("class {c} routed to neither branch"))),
            })
            .collect::<Result<Vec<_>>>()?;
        for &c in old.iter().chain(new) {
            if !student_ids.contains(&c) {
                return Err(Error::Routing(format!("class {c} has no student channel")));
            }
        }
        Ok(Self { entries })
    }

    pub fn classes(&self, branch: Branch) -> Vec<ClassId> {
        self.entries
            .iter()
            .filter(|(_, b)| *b == branch)
            .map(|(c, _)| *c)
            .collect()
    }
}

/// Full objective for one sample.
///
/// `teacher_targets` must cover exactly the old classes (`None` at the first
/// task). In soft mode old classes are distilled; in pseudo mode they are
/// supervised against the teacher's decoded map and the distillation terms
/// stay zero.
pub fn total_loss(
    student: &LogitBundle,
    gt: ArrayView2<ClassId>,
    teacher_targets: Option<&LogitBundle>,
    routing: &RoutingTable,
    cfg: &DistillConfig,
    grad: Option<(&mut LogitGrad, f64)>,
) -> Result<LossReport> {
    let old = routing.classes(Branch::Distill);
    let new = routing.classes(Branch::Supervised);
    if routing.entries.len() != student.len() {
        return Err(Error::Routing(format!(
            "routing covers {} channels, student has {}",
            routing.entries.len(),
            student.len()
        )));
    }
    let teacher_ids: BTreeSet<ClassId> = teacher_targets
        .map(|t| t.class_ids.iter().copied().collect())
        .unwrap_or_default();
    if teacher_ids != old.iter().copied().collect() {
        return Err(Error::Contract(format!(
            "teacher targets cover {teacher_ids:?}, expected exactly {old:?}"
        )));
    }

    let mut report = LossReport {
        no_teacher: teacher_targets.is_none(),
        ..LossReport::default()
    };
    let (mut grad, weight) = match grad {
        Some((g, w)) => (Some(g), w),
        None => (None, 0.0),
    };
    let sup = supervised_loss(
        student,
        gt,
        &new,
        &cfg.supervised,
        grad.as_deref_mut().map(|g| (g, weight)),
    )?;
    report.supervised_term = sup.value;
    report.per_class.extend(sup.per_class);

    if let Some(teacher) = teacher_targets {
        match cfg.mode {
            LabelMode::Soft => {
                let d = distill_loss(teacher, student, &old, cfg, grad.as_deref_mut().map(|g| (g, weight)))?;
                report.distill_class_term = d.class_term;
                report.distill_mask_term = d.mask_term;
                report.per_class.extend(d.per_class);
            }
            LabelMode::Pseudo => {
                let pseudo = pseudo_targets(teacher, cfg.pseudo_threshold);
                let p = supervised_loss(student, pseudo.view(), &old, &cfg.supervised, grad.map(|g| (g, weight)))?;
                report.supervised_term += p.value;
                report.per_class.extend(p.per_class);
            }
        }
    }
    report.recompute_total(cfg);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn bundle(ids: Vec<ClassId>, presence: Vec<f64>, masks: Array3<f64>) -> LogitBundle {
        LogitBundle {
            class_ids: ids,
            presence_logits: Array1::from(presence),
            mask_logits: masks,
        }
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_bernoulli(0.5, 0.5), 0.0);
        assert!((kl_bernoulli(1.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((kl_bernoulli(0.9, 0.1) - 0.8 * 9f64.ln()).abs() < 1e-12);
        // q is clamped to KL_EPS, so p = q = 0 still costs -ln(1 - KL_EPS).
        assert!((kl_bernoulli(0.0, 0.0) + (1.0 - KL_EPS).ln()).abs() < 1e-15);
        assert!(kl_bernoulli(1.0, 0.0).is_finite());
    }

    proptest! {
        #[test]
        fn kl_nonnegative(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let v = kl_bernoulli(p, q);
            prop_assert!(v >= 0.0);
            let qc = q.clamp(KL_EPS, 1.0 - KL_EPS);
            if (p - qc).abs() > 1e-3 {
                prop_assert!(v > 0.0);
            }
            prop_assert_eq!(kl_bernoulli(qc, q), 0.0);
        }
    }

    #[test]
    fn distill_identical_bundles_is_zero() {
        let b = bundle(vec![1, 2], vec![0.3, -1.0], Array3::from_elem((2, 3, 3), 0.7));
        for temperature in [1.0, 2.0] {
            let cfg = DistillConfig {
                temperature,
                ..Default::default()
            };
            let t = distill_loss(&b, &b, &[1, 2], &cfg, None).unwrap();
            assert_eq!(t.class_term, 0.0);
            assert_eq!(t.mask_term, 0.0);
        }
    }

    #[test]
    fn distill_single_pixel_reduces_to_ln2() {
        let teacher = bundle(vec![1], vec![0.0], Array3::from_elem((1, 1, 1), 40.0));
        let student = bundle(vec![1], vec![0.0], Array3::from_elem((1, 1, 1), 0.0));
        let t = distill_loss(&teacher, &student, &[1], &DistillConfig::default(), None).unwrap();
        assert!((t.mask_term - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(t.class_term, 0.0);
    }

    #[test]
    fn distill_missing_channel() {
        let b = bundle(vec![1], vec![0.0], Array3::zeros((1, 2, 2)));
        let err = distill_loss(&b, &b, &[2], &DistillConfig::default(), None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn supervised_saturated_logits_near_zero() {
        let gt = array![[1u8, 0], [0, 1]];
        let masks = Array3::from_shape_fn((1, 2, 2), |(_, y, x)| if gt[[y, x]] == 1 { 10.0 } else { -10.0 });
        let b = bundle(vec![1], vec![10.0], masks);
        let t = supervised_loss(&b, gt.view(), &[1], &SupervisedWeights::unit(), None).unwrap();
        assert!(t.value < 0.01, "{}", t.value);
    }

    #[test]
    fn supervised_zero_logits_bce_is_ln2() {
        let gt = array![[1u8, 0], [0, 1]];
        let b = bundle(vec![1], vec![0.0], Array3::zeros((1, 2, 2)));
        let t = supervised_loss(&b, gt.view(), &[1], &SupervisedWeights::unit(), None).unwrap();
        // bce = ln 2, dice = 1 - (2 * 1 + 1) / (2 + 2 + 1), presence bce = ln 2
        let expected = std::f64::consts::LN_2 + (1.0 - 3.0 / 5.0) + std::f64::consts::LN_2;
        assert!((t.value - expected).abs() < 1e-12);
        let w = SupervisedWeights::default();
        let t = supervised_loss(&b, gt.view(), &[1], &w, None).unwrap();
        let expected = std::f64::consts::LN_2 + 0.4 + w.presence * std::f64::consts::LN_2;
        assert!((t.value - expected).abs() < 1e-12);
    }

    #[test]
    fn dice_skipped_for_absent_class() {
        let gt = array![[0u8, 0], [0, 0]];
        let b = bundle(vec![1], vec![0.0], Array3::zeros((1, 2, 2)));
        let t = supervised_loss(&b, gt.view(), &[1], &SupervisedWeights::unit(), None).unwrap();
        assert!((t.value - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn supervised_absent_class_is_quiet() {
        let gt = array![[0u8, 0], [0, 0]];
        let b = bundle(vec![1], vec![-10.0], Array3::from_elem((1, 2, 2), -10.0));
        let t = supervised_loss(&b, gt.view(), &[1], &SupervisedWeights::unit(), None).unwrap();
        assert!(t.value < 1e-3, "{}", t.value);
    }

    #[test]
    fn supervised_rejects_foreign_labels() {
        let gt = array![[3u8, 0], [0, 1]];
        let b = bundle(vec![1], vec![0.0], Array3::zeros((1, 2, 2)));
        assert!(matches!(
            supervised_loss(&b, gt.view(), &[1], &SupervisedWeights::unit(), None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn routing_partition_and_errors() {
        let ids: Vec<ClassId> = (1..=8).collect();
        let r = RoutingTable::build(&ids, &[1, 2, 3, 4, 5, 6], &[7, 8]).unwrap();
        assert_eq!(r.entries.len(), 8);
        assert_eq!(r.classes(Branch::Distill), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(r.classes(Branch::Supervised), vec![7, 8]);
        assert!(matches!(
            RoutingTable::build(&ids, &[1, 2, 3, 4, 5, 6, 7], &[7, 8]),
            Err(Error::Routing(_))
        ));
        assert!(matches!(
            RoutingTable::build(&ids, &[1, 2, 3], &[7, 8]),
            Err(Error::Routing(_))
        ));
    }

    #[test]
    fn first_task_has_no_teacher() {
        let gt = array![[1u8, 0], [0, 2]];
        let b = bundle(vec![1, 2], vec![0.5, -0.5], Array3::from_elem((2, 2, 2), 0.3));
        let routing = RoutingTable::build(&[1, 2], &[], &[1, 2]).unwrap();
        let r = total_loss(&b, gt.view(), None, &routing, &DistillConfig::default(), None).unwrap();
        assert!(r.no_teacher);
        assert_eq!(r.distill_class_term, 0.0);
        assert_eq!(r.distill_mask_term, 0.0);
        assert_eq!(r.total, r.supervised_term);
    }

    #[test]
    fn zero_lambdas_reduce_to_supervised() {
        let gt = array![[3u8, 0], [0, 3]];
        let student = bundle(vec![1, 3], vec![0.5, -0.5], Array3::from_elem((2, 2, 2), 0.3));
        let teacher = bundle(vec![1], vec![2.0], Array3::from_elem((1, 2, 2), -1.0));
        let routing = RoutingTable::build(&[1, 3], &[1], &[3]).unwrap();
        let cfg = DistillConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let r = total_loss(&student, gt.view(), Some(&teacher), &routing, &cfg, None).unwrap();
        let sup = supervised_loss(&student, gt.view(), &[3], &cfg.supervised, None).unwrap();
        assert_eq!(r.total, sup.value);
        assert!(r.distill_mask_term > 0.0);
    }

    #[test]
    fn teacher_must_cover_old_classes() {
        let gt = array![[3u8, 0], [0, 3]];
        let student = bundle(vec![1, 3], vec![0.5, -0.5], Array3::zeros((2, 2, 2)));
        let routing = RoutingTable::build(&[1, 3], &[1], &[3]).unwrap();
        let r = total_loss(&student, gt.view(), None, &routing, &DistillConfig::default(), None);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn pseudo_targets_examples() {
        let saturated = bundle(
            vec![1, 2],
            vec![10.0, 10.0],
            Array3::from_shape_fn((2, 2, 2), |(c, y, _)| if c == y { 10.0 } else { -10.0 }),
        );
        assert_eq!(pseudo_targets(&saturated, 0.5), semantic_decode(&saturated, 0.5));
        assert_eq!(pseudo_targets(&saturated, 0.5), array![[1, 1], [2, 2]]);

        let flat = bundle(vec![1, 2], vec![0.0, 0.0], Array3::zeros((2, 2, 2)));
        assert!(pseudo_targets(&flat, 0.5).iter().all(|&v| v == BACKGROUND));
    }

    /// Central differences on the logits themselves.
    #[test]
    fn logit_gradients_match_finite_differences() {
        let gt = array![[3u8, 0, 3], [0, 0, 3]];
        let student = bundle(
            vec![1, 3],
            vec![0.4, -0.7],
            Array3::from_shape_fn((2, 2, 3), |(c, y, x)| 0.3 * c as f64 - 0.5 * y as f64 + 0.2 * x as f64),
        );
        let teacher = bundle(
            vec![1],
            vec![1.2],
            Array3::from_shape_fn((1, 2, 3), |(_, y, x)| 1.0 - y as f64 * x as f64),
        );
        let routing = RoutingTable::build(&[1, 3], &[1], &[3]).unwrap();
        let cfg = DistillConfig {
            lambda1: 0.7,
            lambda2: 1.3,
            temperature: 2.0,
            ..Default::default()
        };
        let loss = |b: &LogitBundle| {
            total_loss(b, gt.view(), Some(&teacher), &routing, &cfg, None)
                .unwrap()
                .total
        };
        let mut grad = LogitGrad::zeros_for(&student);
        total_loss(
            &student,
            gt.view(),
            Some(&teacher),
            &routing,
            &cfg,
            Some((&mut grad, 1.0)),
        )
        .unwrap();
        let eps = 1e-6;
        for k in 0..2 {
            let mut p = student.clone();
            p.presence_logits[k] += eps;
            let mut m = student.clone();
            m.presence_logits[k] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!((fd - grad.d_presence[k]).abs() < 1e-8);
            for y in 0..2 {
                for x in 0..3 {
                    let mut p = student.clone();
                    p.mask_logits[[k, y, x]] += eps;
                    let mut m = student.clone();
                    m.mask_logits[[k, y, x]] -= eps;
                    let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                    assert!((fd - grad.d_masks[[k, y, x]]).abs() < 1e-8);
                }
            }
        }
    }
}
