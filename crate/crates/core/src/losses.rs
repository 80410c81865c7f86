//! Training objectives with hand-derived gradients.
//!
//! Every function returns the scalar value together with its gradient with
//! respect to the network outputs it consumes (class logits, mask logits or
//! final-layer queries). Class-logit matrices use the full channel layout with
//! inactive channels at `-inf`; those channels always receive zero gradient.

use serde::{Deserialize, Serialize};

use crate::domain::{sigmoid, softmax, ClassId, Mask, SegmentLabel};
use crate::error::{LabError, Result};
use crate::matching::MatchResult;
use crate::tensor::Matrix;

/// Lower bound applied to student probabilities inside `log(p / q)`.
pub const KL_Q_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_kl: f64,
    pub lambda_ikd: f64,
    pub lambda_mask: f64,
    pub no_obj_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_kl: 5.0,
            lambda_ikd: 3.0,
            lambda_mask: 5.0,
            no_obj_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cls,
            self.lambda_kl,
            self.lambda_ikd,
            self.lambda_mask,
            self.no_obj_weight,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LabError::InvalidArgument(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// A loss value with its gradient. `empty` marks terms with nothing to average over.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Matrix,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlTerm {
    pub term: LossTerm,
    /// How many student probabilities had to be floored at [`KL_Q_FLOOR`].
    pub clamped: usize,
}

/// The three-way query partition used by the half-distillation loss.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct HdhlPartition {
    pub matched_current: Vec<usize>,
    pub matched_old: Vec<usize>,
    pub unmatched: Vec<usize>,
}

impl HdhlPartition {
    pub fn new(matching: &MatchResult, targets: &[SegmentLabel], n_queries: usize) -> Self {
        let mut p = HdhlPartition::default();
        let mut owner = vec![None; n_queries];
        for &(n, s) in &matching.pairs {
            owner[n] = Some(targets[s].is_pseudo);
        }
        for (n, o) in owner.into_iter().enumerate() {
            match o {
                Some(false) => p.matched_current.push(n),
                Some(true) => p.matched_old.push(n),
                None => p.unmatched.push(n),
            }
        }
        p
    }
}

fn check_targets(matching: &MatchResult, targets: &[SegmentLabel], n_queries: usize) -> Result<()> {
    for &(n, s) in &matching.pairs {
        if n >= n_queries || s >= targets.len() {
            return Err(LabError::DimensionMismatch(format!(
                "pair ({n}, {s}) outside {n_queries} queries x {} targets",
                targets.len()
            )));
        }
    }
    Ok(())
}

/// `-log softmax(row)[target]` and its gradient `p - onehot`.
fn cross_entropy_row(row: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if !row[target].is_finite() {
        return Err(LabError::InvalidArgument(format!(
            "target channel {target} is inactive"
        )));
    }
    let p = softmax(row)?.probs;
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let mut g = p;
    g[target] -= 1.0;
    Ok((lse - row[target], g))
}

/// Mean cross-entropy over matched queries only; unmatched queries get no gradient.
pub fn classification_loss(
    class_logits: &Matrix,
    matching: &MatchResult,
    targets: &[SegmentLabel],
) -> Result<LossTerm> {
    check_targets(matching, targets, class_logits.rows)?;
    let mut grad = Matrix::zeros(class_logits.rows, class_logits.cols);
    if matching.pairs.is_empty() {
        return Ok(LossTerm {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let scale = 1.0 / matching.pairs.len() as f64;
    let mut value = 0.0;
    for &(n, s) in &matching.pairs {
        let (l, g) = cross_entropy_row(class_logits.row(n), targets[s].class_id.channel())?;
        value += l;
        for (o, gv) in grad.row_mut(n).iter_mut().zip(g) {
            *o += scale * gv;
        }
    }
    Ok(LossTerm {
        value: value * scale,
        grad,
        empty: false,
    })
}

/// Weighted cross-entropy over all queries: matched queries target their
/// label class with weight 1, unmatched ones target no-obj with `no_obj_weight`;
/// normalized by the total weight.
pub fn vanilla_classification_loss(
    class_logits: &Matrix,
    matching: &MatchResult,
    targets: &[SegmentLabel],
    no_obj_weight: f64,
) -> Result<LossTerm> {
    let n = class_logits.rows;
    check_targets(matching, targets, n)?;
    let no_obj = class_logits.cols - 1;
    let mut target_of: Vec<(usize, f64)> = vec![(no_obj, no_obj_weight); n];
    for &(q, s) in &matching.pairs {
        target_of[q] = (targets[s].class_id.channel(), 1.0);
    }
    let total: f64 = target_of.iter().map(|t| t.1).sum();
    let mut grad = Matrix::zeros(n, class_logits.cols);
    if total <= 0.0 {
        return Ok(LossTerm {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let mut value = 0.0;
    for (q, &(c, w)) in target_of.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (l, g) = cross_entropy_row(class_logits.row(q), c)?;
        value += w * l;
        for (o, gv) in grad.row_mut(q).iter_mut().zip(g) {
            *o = w * gv / total;
        }
    }
    Ok(LossTerm {
        value: value / total,
        grad,
        empty: false,
    })
}

/// Binary cross-entropy with logits for one pixel, robust to infinite logits.
fn bce(x: f64, y: bool) -> f64 {
    let z = if y { -x } else { x };
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Pixel-mean sigmoid BCE plus Dice loss between one mask-logit row and a binary mask.
pub fn mask_loss(logits: &[f64], mask: &Mask) -> Result<f64> {
    mask_loss_grad(logits, mask).map(|(v, _)| v)
}

pub fn mask_loss_grad(logits: &[f64], mask: &Mask) -> Result<(f64, Vec<f64>)> {
    if logits.len() != mask.len() {
        return Err(LabError::DimensionMismatch(format!(
            "{} mask logits for a {}-pixel mask",
            logits.len(),
            mask.len()
        )));
    }
    let area = mask.area();
    if area == 0 {
        return Err(LabError::InvalidArgument("empty ground-truth mask".into()));
    }
    let count = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let mut bce_sum = 0.0;
    let mut inter = 0.0;
    let mut psum = 0.0;
    for ((&x, &p), &m) in logits.iter().zip(&probs).zip(&mask.bits) {
        bce_sum += bce(x, m);
        psum += p;
        if m {
            inter += p;
        }
    }
    let denom = psum + area as f64;
    let dice = 1.0 - 2.0 * inter / denom;
    let value = bce_sum / count + dice;
    let grad = probs
        .iter()
        .zip(&mask.bits)
        .map(|(&p, &m)| {
            let y = if m { 1.0 } else { 0.0 };
            let d_bce = (p - y) / count;
            let d_dice_dp = -2.0 * (y * denom - inter) / (denom * denom);
            d_bce + d_dice_dp * p * (1.0 - p)
        })
        .collect();
    Ok((value, grad))
}

/// KL(teacher || student) averaged over `rows`, teacher and student given in the
/// full channel layout. Teacher channels that are `-inf` carry zero mass, so new
/// classes are implicitly zero-padded; the student softmax spans all of its
/// active channels.
pub fn kl_distill_rows(student: &Matrix, teacher: &Matrix, rows: &[usize]) -> Result<KlTerm> {
    if student.shape() != teacher.shape() {
        return Err(LabError::DimensionMismatch(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let mut grad = Matrix::zeros(student.rows, student.cols);
    if rows.is_empty() {
        return Ok(KlTerm {
            term: LossTerm {
                value: 0.0,
                grad,
                empty: true,
            },
            clamped: 0,
        });
    }
    let scale = 1.0 / rows.len() as f64;
    let mut value = 0.0;
    let mut clamped = 0;
    for &r in rows {
        let p = softmax(teacher.row(r))?.probs;
        let q = softmax(student.row(r))?.probs;
        let mut row_kl = 0.0;
        for (&pc, &qc) in p.iter().zip(&q) {
            if pc > 0.0 {
                let qc = if qc < KL_Q_FLOOR {
                    clamped += 1;
                    KL_Q_FLOOR
                } else {
                    qc
                };
                row_kl += pc * (pc.ln() - qc.ln());
            }
        }
        value += row_kl;
        // d/dz_c sum_k p_k log(p_k / q_k) = q_c - p_c for softmax q
        for ((o, &pc), &qc) in grad.row_mut(r).iter_mut().zip(&p).zip(&q) {
            *o = scale * (qc - pc);
        }
    }
    Ok(KlTerm {
        term: LossTerm {
            value: value * scale,
            grad,
            empty: false,
        },
        clamped,
    })
}

/// Compact form: `student` is `U x K_t` (old classes, new classes, no-obj last),
/// `teacher` is `U x K_{t-1}` (old classes, no-obj last). Teacher probabilities
/// are zero-padded on the new-class channels.
pub fn hdhl_kl_loss(student: &Matrix, teacher: &Matrix) -> Result<KlTerm> {
    if student.rows != teacher.rows {
        return Err(LabError::DimensionMismatch(format!(
            "{} student rows vs {} teacher rows",
            student.rows, teacher.rows
        )));
    }
    if teacher.cols == 0 || teacher.cols > student.cols {
        return Err(LabError::DimensionMismatch(format!(
            "teacher has {} channels, student {}",
            teacher.cols, student.cols
        )));
    }
    let new = student.cols - teacher.cols;
    let mut padded = Matrix::filled(teacher.rows, student.cols, f64::NEG_INFINITY);
    for r in 0..teacher.rows {
        let src = teacher.row(r);
        let dst = padded.row_mut(r);
        dst[..src.len() - 1].copy_from_slice(&src[..src.len() - 1]);
        dst[src.len() - 1 + new] = src[src.len() - 1];
    }
    let rows: Vec<usize> = (0..student.rows).collect();
    kl_distill_rows(student, &padded, &rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HdhlTerm {
    pub cls: LossTerm,
    pub kl: KlTerm,
    pub value: f64,
    pub grad: Matrix,
    pub partition: HdhlPartition,
}

/// `L_DL = lambda_cls * CE(matched) + lambda_kl * KL(unmatched)`; without a
/// teacher (first step) the vanilla weighted CE with no-obj targets is used.
pub fn hdhl_total(
    class_logits: &Matrix,
    teacher_logits: Option<&Matrix>,
    matching: &MatchResult,
    targets: &[SegmentLabel],
    w: &LossWeights,
) -> Result<HdhlTerm> {
    let partition = HdhlPartition::new(matching, targets, class_logits.rows);
    let Some(teacher) = teacher_logits else {
        let cls = vanilla_classification_loss(class_logits, matching, targets, w.no_obj_weight)?;
        let mut grad = cls.grad.clone();
        grad.data.iter_mut().for_each(|g| *g *= w.lambda_cls);
        return Ok(HdhlTerm {
            value: w.lambda_cls * cls.value,
            grad,
            kl: KlTerm {
                term: LossTerm {
                    value: 0.0,
                    grad: Matrix::zeros(class_logits.rows, class_logits.cols),
                    empty: true,
                },
                clamped: 0,
            },
            cls,
            partition,
        });
    };
    let cls = classification_loss(class_logits, matching, targets)?;
    let kl = kl_distill_rows(class_logits, teacher, &partition.unmatched)?;
    let mut grad = Matrix::zeros(class_logits.rows, class_logits.cols);
    for ((o, a), b) in grad.data.iter_mut().zip(&cls.grad.data).zip(&kl.term.grad.data) {
        *o = w.lambda_cls * a + w.lambda_kl * b;
    }
    Ok(HdhlTerm {
        value: w.lambda_cls * cls.value + w.lambda_kl * kl.term.value,
        grad,
        cls,
        kl,
        partition,
    })
}

/// Importance-weighted squared distance between current and old final-layer queries.
pub fn ikd_loss(current: &Matrix, old: &Matrix, importance: &[f64]) -> Result<LossTerm> {
    if current.shape() != old.shape() || importance.len() != current.rows {
        return Err(LabError::DimensionMismatch(format!(
            "queries {:?} vs {:?} with {} importance weights",
            current.shape(),
            old.shape(),
            importance.len()
        )));
    }
    let n = current.rows as f64;
    let mut grad = Matrix::zeros(current.rows, current.cols);
    let mut value = 0.0;
    for r in 0..current.rows {
        let weight = importance[r];
        let mut dist = 0.0;
        for ((o, a), b) in grad.row_mut(r).iter_mut().zip(current.row(r)).zip(old.row(r)) {
            let d = a - b;
            dist += d * d;
            *o = 2.0 * weight * d / n;
        }
        value += weight * dist;
    }
    Ok(LossTerm {
        value: value / n,
        grad,
        empty: current.rows == 0,
    })
}

/// Scalar parts of one image's objective (already unweighted where noted).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// `L_DL`, already weighted internally by `lambda_cls` / `lambda_kl`.
    pub dl: f64,
    pub cls: f64,
    pub kl: f64,
    pub ikd: f64,
    /// Mean matched mask loss (unweighted).
    pub mask: f64,
    pub kl_clamped: usize,
}

/// `L = L_DL + lambda_ikd * L_IKD + lambda_mask * mask`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("dl", parts.dl), ("ikd", parts.ikd), ("mask", parts.mask)] {
        if !v.is_finite() {
            return Err(LabError::NonFinite(format!("loss part {name}")));
        }
    }
    Ok(parts.dl + w.lambda_ikd * parts.ikd + w.lambda_mask * parts.mask)
}

/// Distillation inputs for the query-feature term.
#[derive(Clone, Copy, Debug)]
pub struct IkdInputs<'a> {
    pub current: &'a Matrix,
    pub old: &'a Matrix,
    pub importance: &'a [f64],
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs<'a> {
    pub class_logits: &'a Matrix,
    pub mask_logits: &'a Matrix,
    pub targets: &'a [SegmentLabel],
    pub matching: &'a MatchResult,
    /// Frozen old-model logits; `None` at the first step.
    pub teacher_logits: Option<&'a Matrix>,
    /// Use the half-distillation split; otherwise vanilla CE with no-obj targets.
    pub hdhl: bool,
    pub ikd: Option<IkdInputs<'a>>,
    /// Whether pseudo targets contribute to the mask loss.
    pub mask_on_pseudo: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub parts: LossParts,
    pub total: f64,
    pub d_class_logits: Matrix,
    pub d_mask_logits: Matrix,
    pub d_queries: Option<Matrix>,
}

pub fn objective(inputs: &ObjectiveInputs<'_>, w: &LossWeights) -> Result<Objective> {
    let ObjectiveInputs {
        class_logits,
        mask_logits,
        targets,
        matching,
        ..
    } = *inputs;
    if mask_logits.rows != class_logits.rows {
        return Err(LabError::DimensionMismatch(format!(
            "{} mask rows vs {} class rows",
            mask_logits.rows, class_logits.rows
        )));
    }
    let mut parts = LossParts::default();
    let teacher = if inputs.hdhl { inputs.teacher_logits } else { None };
    let dl = hdhl_total(class_logits, teacher, matching, targets, w)?;
    parts.dl = dl.value;
    parts.cls = dl.cls.value;
    parts.kl = dl.kl.term.value;
    parts.kl_clamped = dl.kl.clamped;

    let mut d_mask = Matrix::zeros(mask_logits.rows, mask_logits.cols);
    let mask_pairs: Vec<&(usize, usize)> = matching
        .pairs
        .iter()
        .filter(|(_, s)| inputs.mask_on_pseudo || !targets[*s].is_pseudo)
        .collect();
    if !mask_pairs.is_empty() {
        let scale = 1.0 / mask_pairs.len() as f64;
        for &&(n, s) in &mask_pairs {
            let (v, g) = mask_loss_grad(mask_logits.row(n), &targets[s].mask)?;
            parts.mask += v * scale;
            for (o, gv) in d_mask.row_mut(n).iter_mut().zip(g) {
                *o += w.lambda_mask * scale * gv;
            }
        }
    }

    let d_queries = match inputs.ikd {
        Some(ikd) => {
            let term = ikd_loss(ikd.current, ikd.old, ikd.importance)?;
            parts.ikd = term.value;
            let mut g = term.grad;
            g.data.iter_mut().for_each(|v| *v *= w.lambda_ikd);
            Some(g)
        }
        None => None,
    };
    let total = total_loss(&parts, w)?;
    Ok(Objective {
        parts,
        total,
        d_class_logits: dl.grad,
        d_mask_logits: d_mask,
        d_queries,
    })
}

/// Class of each matched target, for reporting.
pub fn matched_classes(matching: &MatchResult, targets: &[SegmentLabel]) -> Vec<ClassId> {
    matching.pairs.iter().map(|&(_, s)| targets[s].class_id).collect()
}
