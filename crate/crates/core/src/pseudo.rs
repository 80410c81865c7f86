//! Old-class pseudo labels from the frozen previous-step model.

use serde::{Deserialize, Serialize};

use crate::domain::{argmax_over, sigmoid, softmax, ClassId, Mask, ModelOutput, SegmentLabel};
use crate::error::{LabError, Result};
use crate::tensor::Matrix;

/// How the "pixel outside current labels" and "winning query" conditions combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoRule {
    /// Pixel must be uncovered by current labels AND won by an old-class query.
    #[default]
    Conjunction,
    /// Literal disjunctive reading: every pixel takes the winning query's class,
    /// including pixels already covered by current labels.
    Disjunction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    /// Winning query must have old-class confidence strictly above this.
    pub confidence_threshold: f64,
    pub min_pixels: usize,
    /// Winning query's own mask probability must exceed this at the pixel
    /// (0 leaves every pixel eligible).
    pub mask_threshold: f64,
    pub rule: PseudoRule,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            confidence_threshold: 0.0,
            min_pixels: 1,
            mask_threshold: 0.0,
            rule: PseudoRule::Conjunction,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.confidence_threshold) {
            return Err(LabError::InvalidArgument(
                "confidence_threshold must be in [0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_threshold) {
            return Err(LabError::InvalidArgument("mask_threshold must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedMasks {
    /// `sigmoid(mask_logits) * conf`, `N x (H*W)`.
    pub weighted: Matrix,
    pub classes: Vec<ClassId>,
    pub confidence: Vec<f64>,
}

/// Real old-class channels: finite logit columns other than reserved-0 and no-obj.
fn old_class_channels(logits: &Matrix) -> Vec<usize> {
    if logits.rows == 0 {
        return Vec::new();
    }
    (1..logits.cols.saturating_sub(1))
        .filter(|&c| logits.get(0, c).is_finite())
        .collect()
}

pub fn weighted_masks(old_output: &ModelOutput) -> Result<WeightedMasks> {
    let logits = &old_output.class_logits;
    let channels = old_class_channels(logits);
    if channels.is_empty() {
        return Err(LabError::NoOldModel);
    }
    let n = logits.rows;
    let hw = old_output.mask_logits.cols;
    let mut weighted = Matrix::zeros(n, hw);
    let mut classes = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for q in 0..n {
        let probs = softmax(logits.row(q))?.probs;
        let best = argmax_over(&probs, &channels).expect("non-empty channels");
        let conf = probs[best];
        classes.push(ClassId(best as u16));
        confidence.push(conf);
        for (o, &x) in weighted.row_mut(q).iter_mut().zip(old_output.mask_logits.row(q)) {
            *o = sigmoid(x) * conf;
        }
    }
    Ok(WeightedMasks {
        weighted,
        classes,
        confidence,
    })
}

pub fn pseudo_labels(
    old_output: &ModelOutput,
    current_gt: &[SegmentLabel],
    cfg: &PseudoConfig,
) -> Result<Vec<SegmentLabel>> {
    cfg.validate()?;
    let wm = weighted_masks(old_output)?;
    let (h, w) = (old_output.height, old_output.width);
    let hw = h * w;
    if wm.weighted.cols != hw {
        return Err(LabError::DimensionMismatch(format!(
            "{} mask columns for a {h}x{w} image",
            wm.weighted.cols
        )));
    }
    let mut covered = vec![false; hw];
    for l in current_gt {
        if l.mask.len() != hw {
            return Err(LabError::DimensionMismatch("ground-truth mask size".into()));
        }
        for (c, &b) in covered.iter_mut().zip(&l.mask.bits) {
            *c |= b;
        }
    }
    let n = wm.weighted.rows;
    let mut won: Vec<Vec<bool>> = vec![Vec::new(); n];
    for pix in 0..hw {
        if cfg.rule == PseudoRule::Conjunction && covered[pix] {
            continue;
        }
        let mut best = 0;
        for q in 1..n {
            if wm.weighted.get(q, pix) > wm.weighted.get(best, pix) {
                best = q;
            }
        }
        if wm.confidence[best] <= cfg.confidence_threshold {
            continue;
        }
        if sigmoid(old_output.mask_logits.get(best, pix)) <= cfg.mask_threshold
            && cfg.mask_threshold > 0.0
        {
            continue;
        }
        let bits = &mut won[best];
        if bits.is_empty() {
            bits.resize(hw, false);
        }
        bits[pix] = true;
    }
    let mut next_id = current_gt.iter().map(|l| l.instance_id).max().unwrap_or(0);
    let mut out = Vec::new();
    for (q, bits) in won.into_iter().enumerate() {
        if bits.is_empty() {
            continue;
        }
        let mask = Mask {
            height: h,
            width: w,
            bits,
        };
        if mask.area() < cfg.min_pixels.max(1) {
            continue;
        }
        next_id += 1;
        out.push(SegmentLabel {
            class_id: wm.classes[q],
            mask,
            instance_id: next_id,
            is_pseudo: true,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NEG: f64 = f64::NEG_INFINITY;

    /// Old model at step 2 with classes {1, 2} active out of Cmax = 3.
    fn output(class_rows: &[[f64; 5]], masks: Vec<Vec<f64>>, h: usize, w: usize) -> ModelOutput {
        let logits = Matrix::from_rows(&class_rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        ModelOutput {
            queries_per_layer: vec![Matrix::zeros(class_rows.len(), 2); 2],
            class_logits: logits,
            mask_logits: Matrix::from_rows(&masks),
            refined_flags: vec![false; class_rows.len()],
            height: h,
            width: w,
        }
    }

    fn gt(bits: impl Fn(usize, usize) -> bool, class: u16) -> SegmentLabel {
        SegmentLabel {
            class_id: ClassId(class),
            mask: Mask::from_fn(4, 4, bits),
            instance_id: 1,
            is_pseudo: false,
        }
    }

    #[test]
    fn one_hot_class_and_conf() {
        let out = output(&[[NEG, 0.0, 8.0, NEG, 0.0]], vec![vec![0.0; 4]], 2, 2);
        let wm = weighted_masks(&out).unwrap();
        assert_eq!(wm.classes, vec![ClassId(2)]);
        let e8 = 8f64.exp();
        assert!((wm.confidence[0] - e8 / (e8 + 2.0)).abs() < 1e-12);
        assert!((wm.weighted.get(0, 0) - 0.5 * wm.confidence[0]).abs() < 1e-12);
    }

    #[test]
    fn no_obj_query_loses_to_confident_query() {
        let out = output(
            &[[NEG, 0.0, 0.0, NEG, 9.0], [NEG, 5.0, 0.0, NEG, 0.0]],
            vec![vec![3.0; 4], vec![0.0; 4]],
            2,
            2,
        );
        let labels = pseudo_labels(&out, &[], &PseudoConfig::default()).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].class_id, ClassId(1));
        assert_eq!(labels[0].mask.area(), 4);
    }

    #[test]
    fn fully_covered_image_has_no_pseudo_labels() {
        let out = output(&[[NEG, 5.0, 0.0, NEG, 0.0]], vec![vec![2.0; 16]], 4, 4);
        let labels = pseudo_labels(&out, &[gt(|_, _| true, 3)], &PseudoConfig::default()).unwrap();
        assert!(labels.is_empty());
    }

    #[test]
    fn high_threshold_suppresses_weak_model() {
        let out = output(&[[NEG, 0.1, 0.0, NEG, 0.0]], vec![vec![2.0; 16]], 4, 4);
        let cfg = PseudoConfig {
            confidence_threshold: 0.99,
            ..Default::default()
        };
        assert!(pseudo_labels(&out, &[], &cfg).unwrap().is_empty());
    }

    #[test]
    fn step_one_has_no_old_model() {
        let out = output(&[[NEG, NEG, NEG, NEG, 0.0]], vec![vec![0.0; 4]], 2, 2);
        assert!(matches!(weighted_masks(&out), Err(LabError::NoOldModel)));
    }

    /// Per-pixel enumeration oracle for the crafted 2-query, 3-class, 4x4 case.
    #[test]
    fn crafted_instance_matches_enumeration() {
        // query 0 -> class 1 (left half), query 1 -> class 2 (bottom rows)
        let m0: Vec<f64> = (0..16).map(|i| if i % 4 < 2 { 4.0 } else { -4.0 }).collect();
        let m1: Vec<f64> = (0..16).map(|i| if i / 4 >= 2 { 3.0 } else { -3.0 }).collect();
        let out = output(
            &[[NEG, 3.0, 0.0, NEG, 0.0], [NEG, 0.0, 2.0, NEG, 1.0]],
            vec![m0.clone(), m1.clone()],
            4,
            4,
        );
        // ground truth (class 3) covers the top-right 2x2 block
        let current = gt(|y, x| y < 2 && x >= 2, 3);
        let labels = pseudo_labels(&out, &[current.clone()], &PseudoConfig::default()).unwrap();

        let sm = |row: [f64; 3]| {
            let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let conf0 = sm([3.0, 0.0, 0.0])[0];
        let conf1 = sm([0.0, 2.0, 1.0])[1];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut want0 = vec![false; 16];
        let mut want1 = vec![false; 16];
        for pix in 0..16 {
            if current.mask.bits[pix] {
                continue;
            }
            let w0 = sig(m0[pix]) * conf0;
            let w1 = sig(m1[pix]) * conf1;
            if w1 > w0 {
                want1[pix] = true;
            } else {
                want0[pix] = true;
            }
        }
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[0].class_id, ClassId(1));
        assert_eq!(labels[0].mask.bits, want0);
        assert_eq!(labels[1].class_id, ClassId(2));
        assert_eq!(labels[1].mask.bits, want1);
        assert!(labels.iter().all(|l| l.is_pseudo && !l.mask.overlaps(&current.mask)));
        assert!(labels.iter().all(|l| l.instance_id > current.instance_id));

        // the literal disjunctive reading also labels covered pixels
        let cfg = PseudoConfig {
            rule: PseudoRule::Disjunction,
            ..Default::default()
        };
        let loose = pseudo_labels(&out, &[current.clone()], &cfg).unwrap();
        let covered: usize = loose.iter().map(|l| l.mask.intersection_area(&current.mask)).sum();
        assert_eq!(covered, 4);
    }

    #[test]
    fn mask_threshold_and_min_pixels() {
        let m: Vec<f64> = (0..16).map(|i| if i == 0 { 5.0 } else { -5.0 }).collect();
        let out = output(&[[NEG, 4.0, 0.0, NEG, 0.0]], vec![m], 4, 4);
        let gated = PseudoConfig {
            mask_threshold: 0.5,
            ..Default::default()
        };
        let labels = pseudo_labels(&out, &[], &gated).unwrap();
        assert_eq!(labels[0].mask.area(), 1);
        let strict = PseudoConfig {
            mask_threshold: 0.5,
            min_pixels: 2,
            ..Default::default()
        };
        assert!(pseudo_labels(&out, &[], &strict).unwrap().is_empty());
    }

    #[test]
    fn random_instances_never_overlap_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.random_range(1..5);
            let rows: Vec<[f64; 5]> = (0..n)
                .map(|_| [NEG, rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), NEG, rng.random_range(-3.0..3.0)])
                .collect();
            let masks = (0..n)
                .map(|_| (0..16).map(|_| rng.random_range(-4.0..4.0)).collect())
                .collect();
            let out = output(&rows, masks, 4, 4);
            let split = rng.random_range(0..16);
            let current = gt(|y, x| y * 4 + x < split, 3);
            let gts: Vec<SegmentLabel> = if split == 0 { vec![] } else { vec![current.clone()] };
            let labels = pseudo_labels(&out, &gts, &PseudoConfig::default()).unwrap();
            for (i, l) in labels.iter().enumerate() {
                assert!(!l.mask.overlaps(&current.mask) || split == 0);
                assert!(l.class_id == ClassId(1) || l.class_id == ClassId(2));
                for other in &labels[..i] {
                    assert!(!other.mask.overlaps(&l.mask));
                }
            }
        }
    }
}
