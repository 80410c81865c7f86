//! Shared value types and index conventions.
//!
//! Class-logit channel layout is `[reserved-0, class 1, ..., class Cmax, no-obj]`:
//! channel 0 is never active, the no-obj channel is always the last one, and
//! channels of classes not introduced yet are masked to `-inf` before any
//! softmax.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub fn new(value: u16) -> Result<Self> {
        if value == 0 {
            return Err(LabError::InvalidArgument(
                "class id 0 is reserved".to_string(),
            ));
        }
        Ok(ClassId(value))
    }

    pub fn value(self) -> u16 {
        self.0
    }

    /// Logit channel carrying this class.
    pub fn channel(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which class-logit channels are live at the current step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub max_classes: usize,
    pub active_classes: BTreeSet<ClassId>,
}

impl ChannelLayout {
    pub fn new(max_classes: usize) -> Self {
        ChannelLayout {
            max_classes,
            active_classes: BTreeSet::new(),
        }
    }

    pub fn with_classes(max_classes: usize, classes: impl IntoIterator<Item = ClassId>) -> Self {
        ChannelLayout {
            max_classes,
            active_classes: classes.into_iter().collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.max_classes + 2
    }

    pub fn no_obj(&self) -> usize {
        self.max_classes + 1
    }

    pub fn is_active(&self, channel: usize) -> bool {
        channel == self.no_obj()
            || (channel >= 1
                && channel <= self.max_classes
                && self.active_classes.contains(&ClassId(channel as u16)))
    }

    /// Active channel indices in ascending order (no-obj last).
    pub fn active_channels(&self) -> Vec<usize> {
        (0..self.channels()).filter(|&c| self.is_active(c)).collect()
    }

    /// Overwrites inactive channels of every row with `-inf`.
    pub fn mask_logits(&self, logits: &mut Matrix) {
        debug_assert_eq!(logits.cols, self.channels());
        let inactive: Vec<usize> = (0..self.channels()).filter(|&c| !self.is_active(c)).collect();
        for r in 0..logits.rows {
            let row = logits.row_mut(r);
            for &c in &inactive {
                row[c] = f64::NEG_INFINITY;
            }
        }
    }
}

/// Binary H x W mask, row-major.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, area {})", self.height, self.width, self.area())
    }
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Mask {
            height,
            width,
            bits,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn overlaps(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLabel {
    pub class_id: ClassId,
    pub mask: Mask,
    pub instance_id: u16,
    pub is_pseudo: bool,
}

/// 8-bit RGB image with its segment labels. Pixel values are `byte / 255` in [0, 1].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSample {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, row-major, `3 * height * width` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<SegmentLabel>,
}

pub const MIN_IMAGE_SIDE: usize = 8;

impl ImageSample {
    #[inline]
    pub fn value(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + channel] as f64 / 255.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_IMAGE_SIDE || self.width < MIN_IMAGE_SIDE {
            return Err(LabError::InvalidArgument(format!(
                "image {} is {}x{}, minimum side is {MIN_IMAGE_SIDE}",
                self.sample_id, self.height, self.width
            )));
        }
        if self.pixels.len() != 3 * self.height * self.width {
            return Err(LabError::DimensionMismatch(format!(
                "image {} has {} bytes, expected {}",
                self.sample_id,
                self.pixels.len(),
                3 * self.height * self.width
            )));
        }
        for (i, label) in self.labels.iter().enumerate() {
            if label.mask.height != self.height || label.mask.width != self.width {
                return Err(LabError::DimensionMismatch(format!(
                    "label {i} of {} has mask {}x{}",
                    self.sample_id, label.mask.height, label.mask.width
                )));
            }
            if label.mask.area() == 0 {
                return Err(LabError::InvalidArgument(format!(
                    "label {i} of {} has an empty mask",
                    self.sample_id
                )));
            }
            for other in &self.labels[..i] {
                if other.mask.overlaps(&label.mask) {
                    return Err(LabError::InvalidArgument(format!(
                        "overlapping label masks in {}",
                        self.sample_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.labels.iter().map(|l| l.class_id).collect()
    }
}

/// Per-image network outputs. `mask_logits` is `N x (H*W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub queries_per_layer: Vec<Matrix>,
    pub class_logits: Matrix,
    pub mask_logits: Matrix,
    pub refined_flags: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl ModelOutput {
    pub fn n_queries(&self) -> usize {
        self.class_logits.rows
    }

    pub fn final_queries(&self) -> &Matrix {
        self.queries_per_layer.last().expect("at least one decoder layer")
    }

    /// Row-wise softmax of the (masked) class logits.
    pub fn class_probs(&self) -> Result<Matrix> {
        softmax_rows(&self.class_logits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbDistribution {
    pub probs: Vec<f64>,
}

/// Exp-normalization; `-inf` channels map to exactly 0.
pub fn softmax(logits: &[f64]) -> Result<ProbDistribution> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(LabError::EmptySupport);
    }
    if !m.is_finite() || logits.iter().any(|v| v.is_nan()) {
        return Err(LabError::NonFinite("softmax logits".to_string()));
    }
    let mut probs: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= s);
    Ok(ProbDistribution { probs })
}

pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        out.row_mut(r)
            .copy_from_slice(&softmax(logits.row(r))?.probs);
    }
    Ok(out)
}

/// Index of the largest entry among `channels`; the lowest index wins ties.
pub fn argmax_over(row: &[f64], channels: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &c in channels {
        match best {
            Some(b) if row[c] <= row[b] => {}
            _ => best = Some(c),
        }
    }
    best
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central-difference check of an analytic gradient.
///
/// `f` returns the scalar value and its analytic gradient at the given point.
/// The result is `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(LabError::InvalidArgument(format!(
            "epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(LabError::NonFinite("grad_check function value".to_string()));
    }
    if analytic.len() != params.len() {
        return Err(LabError::DimensionMismatch(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (plus, _) = f(&x)?;
        x[i] = orig - epsilon;
        let (minus, _) = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LabError::NonFinite(format!(
                "grad_check function value at parameter {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
