//! Per-query importance from accumulated minimum matching costs.
//!
//! After a step is trained, every training image's cost matrix contributes
//! each query's cheapest target cost to a running buffer. Queries that engage
//! the step's classes most cheaply get the highest importance, and the new
//! vector is blended with the previous one by class counts.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matching::CostMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub values: Vec<f64>,
    pub step: usize,
}

impl ImportanceVector {
    /// The step-1 vector: all zeros (it carries zero weight when first blended).
    pub fn initial(n_queries: usize) -> Self {
        ImportanceVector {
            values: vec![0.0; n_queries],
            step: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(())
        } else {
            Err(LabError::InvalidArgument("importance values must lie in [0, 1]".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBuffer {
    pub values: Vec<f64>,
    pub images_seen: usize,
}

impl CostBuffer {
    pub fn new(n_queries: usize) -> Self {
        CostBuffer {
            values: vec![0.0; n_queries],
            images_seen: 0,
        }
    }

    /// Adds another buffer's sums (shard merge); callers merge in a fixed order.
    pub fn merge(&mut self, other: &CostBuffer) -> Result<()> {
        if other.values.len() != self.values.len() {
            return Err(LabError::DimensionMismatch(format!(
                "buffer of {} queries merged into {}",
                other.values.len(),
                self.values.len()
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.images_seen += other.images_seen;
        Ok(())
    }
}

/// Adds each query's row minimum of `cost` to the buffer.
pub fn accumulate_buffer(mut buffer: CostBuffer, cost: &CostMatrix) -> Result<CostBuffer> {
    if cost.rows() != buffer.values.len() {
        return Err(LabError::DimensionMismatch(format!(
            "cost matrix has {} query rows, buffer {}",
            cost.rows(),
            buffer.values.len()
        )));
    }
    if cost.cols() == 0 {
        return Err(LabError::NoTargets);
    }
    for (b, m) in buffer.values.iter_mut().zip(cost.row_minima()) {
        *b += m;
    }
    buffer.images_seen += 1;
    Ok(buffer)
}

/// `1 - (B - min B) / (max B - min B)`, or all ones when the buffer is flat.
pub fn step_importance(buffer: &CostBuffer) -> Result<Vec<f64>> {
    if buffer.images_seen == 0 {
        return Err(LabError::InvalidArgument("cost buffer has seen no images".into()));
    }
    if buffer.values.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("cost buffer".into()));
    }
    let lo = buffer.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = buffer.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![1.0; buffer.values.len()]);
    }
    Ok(buffer
        .values
        .iter()
        .map(|&b| (1.0 - (b - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect())
}

/// Blends the previous vector with this step's importance by old/new class counts.
pub fn finalize_importance(
    buffer: &CostBuffer,
    previous: &ImportanceVector,
    n_old: usize,
    n_new: usize,
) -> Result<ImportanceVector> {
    if previous.values.len() != buffer.values.len() {
        return Err(LabError::DimensionMismatch(format!(
            "importance of {} queries vs buffer of {}",
            previous.values.len(),
            buffer.values.len()
        )));
    }
    if n_new == 0 {
        return Err(LabError::InvalidArgument("step introduced no classes".into()));
    }
    let current = step_importance(buffer)?;
    let values = if n_old == 0 {
        current
    } else {
        let total = (n_old + n_new) as f64;
        let (a, b) = (n_old as f64 / total, n_new as f64 / total);
        previous
            .values
            .iter()
            .zip(&current)
            .map(|(&p, &c)| (a * p + b * c).clamp(0.0, 1.0))
            .collect()
    };
    Ok(ImportanceVector {
        values,
        step: previous.step + 1,
    })
}
