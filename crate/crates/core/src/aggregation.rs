//! Server-side weighting and combination of client pseudo-gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClientRecord;
use crate::models::GradientVector;

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("gradient {index} has length {got}, expected {expected}")]
    LengthMismatch { index: usize, expected: usize, got: usize },
    #[error("{weights} weights for {gradients} gradients")]
    CountMismatch { weights: usize, gradients: usize },
    #[error("weights sum to {sum}, not 1")]
    WeightSumViolation { sum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingPolicy {
    EntropySoftmax,
    DataSize,
    Equality,
}

impl WeightingPolicy {
    pub fn name(self) -> &'static str {
        match self {
            WeightingPolicy::EntropySoftmax => "entropy-softmax",
            WeightingPolicy::DataSize => "data-size",
            WeightingPolicy::Equality => "equality",
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Weights from per-client label entropies and sample counts, normalized over
/// the cohort.
pub fn weights_from_stats(
    policy: WeightingPolicy,
    entropies: &[f64],
    sizes: &[usize],
) -> Result<Vec<f64>, AggregationError> {
    let n = entropies.len();
    if n == 0 {
        return Err(AggregationError::EmptyCohort);
    }
    if sizes.len() != n {
        return Err(AggregationError::CountMismatch {
            weights: sizes.len(),
            gradients: n,
        });
    }
    Ok(match policy {
        WeightingPolicy::EntropySoftmax => softmax(entropies),
        WeightingPolicy::DataSize => {
            let total: usize = sizes.iter().sum();
            if total == 0 {
                vec![1.0 / n as f64; n]
            } else {
                sizes.iter().map(|&s| s as f64 / total as f64).collect()
            }
        }
        WeightingPolicy::Equality => vec![1.0 / n as f64; n],
    })
}

pub fn compute_weights(policy: WeightingPolicy, cohort: &[&ClientRecord]) -> Result<Vec<f64>, AggregationError> {
    let entropies: Vec<f64> = cohort.iter().map(|c| c.empirical_entropy).collect();
    let sizes: Vec<usize> = cohort.iter().map(|c| c.num_samples()).collect();
    weights_from_stats(policy, &entropies, &sizes)
}

/// Coordinate-wise `Σ α_i g_i`, accumulated in list order.
pub fn aggregate(gradients: &[GradientVector], weights: &[f64]) -> Result<GradientVector, AggregationError> {
    if gradients.is_empty() {
        return Err(AggregationError::EmptyCohort);
    }
    if weights.len() != gradients.len() {
        return Err(AggregationError::CountMismatch {
            weights: weights.len(),
            gradients: gradients.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE || weights.iter().any(|w| !w.is_finite()) {
        return Err(AggregationError::WeightSumViolation { sum });
    }
    let len = gradients[0].len();
    let mut out = vec![0.0; len];
    for (index, (g, &a)) in gradients.iter().zip(weights).enumerate() {
        if g.len() != len {
            return Err(AggregationError::LengthMismatch {
                index,
                expected: len,
                got: g.len(),
            });
        }
        for (o, v) in out.iter_mut().zip(g.values()) {
            *o += a * v;
        }
    }
    Ok(GradientVector(out))
}
