//! Discrete distributions and the information measures built on them.
//!
//! All logarithms are natural, so every quantity is in nats. The convention
//! `0 · ln 0 = 0` is applied throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default ceiling on the number of cells a joint distribution may enumerate.
pub const DEFAULT_ENUMERATION_CAP: usize = 10_000_000;

const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfoError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("support size mismatch: {left} vs {right}")]
    SupportSizeMismatch { left: usize, right: usize },
    #[error("joint space has {cells} cells, enumeration cap is {cap}")]
    EnumerationCapExceeded { cells: u128, cap: usize },
    #[error("label list is empty")]
    EmptyLabels,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
}

/// Probability mass over outcomes `0..support_size`.
///
/// Validated at construction; serialized as a bare JSON array of probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, InfoError> {
        if probs.is_empty() {
            return Err(InfoError::InvalidDistribution("empty support".into()));
        }
        if let Some((k, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(InfoError::InvalidDistribution(format!(
                "probability {p} at index {k} is outside [0, 1]"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(InfoError::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative masses onto the simplex.
    pub fn from_weights(weights: &[f64]) -> Result<Self, InfoError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(InfoError::InvalidDistribution(
                "weights must be nonnegative with a positive sum".into(),
            ));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(support_size: usize) -> Self {
        assert!(support_size > 0, "uniform distribution needs a nonempty support");
        Self {
            probs: vec![1.0 / support_size as f64; support_size],
        }
    }

    pub fn point_mass(support_size: usize, outcome: usize) -> Self {
        assert!(outcome < support_size);
        let mut probs = vec![0.0; support_size];
        probs[outcome] = 1.0;
        Self { probs }
    }

    pub fn support_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, outcome: usize) -> f64 {
        self.probs[outcome]
    }

    pub fn entropy(&self) -> f64 {
        entropy(self)
    }

    /// Σ p², the collision probability.
    pub fn collision_probability(&self) -> f64 {
        self.probs.iter().map(|p| p * p).sum()
    }
}

impl TryFrom<Vec<f64>> for DiscreteDistribution {
    type Error = InfoError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl From<DiscreteDistribution> for Vec<f64> {
    fn from(d: DiscreteDistribution) -> Self {
        d.probs
    }
}

/// Self-information `ln(1/p)` with the sure-outcome and zero-mass cases folded in.
#[inline]
pub fn self_information(p: f64) -> f64 {
    if p > 0.0 {
        -p.ln()
    } else {
        f64::INFINITY
    }
}

#[inline]
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats.
pub fn entropy(d: &DiscreteDistribution) -> f64 {
    // Clamp away the -0.0 / tiny negative rounding of a point mass.
    (-d.probs.iter().copied().map(plogp).sum::<f64>()).max(0.0)
}

/// Cross entropy `Σ p ln(1/q)`; infinite when `q` misses mass that `p` carries.
pub fn cross_entropy(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64, InfoError> {
    check_same_support(p, q)?;
    let mut total = 0.0;
    for (&pk, &qk) in p.probs.iter().zip(&q.probs) {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Ok(f64::INFINITY);
        }
        total -= pk * qk.ln();
    }
    Ok(total)
}

/// Relative entropy `KL(p ‖ q)`.
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64, InfoError> {
    check_same_support(p, q)?;
    let mut total = 0.0;
    for (&pk, &qk) in p.probs.iter().zip(&q.probs) {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pk * (pk / qk).ln();
    }
    Ok(total)
}

fn check_same_support(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<(), InfoError> {
    if p.support_size() != q.support_size() {
        return Err(InfoError::SupportSizeMismatch {
            left: p.support_size(),
            right: q.support_size(),
        });
    }
    Ok(())
}

/// Histogram of class ids; every id must be below `num_classes`.
pub fn label_histogram(labels: &[usize], num_classes: usize) -> Result<Vec<usize>, InfoError> {
    let mut counts = vec![0usize; num_classes];
    for &label in labels {
        if label >= num_classes {
            return Err(InfoError::LabelOutOfRange { label, num_classes });
        }
        counts[label] += 1;
    }
    Ok(counts)
}

/// Entropy of a label histogram, `−Σ (c_y/n) ln (c_y/n)`.
pub fn empirical_label_entropy(labels: &[usize], num_classes: usize) -> Result<f64, InfoError> {
    if labels.is_empty() {
        return Err(InfoError::EmptyLabels);
    }
    let counts = label_histogram(labels, num_classes)?;
    Ok(histogram_entropy(&counts))
}

/// Entropy of raw counts. An all-zero histogram has entropy 0.
pub fn histogram_entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let h = -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| plogp(c as f64 / n))
        .sum::<f64>();
    h.max(0.0)
}

/// A distribution over the product of several finite outcome sets.
///
/// Without an explicit table the joint is the product of its factors.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    factors: Vec<DiscreteDistribution>,
    explicit_joint: Option<Vec<f64>>,
}

impl JointDistribution {
    pub fn product(factors: Vec<DiscreteDistribution>) -> Result<Self, InfoError> {
        if factors.is_empty() {
            return Err(InfoError::InvalidDistribution("joint needs at least one factor".into()));
        }
        Ok(Self {
            factors,
            explicit_joint: None,
        })
    }

    /// A joint given cell-by-cell in row-major order (last factor fastest).
    ///
    /// `factors` fix the shape; they are replaced by the marginals of `table`.
    pub fn explicit(shape: &[usize], table: Vec<f64>) -> Result<Self, InfoError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(InfoError::InvalidDistribution("joint shape must be nonempty".into()));
        }
        let cells: usize = shape.iter().product();
        if table.len() != cells {
            return Err(InfoError::InvalidDistribution(format!(
                "joint table has {} cells, shape needs {cells}",
                table.len()
            )));
        }
        // Reuse the single-distribution validation for range and sum.
        let table = DiscreteDistribution::new(table)?.probs;
        let mut marginals: Vec<Vec<f64>> = shape.iter().map(|&s| vec![0.0; s]).collect();
        for (cell, &p) in CellIter::new(shape).zip(&table) {
            for (axis, &outcome) in cell.iter().enumerate() {
                marginals[axis][outcome] += p;
            }
        }
        let factors = marginals
            .into_iter()
            .map(|m| DiscreteDistribution::from_weights(&m))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            factors,
            explicit_joint: Some(table),
        })
    }

    pub fn factors(&self) -> &[DiscreteDistribution] {
        &self.factors
    }

    pub fn is_product(&self) -> bool {
        self.explicit_joint.is_none()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.support_size()).collect()
    }

    /// Number of cells in the product space, saturating rather than overflowing.
    pub fn cell_count(&self) -> u128 {
        self.factors
            .iter()
            .fold(1u128, |acc, f| acc.saturating_mul(f.support_size() as u128))
    }

    fn check_cap(&self, cap: usize) -> Result<(), InfoError> {
        let cells = self.cell_count();
        if cells > cap as u128 {
            return Err(InfoError::EnumerationCapExceeded { cells, cap });
        }
        Ok(())
    }

    /// Visits every cell with its probability. Errors if the space exceeds `cap`.
    pub fn for_each_cell(&self, cap: usize, mut visit: impl FnMut(&[usize], f64)) -> Result<(), InfoError> {
        self.check_cap(cap)?;
        let shape = self.shape();
        match &self.explicit_joint {
            Some(table) => {
                for (cell, &p) in CellIter::new(&shape).zip(table) {
                    visit(&cell, p);
                }
            }
            None => {
                for cell in CellIter::new(&shape) {
                    let p = cell
                        .iter()
                        .zip(&self.factors)
                        .map(|(&z, f)| f.prob(z))
                        .product();
                    visit(&cell, p);
                }
            }
        }
        Ok(())
    }

    /// Entropy of the full joint, computed by enumerating every cell.
    pub fn joint_entropy(&self, cap: usize) -> Result<f64, InfoError> {
        let mut acc = 0.0;
        self.for_each_cell(cap, |_, p| acc += plogp(p))?;
        Ok((-acc).max(0.0))
    }
}

pub fn joint_entropy(j: &JointDistribution) -> Result<f64, InfoError> {
    j.joint_entropy(DEFAULT_ENUMERATION_CAP)
}

/// Odometer over a mixed-radix index space, last axis fastest.
pub(crate) struct CellIter {
    shape: Vec<usize>,
    current: Vec<usize>,
    done: bool,
}

impl CellIter {
    pub(crate) fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            current: vec![0; shape.len()],
            done: shape.is_empty() || shape.contains(&0),
        }
    }
}

impl Iterator for CellIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let mut axis = self.shape.len();
        loop {
            if axis == 0 {
                self.done = true;
                break;
            }
            axis -= 1;
            self.current[axis] += 1;
            if self.current[axis] < self.shape[axis] {
                break;
            }
            self.current[axis] = 0;
        }
        Some(out)
    }
}
