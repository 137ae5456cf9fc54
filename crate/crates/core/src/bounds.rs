//! Exact verification of the self-information weighted generalization bounds.
//!
//! A [`ToyWorld`] is small enough that every expectation over the joint sample
//! space can be enumerated, so each side of an inequality is computed exactly
//! and compared. Clients are independent (the joint is the product of the
//! per-client distributions).

use std::collections::BTreeMap;

use rand::Rng as _;
use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::info::{
    cross_entropy, DiscreteDistribution, InfoError, JointDistribution, DEFAULT_ENUMERATION_CAP,
};
use crate::seed::{derive_seed, rng_from, Rng};

/// Slack below which a claimed inequality counts as violated.
pub const SLACK_TOLERANCE: f64 = 1e-9;

const DEFAULT_SAMPLE_SIZE: usize = 4;
const LIPSCHITZ_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error(transparent)]
    Info(#[from] InfoError),
    #[error("lipschitz precondition violated: |l(h{h},z{z}) - l(h{g},z{z})| = {gap} > L*d = {allowed}")]
    LipschitzPreconditionViolated {
        h: usize,
        g: usize,
        z: usize,
        gap: f64,
        allowed: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// JSON shape of a world file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub distributions: Vec<DiscreteDistribution>,
    /// `losses[h][z]`, each in `[0, loss_bound]`.
    pub losses: Vec<Vec<f64>>,
    pub loss_bound: f64,
    /// Defaults to every client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participating: Option<Vec<usize>>,
    /// Defaults to the participating set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<Vec<usize>>,
    /// Aggregation weights aligned with `participating`; defaults to uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Per-client training samples (outcome indices) used to pick the ERM hypothesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub sample_seed: u64,
    /// Hypothesis distance matrix for the overfitting-error check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

/// A finite federated world: clients, their distributions over a shared
/// sample space, a finite hypothesis set and the nested index sets
/// `selected ⊆ participating ⊆ all clients`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldSpec", into = "WorldSpec")]
pub struct ToyWorld {
    distributions: Vec<DiscreteDistribution>,
    losses: Vec<Vec<f64>>,
    loss_bound: f64,
    participating: Vec<usize>,
    selected: Vec<usize>,
    weights: Vec<f64>,
    sample: Vec<Vec<usize>>,
    sample_seed: u64,
    distances: Option<Vec<Vec<f64>>>,
    lipschitz: Option<f64>,
    enumeration_cap: usize,
}

impl TryFrom<WorldSpec> for ToyWorld {
    type Error = BoundsError;

    fn try_from(spec: WorldSpec) -> Result<Self, Self::Error> {
        let n = spec.distributions.len();
        let participating = spec.participating.unwrap_or_else(|| (0..n).collect());
        let selected = spec.selected.unwrap_or_else(|| participating.clone());
        let weights = spec
            .weights
            .unwrap_or_else(|| vec![1.0 / participating.len().max(1) as f64; participating.len()]);
        let mut world = ToyWorld::new(
            spec.distributions,
            spec.losses,
            spec.loss_bound,
            participating,
            selected,
            weights,
        )?;
        world.sample_seed = spec.sample_seed;
        world = match spec.sample {
            Some(sample) => world.with_sample(sample)?,
            None => {
                let sample = world.draw_sample(DEFAULT_SAMPLE_SIZE, spec.sample_seed);
                world.with_sample(sample)?
            }
        };
        if let Some(d) = spec.distances {
            world = world.with_geometry(d, spec.lipschitz)?;
        } else if spec.lipschitz.is_some() {
            return Err(BoundsError::InvalidWorld("lipschitz given without distances".into()));
        }
        Ok(world)
    }
}

impl From<ToyWorld> for WorldSpec {
    fn from(w: ToyWorld) -> Self {
        WorldSpec {
            distributions: w.distributions,
            losses: w.losses,
            loss_bound: w.loss_bound,
            participating: Some(w.participating),
            selected: Some(w.selected),
            weights: Some(w.weights),
            sample: Some(w.sample),
            sample_seed: w.sample_seed,
            distances: w.distances,
            lipschitz: w.lipschitz,
        }
    }
}

fn check_index_set(name: &str, set: &[usize], universe: usize) -> Result<(), BoundsError> {
    if set.is_empty() {
        return Err(BoundsError::InvalidWorld(format!("{name} set is empty")));
    }
    let mut seen = vec![false; universe];
    for &i in set {
        if i >= universe {
            return Err(BoundsError::InvalidWorld(format!("{name} index {i} out of range")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(BoundsError::InvalidWorld(format!("{name} index {i} repeated")));
        }
    }
    Ok(())
}

impl ToyWorld {
    /// Builds and validates a world. A default training sample is drawn with seed 0.
    pub fn new(
        distributions: Vec<DiscreteDistribution>,
        losses: Vec<Vec<f64>>,
        loss_bound: f64,
        participating: Vec<usize>,
        selected: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Self, BoundsError> {
        let n = distributions.len();
        if n == 0 {
            return Err(BoundsError::InvalidWorld("no clients".into()));
        }
        let z = distributions[0].support_size();
        if distributions.iter().any(|d| d.support_size() != z) {
            return Err(BoundsError::InvalidWorld("client distributions differ in support size".into()));
        }
        if losses.is_empty() {
            return Err(BoundsError::InvalidWorld("empty hypothesis set".into()));
        }
        if !(loss_bound.is_finite() && loss_bound > 0.0) {
            return Err(BoundsError::InvalidWorld(format!("loss bound {loss_bound} must be positive")));
        }
        for (h, row) in losses.iter().enumerate() {
            if row.len() != z {
                return Err(BoundsError::InvalidWorld(format!(
                    "loss row {h} has {} entries, sample space has {z}",
                    row.len()
                )));
            }
            if let Some(l) = row.iter().find(|l| !(**l >= 0.0 && **l <= loss_bound)) {
                return Err(BoundsError::InvalidWorld(format!(
                    "loss {l} of hypothesis {h} outside [0, {loss_bound}]"
                )));
            }
        }
        check_index_set("participating", &participating, n)?;
        check_index_set("selected", &selected, n)?;
        if let Some(i) = selected.iter().find(|i| !participating.contains(i)) {
            return Err(BoundsError::InvalidWorld(format!("selected client {i} is not participating")));
        }
        if weights.len() != participating.len() {
            return Err(BoundsError::InvalidWorld("one weight per participating client required".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(BoundsError::InvalidWorld("weights must be nonnegative and sum to 1".into()));
        }
        let mut world = Self {
            distributions,
            losses,
            loss_bound,
            participating,
            selected,
            weights,
            sample: Vec::new(),
            sample_seed: 0,
            distances: None,
            lipschitz: None,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        };
        world.sample = world.draw_sample(DEFAULT_SAMPLE_SIZE, 0);
        Ok(world)
    }

    /// Replaces the training sample; every participating client needs at least one draw.
    pub fn with_sample(mut self, sample: Vec<Vec<usize>>) -> Result<Self, BoundsError> {
        if sample.len() != self.num_clients() {
            return Err(BoundsError::InvalidWorld("sample needs one list per client".into()));
        }
        if sample.iter().flatten().any(|&z| z >= self.support_size()) {
            return Err(BoundsError::InvalidWorld("sample outcome out of range".into()));
        }
        if self.participating.iter().any(|&i| sample[i].is_empty()) {
            return Err(BoundsError::InvalidWorld("participating client without samples".into()));
        }
        self.sample = sample;
        Ok(self)
    }

    /// Attaches a hypothesis distance matrix and, optionally, a Lipschitz constant.
    pub fn with_geometry(mut self, distances: Vec<Vec<f64>>, lipschitz: Option<f64>) -> Result<Self, BoundsError> {
        validate_distances(&distances, self.num_hypotheses())?;
        if let Some(l) = lipschitz {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(BoundsError::InvalidWorld(format!("lipschitz constant {l} invalid")));
            }
        }
        self.distances = Some(distances);
        self.lipschitz = lipschitz;
        Ok(self)
    }

    pub fn with_enumeration_cap(mut self, cap: usize) -> Self {
        self.enumeration_cap = cap;
        self
    }

    /// Draws `per_client` i.i.d. outcomes for every client from its own distribution.
    pub fn draw_sample(&self, per_client: usize, seed: u64) -> Vec<Vec<usize>> {
        self.distributions
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let mut rng = rng_from(seed, &[i as u64]);
                (0..per_client).map(|_| sample_outcome(d, &mut rng)).collect()
            })
            .collect()
    }

    pub fn num_clients(&self) -> usize {
        self.distributions.len()
    }

    pub fn support_size(&self) -> usize {
        self.distributions[0].support_size()
    }

    pub fn num_hypotheses(&self) -> usize {
        self.losses.len()
    }

    pub fn loss_bound(&self) -> f64 {
        self.loss_bound
    }

    pub fn distributions(&self) -> &[DiscreteDistribution] {
        &self.distributions
    }

    pub fn losses(&self) -> &[Vec<f64>] {
        &self.losses
    }

    pub fn participating(&self) -> &[usize] {
        &self.participating
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self) -> &[Vec<usize>] {
        &self.sample
    }

    pub fn loss(&self, h: usize, z: usize) -> f64 {
        self.losses[h][z]
    }

    /// Distances and Lipschitz constant for the overfitting check.
    ///
    /// Without an attached matrix, uses the sup-norm distance between loss
    /// rows, for which `L = 1` is the tightest feasible constant.
    pub fn geometry(&self) -> (Vec<Vec<f64>>, f64) {
        match &self.distances {
            Some(d) => {
                let l = self.lipschitz.unwrap_or_else(|| tightest_lipschitz(&self.losses, d));
                (d.clone(), l)
            }
            None => (sup_norm_distances(&self.losses), 1.0),
        }
    }

    /// The same world restricted to its participating clients, all of which participate.
    pub fn participating_subworld(&self) -> ToyWorld {
        let remap = |i: usize| self.participating.iter().position(|&p| p == i).expect("participating");
        let mut sub = self.clone();
        sub.distributions = self.participating.iter().map(|&i| self.distributions[i].clone()).collect();
        sub.sample = self.participating.iter().map(|&i| self.sample[i].clone()).collect();
        sub.selected = self.selected.iter().map(|&i| remap(i)).collect();
        sub.participating = (0..self.participating.len()).collect();
        sub
    }

    fn joint_of(&self, clients: &[usize]) -> JointDistribution {
        JointDistribution::product(clients.iter().map(|&i| self.distributions[i].clone()).collect())
            .expect("nonempty client set")
    }

    /// H(Z^S) for a client subset, by enumeration.
    pub fn joint_entropy_of(&self, clients: &[usize]) -> Result<f64, BoundsError> {
        Ok(self.joint_of(clients).joint_entropy(self.enumeration_cap)?)
    }

    pub fn all_clients(&self) -> Vec<usize> {
        (0..self.num_clients()).collect()
    }

    /// `E[Σ_k c_k ℓ(h, Z_{clients[k]}) ln(1/P(Z^{clients}))]` over the product joint.
    pub fn weighted_joint_risk(&self, h: usize, clients: &[usize], coefficients: &[f64]) -> Result<f64, BoundsError> {
        assert_eq!(clients.len(), coefficients.len());
        let row = &self.losses[h];
        let mut acc = 0.0;
        self.joint_of(clients).for_each_cell(self.enumeration_cap, |cell, p| {
            if p > 0.0 {
                let loss: f64 = cell.iter().zip(coefficients).map(|(&z, c)| c * row[z]).sum();
                acc -= p * p.ln() * loss;
            }
        })?;
        Ok(acc)
    }
}

fn validate_distances(d: &[Vec<f64>], hypotheses: usize) -> Result<(), BoundsError> {
    if d.len() != hypotheses || d.iter().any(|r| r.len() != hypotheses) {
        return Err(BoundsError::InvalidWorld(format!(
            "distance matrix must be {hypotheses}x{hypotheses}"
        )));
    }
    if d.iter().flatten().any(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(BoundsError::InvalidWorld("distances must be finite and nonnegative".into()));
    }
    Ok(())
}

fn sample_outcome(d: &DiscreteDistribution, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (z, &p) in d.probs().iter().enumerate() {
        acc += p;
        if u < acc {
            return z;
        }
    }
    // Rounding left u above the cumulative sum; take the last outcome with mass.
    d.probs().iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `d(h, g) = max_z |ℓ(h,z) − ℓ(g,z)|`.
pub fn sup_norm_distances(losses: &[Vec<f64>]) -> Vec<Vec<f64>> {
    losses
        .iter()
        .map(|a| {
            losses
                .iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
                .collect()
        })
        .collect()
}

/// Smallest `L` with `|ℓ(h,z) − ℓ(g,z)| ≤ L·d(h,g)`; infinite if a zero
/// distance separates different loss rows.
pub fn tightest_lipschitz(losses: &[Vec<f64>], distances: &[Vec<f64>]) -> f64 {
    let mut l: f64 = 0.0;
    for (h, row_h) in losses.iter().enumerate() {
        for (g, row_g) in losses.iter().enumerate() {
            let gap = row_h.iter().zip(row_g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if gap == 0.0 {
                continue;
            }
            let d = distances[h][g];
            l = l.max(if d > 0.0 { gap / d } else { f64::INFINITY });
        }
    }
    l
}

/// Self-information weighted risk of `h` on one client: `Σ_z P(z) ℓ(h,z) ln(1/P(z))`.
pub fn si_weighted_risk(world: &ToyWorld, h: usize, client: usize) -> f64 {
    world.distributions[client]
        .probs()
        .iter()
        .zip(&world.losses[h])
        .filter(|(p, _)| **p > 0.0)
        .map(|(&p, &l)| -p * p.ln() * l)
        .sum()
}

/// Joint self-information weighted risk over all `N` clients, averaging the loss over positions.
pub fn joint_si_weighted_risk(world: &ToyWorld, h: usize) -> Result<f64, BoundsError> {
    let n = world.num_clients();
    world.weighted_joint_risk(h, &world.all_clients(), &vec![1.0 / n as f64; n])
}

/// `Σ_{i ∈ I_p} α_i · si_weighted_risk(h, i)`.
pub fn semi_empirical_risk(world: &ToyWorld, h: usize) -> f64 {
    world
        .participating
        .iter()
        .zip(&world.weights)
        .map(|(&i, &a)| a * si_weighted_risk(world, h, i))
        .sum()
}

/// Equal-weight semi-empirical risk over the selected cohort.
pub fn selected_risk(world: &ToyWorld, h: usize) -> f64 {
    let k = world.selected.len() as f64;
    world.selected.iter().map(|&i| si_weighted_risk(world, h, i)).sum::<f64>() / k
}

fn sample_mean_loss(world: &ToyWorld, h: usize, client: usize) -> f64 {
    let s = &world.sample[client];
    s.iter().map(|&z| world.losses[h][z]).sum::<f64>() / s.len() as f64
}

/// Index of the smallest value; the lowest index wins ties.
fn argmin_by(len: usize, mut f: impl FnMut(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_val = f(0);
    for h in 1..len {
        let v = f(h);
        if v < best_val {
            best = h;
            best_val = v;
        }
    }
    best
}

fn argmax_by(len: usize, mut f: impl FnMut(usize) -> f64) -> usize {
    argmin_by(len, |h| -f(h))
}

/// The three distinguished hypotheses of a world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Minimizers {
    /// Minimizer of the α-weighted empirical loss on the drawn sample.
    pub erm: usize,
    /// Minimizer of the semi-empirical risk.
    pub semi_empirical: usize,
    /// Hypothesis farthest (in `L·d`) from the semi-empirical minimizer.
    pub overfitting_argmax: usize,
}

pub fn erm_hypothesis(world: &ToyWorld) -> usize {
    argmin_by(world.num_hypotheses(), |h| {
        world
            .participating
            .iter()
            .zip(&world.weights)
            .map(|(&i, &a)| a * sample_mean_loss(world, h, i))
            .sum()
    })
}

/// ERM over the selected cohort with equal weights.
pub fn selected_erm_hypothesis(world: &ToyWorld) -> usize {
    argmin_by(world.num_hypotheses(), |h| {
        world.selected.iter().map(|&i| sample_mean_loss(world, h, i)).sum()
    })
}

pub fn semi_empirical_minimizer(world: &ToyWorld) -> usize {
    argmin_by(world.num_hypotheses(), |h| semi_empirical_risk(world, h))
}

pub fn minimizers(world: &ToyWorld, distances: &[Vec<f64>], lipschitz: f64) -> Result<Minimizers, BoundsError> {
    validate_distances(distances, world.num_hypotheses())?;
    let semi = semi_empirical_minimizer(world);
    Ok(Minimizers {
        erm: erm_hypothesis(world),
        semi_empirical: semi,
        overfitting_argmax: argmax_by(world.num_hypotheses(), |h| lipschitz * distances[semi][h]),
    })
}

/// One checked inequality `lhs ≤ rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    pub terms: BTreeMap<String, f64>,
}

impl GapReport {
    fn new(check: &str, lhs: f64, rhs: f64, terms: BTreeMap<String, f64>) -> Self {
        let slack = rhs - lhs;
        Self {
            check: check.to_string(),
            lhs,
            rhs,
            slack,
            holds: slack >= -SLACK_TOLERANCE,
            terms,
        }
    }
}

fn terms<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn weighted_entropy_sum(world: &ToyWorld) -> f64 {
    world
        .participating
        .iter()
        .zip(&world.weights)
        .map(|(&i, &a)| a * world.distributions[i].entropy())
        .sum()
}

/// Participation gap at the ERM hypothesis against `3b·H(Z^I) − b·Σ α_i H(Z_i)`.
pub fn check_participation_gap_lemma(world: &ToyWorld) -> Result<GapReport, BoundsError> {
    let h = erm_hypothesis(world);
    let b = world.loss_bound;
    let joint = joint_si_weighted_risk(world, h)?;
    let semi = semi_empirical_risk(world, h);
    let h_all = world.joint_entropy_of(&world.all_clients())?;
    let weighted = weighted_entropy_sum(world);
    Ok(GapReport::new(
        "participation_gap_lemma",
        (joint - semi).abs(),
        3.0 * b * h_all - b * weighted,
        terms([
            ("hypothesis", h as f64),
            ("joint_risk", joint),
            ("semi_empirical_risk", semi),
            ("joint_entropy", h_all),
            ("weighted_client_entropy", weighted),
        ]),
    ))
}

/// Participation gap under client selection at the cohort's ERM hypothesis.
///
/// The cross-entropy partner `j` for each unselected client is the one
/// minimizing `H(P_i, P_j)` over other participating clients; the sum under
/// the maximizing partner is reported alongside.
pub fn check_theorem2_participation_gap(world: &ToyWorld) -> Result<GapReport, BoundsError> {
    let h = selected_erm_hypothesis(world);
    let b = world.loss_bound;
    let n = world.num_clients() as f64;
    let m = world.participating.len() as f64;
    let k = world.selected.len() as f64;

    let joint = joint_si_weighted_risk(world, h)?;
    let cohort = selected_risk(world, h);
    let h_all = world.joint_entropy_of(&world.all_clients())?;
    let h_part = world.joint_entropy_of(&world.participating)?;

    let mut ce_min_sum = 0.0;
    let mut ce_max_sum = 0.0;
    for &i in world.participating.iter().filter(|i| !world.selected.contains(i)) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &j in world.participating.iter().filter(|&&j| j != i) {
            let ce = cross_entropy(&world.distributions[i], &world.distributions[j])?;
            lo = lo.min(ce);
            hi = hi.max(ce);
        }
        ce_min_sum += lo;
        ce_max_sum += hi;
    }

    let term_all = b * (3.0 - 2.0 * m / n) * h_all;
    let term_part = b * (2.0 - 2.0 * k / m - 1.0 / k) * h_part;
    let term_cross = b / k * ce_min_sum;
    Ok(GapReport::new(
        "theorem2_participation_gap",
        (joint - cohort).abs(),
        term_all + term_part + term_cross,
        terms([
            ("hypothesis", h as f64),
            ("joint_risk", joint),
            ("selected_risk", cohort),
            ("joint_entropy", h_all),
            ("participating_joint_entropy", h_part),
            ("term_joint_entropy", term_all),
            ("term_participating_entropy", term_part),
            ("term_cross_entropy", term_cross),
            ("cross_entropy_min_sum", ce_min_sum),
            ("cross_entropy_max_sum", ce_max_sum),
        ]),
    ))
}

/// `b(N − 1) ln |Z|`, the cardinality ceiling on the in-distribution bound under uniform weights.
pub fn corollary_ceiling(world: &ToyWorld) -> f64 {
    world.loss_bound * (world.num_clients() as f64 - 1.0) * (world.support_size() as f64).ln()
}

/// In-distribution gap between centralized and distributed risk when every client participates.
pub fn check_indist_theorem(world: &ToyWorld) -> Result<GapReport, BoundsError> {
    if world.participating.len() != world.num_clients() {
        return Err(BoundsError::InvalidArgument(
            "in-distribution check needs every client participating".into(),
        ));
    }
    let h = erm_hypothesis(world);
    let b = world.loss_bound;
    let centralized = world.weighted_joint_risk(h, &world.participating, &world.weights)?;
    let distributed = semi_empirical_risk(world, h);
    let h_all = world.joint_entropy_of(&world.all_clients())?;
    let weighted = weighted_entropy_sum(world);
    let n = world.num_clients() as f64;
    let uniform = world.weights.iter().all(|w| (w - 1.0 / n).abs() <= 1e-12);
    Ok(GapReport::new(
        "indist_theorem",
        (centralized - distributed).abs(),
        b * h_all - b * weighted,
        terms([
            ("hypothesis", h as f64),
            ("centralized_risk", centralized),
            ("distributed_risk", distributed),
            ("joint_entropy", h_all),
            ("weighted_client_entropy", weighted),
            ("corollary_ceiling", corollary_ceiling(world)),
            ("uniform_weights", if uniform { 1.0 } else { 0.0 }),
        ]),
    ))
}

/// Overfitting error `sup_h |J(ĥ*) − J(h)|` against `L·max_h d(ĥ*, h)·H(Z^I)`.
///
/// Fails if the loss table is not `L`-Lipschitz under `distances`.
pub fn check_overfitting_error_lemma(
    world: &ToyWorld,
    distances: &[Vec<f64>],
    lipschitz: f64,
) -> Result<GapReport, BoundsError> {
    validate_distances(distances, world.num_hypotheses())?;
    for h in 0..world.num_hypotheses() {
        for g in 0..world.num_hypotheses() {
            let allowed = lipschitz * distances[h][g];
            for z in 0..world.support_size() {
                let gap = (world.losses[h][z] - world.losses[g][z]).abs();
                if gap > allowed + LIPSCHITZ_TOLERANCE {
                    return Err(BoundsError::LipschitzPreconditionViolated { h, g, z, gap, allowed });
                }
            }
        }
    }
    let mins = minimizers(world, distances, lipschitz)?;
    let anchor = mins.semi_empirical;
    let anchor_risk = joint_si_weighted_risk(world, anchor)?;
    let mut lhs: f64 = 0.0;
    for h in 0..world.num_hypotheses() {
        lhs = lhs.max((anchor_risk - joint_si_weighted_risk(world, h)?).abs());
    }
    let h_all = world.joint_entropy_of(&world.all_clients())?;
    let reach = distances[anchor][mins.overfitting_argmax];
    Ok(GapReport::new(
        "overfitting_error_lemma",
        lhs,
        lipschitz * reach * h_all,
        terms([
            ("semi_empirical_minimizer", anchor as f64),
            ("farthest_hypothesis", mins.overfitting_argmax as f64),
            ("distance", reach),
            ("lipschitz", lipschitz),
            ("joint_entropy", h_all),
        ]),
    ))
}

/// Reported terms of the semi-excess risk bound; the VC term is symbolic.
pub fn semi_excess_terms(
    world: &ToyWorld,
    vc_dim: f64,
    c: f64,
    delta: f64,
    total_samples: usize,
) -> Result<BTreeMap<String, f64>, BoundsError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(BoundsError::InvalidArgument(format!("delta {delta} outside (0, 1]")));
    }
    if total_samples == 0 || !(vc_dim >= 0.0) {
        return Err(BoundsError::InvalidArgument("need positive sample count and vc dimension".into()));
    }
    let b = world.loss_bound;
    let n = total_samples as f64;
    let e_p = 2.0
        * b
        * world
            .participating
            .iter()
            .map(|&i| world.distributions[i].collision_probability())
            .sum::<f64>();
    let vc_term = c * b * (vc_dim / n).sqrt();
    let confidence_term = b * ((1.0 / delta).ln() / (2.0 * n)).sqrt();
    let excess = semi_empirical_risk(world, erm_hypothesis(world))
        - semi_empirical_risk(world, semi_empirical_minimizer(world));
    Ok(terms([
        ("e_p", e_p),
        ("vc_term", vc_term),
        ("confidence_term", confidence_term),
        ("bound", e_p + vc_term + confidence_term),
        ("semi_excess_risk", excess),
    ]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyRateReport {
    /// `b · H(factor)`, the entropy-rate limit for an i.i.d. process.
    pub limit: f64,
    /// `(N, b·H(Z^N)/N·(1 − 1/N))` for each requested `N`.
    pub sequence: Vec<(usize, f64)>,
}

/// Average-gap bound sequence for an i.i.d. process built from `factor`.
pub fn entropy_rate_bound(factor: &DiscreteDistribution, b: f64, n_values: &[usize]) -> Result<EntropyRateReport, BoundsError> {
    if n_values.contains(&0) {
        return Err(BoundsError::InvalidArgument("N must be positive".into()));
    }
    let h = factor.entropy();
    let sequence = n_values
        .iter()
        .map(|&n| {
            let nf = n as f64;
            // i.i.d. additivity: H(Z^N) = N·H(factor).
            let joint = nf * h;
            (n, b * joint / nf * (1.0 - 1.0 / nf))
        })
        .collect();
    Ok(EntropyRateReport { limit: b * h, sequence })
}

/// Runs the four exact checks on one world.
///
/// The in-distribution check runs on the participating sub-world when some
/// clients do not participate.
pub fn verify_world(world: &ToyWorld) -> Result<Vec<GapReport>, BoundsError> {
    let (distances, lipschitz) = world.geometry();
    let indist = if world.participating.len() == world.num_clients() {
        check_indist_theorem(world)?
    } else {
        check_indist_theorem(&world.participating_subworld())?
    };
    Ok(vec![
        check_participation_gap_lemma(world)?,
        check_theorem2_participation_gap(world)?,
        indist,
        check_overfitting_error_lemma(world, &distances, lipschitz)?,
    ])
}

/// Limits for randomly generated worlds.
#[derive(Debug, Clone)]
pub struct WorldGenConfig {
    pub max_clients: usize,
    pub max_support: usize,
    pub max_hypotheses: usize,
    pub min_prob: f64,
    pub max_sample: usize,
}

impl Default for WorldGenConfig {
    fn default() -> Self {
        Self {
            max_clients: 3,
            max_support: 4,
            max_hypotheses: 8,
            min_prob: 1e-6,
            max_sample: 5,
        }
    }
}

fn random_simplex(len: usize, min_prob: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..len).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        if probs.iter().all(|&p| p >= min_prob) {
            return probs;
        }
    }
}

/// A random valid world with distances drawn independently and the tightest
/// feasible Lipschitz constant attached.
pub fn random_world(seed: u64, cfg: &WorldGenConfig) -> ToyWorld {
    let mut rng = rng_from(seed, &[0x3070_4c44]);
    let n = rng.random_range(1..=cfg.max_clients);
    let z = rng.random_range(2..=cfg.max_support);
    let hyp = rng.random_range(1..=cfg.max_hypotheses);
    let m = rng.random_range(1..=n);
    let k = rng.random_range(1..=m);

    let mut participating = sample_indices(&mut rng, n, m).into_vec();
    participating.sort_unstable();
    let mut selected: Vec<usize> = sample_indices(&mut rng, m, k).into_iter().map(|p| participating[p]).collect();
    selected.sort_unstable();

    let distributions = (0..n)
        .map(|_| DiscreteDistribution::new(random_simplex(z, cfg.min_prob, &mut rng)).expect("simplex"))
        .collect();
    let weights = random_simplex(m, 0.0, &mut rng);
    let b = rng.random_range(0.5..2.0);
    // A fifth of the worlds use extreme {0, b} losses to push toward tight cases.
    let extreme = rng.random_bool(0.2);
    let losses: Vec<Vec<f64>> = (0..hyp)
        .map(|_| {
            (0..z)
                .map(|_| if extreme { if rng.random_bool(0.5) { b } else { 0.0 } } else { rng.random_range(0.0..=b) })
                .collect()
        })
        .collect();
    let mut distances = vec![vec![0.0; hyp]; hyp];
    for h in 0..hyp {
        for g in (h + 1)..hyp {
            let d = rng.random_range(0.1..2.0);
            distances[h][g] = d;
            distances[g][h] = d;
        }
    }
    let lipschitz = tightest_lipschitz(&losses, &distances);
    let per_client = rng.random_range(1..=cfg.max_sample);
    let sample_seed = rng.random();

    let world = ToyWorld::new(distributions, losses, b, participating, selected, weights).expect("generated world is valid");
    let sample = world.draw_sample(per_client, sample_seed);
    let mut world = world
        .with_sample(sample)
        .expect("generated sample is valid")
        .with_geometry(distances, Some(lipschitz))
        .expect("generated geometry is valid");
    world.sample_seed = sample_seed;
    world
}

/// Seed of the `index`-th world in a sweep.
pub fn sweep_world_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

/// Verifies `count` random worlds in parallel; output order follows the world index.
pub fn verify_random_worlds(
    count: usize,
    seed: u64,
    cfg: &WorldGenConfig,
) -> Result<Vec<(u64, Vec<GapReport>)>, BoundsError> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let world_seed = sweep_world_seed(seed, i);
            let world = random_world(world_seed, cfg);
            verify_world(&world).map(|r| (world_seed, r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn d(p: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(p.to_vec()).unwrap()
    }

    fn two_uniform_clients(losses: Vec<Vec<f64>>) -> ToyWorld {
        ToyWorld::new(
            vec![DiscreteDistribution::uniform(2), DiscreteDistribution::uniform(2)],
            losses,
            1.0,
            vec![0, 1],
            vec![0, 1],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    fn single_client(p: &[f64], losses: Vec<Vec<f64>>) -> ToyWorld {
        ToyWorld::new(vec![d(p)], losses, 1.0, vec![0], vec![0], vec![1.0]).unwrap()
    }

    #[test]
    fn si_risk_examples() {
        let w = single_client(&[0.75, 0.25], vec![vec![1.0, 0.5], vec![0.3, 0.3]]);
        let oracle = 0.75 * 1.0 * (4.0f64 / 3.0).ln() + 0.25 * 0.5 * 4f64.ln();
        assert!((si_weighted_risk(&w, 0, 0) - oracle).abs() < 1e-15);
        assert!((oracle - 0.389049).abs() < 1e-6);
        // constant loss factors out
        assert!((si_weighted_risk(&w, 1, 0) - 0.3 * d(&[0.75, 0.25]).entropy()).abs() < 1e-15);
        assert!((semi_empirical_risk(&w, 0) - oracle).abs() < 1e-15);

        let w = single_client(&[0.0, 1.0], vec![vec![1.0, 1.0]]);
        assert_eq!(si_weighted_risk(&w, 0, 0), 0.0);
    }

    #[test]
    fn joint_risk_examples() {
        let w = two_uniform_clients(vec![vec![1.0, 0.0], vec![0.7, 0.7]]);
        // 4-term enumeration: each tuple has prob 1/4 and self-information 2 ln 2.
        let tuples = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let row = [1.0, 0.0];
        let oracle: f64 = tuples
            .iter()
            .map(|&(a, b)| 0.25 * 0.5 * (row[a] + row[b]) * (4f64).ln())
            .sum();
        assert!((joint_si_weighted_risk(&w, 0).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - LN_2).abs() < 1e-15);
        assert!((joint_si_weighted_risk(&w, 1).unwrap() - 0.7 * 2.0 * LN_2).abs() < 1e-15);

        let w = single_client(&[0.2, 0.8], vec![vec![0.4, 0.9]]);
        assert!((joint_si_weighted_risk(&w, 0).unwrap() - si_weighted_risk(&w, 0, 0)).abs() < 1e-15);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let w = two_uniform_clients(vec![vec![1.0, 0.0]]).with_enumeration_cap(3);
        assert!(matches!(joint_si_weighted_risk(&w, 0), Err(BoundsError::Info(InfoError::EnumerationCapExceeded { .. }))));
        assert!(check_participation_gap_lemma(&w).is_err());
    }

    #[test]
    fn semi_empirical_symmetry() {
        let p = d(&[0.6, 0.4]);
        let w = ToyWorld::new(vec![p.clone(), p], vec![vec![0.2, 0.9]], 1.0, vec![0, 1], vec![0], vec![0.5, 0.5]).unwrap();
        assert!((semi_empirical_risk(&w, 0) - si_weighted_risk(&w, 0, 0)).abs() < 1e-15);
    }

    #[test]
    fn minimizer_examples() {
        let w = single_client(&[0.5, 0.5], vec![vec![0.5, 0.5]]);
        let dist = vec![vec![0.0]];
        let m = minimizers(&w, &dist, 1.0).unwrap();
        assert_eq!((m.erm, m.semi_empirical, m.overfitting_argmax), (0, 0, 0));

        // h1 dominates h0 from above everywhere
        let w = single_client(&[0.3, 0.7], vec![vec![0.1, 0.2], vec![0.5, 0.6]]);
        assert_eq!(semi_empirical_minimizer(&w), 0);
        assert_eq!(erm_hypothesis(&w), 0);
    }

    #[test]
    fn minimizers_match_independent_scan() {
        let w = ToyWorld::new(
            vec![d(&[0.5, 0.3, 0.2]), d(&[0.1, 0.1, 0.8])],
            vec![vec![0.9, 0.1, 0.5], vec![0.2, 0.8, 0.4], vec![0.4, 0.4, 0.4]],
            1.0,
            vec![0, 1],
            vec![1],
            vec![0.3, 0.7],
        )
        .unwrap()
        .with_sample(vec![vec![0, 0, 2], vec![2, 1]])
        .unwrap();
        // Hand-computed α-weighted sample means:
        //   h0: 0.3·(0.9+0.9+0.5)/3 + 0.7·(0.5+0.1)/2 = 0.23 + 0.21 = 0.44
        //   h1: 0.3·(0.2+0.2+0.4)/3 + 0.7·(0.4+0.8)/2 = 0.08 + 0.42 = 0.50
        //   h2: 0.4
        assert_eq!(erm_hypothesis(&w), 2);
        let risks: Vec<f64> = (0..3)
            .map(|h| {
                let r0: f64 = [0.5, 0.3, 0.2].iter().zip(&w.losses()[h]).map(|(p, l)| -p * f64::ln(*p) * l).sum();
                let r1: f64 = [0.1, 0.1, 0.8].iter().zip(&w.losses()[h]).map(|(p, l)| -p * f64::ln(*p) * l).sum();
                0.3 * r0 + 0.7 * r1
            })
            .collect();
        let mut best = 0;
        for h in 1..3 {
            if risks[h] < risks[best] {
                best = h;
            }
        }
        assert_eq!(semi_empirical_minimizer(&w), best);
        let dist = vec![vec![0.0, 1.0, 3.0], vec![1.0, 0.0, 1.0], vec![3.0, 1.0, 0.0]];
        let m = minimizers(&w, &dist, 1.0).unwrap();
        let far = (0..3).max_by(|&a, &b| dist[best][a].partial_cmp(&dist[best][b]).unwrap().then(b.cmp(&a))).unwrap();
        assert_eq!(m.overfitting_argmax, far);
    }

    #[test]
    fn participation_gap_examples() {
        let w = two_uniform_clients(vec![vec![1.0, 1.0]]);
        let r = check_participation_gap_lemma(&w).unwrap();
        assert!((r.lhs - LN_2).abs() < 1e-12);
        assert!((r.rhs - 5.0 * LN_2).abs() < 1e-12);
        assert!(r.holds && r.slack > 0.0);

        let w = two_uniform_clients(vec![vec![0.0, 0.0]]);
        let r = check_participation_gap_lemma(&w).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.rhs >= 0.0);
    }

    #[test]
    fn theorem2_examples() {
        let w = two_uniform_clients(vec![vec![1.0, 0.0], vec![0.3, 0.6]]);
        let r = check_theorem2_participation_gap(&w).unwrap();
        assert_eq!(r.terms["cross_entropy_min_sum"], 0.0);
        assert!(r.holds);

        let p = d(&[0.2, 0.3, 0.5]);
        let w = ToyWorld::new(vec![p.clone(); 3], vec![vec![0.5, 0.1, 0.9]], 1.0, vec![0, 1, 2], vec![0], vec![1.0 / 3.0; 3])
            .unwrap();
        let r = check_theorem2_participation_gap(&w).unwrap();
        // Two unselected clients, each with H(P, P) = H(P).
        assert!((r.terms["cross_entropy_min_sum"] - 2.0 * p.entropy()).abs() < 1e-12);
        assert!((r.terms["cross_entropy_max_sum"] - 2.0 * p.entropy()).abs() < 1e-12);
        assert!(r.holds);
    }

    #[test]
    fn indist_examples() {
        let w = two_uniform_clients(vec![vec![1.0, 1.0]]);
        let r = check_indist_theorem(&w).unwrap();
        assert!((r.lhs - LN_2).abs() < 1e-12);
        assert!((r.rhs - LN_2).abs() < 1e-12);
        assert!(r.slack.abs() <= 1e-9);
        assert!(r.rhs <= corollary_ceiling(&w) + 1e-12);

        let w = ToyWorld::new(
            vec![d(&[0.1, 0.9]), d(&[0.3, 0.7])],
            vec![vec![2.0, 2.0]],
            2.0,
            vec![0, 1],
            vec![0],
            vec![0.25, 0.75],
        )
        .unwrap();
        let r = check_indist_theorem(&w).unwrap();
        assert!((r.lhs - r.rhs).abs() <= 1e-9, "constant loss b must be tight: {r:?}");

        let partial = ToyWorld::new(
            vec![d(&[0.5, 0.5]); 2],
            vec![vec![1.0, 0.0]],
            1.0,
            vec![1],
            vec![1],
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(check_indist_theorem(&partial), Err(BoundsError::InvalidArgument(_))));
        let sub = partial.participating_subworld();
        assert_eq!(sub.num_clients(), 1);
        assert!(check_indist_theorem(&sub).unwrap().holds);
    }

    #[test]
    fn entropy_rate_examples() {
        let r = entropy_rate_bound(&DiscreteDistribution::uniform(2), 1.0, &[2, 4, 8, 16]).unwrap();
        assert!((r.limit - LN_2).abs() < 1e-15);
        let expected = [0.5, 0.75, 0.875, 0.9375].map(|f| f * LN_2);
        for ((_, v), e) in r.sequence.iter().zip(expected) {
            assert!((v - e).abs() < 1e-15);
        }
        assert!(r.sequence.windows(2).all(|w| w[0].1 < w[1].1 && w[1].1 < r.limit));
        let r = entropy_rate_bound(&DiscreteDistribution::point_mass(3, 1), 1.0, &[1, 5]).unwrap();
        assert_eq!(r.limit, 0.0);
        assert!(entropy_rate_bound(&DiscreteDistribution::uniform(2), 1.0, &[0]).is_err());
    }

    #[test]
    fn overfitting_examples() {
        let w = single_client(&[0.4, 0.6], vec![vec![0.3, 0.8]]);
        let r = check_overfitting_error_lemma(&w, &[vec![0.0]], 1.0).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));

        let w = single_client(&[0.4, 0.6], vec![vec![0.3, 0.8], vec![0.3, 0.8]]);
        let r = check_overfitting_error_lemma(&w, &[vec![0.0, 0.5], vec![0.5, 0.0]], 1.0).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.rhs > 0.0);
    }

    #[test]
    fn overfitting_rejects_non_lipschitz_losses() {
        let w = single_client(&[0.4, 0.6], vec![vec![0.0, 1.0], vec![1.0, 1.0]]);
        let err = check_overfitting_error_lemma(&w, &[vec![0.0, 0.5], vec![0.5, 0.0]], 1.0).unwrap_err();
        assert!(matches!(err, BoundsError::LipschitzPreconditionViolated { z: 0, .. }));
        assert!(check_overfitting_error_lemma(&w, &[vec![0.0, 0.5], vec![0.5, 0.0]], 2.0).is_ok());
    }

    #[test]
    fn semi_excess_examples() {
        let w = ToyWorld::new(
            vec![DiscreteDistribution::uniform(4), DiscreteDistribution::uniform(4)],
            vec![vec![0.5; 4]],
            1.0,
            vec![0, 1],
            vec![0],
            vec![0.5, 0.5],
        )
        .unwrap();
        let t = semi_excess_terms(&w, 3.0, 1.0, 0.05, 100).unwrap();
        assert!((t["e_p"] - 1.0).abs() < 1e-15);
        assert!((t["vc_term"] - (0.03f64).sqrt()).abs() < 1e-15);
        assert_eq!(t["semi_excess_risk"], 0.0);

        let w = single_client(&[0.0, 1.0], vec![vec![0.5, 0.5]]);
        let t = semi_excess_terms(&w, 1.0, 1.0, 0.5, 10).unwrap();
        assert!((t["e_p"] - 2.0).abs() < 1e-15);
        assert!(semi_excess_terms(&w, 1.0, 1.0, 0.0, 10).is_err());
    }

    #[test]
    fn world_validation() {
        let u = DiscreteDistribution::uniform(2);
        assert!(ToyWorld::new(vec![u.clone()], vec![vec![1.5, 0.0]], 1.0, vec![0], vec![0], vec![1.0]).is_err());
        assert!(ToyWorld::new(vec![u.clone(), u.clone()], vec![vec![0.5, 0.0]], 1.0, vec![0], vec![1], vec![1.0]).is_err());
        assert!(ToyWorld::new(vec![u.clone()], vec![vec![0.5, 0.0]], 1.0, vec![0], vec![0], vec![0.9]).is_err());
        assert!(ToyWorld::new(vec![u.clone()], vec![vec![0.5]], 1.0, vec![0], vec![0], vec![1.0]).is_err());
        assert!(ToyWorld::new(vec![u], vec![], 1.0, vec![0], vec![0], vec![1.0]).is_err());
    }

    #[test]
    fn world_json_defaults_and_round_trip() {
        let json = r#"{"distributions": [[0.5, 0.5], [0.25, 0.75]], "losses": [[1.0, 0.0]], "loss_bound": 1.0}"#;
        let w: ToyWorld = serde_json::from_str(json).unwrap();
        assert_eq!(w.participating(), &[0, 1]);
        assert_eq!(w.selected(), &[0, 1]);
        assert_eq!(w.weights(), &[0.5, 0.5]);
        assert_eq!(w.sample()[0].len(), DEFAULT_SAMPLE_SIZE);
        let back: ToyWorld = serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
        assert_eq!(back, w);

        assert!(serde_json::from_str::<ToyWorld>(r#"{"distributions": [[0.5, 0.6]], "losses": [[1.0, 0.0]], "loss_bound": 1.0}"#).is_err());
    }

    #[test]
    fn random_worlds_are_reproducible_and_valid() {
        let cfg = WorldGenConfig::default();
        let a = random_world(11, &cfg);
        assert_eq!(a, random_world(11, &cfg));
        for s in 0..50 {
            let w = random_world(s, &cfg);
            assert!(w.num_clients() <= 3 && w.support_size() <= 4 && w.num_hypotheses() <= 8);
            assert!(w.distributions().iter().flat_map(|d| d.probs()).all(|&p| p >= 1e-6));
        }
    }
}
