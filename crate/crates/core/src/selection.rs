//! Gradient table and cohort-selection strategies.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hull::{self, Point};
use crate::models::GradientVector;
use crate::seed::{rng_from, Rng};

/// Norms below this make cosine similarity 0.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("unknown client id {0}")]
    UnknownClient(usize),
    #[error("vectors of length {left} and {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("cohort of {k} requested from {available} clients")]
    CohortTooLarge { k: usize, available: usize },
    #[error("cohort size must be at least 1")]
    EmptyCohort,
    #[error("{strategy} needs at least {needed} clients, table has {available}")]
    TooFewClients {
        strategy: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("power-of-choice needs a loss for client {0}")]
    MissingLosses(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub gradient: GradientVector,
    pub round: usize,
}

/// Latest pseudo-gradient of every participating client.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientTable {
    entries: BTreeMap<usize, TableEntry>,
}

impl GradientTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeds every row at `round` (usually 0).
    pub fn from_initial(round: usize, gradients: BTreeMap<usize, GradientVector>) -> Self {
        Self {
            entries: gradients
                .into_iter()
                .map(|(id, gradient)| (id, TableEntry { gradient, round }))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, id: usize) -> Option<&TableEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &TableEntry)> {
        self.entries.iter().map(|(&id, e)| (id, e))
    }

    fn gradients(&self) -> Vec<&GradientVector> {
        self.entries.values().map(|e| &e.gradient).collect()
    }

    /// Replaces exactly the cohort's rows, stamping them with `round`.
    /// Nothing is written if any id is unknown.
    pub fn update(&mut self, round: usize, cohort: &BTreeMap<usize, GradientVector>) -> Result<(), SelectionError> {
        if let Some(&id) = cohort.keys().find(|id| !self.entries.contains_key(id)) {
            return Err(SelectionError::UnknownClient(id));
        }
        for (&id, g) in cohort {
            self.entries.insert(
                id,
                TableEntry {
                    gradient: g.clone(),
                    round,
                },
            );
        }
        Ok(())
    }

    pub fn dump(&self, projection: &Projection) -> Vec<TableDumpEntry> {
        self.entries
            .iter()
            .map(|(&client_id, e)| TableDumpEntry {
                client_id,
                round: e.round,
                norm: e.gradient.norm(),
                projected: projection.project(&e.gradient),
            })
            .collect()
    }
}

/// Functional form of [`GradientTable::update`].
pub fn update_table(
    table: &GradientTable,
    round: usize,
    cohort: &BTreeMap<usize, GradientVector>,
) -> Result<GradientTable, SelectionError> {
    let mut next = table.clone();
    next.update(round, cohort)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDumpEntry {
    pub client_id: usize,
    pub round: usize,
    pub norm: f64,
    pub projected: Point,
}

pub fn cosine_similarity(a: &GradientVector, b: &GradientVector) -> Result<f64, SelectionError> {
    if a.len() != b.len() {
        return Err(SelectionError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Ok(0.0);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Seeded Gaussian map from parameter space to the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    rows: [Vec<f64>; 2],
}

impl Projection {
    pub fn gaussian(dim: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[0x9807, dim as u64]);
        let mut row = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let first = row();
        let second = row();
        Self { rows: [first, second] }
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn project(&self, g: &GradientVector) -> Point {
        let p = |r: &[f64]| r.iter().zip(g.values()).map(|(a, b)| a * b).sum();
        [p(&self.rows[0]), p(&self.rows[1])]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    MinimaxSim,
    ConvexHull,
    Random,
    MaxSim,
    Interior,
    Full,
    PowerOfChoice,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 7] = [
        SelectionStrategy::MinimaxSim,
        SelectionStrategy::ConvexHull,
        SelectionStrategy::Random,
        SelectionStrategy::MaxSim,
        SelectionStrategy::Interior,
        SelectionStrategy::Full,
        SelectionStrategy::PowerOfChoice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::MinimaxSim => "minimax-sim",
            SelectionStrategy::ConvexHull => "convex-hull",
            SelectionStrategy::Random => "random",
            SelectionStrategy::MaxSim => "max-sim",
            SelectionStrategy::Interior => "interior",
            SelectionStrategy::Full => "full",
            SelectionStrategy::PowerOfChoice => "power-of-choice",
        }
    }

    pub fn needs_losses(self) -> bool {
        self == SelectionStrategy::PowerOfChoice
    }

    pub fn needs_projection(self) -> bool {
        matches!(self, SelectionStrategy::ConvexHull | SelectionStrategy::Interior)
    }
}

/// A chosen cohort. `fallback` marks a round where geometry forced a
/// random top-up (collinear hull, too few interior points).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub cohort: Vec<usize>,
    pub fallback: bool,
}

impl Selection {
    fn plain(cohort: Vec<usize>) -> Self {
        Self { cohort, fallback: false }
    }
}

fn check_k(k: usize, available: usize) -> Result<(), SelectionError> {
    if k == 0 {
        return Err(SelectionError::EmptyCohort);
    }
    if k > available {
        return Err(SelectionError::CohortTooLarge { k, available });
    }
    Ok(())
}

/// `(id, max_{j≠i} cos(g_i, g_j))` for every client, in id order.
pub fn similarity_maxima(table: &GradientTable) -> Result<Vec<(usize, f64)>, SelectionError> {
    let ids = table.ids();
    let grads = table.gradients();
    let n = ids.len();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine_similarity(grads[i], grads[j])?;
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    Ok((0..n)
        .map(|i| {
            let m = (0..n).filter(|&j| j != i).map(|j| sim[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
            (ids[i], m)
        })
        .collect())
}

fn rank_by_max_similarity(table: &GradientTable, k: usize, largest: bool) -> Result<Vec<usize>, SelectionError> {
    if table.len() < 2 {
        return Err(SelectionError::TooFewClients {
            strategy: if largest { "max-sim" } else { "minimax-sim" },
            needed: 2,
            available: table.len(),
        });
    }
    check_k(k, table.len())?;
    let mut maxima = similarity_maxima(table)?;
    maxima.sort_by(|a, b| {
        let ord = a.1.total_cmp(&b.1);
        let ord = if largest { ord.reverse() } else { ord };
        ord.then(a.0.cmp(&b.0))
    });
    Ok(maxima.into_iter().take(k).map(|(id, _)| id).collect())
}

/// The `k` clients whose most similar peer is least similar, ascending by that
/// maximum; ties go to the lower id.
pub fn select_minimax_sim(table: &GradientTable, k: usize) -> Result<Vec<usize>, SelectionError> {
    rank_by_max_similarity(table, k, false)
}

/// Ablation mirror of [`select_minimax_sim`]: the `k` largest maxima.
pub fn select_max_sim(table: &GradientTable, k: usize) -> Result<Vec<usize>, SelectionError> {
    rank_by_max_similarity(table, k, true)
}

fn projected(table: &GradientTable, projection: &Projection) -> Vec<Point> {
    table.gradients().into_iter().map(|g| projection.project(g)).collect()
}

/// Table positions of the hull vertices of the projected gradients, and
/// whether the projection is degenerate (fewer than three vertices).
pub fn projected_hull(table: &GradientTable, projection: &Projection) -> (Vec<usize>, bool) {
    let pts = projected(table, projection);
    let v = hull::hull_vertex_set(&pts);
    let degenerate = v.len() < 3;
    (v, degenerate)
}

/// Greedy max-min-distance subset of `candidates`, starting from a random one.
fn farthest_point_trim(pts: &[Point], candidates: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    let start = *candidates.choose(rng).expect("nonempty candidates");
    let mut chosen = vec![start];
    let dist = |a: usize, b: usize| ((pts[a][0] - pts[b][0]).powi(2) + (pts[a][1] - pts[b][1]).powi(2)).sqrt();
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for &c in candidates {
            if chosen.contains(&c) {
                continue;
            }
            let d = chosen.iter().map(|&s| dist(c, s)).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((c, d));
            }
        }
        chosen.push(best.expect("enough candidates").0);
    }
    chosen
}

/// Uniform sample of `k` positions from `pool`, in draw order.
fn sample(pool: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    pool.choose_multiple(rng, k).copied().collect()
}

/// Hull vertices of the projected gradients, trimmed or topped up to `k`.
pub fn select_convex_hull(
    table: &GradientTable,
    k: usize,
    projection: &Projection,
    rng: &mut Rng,
) -> Result<Selection, SelectionError> {
    if table.len() < 3 {
        return Err(SelectionError::TooFewClients {
            strategy: "convex-hull",
            needed: 3,
            available: table.len(),
        });
    }
    check_k(k, table.len())?;
    let ids = table.ids();
    let pts = projected(table, projection);
    let vertices = hull::hull_vertex_set(&pts);
    let degenerate = vertices.len() < 3;
    let chosen = if vertices.len() >= k {
        farthest_point_trim(&pts, &vertices, k, rng)
    } else {
        let rest: Vec<usize> = (0..ids.len()).filter(|i| !vertices.contains(i)).collect();
        let mut c = vertices.clone();
        c.extend(sample(&rest, k - vertices.len(), rng));
        c
    };
    Ok(Selection {
        cohort: chosen.into_iter().map(|i| ids[i]).collect(),
        fallback: degenerate,
    })
}

/// Random clients strictly inside the projected hull, topped up from the
/// vertices when the interior is too small.
pub fn select_interior(
    table: &GradientTable,
    k: usize,
    projection: &Projection,
    rng: &mut Rng,
) -> Result<Selection, SelectionError> {
    check_k(k, table.len())?;
    let ids = table.ids();
    let pts = projected(table, projection);
    let vertices = hull::hull_vertex_set(&pts);
    let interior: Vec<usize> = (0..ids.len()).filter(|i| !vertices.contains(i)).collect();
    let (chosen, fallback) = if interior.len() >= k {
        (sample(&interior, k, rng), false)
    } else {
        let mut c = interior.clone();
        c.extend(sample(&vertices, k - interior.len(), rng));
        (c, true)
    };
    Ok(Selection {
        cohort: chosen.into_iter().map(|i| ids[i]).collect(),
        fallback,
    })
}

pub fn select_random(table: &GradientTable, k: usize, rng: &mut Rng) -> Result<Vec<usize>, SelectionError> {
    check_k(k, table.len())?;
    Ok(sample(&table.ids(), k, rng))
}

/// Top `k` by loss, ties to the lower id.
pub fn select_power_of_choice(
    table: &GradientTable,
    k: usize,
    losses: Option<&BTreeMap<usize, f64>>,
) -> Result<Vec<usize>, SelectionError> {
    check_k(k, table.len())?;
    let ids = table.ids();
    let losses = losses.ok_or(SelectionError::MissingLosses(ids[0]))?;
    let mut ranked = Vec::with_capacity(ids.len());
    for id in ids {
        let l = *losses.get(&id).ok_or(SelectionError::MissingLosses(id))?;
        ranked.push((id, l));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(id, _)| id).collect())
}

/// Dispatches on `strategy`. `full` ignores `k`.
pub fn select(
    strategy: SelectionStrategy,
    table: &GradientTable,
    k: usize,
    projection: &Projection,
    rng: &mut Rng,
    losses: Option<&BTreeMap<usize, f64>>,
) -> Result<Selection, SelectionError> {
    match strategy {
        SelectionStrategy::MinimaxSim => select_minimax_sim(table, k).map(Selection::plain),
        SelectionStrategy::MaxSim => select_max_sim(table, k).map(Selection::plain),
        SelectionStrategy::ConvexHull => select_convex_hull(table, k, projection, rng),
        SelectionStrategy::Interior => select_interior(table, k, projection, rng),
        SelectionStrategy::Random => select_random(table, k, rng).map(Selection::plain),
        SelectionStrategy::PowerOfChoice => select_power_of_choice(table, k, losses).map(Selection::plain),
        SelectionStrategy::Full => {
            if table.is_empty() {
                return Err(SelectionError::EmptyCohort);
            }
            Ok(Selection::plain(table.ids()))
        }
    }
}

/// True if `cohort` has no repeats and every id is in the table.
pub fn is_valid_cohort(table: &GradientTable, cohort: &[usize]) -> bool {
    let set: BTreeSet<usize> = cohort.iter().copied().collect();
    set.len() == cohort.len() && cohort.iter().all(|id| table.get(*id).is_some())
}
