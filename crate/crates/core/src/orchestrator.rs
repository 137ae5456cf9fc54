//! The federated training loop: broadcast, select, train locally, aggregate,
//! refresh the gradient table, evaluate.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{aggregate, compute_weights, AggregationError, WeightingPolicy};
use crate::data::{
    dirichlet_partition, generate_blobs, local_holdout_split, ood_eval_split, ClientRecord, DataError, Dataset,
    PartitionSpec,
};
use crate::models::{
    local_solver, GradientVector, Model, ModelError, ModelKind, ParameterVector, SgdConfig, DEFAULT_HIDDEN,
};
use crate::seed::{derive_seed, rng_from};
use crate::selection::{select, GradientTable, Projection, SelectionError, SelectionStrategy, TableDumpEntry};

pub const THREADS_ENV: &str = "FEDGEN_THREADS";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("client {client}: {source}")]
    Client { client: usize, source: ModelError },
    #[error("metrics sink: {0}")]
    Sink(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

fn default_min_samples() -> usize {
    2
}
fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}
fn default_local_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    128
}
fn default_eval_every() -> usize {
    1
}
fn default_ood_fraction() -> f64 {
    0.2
}
fn default_local_holdout() -> f64 {
    0.1
}

/// Flat experiment description; every field maps to one config key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    pub num_participating: usize,
    pub dirichlet_alpha: f64,
    #[serde(default = "default_min_samples")]
    pub min_samples_per_client: usize,

    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub spread: f64,
    #[serde(default = "default_ood_fraction")]
    pub ood_fraction: f64,
    #[serde(default = "default_local_holdout")]
    pub local_holdout_fraction: f64,

    pub model: ModelKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,

    pub rounds: usize,
    pub cohort_size: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub lr: f64,
    pub weighting: WeightingPolicy,
    pub strategy: SelectionStrategy,

    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_selection: u64,
    #[serde(default)]
    pub projection_seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Off by default so reruns write identical metrics.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.partition_spec().validate()?;
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return bad("num_classes, dim and samples_per_class must be positive".into());
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return bad(format!("spread {} must be finite and nonnegative", self.spread));
        }
        for (name, f) in [("ood_fraction", self.ood_fraction), ("local_holdout_fraction", self.local_holdout_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("{name} {f} must be in [0, 1)"));
            }
        }
        if self.model == ModelKind::Mlp && self.hidden == 0 {
            return bad("hidden must be positive for the mlp model".into());
        }
        if self.strategy != SelectionStrategy::Full && (self.cohort_size == 0 || self.cohort_size > self.num_participating) {
            return bad(format!(
                "cohort_size {} must be in 1..={} (num_participating)",
                self.cohort_size, self.num_participating
            ));
        }
        if self.local_epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("local_epochs, batch_size and eval_every must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and nonnegative", self.lr));
        }
        Ok(())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.num_clients,
            num_participating: self.num_participating,
            dirichlet_alpha: self.dirichlet_alpha,
            seed: derive_seed(self.seed_data, &[2]),
            min_samples_per_client: self.min_samples_per_client,
        }
    }

    pub fn model(&self) -> Model {
        match self.model {
            ModelKind::Logistic => Model::logistic(self.dim, self.num_classes),
            ModelKind::Mlp => Model::mlp(self.dim, self.num_classes, self.hidden),
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

/// Pool, OOD holdout and the partitioned clients for a config.
pub struct Partition {
    pub pool: Dataset,
    pub ood: Dataset,
    pub clients: Vec<ClientRecord>,
}

pub fn build_partition(config: &ExperimentConfig) -> Result<Partition, ExperimentError> {
    config.validate()?;
    let all = generate_blobs(config.num_classes, config.dim, config.samples_per_class, config.spread, config.seed_data);
    let (pool, ood) = ood_eval_split(&all, config.ood_fraction, derive_seed(config.seed_data, &[1]));
    let clients = dirichlet_partition(&pool, &config.partition_spec())?;
    Ok(Partition { pool, ood, clients })
}

/// A participating client's local split.
#[derive(Debug, Clone)]
pub struct Participant {
    pub record: ClientRecord,
    pub train: Dataset,
    pub holdout: Dataset,
}

/// Produces one client's pseudo-gradient for a round.
pub trait LocalUpdate: Sync {
    fn pseudo_gradient(
        &self,
        model: &Model,
        global: &ParameterVector,
        client: &Participant,
        round: usize,
    ) -> Result<GradientVector, ModelError>;
}

/// Plain SGD seeded per `(round, client)`.
pub struct SgdUpdate {
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl LocalUpdate for SgdUpdate {
    fn pseudo_gradient(
        &self,
        model: &Model,
        global: &ParameterVector,
        client: &Participant,
        round: usize,
    ) -> Result<GradientVector, ModelError> {
        let seed = derive_seed(self.seed, &[round as u64, client.record.client_id as u64]);
        local_solver(model, global, &client.train, &self.sgd, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub strategy: SelectionStrategy,
    pub weighting: WeightingPolicy,
    pub cohort: Vec<usize>,
    pub weights: Vec<f64>,
    pub mean_local_loss: f64,
    /// NaN (JSON null) when the cohort has no holdout rows.
    pub id_accuracy: f64,
    pub ood_accuracy: f64,
    pub wall_time_ms: u64,
    pub selection_fallback: bool,
}

pub const CSV_HEADER: &str = "round,strategy,weighting,cohort,id_acc,ood_acc,mean_loss,wall_ms";

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        let cohort: Vec<String> = self.cohort.iter().map(|c| c.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.strategy.name(),
            self.weighting.name(),
            cohort.join(";"),
            self.id_accuracy,
            self.ood_accuracy,
            self.mean_local_loss,
            self.wall_time_ms
        )
    }
}

pub struct FedState {
    pub config: ExperimentConfig,
    pub model: Model,
    pub global: ParameterVector,
    pub table: GradientTable,
    pub participants: BTreeMap<usize, Participant>,
    pub ood: Dataset,
    pub projection: Projection,
    pool: ThreadPool,
}

/// Worker pool sized by `FEDGEN_THREADS`, falling back to machine parallelism.
pub fn worker_pool() -> Result<ThreadPool, ExperimentError> {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))
}

/// Broadcasts `w_0` and fills the table with every participant's first pseudo-gradient.
pub fn initialize(config: &ExperimentConfig, local: &dyn LocalUpdate) -> Result<FedState, ExperimentError> {
    let Partition { ood, clients, .. } = build_partition(config)?;
    let model = config.model();
    let participants: BTreeMap<usize, Participant> = clients
        .into_iter()
        .filter(|c| c.participating)
        .map(|record| {
            let seed = derive_seed(config.seed_data, &[3, record.client_id as u64]);
            let (train, holdout) = local_holdout_split(&record.dataset, config.local_holdout_fraction, seed);
            (record.client_id, Participant { record, train, holdout })
        })
        .collect();
    let global = model.init_params(config.seed_init);
    let pool = worker_pool()?;
    let ids: Vec<usize> = participants.keys().copied().collect();
    let grads = train_cohort(&pool, &model, &global, &participants, &ids, 0, local)?;
    let table = GradientTable::from_initial(0, ids.into_iter().zip(grads).collect());
    Ok(FedState {
        projection: Projection::gaussian(model.num_params(), config.projection_seed),
        config: config.clone(),
        model,
        global,
        table,
        participants,
        ood,
        pool,
    })
}

fn train_cohort(
    pool: &ThreadPool,
    model: &Model,
    global: &ParameterVector,
    participants: &BTreeMap<usize, Participant>,
    cohort: &[usize],
    round: usize,
    local: &dyn LocalUpdate,
) -> Result<Vec<GradientVector>, ExperimentError> {
    let results: Vec<Result<GradientVector, ExperimentError>> = pool.install(|| {
        cohort
            .par_iter()
            .map(|&id| {
                local
                    .pseudo_gradient(model, global, &participants[&id], round)
                    .map_err(|source| ExperimentError::Client { client: id, source })
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Pooled accuracy over several sets; NaN when they are all empty.
pub fn pooled_accuracy(model: &Model, params: &ParameterVector, sets: &[&Dataset]) -> Result<f64, ModelError> {
    let mut correct = 0.0;
    let mut total = 0usize;
    for s in sets {
        if let Some(acc) = model.accuracy(params, s)? {
            correct += acc * s.len() as f64;
            total += s.len();
        }
    }
    Ok(if total == 0 { f64::NAN } else { correct / total as f64 })
}

/// `(ID accuracy over id_sets pooled, OOD accuracy)`.
pub fn evaluate(
    model: &Model,
    params: &ParameterVector,
    id_sets: &[&Dataset],
    ood: &Dataset,
) -> Result<(f64, f64), ModelError> {
    Ok((pooled_accuracy(model, params, id_sets)?, pooled_accuracy(model, params, &[ood])?))
}

impl FedState {
    fn participant_losses(&self) -> Result<BTreeMap<usize, f64>, ExperimentError> {
        let out: Vec<Result<(usize, f64), ModelError>> = self.pool.install(|| {
            self.participants
                .par_iter()
                .map(|(&id, p)| {
                    if p.train.is_empty() {
                        return Ok((id, 0.0));
                    }
                    Ok((id, self.model.forward_loss(&self.global, &p.train)?.0))
                })
                .collect()
        });
        Ok(out.into_iter().collect::<Result<_, _>>()?)
    }

    /// One round. Returns metrics when the round is scheduled for evaluation.
    /// A failing client aborts the round before any state changes.
    pub fn run_round(&mut self, round: usize, local: &dyn LocalUpdate) -> Result<Option<RoundMetrics>, ExperimentError> {
        let start = Instant::now();
        let cfg = &self.config;
        let losses = if cfg.strategy.needs_losses() {
            Some(self.participant_losses()?)
        } else {
            None
        };
        let mut rng = rng_from(cfg.seed_selection, &[round as u64]);
        let selection = select(cfg.strategy, &self.table, cfg.cohort_size, &self.projection, &mut rng, losses.as_ref())?;
        let mut cohort = selection.cohort.clone();
        cohort.sort_unstable();

        let grads = train_cohort(&self.pool, &self.model, &self.global, &self.participants, &cohort, round, local)?;
        let records: Vec<&ClientRecord> = cohort.iter().map(|id| &self.participants[id].record).collect();
        let weights = compute_weights(cfg.weighting, &records)?;
        let delta = aggregate(&grads, &weights)?;

        let mut local_loss = 0.0;
        let mut counted = 0usize;
        for (id, g) in cohort.iter().zip(&grads) {
            let train = &self.participants[id].train;
            if train.is_empty() {
                continue;
            }
            let mut local_params = self.global.clone();
            local_params.step(g, 1.0);
            local_loss += self.model.forward_loss(&local_params, train)?.0;
            counted += 1;
        }
        let mean_local_loss = if counted == 0 { f64::NAN } else { local_loss / counted as f64 };

        self.global.step(&delta, 1.0);
        self.table.update(round, &cohort.iter().copied().zip(grads).collect())?;

        let scheduled = round % cfg.eval_every == 0 || round == cfg.rounds;
        if !scheduled {
            return Ok(None);
        }
        let id_sets: Vec<&Dataset> = cohort.iter().map(|id| &self.participants[id].holdout).collect();
        let (id_accuracy, ood_accuracy) = evaluate(&self.model, &self.global, &id_sets, &self.ood)?;
        let wall_time_ms = if cfg.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        Ok(Some(RoundMetrics {
            round,
            strategy: cfg.strategy,
            weighting: cfg.weighting,
            cohort,
            weights,
            mean_local_loss,
            id_accuracy,
            ood_accuracy,
            wall_time_ms,
            selection_fallback: selection.fallback,
        }))
    }
}

pub struct ExperimentResult {
    pub metrics: Vec<RoundMetrics>,
    pub final_params: ParameterVector,
    /// Final gradient table with projected coordinates.
    pub table: Vec<TableDumpEntry>,
}

/// Runs all rounds, handing each metrics row to `sink` as soon as it exists.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    local: &dyn LocalUpdate,
    sink: &mut dyn FnMut(&RoundMetrics) -> Result<(), String>,
) -> Result<ExperimentResult, ExperimentError> {
    let mut state = initialize(config, local)?;
    let mut metrics = Vec::new();
    for round in 1..=config.rounds {
        if let Some(m) = state.run_round(round, local)? {
            sink(&m).map_err(ExperimentError::Sink)?;
            metrics.push(m);
        }
    }
    Ok(ExperimentResult {
        metrics,
        table: state.table.dump(&state.projection),
        final_params: state.global,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let local = SgdUpdate {
        sgd: config.sgd(),
        seed: config.seed_init,
    };
    run_experiment_with(config, &local, &mut |_| Ok(()))
}
