//! Synthetic datasets, Dirichlet label-skew partitioning and evaluation splits.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::info::{empirical_label_entropy, histogram_entropy, label_histogram};
use crate::seed::{rng_from, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("insufficient data: {available} samples cannot give {clients} clients {min} each")]
    InsufficientData {
        available: usize,
        clients: usize,
        min: usize,
    },
    #[error("invalid partition spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
}

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if dim == 0 || num_classes == 0 {
            return Err(DataError::InvalidDataset("dimension and class count must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::InvalidDataset(format!(
                "{} feature values for {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::InvalidDataset(format!("label {l} >= {num_classes}")));
        }
        Ok(Self {
            features,
            dim,
            labels,
            num_classes,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            features: Vec::new(),
            dim,
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the listed rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Appends rows of `other`, which must share dimension and class count.
    pub fn concat(parts: &[&Dataset]) -> Option<Dataset> {
        let first = parts.first()?;
        let mut out = Dataset::empty(first.dim, first.num_classes);
        for p in parts {
            assert_eq!((p.dim, p.num_classes), (first.dim, first.num_classes));
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        Some(out)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        label_histogram(&self.labels, self.num_classes).expect("labels validated at construction")
    }

    /// Row indices of each class, in row order.
    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

/// Class centers: `±scale·e_j` (a cross-polytope, so every pair of centers is
/// equidistant up to `2·dim` classes), then seeded random directions.
fn class_means(num_classes: usize, dim: usize, scale: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut mean = vec![0.0; dim];
            if c < 2 * dim {
                mean[c % dim] = if c < dim { scale } else { -scale };
            } else {
                let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                mean = raw.iter().map(|x| scale * x / norm).collect();
            }
            mean
        })
        .collect()
}

/// Gaussian class-conditional blobs, `samples_per_class` rows per class in class order.
///
/// Class centers sit at unit distance from the origin; `spread` is the
/// per-coordinate standard deviation around each center.
pub fn generate_blobs(num_classes: usize, dim: usize, samples_per_class: usize, spread: f64, seed: u64) -> Dataset {
    assert!(num_classes > 0 && dim > 0 && samples_per_class > 0 && spread >= 0.0);
    let mut rng = rng_from(seed, &[0xB10B]);
    let means = class_means(num_classes, dim, 1.0, &mut rng);
    let mut features = Vec::with_capacity(num_classes * samples_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &m in mean {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(m + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset {
        features,
        dim,
        labels,
        num_classes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub num_participating: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
    pub min_samples_per_client: usize,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_clients == 0 {
            return Err(DataError::InvalidSpec("need at least one client".into()));
        }
        if self.num_participating == 0 || self.num_participating > self.num_clients {
            return Err(DataError::InvalidSpec(format!(
                "participating count {} must lie in 1..={}",
                self.num_participating, self.num_clients
            )));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(DataError::InvalidSpec("dirichlet alpha must be positive".into()));
        }
        if self.min_samples_per_client == 0 {
            return Err(DataError::InvalidSpec("min samples per client must be positive".into()));
        }
        Ok(())
    }
}

/// One client's local data and label statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub client_id: usize,
    pub dataset: Dataset,
    /// Row indices into the partitioned pool.
    pub source_indices: Vec<usize>,
    pub empirical_entropy: f64,
    pub participating: bool,
}

impl ClientRecord {
    pub fn num_samples(&self) -> usize {
        self.dataset.len()
    }
}

/// Draws from `Dirichlet(alpha · 1_n)` by normalizing independent Gamma draws.
pub fn sample_dirichlet(alpha: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Integer counts summing to `total` that track `proportions`; leftover units
/// go to the largest fractional parts, lowest index first on ties.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Splits `data` across clients with per-class Dirichlet proportions.
///
/// Clients short of `min_samples_per_client` are topped up one row at a time
/// from the currently largest client. After a seeded shuffle of ids, the first
/// `num_participating` are flagged participating.
pub fn dirichlet_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientRecord>, DataError> {
    spec.validate()?;
    if data.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n = spec.num_clients;
    if data.len() < n * spec.min_samples_per_client {
        return Err(DataError::InsufficientData {
            available: data.len(),
            clients: n,
            min: spec.min_samples_per_client,
        });
    }
    let mut rng = rng_from(spec.seed, &[0xD1_81C4]);
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); n];
    for mut rows in data.class_indices() {
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng);
        let proportions = sample_dirichlet(spec.dirichlet_alpha, n, &mut rng);
        let counts = largest_remainder(&proportions, rows.len());
        let mut cursor = 0;
        for (client, &c) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&rows[cursor..cursor + c]);
            cursor += c;
        }
    }
    loop {
        let Some(short) = (0..n).find(|&i| assignment[i].len() < spec.min_samples_per_client) else {
            break;
        };
        // Largest client, lowest id on ties.
        let donor = (0..n).fold(0, |best, i| if assignment[i].len() > assignment[best].len() { i } else { best });
        let row = assignment[donor].pop().expect("donor holds more than the minimum");
        assignment[short].push(row);
    }

    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let mut participating = vec![false; n];
    for &id in ids.iter().take(spec.num_participating) {
        participating[id] = true;
    }

    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(client_id, mut rows)| {
            rows.sort_unstable();
            let dataset = data.select(&rows);
            let empirical_entropy = empirical_label_entropy(dataset.labels(), dataset.num_classes()).unwrap_or(0.0);
            ClientRecord {
                client_id,
                dataset,
                source_indices: rows,
                empirical_entropy,
                participating: participating[client_id],
            }
        })
        .collect())
}

/// Stratified holdout: `round(fraction · n_c)` rows of each class go to the test set.
pub fn ood_eval_split(data: &Dataset, holdout_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let (train, test) = stratified_indices(data, holdout_fraction, &mut rng_from(seed, &[0x00D]));
    (data.select(&train), data.select(&test))
}

/// Seeded 90/10-style split of one client's local set, stratified by label.
pub fn local_holdout_split(data: &Dataset, holdout_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let (train, test) = stratified_indices(data, holdout_fraction, &mut rng_from(seed, &[0x10CA1]));
    (data.select(&train), data.select(&test))
}

fn stratified_indices(data: &Dataset, fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let fraction = fraction.clamp(0.0, 1.0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut rows in data.class_indices() {
        rows.shuffle(rng);
        let k = (fraction * rows.len() as f64).round() as usize;
        test.extend_from_slice(&rows[..k]);
        train.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Per-client summary exported by the partition inspector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientManifestEntry {
    pub client_id: usize,
    pub num_samples: usize,
    pub label_histogram: Vec<usize>,
    pub empirical_entropy: f64,
    pub participating: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub num_classes: usize,
    pub global_histogram: Vec<usize>,
    pub global_entropy: f64,
    pub clients: Vec<ClientManifestEntry>,
}

impl PartitionManifest {
    pub fn from_clients(pool: &Dataset, clients: &[ClientRecord]) -> Self {
        let global_histogram = pool.label_histogram();
        Self {
            num_classes: pool.num_classes(),
            global_entropy: histogram_entropy(&global_histogram),
            global_histogram,
            clients: clients
                .iter()
                .map(|c| ClientManifestEntry {
                    client_id: c.client_id,
                    num_samples: c.num_samples(),
                    label_histogram: c.dataset.label_histogram(),
                    empirical_entropy: c.empirical_entropy,
                    participating: c.participating,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, m: usize, alpha: f64, seed: u64) -> PartitionSpec {
        PartitionSpec {
            num_clients: n,
            num_participating: m,
            dirichlet_alpha: alpha,
            seed,
            min_samples_per_client: 8,
        }
    }

    #[test]
    fn blobs_shape_and_balance() {
        let d = generate_blobs(2, 3, 10, 0.5, 1);
        assert_eq!(d.len(), 20);
        assert_eq!(d.label_histogram(), vec![10, 10]);
        assert_eq!(d, generate_blobs(2, 3, 10, 0.5, 1));
        assert_ne!(d, generate_blobs(2, 3, 10, 0.5, 2));
    }

    #[test]
    fn zero_spread_blobs_sit_on_their_means() {
        let d = generate_blobs(3, 2, 4, 0.0, 5);
        for i in 0..d.len() {
            let first = d.labels().iter().position(|&l| l == d.labels()[i]).unwrap();
            assert_eq!(d.row(i), d.row(first));
        }
        assert_eq!(d.row(0), &[1.0, 0.0]);
        assert_eq!(d.row(4), &[0.0, 1.0]);
        assert_eq!(d.row(8), &[-1.0, 0.0]);
    }

    #[test]
    fn largest_remainder_preserves_totals() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        let c = largest_remainder(&[0.33, 0.33, 0.34], 7);
        assert_eq!(c.iter().sum::<usize>(), 7);
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        let data = generate_blobs(4, 2, 50, 0.3, 3);
        let clients = dirichlet_partition(&data, &spec(7, 3, 0.3, 9)).unwrap();
        let mut all: Vec<usize> = clients.iter().flat_map(|c| c.source_indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
        let mut hist = vec![0; 4];
        for c in &clients {
            assert!(c.num_samples() >= 8);
            for (h, x) in hist.iter_mut().zip(c.dataset.label_histogram()) {
                *h += x;
            }
            let e = empirical_label_entropy(c.dataset.labels(), 4).unwrap();
            assert!((c.empirical_entropy - e).abs() < 1e-12);
        }
        assert_eq!(hist, data.label_histogram());
        assert_eq!(clients.iter().filter(|c| c.participating).count(), 3);
    }

    #[test]
    fn single_client_holds_everything() {
        let data = generate_blobs(3, 2, 10, 0.3, 3);
        let clients = dirichlet_partition(&data, &spec(1, 1, 0.5, 1)).unwrap();
        assert_eq!(clients.len(), 1);
        assert_eq!(clients[0].dataset, data);
        assert!(clients[0].participating);
    }

    #[test]
    fn partition_errors() {
        let data = generate_blobs(2, 2, 10, 0.3, 3);
        assert!(matches!(
            dirichlet_partition(&data, &spec(5, 2, 0.5, 1)),
            Err(DataError::InsufficientData { available: 20, clients: 5, min: 8 })
        ));
        assert!(dirichlet_partition(&data, &spec(2, 3, 0.5, 1)).is_err());
        assert!(dirichlet_partition(&Dataset::empty(2, 2), &spec(1, 1, 0.5, 1)).is_err());
    }

    #[test]
    fn huge_alpha_matches_global_histogram() {
        let data = generate_blobs(3, 2, 400, 0.3, 3);
        for seed in 0..5 {
            let clients = dirichlet_partition(&data, &spec(4, 4, 1e6, seed)).unwrap();
            for c in &clients {
                let n = c.num_samples() as f64;
                let tv: f64 = c.dataset.label_histogram().iter().map(|&k| (k as f64 / n - 1.0 / 3.0).abs()).sum::<f64>() / 2.0;
                assert!(tv <= 0.05, "tv {tv}");
            }
        }
    }

    #[test]
    fn small_alpha_concentrates_labels() {
        let data = generate_blobs(10, 4, 60, 0.3, 3);
        for seed in 0..20 {
            let clients = dirichlet_partition(&data, &spec(10, 4, 0.1, seed)).unwrap();
            let skewed = clients.iter().any(|c| {
                let mut h = c.dataset.label_histogram();
                h.sort_unstable_by(|a, b| b.cmp(a));
                (h[0] + h[1]) as f64 >= 0.8 * c.num_samples() as f64
            });
            assert!(skewed, "seed {seed}");
        }
    }

    #[test]
    fn ood_split_is_stratified() {
        let data = generate_blobs(2, 2, 50, 0.3, 3);
        let (train, test) = ood_eval_split(&data, 0.2, 4);
        assert_eq!((train.len(), test.len()), (80, 20));
        assert_eq!(test.label_histogram(), vec![10, 10]);
        assert_eq!(ood_eval_split(&data, 0.2, 4), (train, test));
        let (train, test) = ood_eval_split(&data, 0.0, 4);
        assert_eq!((train.len(), test.len()), (100, 0));
    }

    #[test]
    fn manifest_serializes() {
        let data = generate_blobs(2, 2, 20, 0.3, 3);
        let clients = dirichlet_partition(&data, &spec(2, 1, 1.0, 1)).unwrap();
        let m = PartitionManifest::from_clients(&data, &clients);
        assert!((m.global_entropy - std::f64::consts::LN_2).abs() < 1e-12);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<PartitionManifest>(&json).unwrap(), m);
    }
}
