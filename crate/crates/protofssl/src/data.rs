//! Dataset ingestion, synthetic generation, and i.i.d./Dirichlet client
//! partitioning into labeled and unlabeled parts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::protonet::ClassId;

/// A labeled pool of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<ClassId>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<ClassId>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape("Dataset features", "rank-2 tensor", format!("{:?}", features.shape())));
        }
        if features.rows() != labels.len() {
            return Err(Error::shape("Dataset labels", features.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }

    /// Splits off the first `head_per_class` samples of every class into one
    /// dataset and returns the rest as the second; deterministic.
    pub fn split_per_class(&self, head_per_class: usize) -> Result<(Dataset, Dataset)> {
        let mut taken: BTreeMap<ClassId, usize> = BTreeMap::new();
        let mut head_idx = Vec::new();
        let mut tail_idx = Vec::new();
        for (i, &label) in self.labels.iter().enumerate() {
            let t = taken.entry(label).or_insert(0);
            if *t < head_per_class {
                head_idx.push(i);
                *t += 1;
            } else {
                tail_idx.push(i);
            }
        }
        for k in 0..self.num_classes {
            let got = taken.get(&k).copied().unwrap_or(0);
            if got < head_per_class {
                return Err(Error::Sizing(format!(
                    "class {k} short by {} samples for split (need {head_per_class}, have {got})",
                    head_per_class - got
                )));
            }
        }
        Ok((self.subset(&head_idx), self.subset(&tail_idx)))
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features: Tensor::matrix(indices.len(), dim, data).unwrap(),
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// One client's data: labeled samples per class plus an unlabeled pool whose
/// true labels are kept aside for diagnostics only.
#[derive(Clone, Debug)]
pub struct ClientDataset {
    labeled: BTreeMap<ClassId, Tensor>,
    unlabeled: Tensor,
    hidden_unlabeled_labels: Vec<ClassId>,
    num_classes: usize,
}

impl ClientDataset {
    pub fn new(
        labeled: BTreeMap<ClassId, Tensor>,
        unlabeled: Tensor,
        hidden: Vec<ClassId>,
        num_classes: usize,
    ) -> Self {
        debug_assert_eq!(unlabeled.rows(), hidden.len());
        ClientDataset {
            labeled,
            unlabeled,
            hidden_unlabeled_labels: hidden,
            num_classes,
        }
    }

    pub fn labeled(&self) -> &BTreeMap<ClassId, Tensor> {
        &self.labeled
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn unlabeled(&self) -> &Tensor {
        &self.unlabeled
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.values().map(Tensor::rows).sum()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.rows()
    }

    /// Total sample count, the aggregation weight of this client.
    pub fn n_total(&self) -> usize {
        self.n_labeled() + self.n_unlabeled()
    }

    /// Ground-truth labels of the unlabeled pool. For oracles and
    /// diagnostics only; the training path must never read these.
    pub fn diagnostic_unlabeled_labels(&self) -> &[ClassId] {
        &self.hidden_unlabeled_labels
    }
}

/// How unlabeled data is spread over clients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassDistribution {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub labeled_per_class: usize,
    pub unlabeled_per_client: usize,
    pub distribution: ClassDistribution,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("partition.n_clients must be >= 1".into()));
        }
        if let ClassDistribution::Dirichlet { alpha } = self.distribution {
            if !(alpha > 0.0) {
                return Err(Error::Config("partition dirichlet alpha must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Gaussian clusters (unit variance) whose class means sit at pairwise
/// distance exactly `separation`, with balanced classes.
pub fn synth_blobs(
    classes: usize,
    samples: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("synth_blobs needs at least 2 classes".into()));
    }
    if samples < classes {
        return Err(Error::Sizing(format!(
            "synth_blobs needs at least one sample per class ({classes}), got {samples}"
        )));
    }
    if dim == 0 || !(separation > 0.0) {
        return Err(Error::Config("synth_blobs needs dim >= 1 and separation > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Random unit-scale means, rescaled so the closest pair sits at
    // `separation`; pins task difficulty to the knob.
    let mut means: Vec<Vec<f64>> = loop {
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..classes {
            for j in (i + 1)..classes {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        if min_dist > 1e-9 {
            let scale = separation / min_dist;
            break means
                .into_iter()
                .map(|m| m.into_iter().map(|v| v * scale).collect())
                .collect();
        }
    };
    for m in &mut means {
        m.shrink_to_fit();
    }

    let mut order: Vec<ClassId> = (0..samples).map(|i| i % classes).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(samples * dim);
    for &class in &order {
        for j in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            data.push((means[class][j] + noise) as f32);
        }
    }
    Dataset::new(Tensor::matrix(samples, dim, data)?, order, classes)
}

/// Index-level result of partitioning: which dataset rows each client got.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientAssignment {
    pub labeled: BTreeMap<ClassId, Vec<usize>>,
    pub unlabeled: Vec<usize>,
}

/// Assigns dataset rows to clients without materializing the feature copies;
/// `partition` builds `ClientDataset`s from this.
pub fn partition_indices(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientAssignment>> {
    spec.validate()?;
    let k = dataset.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &label) in dataset.labels().iter().enumerate() {
        pools[label].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; k];
    let remaining = |pools: &Vec<Vec<usize>>, cursor: &Vec<usize>, c: usize| pools[c].len() - cursor[c];

    let take = |pools: &Vec<Vec<usize>>, cursor: &mut Vec<usize>, c: usize, n: usize| -> Vec<usize> {
        let start = cursor[c];
        cursor[c] += n;
        pools[c][start..start + n].to_vec()
    };

    // Labeled part: exactly labeled_per_class per class per client.
    let mut assignments: Vec<ClientAssignment> = Vec::with_capacity(spec.n_clients);
    for client in 0..spec.n_clients {
        let mut labeled = BTreeMap::new();
        for c in 0..k {
            let have = remaining(&pools, &cursor, c);
            if have < spec.labeled_per_class {
                return Err(Error::Sizing(format!(
                    "class {c} short by {} labeled samples at client {client} \
                     (need {}, have {have})",
                    spec.labeled_per_class - have,
                    spec.labeled_per_class
                )));
            }
            labeled.insert(c, take(&pools, &mut cursor, c, spec.labeled_per_class));
        }
        assignments.push(ClientAssignment {
            labeled,
            unlabeled: Vec::new(),
        });
    }

    // Unlabeled part.
    for client in 0..spec.n_clients {
        let counts = match spec.distribution {
            ClassDistribution::Iid => iid_counts(spec.unlabeled_per_client, k, client),
            ClassDistribution::Dirichlet { alpha } => {
                let gamma = Gamma::new(alpha, 1.0)
                    .map_err(|e| Error::Config(format!("dirichlet alpha: {e}")))?;
                let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
                let total: f64 = draws.iter().sum();
                let ideal: Vec<f64> = draws
                    .iter()
                    .map(|g| g / total * spec.unlabeled_per_client as f64)
                    .collect();
                largest_remainder(&ideal, spec.unlabeled_per_client)
            }
        };
        // Clamp to pool availability, moving any deficit to the classes with
        // the most headroom (ties to the lowest class id).
        let mut counts = counts;
        let mut deficit = 0usize;
        for c in 0..k {
            let have = remaining(&pools, &cursor, c);
            if counts[c] > have {
                deficit += counts[c] - have;
                counts[c] = have;
            }
        }
        while deficit > 0 {
            let mut best: Option<(usize, usize)> = None; // (headroom, class)
            for c in 0..k {
                let headroom = remaining(&pools, &cursor, c) - counts[c];
                if headroom > 0 && best.map_or(true, |(h, _)| headroom > h) {
                    best = Some((headroom, c));
                }
            }
            match best {
                Some((_, c)) => {
                    counts[c] += 1;
                    deficit -= 1;
                }
                None => {
                    return Err(Error::Sizing(format!(
                        "unlabeled pool exhausted at client {client}: short by {deficit} samples"
                    )))
                }
            }
        }
        let mut unlabeled = Vec::with_capacity(spec.unlabeled_per_client);
        for c in 0..k {
            unlabeled.extend(take(&pools, &mut cursor, c, counts[c]));
        }
        assignments[client].unlabeled = unlabeled;
    }
    Ok(assignments)
}

/// Materializes client datasets from an index assignment.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    let assignments = partition_indices(dataset, spec)?;
    let dim = dataset.dim();
    Ok(assignments
        .into_iter()
        .map(|a| {
            let labeled = a
                .labeled
                .into_iter()
                .filter(|(_, idx)| !idx.is_empty())
                .map(|(class, idx)| {
                    let mut data = Vec::with_capacity(idx.len() * dim);
                    for &i in &idx {
                        data.extend_from_slice(dataset.sample(i));
                    }
                    (class, Tensor::matrix(idx.len(), dim, data).unwrap())
                })
                .collect();
            let mut data = Vec::with_capacity(a.unlabeled.len() * dim);
            let mut hidden = Vec::with_capacity(a.unlabeled.len());
            for &i in &a.unlabeled {
                data.extend_from_slice(dataset.sample(i));
                hidden.push(dataset.labels()[i]);
            }
            ClientDataset::new(
                labeled,
                Tensor::matrix(a.unlabeled.len(), dim, data).unwrap(),
                hidden,
                dataset.num_classes(),
            )
        })
        .collect())
}

/// Equal per-class counts; the remainder rotates with the client index so no
/// class is systematically favored.
fn iid_counts(total: usize, k: usize, client: usize) -> Vec<usize> {
    let base = total / k;
    let rem = total % k;
    let mut counts = vec![base; k];
    for j in 0..rem {
        counts[(client + j) % k] += 1;
    }
    counts
}

/// Largest-remainder rounding of non-negative ideals to integers summing to
/// `total`.
fn largest_remainder(ideal: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = ideal.iter().map(|&v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rema: Vec<(usize, f64)> = ideal
        .iter()
        .enumerate()
        .map(|(i, &v)| (i, v - v.floor()))
        .collect();
    // Descending fractional part, ties to the lowest class id.
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in rema.into_iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    n: usize,
    dim: usize,
    k: usize,
    features: String,
    labels: String,
    endianness: String,
}

/// Writes `manifest.json`, `features.bin` (row-major little-endian f32) and
/// `labels.bin` (little-endian i32) into `dir`; returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut feat = Vec::with_capacity(dataset.len() * dataset.dim() * 4);
    for &v in dataset.features().data() {
        feat.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("features.bin"), feat)?;
    let mut lab = Vec::with_capacity(dataset.len() * 4);
    for &l in dataset.labels() {
        lab.extend_from_slice(&(l as i32).to_le_bytes());
    }
    fs::write(dir.join("labels.bin"), lab)?;
    let manifest = Manifest {
        n: dataset.len(),
        dim: dataset.dim(),
        k: dataset.num_classes(),
        features: "features.bin".into(),
        labels: "labels.bin".into(),
        endianness: "little".into(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(path)
}

/// Loads a dataset saved by [`save_dataset`]; binaries resolve relative to
/// the manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.endianness != "little" {
        return Err(Error::Parse {
            path: manifest_path.display().to_string(),
            message: format!("unsupported endianness {:?}", manifest.endianness),
        });
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let feat_path = dir.join(&manifest.features);
    let bytes = fs::read(&feat_path)?;
    let expected = manifest.n * manifest.dim * 4;
    if bytes.len() != expected {
        return Err(Error::Parse {
            path: feat_path.display().to_string(),
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let lab_path = dir.join(&manifest.labels);
    let lbytes = fs::read(&lab_path)?;
    if lbytes.len() != manifest.n * 4 {
        return Err(Error::Parse {
            path: lab_path.display().to_string(),
            message: format!("expected {} bytes, found {}", manifest.n * 4, lbytes.len()),
        });
    }
    let mut labels = Vec::with_capacity(manifest.n);
    for c in lbytes.chunks_exact(4) {
        let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if v < 0 || v as usize >= manifest.k {
            return Err(Error::Parse {
                path: lab_path.display().to_string(),
                message: format!("label {v} out of range for {} classes", manifest.k),
            });
        }
        labels.push(v as usize);
    }
    Dataset::new(
        Tensor::matrix(manifest.n, manifest.dim, data)?,
        labels,
        manifest.k,
    )
}
