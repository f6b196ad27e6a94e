//! Experiment driver: configuration, test-time evaluation, round loop, and
//! metrics persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, ClassDistribution, Dataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{
    derive_rng, run_round, splitmix64, ClientState, Protocol, RoundConfig, ServerState,
};
use crate::numerics::{EmbeddingNet, NetworkConfig, OptimizerConfig, ParameterSet};
use crate::protonet::{ClientId, DistanceKind, PrototypeSet, SslHyperparams};

/// Where the experiment's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataConfig {
    /// Synthetic Gaussian blobs, split per class into train and test.
    Synth {
        classes: usize,
        dim: usize,
        separation: f64,
        train_per_class: usize,
        test_per_class: usize,
        /// Defaults to a value derived from the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Pre-saved datasets (see the data module's manifest format).
    Manifest { train: PathBuf, test: PathBuf },
}

/// Full experiment description; serializable so runs can be reproduced from
/// the config copy written next to the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Evaluate every this many rounds (the final round is always
    /// evaluated).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Fan clients out across threads; results are identical either way.
    #[serde(default)]
    pub parallel: bool,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub ssl: SslHyperparams,
    pub federation: RoundConfig,
    pub partition: PartitionConfig,
}

fn default_eval_every() -> usize {
    1
}

/// Partition knobs; the client count comes from the federation section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub labeled_per_class: usize,
    pub unlabeled_per_client: usize,
    pub distribution: ClassDistribution,
    /// Defaults to a value derived from the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    /// Desk-scale default: a synthetic four-class problem that runs the full
    /// protocol in seconds.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            seed: 7,
            eval_every: 1,
            parallel: false,
            data: DataConfig::Synth {
                classes: 4,
                dim: 16,
                separation: 3.0,
                train_per_class: 700,
                test_per_class: 250,
                seed: None,
            },
            network: NetworkConfig {
                input_dim: 16,
                hidden_dims: vec![32],
                embedding_dim: 8,
                use_batch_norm: false,
            },
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                rms_decay: 0.9,
                rms_epsilon: 1e-7,
                l2_coefficient: 1e-4,
                prox_mu: 0.0,
            },
            ssl: SslHyperparams {
                temperature: 0.5,
                unlabeled_weight: 0.3,
                n_support: 1,
                n_query_labeled: 1,
                n_query_unlabeled: 50,
                distance: DistanceKind::SquaredEuclidean,
            },
            federation: RoundConfig {
                total_clients: 20,
                active_per_round: 5,
                helper_count: 5,
                helper_update_interval: 1,
                local_epochs: 5,
                total_rounds: 60,
                noise_sigma: 0.0,
                client_mode: crate::federation::ClientMode::Protofssl,
                aggregation: crate::federation::Aggregation::Fedavg,
            },
            partition: PartitionConfig {
                labeled_per_class: 2,
                unlabeled_per_client: 100,
                distribution: ClassDistribution::Dirichlet { alpha: 0.5 },
                seed: None,
            },
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            network: self.network.clone(),
            optimizer: self.optimizer.clone(),
            ssl: self.ssl.clone(),
            federation: self.federation.clone(),
        }
    }

    fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            n_clients: self.federation.total_clients,
            labeled_per_class: self.partition.labeled_per_class,
            unlabeled_per_client: self.partition.unlabeled_per_client,
            distribution: self.partition.distribution,
            seed: self
                .partition
                .seed
                .unwrap_or_else(|| splitmix64(self.seed ^ 0x7061_7274)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol().validate()?;
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.partition.labeled_per_class < self.ssl.n_support + self.ssl.n_query_labeled
            && self.federation.client_mode != crate::federation::ClientMode::GlobalPrototypeAlt
        {
            return Err(Error::Config(format!(
                "partition.labeled_per_class ({}) must cover ssl.n_support + ssl.n_query_labeled ({})",
                self.partition.labeled_per_class,
                self.ssl.n_support + self.ssl.n_query_labeled
            )));
        }
        match &self.data {
            DataConfig::Synth {
                classes,
                dim,
                separation,
                train_per_class,
                ..
            } => {
                if *classes < 2 {
                    return Err(Error::Config("data.classes must be >= 2".into()));
                }
                if *dim != self.network.input_dim {
                    return Err(Error::Config(format!(
                        "data.dim ({dim}) must equal network.input_dim ({})",
                        self.network.input_dim
                    )));
                }
                if !(*separation > 0.0) {
                    return Err(Error::Config("data.separation must be > 0".into()));
                }
                if *train_per_class == 0 {
                    return Err(Error::Config("data.train_per_class must be >= 1".into()));
                }
            }
            DataConfig::Manifest { .. } => {}
        }
        Ok(())
    }

    /// Builds the train and test datasets this config describes.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataConfig::Synth {
                classes,
                dim,
                separation,
                train_per_class,
                test_per_class,
                seed,
            } => {
                let total = (*train_per_class + *test_per_class) * *classes;
                let data_seed = seed.unwrap_or_else(|| splitmix64(self.seed ^ 0x6461_7461));
                let all = data::synth_blobs(*classes, total, *dim, *separation, data_seed)?;
                all.split_per_class(*train_per_class)
            }
            DataConfig::Manifest { train, test } => {
                let train = data::load_dataset(train)?;
                let test = data::load_dataset(test)?;
                if train.dim() != self.network.input_dim {
                    return Err(Error::Config(format!(
                        "train manifest dim ({}) must equal network.input_dim ({})",
                        train.dim(),
                        self.network.input_dim
                    )));
                }
                if test.dim() != train.dim() || test.num_classes() != train.num_classes() {
                    return Err(Error::Config(
                        "train and test manifests disagree on dim or classes".into(),
                    ));
                }
                Ok((train, test))
            }
        }
    }
}

/// Per-round metrics persisted by the driver.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub labeled_loss: f32,
    pub unlabeled_loss: f32,
    pub cum_flops: u128,
    pub cum_bytes: u128,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str =
    "round,test_acc,labeled_loss,unlabeled_loss,cum_flops,cum_bytes,seconds";

impl RoundRecord {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round,
            self.test_accuracy,
            self.labeled_loss,
            self.unlabeled_loss,
            self.cum_flops,
            self.cum_bytes,
            self.seconds
        )
    }

    fn from_csv_line(line: &str, path: &Path) -> Result<Self> {
        let parse_err = |m: String| Error::Parse {
            path: path.display().to_string(),
            message: m,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(parse_err(format!("expected 7 fields, got {}", fields.len())));
        }
        Ok(RoundRecord {
            round: fields[0].parse().map_err(|e| parse_err(format!("round: {e}")))?,
            test_accuracy: fields[1].parse().map_err(|e| parse_err(format!("test_acc: {e}")))?,
            labeled_loss: fields[2].parse().map_err(|e| parse_err(format!("labeled_loss: {e}")))?,
            unlabeled_loss: fields[3]
                .parse()
                .map_err(|e| parse_err(format!("unlabeled_loss: {e}")))?,
            cum_flops: fields[4].parse().map_err(|e| parse_err(format!("cum_flops: {e}")))?,
            cum_bytes: fields[5].parse().map_err(|e| parse_err(format!("cum_bytes: {e}")))?,
            seconds: fields[6].parse().map_err(|e| parse_err(format!("seconds: {e}")))?,
        })
    }
}

/// Reads a metrics CSV back into records.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("bad header {other:?}"),
            })
        }
    }
    lines.map(|l| RoundRecord::from_csv_line(l, path)).collect()
}

/// Classifies the test set against labeled-count-weighted global prototypes
/// built from the store; returns the fraction correct. Classes with no
/// stored prototype are excluded from the argmax (their test samples count
/// as wrong).
pub fn evaluate(
    network: &NetworkConfig,
    params: &ParameterSet,
    store: &BTreeMap<ClientId, PrototypeSet>,
    test: &Dataset,
    distance: DistanceKind,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("evaluate: empty test set".into()));
    }
    let k = test.num_classes();
    let dim = network.embedding_dim;
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut weights = vec![0.0f64; k];
    for protos in store.values() {
        for (class, vector) in protos.iter() {
            let w = protos.support_count(class) as f64;
            if class < k && w > 0.0 {
                for (s, &v) in sums[class].iter_mut().zip(vector.data()) {
                    *s += w * v as f64;
                }
                weights[class] += w;
            }
        }
    }
    let mut global: Vec<Option<Vec<f32>>> = Vec::with_capacity(k);
    for (class, (sum, w)) in sums.into_iter().zip(&weights).enumerate() {
        if *w > 0.0 {
            global.push(Some(sum.iter().map(|&v| (v / w) as f32).collect()));
        } else {
            log::warn!("evaluate: no stored prototype for class {class}; its samples count as wrong");
            global.push(None);
        }
    }

    let net = EmbeddingNet::new(network.clone(), params.clone())?;
    let embedded = net.infer(test.features())?;
    let mut correct = 0usize;
    for i in 0..test.len() {
        let row = embedded.row(i);
        let mut best: Option<(f32, usize)> = None;
        for (class, proto) in global.iter().enumerate() {
            if let Some(p) = proto {
                let d = distance.eval(row, p);
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, class));
                }
            }
        }
        if let Some((_, class)) = best {
            if class == test.labels()[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Everything a finished run reports beyond the persisted records.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_round: usize,
    /// Root-mean-square of all stored prototype coordinates after the last
    /// round; a scale reference for prototype noise.
    pub prototype_rms: f64,
}

/// Runs the configured experiment with wall-clock timing.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    let start = Instant::now();
    run_experiment_with_clock(config, out_dir, &mut || start.elapsed().as_secs_f64())
}

/// Like [`run_experiment`] but with an injected clock; passing a constant
/// clock makes the metrics file a pure function of the configuration.
pub fn run_experiment_with_clock(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
    clock: &mut dyn FnMut() -> f64,
) -> Result<ExperimentOutput> {
    config.validate()?;
    let protocol = config.protocol();
    let (train, test) = config.load_data()?;
    let clients: Vec<ClientState> = data::partition(&train, &config.partition_spec())?
        .into_iter()
        .enumerate()
        .map(|(id, dataset)| ClientState { id, dataset })
        .collect();

    let mut init_rng = derive_rng(config.seed, 0, 0, 0);
    let theta0 = ParameterSet::init(&config.network, &mut init_rng);
    let mut server = ServerState::new(theta0, config.seed);

    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(
                dir.join("config.json"),
                serde_json::to_string_pretty(config).expect("config serializes"),
            )?;
            let mut f = fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let mut records: Vec<RoundRecord> = Vec::new();
    let mut cum_flops: u128 = 0;
    let mut cum_bytes: u128 = 0;
    let mut t_prev = clock();
    let push = |records: &mut Vec<RoundRecord>,
                    writer: &mut Option<fs::File>,
                    record: RoundRecord|
     -> Result<()> {
        if let Some(f) = writer {
            writeln!(f, "{}", record.to_csv_line())?;
            f.flush()?;
        }
        records.push(record);
        Ok(())
    };

    let acc0 = evaluate(
        &config.network,
        &server.global,
        &server.prototype_store,
        &test,
        config.ssl.distance,
    )?;
    let now = clock();
    push(
        &mut records,
        &mut writer,
        RoundRecord {
            round: 0,
            test_accuracy: acc0,
            labeled_loss: 0.0,
            unlabeled_loss: 0.0,
            cum_flops: 0,
            cum_bytes: 0,
            seconds: now - t_prev,
        },
    )?;
    t_prev = now;

    for round in 1..=config.federation.total_rounds {
        let outcome = run_round(&mut server, &clients, &protocol, config.parallel)?;
        if !outcome.mean_labeled_loss.is_finite() || !outcome.mean_unlabeled_loss.is_finite() {
            return Err(Error::NonFinite(format!("losses at round {round}")));
        }
        cum_flops += outcome.flops;
        cum_bytes += outcome.bytes;
        let is_eval = round % config.eval_every == 0 || round == config.federation.total_rounds;
        if !is_eval {
            continue;
        }
        let accuracy = evaluate(
            &config.network,
            &server.global,
            &server.prototype_store,
            &test,
            config.ssl.distance,
        )?;
        if !accuracy.is_finite() {
            return Err(Error::NonFinite(format!("accuracy at round {round}")));
        }
        let now = clock();
        push(
            &mut records,
            &mut writer,
            RoundRecord {
                round,
                test_accuracy: accuracy,
                labeled_loss: outcome.mean_labeled_loss,
                unlabeled_loss: outcome.mean_unlabeled_loss,
                cum_flops,
                cum_bytes,
                seconds: now - t_prev,
            },
        )?;
        t_prev = now;
    }

    let (mut best_accuracy, mut best_round) = (f64::NEG_INFINITY, 0);
    for r in &records {
        if r.test_accuracy > best_accuracy {
            best_accuracy = r.test_accuracy;
            best_round = r.round;
        }
    }
    let mut sq_sum = 0.0f64;
    let mut n_coords = 0usize;
    for protos in server.prototype_store.values() {
        for (_, v) in protos.iter() {
            for &x in v.data() {
                sq_sum += (x as f64) * (x as f64);
                n_coords += 1;
            }
        }
    }
    Ok(ExperimentOutput {
        final_accuracy: records.last().map(|r| r.test_accuracy).unwrap_or(0.0),
        best_accuracy,
        best_round,
        prototype_rms: if n_coords > 0 {
            (sq_sum / n_coords as f64).sqrt()
        } else {
            0.0
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fast_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk_default();
        c.federation.total_rounds = 4;
        c.federation.total_clients = 6;
        c.federation.active_per_round = 3;
        c.federation.local_epochs = 2;
        c.ssl.n_query_unlabeled = 10;
        c.partition.unlabeled_per_client = 20;
        c.data = DataConfig::Synth {
            classes: 4,
            dim: 16,
            separation: 3.0,
            train_per_class: 60,
            test_per_class: 30,
            seed: None,
        };
        c
    }

    #[test]
    fn zero_rounds_yield_only_the_initial_record() {
        let mut c = fast_config();
        c.federation.total_rounds = 0;
        let out = run_experiment_with_clock(&c, None, &mut || 0.0).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].round, 0);
        // Empty prototype store: every class missing, everything wrong.
        assert_eq!(out.records[0].test_accuracy, 0.0);
    }

    #[test]
    fn identical_config_and_seed_reproduce_records_exactly() {
        let c = fast_config();
        let a = run_experiment_with_clock(&c, None, &mut || 0.0).unwrap();
        let b = run_experiment_with_clock(&c, None, &mut || 0.0).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn metrics_round_trip_through_csv() {
        let c = fast_config();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment_with_clock(&c, Some(dir.path()), &mut || 0.0).unwrap();
        let back = read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(out.records, back);
        // Rounds ascend and cumulative fields never decrease.
        for w in back.windows(2) {
            assert!(w[1].round > w[0].round);
            assert!(w[1].cum_flops >= w[0].cum_flops);
            assert!(w[1].cum_bytes >= w[0].cum_bytes);
        }
        let cfg: ExperimentConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap())
                .unwrap();
        assert_eq!(cfg, c);
    }

    #[test]
    fn output_directory_does_not_influence_numbers() {
        let c = fast_config();
        let dir = tempfile::tempdir().unwrap();
        let with_dir = run_experiment_with_clock(&c, Some(dir.path()), &mut || 0.0).unwrap();
        let without = run_experiment_with_clock(&c, None, &mut || 0.0).unwrap();
        assert_eq!(with_dir.records, without.records);
    }

    #[test]
    fn toy_training_beats_round_zero() {
        let mut c = fast_config();
        c.federation.total_rounds = 30;
        let out = run_experiment_with_clock(&c, None, &mut || 0.0).unwrap();
        assert!(
            out.final_accuracy > out.records[0].test_accuracy,
            "final {} vs round0 {}",
            out.final_accuracy,
            out.records[0].test_accuracy
        );
    }

    #[test]
    fn invalid_config_is_rejected_with_field_message() {
        let mut c = fast_config();
        c.ssl.temperature = 0.0;
        let err = run_experiment_with_clock(&c, None, &mut || 0.0).unwrap_err();
        assert!(err.to_string().contains("temperature"));

        let mut c2 = fast_config();
        c2.partition.labeled_per_class = 1; // below n_support + n_query_labeled
        let err2 = run_experiment_with_clock(&c2, None, &mut || 0.0).unwrap_err();
        assert!(err2.to_string().contains("labeled_per_class"));
    }

    fn store_with(protos: Vec<PrototypeSet>) -> BTreeMap<ClientId, PrototypeSet> {
        protos.into_iter().map(|p| (p.owner, p)).collect()
    }

    fn identity_network(dim: usize) -> (NetworkConfig, ParameterSet) {
        // Linear identity embedding so evaluation geometry equals input
        // geometry.
        let config = NetworkConfig {
            input_dim: dim,
            hidden_dims: vec![],
            embedding_dim: dim,
            use_batch_norm: false,
        };
        let mut params = ParameterSet::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        for t in &mut params.layers {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        for i in 0..dim {
            params.layers[0].set2(i, i, 1.0);
        }
        (config, params)
    }

    #[test]
    fn test_points_at_global_prototypes_classify_perfectly() {
        let (config, params) = identity_network(2);
        let mut p = PrototypeSet::new(0, 1, 2, 2);
        p.insert(0, Tensor::vector(vec![0.0, 0.0]), 3).unwrap();
        p.insert(1, Tensor::vector(vec![10.0, 0.0]), 3).unwrap();
        let store = store_with(vec![p]);
        let test = Dataset::new(
            Tensor::matrix(2, 2, vec![0.0, 0.0, 10.0, 0.0]).unwrap(),
            vec![0, 1],
            2,
        )
        .unwrap();
        let acc = evaluate(&config, &params, &store, &test, DistanceKind::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn single_client_store_uses_its_prototypes_directly() {
        let (config, params) = identity_network(2);
        let mut p = PrototypeSet::new(4, 1, 2, 2);
        p.insert(0, Tensor::vector(vec![-3.0, 0.0]), 5).unwrap();
        p.insert(1, Tensor::vector(vec![3.0, 0.0]), 5).unwrap();
        let store = store_with(vec![p]);
        // Points slightly nearer one prototype than the other.
        let test = Dataset::new(
            Tensor::matrix(2, 2, vec![-0.5, 1.0, 0.5, -1.0]).unwrap(),
            vec![0, 1],
            2,
        )
        .unwrap();
        let acc = evaluate(&config, &params, &store, &test, DistanceKind::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn evaluation_is_store_permutation_invariant_and_weighted() {
        let (config, params) = identity_network(1);
        // Client A: class-0 prototype at 0 with weight 1; client B at 3 with
        // weight 3 -> global prototype at 2.25.
        let mut a = PrototypeSet::new(0, 1, 2, 1);
        a.insert(0, Tensor::vector(vec![0.0]), 1).unwrap();
        a.insert(1, Tensor::vector(vec![10.0]), 1).unwrap();
        let mut b = PrototypeSet::new(1, 1, 2, 1);
        b.insert(0, Tensor::vector(vec![3.0]), 3).unwrap();
        b.insert(1, Tensor::vector(vec![10.0]), 3).unwrap();
        let test = Dataset::new(Tensor::matrix(1, 1, vec![2.2]).unwrap(), vec![0], 2).unwrap();
        let acc1 = evaluate(
            &config,
            &params,
            &store_with(vec![a.clone(), b.clone()]),
            &test,
            DistanceKind::default(),
        )
        .unwrap();
        let acc2 = evaluate(
            &config,
            &params,
            &store_with(vec![b, a]),
            &test,
            DistanceKind::default(),
        )
        .unwrap();
        assert_eq!(acc1, 1.0);
        assert_eq!(acc1, acc2);
    }

    #[test]
    fn random_prototypes_score_at_chance() {
        let (config, params) = identity_network(8);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut store = BTreeMap::new();
        for owner in 0..5usize {
            let mut p = PrototypeSet::new(owner, 1, 10, 8);
            for k in 0..10 {
                let v: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                p.insert(k, Tensor::vector(v), 1).unwrap();
            }
            store.insert(owner, p);
        }
        let n = 4000;
        let feats: Vec<f32> = (0..n * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let test = Dataset::new(Tensor::matrix(n, 8, feats).unwrap(), labels, 10).unwrap();
        let acc = evaluate(&config, &params, &store, &test, DistanceKind::default()).unwrap();
        assert!((acc - 0.1).abs() <= 0.03, "accuracy {acc}");
    }

    #[test]
    fn missing_class_prototypes_count_those_samples_wrong() {
        let (config, params) = identity_network(1);
        let mut p = PrototypeSet::new(0, 1, 2, 1);
        p.insert(0, Tensor::vector(vec![0.0]), 1).unwrap();
        let store = store_with(vec![p]);
        // One sample of the covered class, one of the missing class.
        let test = Dataset::new(
            Tensor::matrix(2, 1, vec![0.1, 5.0]).unwrap(),
            vec![0, 1],
            2,
        )
        .unwrap();
        let acc = evaluate(&config, &params, &store, &test, DistanceKind::default()).unwrap();
        assert_eq!(acc, 0.5);
    }
}
