//! The round-based federation protocol: client selection, helper prototype
//! sharing, local episodic training, weighted aggregation, and client-side
//! prototype noise.
//!
//! Every random choice draws from a generator derived from (global seed,
//! round, purpose, salt), so results are a pure function of the
//! configuration, independent of client execution order or threading.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::cost::{self, ArchSpec, CostParams, Method};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::numerics::{rmsprop_step, EmbeddingNet, NetworkConfig, OptimizerConfig, ParameterSet, Tensor};
use crate::protonet::{
    average_helper_prototypes, episode_loss_and_grad, make_prototype, pseudo_label, ClientId,
    EpisodeLayout, EpisodeProtos, PrototypeSet, SoftLabel, SslHyperparams,
};

mod purpose {
    pub const CLIENT_SELECT: u64 = 1;
    pub const HELPER_SELECT: u64 = 2;
    pub const CLIENT_TRAIN: u64 = 3;
    pub const PROTO_NOISE: u64 = 4;
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic sub-generator for (seed, round, purpose, salt).
pub fn derive_rng(seed: u64, round: u64, purpose: u64, salt: u64) -> ChaCha8Rng {
    let mut x = splitmix64(seed);
    x = splitmix64(x ^ round);
    x = splitmix64(x ^ purpose);
    x = splitmix64(x ^ salt);
    ChaCha8Rng::seed_from_u64(x)
}

/// How clients train locally.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    #[default]
    Protofssl,
    /// Helper-prototype averages replace the locally sampled support set;
    /// every labeled sample becomes a query.
    GlobalPrototypeAlt,
    /// Supervised baseline: the unlabeled set is never touched.
    LabeledOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Fedavg,
    Fedprox,
}

/// Shape of the federated rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub total_clients: usize,
    pub active_per_round: usize,
    pub helper_count: usize,
    /// Rounds between helper list refreshes; 1 keeps helpers fresh every
    /// round.
    #[serde(default = "default_one")]
    pub helper_update_interval: usize,
    pub local_epochs: usize,
    pub total_rounds: usize,
    /// Std-dev of Gaussian noise added to prototype coordinates before
    /// upload; 0 disables.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub client_mode: ClientMode,
    #[serde(default)]
    pub aggregation: Aggregation,
}

fn default_one() -> usize {
    1
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(Error::Config("federation.total_clients must be >= 1".into()));
        }
        if self.active_per_round == 0 || self.active_per_round > self.total_clients {
            return Err(Error::Config(
                "federation.active_per_round must be in [1, total_clients]".into(),
            ));
        }
        if self.helper_count > self.total_clients {
            return Err(Error::Config(
                "federation.helper_count must be <= total_clients".into(),
            ));
        }
        if self.helper_update_interval == 0 {
            return Err(Error::Config(
                "federation.helper_update_interval must be >= 1".into(),
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("federation.local_epochs must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("federation.noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything a client needs to run one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub ssl: SslHyperparams,
    pub federation: RoundConfig,
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate()?;
        self.ssl.validate()?;
        self.federation.validate()?;
        if self.federation.aggregation == Aggregation::Fedprox && self.optimizer.prox_mu == 0.0 {
            return Err(Error::Config(
                "fedprox aggregation needs optimizer.prox_mu > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A client: identity plus its private partitioned data.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: ClientId,
    pub dataset: ClientDataset,
}

/// Server-side protocol state.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub round: usize,
    pub global: ParameterSet,
    /// Latest prototype set per client.
    pub prototype_store: BTreeMap<ClientId, PrototypeSet>,
    pub prev_active: Vec<ClientId>,
    seed: u64,
    helper_cache: Vec<PrototypeSet>,
    helper_cache_round: Option<usize>,
}

impl ServerState {
    pub fn new(global: ParameterSet, seed: u64) -> Self {
        ServerState {
            round: 0,
            global,
            prototype_store: BTreeMap::new(),
            prev_active: Vec::new(),
            seed,
            helper_cache: Vec::new(),
            helper_cache_round: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Uniform sample of `m` client ids without replacement, ascending.
pub fn select_clients(rng: &mut ChaCha8Rng, total_clients: usize, m: usize) -> Result<Vec<ClientId>> {
    if m > total_clients {
        return Err(Error::Config(format!(
            "cannot select {m} of {total_clients} clients"
        )));
    }
    let mut ids: Vec<ClientId> = rand::seq::index::sample(rng, total_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Up to `h` prototype sets, preferring the previous round's active clients
/// and topping up uniformly from the rest of the store.
pub fn select_helpers(
    store: &BTreeMap<ClientId, PrototypeSet>,
    prev_active: &[ClientId],
    h: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PrototypeSet> {
    if h == 0 || store.is_empty() {
        return Vec::new();
    }
    let primary: Vec<ClientId> = prev_active
        .iter()
        .copied()
        .filter(|id| store.contains_key(id))
        .collect();
    let mut chosen: Vec<ClientId> = if primary.len() > h {
        let picks = rand::seq::index::sample(rng, primary.len(), h);
        picks.iter().map(|i| primary[i]).collect()
    } else {
        primary.clone()
    };
    if chosen.len() < h {
        let rest: Vec<ClientId> = store
            .keys()
            .copied()
            .filter(|id| !chosen.contains(id))
            .collect();
        let extra = (h - chosen.len()).min(rest.len());
        if extra > 0 {
            let picks = rand::seq::index::sample(rng, rest.len(), extra);
            chosen.extend(picks.iter().map(|i| rest[i]));
        }
    }
    chosen.sort_unstable();
    chosen.iter().map(|id| store[id].clone()).collect()
}

/// Adds i.i.d. Gaussian noise to every prototype coordinate (client-side,
/// before upload). Zero sigma returns the input untouched.
pub fn add_prototype_noise(protos: &PrototypeSet, sigma: f64, rng: &mut ChaCha8Rng) -> PrototypeSet {
    if sigma == 0.0 {
        return protos.clone();
    }
    let normal = Normal::new(0.0f64, sigma).expect("sigma validated non-negative");
    let mut out = PrototypeSet::new(protos.owner, protos.round, protos.num_classes(), protos.embedding_dim());
    for (class, vector) in protos.iter() {
        let noisy: Vec<f32> = vector
            .data()
            .iter()
            .map(|&v| (v as f64 + normal.sample(rng)) as f32)
            .collect();
        out.insert(class, Tensor::vector(noisy), protos.support_count(class))
            .expect("same shape as validated input");
    }
    out
}

/// Per-round training results of one client.
#[derive(Debug)]
pub struct ClientRoundResult {
    pub client_id: ClientId,
    pub params: ParameterSet,
    pub prototypes: PrototypeSet,
    pub mean_labeled_loss: f32,
    pub mean_unlabeled_loss: f32,
    /// Epochs that actually had an unlabeled term.
    pub unlabeled_epochs: usize,
    /// Aggregation weight |D_i|.
    pub weight: usize,
}

/// One client's local round: `local_epochs` episodic updates starting from
/// the broadcast weights, then fresh prototypes from the full labeled set.
pub fn run_client(
    client: &ClientState,
    theta_in: &ParameterSet,
    helpers: &[PrototypeSet],
    protocol: &Protocol,
    round: usize,
    seed: u64,
) -> Result<ClientRoundResult> {
    let cfg = &protocol.federation;
    let hp = &protocol.ssl;
    let mode = cfg.client_mode;
    if mode == ClientMode::GlobalPrototypeAlt && helpers.is_empty() {
        return Err(Error::Config(
            "global_prototype_alt mode requires a non-empty helper set".into(),
        ));
    }
    let mut rng = derive_rng(seed, round as u64, purpose::CLIENT_TRAIN, client.id as u64);
    let mut net = EmbeddingNet::new(protocol.network.clone(), theta_in.clone())?;
    let anchor = match cfg.aggregation {
        Aggregation::Fedprox => Some(theta_in.clone()),
        Aggregation::Fedavg => None,
    };

    let dataset = &client.dataset;
    let dim = protocol.network.input_dim;
    let fixed_protos = match mode {
        ClientMode::GlobalPrototypeAlt => Some(average_helper_prototypes(helpers)?),
        _ => None,
    };

    let use_unlabeled = mode != ClientMode::LabeledOnly
        && hp.unlabeled_weight > 0.0
        && !helpers.is_empty()
        && hp.n_query_unlabeled > 0
        && dataset.n_unlabeled() > 0;

    let mut labeled_sum = 0.0f64;
    let mut unlabeled_sum = 0.0f64;
    let mut unlabeled_epochs = 0usize;

    for _epoch in 0..cfg.local_epochs {
        // Assemble the episode batch: support rows, labeled query rows,
        // unlabeled query rows.
        let mut rows: Vec<f32> = Vec::new();
        let mut layout = EpisodeLayout::default();
        let mut cursor = 0usize;

        if mode != ClientMode::GlobalPrototypeAlt {
            for (&class, samples) in dataset.labeled() {
                let n = samples.rows();
                let want = hp.n_support + hp.n_query_labeled;
                if n < want {
                    return Err(Error::Sizing(format!(
                        "client {}: class {class} has {n} labeled samples, needs {want}",
                        client.id,
                    )));
                }
                // A fresh draw per epoch; the first n_support picks form the
                // support set, the rest the query set.
                let picks = rand::seq::index::sample(&mut rng, n, want);
                for i in picks.iter() {
                    rows.extend_from_slice(samples.row(i));
                }
                layout.support.insert(class, cursor..cursor + hp.n_support);
                layout.labeled_query.insert(
                    class,
                    cursor + hp.n_support..cursor + want,
                );
                cursor += want;
            }
        } else {
            // Helper prototypes serve as the support set; all labeled data
            // becomes query.
            for (&class, samples) in dataset.labeled() {
                let n = samples.rows();
                for i in 0..n {
                    rows.extend_from_slice(samples.row(i));
                }
                layout.labeled_query.insert(class, cursor..cursor + n);
                cursor += n;
            }
        }

        let mut n_unlabeled = 0usize;
        if use_unlabeled {
            n_unlabeled = hp.n_query_unlabeled.min(dataset.n_unlabeled());
            let picks = rand::seq::index::sample(&mut rng, dataset.n_unlabeled(), n_unlabeled);
            for i in picks.iter() {
                rows.extend_from_slice(dataset.unlabeled().row(i));
            }
            layout.unlabeled = cursor..cursor + n_unlabeled;
            cursor += n_unlabeled;
        }

        let batch = Tensor::matrix(cursor, dim, rows)?;
        let embeddings = net.forward(&batch)?;

        let pseudo: Vec<SoftLabel> = if n_unlabeled > 0 {
            layout
                .unlabeled
                .clone()
                .map(|r| {
                    pseudo_label(
                        &Tensor::vector(embeddings.row(r).to_vec()),
                        helpers,
                        hp.temperature,
                        hp.distance,
                    )
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let protos_mode = match &fixed_protos {
            Some(map) => EpisodeProtos::Fixed(map),
            None => EpisodeProtos::FromSupport,
        };
        let ep = episode_loss_and_grad(
            &embeddings,
            &layout,
            protos_mode,
            &pseudo,
            hp.unlabeled_weight,
            hp.distance,
        )?;
        net.backward(&ep.grad)?;
        rmsprop_step(net.params_mut(), &protocol.optimizer, anchor.as_ref())?;

        labeled_sum += ep.labeled as f64;
        if ep.n_unlabeled > 0 {
            unlabeled_sum += ep.unlabeled as f64;
            unlabeled_epochs += 1;
        }
    }

    // Final prototypes from the full labeled set under the updated weights.
    let mut prototypes = PrototypeSet::new(
        client.id,
        round,
        dataset.num_classes(),
        protocol.network.embedding_dim,
    );
    for (&class, samples) in dataset.labeled() {
        if samples.rows() == 0 {
            continue;
        }
        let embedded = net.infer(samples)?;
        prototypes.insert(class, make_prototype(&embedded)?, samples.rows())?;
    }

    let epochs = cfg.local_epochs as f64;
    Ok(ClientRoundResult {
        client_id: client.id,
        weight: dataset.n_total(),
        params: net.into_params(),
        prototypes,
        mean_labeled_loss: (labeled_sum / epochs) as f32,
        mean_unlabeled_loss: if unlabeled_epochs > 0 {
            (unlabeled_sum / unlabeled_epochs as f64) as f32
        } else {
            0.0
        },
        unlabeled_epochs,
    })
}

/// Weighted per-parameter mean; weights are client dataset sizes. Gradients
/// and optimizer state of the result are zeroed (clients start each round
/// with fresh optimizer state), running statistics are averaged like
/// weights.
pub fn fedavg_aggregate(locals: &[(&ParameterSet, f64)]) -> Result<ParameterSet> {
    let (first, _) = locals
        .first()
        .ok_or_else(|| Error::EmptyInput("fedavg_aggregate".into()))?;
    if locals.iter().any(|(_, w)| *w <= 0.0) {
        return Err(Error::Config("aggregation weights must be > 0".into()));
    }
    let total: f64 = locals.iter().map(|(_, w)| w).sum();

    let average = |extract: &dyn Fn(&ParameterSet) -> &[Tensor]| -> Result<Vec<Tensor>> {
        let reference = extract(first);
        let mut out = Vec::with_capacity(reference.len());
        for ti in 0..reference.len() {
            let shape = reference[ti].shape().to_vec();
            let mut acc = vec![0.0f64; reference[ti].numel()];
            for (p, w) in locals {
                let t = &extract(p)[ti];
                if t.shape() != shape {
                    return Err(Error::shape(
                        format!("fedavg_aggregate tensor {ti}"),
                        format!("{shape:?}"),
                        format!("{:?}", t.shape()),
                    ));
                }
                for (a, &v) in acc.iter_mut().zip(t.data()) {
                    *a += *w * v as f64;
                }
            }
            let data: Vec<f32> = acc.iter().map(|&v| (v / total) as f32).collect();
            out.push(Tensor::from_vec(&shape, data)?);
        }
        Ok(out)
    };

    let layers = average(&|p: &ParameterSet| p.trainable())?;
    let running = average(&|p: &ParameterSet| p.running_stats())?;
    Ok(ParameterSet::from_values(layers, running))
}

/// Aggregated metrics and simulated costs of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    pub active: Vec<ClientId>,
    pub mean_labeled_loss: f32,
    pub mean_unlabeled_loss: f32,
    pub flops: u128,
    pub bytes: u128,
}

/// One full protocol round: select clients and helpers, run local training
/// (optionally across threads), aggregate, store noised prototypes.
pub fn run_round(
    server: &mut ServerState,
    clients: &[ClientState],
    protocol: &Protocol,
    parallel: bool,
) -> Result<RoundOutcome> {
    let cfg = &protocol.federation;
    if clients.len() != cfg.total_clients {
        return Err(Error::Config(format!(
            "expected {} clients, got {}",
            cfg.total_clients,
            clients.len()
        )));
    }
    for (i, c) in clients.iter().enumerate() {
        if c.id != i {
            return Err(Error::Config(format!(
                "client ids must be 0..N in order, found {} at {i}",
                c.id
            )));
        }
    }
    let round = server.round + 1;
    let seed = server.seed;

    let mut sel_rng = derive_rng(seed, round as u64, purpose::CLIENT_SELECT, 0);
    let active = select_clients(&mut sel_rng, cfg.total_clients, cfg.active_per_round)?;

    // Helpers refresh on the configured interval; the first usable refresh
    // happens as soon as the store is non-empty (round 1 has nothing to
    // offer).
    let due = match server.helper_cache_round {
        None => true,
        Some(last) => server.helper_cache.is_empty() || round - last >= cfg.helper_update_interval,
    };
    if due {
        let mut help_rng = derive_rng(seed, round as u64, purpose::HELPER_SELECT, 0);
        server.helper_cache = select_helpers(
            &server.prototype_store,
            &server.prev_active,
            cfg.helper_count,
            &mut help_rng,
        );
        if !server.helper_cache.is_empty() {
            server.helper_cache_round = Some(round);
        }
    }
    let helpers = server.helper_cache.clone();

    // Round-1 bootstrap for the global-prototype variant: no helpers exist
    // yet, so clients skip training and only contribute prototypes.
    let bootstrap_alt =
        cfg.client_mode == ClientMode::GlobalPrototypeAlt && helpers.is_empty();

    let run_one = |id: ClientId| -> Result<ClientRoundResult> {
        let client = &clients[id];
        if bootstrap_alt {
            let net = EmbeddingNet::new(protocol.network.clone(), server.global.clone())?;
            let mut prototypes = PrototypeSet::new(
                id,
                round,
                client.dataset.num_classes(),
                protocol.network.embedding_dim,
            );
            for (&class, samples) in client.dataset.labeled() {
                if samples.rows() == 0 {
                    continue;
                }
                let embedded = net.infer(samples)?;
                prototypes.insert(class, make_prototype(&embedded)?, samples.rows())?;
            }
            return Ok(ClientRoundResult {
                client_id: id,
                weight: client.dataset.n_total(),
                params: server.global.clone(),
                prototypes,
                mean_labeled_loss: 0.0,
                mean_unlabeled_loss: 0.0,
                unlabeled_epochs: 0,
            });
        }
        run_client(client, &server.global, &helpers, protocol, round, seed)
    };

    let mut results: Vec<ClientRoundResult> = if parallel {
        let run_one = &run_one;
        std::thread::scope(|scope| {
            let handles: Vec<_> = active
                .iter()
                .map(|&id| scope.spawn(move || run_one(id)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        active.iter().map(|&id| run_one(id)).collect::<Result<_>>()?
    };
    // Aggregation consumes clients in id order regardless of scheduling.
    results.sort_by_key(|r| r.client_id);

    let weighted: Vec<(&ParameterSet, f64)> = results
        .iter()
        .map(|r| (&r.params, r.weight as f64))
        .collect();
    server.global = fedavg_aggregate(&weighted)?;
    if !server.global.is_finite() {
        return Err(Error::NonFinite(format!("global parameters after round {round}")));
    }

    let mut labeled_sum = 0.0f64;
    let mut unlabeled_sum = 0.0f64;
    let mut unlabeled_clients = 0usize;
    let mut flops: u128 = 0;
    let mut bytes_f: f64 = 0.0;
    let arch = ArchSpec::from_dims(&protocol.network.dims());
    let flops_per_sample = cost::forward_flops(&arch, 1);
    let model_bytes = 4 * server.global.num_values() as u64;
    let prototype_bytes = 4 * protocol.network.embedding_dim as u64;

    for r in &mut results {
        labeled_sum += r.mean_labeled_loss as f64;
        if r.unlabeled_epochs > 0 {
            unlabeled_sum += r.mean_unlabeled_loss as f64;
            unlabeled_clients += 1;
        }
        let client = &clients[r.client_id];
        let p = CostParams {
            flops_per_sample,
            model_bytes,
            prototype_bytes,
            n_labeled: client.dataset.n_labeled() as u64,
            n_unlabeled: if cfg.client_mode == ClientMode::LabeledOnly {
                0
            } else {
                client.dataset.n_unlabeled() as u64
            },
            epochs: cfg.local_epochs as u64,
            augmentations: 0,
            helpers: helpers.len() as u64,
            classes: client.dataset.num_classes() as u64,
            helper_refresh_interval: cfg.helper_update_interval as u64,
        };
        flops += cost::comp_cost(Method::Protofssl, &p)?;
        bytes_f += cost::comm_cost(Method::Protofssl, &p)?;

        let mut noise_rng = derive_rng(seed, round as u64, purpose::PROTO_NOISE, r.client_id as u64);
        let noised = add_prototype_noise(&r.prototypes, cfg.noise_sigma, &mut noise_rng);
        server.prototype_store.insert(r.client_id, noised);
    }

    server.prev_active = active.clone();
    server.round = round;

    Ok(RoundOutcome {
        round,
        active,
        mean_labeled_loss: (labeled_sum / results.len() as f64) as f32,
        mean_unlabeled_loss: if unlabeled_clients > 0 {
            (unlabeled_sum / unlabeled_clients as f64) as f32
        } else {
            0.0
        },
        flops,
        bytes: bytes_f.round() as u128,
    })
}
