//! The federated protocol state machine: client sampling, local training,
//! aggregation, accumulation scheduling, and the exact communication ledger.
//!
//! Seven algorithms share one round loop:
//!
//! * `FedAvg` - clients train and upload full weights, the server averages.
//! * `FedLoRA` - clients train (A, B) update pairs, never accumulated.
//! * `FedLoRU` - like FedLoRA, but every `tau` rounds the aggregated pair is
//!   folded into every client's frozen base and the pair is re-initialized.
//! * `pFedLoRU` - each client also keeps a personal (L, U) pair, trained
//!   locally before the shared pair each round; only (A, B) is uploaded.
//! * `mFedLoRU` - resource-limited clients train nested factors of the pair
//!   and upload only those; the server recovers full-rank-r pairs before
//!   aggregating.
//! * `pFedLoRA(1)`/`pFedLoRA(2)` - full-weight baselines with personal pairs,
//!   trained sequentially (1) or jointly (2).
//!
//! Every parameter transfer is counted in the ledger in parameter units and
//! must match the closed-form costs exactly.

use serde::{Deserialize, Serialize};

use crate::data::{dirichlet_partition, split_last_fraction, Dataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lowrank::{
    comm_cost_full, comm_cost_lowrank, comm_cost_nested, default_init_scale, LowRankPair,
    NestedLowRankPair,
};
use crate::model::{
    accuracy, train_epochs, FactorizedModel, OptimizerState, TrainSelector,
};
use crate::seeds::{subsystem_rng, subsystem_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    FedAvg,
    FedLoRA,
    FedLoRU,
    PFedLoRU,
    MFedLoRU,
    PFedLoRA1,
    PFedLoRA2,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Self::FedAvg),
            "fedlora" => Ok(Self::FedLoRA),
            "fedloru" => Ok(Self::FedLoRU),
            "pfedloru" => Ok(Self::PFedLoRU),
            "mfedloru" => Ok(Self::MFedLoRU),
            "pfedlora1" => Ok(Self::PFedLoRA1),
            "pfedlora2" => Ok(Self::PFedLoRA2),
            other => Err(Error::Input(format!("unknown algorithm {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::FedLoRA => "fedlora",
            Self::FedLoRU => "fedloru",
            Self::PFedLoRU => "pfedloru",
            Self::MFedLoRU => "mfedloru",
            Self::PFedLoRA1 => "pfedlora1",
            Self::PFedLoRA2 => "pfedlora2",
        }
    }

    /// Whether clients exchange low-rank pairs (vs full weight matrices).
    pub fn low_rank(self) -> bool {
        matches!(
            self,
            Self::FedLoRA | Self::FedLoRU | Self::PFedLoRU | Self::MFedLoRU
        )
    }

    /// Whether the accumulation guard `t mod tau == 0` ever fires.
    pub fn accumulates(self) -> bool {
        matches!(self, Self::FedLoRU | Self::PFedLoRU | Self::MFedLoRU)
    }

    pub fn personalized(self) -> bool {
        matches!(self, Self::PFedLoRU | Self::PFedLoRA1 | Self::PFedLoRA2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Fresh Gaussian A, zero B after each accumulation.
    Random,
    /// Keep the accumulated pair's weights and continue training them.
    Momentum,
}

impl InitStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "momentum" => Ok(Self::Momentum),
            other => Err(Error::Input(format!("unknown init strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionSpec {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Per-round training knobs.
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub sampling_rate: f64,
    pub local_epochs: usize,
    pub epochs_personal: usize,
    pub epochs_global: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Everything needed to build a simulation around a dataset.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub sampling_rate: f64,
    /// Per-layer update ranks; a single entry applies to every layer.
    pub ranks: Vec<usize>,
    pub rank_personal: usize,
    /// Per-client nested ranks for mFedLoRU; `None` entries opt out.
    pub nested_ranks: Vec<Option<(usize, usize)>>,
    pub tau: usize,
    pub total_rounds: usize,
    pub local_epochs: usize,
    pub epochs_personal: usize,
    pub epochs_global: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub alpha_personal: f64,
    pub alpha_nested_a: f64,
    pub alpha_nested_b: f64,
    /// Gaussian init scale for factor A; default 1/sqrt(rank).
    pub init_scale: Option<f64>,
    pub init_strategy: InitStrategy,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    /// Cosine-annealing cycle in rounds; `None` uses the full horizon.
    pub cosine_cycle: Option<usize>,
    /// Layer sizes, e.g. [d_x, hidden, classes] or [d_x, classes].
    pub model_dims: Vec<usize>,
    pub partition: PartitionSpec,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn defaults(algorithm: Algorithm, model_dims: Vec<usize>) -> Self {
        Self {
            algorithm,
            clients: 8,
            sampling_rate: 0.5,
            ranks: vec![4],
            rank_personal: 2,
            nested_ranks: Vec::new(),
            tau: 5,
            total_rounds: 30,
            local_epochs: 5,
            epochs_personal: 1,
            epochs_global: 4,
            batch_size: 32,
            alpha: 16.0,
            alpha_personal: 16.0,
            alpha_nested_a: 1.0,
            alpha_nested_b: 1.0,
            init_scale: None,
            init_strategy: InitStrategy::Random,
            lr: 0.05,
            lr_min: 0.0,
            momentum: 0.9,
            cosine_cycle: None,
            model_dims,
            partition: PartitionSpec::Iid,
            seed: 42,
        }
    }

    fn rank_for_layer(&self, layer: usize, d_in: usize, d_out: usize) -> usize {
        let r = if self.ranks.len() == 1 {
            self.ranks[0]
        } else {
            self.ranks[layer]
        };
        r.min(d_in.min(d_out)).max(1)
    }
}

/// One client: frozen local base, its update factors, and its data slice.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Aggregation weight, proportional to the train-shard size. Renormalized
    /// over the selected subset each round.
    pub weight: f64,
    pub model: FactorizedModel,
    pub nested_ranks: Option<(usize, usize)>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Server side: round counter, global model state, accumulation history.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub algorithm: Algorithm,
    pub accumulation_cycle: usize,
    pub total_rounds: usize,
    pub model: FactorizedModel,
    /// The aggregated pairs folded at each accumulation event (per layer),
    /// so the accumulation identity can be checked against the run.
    pub accumulation_history: Vec<Vec<LowRankPair>>,
}

/// Per-round parameter-transfer record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LedgerEntry {
    pub round: usize,
    pub downlink_params: u64,
    pub uplink_params: u64,
    /// (client id, downlink, uplink) for every selected client.
    pub per_client: Vec<(usize, u64, u64)>,
}

#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    pub rounds: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn total_uplink(&self) -> u64 {
        self.rounds.iter().map(|r| r.uplink_params).sum()
    }

    pub fn total_downlink(&self) -> u64 {
        self.rounds.iter().map(|r| r.downlink_params).sum()
    }
}

/// Per-round metrics emitted by the runner.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub personalized_acc: Option<f64>,
    pub uplink_params: u64,
    pub downlink_params: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub skipped_clients: Vec<usize>,
}

/// Uniform without-replacement client sample of size max(1, round(rate * K)),
/// deterministic in (seed, round); ids returned ascending.
pub fn sample_clients(k: usize, sampling_rate: f64, round: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let m = ((sampling_rate * k as f64).round() as usize).clamp(1, k);
    let mut ids: Vec<usize> = (0..k).collect();
    let mut rng = subsystem_rng(seed, "sampling", &[round as u64]);
    ids.shuffle(&mut rng);
    ids.truncate(m);
    ids.sort_unstable();
    ids
}

/// Entrywise weighted mean of the A and B factors independently; weights are
/// renormalized to sum to one.
pub fn aggregate(pairs: &[LowRankPair], weights: &[f64]) -> Result<LowRankPair> {
    if pairs.is_empty() || pairs.len() != weights.len() {
        return Err(Error::Input(format!(
            "{} pairs with {} weights",
            pairs.len(),
            weights.len()
        )));
    }
    let a = aggregate_matrices(
        &pairs.iter().map(|p| p.a().clone()).collect::<Vec<_>>(),
        weights,
    )?;
    let b = aggregate_matrices(
        &pairs.iter().map(|p| p.b().clone()).collect::<Vec<_>>(),
        weights,
    )?;
    LowRankPair::new(a, b, pairs[0].alpha())
}

pub fn aggregate_matrices(mats: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    if mats.is_empty() || mats.len() != weights.len() {
        return Err(Error::Input("matrix/weight count mismatch".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Input("aggregation weights must sum positive".into()));
    }
    let mut out = Matrix::zeros(mats[0].rows(), mats[0].cols());
    for (m, &w) in mats.iter().zip(weights.iter()) {
        out.add_scaled(m, w / total)?;
    }
    Ok(out)
}

fn aggregate_biases(biases: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; biases[0].len()];
    for (b, &w) in biases.iter().zip(weights.iter()) {
        for (o, &v) in out.iter_mut().zip(b.iter()) {
            *o += (w / total) * v;
        }
    }
    out
}

/// Relative accuracy change of FedLoRU over the FedAvg baseline.
///
/// The per-client-count comparison tables print
/// (acc_fedloru - acc_fedavg) / acc_fedavg; the baseline accuracy is the
/// denominator.
pub fn ratio_metric(acc_fedavg: f64, acc_fedloru: f64) -> Result<f64> {
    if acc_fedavg == 0.0 {
        return Err(Error::Input("ratio metric divides by zero".into()));
    }
    Ok((acc_fedloru - acc_fedavg) / acc_fedavg)
}

/// A full federated run over one dataset.
pub struct Simulation {
    pub config: SimulationConfig,
    pub dataset: Dataset,
    pub global_test: Vec<usize>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub ledger: CommLedger,
}

impl Simulation {
    pub fn new(config: SimulationConfig, dataset: Dataset) -> Result<Self> {
        if config.clients == 0 {
            return Err(Error::Input("need at least one client".into()));
        }
        if !(config.sampling_rate > 0.0 && config.sampling_rate <= 1.0) {
            return Err(Error::Input(format!(
                "sampling rate {} not in (0, 1]",
                config.sampling_rate
            )));
        }
        if config.model_dims.first() != Some(&dataset.feature_dim()) {
            return Err(Error::Shape(format!(
                "model input {:?} does not match dataset features {}",
                config.model_dims.first(),
                dataset.feature_dim()
            )));
        }
        if config.model_dims.last() != Some(&dataset.classes()) {
            return Err(Error::Shape(format!(
                "model output {:?} does not match dataset classes {}",
                config.model_dims.last(),
                dataset.classes()
            )));
        }
        let layer_count = config.model_dims.len() - 1;
        if config.ranks.len() != 1 && config.ranks.len() != layer_count {
            return Err(Error::Input(format!(
                "{} ranks for {} layers",
                config.ranks.len(),
                layer_count
            )));
        }
        if config.algorithm == Algorithm::MFedLoRU
            && !config.nested_ranks.is_empty()
            && config.nested_ranks.len() != config.clients
        {
            return Err(Error::Input(format!(
                "{} nested rank entries for {} clients",
                config.nested_ranks.len(),
                config.clients
            )));
        }

        // Global split, then shard the training part.
        let (train_idx, global_test) = split_last_fraction(dataset.len(), 0.2);
        let shards = partition_train(&config, &dataset, &train_idx)?;

        // All parties start from the same seeded base model.
        let base = FactorizedModel::seeded(
            &config.model_dims,
            subsystem_seed(config.seed, "model-init", &[]),
        )?;
        let mut server_model = base.clone();
        if config.algorithm.low_rank() {
            attach_update_pairs(&mut server_model, &config, "server-pair", 0)?;
        }

        let mut clients = Vec::with_capacity(config.clients);
        for (id, shard) in shards.into_iter().enumerate() {
            let (local_train, local_test) = {
                let (train_pos, test_pos) = split_last_fraction(shard.len(), 0.2);
                (
                    train_pos.iter().map(|&p| shard[p]).collect::<Vec<_>>(),
                    test_pos.iter().map(|&p| shard[p]).collect::<Vec<_>>(),
                )
            };
            let mut model = base.clone();
            if config.algorithm.low_rank() {
                attach_update_pairs(&mut model, &config, "server-pair", 0)?;
            }
            if config.algorithm.personalized() {
                attach_personal_pairs(&mut model, &config, id)?;
            }
            let nested_ranks = if config.algorithm == Algorithm::MFedLoRU {
                config.nested_ranks.get(id).copied().flatten()
            } else {
                None
            };
            if let Some((ra, rb)) = nested_ranks {
                for (layer_idx, layer) in model.layers().iter().enumerate() {
                    let r = config.rank_for_layer(layer_idx, layer.d_in(), layer.d_out());
                    if ra >= r || rb >= r {
                        return Err(Error::Rank(format!(
                            "client {id} nested ranks ({ra}, {rb}) must be below rank {r}"
                        )));
                    }
                }
            }
            clients.push(ClientState {
                id,
                weight: local_train.len() as f64,
                model,
                nested_ranks,
                train_indices: local_train,
                test_indices: local_test,
            });
        }

        Ok(Self {
            server: ServerState {
                round: 0,
                algorithm: config.algorithm,
                accumulation_cycle: config.tau.max(1),
                total_rounds: config.total_rounds,
                model: server_model,
                accumulation_history: Vec::new(),
            },
            config,
            dataset,
            global_test,
            clients,
            ledger: CommLedger::default(),
        })
    }

    /// Parameter count of one pair transfer (all layers) plus biases.
    fn pair_transfer_params(&self) -> u64 {
        self.server
            .model
            .layers()
            .iter()
            .map(|l| {
                l.update
                    .as_ref()
                    .map(|u| comm_cost_lowrank(l.d_in(), l.d_out(), u.rank()))
                    .unwrap_or(0)
            })
            .sum()
    }

    fn bias_params(&self) -> u64 {
        self.server
            .model
            .layers()
            .iter()
            .map(|l| l.bias.len() as u64)
            .sum()
    }

    fn full_transfer_params(&self) -> u64 {
        self.server
            .model
            .layers()
            .iter()
            .map(|l| comm_cost_full(l.d_in(), l.d_out()))
            .sum()
    }

    fn nested_transfer_params(&self, ranks: (usize, usize)) -> u64 {
        self.server
            .model
            .layers()
            .iter()
            .map(|l| {
                let r = l.update.as_ref().map(|u| u.rank()).unwrap_or(0);
                comm_cost_nested(l.d_in(), l.d_out(), r, ranks.0, ranks.1)
            })
            .sum()
    }

    /// The shared global model (server view).
    pub fn global_model(&self) -> &FactorizedModel {
        &self.server.model
    }

    /// Global model with one client's personal factors attached.
    pub fn personalized_model(&self, client: &ClientState) -> FactorizedModel {
        let mut m = self.server.model.clone();
        for (layer, client_layer) in m.layers_mut().iter_mut().zip(client.model.layers()) {
            layer.personal = client_layer.personal.clone();
        }
        m
    }

    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::with_capacity(self.config.total_rounds);
        for _ in 0..self.config.total_rounds {
            records.push(self.run_round()?);
        }
        Ok(records)
    }

    /// One protocol round: distribute, train locally, aggregate, accumulate
    /// on cycle, evaluate.
    pub fn run_round(&mut self) -> Result<MetricsRecord> {
        let t = self.server.round + 1;
        let cfg = self.config.clone();
        let selected = sample_clients(cfg.clients, cfg.sampling_rate, t, cfg.seed);

        let opt_template = OptimizerState::new(
            cfg.lr,
            cfg.lr_min,
            cfg.momentum,
            cfg.cosine_cycle.unwrap_or(cfg.total_rounds).max(1),
        )?;
        let lr = opt_template.learning_rate(t - 1);

        // --- distribution (downlink) ---
        let per_client_down = if cfg.algorithm.low_rank() {
            self.pair_transfer_params() + self.bias_params()
        } else {
            self.full_transfer_params() + self.bias_params()
        };
        for &id in &selected {
            let server_layers: Vec<_> = self.server.model.layers().to_vec();
            let client = &mut self.clients[id];
            for (client_layer, server_layer) in
                client.model.layers_mut().iter_mut().zip(server_layers.iter())
            {
                client_layer.bias = server_layer.bias.clone();
                if cfg.algorithm.low_rank() {
                    client_layer.update = server_layer.update.clone();
                } else {
                    client_layer.base = server_layer.base.clone();
                }
            }
        }

        // --- local training ---
        let mut skipped = Vec::new();
        let mut trained: Vec<usize> = Vec::new();
        let mut losses: Vec<f64> = Vec::new();
        let mut uplinks: Vec<(usize, u64)> = Vec::new();
        for &id in &selected {
            if self.clients[id].train_indices.is_empty() {
                skipped.push(id);
                continue;
            }
            let loss = self.train_client(id, t, lr, &opt_template)?;
            let up = match cfg.algorithm {
                Algorithm::FedAvg | Algorithm::PFedLoRA1 | Algorithm::PFedLoRA2 => {
                    self.full_transfer_params() + self.bias_params()
                }
                Algorithm::MFedLoRU => match self.clients[id].nested_ranks {
                    Some(ranks) => self.nested_transfer_params(ranks) + self.bias_params(),
                    None => self.pair_transfer_params() + self.bias_params(),
                },
                _ => self.pair_transfer_params() + self.bias_params(),
            };
            uplinks.push((id, up));
            trained.push(id);
            losses.push(loss);
        }
        if trained.is_empty() {
            return Err(Error::Data(format!("round {t}: every selected client skipped")));
        }

        // --- aggregation ---
        let weights: Vec<f64> = trained.iter().map(|&id| self.clients[id].weight).collect();
        let total_weight: f64 = weights.iter().sum();
        self.aggregate_round(&trained, &weights, t)?;

        // --- accumulation ---
        let mut accum_downlink = 0u64;
        if cfg.algorithm.accumulates() && t % self.server.accumulation_cycle == 0 {
            accum_downlink = self.accumulate_all(t)?;
        }

        // --- bookkeeping ---
        let downlink = per_client_down * selected.len() as u64 + accum_downlink;
        let uplink: u64 = uplinks.iter().map(|(_, u)| u).sum();
        self.ledger.rounds.push(LedgerEntry {
            round: t,
            downlink_params: downlink,
            uplink_params: uplink,
            per_client: selected
                .iter()
                .map(|&id| {
                    let up = uplinks
                        .iter()
                        .find(|(i, _)| *i == id)
                        .map(|(_, u)| *u)
                        .unwrap_or(0);
                    (id, per_client_down, up)
                })
                .collect(),
        });

        let train_loss = trained
            .iter()
            .zip(losses.iter())
            .map(|(&id, &l)| self.clients[id].weight / total_weight * l)
            .sum();
        let test_acc = accuracy(&self.server.model, &self.dataset, &self.global_test)?;
        let personalized_acc = if cfg.algorithm.personalized() {
            Some(self.mean_personalized_accuracy()?)
        } else {
            None
        };

        self.server.round = t;
        Ok(MetricsRecord {
            round: t,
            train_loss,
            test_acc,
            personalized_acc,
            uplink_params: uplink,
            downlink_params: downlink,
            skipped_clients: skipped,
        })
    }

    fn train_client(
        &mut self,
        id: usize,
        round: usize,
        lr: f64,
        opt_template: &OptimizerState,
    ) -> Result<f64> {
        let cfg = &self.config;
        let algorithm = cfg.algorithm;
        let epochs = cfg.local_epochs;
        let epochs_personal = cfg.epochs_personal;
        let epochs_global = cfg.epochs_global;
        let batch = cfg.batch_size;
        let seed = cfg.seed;
        let alpha_a = cfg.alpha_nested_a;
        let alpha_b = cfg.alpha_nested_b;
        let init_scale = cfg.init_scale;
        let ranks: Vec<(usize, usize, usize)> = self
            .server
            .model
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    cfg.rank_for_layer(i, l.d_in(), l.d_out()),
                    l.d_in(),
                    l.d_out(),
                )
            })
            .collect();
        let client = &mut self.clients[id];
        let dataset = &self.dataset;
        let indices = client.train_indices.clone();
        let mut main_rng = subsystem_rng(seed, "shuffle", &[id as u64, round as u64]);

        match algorithm {
            Algorithm::FedAvg => {
                let mut opt = opt_template.clone();
                train_epochs(
                    &mut client.model,
                    &mut opt,
                    dataset,
                    &indices,
                    TrainSelector::FullWeight,
                    epochs,
                    batch,
                    lr,
                    &mut main_rng,
                )
            }
            Algorithm::FedLoRA | Algorithm::FedLoRU => {
                let mut opt = opt_template.clone();
                train_epochs(
                    &mut client.model,
                    &mut opt,
                    dataset,
                    &indices,
                    TrainSelector::Update,
                    epochs,
                    batch,
                    lr,
                    &mut main_rng,
                )
            }
            Algorithm::PFedLoRU => {
                let mut personal_rng =
                    subsystem_rng(seed, "shuffle-personal", &[id as u64, round as u64]);
                let mut opt = opt_template.clone();
                train_epochs(
                    &mut client.model,
                    &mut opt,
                    dataset,
                    &indices,
                    TrainSelector::Personal,
                    epochs_personal,
                    batch,
                    lr,
                    &mut personal_rng,
                )?;
                let mut opt = opt_template.clone();
                train_epochs(
                    &mut client.model,
                    &mut opt,
                    dataset,
                    &indices,
                    TrainSelector::Update,
                    epochs_global,
                    batch,
                    lr,
                    &mut main_rng,
                )
            }
            Algorithm::MFedLoRU => {
                match client.nested_ranks {
                    None => {
                        let mut opt = opt_template.clone();
                        train_epochs(
                            &mut client.model,
                            &mut opt,
                            dataset,
                            &indices,
                            TrainSelector::Update,
                            epochs,
                            batch,
                            lr,
                            &mut main_rng,
                        )
                    }
                    Some((ra, rb)) => {
                        // Fresh nested factors each round, zero product at start.
                        for (layer_idx, layer) in client.model.layers_mut().iter_mut().enumerate()
                        {
                            let (r, d_in, d_out) = ranks[layer_idx];
                            let scale = init_scale.unwrap_or_else(|| default_init_scale(r));
                            layer.nested = Some(NestedLowRankPair::init_random(
                                d_in,
                                d_out,
                                r,
                                ra,
                                rb,
                                alpha_a,
                                alpha_b,
                                scale,
                                subsystem_seed(
                                    seed,
                                    "nested-init",
                                    &[id as u64, round as u64, layer_idx as u64],
                                ),
                            )?);
                        }
                        let mut opt = opt_template.clone();
                        let loss = train_epochs(
                            &mut client.model,
                            &mut opt,
                            dataset,
                            &indices,
                            TrainSelector::Nested,
                            epochs,
                            batch,
                            lr,
                            &mut main_rng,
                        )?;
                        Ok(loss)
                    }
                }
            }
            Algorithm::PFedLoRA1 => {
                let mut personal_rng =
                    subsystem_rng(seed, "shuffle-personal", &[id as u64, round as u64]);
                let mut opt = opt_template.clone();
                train_epochs(
                    &mut client.model,
                    &mut opt,
                    dataset,
                    &indices,
                    TrainSelector::Personal,
                    epochs_personal,
                    batch,
                    lr,
                    &mut personal_rng,
                )?;
                let mut opt = opt_template.clone();
                train_epochs(
                    &mut client.model,
                    &mut opt,
                    dataset,
                    &indices,
                    TrainSelector::FullWeight,
                    epochs_global,
                    batch,
                    lr,
                    &mut main_rng,
                )
            }
            Algorithm::PFedLoRA2 => {
                let mut opt = opt_template.clone();
                train_epochs(
                    &mut client.model,
                    &mut opt,
                    dataset,
                    &indices,
                    TrainSelector::FullAndPersonal,
                    epochs_personal + epochs_global,
                    batch,
                    lr,
                    &mut main_rng,
                )
            }
        }
    }

    fn aggregate_round(&mut self, trained: &[usize], weights: &[f64], _round: usize) -> Result<()> {
        let layer_count = self.server.model.layers().len();
        for layer_idx in 0..layer_count {
            let biases: Vec<Vec<f64>> = trained
                .iter()
                .map(|&id| self.clients[id].model.layers()[layer_idx].bias.clone())
                .collect();
            let new_bias = aggregate_biases(&biases, weights);

            if self.config.algorithm.low_rank() {
                let pairs: Vec<LowRankPair> = trained
                    .iter()
                    .map(|&id| {
                        let layer = &self.clients[id].model.layers()[layer_idx];
                        let pair = layer.update.clone().ok_or_else(|| {
                            Error::Input("low-rank algorithm without update pair".into())
                        })?;
                        // mFedLoRU: recover the full pair from nested factors.
                        match (&layer.nested, self.clients[id].nested_ranks) {
                            (Some(nested), Some(_)) => crate::lowrank::recover_nested(&pair, nested),
                            _ => Ok(pair),
                        }
                    })
                    .collect::<Result<_>>()?;
                let aggregated = aggregate(&pairs, weights)?;
                let server_layer = &mut self.server.model.layers_mut()[layer_idx];
                server_layer.update = Some(aggregated);
                server_layer.bias = new_bias;
            } else {
                let bases: Vec<Matrix> = trained
                    .iter()
                    .map(|&id| self.clients[id].model.layers()[layer_idx].base.clone())
                    .collect();
                let aggregated = aggregate_matrices(&bases, weights)?;
                let server_layer = &mut self.server.model.layers_mut()[layer_idx];
                server_layer.base = aggregated;
                server_layer.bias = new_bias;
            }
        }
        // Nested factors are one-shot per round; drop them after recovery.
        for &id in trained {
            if self.clients[id].nested_ranks.is_some() {
                for layer in self.clients[id].model.layers_mut() {
                    layer.nested = None;
                }
            }
        }
        Ok(())
    }

    /// Folds the aggregated pair into every client's base (and the server's),
    /// then re-initializes the shared pair. Returns the extra downlink cost
    /// of broadcasting the pair to all clients.
    fn accumulate_all(&mut self, round: usize) -> Result<u64> {
        let pairs: Vec<LowRankPair> = self
            .server
            .model
            .layers()
            .iter()
            .map(|l| l.update.clone().expect("accumulating algorithm has pairs"))
            .collect();
        self.server.accumulation_history.push(pairs.clone());

        let mut fresh: Vec<LowRankPair> = Vec::with_capacity(pairs.len());
        for (layer_idx, pair) in pairs.iter().enumerate() {
            let next = match self.config.init_strategy {
                InitStrategy::Momentum => LowRankPair::init_momentum(pair),
                InitStrategy::Random => {
                    let scale = self
                        .config
                        .init_scale
                        .unwrap_or_else(|| default_init_scale(pair.rank()));
                    LowRankPair::init_random(
                        pair.rows(),
                        pair.cols(),
                        pair.rank(),
                        pair.alpha(),
                        scale,
                        subsystem_seed(
                            self.config.seed,
                            "pair-reinit",
                            &[round as u64, layer_idx as u64],
                        ),
                    )?
                }
            };
            fresh.push(next);
        }

        for client in self.clients.iter_mut() {
            for ((layer, pair), next) in client
                .model
                .layers_mut()
                .iter_mut()
                .zip(pairs.iter())
                .zip(fresh.iter())
            {
                layer.base = pair.accumulate(&layer.base)?;
                layer.update = Some(next.clone());
            }
        }
        for ((layer, pair), next) in self
            .server
            .model
            .layers_mut()
            .iter_mut()
            .zip(pairs.iter())
            .zip(fresh.iter())
        {
            layer.base = pair.accumulate(&layer.base)?;
            layer.update = Some(next.clone());
        }
        Ok(self.pair_transfer_params() * self.config.clients as u64)
    }

    /// Unweighted mean accuracy of each client's personalized model on its
    /// own held-out slice; clients without a test slice are skipped.
    pub fn mean_personalized_accuracy(&self) -> Result<f64> {
        let mut accs = Vec::new();
        for client in &self.clients {
            if client.test_indices.is_empty() {
                continue;
            }
            let model = self.personalized_model(client);
            accs.push(accuracy(&model, &self.dataset, &client.test_indices)?);
        }
        if accs.is_empty() {
            return Err(Error::Data("no client has a personalized test slice".into()));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Mean accuracy of the shared global model over the same per-client
    /// test slices used for personalized evaluation.
    pub fn mean_global_accuracy_on_client_shards(&self) -> Result<f64> {
        let mut accs = Vec::new();
        for client in &self.clients {
            if client.test_indices.is_empty() {
                continue;
            }
            accs.push(accuracy(
                &self.server.model,
                &self.dataset,
                &client.test_indices,
            )?);
        }
        if accs.is_empty() {
            return Err(Error::Data("no client has a test slice".into()));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

fn partition_train(
    config: &SimulationConfig,
    dataset: &Dataset,
    train_idx: &[usize],
) -> Result<Vec<Vec<usize>>> {
    match config.partition {
        PartitionSpec::Iid => {
            use rand::seq::SliceRandom;
            let mut order = train_idx.to_vec();
            let mut rng = subsystem_rng(config.seed, "iid-partition", &[]);
            order.shuffle(&mut rng);
            let mut shards = vec![Vec::new(); config.clients];
            for (i, idx) in order.into_iter().enumerate() {
                shards[i % config.clients].push(idx);
            }
            for s in shards.iter_mut() {
                s.sort_unstable();
            }
            Ok(shards)
        }
        PartitionSpec::Dirichlet { alpha } => {
            let labels: Vec<usize> = train_idx.iter().map(|&i| dataset.labels()[i]).collect();
            let partition = dirichlet_partition(
                &labels,
                config.clients,
                alpha,
                subsystem_seed(config.seed, "dirichlet-partition", &[]),
            )?;
            Ok(partition
                .shards()
                .iter()
                .map(|shard| shard.iter().map(|&p| train_idx[p]).collect())
                .collect())
        }
    }
}

fn attach_update_pairs(
    model: &mut FactorizedModel,
    config: &SimulationConfig,
    label: &str,
    index: u64,
) -> Result<()> {
    for (layer_idx, layer) in model.layers_mut().iter_mut().enumerate() {
        let (m, n) = (layer.base.rows(), layer.base.cols());
        let r = config.rank_for_layer(layer_idx, m, n);
        let scale = config.init_scale.unwrap_or_else(|| default_init_scale(r));
        layer.update = Some(LowRankPair::init_random(
            m,
            n,
            r,
            config.alpha,
            scale,
            subsystem_seed(config.seed, label, &[index, layer_idx as u64]),
        )?);
    }
    Ok(())
}

fn attach_personal_pairs(
    model: &mut FactorizedModel,
    config: &SimulationConfig,
    client_id: usize,
) -> Result<()> {
    for (layer_idx, layer) in model.layers_mut().iter_mut().enumerate() {
        let (m, n) = (layer.base.rows(), layer.base.cols());
        let r = config.rank_personal.min(m.min(n)).max(1);
        let scale = config.init_scale.unwrap_or_else(|| default_init_scale(r));
        layer.personal = Some(LowRankPair::init_random(
            m,
            n,
            r,
            config.alpha_personal,
            scale,
            subsystem_seed(
                config.seed,
                "personal-pair",
                &[client_id as u64, layer_idx as u64],
            ),
        )?);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics files: a schema-version header line followed by line-delimited
// JSON records.
// ---------------------------------------------------------------------------

pub const METRICS_SCHEMA: &str = "loru.metrics.v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsHeader {
    pub schema: String,
    pub algorithm: String,
    pub seed: u64,
}

pub fn metrics_to_string(header: &MetricsHeader, records: &[MetricsRecord]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a metrics file; errors name the offending line (1-based).
pub fn parse_metrics(text: &str) -> Result<(MetricsHeader, Vec<MetricsRecord>)> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty metrics file (line 1)".into()))?;
    let header: MetricsHeader = serde_json::from_str(first)
        .map_err(|e| Error::Parse(format!("bad metrics header on line 1: {e}")))?;
    if header.schema != METRICS_SCHEMA {
        return Err(Error::Parse(format!(
            "unsupported metrics schema {:?} on line 1",
            header.schema
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("bad metrics record on line {}: {e}", i + 1)))?;
        records.push(record);
    }
    Ok((header, records))
}
