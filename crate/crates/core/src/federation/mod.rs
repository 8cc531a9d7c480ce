//! Client and server sides of the round protocol.
//!
//! Round 1 is a bootstrap in which every client trains once so the server can
//! build its similarity matrices, global prototypes and global ratio. Every
//! later round selects clients (and, for BMSFed, their modalities), trains
//! them in parallel, aggregates per parameter group and evaluates.

mod client;
mod server;

use std::fmt;
use std::str::FromStr;

pub use client::{
    client_loss, epoch_batches, local_train_multi, local_train_uni, Client, LocalConfig, LocalUpdate, MeMode, Role,
    UniEnhancement,
};
pub use server::{aggregate_models, bootstrap_round, evaluate, plan_round, run_round, Accuracies, ServerState};

use crate::data::{apply_incongruity, generate, partition_dirichlet, partition_iid, BimodalDataset, DataSpec};
use crate::model::{ModelParams, ModelShape};
use crate::numkit::{Purpose, RngStream};
use crate::{Error, Result};

/// Multiplier applied to the learning rate from `lr_decay_round` on.
pub const LR_DECAY_FACTOR: f64 = 0.1;

/// Client-selection and training strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Dual-matrix modality selection with the modal-enhancement loss.
    BmsFed,
    /// Uniform random clients, plain CE.
    FedAvg,
    /// FedAvg with random per-client modality dropping.
    FedAvgDrop,
    /// Power-of-choice: largest-loss clients from a random half.
    PowD,
    /// Stochastic greedy on the multi-modal gradient matrix.
    DivFl,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::BmsFed,
        Method::FedAvg,
        Method::FedAvgDrop,
        Method::PowD,
        Method::DivFl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BmsFed => "bmsfed",
            Method::FedAvg => "fedavg",
            Method::FedAvgDrop => "fedavg_drop",
            Method::PowD => "powd",
            Method::DivFl => "divfl",
        }
    }

    pub fn uses_me(self) -> bool {
        self == Method::BmsFed
    }

    /// Whether the server maintains gradient similarity matrices.
    pub fn uses_matrices(self) -> bool {
        matches!(self, Method::BmsFed | Method::DivFl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Knobs of the round protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub method: Method,
    pub seed: u64,
    pub budget: usize,
    pub s_sample: usize,
    pub chi: f64,
    pub drop_prob: f64,
    pub lr: f64,
    /// First round trained with the decayed rate; 0 disables decay.
    pub lr_decay_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
}

/// Per-round record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub acc_multi: f64,
    pub acc_uni_a: f64,
    pub acc_uni_i: f64,
    pub global_ratio: f64,
    pub n_multi: usize,
    pub n_uni: usize,
    pub train_loss: f64,
}

/// Full description of one simulated campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub data: DataSpec,
    pub test_per_class: usize,
    pub clients: usize,
    /// Dirichlet concentration; `None` splits IID.
    pub alpha: Option<f64>,
    pub fraction_uni: f64,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub rounds: usize,
    pub federation: FederationConfig,
}

/// A seeded federation: data, clients, server and test set.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimulationConfig,
    clients: Vec<Client>,
    server: ServerState,
    test: BimodalDataset,
}

impl Simulation {
    pub fn new(config: SimulationConfig) -> Result<Self> {
        let fed = &config.federation;
        if config.clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if fed.budget == 0 || fed.budget > config.clients {
            return Err(Error::Config(format!(
                "budget {} must be in 1..={}",
                fed.budget, config.clients
            )));
        }
        let seed = fed.seed;
        let train = generate(&config.data, &mut RngStream::keyed(seed, Purpose::TrainData, 0, 0))?;
        let test_spec = DataSpec {
            per_class: config.test_per_class,
            ..config.data.clone()
        };
        let test = generate(&test_spec, &mut RngStream::keyed(seed, Purpose::TestData, 0, 0))?;

        let mut part_rng = RngStream::keyed(seed, Purpose::Partition, 0, 0);
        let plan = match config.alpha {
            Some(alpha) => partition_dirichlet(&train.labels, config.clients, alpha, &mut part_rng)?,
            None => partition_iid(train.len(), config.clients, &mut part_rng)?,
        };
        let plan = apply_incongruity(
            plan,
            config.fraction_uni,
            &mut RngStream::keyed(seed, Purpose::Incongruity, 0, 0),
        )?;
        let clients = plan
            .assignment
            .iter()
            .zip(&plan.masks)
            .enumerate()
            .map(|(k, (idx, &mask))| Client::from_dataset(k, &train, idx, mask))
            .collect::<Result<Vec<_>>>()?;

        let shape = ModelShape {
            dim_a: config.data.dim_a,
            dim_i: config.data.dim_i,
            hidden: config.hidden.clone(),
            embedding_dim: config.embedding_dim,
            num_classes: config.data.num_classes,
        };
        let model = ModelParams::init(&shape, &mut RngStream::keyed(seed, Purpose::ModelInit, 0, 0))?;
        let server = ServerState::new(model, clients.len());
        Ok(Simulation {
            config,
            clients,
            server,
            test,
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn test_set(&self) -> &BimodalDataset {
        &self.test
    }

    /// Runs the next round (the bootstrap if none has run yet).
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let fed = &self.config.federation;
        if self.server.round == 0 {
            bootstrap_round(&mut self.server, &self.clients, fed, &self.test)
        } else {
            run_round(&mut self.server, &self.clients, fed, &self.test)
        }
    }

    /// Runs every configured round and returns their metrics in order.
    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        let remaining = self.config.rounds.saturating_sub(self.server.round);
        (0..remaining).map(|_| self.step()).collect()
    }
}
