//! Simulated federated learning: horizontal partitioning, local noisy
//! training, FedAvg aggregation, multi-round orchestration.
//!
//! Clients are stateless across rounds: each round a client builds a fresh
//! model, loads the broadcast weight set (parameters plus batch-norm moving
//! statistics), trains its local epochs with the Gaussian-hidden-layer plan,
//! and returns the resulting weights with its sample count. Momentum buffers
//! never leave a client. Within a round clients run as independent parallel
//! tasks; aggregation is a strict barrier.
//!
//! Local training runs under worker index = client index at epoch offset
//! `round * local_epochs`; a single client at sigma 0 therefore replays
//! centralized training exactly.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_model, EvalMetrics, Model};
use crate::noise::{Mechanism, NoisePlan};
use crate::par;
use crate::rng::{derive_seed, RngStream};
use crate::spec::ModelSpec;
use crate::tensor::Tensor;
use crate::train::{evaluate, train_segment, Schedule, TrainConfig};

const STREAM_PARTITION: u64 = 0x50;
const STREAM_FED_NOISE: u64 = 0x51;
const STREAM_UPLOAD: u64 = 0x52;

fn default_num_clients() -> usize {
    3
}
fn default_rounds() -> usize {
    20
}
fn default_local_epochs() -> usize {
    4
}

/// Federated experiment settings. `per_client_sigma` holds either one value
/// shared by all clients or one value per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedConfig {
    #[serde(default = "default_num_clients")]
    pub num_clients: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    pub per_client_sigma: Vec<f64>,
    pub train_config: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    /// Optional extra perturbation of the weights a client uploads, on top
    /// of the training-time noise. Off by default; the reference protocol
    /// perturbs hidden activations during local training only.
    #[serde(default)]
    pub upload_sigma: Option<f64>,
}

impl FederatedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidArgument("num_clients must be >= 1".into()));
        }
        if !(self.per_client_sigma.len() == 1 || self.per_client_sigma.len() == self.num_clients) {
            return Err(Error::InvalidArgument(format!(
                "per_client_sigma must have 1 or {} entries, got {}",
                self.num_clients,
                self.per_client_sigma.len()
            )));
        }
        if self.per_client_sigma.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidArgument("client sigma must be >= 0".into()));
        }
        if let Some(sigma) = self.upload_sigma {
            if sigma < 0.0 {
                return Err(Error::NegativeSigma(sigma));
            }
        }
        self.train_config.validate()
    }

    pub fn sigma_for(&self, client: usize) -> f64 {
        if self.per_client_sigma.len() == 1 {
            self.per_client_sigma[0]
        } else {
            self.per_client_sigma[client]
        }
    }
}

/// Per-client metrics inside one round (eval mode on the client's shard).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientStats {
    pub local_acc: f64,
    pub local_loss: f64,
}

/// Global-model metrics after one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub per_client: Vec<ClientStats>,
}

/// Parameters in canonical layer order plus the producing shard's size.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub tensors: Vec<Tensor>,
    pub sample_count: usize,
}

impl WeightSet {
    pub fn from_model(model: &Model, sample_count: usize) -> Self {
        WeightSet {
            tensors: model.export_weights(),
            sample_count,
        }
    }

    pub fn congruent(&self, other: &WeightSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn bits_eq(&self, other: &WeightSet) -> bool {
        self.congruent(other)
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|(a, b)| a.bits_eq(b))
    }
}

/// Split `indices` into `k` disjoint shards of near-equal size by seeded
/// shuffle (horizontal partitioning: rows, not features). Sizes differ by
/// at most one, larger shards first.
pub fn partition(indices: &[usize], k: usize, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if k > indices.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} samples across {k} clients",
            indices.len()
        )));
    }
    let mut shuffled = indices.to_vec();
    rng.shuffle(&mut shuffled);
    let base = shuffled.len() / k;
    let remainder = shuffled.len() % k;
    let mut shards = Vec::with_capacity(k);
    let mut offset = 0;
    for i in 0..k {
        let size = base + usize::from(i < remainder);
        shards.push(shuffled[offset..offset + size].to_vec());
        offset += size;
    }
    Ok(shards)
}

/// One client's work for one round.
#[derive(Debug, Clone)]
pub struct LocalTrainJob<'a> {
    pub data: &'a Dataset,
    pub spec: &'a ModelSpec,
    pub shard: &'a [usize],
    pub config: &'a TrainConfig,
    /// Hidden-layer noise level for this client.
    pub sigma: f64,
    /// Base seed for the client's noise streams.
    pub noise_seed: u64,
    /// Worker index in the global schedule (the client index).
    pub worker: u64,
    /// Global epoch offset (round * local_epochs).
    pub epoch_offset: usize,
    pub local_epochs: usize,
}

/// Train a fresh client model from the broadcast weights and return the
/// updated weight set tagged with the shard size. Momentum and batch-norm
/// state start clean; the broadcast overwrites parameters and moving
/// statistics.
pub fn local_train(global_weights: &WeightSet, job: &LocalTrainJob) -> Result<WeightSet> {
    let (ws, _) = local_train_with_stats(global_weights, job)?;
    Ok(ws)
}

/// `local_train` plus eval-mode metrics of the trained client model on its
/// own shard.
pub fn local_train_with_stats(
    global_weights: &WeightSet,
    job: &LocalTrainJob,
) -> Result<(WeightSet, ClientStats)> {
    if job.shard.is_empty() {
        return Err(Error::Empty("client shard".into()));
    }
    let mut model = build_model(job.spec, 0)?;
    model.load_weights(&global_weights.tensors)?;
    if job.local_epochs > 0 {
        let plan = NoisePlan::new(Mechanism::HiddenLayers, job.sigma, job.noise_seed);
        train_segment(
            &mut model,
            job.data,
            job.shard,
            job.config,
            &plan,
            Schedule {
                worker: job.worker,
                epoch_offset: job.epoch_offset,
            },
            job.local_epochs,
        )?;
    }
    let stats = local_eval(&model, job.data, job.shard)?;
    Ok((
        WeightSet::from_model(&model, job.shard.len()),
        ClientStats {
            local_acc: stats.accuracy,
            local_loss: stats.loss,
        },
    ))
}

fn local_eval(model: &Model, data: &Dataset, shard: &[usize]) -> Result<EvalMetrics> {
    evaluate(model, data, shard)
}

/// Sample-count-weighted elementwise mean of congruent weight sets.
/// Batch-norm moving statistics average exactly like parameters.
///
/// Computed in delta form around the first update,
/// `m = w_0 + sum_i weight_i * (w_i - w_0)`, which makes aggregation of
/// identical updates exact bit for bit.
pub fn fedavg(updates: &[WeightSet]) -> Result<WeightSet> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Empty("update list".into()))?;
    for (i, u) in updates.iter().enumerate().skip(1) {
        if !first.congruent(u) {
            for (t, (a, b)) in first.tensors.iter().zip(u.tensors.iter()).enumerate() {
                if a.shape() != b.shape() {
                    return Err(Error::InvalidArgument(format!(
                        "update {i} tensor {t}: shape {:?} != {:?}",
                        b.shape(),
                        a.shape()
                    )));
                }
            }
            return Err(Error::InvalidArgument(format!(
                "update {i} has {} tensors, expected {}",
                u.tensors.len(),
                first.tensors.len()
            )));
        }
    }
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    let weight_of = |u: &WeightSet, k: usize| -> f64 {
        if total == 0 {
            1.0 / k as f64
        } else {
            u.sample_count as f64 / total as f64
        }
    };
    // Delta form: start from w_0 and add weighted differences.
    let mut tensors = first.tensors.clone();
    for (t, acc) in tensors.iter_mut().enumerate() {
        let base = first.tensors[t].data().to_vec();
        for update in updates.iter().skip(1) {
            let w = weight_of(update, updates.len());
            for (a, (s, b)) in acc
                .data_mut()
                .iter_mut()
                .zip(update.tensors[t].data().iter().zip(base.iter()))
            {
                *a += w * (s - b);
            }
        }
    }
    Ok(WeightSet {
        tensors,
        sample_count: total,
    })
}

/// Run the full federated loop: broadcast, parallel local training, FedAvg,
/// global evaluation on the test split. Returns the per-round records and
/// the final global model.
pub fn run_rounds(
    config: &FederatedConfig,
    data: &Dataset,
    spec: &ModelSpec,
) -> Result<(Vec<RoundRecord>, Model)> {
    config.validate()?;
    if data.splits.test.is_empty() {
        return Err(Error::Empty("test split".into()));
    }
    let mut global = build_model(spec, config.train_config.seed)?;
    let shards = partition(
        &data.splits.train,
        config.num_clients,
        &mut RngStream::from_seed(derive_seed(config.seed, &[STREAM_PARTITION])),
    )?;
    let noise_seed = derive_seed(config.seed, &[STREAM_FED_NOISE]);

    let mut records = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let broadcast = WeightSet::from_model(&global, 0);
        let results = par::map_collect(config.num_clients, |client| {
            let job = LocalTrainJob {
                data,
                spec,
                shard: &shards[client],
                config: &config.train_config,
                sigma: config.sigma_for(client),
                noise_seed,
                worker: client as u64,
                epoch_offset: round * config.local_epochs,
                local_epochs: config.local_epochs,
            };
            local_train_with_stats(&broadcast, &job)
        });
        let mut updates = Vec::with_capacity(config.num_clients);
        let mut per_client = Vec::with_capacity(config.num_clients);
        for (client, result) in results.into_iter().enumerate() {
            let (mut ws, stats) = result?;
            if let Some(sigma) = config.upload_sigma {
                if sigma > 0.0 {
                    let mut stream = RngStream::from_seed(derive_seed(
                        noise_seed,
                        &[STREAM_UPLOAD, round as u64, client as u64],
                    ));
                    for t in ws.tensors.iter_mut() {
                        for v in t.data_mut().iter_mut() {
                            *v += sigma * stream.normal();
                        }
                    }
                }
            }
            updates.push(ws);
            per_client.push(stats);
        }
        let aggregated = fedavg(&updates)?;
        global.load_weights(&aggregated.tensors)?;
        let test = evaluate(&global, data, &data.splits.test)?;
        records.push(RoundRecord {
            round_index: round,
            global_accuracy: test.accuracy,
            global_loss: test.loss,
            per_client,
        });
    }
    Ok((records, global))
}
