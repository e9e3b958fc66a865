//! Mini-batch SGD training with a noise plan, and split evaluation.
//!
//! Every stream the trainer consumes is derived from an explicit path of
//! (worker, global epoch, step) indices. A centralized run is worker 0 at
//! epoch offset 0; federated clients train the same loop under their own
//! worker index and a per-round epoch offset. That shared schedule is what
//! makes a single-client, zero-noise federated run reduce to centralized
//! training bit for bit.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    argmax_accuracy, cross_entropy_int, one_hot, softmax_cross_entropy, EvalMetrics, HiddenNoise,
    Mode, Model,
};
use crate::noise::{
    apply_input_noise, perturb_gradients, perturb_labels, perturb_weights, Mechanism, NoisePlan,
};
use crate::rng::{derive_seed, RngStream};
use crate::tensor::Tensor;

const STREAM_SHUFFLE: u64 = 0x40;
const STREAM_MODEL: u64 = 0x41;
const STREAM_NOISE: u64 = 0x42;
const STREAM_LABELS: u64 = 0x43;

const SITE_INPUT: u64 = 0;
const SITE_WEIGHTS: u64 = 1;
const SITE_GRADIENTS: u64 = 2;

const EVAL_BATCH: usize = 128;

fn default_batch_size() -> usize {
    64
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    10
}

/// Optimizer and schedule settings. Defaults: batch 64, learning rate 0.001,
/// momentum 0.9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            epochs: default_epochs(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Metrics for one epoch: running train accuracy/loss over the epoch's
/// batches, eval-mode validation metrics afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_acc: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
}

/// Final eval-mode metrics on the test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalStats {
    pub test_acc: f64,
    pub test_loss: f64,
}

/// Everything a training run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub per_epoch: Vec<EpochStats>,
    pub final_test: FinalStats,
    pub sigma: f64,
    pub mechanism: Mechanism,
    pub seed: u64,
}

impl TrainReport {
    /// Per-epoch CSV: `epoch,train_acc,train_loss,val_acc,val_loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_acc,train_loss,val_acc,val_loss\n");
        for (e, s) in self.per_epoch.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e + 1,
                s.train_acc,
                s.train_loss,
                s.val_acc,
                s.val_loss
            ));
        }
        out
    }

    pub fn validation_series(&self) -> Vec<f64> {
        self.per_epoch.iter().map(|s| s.val_acc).collect()
    }
}

/// Worker identity and epoch offset inside the global schedule.
#[derive(Debug, Clone, Copy, Default)]
pub struct Schedule {
    pub worker: u64,
    pub epoch_offset: usize,
}

/// Train on the dataset's train split with the given noise plan. Epoch
/// metrics use the running train accuracy/loss and eval-mode validation;
/// the final entry evaluates the test split.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    config: &TrainConfig,
    plan: &NoisePlan,
) -> Result<TrainReport> {
    if data.splits.val.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    if data.splits.test.is_empty() {
        return Err(Error::Empty("test split".into()));
    }
    let per_epoch = train_segment(
        model,
        data,
        &data.splits.train,
        config,
        plan,
        Schedule::default(),
        config.epochs,
    )?;
    let test = evaluate(model, data, &data.splits.test)?;
    Ok(TrainReport {
        per_epoch,
        final_test: FinalStats {
            test_acc: test.accuracy,
            test_loss: test.loss,
        },
        sigma: plan.sigma,
        mechanism: plan.mechanism,
        seed: config.seed,
    })
}

/// Run `epochs` epochs of shuffled mini-batch SGD over `train_indices`
/// under the given schedule. The index list is canonicalized (sorted)
/// before the per-epoch shuffles, so shard ordering cannot leak into the
/// batch sequence.
pub fn train_segment(
    model: &mut Model,
    data: &Dataset,
    train_indices: &[usize],
    config: &TrainConfig,
    plan: &NoisePlan,
    schedule: Schedule,
    epochs: usize,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    plan.validate()?;
    if train_indices.is_empty() {
        return Err(Error::Empty("train split".into()));
    }
    let classes = model.num_classes();
    let mut order = train_indices.to_vec();
    order.sort_unstable();

    // Targets table aligned with `order`; label noise is applied once,
    // before training, and the corrupted targets stay fixed.
    let labels: Vec<usize> = order.iter().map(|&i| data.labels[i]).collect();
    let mut targets = one_hot(&labels, classes);
    if plan.mechanism == Mechanism::Labels && plan.sigma > 0.0 {
        let mut stream = RngStream::from_seed(derive_seed(
            plan.base_seed,
            &[STREAM_LABELS, schedule.worker],
        ));
        targets = perturb_labels(&targets, plan.sigma, &mut stream, plan.label_clip)?;
    }

    let mut stats = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let global_epoch = (schedule.epoch_offset + epoch) as u64;
        let mut perm: Vec<usize> = (0..order.len()).collect();
        RngStream::from_seed(derive_seed(
            config.seed,
            &[STREAM_SHUFFLE, schedule.worker, global_epoch],
        ))
        .shuffle(&mut perm);

        let mut loss_sum = 0.0;
        let mut correct_sum = 0.0;
        let mut seen = 0usize;
        for (step, chunk) in perm.chunks(config.batch_size).enumerate() {
            let step_u = step as u64;
            let batch_indices: Vec<usize> = chunk.iter().map(|&p| order[p]).collect();
            let batch = data.gather(&batch_indices);
            let batch_labels = data.labels_for(&batch_indices);
            let mut batch_targets = Vec::with_capacity(chunk.len() * classes);
            for &p in chunk {
                batch_targets.extend_from_slice(&targets.data()[p * classes..(p + 1) * classes]);
            }
            let batch_targets = Tensor::from_vec(&[chunk.len(), classes], batch_targets)?;

            let model_rng = RngStream::from_seed(derive_seed(
                config.seed,
                &[STREAM_MODEL, schedule.worker, global_epoch, step_u],
            ));
            let noise_seed = derive_seed(
                plan.base_seed,
                &[STREAM_NOISE, schedule.worker, global_epoch, step_u],
            );

            let input = if plan.mechanism == Mechanism::Input && plan.sigma > 0.0 {
                let mut stream = RngStream::from_seed(derive_seed(noise_seed, &[SITE_INPUT]));
                apply_input_noise(&batch, plan.sigma, &mut stream)?
            } else {
                batch
            };

            if plan.mechanism == Mechanism::Weights && plan.sigma > 0.0 {
                let mut stream = RngStream::from_seed(derive_seed(noise_seed, &[SITE_WEIGHTS]));
                perturb_weights(model, plan.sigma, &mut stream)?;
            }

            let hidden = if plan.mechanism == Mechanism::HiddenLayers && plan.sigma > 0.0 {
                Some(HiddenNoise {
                    sigma: plan.sigma,
                    rng: RngStream::from_seed(noise_seed),
                })
            } else {
                None
            };

            let fwd = model
                .forward_pure(&input, Mode::Train, &model_rng, hidden.as_ref())
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch: step },
                    other => other,
                })?;
            let (batch_loss, _) =
                softmax_cross_entropy(fwd.logits.data(), batch_targets.data(), classes);
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: step });
            }

            // Running train metrics, always against the true labels.
            loss_sum += batch_loss * chunk.len() as f64;
            correct_sum +=
                argmax_accuracy(fwd.logits.data(), &batch_labels, classes) * chunk.len() as f64;
            seen += chunk.len();

            let mut grads = model.backward(&fwd, &batch_targets)?;
            if plan.mechanism == Mechanism::Gradients && plan.sigma > 0.0 {
                let mut stream = RngStream::from_seed(derive_seed(noise_seed, &[SITE_GRADIENTS]));
                perturb_gradients(&mut grads, plan.sigma, &mut stream)?;
            }
            model.sgd_step(&grads, config.learning_rate, config.momentum);
            model.commit_bn_updates(&fwd);
        }

        let val = evaluate(model, data, &data.splits.val)?;
        stats.push(EpochStats {
            train_acc: correct_sum / seen as f64,
            train_loss: loss_sum / seen as f64,
            val_acc: val.accuracy,
            val_loss: val.loss,
        });
    }
    Ok(stats)
}

/// Eval-mode accuracy and mean cross-entropy over a split.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize]) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let classes = model.num_classes();
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = data.gather(chunk);
        let labels = data.labels_for(chunk);
        let logits = model.infer(&batch)?;
        loss_sum += cross_entropy_int(logits.data(), &labels, classes) * chunk.len() as f64;
        correct += argmax_accuracy(logits.data(), &labels, classes) * chunk.len() as f64;
    }
    Ok(EvalMetrics {
        accuracy: correct / indices.len() as f64,
        loss: loss_sum / indices.len() as f64,
    })
}
