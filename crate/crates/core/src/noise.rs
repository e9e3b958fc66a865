//! Noise-infusion mechanisms and the variance-composition algebra.
//!
//! Five mechanisms perturb training at different points: input images,
//! hidden activations (before every convolution except the first), stored
//! weights (persistently, so the offsets accumulate across steps), fresh
//! gradients each step, and labels (one-time corruption before training).
//! Evaluation is never touched by any of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, Mode, Model};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Where the noise goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    None,
    Input,
    HiddenLayers,
    Weights,
    Gradients,
    Labels,
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Input => "input",
            Mechanism::HiddenLayers => "hidden_layers",
            Mechanism::Weights => "weights",
            Mechanism::Gradients => "gradients",
            Mechanism::Labels => "labels",
        }
    }

    pub fn parse(name: &str) -> Option<Mechanism> {
        match name {
            "none" => Some(Mechanism::None),
            "input" => Some(Mechanism::Input),
            "hidden_layers" => Some(Mechanism::HiddenLayers),
            "weights" => Some(Mechanism::Weights),
            "gradients" => Some(Mechanism::Gradients),
            "labels" => Some(Mechanism::Labels),
            _ => None,
        }
    }

    /// All mechanisms in report order, base model first.
    pub fn all() -> [Mechanism; 6] {
        [
            Mechanism::None,
            Mechanism::Input,
            Mechanism::HiddenLayers,
            Mechanism::Weights,
            Mechanism::Gradients,
            Mechanism::Labels,
        ]
    }
}

fn default_clip() -> (f64, f64) {
    (0.0, 1.0)
}

/// The experiment's independent variable: which mechanism, how strong,
/// which seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub mechanism: Mechanism,
    pub sigma: f64,
    pub base_seed: u64,
    #[serde(default = "default_clip")]
    pub label_clip: (f64, f64),
}

impl NoisePlan {
    /// The no-op plan: training proceeds exactly as if no noise module
    /// existed, regardless of sigma or seed.
    pub fn none() -> Self {
        NoisePlan {
            mechanism: Mechanism::None,
            sigma: 0.0,
            base_seed: 0,
            label_clip: default_clip(),
        }
    }

    pub fn new(mechanism: Mechanism, sigma: f64, base_seed: u64) -> Self {
        NoisePlan {
            mechanism,
            sigma,
            base_seed,
            label_clip: default_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 {
            return Err(Error::NegativeSigma(self.sigma));
        }
        if self.label_clip.0 >= self.label_clip.1 {
            return Err(Error::InvalidArgument(format!(
                "label clip interval [{}, {}] is empty",
                self.label_clip.0, self.label_clip.1
            )));
        }
        Ok(())
    }

    /// True when training under this plan is unaffected by noise.
    pub fn is_noop(&self) -> bool {
        self.mechanism == Mechanism::None || self.sigma == 0.0
    }
}

/// Additive input noise: `out = batch + N(0, sigma^2)` i.i.d. per element.
/// The input tensor is untouched; `sigma = 0` returns a bit-identical copy.
pub fn apply_input_noise(batch: &Tensor, sigma: f64, rng: &mut RngStream) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    let mut out = batch.clone();
    if sigma > 0.0 {
        for v in out.data_mut().iter_mut() {
            *v += sigma * rng.normal();
        }
    }
    Ok(out)
}

/// Gaussian noise layer: additive noise in train mode, identity at eval.
pub fn gaussian_layer_forward(
    x: &Tensor,
    sigma: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    match mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train => apply_input_noise(x, sigma, rng),
    }
}

/// Add `N(0, sigma^2)` to every trainable parameter, in place. The offsets
/// persist in the stored weights, so repeated application accumulates.
/// Batch-norm moving statistics and momentum buffers are never touched.
pub fn perturb_weights(model: &mut Model, sigma: f64, rng: &mut RngStream) -> Result<()> {
    if sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    model.for_each_trainable_mut(|t| {
        for v in t.data_mut().iter_mut() {
            *v += sigma * rng.normal();
        }
    });
    Ok(())
}

/// Add fresh `N(0, sigma^2)` to every gradient entry, in place.
pub fn perturb_gradients(grads: &mut Gradients, sigma: f64, rng: &mut RngStream) -> Result<()> {
    if sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    grads.for_each_tensor_mut(|t| {
        for v in t.data_mut().iter_mut() {
            *v += sigma * rng.normal();
        }
    });
    Ok(())
}

/// One-time label corruption: `y' = clamp(y + N(0, sigma^2), lo, hi)`.
/// Rows must sum to 1 beforehand (one-hot or proper soft targets). The
/// clipped targets are not re-normalized.
pub fn perturb_labels(
    onehot: &Tensor,
    sigma: f64,
    rng: &mut RngStream,
    clip: (f64, f64),
) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    let (lo, hi) = clip;
    if lo >= hi {
        return Err(Error::InvalidArgument(format!(
            "label clip interval [{lo}, {hi}] is empty"
        )));
    }
    let classes = match onehot.shape() {
        [_, c] => *c,
        other => {
            return Err(Error::InvalidArgument(format!(
                "labels tensor must be (rows, classes), got {other:?}"
            )))
        }
    };
    for (row_index, row) in onehot.data().chunks(classes).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "label row {row_index} sums to {sum}, expected 1"
            )));
        }
    }
    let mut out = onehot.clone();
    if sigma > 0.0 {
        for v in out.data_mut().iter_mut() {
            *v = (*v + sigma * rng.normal()).clamp(lo, hi);
        }
    }
    Ok(out)
}

/// Standard deviation of the sum of independent noise sources:
/// `sqrt(sum sigma_i^2)`.
pub fn compose_sigmas(sigmas: &[f64]) -> Result<f64> {
    if sigmas.is_empty() {
        return Err(Error::Empty(
            "compose_sigmas needs at least one sigma".into(),
        ));
    }
    for &s in sigmas {
        if s < 0.0 {
            return Err(Error::NegativeSigma(s));
        }
    }
    Ok(sigmas.iter().map(|s| s * s).sum::<f64>().sqrt())
}

/// Standard deviation of the single layer equivalent to `n_layers`
/// independent layers at `sigma`: `sqrt(N) * sigma`.
pub fn equivalent_single_sigma(n_layers: usize, sigma: f64) -> Result<f64> {
    if n_layers < 1 {
        return Err(Error::InvalidArgument(
            "equivalent_single_sigma requires n_layers >= 1".into(),
        ));
    }
    if sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    Ok((n_layers as f64).sqrt() * sigma)
}
