//! Trainable models: construction from specs, forward/backward passes,
//! SGD-with-momentum updates, evaluation.
//!
//! All stochastic layers draw from child streams derived from the forward
//! pass's root stream and the layer index, so a forward pass is a pure
//! function of (parameters, state, input, mode, rng root). Train-mode
//! batch-norm statistics are computed in the pass and folded into the moving
//! averages by the mutating `forward`; `forward_pure` leaves the model
//! untouched, which is what finite-difference checks and stability probes
//! need.

use crate::error::{Error, Result};
use crate::layers::batchnorm::{self, BatchStats};
use crate::layers::conv::{self, ConvDims};
use crate::layers::dense;
use crate::layers::pool::{self, PoolDims};
use crate::layers::{relu_backward_inplace, relu_inplace};
use crate::rng::RngStream;
use crate::spec::{Activation, LayerSpec, ModelSpec, Shape};
use crate::tensor::Tensor;

/// Moving-average momentum for batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.99;

// Stream tags used when deriving per-layer child streams from a forward
// pass's root stream.
const SITE_DROPOUT: u64 = 0x10;
const SITE_NOISE_LAYER: u64 = 0x11;
const SITE_HIDDEN_MECHANISM: u64 = 0x12;
const STREAM_INIT: u64 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Runtime state of one layer.
#[derive(Debug, Clone)]
enum Layer {
    Conv2d {
        dims: ConvDims,
        activation: Activation,
        weights: Tensor,
        bias: Tensor,
        v_weights: Tensor,
        v_bias: Tensor,
    },
    BatchNorm {
        channels: usize,
        gamma: Tensor,
        beta: Tensor,
        moving_mean: Tensor,
        moving_var: Tensor,
        v_gamma: Tensor,
        v_beta: Tensor,
    },
    MaxPool2d {
        dims: PoolDims,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        n_in: usize,
        units: usize,
        activation: Activation,
        weights: Tensor,
        bias: Tensor,
        v_weights: Tensor,
        v_bias: Tensor,
    },
    GaussianNoise {
        sigma: f64,
        seed: u64,
    },
}

/// Per-layer data saved by the forward pass for backward.
#[derive(Debug, Clone)]
enum LayerCache {
    Affine { input: Vec<f64>, output: Vec<f64> },
    BatchNorm { input: Vec<f64>, stats: BatchStats },
    MaxPool { argmax: Vec<u8> },
    Dropout { mask: Vec<f64> },
    PassThrough,
}

/// Result of a forward pass: logits plus everything backward needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Tensor,
    batch: usize,
    cache: Vec<LayerCache>,
    bn_updates: Vec<(usize, BatchStats)>,
}

/// Gradients of the mean cross-entropy w.r.t. every trainable parameter,
/// aligned with the model's layer list.
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
enum LayerGrads {
    ConvOrDense { weights: Tensor, bias: Tensor },
    BatchNorm { gamma: Tensor, beta: Tensor },
    None,
}

impl Gradients {
    /// Visit every gradient tensor in canonical layer order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for lg in self.layers.iter_mut() {
            match lg {
                LayerGrads::ConvOrDense { weights, bias } => {
                    f(weights);
                    f(bias);
                }
                LayerGrads::BatchNorm { gamma, beta } => {
                    f(gamma);
                    f(beta);
                }
                LayerGrads::None => {}
            }
        }
    }

    pub fn for_each_tensor(&self, mut f: impl FnMut(&Tensor)) {
        for lg in self.layers.iter() {
            match lg {
                LayerGrads::ConvOrDense { weights, bias } => {
                    f(weights);
                    f(bias);
                }
                LayerGrads::BatchNorm { gamma, beta } => {
                    f(gamma);
                    f(beta);
                }
                LayerGrads::None => {}
            }
        }
    }

    /// Flatten all gradient values in canonical order.
    pub fn to_flat_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_tensor(|t| out.extend_from_slice(t.data()));
        out
    }
}

/// Additive activation noise injected before every convolution except the
/// first (the hidden-layers mechanism). Site `s` draws from `rng.child([s])`.
#[derive(Debug, Clone)]
pub struct HiddenNoise {
    pub sigma: f64,
    pub rng: RngStream,
}

/// Accuracy and mean cross-entropy over a split.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// A built model: spec, parameters, batch-norm state, momentum buffers.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    shapes: Vec<Shape>,
    layers: Vec<Layer>,
}

/// Build a model with deterministic fan-in-scaled Gaussian initialization.
/// Two builds from the same (spec, seed) are bit-identical. Parameter init
/// streams are indexed by the ordinal of the parameterized layer, so
/// inserting parameterless layers (noise, dropout) does not shift them.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let shapes = spec.validate()?;
    let root = RngStream::from_seed(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut in_shape = {
        let (h, w, c) = spec.input_shape;
        Shape::Spatial { h, w, c }
    };
    let mut param_ordinal = 0u64;
    for (i, layer_spec) in spec.layers.iter().enumerate() {
        let layer = match *layer_spec {
            LayerSpec::Conv2d {
                out_channels,
                activation,
            } => {
                let (h, w, c_in) = match in_shape {
                    Shape::Spatial { h, w, c } => (h, w, c),
                    Shape::Flat(_) => unreachable!("validated"),
                };
                let dims = ConvDims {
                    h,
                    w,
                    c_in,
                    c_out: out_channels,
                };
                let mut stream = root.child(&[STREAM_INIT, param_ordinal]);
                param_ordinal += 1;
                let fan_in = (conv::KERNEL * conv::KERNEL * c_in) as f64;
                let std = (2.0 / fan_in).sqrt();
                let mut weights = Tensor::zeros(&[out_channels, 3, 3, c_in]);
                stream.fill_normal(std, weights.data_mut());
                Layer::Conv2d {
                    dims,
                    activation,
                    bias: Tensor::zeros(&[out_channels]),
                    v_weights: Tensor::zeros(weights.shape()),
                    v_bias: Tensor::zeros(&[out_channels]),
                    weights,
                }
            }
            LayerSpec::BatchNorm => {
                let c = match in_shape {
                    Shape::Spatial { c, .. } => c,
                    Shape::Flat(_) => unreachable!("validated"),
                };
                param_ordinal += 1;
                Layer::BatchNorm {
                    channels: c,
                    gamma: Tensor::full(&[c], 1.0),
                    beta: Tensor::zeros(&[c]),
                    moving_mean: Tensor::zeros(&[c]),
                    moving_var: Tensor::full(&[c], 1.0),
                    v_gamma: Tensor::zeros(&[c]),
                    v_beta: Tensor::zeros(&[c]),
                }
            }
            LayerSpec::MaxPool2d => {
                let (h, w, c) = match in_shape {
                    Shape::Spatial { h, w, c } => (h, w, c),
                    Shape::Flat(_) => unreachable!("validated"),
                };
                Layer::MaxPool2d {
                    dims: PoolDims { h, w, c },
                }
            }
            LayerSpec::Dropout { rate } => Layer::Dropout { rate },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Dense { units, activation } => {
                let n_in = match in_shape {
                    Shape::Flat(n) => n,
                    Shape::Spatial { .. } => unreachable!("validated"),
                };
                let mut stream = root.child(&[STREAM_INIT, param_ordinal]);
                param_ordinal += 1;
                let std = (2.0 / n_in as f64).sqrt();
                let mut weights = Tensor::zeros(&[units, n_in]);
                stream.fill_normal(std, weights.data_mut());
                Layer::Dense {
                    n_in,
                    units,
                    activation,
                    bias: Tensor::zeros(&[units]),
                    v_weights: Tensor::zeros(weights.shape()),
                    v_bias: Tensor::zeros(&[units]),
                    weights,
                }
            }
            LayerSpec::GaussianNoise { sigma, seed } => Layer::GaussianNoise { sigma, seed },
        };
        layers.push(layer);
        in_shape = shapes[i];
    }
    Ok(Model {
        spec: spec.clone(),
        shapes,
        layers,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// (trainable, non_trainable) element counts actually allocated.
    pub fn allocated_counts(&self) -> (u64, u64) {
        let mut trainable = 0u64;
        let mut non_trainable = 0u64;
        for layer in &self.layers {
            match layer {
                Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => {
                    trainable += (weights.len() + bias.len()) as u64;
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    moving_mean,
                    moving_var,
                    ..
                } => {
                    trainable += (gamma.len() + beta.len()) as u64;
                    non_trainable += (moving_mean.len() + moving_var.len()) as u64;
                }
                _ => {}
            }
        }
        (trainable, non_trainable)
    }

    /// Mutable views of every trainable parameter tensor, canonical order.
    pub fn for_each_trainable_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => {
                    f(weights);
                    f(bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    f(gamma);
                    f(beta);
                }
                _ => {}
            }
        }
    }

    pub fn for_each_trainable(&self, mut f: impl FnMut(&Tensor)) {
        for layer in self.layers.iter() {
            match layer {
                Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => {
                    f(weights);
                    f(bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    f(gamma);
                    f(beta);
                }
                _ => {}
            }
        }
    }

    /// All transmissible tensors in canonical order: trainable parameters
    /// plus batch-norm moving statistics. Momentum buffers are excluded.
    pub fn export_weights(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => {
                    out.push(weights.clone());
                    out.push(bias.clone());
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    moving_mean,
                    moving_var,
                    ..
                } => {
                    out.push(gamma.clone());
                    out.push(beta.clone());
                    out.push(moving_mean.clone());
                    out.push(moving_var.clone());
                }
                _ => {}
            }
        }
        out
    }

    /// Load tensors produced by `export_weights` on a congruent model.
    pub fn load_weights(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mut iter = tensors.iter();
        let mut take = |slot: &mut Tensor, layer_index: usize| -> Result<()> {
            let src = iter.next().ok_or_else(|| {
                Error::InvalidArgument(format!("weight set too short at layer {layer_index}"))
            })?;
            if src.shape() != slot.shape() {
                return Err(Error::InvalidArgument(format!(
                    "weight shape mismatch at layer {layer_index}: expected {:?}, got {:?}",
                    slot.shape(),
                    src.shape()
                )));
            }
            *slot = src.clone();
            Ok(())
        };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => {
                    take(weights, i)?;
                    take(bias, i)?;
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    moving_mean,
                    moving_var,
                    ..
                } => {
                    take(gamma, i)?;
                    take(beta, i)?;
                    take(moving_mean, i)?;
                    take(moving_var, i)?;
                }
                _ => {}
            }
        }
        if iter.next().is_some() {
            return Err(Error::InvalidArgument("weight set too long".into()));
        }
        Ok(())
    }

    /// Forward pass that never mutates the model; train-mode batch-norm
    /// updates are returned in the cache for the caller to commit.
    pub fn forward_pure(
        &self,
        batch: &Tensor,
        mode: Mode,
        rng: &RngStream,
        hidden_noise: Option<&HiddenNoise>,
    ) -> Result<Forward> {
        let batch_size = self.check_batch_shape(batch)?;
        let mut data = batch.data().to_vec();
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut bn_updates = Vec::new();
        let mut conv_seen = 0usize;
        // Dropout streams are keyed by the dropout layer's ordinal, not its
        // absolute index, so inserting parameterless noise layers leaves the
        // masks unchanged.
        let mut dropout_seen = 0u64;
        let hidden_active = mode == Mode::Train && hidden_noise.is_some_and(|h| h.sigma > 0.0);

        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d {
                    dims,
                    activation,
                    weights,
                    bias,
                    ..
                } => {
                    // Hidden-layers mechanism: perturb the input of every
                    // conv except the first.
                    if conv_seen > 0 && hidden_active {
                        let noise = hidden_noise.unwrap();
                        let site = (conv_seen - 1) as u64;
                        let mut stream = noise.rng.child(&[SITE_HIDDEN_MECHANISM, site]);
                        for v in data.iter_mut() {
                            *v += noise.sigma * stream.normal();
                        }
                    }
                    conv_seen += 1;
                    let mut out = vec![0.0; batch_size * dims.out_len()];
                    conv::forward(
                        &data,
                        weights.data(),
                        bias.data(),
                        *dims,
                        batch_size,
                        &mut out,
                    );
                    if *activation == Activation::Relu {
                        relu_inplace(&mut out);
                    }
                    cache.push(LayerCache::Affine {
                        input: std::mem::replace(&mut data, out),
                        output: data.clone(),
                    });
                }
                Layer::BatchNorm {
                    channels,
                    gamma,
                    beta,
                    moving_mean,
                    moving_var,
                    ..
                } => {
                    let mut out = vec![0.0; data.len()];
                    match mode {
                        Mode::Train => {
                            let stats = batchnorm::forward_train(
                                &data,
                                gamma.data(),
                                beta.data(),
                                *channels,
                                &mut out,
                            );
                            bn_updates.push((i, stats.clone()));
                            cache.push(LayerCache::BatchNorm {
                                input: std::mem::replace(&mut data, out),
                                stats,
                            });
                        }
                        Mode::Eval => {
                            batchnorm::forward_eval(
                                &data,
                                gamma.data(),
                                beta.data(),
                                moving_mean.data(),
                                moving_var.data(),
                                *channels,
                                &mut out,
                            );
                            data = out;
                            cache.push(LayerCache::PassThrough);
                        }
                    }
                }
                Layer::MaxPool2d { dims } => {
                    let mut out = vec![0.0; batch_size * dims.out_len()];
                    let mut argmax = vec![0u8; batch_size * dims.out_len()];
                    pool::forward(&data, *dims, batch_size, &mut out, &mut argmax);
                    data = out;
                    cache.push(LayerCache::MaxPool { argmax });
                }
                Layer::Dropout { rate } => {
                    let ordinal = dropout_seen;
                    dropout_seen += 1;
                    if mode == Mode::Train && *rate > 0.0 {
                        let mut stream = rng.child(&[SITE_DROPOUT, ordinal]);
                        let keep = 1.0 - rate;
                        let scale = 1.0 / keep;
                        let mut mask = vec![0.0; data.len()];
                        for (m, v) in mask.iter_mut().zip(data.iter_mut()) {
                            if stream.uniform() < keep {
                                *m = scale;
                                *v *= scale;
                            } else {
                                *m = 0.0;
                                *v = 0.0;
                            }
                        }
                        cache.push(LayerCache::Dropout { mask });
                    } else {
                        cache.push(LayerCache::PassThrough);
                    }
                }
                Layer::Flatten => {
                    // NHWC is row-major per sample; flattening is a reshape.
                    cache.push(LayerCache::PassThrough);
                }
                Layer::Dense {
                    n_in,
                    units,
                    activation,
                    weights,
                    bias,
                    ..
                } => {
                    let mut out = vec![0.0; batch_size * units];
                    dense::forward(
                        &data,
                        weights.data(),
                        bias.data(),
                        *n_in,
                        *units,
                        batch_size,
                        &mut out,
                    );
                    if *activation == Activation::Relu {
                        relu_inplace(&mut out);
                    }
                    // Softmax is folded into the loss; logits flow onward.
                    cache.push(LayerCache::Affine {
                        input: std::mem::replace(&mut data, out),
                        output: data.clone(),
                    });
                }
                Layer::GaussianNoise { sigma, seed } => {
                    if mode == Mode::Train && *sigma > 0.0 {
                        let mut stream = rng.child(&[SITE_NOISE_LAYER, i as u64, *seed]);
                        for v in data.iter_mut() {
                            *v += sigma * stream.normal();
                        }
                    }
                    cache.push(LayerCache::PassThrough);
                }
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "forward".into(),
                    layer_index: i,
                });
            }
        }

        let classes = self.spec.num_classes;
        Ok(Forward {
            logits: Tensor::from_vec(&[batch_size, classes], data)?,
            batch: batch_size,
            cache,
            bn_updates,
        })
    }

    /// Forward pass per the training contract: in train mode, batch-norm
    /// moving statistics are updated in place.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode, rng: &RngStream) -> Result<Forward> {
        let fwd = self.forward_pure(batch, mode, rng, None)?;
        if mode == Mode::Train {
            self.commit_bn_updates(&fwd);
        }
        Ok(fwd)
    }

    /// Fold the batch statistics recorded by a train-mode forward into the
    /// moving averages.
    pub fn commit_bn_updates(&mut self, fwd: &Forward) {
        for (index, stats) in &fwd.bn_updates {
            if let Layer::BatchNorm {
                moving_mean,
                moving_var,
                ..
            } = &mut self.layers[*index]
            {
                batchnorm::update_moving(
                    moving_mean.data_mut(),
                    moving_var.data_mut(),
                    stats,
                    BN_MOMENTUM,
                );
            }
        }
    }

    /// Gradient of the mean cross-entropy w.r.t. every trainable parameter.
    /// `targets` is a (batch, classes) tensor of soft or one-hot targets.
    /// Parameterless layers (noise, dropout, pooling) pass gradients through
    /// with their fixed Jacobians.
    pub fn backward(&self, fwd: &Forward, targets: &Tensor) -> Result<Gradients> {
        let batch = fwd.batch;
        let classes = self.spec.num_classes;
        if targets.shape() != [batch, classes] {
            return Err(Error::InvalidArgument(format!(
                "targets shape {:?} does not match (batch, classes) = ({batch}, {classes})",
                targets.shape()
            )));
        }
        let (_, mut grad) = softmax_cross_entropy(fwd.logits.data(), targets.data(), classes);
        let mut layer_grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());

        for (i, layer) in self.layers.iter().enumerate().rev() {
            match (layer, &fwd.cache[i]) {
                (
                    Layer::Conv2d {
                        dims,
                        activation,
                        weights,
                        ..
                    },
                    LayerCache::Affine { input, output },
                ) => {
                    if *activation == Activation::Relu {
                        relu_backward_inplace(&mut grad, output);
                    }
                    let mut gw = Tensor::zeros(weights.shape());
                    let mut gb = Tensor::zeros(&[dims.c_out]);
                    conv::backward_params(input, &grad, *dims, batch, gw.data_mut(), gb.data_mut());
                    let mut gin = vec![0.0; batch * dims.in_len()];
                    conv::backward_input(&grad, weights.data(), *dims, batch, &mut gin);
                    grad = gin;
                    layer_grads.push(LayerGrads::ConvOrDense {
                        weights: gw,
                        bias: gb,
                    });
                }
                (
                    Layer::Dense {
                        n_in,
                        units,
                        activation,
                        weights,
                        ..
                    },
                    LayerCache::Affine { input, output },
                ) => {
                    if *activation == Activation::Relu {
                        relu_backward_inplace(&mut grad, output);
                    }
                    let mut gw = Tensor::zeros(weights.shape());
                    let mut gb = Tensor::zeros(&[*units]);
                    dense::backward_params(
                        input,
                        &grad,
                        *n_in,
                        *units,
                        batch,
                        gw.data_mut(),
                        gb.data_mut(),
                    );
                    let mut gin = vec![0.0; batch * n_in];
                    dense::backward_input(&grad, weights.data(), *n_in, *units, batch, &mut gin);
                    grad = gin;
                    layer_grads.push(LayerGrads::ConvOrDense {
                        weights: gw,
                        bias: gb,
                    });
                }
                (
                    Layer::BatchNorm {
                        channels, gamma, ..
                    },
                    LayerCache::BatchNorm { input, stats },
                ) => {
                    let mut gg = Tensor::zeros(&[*channels]);
                    let mut gb = Tensor::zeros(&[*channels]);
                    let mut gin = vec![0.0; input.len()];
                    batchnorm::backward(
                        input,
                        &grad,
                        gamma.data(),
                        stats,
                        *channels,
                        &mut gin,
                        gg.data_mut(),
                        gb.data_mut(),
                    );
                    grad = gin;
                    layer_grads.push(LayerGrads::BatchNorm {
                        gamma: gg,
                        beta: gb,
                    });
                }
                (Layer::BatchNorm { .. }, LayerCache::PassThrough) => {
                    return Err(Error::InvalidArgument(
                        "backward requires a cache from a train-mode forward".into(),
                    ));
                }
                (Layer::MaxPool2d { dims }, LayerCache::MaxPool { argmax }) => {
                    let mut gin = vec![0.0; batch * dims.in_len()];
                    pool::backward(&grad, argmax, *dims, batch, &mut gin);
                    grad = gin;
                    layer_grads.push(LayerGrads::None);
                }
                (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => {
                    for (g, m) in grad.iter_mut().zip(mask.iter()) {
                        *g *= m;
                    }
                    layer_grads.push(LayerGrads::None);
                }
                // Dropout in eval/zero-rate mode, flatten and additive noise
                // all have unit Jacobians.
                (Layer::Dropout { .. }, LayerCache::PassThrough)
                | (Layer::Flatten, _)
                | (Layer::GaussianNoise { .. }, _) => {
                    layer_grads.push(LayerGrads::None);
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "cache mismatch at layer {i}; was the cache produced by this model?"
                    )));
                }
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "backward".into(),
                    layer_index: i,
                });
            }
        }
        layer_grads.reverse();
        Ok(Gradients {
            layers: layer_grads,
        })
    }

    /// One SGD-with-momentum step on the trainable parameters:
    /// `v <- momentum * v + g; w <- w - lr * v`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64, momentum: f64) {
        fn update(w: &mut Tensor, v: &mut Tensor, g: &Tensor, lr: f64, mu: f64) {
            for ((w, v), g) in w
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(g.data().iter())
            {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        for (layer, lg) in self.layers.iter_mut().zip(grads.layers.iter()) {
            match (layer, lg) {
                (
                    Layer::Conv2d {
                        weights,
                        bias,
                        v_weights,
                        v_bias,
                        ..
                    },
                    LayerGrads::ConvOrDense {
                        weights: gw,
                        bias: gb,
                    },
                )
                | (
                    Layer::Dense {
                        weights,
                        bias,
                        v_weights,
                        v_bias,
                        ..
                    },
                    LayerGrads::ConvOrDense {
                        weights: gw,
                        bias: gb,
                    },
                ) => {
                    update(weights, v_weights, gw, learning_rate, momentum);
                    update(bias, v_bias, gb, learning_rate, momentum);
                }
                (
                    Layer::BatchNorm {
                        gamma,
                        beta,
                        v_gamma,
                        v_beta,
                        ..
                    },
                    LayerGrads::BatchNorm {
                        gamma: gg,
                        beta: gb,
                    },
                ) => {
                    update(gamma, v_gamma, gg, learning_rate, momentum);
                    update(beta, v_beta, gb, learning_rate, momentum);
                }
                _ => {}
            }
        }
    }

    /// Reset momentum buffers to zero.
    pub fn reset_momentum(&mut self) {
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv2d {
                    v_weights, v_bias, ..
                }
                | Layer::Dense {
                    v_weights, v_bias, ..
                } => {
                    v_weights.data_mut().fill(0.0);
                    v_bias.data_mut().fill(0.0);
                }
                Layer::BatchNorm {
                    v_gamma, v_beta, ..
                } => {
                    v_gamma.data_mut().fill(0.0);
                    v_beta.data_mut().fill(0.0);
                }
                _ => {}
            }
        }
    }

    /// Total number of trainable parameter elements.
    pub fn trainable_len(&self) -> usize {
        let mut n = 0;
        self.for_each_trainable(|t| n += t.len());
        n
    }

    /// Read one trainable parameter by flat index in canonical order.
    /// Walks the layer list; meant for probes and gradient checks, not for
    /// hot loops.
    pub fn get_trainable(&self, flat: usize) -> f64 {
        let mut remaining = flat;
        let mut found = None;
        self.for_each_trainable(|t| {
            if found.is_none() {
                if remaining < t.len() {
                    found = Some(t.data()[remaining]);
                } else {
                    remaining -= t.len();
                }
            }
        });
        found.expect("flat index out of range")
    }

    /// Write one trainable parameter by flat index in canonical order.
    pub fn set_trainable(&mut self, flat: usize, value: f64) {
        let mut remaining = flat;
        let mut done = false;
        self.for_each_trainable_mut(|t| {
            if !done {
                if remaining < t.len() {
                    t.data_mut()[remaining] = value;
                    done = true;
                } else {
                    remaining -= t.len();
                }
            }
        });
        assert!(done, "flat index out of range");
    }

    /// Post-activation output of the convolution at `layer_index`, with its
    /// shape. Used for feature-map export.
    pub fn conv_feature_map<'a>(
        &self,
        fwd: &'a Forward,
        layer_index: usize,
    ) -> Option<(&'a [f64], Shape)> {
        if !matches!(self.layers.get(layer_index), Some(Layer::Conv2d { .. })) {
            return None;
        }
        match &fwd.cache[layer_index] {
            LayerCache::Affine { output, .. } => {
                Some((output.as_slice(), self.shapes[layer_index]))
            }
            _ => None,
        }
    }

    /// Indices of the convolution layers, in order.
    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Eval-mode logits for a batch; a pure function of the model and input.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let fwd = self.forward_pure(batch, Mode::Eval, &RngStream::from_seed(0), None)?;
        Ok(fwd.logits)
    }

    fn check_batch_shape(&self, batch: &Tensor) -> Result<usize> {
        let (h, w, c) = self.spec.input_shape;
        match batch.shape() {
            [n, bh, bw, bc] if *bh == h && *bw == w && *bc == c && *n > 0 => Ok(*n),
            other => Err(Error::InvalidArgument(format!(
                "batch shape {:?} does not match model input ({h}, {w}, {c})",
                other
            ))),
        }
    }
}

/// Mean soft-target cross-entropy and its gradient w.r.t. the logits.
///
/// Computed via log-sum-exp so it stays finite and smooth for any logits.
/// Returns (loss, dlogits) with dlogits already divided by the batch size.
pub fn softmax_cross_entropy(logits: &[f64], targets: &[f64], classes: usize) -> (f64, Vec<f64>) {
    let batch = logits.len() / classes;
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch as f64;
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let trow = &targets[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum_exp = 0.0;
        for &z in row {
            sum_exp += (z - max).exp();
        }
        let lse = max + sum_exp.ln();
        let t_sum: f64 = trow.iter().sum();
        for j in 0..classes {
            loss += trow[j] * (lse - row[j]);
            let p = (row[j] - lse).exp();
            dlogits[b * classes + j] = (p * t_sum - trow[j]) * inv_batch;
        }
    }
    (loss * inv_batch, dlogits)
}

/// Mean cross-entropy against integer labels.
pub fn cross_entropy_int(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let batch = labels.len();
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum_exp = 0.0;
        for &z in row {
            sum_exp += (z - max).exp();
        }
        let lse = max + sum_exp.ln();
        loss += lse - row[y];
    }
    loss / batch as f64
}

/// Fraction of rows whose argmax (first maximum wins) equals the label.
pub fn argmax_accuracy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let mut correct = 0usize;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let mut best = 0usize;
        for j in 1..classes {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// One-hot encode integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (b, &y) in labels.iter().enumerate() {
        data[b * classes + y] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), classes], data).expect("consistent dims")
}
