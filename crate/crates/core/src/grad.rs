//! Backpropagation and feedback-alignment update rules.
//!
//! Both rules walk the network top-down with a postsynaptic error signal and
//! emit per-layer raw updates dw = eta * error x presynaptic-activity (meaned
//! over the batch), with the learning rate folded in. Backpropagation carries
//! the error through the transposed forward weights; feedback alignment
//! replaces each transposed weight matrix/kernel with a fixed random tensor
//! drawn once at model-build time, so no forward weight is ever read on the
//! backward path. The top adaptive layer's update is identical under the two
//! rules by construction.
//!
//! Error convention: `output_error` is T - O at the network output. For
//! matched pairings (cross-entropy with a softmax/logistic/tanh output, or
//! mean-squared error with a linear output) the top delta is exactly T - O;
//! for mean-squared error with a pointwise nonlinear output the derivative
//! factor is applied. Updates therefore equal -eta * dLoss/dw.

use crate::error::{Error, Result};
use crate::layer::{
    activation_backward, conv_backward_data, conv_param_grad, maxpool_backward,
    upsample_backward, Activation, Activations, ConvGeom, Layer, LayerSpec, Network,
};
use crate::linalg::gemm;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Raw updates (learning rate applied) per layer, aligned with layer indices.
#[derive(Debug, Clone)]
pub struct UpdateSet {
    updates: Vec<Option<(Tensor, Tensor)>>,
}

impl UpdateSet {
    pub fn empty(network: &Network) -> UpdateSet {
        UpdateSet {
            updates: vec![None; network.layers.len()],
        }
    }

    pub fn with_len(n: usize) -> UpdateSet {
        UpdateSet {
            updates: vec![None; n],
        }
    }

    pub fn set(&mut self, layer: usize, dw: Tensor, db: Tensor) {
        self.updates[layer] = Some((dw, db));
    }

    pub fn get(&self, layer: usize) -> Option<&(Tensor, Tensor)> {
        self.updates[layer].as_ref()
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &(Tensor, Tensor))> {
        self.updates
            .iter()
            .enumerate()
            .filter_map(|(i, u)| u.as_ref().map(|u| (i, u)))
    }

    /// Largest absolute entry across all updates.
    pub fn max_abs(&self) -> f64 {
        self.iter()
            .flat_map(|(_, (dw, db))| dw.data().iter().chain(db.data()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Fixed random backward weights, one per adaptive layer. For a dense layer
/// with forward weights (out, in) the feedback tensor is (in, out); for a
/// conv layer it is a kernel of the forward kernel's shape, used by the same
/// transposed-convolution routine that exact backprop uses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackWeights {
    tensors: Vec<Option<Tensor>>,
}

pub const FEEDBACK_STD: f64 = 0.05;

impl FeedbackWeights {
    /// Draw from N(0, std^2) for every adaptive layer of the network.
    pub fn random(network: &Network, std: f64, rng: &mut Rng) -> FeedbackWeights {
        let tensors = network
            .layers
            .iter()
            .map(|l| {
                l.weights.as_ref().map(|w| {
                    let shape: Vec<usize> = match &l.spec {
                        LayerSpec::Dense { input, output } => vec![*input, *output],
                        _ => w.shape().to_vec(),
                    };
                    let n: usize = shape.iter().product();
                    Tensor::from_parts(shape, (0..n).map(|_| rng.normal(0.0, std)).collect())
                })
            })
            .collect();
        FeedbackWeights { tensors }
    }

    /// Feedback equal to the transposed forward weights; with these, feedback
    /// alignment reduces exactly to backpropagation.
    pub fn from_transposed(network: &Network) -> FeedbackWeights {
        let tensors = network
            .layers
            .iter()
            .map(|l| {
                l.weights.as_ref().map(|w| match &l.spec {
                    LayerSpec::Dense { input, output } => {
                        let mut t = vec![0.0; input * output];
                        for o in 0..*output {
                            for i in 0..*input {
                                t[i * output + o] = w.data()[o * input + i];
                            }
                        }
                        Tensor::from_parts(vec![*input, *output], t)
                    }
                    // the transposed convolution reads the forward kernel
                    // directly, so "transposed" feedback is the kernel itself
                    _ => w.clone(),
                })
            })
            .collect();
        FeedbackWeights { tensors }
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.tensors.get(layer).and_then(|t| t.as_ref())
    }

    pub fn tensors(&self) -> &[Option<Tensor>] {
        &self.tensors
    }

    pub fn from_tensors(tensors: Vec<Option<Tensor>>) -> FeedbackWeights {
        FeedbackWeights { tensors }
    }
}

/// dw = eta * mean over the batch of delta (x) pre, plus the matching bias
/// update. Shared by every rule that forms a dense delta-style update, so
/// algebraically identical updates are also bitwise identical.
pub(crate) fn dense_update(delta: &Tensor, pre: &Tensor, eta: f64) -> (Tensor, Tensor) {
    let batch = delta.batch();
    let n_out = delta.sample_len();
    let n_in = pre.sample_len();
    let scale = eta / batch as f64;
    let mut dw = vec![0.0; n_out * n_in];
    gemm(
        n_out,
        batch,
        n_in,
        scale,
        delta.data(),
        true,
        pre.data(),
        false,
        0.0,
        &mut dw,
    );
    let mut db = vec![0.0; n_out];
    for s in 0..batch {
        let d = delta.sample(s);
        for (acc, v) in db.iter_mut().zip(d) {
            *acc += v;
        }
    }
    for v in db.iter_mut() {
        *v *= scale;
    }
    (
        Tensor::from_parts(vec![n_out, n_in], dw),
        Tensor::from_parts(vec![n_out], db),
    )
}

/// Conv analogue of `dense_update`: updates are summed over spatial positions
/// and meaned over the batch.
pub(crate) fn conv_update(delta: &Tensor, pre: &Tensor, g: &ConvGeom, eta: f64) -> (Tensor, Tensor) {
    let scale = eta / delta.batch() as f64;
    let (mut dk, mut db) = conv_param_grad(pre, delta, g);
    dk.data_mut().iter_mut().for_each(|v| *v *= scale);
    db.data_mut().iter_mut().for_each(|v| *v *= scale);
    (dk, db)
}

/// Top delta for the given loss / output-activation pairing.
/// Returns (delta, consume_top_activation).
fn output_delta(
    output_error: &Tensor,
    loss: LossKind,
    out_act: Activation,
) -> Result<(Tensor, bool)> {
    match (loss, out_act) {
        (LossKind::CrossEntropy, Activation::Softmax)
        | (LossKind::CrossEntropy, Activation::Logistic)
        | (LossKind::CrossEntropy, Activation::Tanh) => Ok((output_error.clone(), true)),
        (LossKind::Mse, Activation::Softmax) => Err(Error::Unsupported(
            "mse loss over a softmax output is not supported; use cross_entropy".into(),
        )),
        (LossKind::Mse, _) => Ok((output_error.clone(), false)),
        (LossKind::CrossEntropy, act) => Err(Error::Unsupported(format!(
            "cross_entropy loss requires a softmax/logistic/tanh output, got {act:?}"
        ))),
    }
}

/// Loss value matching the update rules' gradient convention: mean over the
/// batch, so updates equal -eta * d(loss)/dw.
pub fn loss_value(loss: LossKind, out_act: Activation, output: &Tensor, target: &Tensor) -> f64 {
    let batch = output.batch() as f64;
    let eps = 1e-300;
    let total: f64 = match (loss, out_act) {
        (LossKind::Mse, _) => output
            .data()
            .iter()
            .zip(target.data())
            .map(|(o, t)| 0.5 * (t - o) * (t - o))
            .sum(),
        (LossKind::CrossEntropy, Activation::Softmax) => output
            .data()
            .iter()
            .zip(target.data())
            .map(|(o, t)| -t * o.max(eps).ln())
            .sum(),
        (LossKind::CrossEntropy, Activation::Logistic) => output
            .data()
            .iter()
            .zip(target.data())
            .map(|(o, t)| -t * o.max(eps).ln() - (1.0 - t) * (1.0 - o).max(eps).ln())
            .sum(),
        (LossKind::CrossEntropy, Activation::Tanh) => output
            .data()
            .iter()
            .zip(target.data())
            .map(|(o, t)| {
                let (u, v) = ((1.0 + o) / 2.0, (1.0 + t) / 2.0);
                -v * u.max(eps).ln() - (1.0 - v) * (1.0 - u).max(eps).ln()
            })
            .sum(),
        _ => f64::NAN,
    };
    total / batch
}

enum BackwardChannel<'a> {
    Transposed,
    Feedback(&'a FeedbackWeights),
}

fn backward_core(
    network: &Network,
    acts: &Activations,
    output_error: &Tensor,
    loss: LossKind,
    rates: &[f64],
    channel: BackwardChannel,
) -> Result<UpdateSet> {
    let adaptive = network.adaptive_indices();
    if rates.len() != adaptive.len() {
        return Err(Error::Config(format!(
            "{} learning rates for {} adaptive layers",
            rates.len(),
            adaptive.len()
        )));
    }
    if output_error.shape() != acts.output().shape() {
        return Err(Error::ShapeMismatch {
            layer: network.layers.len().saturating_sub(1),
            expected: acts.output().shape().to_vec(),
            got: output_error.shape().to_vec(),
        });
    }
    let mut updates = UpdateSet::empty(network);
    let Some(&lowest_adaptive) = adaptive.first() else {
        return Ok(updates);
    };
    let (mut delta, consume_top_act) = output_delta(output_error, loss, network.output_activation())?;
    let mut adaptive_rank = adaptive.len();
    let last = network.layers.len() - 1;
    for i in (0..=last).rev() {
        let layer = &network.layers[i];
        match &layer.spec {
            LayerSpec::Activation { function } => {
                if !(i == last && consume_top_act) {
                    delta = activation_backward(*function, acts.input_of(i), &acts.outputs[i], &delta);
                }
            }
            LayerSpec::Dense { .. } => {
                adaptive_rank -= 1;
                let pre = acts.input_of(i);
                let (dw, db) = dense_update(&delta, pre, rates[adaptive_rank]);
                updates.set(i, dw, db);
                if i > lowest_adaptive {
                    delta = dense_backward_data(layer, &channel, i, &delta, pre.shape())?;
                }
            }
            LayerSpec::Conv2d { .. } => {
                adaptive_rank -= 1;
                let pre = acts.input_of(i);
                let g = ConvGeom::new(&layer.spec, pre.sample_shape())?;
                let (dk, db) = conv_update(&delta, pre, &g, rates[adaptive_rank]);
                updates.set(i, dk, db);
                if i > lowest_adaptive {
                    let kernel = match &channel {
                        BackwardChannel::Transposed => layer.weights.as_ref().expect("conv weights"),
                        BackwardChannel::Feedback(fb) => fb.get(i).ok_or_else(|| {
                            Error::Unsupported(format!("missing feedback tensor for layer {i}"))
                        })?,
                    };
                    delta = conv_backward_data(&delta, &g, kernel);
                }
            }
            LayerSpec::MaxPool2d { .. } => {
                let indices = acts.pool_indices[i].as_ref().expect("pool indices");
                delta = maxpool_backward(&delta, indices, acts.input_of(i).sample_shape());
            }
            LayerSpec::Upsample2d { factor } => {
                delta = upsample_backward(&delta, *factor, acts.input_of(i).sample_shape());
            }
            LayerSpec::Reshape { .. } => {
                delta = delta.reshaped(acts.input_of(i).shape())?;
            }
        }
        if i <= lowest_adaptive {
            break;
        }
    }
    Ok(updates)
}

fn dense_backward_data(
    layer: &Layer,
    channel: &BackwardChannel,
    index: usize,
    delta: &Tensor,
    in_shape: &[usize],
) -> Result<Tensor> {
    let batch = delta.batch();
    let n_out = delta.sample_len();
    let n_in: usize = in_shape[1..].iter().product();
    let mut din = vec![0.0; batch * n_in];
    match channel {
        BackwardChannel::Transposed => {
            let w = layer.weights.as_ref().expect("dense weights");
            // din(B, in) = delta(B, out) x W(out, in)
            gemm(batch, n_out, n_in, 1.0, delta.data(), false, w.data(), false, 0.0, &mut din);
        }
        BackwardChannel::Feedback(fb) => {
            let f = fb.get(index).ok_or_else(|| {
                Error::Unsupported(format!("missing feedback tensor for layer {index}"))
            })?;
            if f.shape() != [n_in, n_out] {
                return Err(Error::ShapeMismatch {
                    layer: index,
                    expected: vec![n_in, n_out],
                    got: f.shape().to_vec(),
                });
            }
            // din(B, in) = delta(B, out) x F(in, out)^T
            gemm(batch, n_out, n_in, 1.0, delta.data(), false, f.data(), true, 0.0, &mut din);
        }
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), din))
}

/// Exact backpropagation through the network, using the transposed forward
/// weights as the backward channel.
pub fn bp_backward(
    network: &Network,
    acts: &Activations,
    output_error: &Tensor,
    loss: LossKind,
    rates: &[f64],
) -> Result<UpdateSet> {
    backward_core(network, acts, output_error, loss, rates, BackwardChannel::Transposed)
}

/// Feedback alignment: the same recursion as `bp_backward`, with every
/// transposed forward matrix replaced by a fixed random feedback tensor.
/// The top adaptive layer's update equals backpropagation's.
pub fn fa_backward(
    network: &Network,
    feedback: &FeedbackWeights,
    acts: &Activations,
    output_error: &Tensor,
    loss: LossKind,
    rates: &[f64],
) -> Result<UpdateSet> {
    backward_core(network, acts, output_error, loss, rates, BackwardChannel::Feedback(feedback))
}
