//! Circular autoencoders and learning by recirculation.
//!
//! A circular autoencoder's output layer is physically the same as its input
//! layer, so activity can be recirculated around the loop: pass 0 consumes the
//! clamped data, pass t+1 consumes the reconstruction produced by pass t. Two
//! local rules train it from the activities of the first two passes alone:
//!
//! * recirculation: dw_ij = eta * [O_i(0) - O_i(1)] * O_j(0)
//! * symmetric anti-Hebbian: dw_ij = -eta * [O_i(0) - O_i(1)] * [O_j(0) - O_j(1)]
//!
//! For the top layer of weights the circular layout identifies the
//! post-synaptic neurons with the input layer, so the post term becomes
//! x - x_hat and both rules reduce to the plain SGD delta rule there. Neither
//! rule ever reads a weight to form its error terms, and each layer's update
//! touches only the activities adjacent to it.
//!
//! The same structure can also be trained as an ordinary unrolled autoencoder
//! by backpropagation or feedback alignment, which provides the comparison
//! baselines.

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::grad::{
    bp_backward, conv_update, dense_update, fa_backward, FeedbackWeights, LossKind, UpdateSet,
    FEEDBACK_STD,
};
use crate::layer::{
    activation_backward, forward_upto, Activations, ConvGeom, Layer, LayerSpec, Network,
};
use crate::metrics::{Metric, MetricsLog, Split};
use crate::optim::{apply_updates, OptimizerState};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Encoder and decoder sharing a hinge layer, with the decoder output mapped
/// back onto the input layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircularAutoencoder {
    /// Encoder layers followed by decoder layers.
    pub network: Network,
    encoder_len: usize,
    input_shape: Vec<usize>,
    hinge_shape: Vec<usize>,
}

impl CircularAutoencoder {
    /// Build and validate. The encoder must contain a nonlinear activation
    /// (essential for learning); use `new_with_options` to lift that check
    /// for small hand-constructed instances.
    pub fn new(encoder: Vec<Layer>, decoder: Vec<Layer>, input_shape: &[usize]) -> Result<Self> {
        Self::new_with_options(encoder, decoder, input_shape, false)
    }

    pub fn new_with_options(
        encoder: Vec<Layer>,
        decoder: Vec<Layer>,
        input_shape: &[usize],
        allow_linear_hinge: bool,
    ) -> Result<Self> {
        if encoder.is_empty() || decoder.is_empty() {
            return Err(Error::Config(
                "circular autoencoder needs non-empty encoder and decoder".into(),
            ));
        }
        if !allow_linear_hinge {
            let nonlinear = encoder.iter().any(|l| {
                matches!(&l.spec, LayerSpec::Activation { function } if function.is_nonlinear())
            });
            if !nonlinear {
                return Err(Error::Config(
                    "encoder has no nonlinear activation (pass allow_linear_hinge to override)"
                        .into(),
                ));
            }
        }
        let encoder_len = encoder.len();
        let mut layers = encoder;
        layers.extend(decoder);
        let network = Network::new(layers);
        let shapes = network.infer_shapes(input_shape)?;
        let hinge_shape = shapes[encoder_len - 1].clone();
        let out_shape = shapes.last().expect("non-empty").clone();
        if out_shape != input_shape {
            return Err(Error::ShapeMismatch {
                layer: network.layers.len() - 1,
                expected: input_shape.to_vec(),
                got: out_shape,
            });
        }
        // The delta rule at the top layer identifies its output with the
        // input layer elementwise, so only shape-preserving transports may
        // follow the last adaptive layer.
        let top = *network
            .adaptive_indices()
            .last()
            .ok_or_else(|| Error::Config("circular autoencoder has no adaptive layer".into()))?;
        for layer in &network.layers[top + 1..] {
            if !matches!(
                layer.spec,
                LayerSpec::Activation { .. } | LayerSpec::Reshape { .. }
            ) {
                return Err(Error::Config(
                    "only activation/reshape layers may follow the last adaptive layer".into(),
                ));
            }
        }
        Ok(CircularAutoencoder {
            network,
            encoder_len,
            input_shape: input_shape.to_vec(),
            hinge_shape,
        })
    }

    pub fn encoder_layers(&self) -> &[Layer] {
        &self.network.layers[..self.encoder_len]
    }

    pub fn decoder_layers(&self) -> &[Layer] {
        &self.network.layers[self.encoder_len..]
    }

    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn hinge_shape(&self) -> &[usize] {
        &self.hinge_shape
    }

    /// Hinge activations for a batch.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let acts = forward_upto(&self.network, x, self.encoder_len)?;
        Ok(acts.outputs.last().expect("encoder non-empty").clone())
    }

    /// Full activations of the encoder half (used by the fine-tuning channel).
    pub(crate) fn encode_acts(&self, x: &Tensor) -> Result<Activations> {
        forward_upto(&self.network, x, self.encoder_len)
    }

    /// Single full pass: the reconstruction of x.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.network.forward(x)?.output().clone())
    }
}

/// Activities of every layer for each pass around the loop. `passes[t].input`
/// is the tensor fed to pass t: the clamped data for t = 0, afterwards the
/// reconstruction produced by pass t-1.
#[derive(Debug, Clone)]
pub struct PassActivations {
    pub passes: Vec<Activations>,
}

impl PassActivations {
    pub fn num_passes(&self) -> usize {
        self.passes.len()
    }

    /// O^0(t): the input of pass t, defined for t up to num_passes (the last
    /// value being the final reconstruction).
    pub fn input_of_pass(&self, t: usize) -> &Tensor {
        if t < self.passes.len() {
            &self.passes[t].input
        } else {
            debug_assert_eq!(t, self.passes.len());
            self.passes.last().expect("at least one pass").output()
        }
    }
}

/// Propagate `x` around the loop `passes` times (at least 2), retaining all
/// activities.
pub fn recirculate(cae: &CircularAutoencoder, x: &Tensor, passes: usize) -> Result<PassActivations> {
    if passes < 2 {
        return Err(Error::Config(format!(
            "recirculation needs at least 2 passes, got {passes}"
        )));
    }
    check_input(cae, x)?;
    let mut out = Vec::with_capacity(passes);
    let mut cur = x.clone();
    for _ in 0..passes {
        let acts = cae.network.forward(&cur)?;
        cur = acts.output().clone();
        out.push(acts);
    }
    Ok(PassActivations { passes: out })
}

/// Two passes with the tail of pass 1 skipped: the update rules never read
/// pass-1 activities at or above the top adaptive layer, so training avoids
/// computing them. Produces bit-identical updates to the full recirculation.
fn recirculate_two_for_training(cae: &CircularAutoencoder, x: &Tensor) -> Result<PassActivations> {
    check_input(cae, x)?;
    let pass0 = cae.network.forward(x)?;
    let top = *cae.network.adaptive_indices().last().expect("adaptive");
    let pass1 = forward_upto(&cae.network, pass0.output(), top)?;
    Ok(PassActivations {
        passes: vec![pass0, pass1],
    })
}

fn check_input(cae: &CircularAutoencoder, x: &Tensor) -> Result<()> {
    if x.sample_shape() != cae.input_shape {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: cae.input_shape.clone(),
            got: x.sample_shape().to_vec(),
        });
    }
    Ok(())
}

/// Post-synaptic activity of adaptive layer `li` in one pass: the output of
/// the activation layer immediately above it, or its own output when none
/// follows.
fn post_activity<'a>(net: &Network, pass: &'a Activations, li: usize) -> &'a Tensor {
    match net.layers.get(li + 1).map(|l| &l.spec) {
        Some(LayerSpec::Activation { .. }) if li + 1 < pass.outputs.len() => &pass.outputs[li + 1],
        _ => &pass.outputs[li],
    }
}

fn rule_guards(cae: &CircularAutoencoder, acts: &PassActivations, rates: &[f64]) -> Result<Vec<usize>> {
    if acts.num_passes() < 2 {
        return Err(Error::Config(format!(
            "update rules need passes 0 and 1, got {} pass(es)",
            acts.num_passes()
        )));
    }
    let adaptive = cae.network.adaptive_indices();
    if rates.len() != adaptive.len() {
        return Err(Error::Config(format!(
            "{} learning rates for {} adaptive layers",
            rates.len(),
            adaptive.len()
        )));
    }
    Ok(adaptive)
}

/// Apply a delta-style update for adaptive layer `li` given its postsynaptic
/// term and presynaptic activity; dispatches on layer kind.
fn local_update(
    net: &Network,
    li: usize,
    post: &Tensor,
    pre: &Tensor,
    eta: f64,
) -> Result<(Tensor, Tensor)> {
    match &net.layers[li].spec {
        LayerSpec::Dense { .. } => Ok(dense_update(post, pre, eta)),
        LayerSpec::Conv2d { .. } => {
            let g = ConvGeom::new(&net.layers[li].spec, pre.sample_shape())?;
            let post = post.reshaped(&[post.batch(), g.out_h, g.out_w, g.c_out])?;
            Ok(conv_update(&post, pre, &g, eta))
        }
        _ => unreachable!("adaptive layer"),
    }
}

/// The recirculation rule. For each weight layer the update is the Hebbian
/// product of the pass-0-minus-pass-1 activity difference with the pass-0
/// presynaptic activity; at the top layer the difference is x - x_hat, i.e.
/// the SGD delta rule.
pub fn recirc_updates(
    cae: &CircularAutoencoder,
    acts: &PassActivations,
    rates: &[f64],
) -> Result<UpdateSet> {
    recirc_updates_with(cae, acts, rates, false)
}

/// `derivative_weighted` additionally multiplies the hidden-layer post term
/// by f' of the pass-0 pre-activation (ablation variant; the plain rule has
/// no derivative factor).
pub fn recirc_updates_with(
    cae: &CircularAutoencoder,
    acts: &PassActivations,
    rates: &[f64],
    derivative_weighted: bool,
) -> Result<UpdateSet> {
    let adaptive = rule_guards(cae, acts, rates)?;
    let net = &cae.network;
    let top = *adaptive.last().expect("adaptive");
    let p0 = &acts.passes[0];
    let p1 = &acts.passes[1];
    let mut updates = UpdateSet::empty(net);
    for (rank, &li) in adaptive.iter().enumerate() {
        let pre0 = p0.input_of(li);
        let post = if li == top {
            acts.input_of_pass(0).sub(acts.input_of_pass(1))
        } else {
            let mut diff = post_activity(net, p0, li).sub(post_activity(net, p1, li));
            if derivative_weighted {
                if let Some(LayerSpec::Activation { function }) =
                    net.layers.get(li + 1).map(|l| &l.spec)
                {
                    diff = activation_backward(*function, &p0.outputs[li], &p0.outputs[li + 1], &diff);
                }
            }
            diff
        };
        let (dw, db) = local_update(net, li, &post, pre0, rates[rank])?;
        updates.set(li, dw, db);
    }
    Ok(updates)
}

/// The symmetric anti-Hebbian rule: minus the product of the post- and
/// pre-synaptic activity differences. Bias inputs are constant across passes,
/// so hidden biases receive no update. The top adaptive layer keeps the SGD
/// delta rule.
pub fn symmetric_updates(
    cae: &CircularAutoencoder,
    acts: &PassActivations,
    rates: &[f64],
) -> Result<UpdateSet> {
    let adaptive = rule_guards(cae, acts, rates)?;
    let net = &cae.network;
    let top = *adaptive.last().expect("adaptive");
    let p0 = &acts.passes[0];
    let p1 = &acts.passes[1];
    let mut updates = UpdateSet::empty(net);
    for (rank, &li) in adaptive.iter().enumerate() {
        if li == top {
            let post = acts.input_of_pass(0).sub(acts.input_of_pass(1));
            let (dw, db) = local_update(net, li, &post, p0.input_of(li), rates[rank])?;
            updates.set(li, dw, db);
        } else {
            let post = post_activity(net, p0, li).sub(post_activity(net, p1, li));
            let pre = p0.input_of(li).sub(p1.input_of(li));
            let (dw, db) = local_update(net, li, &post, &pre, -rates[rank])?;
            updates.set(li, dw, Tensor::zeros(db.shape()));
        }
    }
    Ok(updates)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRule {
    Recirc,
    Symmetric,
    Bp,
    Fa,
}

/// Hyperparameters shared by every training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate per adaptive layer, in forward order.
    pub rates: Vec<f64>,
    /// Per-epoch learning-rate decay factor.
    pub gamma: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Multiply the recirculation post term by f' (ablation; default off).
    pub derivative_weighted: bool,
}

impl TrainParams {
    pub fn new(epochs: usize, batch_size: usize, rates: Vec<f64>, seed: u64) -> TrainParams {
        TrainParams {
            epochs,
            batch_size,
            rates,
            gamma: 0.9,
            momentum: 0.8,
            seed,
            derivative_weighted: false,
        }
    }
}

/// What a training run leaves behind besides the trained weights: the metric
/// curves plus the optimizer and feedback state needed to resume.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: MetricsLog,
    pub optimizer: OptimizerState,
    pub feedback: Option<FeedbackWeights>,
}

/// Train with shuffled mini-batches, logging train (and optionally test)
/// reconstruction MSE per epoch. `bp`/`fa` unroll the loop and train the same
/// structure as a plain feed-forward autoencoder with target x. Training
/// aborts with a numerical error if a metric goes non-finite.
pub fn train_cae(
    cae: &mut CircularAutoencoder,
    train: &Dataset,
    test: Option<&Dataset>,
    params: &TrainParams,
    rule: TrainRule,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("empty training dataset".into()));
    }
    if train.sample_shape() != cae.input_shape() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: cae.input_shape().to_vec(),
            got: train.sample_shape().to_vec(),
        });
    }
    let mut rng = Rng::new(params.seed);
    let mut fb_rng = rng.split();
    let feedback = matches!(rule, TrainRule::Fa)
        .then(|| FeedbackWeights::random(&cae.network, FEEDBACK_STD, &mut fb_rng));
    let mut opt = OptimizerState::new(&cae.network, params.momentum);
    let mut log = MetricsLog::new();
    for epoch in 0..params.epochs {
        let rates: Vec<f64> = params
            .rates
            .iter()
            .map(|r| r * params.gamma.powi(epoch as i32))
            .collect();
        for batch in batches(train, params.batch_size, &mut rng, true) {
            let x = train.inputs.gather(&batch);
            let updates = match rule {
                TrainRule::Recirc => {
                    let acts = recirculate_two_for_training(cae, &x)?;
                    recirc_updates_with(cae, &acts, &rates, params.derivative_weighted)?
                }
                TrainRule::Symmetric => {
                    let acts = recirculate_two_for_training(cae, &x)?;
                    symmetric_updates(cae, &acts, &rates)?
                }
                TrainRule::Bp => {
                    let acts = cae.network.forward(&x)?;
                    let err = x.sub(acts.output());
                    bp_backward(&cae.network, &acts, &err, LossKind::Mse, &rates)?
                }
                TrainRule::Fa => {
                    let acts = cae.network.forward(&x)?;
                    let err = x.sub(acts.output());
                    fa_backward(
                        &cae.network,
                        feedback.as_ref().expect("fa feedback"),
                        &acts,
                        &err,
                        LossKind::Mse,
                        &rates,
                    )?
                }
            };
            apply_updates(&mut cae.network, &updates, &mut opt)?;
        }
        log.push(epoch, Split::Train, Metric::Mse, reconstruction_loss(cae, train)?)?;
        if let Some(t) = test {
            log.push(epoch, Split::Test, Metric::Mse, reconstruction_loss(cae, t)?)?;
        }
    }
    Ok(TrainOutcome {
        metrics: log,
        optimizer: opt,
        feedback,
    })
}

const EVAL_CHUNK: usize = 512;

/// Mean over samples and pixels of (x - x_hat)^2, with x_hat from a single
/// pass.
pub fn reconstruction_loss(cae: &CircularAutoencoder, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let n = dataset.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let indices: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let x = dataset.inputs.gather(&indices);
        let recon = cae.reconstruct(&x)?;
        total += x
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        start += EVAL_CHUNK;
    }
    Ok(total / (n * dataset.inputs.sample_len()) as f64)
}
