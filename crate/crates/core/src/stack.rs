//! Stacks of circular autoencoders with an optional supervised head, greedy
//! bottom-up training, and fine-tuning through the decoder deep learning
//! channel.
//!
//! The hinge representation of each level is the input of the next. Levels
//! train by recirculation one at a time (lower levels frozen), the head by
//! plain SGD on the frozen top codes. Fine-tuning sends the output error down
//! through fixed random head feedback and then the decoders' forward weights,
//! level by level, yielding a feedback-alignment-style error for each hinge;
//! only encoder and head weights adapt, and no encoder weight is ever read to
//! form a backward signal.

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::grad::{bp_backward, conv_update, dense_update, LossKind, UpdateSet};
use crate::layer::{
    activation_backward, maxpool_backward, upsample_backward, Activation, Activations, ConvGeom,
    InitScheme, Layer, LayerSpec, Network,
};
use crate::metrics::{Metric, MetricsLog, Split};
use crate::optim::{apply_updates, lr_at_epoch, LrSchedule, OptimizerState};
use crate::recirc::{train_cae, CircularAutoencoder, TrainOutcome, TrainParams, TrainRule};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// One stage of a stack: a trainable circular autoencoder traversed through
/// its encoder, or a fixed transport layer carried verbatim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Stage {
    Cae(CircularAutoencoder),
    Fixed(Layer),
}

/// Supervised output layer plus its fixed random feedback matrix
/// (hinge_len x classes), drawn once at model-build time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Head {
    /// Dense layer followed by its output activation.
    pub network: Network,
    pub feedback: Tensor,
}

pub const HEAD_FEEDBACK_STD: f64 = 0.05;

impl Head {
    /// Glorot-initialized softmax classification head.
    pub fn new(inputs: usize, classes: usize, rng: &mut Rng) -> Head {
        let dense = Layer::new(LayerSpec::dense(inputs, classes), InitScheme::Glorot, rng);
        let act = Layer::fixed(LayerSpec::activation(Activation::Softmax));
        let feedback = Tensor::from_parts(
            vec![inputs, classes],
            (0..inputs * classes)
                .map(|_| rng.normal(0.0, HEAD_FEEDBACK_STD))
                .collect(),
        );
        Head {
            network: Network::new(vec![dense, act]),
            feedback,
        }
    }

    pub fn classes(&self) -> usize {
        match self.network.layers[0].spec {
            LayerSpec::Dense { output, .. } => output,
            _ => unreachable!("head starts with a dense layer"),
        }
    }

    pub fn inputs(&self) -> usize {
        match self.network.layers[0].spec {
            LayerSpec::Dense { input, .. } => input,
            _ => unreachable!("head starts with a dense layer"),
        }
    }
}

/// Ordered stack of stages plus the optional supervised head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TourbillonModel {
    pub stages: Vec<Stage>,
    pub head: Option<Head>,
}

impl TourbillonModel {
    pub fn new(stages: Vec<Stage>, head: Option<Head>) -> TourbillonModel {
        TourbillonModel { stages, head }
    }

    /// Number of trainable (autoencoder) levels.
    pub fn num_levels(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s, Stage::Cae(_)))
            .count()
    }

    /// Check the hinge-to-input shape chain from the given input shape and
    /// return the output sample shape of the stage path.
    pub fn validate_chain(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let mut cur = input_shape.to_vec();
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Cae(cae) => {
                    if cae.input_shape() != cur {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            expected: cae.input_shape().to_vec(),
                            got: cur,
                        });
                    }
                    cur = cae.hinge_shape().to_vec();
                }
                Stage::Fixed(layer) => {
                    cur = layer.spec.out_shape(&cur)?;
                }
            }
        }
        if let Some(head) = &self.head {
            let flat: usize = cur.iter().product();
            if flat != head.inputs() {
                return Err(Error::ShapeMismatch {
                    layer: self.stages.len(),
                    expected: vec![head.inputs()],
                    got: cur,
                });
            }
        }
        Ok(cur)
    }

    /// Forward through the encoder path of every stage (no head).
    pub fn forward_stages(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = match stage {
                Stage::Cae(cae) => cae.encode_batch(&cur)?,
                Stage::Fixed(layer) => {
                    let net = Network::new(vec![layer.clone()]);
                    net.forward(&cur)?.output().clone()
                }
            };
        }
        Ok(cur)
    }

    /// Hinge activation of the autoencoder at `level` (0-based, counting only
    /// autoencoder stages).
    pub fn encode(&self, x: &Tensor, level: usize) -> Result<Tensor> {
        let levels = self.num_levels();
        if level >= levels {
            return Err(Error::Config(format!(
                "level {level} out of range for a {levels}-level stack"
            )));
        }
        let mut cur = x.clone();
        let mut seen = 0;
        for stage in &self.stages {
            match stage {
                Stage::Cae(cae) => {
                    cur = cae.encode_batch(&cur)?;
                    if seen == level {
                        return Ok(cur);
                    }
                    seen += 1;
                }
                Stage::Fixed(layer) => {
                    let net = Network::new(vec![layer.clone()]);
                    cur = net.forward(&cur)?.output().clone();
                }
            }
        }
        unreachable!("level checked above")
    }

    /// Class distribution from the softmax head over the top hinge codes.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Unsupported("model has no supervised head".into()))?;
        let codes = self.forward_stages(x)?;
        let flat = codes.reshaped(&[codes.batch(), codes.sample_len()])?;
        Ok(head.network.forward(&flat)?.output().clone())
    }
}

const EVAL_CHUNK: usize = 512;

fn for_chunks(n: usize, mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        f(&idx)?;
        start += EVAL_CHUNK;
    }
    Ok(())
}

/// Encode a whole dataset through one autoencoder's encoder, chunked.
fn encode_dataset(cae: &CircularAutoencoder, ds: &Dataset) -> Result<Dataset> {
    let mut out: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for_chunks(ds.len(), |idx| {
        let x = ds.inputs.gather(idx);
        let codes = cae.encode_batch(&x)?;
        shape = codes.sample_shape().to_vec();
        out.get_or_insert_with(Vec::new).extend_from_slice(codes.data());
        Ok(())
    })?;
    let mut full = vec![ds.len()];
    full.extend_from_slice(&shape);
    Dataset::new(
        Tensor::from_parts(full, out.unwrap_or_default()),
        ds.labels.clone(),
    )
}

fn apply_fixed_dataset(layer: &Layer, ds: &Dataset) -> Result<Dataset> {
    let net = Network::new(vec![layer.clone()]);
    let mut out: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for_chunks(ds.len(), |idx| {
        let x = ds.inputs.gather(idx);
        let y = net.forward(&x)?;
        shape = y.output().sample_shape().to_vec();
        out.get_or_insert_with(Vec::new)
            .extend_from_slice(y.output().data());
        Ok(())
    })?;
    let mut full = vec![ds.len()];
    full.extend_from_slice(&shape);
    Dataset::new(
        Tensor::from_parts(full, out.unwrap_or_default()),
        ds.labels.clone(),
    )
}

/// Train the stack sequentially bottom-up: level 0 on the raw data, level i
/// on the hinge codes of the already-trained level i-1; lower levels stay
/// frozen while upper levels train. Returns one outcome per level.
pub fn stack_train(
    model: &mut TourbillonModel,
    train: &Dataset,
    test: Option<&Dataset>,
    per_level: &[TrainParams],
    rule: TrainRule,
) -> Result<Vec<TrainOutcome>> {
    model.validate_chain(train.sample_shape())?;
    let levels = model.num_levels();
    if per_level.len() != levels {
        return Err(Error::Config(format!(
            "{} per-level parameter sets for {levels} levels",
            per_level.len()
        )));
    }
    let mut logs = Vec::with_capacity(levels);
    let mut cur_train = train.clone();
    let mut cur_test = test.cloned();
    let mut level = 0;
    for stage in &mut model.stages {
        match stage {
            Stage::Cae(cae) => {
                let outcome = train_cae(cae, &cur_train, cur_test.as_ref(), &per_level[level], rule)?;
                logs.push(outcome);
                cur_train = encode_dataset(cae, &cur_train)?;
                if let Some(t) = &cur_test {
                    cur_test = Some(encode_dataset(cae, t)?);
                }
                level += 1;
            }
            Stage::Fixed(layer) => {
                cur_train = apply_fixed_dataset(layer, &cur_train)?;
                if let Some(t) = &cur_test {
                    cur_test = Some(apply_fixed_dataset(layer, t)?);
                }
            }
        }
    }
    Ok(logs)
}

/// Accuracy and mean cross-entropy of the head over precomputed flat codes.
fn head_metrics(head: &Head, codes: &Tensor, labels: &[u8]) -> Result<(f64, f64)> {
    let classes = head.classes();
    let mut correct = 0usize;
    let mut xent = 0.0;
    let n = codes.batch();
    for_chunks(n, |idx| {
        let x = codes.gather(idx);
        let probs = head.network.forward(&x)?.output().clone();
        for (row, &i) in idx.iter().enumerate() {
            let p = &probs.sample(row)[..];
            let label = labels[i] as usize;
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .map(|(j, _)| j)
                .unwrap_or(0);
            if argmax == label {
                correct += 1;
            }
            xent -= p[label].max(1e-300).ln();
        }
        let _ = classes;
        Ok(())
    })?;
    Ok((correct as f64 / n as f64, xent / n as f64))
}

fn flat_codes(model: &TourbillonModel, ds: &Dataset) -> Result<Tensor> {
    let mut out: Option<Vec<f64>> = None;
    let mut dim = 0;
    for_chunks(ds.len(), |idx| {
        let x = ds.inputs.gather(idx);
        let codes = model.forward_stages(&x)?;
        dim = codes.sample_len();
        out.get_or_insert_with(Vec::new).extend_from_slice(codes.data());
        Ok(())
    })?;
    Ok(Tensor::from_parts(
        vec![ds.len(), dim],
        out.unwrap_or_default(),
    ))
}

/// Metrics plus the head's optimizer state.
#[derive(Debug, Clone)]
pub struct HeadOutcome {
    pub metrics: MetricsLog,
    pub optimizer: OptimizerState,
}

/// Train the supervised head by softmax + cross-entropy SGD with momentum on
/// the frozen top hinge codes. Logs accuracy and cross-entropy per epoch.
pub fn head_train(
    model: &mut TourbillonModel,
    train: &Dataset,
    test: Option<&Dataset>,
    params: &TrainParams,
) -> Result<HeadOutcome> {
    if model.head.is_none() {
        return Err(Error::Unsupported("model has no supervised head".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training dataset".into()));
    }
    let classes = model.head.as_ref().expect("head").classes();
    let train_labels = train
        .labels
        .clone()
        .ok_or_else(|| Error::Data("head training needs labels".into()))?;
    if let Some(&bad) = train_labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let train_codes = flat_codes(model, train)?;
    let targets = train.one_hot_labels(classes)?;
    let test_data = match test {
        Some(t) => Some((
            flat_codes(model, t)?,
            t.labels
                .clone()
                .ok_or_else(|| Error::Data("test set needs labels".into()))?,
        )),
        None => None,
    };

    let head = model.head.as_mut().expect("head");
    let mut rng = Rng::new(params.seed);
    let mut opt = OptimizerState::new(&head.network, params.momentum);
    let mut log = MetricsLog::new();
    let codes_ds = Dataset::new(train_codes.clone(), Some(train_labels.clone()))?;
    for epoch in 0..params.epochs {
        let rates: Vec<f64> = params
            .rates
            .iter()
            .map(|r| r * params.gamma.powi(epoch as i32))
            .collect();
        for batch in batches(&codes_ds, params.batch_size, &mut rng, true) {
            let x = train_codes.gather(&batch);
            let t = targets.gather(&batch);
            let acts = head.network.forward(&x)?;
            let err = t.sub(acts.output());
            let updates = bp_backward(&head.network, &acts, &err, LossKind::CrossEntropy, &rates)?;
            apply_updates(&mut head.network, &updates, &mut opt)?;
        }
        let (acc, xent) = head_metrics(head, &train_codes, &train_labels)?;
        log.push(epoch, Split::Train, Metric::Accuracy, acc)?;
        log.push(epoch, Split::Train, Metric::Xent, xent)?;
        if let Some((codes, labels)) = &test_data {
            let (acc, xent) = head_metrics(head, codes, labels)?;
            log.push(epoch, Split::Test, Metric::Accuracy, acc)?;
            log.push(epoch, Split::Test, Metric::Xent, xent)?;
        }
    }
    Ok(HeadOutcome {
        metrics: log,
        optimizer: opt,
    })
}

/// Forward through the stages keeping each stage's encoder activations
/// (needed for presynaptic activities and hinge derivative factors).
fn stage_forward(model: &TourbillonModel, x: &Tensor) -> Result<(Vec<Activations>, Tensor)> {
    let mut acts = Vec::with_capacity(model.stages.len());
    let mut cur = x.clone();
    for stage in &model.stages {
        let a = match stage {
            Stage::Cae(cae) => cae.encode_acts(&cur)?,
            Stage::Fixed(layer) => Network::new(vec![layer.clone()]).forward(&cur)?,
        };
        cur = a.output().clone();
        acts.push(a);
    }
    Ok((acts, cur))
}

/// Apply the linear part of a decoder in its forward orientation to an error
/// signal: weight layers without biases, transports as-is, activations
/// skipped. This is the physical channel that carries errors downward.
fn channel_forward(decoder: &[Layer], delta: &Tensor) -> Result<Tensor> {
    let mut cur = delta.clone();
    for layer in decoder {
        cur = match &layer.spec {
            LayerSpec::Dense { input, output } => {
                let w = layer.weights.as_ref().expect("dense weights");
                let batch = cur.batch();
                let mut out = vec![0.0; batch * output];
                crate::linalg::gemm(
                    batch,
                    *input,
                    *output,
                    1.0,
                    cur.reshaped(&[batch, *input])?.data(),
                    false,
                    w.data(),
                    true,
                    0.0,
                    &mut out,
                );
                Tensor::from_parts(vec![batch, *output], out)
            }
            LayerSpec::Conv2d { .. } => {
                let g = ConvGeom::new(&layer.spec, cur.sample_shape())?;
                let w = layer.weights.as_ref().expect("conv weights");
                let zero_bias = Tensor::zeros(&[g.c_out]);
                crate::layer::conv_forward(&cur, &g, w, &zero_bias)
            }
            LayerSpec::Upsample2d { factor } => {
                let net = Network::new(vec![Layer::fixed(LayerSpec::Upsample2d { factor: *factor })]);
                net.forward(&cur)?.output().clone()
            }
            LayerSpec::Reshape { shape } => {
                let mut full = vec![cur.batch()];
                full.extend_from_slice(shape);
                cur.reshaped(&full)?
            }
            LayerSpec::Activation { .. } => cur,
            LayerSpec::MaxPool2d { .. } => {
                return Err(Error::Unsupported(
                    "max pooling inside a decoder channel is not supported".into(),
                ))
            }
        };
    }
    Ok(cur)
}

/// Pull an error at a stage's output back to the post-synaptic error of its
/// single adaptive encoder layer (crossing activations as f', pools by argmax
/// routing, reshapes structurally), returning the error aligned with that
/// layer's output plus the layer index.
fn pull_back_to_adaptive(
    layers: &[Layer],
    acts: &Activations,
    incoming: &Tensor,
    adaptive_idx: usize,
) -> Result<Tensor> {
    let mut delta = incoming.reshaped(acts.outputs.last().expect("outputs").shape())?;
    for i in (adaptive_idx + 1..layers.len()).rev() {
        delta = match &layers[i].spec {
            LayerSpec::Activation { function } => {
                activation_backward(*function, acts.input_of(i), &acts.outputs[i], &delta)
            }
            LayerSpec::MaxPool2d { .. } => {
                let idx = acts.pool_indices[i].as_ref().expect("pool indices");
                maxpool_backward(&delta, idx, acts.input_of(i).sample_shape())
            }
            LayerSpec::Upsample2d { factor } => {
                upsample_backward(&delta, *factor, acts.input_of(i).sample_shape())
            }
            LayerSpec::Reshape { .. } => delta.reshaped(acts.input_of(i).shape())?,
            _ => {
                return Err(Error::Unsupported(
                    "encoder has more than one adaptive layer".into(),
                ))
            }
        };
    }
    Ok(delta)
}

/// Indices of autoencoder stages, plus per-stage single adaptive encoder
/// layer index; errors if an encoder has more than one adaptive layer.
fn fine_tune_layout(model: &TourbillonModel) -> Result<Vec<(usize, usize)>> {
    let mut layout = Vec::new();
    for (si, stage) in model.stages.iter().enumerate() {
        if let Stage::Cae(cae) = stage {
            let adaptive: Vec<usize> = cae
                .encoder_layers()
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_adaptive())
                .map(|(i, _)| i)
                .collect();
            if adaptive.len() != 1 {
                return Err(Error::Unsupported(format!(
                    "fine-tuning requires single-hidden-layer encoders; stage {si} has {}",
                    adaptive.len()
                )));
            }
            layout.push((si, adaptive[0]));
        }
    }
    if layout.is_empty() {
        return Err(Error::Unsupported("model has no trainable level".into()));
    }
    Ok(layout)
}

/// Structural backward step through a fixed transport stage.
fn pull_through_fixed(layer: &Layer, facts: &Activations, delta: &Tensor) -> Result<Tensor> {
    Ok(match &layer.spec {
        LayerSpec::MaxPool2d { .. } => maxpool_backward(
            delta,
            facts.pool_indices[0].as_ref().expect("pool indices"),
            facts.input.sample_shape(),
        ),
        LayerSpec::Upsample2d { factor } => {
            upsample_backward(delta, *factor, facts.input.sample_shape())
        }
        LayerSpec::Reshape { .. } => delta.reshaped(facts.input.shape())?,
        LayerSpec::Activation { function } => {
            activation_backward(*function, &facts.input, &facts.outputs[0], delta)
        }
        _ => unreachable!("fixed stages carry no weights"),
    })
}

/// The per-level hinge error signals for one batch, computed from stage
/// activations, the output error, the head feedback matrix, and the decoder
/// weights only — never from encoder weights. Returned bottom-up (index =
/// level). The last entry is the error at the top hinge.
pub fn channel_errors_from_acts(
    model: &TourbillonModel,
    stage_acts: &[Activations],
    output_error: &Tensor,
) -> Result<Vec<Tensor>> {
    let layout = fine_tune_layout(model)?;
    let mut errors: Vec<Option<Tensor>> = vec![None; layout.len()];
    // error entering the top level's hinge space
    let mut incoming = match &model.head {
        Some(head) => {
            let batch = output_error.batch();
            let classes = head.classes();
            let hinge = head.inputs();
            let mut out = vec![0.0; batch * hinge];
            // feedback (hinge, classes): err(B, classes) x F^T
            crate::linalg::gemm(
                batch,
                classes,
                hinge,
                1.0,
                output_error.data(),
                false,
                head.feedback.data(),
                true,
                0.0,
                &mut out,
            );
            Tensor::from_parts(vec![batch, hinge], out)
        }
        None => output_error.clone(),
    };
    // fixed stages above the top autoencoder
    let top_si = layout.last().expect("non-empty").0;
    for fi in (top_si + 1..model.stages.len()).rev() {
        let Stage::Fixed(layer) = &model.stages[fi] else {
            unreachable!("stages above the top level are fixed")
        };
        incoming = pull_through_fixed(layer, &stage_acts[fi], &incoming)?;
    }
    for (rank, &(si, adaptive_idx)) in layout.iter().enumerate().rev() {
        let Stage::Cae(cae) = &model.stages[si] else {
            unreachable!()
        };
        // f'-scaled error at this level's adaptive layer output
        let delta = pull_back_to_adaptive(
            cae.encoder_layers(),
            &stage_acts[si],
            &incoming,
            adaptive_idx,
        )?;
        // descend through any fixed stages sitting below this autoencoder
        if rank > 0 {
            let mut lower = channel_forward(cae.decoder_layers(), &delta)?;
            let below_stage = layout[rank - 1].0;
            for fi in (below_stage + 1..si).rev() {
                let Stage::Fixed(layer) = &model.stages[fi] else {
                    unreachable!("only fixed stages between autoencoder levels")
                };
                lower = pull_through_fixed(layer, &stage_acts[fi], &lower)?;
            }
            incoming = lower;
        }
        errors[rank] = Some(delta);
    }
    Ok(errors.into_iter().map(|e| e.expect("filled")).collect())
}

/// Fine-tuning hyperparameters. Rates follow the bottom-up staggered ladder
/// over [level 0, ..., level L-1, head].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineTuneParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

/// Metrics plus every optimizer state the fine-tuning phase touched.
#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub metrics: MetricsLog,
    pub stage_optimizers: Vec<Option<OptimizerState>>,
    pub head_optimizer: Option<OptimizerState>,
}

/// Fine-tune encoder and head weights through the decoder channel. Decoder
/// weights are read as the backward channel but never updated. For a model
/// with a head the output error is T - softmax(head codes); for a headless
/// model (an autoencoder twin) the target is the input itself and the top
/// level's encoder receives the plain delta-rule update.
pub fn fine_tune(
    model: &mut TourbillonModel,
    train: &Dataset,
    test: Option<&Dataset>,
    params: &FineTuneParams,
) -> Result<FineTuneOutcome> {
    if train.is_empty() {
        return Err(Error::Data("empty training dataset".into()));
    }
    model.validate_chain(train.sample_shape())?;
    let layout = fine_tune_layout(model)?;
    let units = layout.len() + usize::from(model.head.is_some());
    let schedule = LrSchedule::Staggered { units };

    let classes = model.head.as_ref().map(|h| h.classes());
    let targets = match classes {
        Some(c) => train.one_hot_labels(c)?,
        None => train.inputs.clone(),
    };

    let mut rng = Rng::new(params.seed);
    let mut stage_opt: Vec<Option<OptimizerState>> = model
        .stages
        .iter()
        .map(|s| match s {
            Stage::Cae(cae) => Some(OptimizerState::new(&cae.network, params.momentum)),
            Stage::Fixed(_) => None,
        })
        .collect();
    let mut head_opt = model
        .head
        .as_ref()
        .map(|h| OptimizerState::new(&h.network, params.momentum));

    let mut log = MetricsLog::new();
    for epoch in 0..params.epochs {
        let rates = lr_at_epoch(&schedule, epoch);
        for batch in batches(train, params.batch_size, &mut rng, true) {
            let x = train.inputs.gather(&batch);
            let t = targets.gather(&batch);
            let (stage_acts, stage_out) = stage_forward(model, &x)?;

            // output error and head update
            let output_error;
            if let Some(head) = &mut model.head {
                let flat = stage_out.reshaped(&[stage_out.batch(), stage_out.sample_len()])?;
                let head_acts = head.network.forward(&flat)?;
                output_error = t.sub(head_acts.output());
                let head_rate = rates[layout.len()];
                if head_rate > 0.0 {
                    let updates = bp_backward(
                        &head.network,
                        &head_acts,
                        &output_error,
                        LossKind::CrossEntropy,
                        &[head_rate],
                    )?;
                    apply_updates(&mut head.network, &updates, head_opt.as_mut().expect("opt"))?;
                }
            } else {
                output_error = t.sub(&stage_out);
            }

            let errors = channel_errors_from_acts(model, &stage_acts, &output_error)?;
            for (rank, &(si, adaptive_idx)) in layout.iter().enumerate() {
                let rate = rates[rank];
                if rate == 0.0 {
                    continue;
                }
                let Stage::Cae(cae) = &mut model.stages[si] else {
                    unreachable!()
                };
                let pre = stage_acts[si].input_of(adaptive_idx);
                let (dw, db) = match &cae.network.layers[adaptive_idx].spec {
                    LayerSpec::Dense { .. } => dense_update(&errors[rank], pre, rate),
                    LayerSpec::Conv2d { .. } => {
                        let g = ConvGeom::new(
                            &cae.network.layers[adaptive_idx].spec,
                            pre.sample_shape(),
                        )?;
                        conv_update(&errors[rank], pre, &g, rate)
                    }
                    _ => unreachable!("adaptive layer"),
                };
                let mut updates = UpdateSet::empty(&cae.network);
                updates.set(adaptive_idx, dw, db);
                apply_updates(
                    &mut cae.network,
                    &updates,
                    stage_opt[si].as_mut().expect("cae optimizer"),
                )?;
            }
        }

        // per-epoch evaluation
        match classes {
            Some(_) => {
                let (acc, xent) = model_classification_metrics(model, train)?;
                log.push(epoch, Split::Train, Metric::Accuracy, acc)?;
                log.push(epoch, Split::Train, Metric::Xent, xent)?;
                if let Some(tset) = test {
                    let (acc, xent) = model_classification_metrics(model, tset)?;
                    log.push(epoch, Split::Test, Metric::Accuracy, acc)?;
                    log.push(epoch, Split::Test, Metric::Xent, xent)?;
                }
            }
            None => {
                log.push(epoch, Split::Train, Metric::Mse, model_mse(model, train)?)?;
                if let Some(tset) = test {
                    log.push(epoch, Split::Test, Metric::Mse, model_mse(model, tset)?)?;
                }
            }
        }
    }
    Ok(FineTuneOutcome {
        metrics: log,
        stage_optimizers: stage_opt,
        head_optimizer: head_opt,
    })
}

/// Accuracy and mean cross-entropy of the full model on a labeled dataset.
pub fn model_classification_metrics(model: &TourbillonModel, ds: &Dataset) -> Result<(f64, f64)> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("dataset has no labels".into()))?;
    let mut correct = 0usize;
    let mut xent = 0.0;
    for_chunks(ds.len(), |idx| {
        let x = ds.inputs.gather(idx);
        let probs = model.predict(&x)?;
        for (row, &i) in idx.iter().enumerate() {
            let p = probs.sample(row);
            let label = labels[i] as usize;
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .map(|(j, _)| j)
                .unwrap_or(0);
            if argmax == label {
                correct += 1;
            }
            xent -= p[label].max(1e-300).ln();
        }
        Ok(())
    })?;
    Ok((correct as f64 / ds.len() as f64, xent / ds.len() as f64))
}

/// Mean squared error of the stage-path output against the inputs themselves
/// (the twin-reconstruction metric for headless models).
pub fn model_mse(model: &TourbillonModel, ds: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for_chunks(ds.len(), |idx| {
        let x = ds.inputs.gather(idx);
        let y = model.forward_stages(&x)?;
        let y = y.reshaped(x.shape())?;
        total += x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        Ok(())
    })?;
    Ok(total / (ds.len() * ds.inputs.sample_len()) as f64)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Activation;

    fn dense_cae(input: usize, hinge: usize, rng: &mut Rng) -> CircularAutoencoder {
        CircularAutoencoder::new(
            vec![
                Layer::new(LayerSpec::dense(input, hinge), InitScheme::Glorot, rng),
                Layer::fixed(LayerSpec::activation(Activation::Tanh)),
            ],
            vec![
                Layer::new(LayerSpec::dense(hinge, input), InitScheme::Glorot, rng),
                Layer::fixed(LayerSpec::activation(Activation::Logistic)),
            ],
            &[input],
        )
        .unwrap()
    }

    fn toy_model(rng: &mut Rng) -> TourbillonModel {
        let c0 = dense_cae(6, 4, rng);
        let c1 = dense_cae(4, 3, rng);
        let head = Head::new(3, 2, rng);
        TourbillonModel::new(vec![Stage::Cae(c0), Stage::Cae(c1)], Some(head))
    }

    fn toy_data(n: usize, rng: &mut Rng) -> Dataset {
        let inputs = Tensor::from_parts(vec![n, 6], (0..n * 6).map(|_| rng.next_f64()).collect());
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        Dataset::new(inputs, Some(labels)).unwrap()
    }

    #[test]
    fn stack_train_uses_hinge_codes_and_freezes_lower_levels() {
        let mut rng = Rng::new(71);
        let mut model = toy_model(&mut rng);
        let ds = toy_data(32, &mut rng);
        let params = vec![
            TrainParams::new(2, 8, vec![0.01, 0.001], 5),
            TrainParams::new(2, 8, vec![0.01, 0.001], 6),
        ];
        // snapshot level-0 weights after its own training by running level 0
        // alone first
        let mut solo = model.clone();
        let Stage::Cae(c0) = &mut solo.stages[0] else { unreachable!() };
        train_cae(c0, &ds, None, &params[0], TrainRule::Recirc).unwrap();
        let frozen = c0.network.layers[0].weights.as_ref().unwrap().data().to_vec();

        stack_train(&mut model, &ds, None, &params, TrainRule::Recirc).unwrap();
        let Stage::Cae(c0_full) = &model.stages[0] else { unreachable!() };
        assert_eq!(
            c0_full.network.layers[0].weights.as_ref().unwrap().data(),
            &frozen[..],
            "level-0 weights changed during level-1 training"
        );
        // level-1 training data are the level-0 hinge codes
        let Stage::Cae(c1) = &model.stages[1] else { unreachable!() };
        assert_eq!(c1.input_shape(), &[4]);
    }

    #[test]
    fn single_level_stack_equals_train_cae() {
        let mut rng = Rng::new(72);
        let cae = dense_cae(6, 4, &mut rng);
        let ds = toy_data(16, &mut rng);
        let params = TrainParams::new(3, 8, vec![0.01, 0.001], 9);

        let mut direct = cae.clone();
        train_cae(&mut direct, &ds, None, &params, TrainRule::Recirc).unwrap();

        let mut model = TourbillonModel::new(vec![Stage::Cae(cae)], None);
        stack_train(&mut model, &ds, None, &[params.clone()], TrainRule::Recirc).unwrap();
        let Stage::Cae(stacked) = &model.stages[0] else { unreachable!() };
        for (a, b) in stacked.network.layers.iter().zip(&direct.network.layers) {
            assert_eq!(
                a.weights.as_ref().map(|w| w.data()),
                b.weights.as_ref().map(|w| w.data())
            );
        }
    }

    #[test]
    fn zero_weight_head_starts_at_ln_classes() {
        let mut rng = Rng::new(73);
        let mut model = toy_model(&mut rng);
        // zero the head weights: uniform softmax over 2 classes
        let head = model.head.as_mut().unwrap();
        head.network.layers[0]
            .weights
            .as_mut()
            .unwrap()
            .data_mut()
            .fill(0.0);
        let ds = toy_data(20, &mut rng);
        let codes = flat_codes(&model, &ds).unwrap();
        let labels = ds.labels.clone().unwrap();
        let (_, xent) = head_metrics(model.head.as_ref().unwrap(), &codes, &labels).unwrap();
        assert!((xent - (2.0f64).ln()).abs() < 1e-12, "xent {xent}");
    }

    #[test]
    fn head_train_one_step_is_bp_on_head() {
        let mut rng = Rng::new(74);
        let mut model = toy_model(&mut rng);
        let ds = toy_data(1, &mut rng);
        let before = model.clone();

        let params = TrainParams {
            epochs: 1,
            batch_size: 8,
            rates: vec![0.01],
            gamma: 0.9,
            momentum: 0.8,
            seed: 11,
            derivative_weighted: false,
        };
        head_train(&mut model, &ds, None, &params).unwrap();

        // manual: bp restricted to the head on the single sample
        let codes = flat_codes(&before, &ds).unwrap();
        let mut head = before.head.clone().unwrap();
        let t = ds.one_hot_labels(2).unwrap();
        let acts = head.network.forward(&codes).unwrap();
        let err = t.sub(acts.output());
        let u = bp_backward(&head.network, &acts, &err, LossKind::CrossEntropy, &[0.01]).unwrap();
        let mut opt = OptimizerState::new(&head.network, 0.8);
        apply_updates(&mut head.network, &u, &mut opt).unwrap();

        assert_eq!(
            model.head.as_ref().unwrap().network.layers[0]
                .weights
                .as_ref()
                .unwrap()
                .data(),
            head.network.layers[0].weights.as_ref().unwrap().data()
        );
    }

    #[test]
    fn head_label_out_of_range_errors() {
        let mut rng = Rng::new(75);
        let mut model = toy_model(&mut rng);
        let inputs = Tensor::from_parts(vec![4, 6], (0..24).map(|_| rng.next_f64()).collect());
        let ds = Dataset::new(inputs, Some(vec![0, 1, 5, 0])).unwrap(); // 5 >= 2 classes
        let params = TrainParams::new(1, 4, vec![0.01], 0);
        assert!(head_train(&mut model, &ds, None, &params).is_err());
    }

    #[test]
    fn predict_sums_to_one_and_matches_encode_top() {
        let mut rng = Rng::new(76);
        let model = toy_model(&mut rng);
        let x = Tensor::from_parts(vec![3, 6], (0..18).map(|_| rng.next_f64()).collect());
        let p = model.predict(&x).unwrap();
        for s in 0..3 {
            let sum: f64 = p.sample(s).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // encode(top) feeds the head exactly
        let top = model.encode(&x, 1).unwrap();
        let head = model.head.as_ref().unwrap();
        let direct = head
            .network
            .forward(&top.reshaped(&[3, 3]).unwrap())
            .unwrap();
        assert_eq!(direct.output().data(), p.data());
    }

    #[test]
    fn encode_level_out_of_range() {
        let mut rng = Rng::new(77);
        let model = toy_model(&mut rng);
        let x = Tensor::zeros(&[1, 6]);
        assert_eq!(model.encode(&x, 0).unwrap().sample_shape(), &[4]);
        assert_eq!(model.encode(&x, 1).unwrap().sample_shape(), &[3]);
        assert!(model.encode(&x, 2).is_err());
    }

    #[test]
    fn fine_tune_zero_error_is_noop() {
        let mut rng = Rng::new(78);
        let mut model = toy_model(&mut rng);
        let ds = toy_data(8, &mut rng);
        // make the head output exactly the one-hot targets impossible; instead
        // check the no-op on a headless identity twin: target == output
        let id_cae = CircularAutoencoder::new_with_options(
            vec![Layer::with_params(
                LayerSpec::dense(2, 2),
                Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                Tensor::zeros(&[2]),
            )],
            vec![Layer::with_params(
                LayerSpec::dense(2, 2),
                Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                Tensor::zeros(&[2]),
            )],
            &[2],
            true,
        )
        .unwrap();
        let mut headless = TourbillonModel::new(vec![Stage::Cae(id_cae)], None);
        let before = headless.clone();
        let data = Dataset::new(
            Tensor::from_vec(&[3, 2], vec![0.1, 0.9, 0.4, 0.2, 0.7, 0.3]).unwrap(),
            None,
        )
        .unwrap();
        let params = FineTuneParams {
            epochs: 4,
            batch_size: 2,
            momentum: 0.8,
            seed: 3,
        };
        fine_tune(&mut headless, &data, None, &params).unwrap();
        let Stage::Cae(a) = &headless.stages[0] else { unreachable!() };
        let Stage::Cae(b) = &before.stages[0] else { unreachable!() };
        for (la, lb) in a.network.layers.iter().zip(&b.network.layers) {
            assert_eq!(
                la.weights.as_ref().map(|w| w.data()),
                lb.weights.as_ref().map(|w| w.data())
            );
        }
        let _ = (&mut model, ds);
    }

    #[test]
    fn fine_tune_scalar_oracle() {
        // 1-level stack, scalar layers: hinge error = F*e*f'(z); dw = eta*err*x
        let w_enc = 0.6;
        let w_dec = 0.4;
        let cae = CircularAutoencoder::new(
            vec![
                Layer::with_params(
                    LayerSpec::dense(1, 1),
                    Tensor::from_vec(&[1, 1], vec![w_enc]).unwrap(),
                    Tensor::zeros(&[1]),
                ),
                Layer::fixed(LayerSpec::activation(Activation::Tanh)),
            ],
            vec![
                Layer::with_params(
                    LayerSpec::dense(1, 1),
                    Tensor::from_vec(&[1, 1], vec![w_dec]).unwrap(),
                    Tensor::zeros(&[1]),
                ),
                Layer::fixed(LayerSpec::activation(Activation::Logistic)),
            ],
            &[1],
        )
        .unwrap();
        let mut rng = Rng::new(80);
        let mut head = Head::new(1, 2, &mut rng);
        let f0 = 0.25;
        let f1 = -0.15;
        head.feedback = Tensor::from_vec(&[1, 2], vec![f0, f1]).unwrap();
        let hw = head.network.layers[0].weights.as_ref().unwrap().data().to_vec();
        let hb = head.network.layers[0].bias.as_ref().unwrap().data().to_vec();
        let mut model = TourbillonModel::new(vec![Stage::Cae(cae)], Some(head));

        let x = 0.8;
        let ds = Dataset::new(
            Tensor::from_vec(&[1, 1], vec![x]).unwrap(),
            Some(vec![1u8]),
        )
        .unwrap();
        let params = FineTuneParams {
            epochs: 1,
            batch_size: 1,
            momentum: 0.0,
            seed: 5,
        };
        fine_tune(&mut model, &ds, None, &params).unwrap();

        // oracle
        let z = w_enc * x;
        let h = z.tanh();
        let logits = [hw[0] * h + hb[0], hw[1] * h + hb[1]];
        let m = logits[0].max(logits[1]);
        let exps = [(logits[0] - m).exp(), (logits[1] - m).exp()];
        let sum = exps[0] + exps[1];
        let p = [exps[0] / sum, exps[1] / sum];
        let e = [0.0 - p[0], 1.0 - p[1]];
        let hinge_err = (f0 * e[0] + f1 * e[1]) * (1.0 - h * h);
        // ladder: level 0 active at 1e-3, head sleeps at epoch 0
        let expected_enc = w_enc + 1e-3 * hinge_err * x;
        let Stage::Cae(c) = &model.stages[0] else { unreachable!() };
        let got = c.network.layers[0].weights.as_ref().unwrap().data()[0];
        assert!((got - expected_enc).abs() < 1e-12, "{got} vs {expected_enc}");
        // head asleep on epoch 0 of the ladder
        assert_eq!(
            model.head.as_ref().unwrap().network.layers[0]
                .weights
                .as_ref()
                .unwrap()
                .data(),
            &hw[..]
        );
        // decoder untouched
        assert_eq!(c.network.layers[2].weights.as_ref().unwrap().data(), &[w_dec]);
    }

    #[test]
    fn fine_tune_never_reads_encoder_weights_for_signals() {
        let mut rng = Rng::new(81);
        let model = toy_model(&mut rng);
        let x = Tensor::from_parts(vec![2, 6], (0..12).map(|_| rng.next_f64()).collect());
        let (acts, out) = stage_forward(&model, &x).unwrap();
        let e = Tensor::from_parts(vec![2, 2], vec![0.3, -0.7, 0.1, 0.4]);
        let _ = out;
        let clean = channel_errors_from_acts(&model, &acts, &e).unwrap();

        let mut scrambled = model.clone();
        for stage in &mut scrambled.stages {
            if let Stage::Cae(cae) = stage {
                let n = cae.encoder_len();
                for layer in &mut cae.network.layers[..n] {
                    if let Some(w) = layer.weights.as_mut() {
                        w.data_mut().iter_mut().for_each(|v| *v = 99.0 - *v);
                    }
                }
            }
        }
        let poisoned = channel_errors_from_acts(&scrambled, &acts, &e).unwrap();
        for (a, b) in clean.iter().zip(&poisoned) {
            assert_eq!(a.data(), b.data(), "signal depends on encoder weights");
        }
    }

    #[test]
    fn predict_ignores_decoder_weights() {
        let mut rng = Rng::new(82);
        let model = toy_model(&mut rng);
        let x = Tensor::from_parts(vec![2, 6], (0..12).map(|_| rng.next_f64()).collect());
        let before = model.predict(&x).unwrap();
        let mut chopped = model.clone();
        for stage in &mut chopped.stages {
            if let Stage::Cae(cae) = stage {
                let n = cae.encoder_len();
                for layer in &mut cae.network.layers[n..] {
                    if let Some(w) = layer.weights.as_mut() {
                        w.data_mut().fill(0.0);
                    }
                }
            }
        }
        let after = chopped.predict(&x).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn fine_tune_rejects_multi_layer_encoders() {
        let mut rng = Rng::new(83);
        let cae = CircularAutoencoder::new(
            vec![
                Layer::new(LayerSpec::dense(6, 5), InitScheme::Glorot, &mut rng),
                Layer::fixed(LayerSpec::activation(Activation::Tanh)),
                Layer::new(LayerSpec::dense(5, 4), InitScheme::Glorot, &mut rng),
                Layer::fixed(LayerSpec::activation(Activation::Tanh)),
            ],
            vec![
                Layer::new(LayerSpec::dense(4, 6), InitScheme::Glorot, &mut rng),
                Layer::fixed(LayerSpec::activation(Activation::Logistic)),
            ],
            &[6],
        )
        .unwrap();
        let mut model = TourbillonModel::new(vec![Stage::Cae(cae)], None);
        let ds = Dataset::new(Tensor::zeros(&[4, 6]), None).unwrap();
        let params = FineTuneParams {
            epochs: 1,
            batch_size: 2,
            momentum: 0.0,
            seed: 0,
        };
        let err = fine_tune(&mut model, &ds, None, &params).unwrap_err();
        assert!(err.to_string().contains("single-hidden-layer"), "{err}");
    }
}
