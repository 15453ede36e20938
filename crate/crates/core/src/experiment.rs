//! Experiment runner: builds models from a `RunConfig`, dispatches to the
//! right training pipeline, and writes artifacts — a `metrics.csv` per run
//! (plus per-phase logs), a checkpoint directory, and an echo of the fully
//! resolved config — all atomically (temp file + rename).

use crate::checkpoint::{
    self, CaeCheckpoint, ModelCheckpoint, TwinCheckpoint, KIND_CAE, KIND_TOURBILLON, KIND_TWIN,
};
use crate::config::{
    dense_classifier_layers, dense_unet_layers, DataConfig, DataFormat, ModelConfig, RunConfig,
    RunKind,
};
use crate::data::{batches, load_cifar10, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::grad::{bp_backward, fa_backward, FeedbackWeights, LossKind, FEEDBACK_STD};
use crate::layer::{Activation, InitScheme, Layer, LayerSpec, Network, Padding};
use crate::metrics::{Metric, MetricsLog, Split};
use crate::optim::{apply_updates, OptimizerState};
use crate::recirc::{reconstruction_loss, train_cae, CircularAutoencoder, TrainParams, TrainRule};
use crate::rng::Rng;
use crate::stack::{fine_tune, head_train, stack_train, FineTuneParams, Head, Stage, TourbillonModel};
use crate::tensor::Tensor;
use crate::twin::tourbillonize;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// What a run left on disk, plus the primary metrics in memory.
#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub primary_metrics: Option<MetricsLog>,
    pub metrics_files: Vec<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_data(data: &DataConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (mut train, mut test) = match data.format {
        DataFormat::Idx => {
            let train = load_idx(
                data.train_images.as_ref().expect("validated"),
                data.train_labels.as_ref().expect("validated"),
            )?;
            let test = match (&data.test_images, &data.test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l)?),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "test_images and test_labels must be given together".into(),
                    ))
                }
            };
            (train, test)
        }
        DataFormat::Cifar10 => {
            let train = load_cifar10(&data.train_batches)?;
            let test = if data.test_batches.is_empty() {
                None
            } else {
                Some(load_cifar10(&data.test_batches)?)
            };
            (train, test)
        }
    };
    if let Some(n) = data.take_train {
        train = train.take(n);
    }
    if let (Some(n), Some(t)) = (data.take_test, &test) {
        test = Some(t.take(n));
    }
    if data.flatten {
        train = train.flattened();
        test = test.map(|t| t.flattened());
    }
    Ok((train, test))
}

fn flat_input_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Circular autoencoder for the given architecture and input sample shape.
pub fn build_cae(
    model: &ModelConfig,
    input_shape: &[usize],
    rng: &mut Rng,
) -> Result<CircularAutoencoder> {
    match model {
        ModelConfig::DenseCae { hinge } => {
            let d = flat_input_len(input_shape);
            CircularAutoencoder::new(
                vec![
                    Layer::new(LayerSpec::dense(d, *hinge), InitScheme::Glorot, rng),
                    Layer::fixed(LayerSpec::activation(Activation::Tanh)),
                ],
                vec![
                    Layer::new(LayerSpec::dense(*hinge, d), InitScheme::Glorot, rng),
                    Layer::fixed(LayerSpec::activation(Activation::Logistic)),
                ],
                &[d],
            )
        }
        ModelConfig::ConvCae {
            kernel,
            channels,
            stride,
        } => {
            let [_, _, c] = input_shape else {
                return Err(Error::Config(format!(
                    "conv-cae needs (H, W, C) inputs, got {input_shape:?}"
                )));
            };
            let encoder = vec![
                Layer::new(
                    LayerSpec::conv2d(*kernel, *c, *channels, *stride, Padding::Same),
                    InitScheme::Glorot,
                    rng,
                ),
                Layer::fixed(LayerSpec::activation(Activation::Tanh)),
            ];
            let mut decoder = Vec::new();
            if *stride == 2 {
                decoder.push(Layer::fixed(LayerSpec::Upsample2d { factor: 2 }));
            } else if *stride != 1 {
                return Err(Error::Config("conv-cae supports stride 1 or 2".into()));
            }
            decoder.push(Layer::new(
                LayerSpec::conv2d(*kernel, *channels, *c, 1, Padding::Same),
                InitScheme::Glorot,
                rng,
            ));
            decoder.push(Layer::fixed(LayerSpec::activation(Activation::Logistic)));
            CircularAutoencoder::new(encoder, decoder, input_shape)
        }
        ModelConfig::DenseUnet { sizes } => {
            if sizes.is_empty() {
                return Err(Error::Config("dense-unet needs at least one hidden size".into()));
            }
            let d = flat_input_len(input_shape);
            let hinge_pos = sizes.len() / 2; // hinge at the bottleneck
            let mut encoder = Vec::new();
            let mut cur = d;
            for &s in &sizes[..=hinge_pos] {
                encoder.push(Layer::new(LayerSpec::dense(cur, s), InitScheme::Glorot, rng));
                encoder.push(Layer::fixed(LayerSpec::activation(Activation::Tanh)));
                cur = s;
            }
            let mut decoder = Vec::new();
            for &s in &sizes[hinge_pos + 1..] {
                decoder.push(Layer::new(LayerSpec::dense(cur, s), InitScheme::Glorot, rng));
                decoder.push(Layer::fixed(LayerSpec::activation(Activation::Tanh)));
                cur = s;
            }
            decoder.push(Layer::new(LayerSpec::dense(cur, d), InitScheme::Glorot, rng));
            decoder.push(Layer::fixed(LayerSpec::activation(Activation::Logistic)));
            CircularAutoencoder::new(encoder, decoder, &[d])
        }
        other => Err(Error::Config(format!(
            "architecture {other:?} is not a circular autoencoder"
        ))),
    }
}

/// Dense autoencoder level for a stack: pixels reconstruct through a logistic
/// output, hinge codes through tanh (matching the code range).
fn dense_level(input: usize, hinge: usize, recon: Activation, rng: &mut Rng) -> Result<CircularAutoencoder> {
    CircularAutoencoder::new(
        vec![
            Layer::new(LayerSpec::dense(input, hinge), InitScheme::Glorot, rng),
            Layer::fixed(LayerSpec::activation(Activation::Tanh)),
        ],
        vec![
            Layer::new(LayerSpec::dense(hinge, input), InitScheme::Glorot, rng),
            Layer::fixed(LayerSpec::activation(recon)),
        ],
        &[input],
    )
}

/// Stack-plus-head model for the classifier architectures.
pub fn build_stack(
    model: &ModelConfig,
    input_shape: &[usize],
    rng: &mut Rng,
) -> Result<TourbillonModel> {
    match model {
        ModelConfig::DenseStack { hinges, classes }
        | ModelConfig::DenseClassifier {
            sizes: hinges,
            classes,
        } => {
            if hinges.is_empty() {
                return Err(Error::Config("stack needs at least one hinge size".into()));
            }
            let d = flat_input_len(input_shape);
            let mut stages = Vec::new();
            let mut cur = d;
            for (i, &h) in hinges.iter().enumerate() {
                let recon = if i == 0 { Activation::Logistic } else { Activation::Tanh };
                stages.push(Stage::Cae(dense_level(cur, h, recon, rng)?));
                cur = h;
            }
            let head = Head::new(cur, *classes, rng);
            Ok(TourbillonModel::new(stages, Some(head)))
        }
        ModelConfig::ConvStack {
            kernel,
            channels,
            classes,
        } => {
            let [h, w, c] = input_shape else {
                return Err(Error::Config(format!(
                    "conv-stack needs (H, W, C) inputs, got {input_shape:?}"
                )));
            };
            let level0 = CircularAutoencoder::new(
                vec![
                    Layer::new(
                        LayerSpec::conv2d(*kernel, *c, *channels, 1, Padding::Same),
                        InitScheme::Glorot,
                        rng,
                    ),
                    Layer::fixed(LayerSpec::activation(Activation::Tanh)),
                ],
                vec![
                    Layer::new(
                        LayerSpec::conv2d(*kernel, *channels, *c, 1, Padding::Same),
                        InitScheme::Glorot,
                        rng,
                    ),
                    Layer::fixed(LayerSpec::activation(Activation::Logistic)),
                ],
                input_shape,
            )?;
            let level1 = CircularAutoencoder::new(
                vec![
                    Layer::new(
                        LayerSpec::conv2d(*kernel, *channels, *channels, 2, Padding::Same),
                        InitScheme::Glorot,
                        rng,
                    ),
                    Layer::fixed(LayerSpec::activation(Activation::Tanh)),
                ],
                vec![
                    Layer::fixed(LayerSpec::Upsample2d { factor: 2 }),
                    Layer::new(
                        LayerSpec::conv2d(*kernel, *channels, *channels, 1, Padding::Same),
                        InitScheme::Glorot,
                        rng,
                    ),
                    Layer::fixed(LayerSpec::activation(Activation::Tanh)),
                ],
                &[*h, *w, *channels],
            )?;
            let top = (h.div_ceil(2)) * (w.div_ceil(2)) * channels;
            let head = Head::new(top, *classes, rng);
            Ok(TourbillonModel::new(
                vec![Stage::Cae(level0), Stage::Cae(level1)],
                Some(head),
            ))
        }
        other => Err(Error::Config(format!(
            "architecture {other:?} is not a stack"
        ))),
    }
}

/// Flat layer list for the architectures that describe plain networks
/// (tourbillonize sources and end-to-end baselines).
pub fn source_layers(model: &ModelConfig, input_shape: &[usize]) -> Result<Vec<LayerSpec>> {
    let d = flat_input_len(input_shape);
    match model {
        ModelConfig::DenseUnet { sizes } => Ok(dense_unet_layers(d, sizes)),
        ModelConfig::DenseClassifier { sizes, classes } => {
            Ok(dense_classifier_layers(d, sizes, classes.to_owned()))
        }
        ModelConfig::DenseStack { hinges, classes } => {
            Ok(dense_classifier_layers(d, hinges, classes.to_owned()))
        }
        ModelConfig::ConvStack {
            kernel,
            channels,
            classes,
        } => {
            let [h, w, c] = input_shape else {
                return Err(Error::Config("conv-stack needs (H, W, C) inputs".into()));
            };
            let top = (h.div_ceil(2)) * (w.div_ceil(2)) * channels;
            Ok(vec![
                LayerSpec::conv2d(*kernel, *c, *channels, 1, Padding::Same),
                LayerSpec::activation(Activation::Tanh),
                LayerSpec::conv2d(*kernel, *channels, *channels, 2, Padding::Same),
                LayerSpec::activation(Activation::Tanh),
                LayerSpec::dense(top, *classes),
                LayerSpec::activation(Activation::Softmax),
            ])
        }
        ModelConfig::Layers { layers } => Ok(layers.clone()),
        other => Err(Error::Config(format!(
            "architecture {other:?} does not describe a plain network"
        ))),
    }
}

/// Serializable wrapper for end-to-end-trained baseline networks.
#[derive(Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub network: Network,
    pub optimizer: Option<OptimizerState>,
    pub feedback: Option<FeedbackWeights>,
}

pub const KIND_NETWORK: &str = "network";

const EVAL_CHUNK: usize = 512;

/// Accuracy and mean cross-entropy of a plain softmax network.
pub fn network_classification_metrics(net: &Network, ds: &Dataset) -> Result<(f64, f64)> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("dataset has no labels".into()))?;
    let mut correct = 0usize;
    let mut xent = 0.0;
    let n = ds.len();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let x = ds.inputs.gather(&idx);
        let probs = net.forward(&x)?.output().clone();
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
        start += EVAL_CHUNK;
    }
    Ok((correct as f64 / n as f64, xent / n as f64))
}

/// End-to-end supervised training of a plain softmax network by
/// backpropagation or feedback alignment (the comparison baselines for the
/// stacked models). Logs accuracy and cross-entropy per epoch.
pub fn train_supervised_network(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    params: &TrainParams,
    rule: TrainRule,
) -> Result<(MetricsLog, OptimizerState, Option<FeedbackWeights>)> {
    if !matches!(rule, TrainRule::Bp | TrainRule::Fa) {
        return Err(Error::Config(
            "end-to-end supervised training supports rule = bp or fa".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training dataset".into()));
    }
    let classes = match net.layers.iter().rev().find(|l| l.is_adaptive()) {
        Some(Layer {
            spec: LayerSpec::Dense { output, .. },
            ..
        }) => *output,
        _ => return Err(Error::Config("network must end in a dense classifier".into())),
    };
    let targets = train.one_hot_labels(classes)?;
    let mut rng = Rng::new(params.seed);
    let mut fb_rng = rng.split();
    let feedback = matches!(rule, TrainRule::Fa)
        .then(|| FeedbackWeights::random(net, FEEDBACK_STD, &mut fb_rng));
    let mut opt = OptimizerState::new(net, params.momentum);
    let mut log = MetricsLog::new();
    for epoch in 0..params.epochs {
        let rates: Vec<f64> = params
            .rates
            .iter()
            .map(|r| r * params.gamma.powi(epoch as i32))
            .collect();
        for batch in batches(train, params.batch_size, &mut rng, true) {
            let x = train.inputs.gather(&batch);
            let t = targets.gather(&batch);
            let acts = net.forward(&x)?;
            let err = t.sub(acts.output());
            let updates = match rule {
                TrainRule::Bp => bp_backward(net, &acts, &err, LossKind::CrossEntropy, &rates)?,
                TrainRule::Fa => fa_backward(
                    net,
                    feedback.as_ref().expect("fa feedback"),
                    &acts,
                    &err,
                    LossKind::CrossEntropy,
                    &rates,
                )?,
                _ => unreachable!(),
            };
            apply_updates(net, &updates, &mut opt)?;
        }
        let (acc, xent) = network_classification_metrics(net, train)?;
        log.push(epoch, Split::Train, Metric::Accuracy, acc)?;
        log.push(epoch, Split::Train, Metric::Xent, xent)?;
        if let Some(t) = test {
            let (acc, xent) = network_classification_metrics(net, t)?;
            log.push(epoch, Split::Test, Metric::Accuracy, acc)?;
            log.push(epoch, Split::Test, Metric::Xent, xent)?;
        }
    }
    Ok((log, opt, feedback))
}

fn rates_for(cfg_rates: &[f64], n_adaptive: usize, default: f64) -> Vec<f64> {
    match cfg_rates.len() {
        0 => vec![default; n_adaptive],
        1 => vec![cfg_rates[0]; n_adaptive],
        _ => cfg_rates.to_vec(),
    }
}

struct ArtifactSink {
    out_dir: PathBuf,
    files: Vec<PathBuf>,
}

impl ArtifactSink {
    fn new(out_dir: &Path) -> Result<ArtifactSink> {
        std::fs::create_dir_all(out_dir)?;
        Ok(ArtifactSink {
            out_dir: out_dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write_metrics(&mut self, stem: &str, log: &MetricsLog) -> Result<()> {
        let path = self.out_dir.join(format!("{stem}.csv"));
        write_atomic(&path, log.to_csv_string().as_bytes())?;
        self.files.push(path);
        Ok(())
    }
}

/// Execute a run: dispatch on the config kind, write artifacts, and echo the
/// resolved config next to them.
pub fn run_config(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let cfg = config.resolved();
    let mut sink = ArtifactSink::new(&cfg.out_dir)?;
    write_atomic(
        &cfg.out_dir.join("config.resolved.toml"),
        cfg.to_toml_string()?.as_bytes(),
    )?;
    let (train, test) = load_data(&cfg.data)?;
    let ckpt_dir = cfg.out_dir.join("checkpoint");
    let mut master = Rng::new(cfg.seed);
    let mut init_rng = master.split();

    let primary = match cfg.kind {
        RunKind::TrainCae => {
            let model_cfg = cfg.model.as_ref().expect("validated");
            let tc = cfg.train.as_ref().expect("validated");
            let rule = tc
                .rule
                .ok_or_else(|| Error::Config("train.rule is required for train-cae".into()))?;
            let mut cae = build_cae(model_cfg, train.sample_shape(), &mut init_rng)?;
            let n = cae.network.adaptive_indices().len();
            let mut params = tc.to_params(master.next_u64(), n, 0.01);
            params.rates = rates_for(&tc.rates, n, 0.01);
            let outcome = train_cae(&mut cae, &train, test.as_ref(), &params, rule)?;
            checkpoint::save(
                &ckpt_dir,
                KIND_CAE,
                Some(cfg.seed),
                &CaeCheckpoint {
                    cae,
                    optimizer: Some(outcome.optimizer),
                    feedback: outcome.feedback,
                },
            )?;
            sink.write_metrics("metrics", &outcome.metrics)?;
            Some(outcome.metrics)
        }
        RunKind::TrainTourbillon => {
            let model_cfg = cfg.model.as_ref().expect("validated");
            let tc = cfg.train.as_ref().expect("validated");
            let rule = tc.rule.unwrap_or(TrainRule::Recirc);
            match rule {
                TrainRule::Recirc | TrainRule::Symmetric => {
                    let mut model = build_stack(model_cfg, train.sample_shape(), &mut init_rng)?;
                    let levels = model.num_levels();
                    let per_level: Vec<TrainParams> = (0..levels)
                        .map(|_| {
                            let mut p = tc.to_params(master.next_u64(), 2, 0.01);
                            p.rates = rates_for(&tc.rates, 2, 0.01);
                            p
                        })
                        .collect();
                    let outcomes = stack_train(&mut model, &train, test.as_ref(), &per_level, rule)?;
                    for (i, o) in outcomes.iter().enumerate() {
                        sink.write_metrics(&format!("metrics_level{i}"), &o.metrics)?;
                    }
                    let mut head_params = tc.to_params(master.next_u64(), 1, tc.head_rate);
                    head_params.rates = vec![tc.head_rate];
                    head_params.epochs = tc.head_epochs.unwrap_or(tc.epochs);
                    let head_out = head_train(&mut model, &train, test.as_ref(), &head_params)?;
                    checkpoint::save(
                        &ckpt_dir,
                        KIND_TOURBILLON,
                        Some(cfg.seed),
                        &ModelCheckpoint {
                            model,
                            head_optimizer: Some(head_out.optimizer),
                            stage_optimizers: Some(
                                outcomes.into_iter().map(|o| Some(o.optimizer)).collect(),
                            ),
                        },
                    )?;
                    sink.write_metrics("metrics", &head_out.metrics)?;
                    Some(head_out.metrics)
                }
                TrainRule::Bp | TrainRule::Fa => {
                    // equivalent plain network trained end-to-end: the
                    // comparison baseline for the stacked model
                    let specs = source_layers(model_cfg, train.sample_shape())?;
                    let mut net = Network::new(
                        specs
                            .into_iter()
                            .map(|s| {
                                if s.is_parametric() {
                                    Layer::new(s, InitScheme::Glorot, &mut init_rng)
                                } else {
                                    Layer::fixed(s)
                                }
                            })
                            .collect(),
                    );
                    let n = net.adaptive_indices().len();
                    let mut params = tc.to_params(master.next_u64(), n, 0.01);
                    params.rates = rates_for(&tc.rates, n, 0.01);
                    let (log, opt, feedback) =
                        train_supervised_network(&mut net, &train, test.as_ref(), &params, rule)?;
                    checkpoint::save(
                        &ckpt_dir,
                        KIND_NETWORK,
                        Some(cfg.seed),
                        &NetworkCheckpoint {
                            network: net,
                            optimizer: Some(opt),
                            feedback,
                        },
                    )?;
                    sink.write_metrics("metrics", &log)?;
                    Some(log)
                }
            }
        }
        RunKind::Tourbillonize => {
            let model_cfg = cfg.model.as_ref().expect("validated");
            let tc = cfg.train.as_ref().expect("validated");
            let specs = source_layers(model_cfg, train.sample_shape())?;
            let mut params = tc.to_params(master.next_u64(), 2, 0.01);
            params.rates = rates_for(&tc.rates, 2, 0.01);
            let (mut twin, logs) =
                tourbillonize(&specs, &train, test.as_ref(), &params, Activation::Logistic)?;
            for (i, log) in logs.iter().enumerate() {
                sink.write_metrics(&format!("metrics_level{i}"), log)?;
            }
            let mut primary = logs.last().cloned();
            let mut head_opt_state = None;
            if twin.model.head.is_some() {
                let mut head_params = tc.to_params(master.next_u64(), 1, tc.head_rate);
                head_params.rates = vec![tc.head_rate];
                head_params.epochs = tc.head_epochs.unwrap_or(tc.epochs);
                let head_out = head_train(&mut twin.model, &train, test.as_ref(), &head_params)?;
                sink.write_metrics("metrics_head", &head_out.metrics)?;
                head_opt_state = Some(head_out.optimizer);
                primary = Some(head_out.metrics);
            }
            let mut stage_opt_state = None;
            if let Some(ft_epochs) = tc.fine_tune_epochs {
                if ft_epochs > 0 {
                    let ft = fine_tune(
                        &mut twin.model,
                        &train,
                        test.as_ref(),
                        &FineTuneParams {
                            epochs: ft_epochs,
                            batch_size: tc.batch_size,
                            momentum: tc.momentum,
                            seed: master.next_u64(),
                        },
                    )?;
                    sink.write_metrics("metrics_finetune", &ft.metrics)?;
                    stage_opt_state = Some(ft.stage_optimizers);
                    head_opt_state = ft.head_optimizer.or(head_opt_state);
                    primary = Some(ft.metrics);
                }
            }
            checkpoint::save(
                &ckpt_dir,
                KIND_TWIN,
                Some(cfg.seed),
                &TwinCheckpoint {
                    twin,
                    head_optimizer: head_opt_state,
                    stage_optimizers: stage_opt_state,
                },
            )?;
            if let Some(p) = &primary {
                sink.write_metrics("metrics", p)?;
            }
            primary
        }
        RunKind::FineTune => {
            let src = cfg.checkpoint.as_ref().expect("validated");
            let tc = cfg.train.as_ref().expect("validated");
            let ft_params = FineTuneParams {
                epochs: tc.epochs,
                batch_size: tc.batch_size,
                momentum: tc.momentum,
                seed: master.next_u64(),
            };
            let kind = checkpoint::peek_kind(src)?;
            let (log, _) = match kind.as_str() {
                KIND_TOURBILLON => {
                    let (mut ck, seed): (ModelCheckpoint, _) = checkpoint::load(src, KIND_TOURBILLON)?;
                    let ft = fine_tune(&mut ck.model, &train, test.as_ref(), &ft_params)?;
                    checkpoint::save(
                        &ckpt_dir,
                        KIND_TOURBILLON,
                        Some(cfg.seed),
                        &ModelCheckpoint {
                            model: ck.model,
                            head_optimizer: ft.head_optimizer,
                            stage_optimizers: Some(ft.stage_optimizers),
                        },
                    )?;
                    (ft.metrics, seed)
                }
                KIND_TWIN => {
                    let (mut ck, seed): (TwinCheckpoint, _) = checkpoint::load(src, KIND_TWIN)?;
                    let ft = fine_tune(&mut ck.twin.model, &train, test.as_ref(), &ft_params)?;
                    checkpoint::save(
                        &ckpt_dir,
                        KIND_TWIN,
                        Some(cfg.seed),
                        &TwinCheckpoint {
                            twin: ck.twin,
                            head_optimizer: ft.head_optimizer,
                            stage_optimizers: Some(ft.stage_optimizers),
                        },
                    )?;
                    (ft.metrics, seed)
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "fine-tune needs a tourbillon or twin checkpoint, found {other:?}"
                    )))
                }
            };
            sink.write_metrics("metrics", &log)?;
            Some(log)
        }
        RunKind::Eval => {
            let src = cfg.checkpoint.as_ref().expect("validated");
            let log = eval_checkpoint(src, &train, test.as_ref())?;
            sink.write_metrics("metrics", &log)?;
            Some(log)
        }
        RunKind::ExportEmbeddings => {
            let src = cfg.checkpoint.as_ref().expect("validated");
            let export = cfg.export.as_ref().expect("validated");
            let out_csv = if export.out_csv.is_absolute() {
                export.out_csv.clone()
            } else {
                cfg.out_dir.join(&export.out_csv)
            };
            export_embeddings(
                src,
                &train,
                export.level,
                export.sample_count,
                cfg.seed,
                &out_csv,
            )?;
            sink.files.push(out_csv);
            None
        }
    };

    Ok(RunArtifacts {
        out_dir: cfg.out_dir.clone(),
        primary_metrics: primary,
        metrics_files: sink.files,
        checkpoint_dir: matches!(
            cfg.kind,
            RunKind::TrainCae | RunKind::TrainTourbillon | RunKind::Tourbillonize | RunKind::FineTune
        )
        .then_some(ckpt_dir),
    })
}

/// Metrics of a checkpointed model on the given data, written as epoch-0 rows.
pub fn eval_checkpoint(src: &Path, train: &Dataset, test: Option<&Dataset>) -> Result<MetricsLog> {
    let kind = checkpoint::peek_kind(src)?;
    let mut log = MetricsLog::new();
    let push_pair =
        |log: &mut MetricsLog, metric: Metric, tr: f64, te: Option<f64>| -> Result<()> {
            log.push(0, Split::Train, metric, tr)?;
            if let Some(v) = te {
                log.push(0, Split::Test, metric, v)?;
            }
            Ok(())
        };
    match kind.as_str() {
        KIND_CAE => {
            let (ck, _): (CaeCheckpoint, _) = checkpoint::load(src, KIND_CAE)?;
            let tr = reconstruction_loss(&ck.cae, train)?;
            let te = test.map(|t| reconstruction_loss(&ck.cae, t)).transpose()?;
            push_pair(&mut log, Metric::Mse, tr, te)?;
        }
        KIND_TOURBILLON | KIND_TWIN => {
            let model = if kind == KIND_TOURBILLON {
                let (ck, _): (ModelCheckpoint, _) = checkpoint::load(src, KIND_TOURBILLON)?;
                ck.model
            } else {
                let (ck, _): (TwinCheckpoint, _) = checkpoint::load(src, KIND_TWIN)?;
                ck.twin.model
            };
            if model.head.is_some() {
                let (acc, xent) = crate::stack::model_classification_metrics(&model, train)?;
                let te = test
                    .map(|t| crate::stack::model_classification_metrics(&model, t))
                    .transpose()?;
                push_pair(&mut log, Metric::Accuracy, acc, te.map(|v| v.0))?;
                push_pair(&mut log, Metric::Xent, xent, te.map(|v| v.1))?;
            } else {
                let tr = crate::stack::model_mse(&model, train)?;
                let te = test.map(|t| crate::stack::model_mse(&model, t)).transpose()?;
                push_pair(&mut log, Metric::Mse, tr, te)?;
            }
        }
        KIND_NETWORK => {
            let (ck, _): (NetworkCheckpoint, _) = checkpoint::load(src, KIND_NETWORK)?;
            let (acc, xent) = network_classification_metrics(&ck.network, train)?;
            let te = test
                .map(|t| network_classification_metrics(&ck.network, t))
                .transpose()?;
            push_pair(&mut log, Metric::Accuracy, acc, te.map(|v| v.0))?;
            push_pair(&mut log, Metric::Xent, xent, te.map(|v| v.1))?;
        }
        other => return Err(Error::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
    }
    Ok(log)
}

/// Sample `count` rows (seeded, without replacement) and write their hinge
/// codes at `level` plus the label as CSV.
pub fn export_embeddings(
    checkpoint_dir: &Path,
    dataset: &Dataset,
    level: usize,
    count: usize,
    seed: u64,
    out_csv: &Path,
) -> Result<()> {
    if count > dataset.len() {
        return Err(Error::Config(format!(
            "sample_count {count} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let kind = checkpoint::peek_kind(checkpoint_dir)?;
    let encode: Box<dyn Fn(&Tensor) -> Result<Tensor>> = match kind.as_str() {
        KIND_CAE => {
            if level != 0 {
                return Err(Error::Config(format!(
                    "level {level} out of range for a single autoencoder"
                )));
            }
            let (ck, _): (CaeCheckpoint, _) = checkpoint::load(checkpoint_dir, KIND_CAE)?;
            Box::new(move |x| ck.cae.encode_batch(x))
        }
        KIND_TOURBILLON | KIND_TWIN => {
            let model = if kind == KIND_TOURBILLON {
                let (ck, _): (ModelCheckpoint, _) = checkpoint::load(checkpoint_dir, KIND_TOURBILLON)?;
                ck.model
            } else {
                let (ck, _): (TwinCheckpoint, _) = checkpoint::load(checkpoint_dir, KIND_TWIN)?;
                ck.twin.model
            };
            if level >= model.num_levels() {
                return Err(Error::Config(format!(
                    "level {level} out of range for a {}-level model",
                    model.num_levels()
                )));
            }
            Box::new(move |x| model.encode(x, level))
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "cannot export embeddings from checkpoint kind {other:?}"
            )))
        }
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    order.truncate(count);

    let mut csv = String::new();
    let mut dim_written = false;
    let chunk = 512;
    let mut start = 0;
    while start < order.len() {
        let idx = &order[start..(start + chunk).min(order.len())];
        let x = dataset.inputs.gather(idx);
        let codes = encode(&x)?;
        let d = codes.sample_len();
        if !dim_written {
            for j in 0..d {
                csv.push_str(&format!("e{j},"));
            }
            csv.push_str("label\n");
            dim_written = true;
        }
        for (row, &i) in idx.iter().enumerate() {
            for v in codes.sample(row) {
                csv.push_str(&format!("{v},"));
            }
            match &dataset.labels {
                Some(l) => csv.push_str(&format!("{}\n", l[i])),
                None => csv.push_str("\n"),
            }
        }
        start += chunk;
    }
    write_atomic(out_csv, csv.as_bytes())?;
    Ok(())
}
