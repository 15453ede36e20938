//! Twin construction: replace every parametric layer of a source network with
//! a recirculation-trained circular autoencoder whose encoder realizes that
//! layer, carrying non-parametric layers through verbatim. The result trains
//! without backpropagation yet matches the source architecture's forward
//! shape at every depth, and its decoders provide the channel for later
//! fine-tuning.
//!
//! A parametric source layer and the activation immediately following it form
//! one unit realized by a single autoencoder. When the final unit is a
//! softmax classifier layer it becomes a supervised head (trained by SGD, not
//! recirculation).

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{Activation, InitScheme, Layer, LayerSpec, Network, Padding};
use crate::metrics::MetricsLog;
use crate::recirc::{train_cae, CircularAutoencoder, TrainParams, TrainRule};
use crate::rng::Rng;
use crate::stack::{Head, Stage, TourbillonModel};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// A tourbillonized network: the trainable stack plus the source architecture
/// it mirrors (kept for provenance and checkpointing).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwinModel {
    pub model: TourbillonModel,
    pub source: Vec<LayerSpec>,
}

/// One logical unit of the source: a parametric layer with its activation, or
/// a lone transport layer.
#[derive(Debug, Clone)]
enum SourceUnit {
    Parametric { layer: LayerSpec, activation: Option<Activation> },
    Transport(LayerSpec),
}

fn parse_units(source: &[LayerSpec]) -> Vec<SourceUnit> {
    let mut units = Vec::new();
    let mut i = 0;
    while i < source.len() {
        let spec = &source[i];
        if spec.is_parametric() {
            let activation = match source.get(i + 1) {
                Some(LayerSpec::Activation { function }) => {
                    i += 1;
                    Some(*function)
                }
                _ => None,
            };
            units.push(SourceUnit::Parametric {
                layer: spec.clone(),
                activation,
            });
        } else {
            units.push(SourceUnit::Transport(spec.clone()));
        }
        i += 1;
    }
    units
}

/// Inverse-shaped decoder layers for a parametric spec: dense swaps its
/// endpoint sizes; a same-padding conv swaps channel counts, with a stride-2
/// conv inverted as upsample(2) + stride-1 conv. The reconstruction
/// activation mirrors the value range of the autoencoder's input.
fn decoder_template(spec: &LayerSpec, recon_activation: Activation) -> Result<Vec<LayerSpec>> {
    let mut out = match spec {
        LayerSpec::Dense { input, output } => vec![LayerSpec::dense(*output, *input)],
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            stride,
            padding,
        } => {
            if *padding != Padding::Same {
                return Err(Error::Unsupported(
                    "no decoder template for valid-padding conv layers".into(),
                ));
            }
            if *kernel_h != *kernel_w {
                return Err(Error::Unsupported(
                    "no decoder template for non-square conv kernels".into(),
                ));
            }
            let conv_back = LayerSpec::conv2d(*kernel_h, *out_channels, *in_channels, 1, Padding::Same);
            match stride {
                1 => vec![conv_back],
                2 => vec![LayerSpec::Upsample2d { factor: 2 }, conv_back],
                s => {
                    return Err(Error::Unsupported(format!(
                        "no decoder template for conv stride {s}"
                    )))
                }
            }
        }
        _ => return Err(Error::Unsupported("no decoder template for layer kind".into())),
    };
    out.push(LayerSpec::activation(recon_activation));
    Ok(out)
}

fn build_cae(
    layer: &LayerSpec,
    activation: Option<Activation>,
    input_shape: &[usize],
    recon_activation: Activation,
    rng: &mut Rng,
) -> Result<CircularAutoencoder> {
    let mut encoder = vec![Layer::new(layer.clone(), InitScheme::Glorot, rng)];
    if let Some(act) = activation {
        encoder.push(Layer::fixed(LayerSpec::activation(act)));
    }
    let decoder = decoder_template(layer, recon_activation)?
        .into_iter()
        .map(|spec| {
            if spec.is_parametric() {
                Layer::new(spec, InitScheme::Glorot, rng)
            } else {
                Layer::fixed(spec)
            }
        })
        .collect();
    let allow_linear = !activation.map(Activation::is_nonlinear).unwrap_or(false);
    CircularAutoencoder::new_with_options(encoder, decoder, input_shape, allow_linear)
}

fn encode_through(stage: &Stage, ds: &Dataset) -> Result<Dataset> {
    let mut out: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    let n = ds.len();
    let chunk = 512;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let x = ds.inputs.gather(&idx);
        let y = match stage {
            Stage::Cae(cae) => cae.encode_batch(&x)?,
            Stage::Fixed(layer) => Network::new(vec![layer.clone()])
                .forward(&x)?
                .output()
                .clone(),
        };
        shape = y.sample_shape().to_vec();
        out.get_or_insert_with(Vec::new).extend_from_slice(y.data());
        start += chunk;
    }
    let mut full = vec![n];
    full.extend_from_slice(&shape);
    Dataset::new(Tensor::from_parts(full, out.unwrap_or_default()), ds.labels.clone())
}

/// Walk the source layers in order; every parametric unit becomes a circular
/// autoencoder trained by recirculation on the twin's own encoding of the
/// data so far, and transport layers are appended as-is. A trailing softmax
/// unit becomes an (untrained) supervised head. Returns the twin plus one
/// metrics log per trained autoencoder.
pub fn tourbillonize(
    source: &[LayerSpec],
    train: &Dataset,
    test: Option<&Dataset>,
    params: &TrainParams,
    input_value_activation: Activation,
) -> Result<(TwinModel, Vec<MetricsLog>)> {
    if source.is_empty() {
        return Err(Error::Config("empty source network".into()));
    }
    let units = parse_units(source);
    let mut stages: Vec<Stage> = Vec::new();
    let mut head: Option<Head> = None;
    let mut logs = Vec::new();
    let mut cur_train = train.clone();
    let mut cur_test = test.cloned();
    let mut value_act = input_value_activation;
    let mut seed_rng = Rng::new(params.seed);

    for (ui, unit) in units.iter().enumerate() {
        match unit {
            SourceUnit::Transport(spec) => {
                let stage = Stage::Fixed(Layer::fixed(spec.clone()));
                cur_train = encode_through(&stage, &cur_train)?;
                if let Some(t) = &cur_test {
                    cur_test = Some(encode_through(&stage, t)?);
                }
                stages.push(stage);
            }
            SourceUnit::Parametric { layer, activation } => {
                let is_last = ui == units.len() - 1;
                if *activation == Some(Activation::Softmax) {
                    if !is_last {
                        return Err(Error::Unsupported(
                            "softmax units are only supported as the final classifier layer"
                                .into(),
                        ));
                    }
                    let LayerSpec::Dense { input, output } = layer else {
                        return Err(Error::Unsupported(
                            "classifier head must be a dense layer".into(),
                        ));
                    };
                    let flat: usize = cur_train.sample_shape().iter().product();
                    if flat != *input {
                        return Err(Error::ShapeMismatch {
                            layer: ui,
                            expected: vec![*input],
                            got: cur_train.sample_shape().to_vec(),
                        });
                    }
                    let mut init_rng = seed_rng.split();
                    head = Some(Head::new(*input, *output, &mut init_rng));
                    continue;
                }
                let mut init_rng = seed_rng.split();
                let mut cae = build_cae(
                    layer,
                    *activation,
                    cur_train.sample_shape(),
                    value_act,
                    &mut init_rng,
                )?;
                let mut cae_params = params.clone();
                cae_params.seed = seed_rng.next_u64();
                let outcome =
                    train_cae(&mut cae, &cur_train, cur_test.as_ref(), &cae_params, TrainRule::Recirc)?;
                logs.push(outcome.metrics);
                let stage = Stage::Cae(cae);
                cur_train = encode_through(&stage, &cur_train)?;
                if let Some(t) = &cur_test {
                    cur_test = Some(encode_through(&stage, t)?);
                }
                stages.push(stage);
                if let Some(act) = activation {
                    value_act = *act;
                }
            }
        }
    }

    Ok((
        TwinModel {
            model: TourbillonModel::new(stages, head),
            source: source.to_vec(),
        },
        logs,
    ))
}

/// Compose the twin's encoder paths (and verbatim layers) in source order,
/// including the classifier head when the source ended in one.
pub fn twin_forward(twin: &TwinModel, x: &Tensor) -> Result<Tensor> {
    if twin.model.head.is_some() {
        twin.model.predict(x)
    } else {
        twin.model.forward_stages(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::Stage;

    fn unit_params(seed: u64) -> TrainParams {
        TrainParams {
            epochs: 1,
            batch_size: 8,
            rates: vec![0.01, 0.001],
            gamma: 0.9,
            momentum: 0.8,
            seed,
            derivative_weighted: false,
        }
    }

    fn random_images(n: usize, h: usize, w: usize, c: usize, rng: &mut Rng) -> Dataset {
        let data: Vec<f64> = (0..n * h * w * c).map(|_| rng.next_f64()).collect();
        Dataset::new(Tensor::from_parts(vec![n, h, w, c], data), None).unwrap()
    }

    #[test]
    fn non_parametric_source_is_carried_verbatim() {
        let mut rng = Rng::new(91);
        let source = vec![
            LayerSpec::MaxPool2d { window: 2 },
            LayerSpec::Upsample2d { factor: 2 },
        ];
        let ds = random_images(6, 4, 4, 1, &mut rng);
        let (twin, logs) =
            tourbillonize(&source, &ds, None, &unit_params(1), Activation::Logistic)
                .unwrap();
        assert_eq!(twin.model.stages.len(), 2);
        assert!(logs.is_empty(), "no training for non-parametric layers");
        assert!(twin.model.head.is_none());
        assert!(matches!(twin.model.stages[0], Stage::Fixed(_)));
        // output shape equals the source output shape
        let x = ds.inputs.gather(&[0]);
        let y = twin_forward(&twin, &x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 1]);
    }

    #[test]
    fn identity_source_is_identity() {
        let mut rng = Rng::new(92);
        let source = vec![LayerSpec::activation(Activation::Linear)];
        let ds = random_images(3, 2, 2, 1, &mut rng);
        let (twin, _) =
            tourbillonize(&source, &ds, None, &unit_params(2), Activation::Logistic)
                .unwrap();
        let x = ds.inputs.gather(&[1]);
        let y = twin_forward(&twin, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    fn dense_unet_source() -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense(12, 8),
            LayerSpec::activation(Activation::Tanh),
            LayerSpec::dense(8, 4),
            LayerSpec::activation(Activation::Tanh),
            LayerSpec::dense(4, 8),
            LayerSpec::activation(Activation::Tanh),
            LayerSpec::dense(8, 12),
            LayerSpec::activation(Activation::Logistic),
        ]
    }

    #[test]
    fn unet_twin_has_one_cae_per_dense_layer() {
        let mut rng = Rng::new(93);
        let data: Vec<f64> = (0..16 * 12).map(|_| rng.next_f64()).collect();
        let ds = Dataset::new(Tensor::from_parts(vec![16, 12], data), None).unwrap();
        let (twin, logs) = tourbillonize(
            &dense_unet_source(),
            &ds,
            None,
            &unit_params(3),
            Activation::Logistic,
        )
        .unwrap();
        assert_eq!(twin.model.stages.len(), 4);
        assert_eq!(logs.len(), 4);
        assert!(twin.model.head.is_none());
        for stage in &twin.model.stages {
            assert!(matches!(stage, Stage::Cae(_)));
        }
        // hinge chain 8 -> 4 -> 8 -> 12 and forward shape preserved
        let x = ds.inputs.gather(&[0, 1]);
        let y = twin_forward(&twin, &x).unwrap();
        assert_eq!(y.shape(), &[2, 12]);
        // reconstruction activations alternate with the value ranges:
        // pixels (logistic), then tanh codes
        let Stage::Cae(c0) = &twin.model.stages[0] else { unreachable!() };
        assert!(matches!(
            c0.decoder_layers().last().unwrap().spec,
            LayerSpec::Activation { function: Activation::Logistic }
        ));
        let Stage::Cae(c1) = &twin.model.stages[1] else { unreachable!() };
        assert!(matches!(
            c1.decoder_layers().last().unwrap().spec,
            LayerSpec::Activation { function: Activation::Tanh }
        ));
    }

    #[test]
    fn classifier_twin_gets_head() {
        let mut rng = Rng::new(94);
        let source = vec![
            LayerSpec::dense(12, 6),
            LayerSpec::activation(Activation::Tanh),
            LayerSpec::dense(6, 4),
            LayerSpec::activation(Activation::Tanh),
            LayerSpec::dense(4, 3),
            LayerSpec::activation(Activation::Softmax),
        ];
        let data: Vec<f64> = (0..10 * 12).map(|_| rng.next_f64()).collect();
        let ds = Dataset::new(Tensor::from_parts(vec![10, 12], data), None).unwrap();
        let (twin, logs) =
            tourbillonize(&source, &ds, None, &unit_params(4), Activation::Logistic)
                .unwrap();
        assert_eq!(twin.model.stages.len(), 2);
        assert_eq!(logs.len(), 2);
        let head = twin.model.head.as_ref().expect("classifier head");
        assert_eq!(head.inputs(), 4);
        assert_eq!(head.classes(), 3);
        let x = ds.inputs.gather(&[0]);
        let y = twin_forward(&twin, &x).unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        let sum: f64 = y.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_dense_layer_gives_single_cae() {
        let mut rng = Rng::new(95);
        let source = vec![LayerSpec::dense(6, 3), LayerSpec::activation(Activation::Tanh)];
        let data: Vec<f64> = (0..8 * 6).map(|_| rng.next_f64()).collect();
        let ds = Dataset::new(Tensor::from_parts(vec![8, 6], data), None).unwrap();
        let (twin, _) =
            tourbillonize(&source, &ds, None, &unit_params(5), Activation::Logistic)
                .unwrap();
        assert_eq!(twin.model.stages.len(), 1);
        let Stage::Cae(cae) = &twin.model.stages[0] else { unreachable!() };
        assert_eq!(cae.input_shape(), &[6]);
        assert_eq!(cae.hinge_shape(), &[3]);
        assert!(matches!(
            cae.encoder_layers()[0].spec,
            LayerSpec::Dense { input: 6, output: 3 }
        ));
    }

    #[test]
    fn stride2_conv_gets_upsample_decoder() {
        let mut rng = Rng::new(96);
        let source = vec![
            LayerSpec::conv2d(3, 2, 4, 2, Padding::Same),
            LayerSpec::activation(Activation::Tanh),
        ];
        let ds = random_images(4, 8, 8, 2, &mut rng);
        let (twin, _) =
            tourbillonize(&source, &ds, None, &unit_params(6), Activation::Logistic)
                .unwrap();
        let Stage::Cae(cae) = &twin.model.stages[0] else { unreachable!() };
        assert_eq!(cae.hinge_shape(), &[4, 4, 4]);
        assert!(matches!(
            cae.decoder_layers()[0].spec,
            LayerSpec::Upsample2d { factor: 2 }
        ));
    }

    #[test]
    fn missing_decoder_template_errors() {
        let mut rng = Rng::new(97);
        let ds = random_images(4, 8, 8, 2, &mut rng);
        let source = vec![
            LayerSpec::conv2d(3, 2, 4, 3, Padding::Same), // stride 3
            LayerSpec::activation(Activation::Tanh),
        ];
        assert!(tourbillonize(&source, &ds, None, &unit_params(7), Activation::Logistic)
            .is_err());
        let source = vec![
            LayerSpec::conv2d(3, 2, 4, 1, Padding::Valid),
            LayerSpec::activation(Activation::Tanh),
        ];
        assert!(tourbillonize(&source, &ds, None, &unit_params(8), Activation::Logistic)
            .is_err());
    }

    #[test]
    fn twin_is_deterministic_given_seed() {
        let mut data_rng = Rng::new(99);
        let data: Vec<f64> = (0..8 * 6).map(|_| data_rng.next_f64()).collect();
        let ds = Dataset::new(Tensor::from_parts(vec![8, 6], data), None).unwrap();
        let source = vec![LayerSpec::dense(6, 3), LayerSpec::activation(Activation::Tanh)];
        let (a, _) =
            tourbillonize(&source, &ds, None, &unit_params(10), Activation::Logistic)
                .unwrap();
        let (b, _) =
            tourbillonize(&source, &ds, None, &unit_params(10), Activation::Logistic)
                .unwrap();
        let Stage::Cae(ca) = &a.model.stages[0] else { unreachable!() };
        let Stage::Cae(cb) = &b.model.stages[0] else { unreachable!() };
        assert_eq!(
            ca.network.layers[0].weights.as_ref().unwrap().data(),
            cb.network.layers[0].weights.as_ref().unwrap().data()
        );
    }
}
