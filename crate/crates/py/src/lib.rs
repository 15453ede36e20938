//! Python bindings: the main types and operations of the training engine
//! exposed as a small extension module.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;
use tourbillon_core as core;
use tourbillon_core::config::RunConfig;
use tourbillon_core::{
    Activation, Dataset, InitScheme, Layer, LayerSpec, Rng, Tensor, TrainParams, TrainRule,
};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_rule(rule: &str) -> PyResult<TrainRule> {
    match rule {
        "recirc" => Ok(TrainRule::Recirc),
        "symmetric" => Ok(TrainRule::Symmetric),
        "bp" => Ok(TrainRule::Bp),
        "fa" => Ok(TrainRule::Fa),
        other => Err(PyValueError::new_err(format!(
            "unknown rule {other:?}; expected recirc|symmetric|bp|fa"
        ))),
    }
}

fn parse_activation(name: &str) -> PyResult<Activation> {
    match name {
        "tanh" => Ok(Activation::Tanh),
        "logistic" => Ok(Activation::Logistic),
        "relu" => Ok(Activation::Relu),
        "softmax" => Ok(Activation::Softmax),
        "linear" => Ok(Activation::Linear),
        other => Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
    }
}

/// A dense circular autoencoder trainable by local rules.
#[pyclass(name = "CircularAutoencoder")]
struct PyCae {
    inner: core::CircularAutoencoder,
}

#[pymethods]
impl PyCae {
    /// Dense autoencoder `input -> hinge -> input` with a tanh hinge and the
    /// given reconstruction activation.
    #[new]
    #[pyo3(signature = (input, hinge, seed, recon_activation="logistic"))]
    fn new(input: usize, hinge: usize, seed: u64, recon_activation: &str) -> PyResult<Self> {
        let recon = parse_activation(recon_activation)?;
        let mut rng = Rng::new(seed);
        let inner = core::CircularAutoencoder::new(
            vec![
                Layer::new(LayerSpec::dense(input, hinge), InitScheme::Glorot, &mut rng),
                Layer::fixed(LayerSpec::activation(Activation::Tanh)),
            ],
            vec![
                Layer::new(LayerSpec::dense(hinge, input), InitScheme::Glorot, &mut rng),
                Layer::fixed(LayerSpec::activation(recon)),
            ],
            &[input],
        )
        .map_err(err)?;
        Ok(PyCae { inner })
    }

    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    fn hinge_shape(&self) -> Vec<usize> {
        self.inner.hinge_shape().to_vec()
    }

    /// Hinge codes for a batch of flat samples.
    fn encode(&self, batch: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = rows_to_tensor(batch)?;
        let codes = self.inner.encode_batch(&x).map_err(err)?;
        Ok(tensor_to_rows(&codes))
    }

    /// Single-pass reconstructions for a batch of flat samples.
    fn reconstruct(&self, batch: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = rows_to_tensor(batch)?;
        let y = self.inner.reconstruct(&x).map_err(err)?;
        Ok(tensor_to_rows(&y))
    }

    /// Activities around the loop: returns (hinge(0), reconstruction,
    /// hinge(1)) for one sample.
    fn recirculate(&self, sample: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let x = rows_to_tensor(vec![sample])?;
        let acts = core::recirculate(&self.inner, &x, 2).map_err(err)?;
        let hinge_len = self.inner.hinge_shape().iter().product::<usize>();
        let hinge0 = acts.passes[0].outputs[self.inner.encoder_len() - 1]
            .data()[..hinge_len]
            .to_vec();
        let recon = acts.input_of_pass(1).data().to_vec();
        let hinge1 = acts.passes[1].outputs[self.inner.encoder_len() - 1]
            .data()[..hinge_len]
            .to_vec();
        Ok((hinge0, recon, hinge1))
    }

    /// Train on flat samples; returns per-epoch (train_mse, test_mse) pairs
    /// (test_mse = NaN when no test set was given).
    #[pyo3(signature = (train, rule, epochs, rates, seed, batch_size=64, gamma=0.9, momentum=0.8, test=None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        train: Vec<Vec<f64>>,
        rule: &str,
        epochs: usize,
        rates: Vec<f64>,
        seed: u64,
        batch_size: usize,
        gamma: f64,
        momentum: f64,
        test: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Vec<(f64, f64)>> {
        let rule = parse_rule(rule)?;
        let train_ds = Dataset::new(rows_to_tensor(train)?, None).map_err(err)?;
        let test_ds = test
            .map(|t| Ok::<_, PyErr>(Dataset::new(rows_to_tensor(t)?, None).map_err(err)?))
            .transpose()?;
        let params = TrainParams {
            epochs,
            batch_size,
            rates,
            gamma,
            momentum,
            seed,
            derivative_weighted: false,
        };
        let outcome =
            core::train_cae(&mut self.inner, &train_ds, test_ds.as_ref(), &params, rule)
                .map_err(err)?;
        let mut curve = Vec::new();
        for epoch in 0..epochs {
            let tr = outcome
                .metrics
                .get(epoch, core::Split::Train, core::Metric::Mse)
                .unwrap_or(f64::NAN);
            let te = outcome
                .metrics
                .get(epoch, core::Split::Test, core::Metric::Mse)
                .unwrap_or(f64::NAN);
            curve.push((tr, te));
        }
        Ok(curve)
    }

    fn reconstruction_loss(&self, data: Vec<Vec<f64>>) -> PyResult<f64> {
        let ds = Dataset::new(rows_to_tensor(data)?, None).map_err(err)?;
        core::reconstruction_loss(&self.inner, &ds).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        core::checkpoint::save(
            &dir,
            core::checkpoint::KIND_CAE,
            None,
            &core::checkpoint::CaeCheckpoint {
                cae: self.inner.clone(),
                optimizer: None,
                feedback: None,
            },
        )
        .map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (ck, _): (core::checkpoint::CaeCheckpoint, _) =
            core::checkpoint::load(&dir, core::checkpoint::KIND_CAE).map_err(err)?;
        Ok(PyCae { inner: ck.cae })
    }
}

fn rows_to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty batch"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged batch"));
    }
    let n = rows.len();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Tensor::from_vec(&[n, d], data).map_err(err)
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|i| t.sample(i).to_vec()).collect()
}

/// Deterministic SplitMix64 stream (same values as the engine's generator).
#[pyclass(name = "Rng")]
struct PyRng {
    inner: Rng,
}

#[pymethods]
impl PyRng {
    #[new]
    fn new(seed: u64) -> Self {
        PyRng { inner: Rng::new(seed) }
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn next_f64(&mut self) -> f64 {
        self.inner.next_f64()
    }

    fn normal(&mut self, mean: f64, std: f64) -> f64 {
        self.inner.normal(mean, std)
    }
}

/// Load an IDX image/label pair (gzip transparently) as (samples, labels);
/// samples are flattened to vectors in [0, 1].
#[pyfunction]
fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<(Vec<Vec<f64>>, Vec<u8>)> {
    let ds = core::load_idx(&images, &labels).map_err(err)?;
    let flat = ds.flattened();
    Ok((tensor_to_rows(&flat.inputs), flat.labels.unwrap_or_default()))
}

/// Load CIFAR-10 binary batches as (samples, labels); samples are flattened
/// (32*32*3) channels-last vectors in [0, 1].
#[pyfunction]
fn load_cifar10(batches: Vec<PathBuf>) -> PyResult<(Vec<Vec<f64>>, Vec<u8>)> {
    let ds = core::load_cifar10(&batches).map_err(err)?;
    let flat = ds.flattened();
    Ok((tensor_to_rows(&flat.inputs), flat.labels.unwrap_or_default()))
}

/// Run a TOML experiment config (same behavior as the command line); returns
/// the output directory.
#[pyfunction]
fn run_experiment(config_path: PathBuf) -> PyResult<String> {
    let cfg = RunConfig::from_file(&config_path).map_err(err)?;
    let artifacts = core::run_config(&cfg).map_err(err)?;
    Ok(artifacts.out_dir.display().to_string())
}

#[pymodule]
fn tourbillon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCae>()?;
    m.add_class::<PyRng>()?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(load_cifar10, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
