//! Layer definitions and the forward pass.
//!
//! A network is an ordered list of layers. Dense and conv2d layers carry
//! weights and a bias; pooling, upsampling, reshape, and activation layers
//! only transport activities. Activation functions are standalone layers so
//! that local learning rules can address the pre- and post-activation values
//! of an adaptive layer separately.
//!
//! Image tensors are channels-last (H, W, C) and every tensor entering
//! `forward` carries a leading batch dimension.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::rng::Rng;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Logistic,
    Relu,
    Softmax,
    Linear,
}

impl Activation {
    pub fn is_nonlinear(self) -> bool {
        !matches!(self, Activation::Linear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding chosen so the output spatial size is ceil(input / stride).
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        window: usize,
    },
    Upsample2d {
        factor: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Activation {
        function: Activation,
    },
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize) -> LayerSpec {
        LayerSpec::Dense { input, output }
    }

    pub fn conv2d(
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    ) -> LayerSpec {
        LayerSpec::Conv2d {
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels,
            out_channels,
            stride,
            padding,
        }
    }

    pub fn activation(function: Activation) -> LayerSpec {
        LayerSpec::Activation { function }
    }

    /// Dense and conv2d layers carry weights.
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output sample shape for a given input sample shape.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            layer: 0, // re-tagged with the real index by Network::infer_shapes
            expected,
            got: input.to_vec(),
        };
        match self {
            LayerSpec::Dense { input: n_in, output } => {
                if input.iter().product::<usize>() != *n_in {
                    return Err(mismatch(vec![*n_in]));
                }
                Ok(vec![*output])
            }
            LayerSpec::Conv2d { .. } => {
                let g = ConvGeom::new(self, input)?;
                Ok(vec![g.out_h, g.out_w, g.c_out])
            }
            LayerSpec::MaxPool2d { window } => {
                if *window == 0 {
                    return Err(Error::Unsupported("maxpool window must be positive".into()));
                }
                let [h, w, c] = image_dims(input).ok_or_else(|| mismatch(vec![0, 0, 0]))?;
                if h < *window || w < *window {
                    return Err(mismatch(vec![*window, *window, c]));
                }
                Ok(vec![h / window, w / window, c])
            }
            LayerSpec::Upsample2d { factor } => {
                if *factor == 0 {
                    return Err(Error::Unsupported("upsample factor must be positive".into()));
                }
                let [h, w, c] = image_dims(input).ok_or_else(|| mismatch(vec![0, 0, 0]))?;
                Ok(vec![h * factor, w * factor, c])
            }
            LayerSpec::Reshape { shape } => {
                if input.iter().product::<usize>() != shape.iter().product::<usize>() {
                    return Err(mismatch(shape.clone()));
                }
                Ok(shape.clone())
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
        }
    }
}

fn image_dims(shape: &[usize]) -> Option<[usize; 3]> {
    match shape {
        [h, w, c] => Some([*h, *w, *c]),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in +/- sqrt(6 / (fan_in + fan_out)); biases zero.
    Glorot,
    /// N(0, std^2); biases zero.
    Normal { std: f64 },
}

/// Freshly drawn (weights, bias) for a parametric layer spec.
pub fn init_weights(spec: &LayerSpec, scheme: InitScheme, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let (w_shape, bias_len, fan_in, fan_out) = match spec {
        LayerSpec::Dense { input, output } => (vec![*output, *input], *output, *input, *output),
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            ..
        } => (
            vec![*kernel_h, *kernel_w, *in_channels, *out_channels],
            *out_channels,
            kernel_h * kernel_w * in_channels,
            kernel_h * kernel_w * out_channels,
        ),
        _ => return Err(Error::NoWeights),
    };
    let n: usize = w_shape.iter().product();
    let data: Vec<f64> = match scheme {
        InitScheme::Glorot => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.uniform(-limit, limit)).collect()
        }
        InitScheme::Normal { std } => (0..n).map(|_| rng.normal(0.0, std)).collect(),
    };
    Ok((
        Tensor::from_parts(w_shape, data),
        Tensor::zeros(&[bias_len]),
    ))
}

/// A layer spec plus its parameters (for dense/conv2d layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl Layer {
    /// Build a layer, drawing parameters when the spec needs them.
    pub fn new(spec: LayerSpec, scheme: InitScheme, rng: &mut Rng) -> Layer {
        if spec.is_parametric() {
            let (w, b) = init_weights(&spec, scheme, rng).expect("parametric spec");
            Layer {
                spec,
                weights: Some(w),
                bias: Some(b),
            }
        } else {
            Layer {
                spec,
                weights: None,
                bias: None,
            }
        }
    }

    pub fn with_params(spec: LayerSpec, weights: Tensor, bias: Tensor) -> Layer {
        Layer {
            spec,
            weights: Some(weights),
            bias: Some(bias),
        }
    }

    pub fn fixed(spec: LayerSpec) -> Layer {
        Layer {
            spec,
            weights: None,
            bias: None,
        }
    }

    pub fn is_adaptive(&self) -> bool {
        self.weights.is_some()
    }
}

/// An ordered sequence of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Network {
        Network { layers }
    }

    /// Per-layer output sample shapes, or an error naming the offending layer.
    pub fn infer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.spec.out_shape(&cur).map_err(|e| match e {
                Error::ShapeMismatch { expected, got, .. } => Error::ShapeMismatch {
                    layer: i,
                    expected,
                    got,
                },
                other => other,
            })?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(self
            .infer_shapes(input)?
            .last()
            .cloned()
            .unwrap_or_else(|| input.to_vec()))
    }

    /// Indices of the adaptive (weight-carrying) layers, in forward order.
    pub fn adaptive_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_adaptive())
            .map(|(i, _)| i)
            .collect()
    }

    /// Activation function applied on top of the final layer, if the network
    /// ends with an activation layer; `Linear` otherwise.
    pub fn output_activation(&self) -> Activation {
        match self.layers.last().map(|l| &l.spec) {
            Some(LayerSpec::Activation { function }) => *function,
            _ => Activation::Linear,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Activations> {
        forward(self, input)
    }
}

/// Per-layer outputs of a forward pass. `outputs[i]` is the output of layer i;
/// the input of layer i is `outputs[i-1]` (or the stored network input).
/// Max-pool layers additionally record, for every output element, the flat
/// offset of the winning input element so a backward pass can route to it.
#[derive(Debug, Clone)]
pub struct Activations {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    pub pool_indices: Vec<Option<Vec<u32>>>,
}

impl Activations {
    /// Input tensor of layer `i`.
    pub fn input_of(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }

    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }
}

/// Run the network on a batched input, keeping every layer's output.
pub fn forward(network: &Network, input: &Tensor) -> Result<Activations> {
    forward_upto(network, input, network.layers.len())
}

/// Forward through layers [0, upto) only; the returned activations hold
/// entries for exactly those layers.
pub(crate) fn forward_upto(network: &Network, input: &Tensor, upto: usize) -> Result<Activations> {
    if input.shape().is_empty() {
        return Err(Error::BadTensor {
            shape: input.shape().to_vec(),
            expected: 1,
            got: 0,
        });
    }
    let mut outputs = Vec::with_capacity(upto);
    let mut pool_indices = vec![None; upto];
    let mut cur = input.clone();
    for (i, layer) in network.layers.iter().take(upto).enumerate() {
        let sample_shape = cur.sample_shape().to_vec();
        layer.spec.out_shape(&sample_shape).map_err(|e| match e {
            Error::ShapeMismatch { expected, got, .. } => Error::ShapeMismatch {
                layer: i,
                expected,
                got,
            },
            other => other,
        })?;
        let (out, idx) = layer_forward(layer, &cur)?;
        pool_indices[i] = idx;
        outputs.push(out.clone());
        cur = out;
    }
    Ok(Activations {
        input: input.clone(),
        outputs,
        pool_indices,
    })
}

fn layer_forward(layer: &Layer, input: &Tensor) -> Result<(Tensor, Option<Vec<u32>>)> {
    match &layer.spec {
        LayerSpec::Dense { input: n_in, output } => {
            let w = layer.weights.as_ref().expect("dense weights");
            let b = layer.bias.as_ref().expect("dense bias");
            Ok((dense_forward(input, w, b, *n_in, *output), None))
        }
        LayerSpec::Conv2d { .. } => {
            let g = ConvGeom::new(&layer.spec, input.sample_shape())?;
            let w = layer.weights.as_ref().expect("conv weights");
            let b = layer.bias.as_ref().expect("conv bias");
            Ok((conv_forward(input, &g, w, b), None))
        }
        LayerSpec::MaxPool2d { window } => {
            let (out, idx) = maxpool_forward(input, *window);
            Ok((out, Some(idx)))
        }
        LayerSpec::Upsample2d { factor } => Ok((upsample_forward(input, *factor), None)),
        LayerSpec::Reshape { shape } => {
            let mut full = vec![input.batch()];
            full.extend_from_slice(shape);
            Ok((input.reshaped(&full)?, None))
        }
        LayerSpec::Activation { function } => Ok((activate(input, *function), None)),
    }
}

fn dense_forward(input: &Tensor, w: &Tensor, b: &Tensor, n_in: usize, n_out: usize) -> Tensor {
    let batch = input.batch();
    let mut out = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        out.extend_from_slice(b.data());
    }
    // out(B, n_out) += x(B, n_in) * W(n_out, n_in)^T
    gemm(
        batch,
        n_in,
        n_out,
        1.0,
        input.data(),
        false,
        w.data(),
        true,
        1.0,
        &mut out,
    );
    Tensor::from_parts(vec![batch, n_out], out)
}

pub(crate) fn activate(input: &Tensor, function: Activation) -> Tensor {
    let mut data = input.data().to_vec();
    match function {
        Activation::Tanh => data.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Logistic => data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        Activation::Relu => data.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Linear => {}
        Activation::Softmax => {
            let n = input.sample_len();
            for sample in data.chunks_mut(n) {
                let max = sample.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in sample.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in sample.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Pull `delta` at a layer's output back to its input through the activation
/// function: elementwise f' for pointwise functions, the full Jacobian for
/// softmax. `input`/`output` are the activation layer's own input and output.
pub(crate) fn activation_backward(
    function: Activation,
    input: &Tensor,
    output: &Tensor,
    delta: &Tensor,
) -> Tensor {
    let mut data = delta.data().to_vec();
    match function {
        Activation::Tanh => {
            for (d, y) in data.iter_mut().zip(output.data()) {
                *d *= 1.0 - y * y;
            }
        }
        Activation::Logistic => {
            for (d, y) in data.iter_mut().zip(output.data()) {
                *d *= y * (1.0 - y);
            }
        }
        Activation::Relu => {
            for (d, x) in data.iter_mut().zip(input.data()) {
                if *x <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        Activation::Linear => {}
        Activation::Softmax => {
            let n = delta.sample_len();
            for (chunk, s) in data.chunks_mut(n).zip(output.data().chunks(n)) {
                let dot: f64 = chunk.iter().zip(s).map(|(d, y)| d * y).sum();
                for (d, y) in chunk.iter_mut().zip(s) {
                    *d = y * (*d - dot);
                }
            }
        }
    }
    Tensor::from_parts(delta.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Resolved geometry of a conv2d layer on a concrete input shape.
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(spec: &LayerSpec, input: &[usize]) -> Result<ConvGeom> {
        let LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            stride,
            padding,
        } = spec
        else {
            unreachable!("ConvGeom on non-conv spec")
        };
        if *stride == 0 {
            return Err(Error::Unsupported("conv stride must be positive".into()));
        }
        let [h, w, c] = image_dims(input).ok_or_else(|| Error::ShapeMismatch {
            layer: 0,
            expected: vec![0, 0, *in_channels],
            got: input.to_vec(),
        })?;
        if c != *in_channels {
            return Err(Error::ShapeMismatch {
                layer: 0,
                expected: vec![h, w, *in_channels],
                got: input.to_vec(),
            });
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let out_h = h.div_ceil(*stride);
                let out_w = w.div_ceil(*stride);
                let pad_h = ((out_h - 1) * stride + kernel_h).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kernel_w).saturating_sub(w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if h < *kernel_h || w < *kernel_w {
                    return Err(Error::ShapeMismatch {
                        layer: 0,
                        expected: vec![*kernel_h, *kernel_w, *in_channels],
                        got: input.to_vec(),
                    });
                }
                ((h - kernel_h) / stride + 1, (w - kernel_w) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            h,
            w,
            c_in: *in_channels,
            c_out: *out_channels,
            kh: *kernel_h,
            kw: *kernel_w,
            stride: *stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Gather the input patches of one sample into `patches`
    /// (out_positions x patch_len, row-major). Out-of-image taps read zero.
    fn im2col(&self, sample: &[f64], patches: &mut [f64]) {
        patches.fill(0.0);
        let pl = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = (oy * self.out_w + ox) * pl;
                let base_y = (oy * self.stride) as isize - self.pad_top as isize;
                let base_x = (ox * self.stride) as isize - self.pad_left as isize;
                for ky in 0..self.kh {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = base_x + kx as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = ((iy as usize * self.w) + ix as usize) * self.c_in;
                        let dst = row + (ky * self.kw + kx) * self.c_in;
                        patches[dst..dst + self.c_in]
                            .copy_from_slice(&sample[src..src + self.c_in]);
                    }
                }
            }
        }
    }

    /// Scatter-add patch-space values back onto an input-shaped sample.
    fn col2im(&self, patches: &[f64], sample: &mut [f64]) {
        let pl = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = (oy * self.out_w + ox) * pl;
                let base_y = (oy * self.stride) as isize - self.pad_top as isize;
                let base_x = (ox * self.stride) as isize - self.pad_left as isize;
                for ky in 0..self.kh {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = base_x + kx as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = ((iy as usize * self.w) + ix as usize) * self.c_in;
                        let src = row + (ky * self.kw + kx) * self.c_in;
                        for c in 0..self.c_in {
                            sample[dst + c] += patches[src + c];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(input: &Tensor, g: &ConvGeom, w: &Tensor, b: &Tensor) -> Tensor {
    let batch = input.batch();
    let out_len = g.out_positions() * g.c_out;
    let mut out = vec![0.0; batch * out_len];
    let in_len = input.sample_len();
    out.par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each(|(out_sample, in_sample)| {
            let mut patches = vec![0.0; g.out_positions() * g.patch_len()];
            g.im2col(in_sample, &mut patches);
            for pos in 0..g.out_positions() {
                out_sample[pos * g.c_out..(pos + 1) * g.c_out].copy_from_slice(b.data());
            }
            // (positions, patch) x (patch, c_out); the (kh,kw,c_in,c_out)
            // kernel is already that matrix in row-major order.
            gemm(
                g.out_positions(),
                g.patch_len(),
                g.c_out,
                1.0,
                &patches,
                false,
                w.data(),
                false,
                1.0,
                out_sample,
            );
        });
    Tensor::from_parts(vec![batch, g.out_h, g.out_w, g.c_out], out)
}

/// Transposed convolution of `delta` with `kernel`: maps output-shaped deltas
/// back to input-shaped ones. The kernel may be the forward weights (exact
/// gradient) or a fixed random tensor of the same shape (feedback alignment).
pub(crate) fn conv_backward_data(delta: &Tensor, g: &ConvGeom, kernel: &Tensor) -> Tensor {
    let batch = delta.batch();
    let in_len = g.h * g.w * g.c_in;
    let out_len = delta.sample_len();
    let mut din = vec![0.0; batch * in_len];
    din.par_chunks_mut(in_len)
        .zip(delta.data().par_chunks(out_len))
        .for_each(|(din_sample, d_sample)| {
            // patch-space deltas = delta(positions, c_out) x kernel^T
            let mut dpatches = vec![0.0; g.out_positions() * g.patch_len()];
            gemm(
                g.out_positions(),
                g.c_out,
                g.patch_len(),
                1.0,
                d_sample,
                false,
                kernel.data(),
                true,
                0.0,
                &mut dpatches,
            );
            g.col2im(&dpatches, din_sample);
        });
    Tensor::from_parts(vec![batch, g.h, g.w, g.c_in], din)
}

/// Kernel and bias gradients, summed over all spatial positions and batch
/// samples (exact shared-weight gradient).
pub(crate) fn conv_param_grad(input: &Tensor, delta: &Tensor, g: &ConvGeom) -> (Tensor, Tensor) {
    let batch = input.batch();
    let mut dk = vec![0.0; g.patch_len() * g.c_out];
    let mut db = vec![0.0; g.c_out];
    let mut patches = vec![0.0; g.out_positions() * g.patch_len()];
    for s in 0..batch {
        g.im2col(input.sample(s), &mut patches);
        let d_sample = delta.sample(s);
        // dk(patch, c_out) += patches^T x delta(positions, c_out)
        gemm(
            g.patch_len(),
            g.out_positions(),
            g.c_out,
            1.0,
            &patches,
            true,
            d_sample,
            false,
            1.0,
            &mut dk,
        );
        for pos in 0..g.out_positions() {
            for c in 0..g.c_out {
                db[c] += d_sample[pos * g.c_out + c];
            }
        }
    }
    (
        Tensor::from_parts(vec![g.kh, g.kw, g.c_in, g.c_out], dk),
        Tensor::from_parts(vec![g.c_out], db),
    )
}

// ---------------------------------------------------------------------------
// Pooling and upsampling
// ---------------------------------------------------------------------------

fn maxpool_forward(input: &Tensor, window: usize) -> (Tensor, Vec<u32>) {
    let batch = input.batch();
    let [h, w, c] = image_dims(input.sample_shape()).expect("image input");
    let (oh, ow) = (h / window, w / window);
    let out_len = oh * ow * c;
    let mut out = vec![0.0; batch * out_len];
    let mut indices = vec![0u32; batch * out_len];
    for s in 0..batch {
        let sample = input.sample(s);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = oy * window + ky;
                            let ix = ox * window + kx;
                            let idx = (iy * w + ix) * c + ch;
                            // ties go to the first (row-major) position
                            if sample[idx] > best {
                                best = sample[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = s * out_len + (oy * ow + ox) * c + ch;
                    out[o] = best;
                    indices[o] = best_idx;
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![batch, oh, ow, c], out),
        indices,
    )
}

/// Route output deltas to the recorded argmax positions.
pub(crate) fn maxpool_backward(delta: &Tensor, indices: &[u32], in_shape: &[usize]) -> Tensor {
    let batch = delta.batch();
    let in_len: usize = in_shape.iter().product();
    let out_len = delta.sample_len();
    let mut din = vec![0.0; batch * in_len];
    for s in 0..batch {
        let d_sample = delta.sample(s);
        for (o, d) in d_sample.iter().enumerate() {
            let src = indices[s * out_len + o] as usize;
            din[s * in_len + src] += d;
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(in_shape);
    Tensor::from_parts(shape, din)
}

fn upsample_forward(input: &Tensor, factor: usize) -> Tensor {
    let batch = input.batch();
    let [h, w, c] = image_dims(input.sample_shape()).expect("image input");
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; batch * oh * ow * c];
    for s in 0..batch {
        let sample = input.sample(s);
        let out_sample = &mut out[s * oh * ow * c..(s + 1) * oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((oy / factor) * w + (ox / factor)) * c;
                let dst = (oy * ow + ox) * c;
                out_sample[dst..dst + c].copy_from_slice(&sample[src..src + c]);
            }
        }
    }
    Tensor::from_parts(vec![batch, oh, ow, c], out)
}

/// Sum output deltas over the positions each input element was replicated to.
pub(crate) fn upsample_backward(delta: &Tensor, factor: usize, in_shape: &[usize]) -> Tensor {
    let batch = delta.batch();
    let [h, w, c] = image_dims(in_shape).expect("image input");
    let (oh, ow) = (h * factor, w * factor);
    let in_len = h * w * c;
    let mut din = vec![0.0; batch * in_len];
    for s in 0..batch {
        let d_sample = delta.sample(s);
        let din_sample = &mut din[s * in_len..(s + 1) * in_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((oy / factor) * w + (ox / factor)) * c;
                let src = (oy * ow + ox) * c;
                for ch in 0..c {
                    din_sample[dst + ch] += d_sample[src + ch];
                }
            }
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(in_shape);
    Tensor::from_parts(shape, din)
}
