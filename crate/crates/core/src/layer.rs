//! Layer kinds with forward kernels and reverse-mode gradient kernels.
//!
//! Shapes here are per-sample (`[features]` or `[channels, height, width]`);
//! batched tensors carry an extra leading dimension.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input_size: usize,
        output_size: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { input_size, output_size } => Some(vec![output_size, input_size]),
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
                Some(vec![out_channels, in_channels, kernel_h, kernel_w])
            }
            _ => None,
        }
    }

    pub fn bias_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { output_size, .. } => Some(vec![output_size]),
            LayerSpec::Conv2d { out_channels, .. } => Some(vec![out_channels]),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { input_size, output_size } => {
                if input != [input_size] {
                    return Err(Error::Shape(format!(
                        "dense layer expects input [{input_size}], got {input:?}"
                    )));
                }
                Ok(vec![output_size])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
                let &[c, h, w] = input else {
                    return Err(Error::Shape(format!(
                        "conv2d expects [channels, height, width], got {input:?}"
                    )));
                };
                if c != in_channels {
                    return Err(Error::Shape(format!(
                        "conv2d expects {in_channels} input channels, got {c}"
                    )));
                }
                if stride == 0 {
                    return Err(Error::Shape("conv2d stride must be positive".into()));
                }
                let out_h = conv_out_dim(h, kernel_h, stride, padding)?;
                let out_w = conv_out_dim(w, kernel_w, stride, padding)?;
                Ok(vec![out_channels, out_h, out_w])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::MaxPool2x2 => {
                let &[c, h, w] = input else {
                    return Err(Error::Shape(format!(
                        "maxpool2x2 expects [channels, height, width], got {input:?}"
                    )));
                };
                if h < 2 || w < 2 {
                    return Err(Error::Shape(format!("maxpool2x2 input {h}x{w} too small")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
        }
    }
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// A layer and its parameters. Only dense and conv2d carry parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    spec: LayerSpec,
    pub(crate) weight: Option<Tensor<T>>,
    pub(crate) bias: Option<Tensor<T>>,
}

impl<T: Scalar> Layer<T> {
    /// Builds a layer, checking parameter shapes against the spec.
    pub fn new(spec: LayerSpec, weight: Option<Tensor<T>>, bias: Option<Tensor<T>>) -> Result<Self> {
        let check = |t: &Option<Tensor<T>>, want: Option<Vec<usize>>, what: &str| -> Result<()> {
            match (t, want) {
                (None, None) => Ok(()),
                (Some(t), Some(w)) if t.shape() == w.as_slice() => Ok(()),
                (Some(t), Some(w)) => Err(Error::Shape(format!(
                    "{} {what} has shape {:?}, expected {w:?}",
                    spec.name(),
                    t.shape()
                ))),
                (None, Some(_)) => Err(Error::Shape(format!("{} needs a {what}", spec.name()))),
                (Some(_), None) => Err(Error::Shape(format!("{} takes no {what}", spec.name()))),
            }
        };
        check(&weight, spec.weight_shape(), "weight")?;
        check(&bias, spec.bias_shape(), "bias")?;
        Ok(Self { spec, weight, bias })
    }

    /// Dense layer from a row-major `[output, input]` weight matrix.
    pub fn dense(input_size: usize, output_size: usize, weight: &[f64], bias: &[f64]) -> Result<Self> {
        Self::new(
            LayerSpec::Dense { input_size, output_size },
            Some(Tensor::from_f64(vec![output_size, input_size], weight)?),
            Some(Tensor::from_f64(vec![output_size], bias)?),
        )
    }

    pub fn activation(spec: LayerSpec) -> Result<Self> {
        Self::new(spec, None, None)
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        let (weight, bias) = match (spec.weight_shape(), spec.bias_shape()) {
            (Some(ws), Some(bs)) => {
                let fan_in: usize = ws[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n: usize = ws.iter().product();
                let data = (0..n).map(|_| T::from_acc(rng.random_range(-bound..bound))).collect();
                (Some(Tensor::new(ws, data)?), Some(Tensor::zeros(bs)))
            }
            _ => (None, None),
        };
        Self::new(spec, weight, bias)
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weight(&self) -> Option<&Tensor<T>> {
        self.weight.as_ref()
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.weight.as_mut()
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.bias.as_mut()
    }

    pub fn weight_count(&self) -> usize {
        self.weight.as_ref().map_or(0, Tensor::len)
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub(crate) fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            spec: self.spec.clone(),
            weight: self.weight.as_ref().map(Tensor::cast),
            bias: self.bias.as_ref().map(Tensor::cast),
        }
    }

    /// Batched forward pass; `input` is `[batch, ..per-sample shape]`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = input.shape()[0];
        let sample = &input.shape()[1..];
        let out_sample = self.spec.output_shape(sample)?;
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&out_sample);
        let x = input.data();
        let out = match self.spec {
            LayerSpec::Dense { input_size, output_size } => {
                let w = self.weight.as_ref().expect("dense weight").data();
                let b = self.bias.as_ref().expect("dense bias").data();
                let mut out = Vec::with_capacity(batch * output_size);
                for xs in x.chunks_exact(input_size) {
                    for (row, bias) in w.chunks_exact(input_size).zip(b) {
                        let mut acc = bias.to_acc();
                        for (wi, xi) in row.iter().zip(xs) {
                            acc += wi.to_acc() * xi.to_acc();
                        }
                        out.push(T::from_acc(acc));
                    }
                }
                out
            }
            LayerSpec::Conv2d { .. } => {
                let geo = ConvGeometry::new(&self.spec, sample, &out_sample);
                conv_forward(
                    &geo,
                    x,
                    self.weight.as_ref().expect("conv weight").data(),
                    self.bias.as_ref().expect("conv bias").data(),
                    batch,
                )
            }
            LayerSpec::Relu => x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            LayerSpec::Flatten => x.to_vec(),
            LayerSpec::MaxPool2x2 => {
                let (c, h, w) = (sample[0], sample[1], sample[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(batch * c * oh * ow);
                for plane in x.chunks_exact(h * w) {
                    for i in 0..oh {
                        for j in 0..ow {
                            let (r, s) = pool_argmax(plane, w, i, j);
                            out.push(plane[r * w + s]);
                        }
                    }
                }
                out
            }
        };
        Tensor::new(out_shape, out)
    }

    /// Reverse-mode step. Accumulates parameter gradients into `grad_weight`
    /// and `grad_bias` (empty for parameter-free layers) and returns the
    /// gradient with respect to `input` when `want_input_grad` is set.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &[f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        want_input_grad: bool,
    ) -> Vec<f64> {
        let batch = input.shape()[0];
        let sample = &input.shape()[1..];
        let x = input.data();
        match self.spec {
            LayerSpec::Dense { input_size, output_size } => {
                let w = self.weight.as_ref().expect("dense weight").data();
                let mut grad_in = if want_input_grad { vec![0.0; x.len()] } else { Vec::new() };
                for b in 0..batch {
                    let xs = &x[b * input_size..(b + 1) * input_size];
                    let ds = &grad_out[b * output_size..(b + 1) * output_size];
                    for (o, &d) in ds.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        grad_bias[o] += d;
                        let gw = &mut grad_weight[o * input_size..(o + 1) * input_size];
                        for (g, xi) in gw.iter_mut().zip(xs) {
                            *g += d * xi.to_acc();
                        }
                        if want_input_grad {
                            let row = &w[o * input_size..(o + 1) * input_size];
                            let gi = &mut grad_in[b * input_size..(b + 1) * input_size];
                            for (g, wi) in gi.iter_mut().zip(row) {
                                *g += d * wi.to_acc();
                            }
                        }
                    }
                }
                grad_in
            }
            LayerSpec::Conv2d { .. } => {
                let out_sample = self.spec.output_shape(sample).expect("validated shape");
                let geo = ConvGeometry::new(&self.spec, sample, &out_sample);
                conv_backward(
                    &geo,
                    x,
                    self.weight.as_ref().expect("conv weight").data(),
                    grad_out,
                    grad_weight,
                    grad_bias,
                    batch,
                    want_input_grad,
                )
            }
            LayerSpec::Relu => x
                .iter()
                .zip(grad_out)
                .map(|(v, &g)| if *v > T::zero() { g } else { 0.0 })
                .collect(),
            LayerSpec::Flatten => grad_out.to_vec(),
            LayerSpec::MaxPool2x2 => {
                let (h, w) = (sample[1], sample[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut grad_in = vec![0.0; x.len()];
                for (p, plane) in x.chunks_exact(h * w).enumerate() {
                    for i in 0..oh {
                        for j in 0..ow {
                            let (r, s) = pool_argmax(plane, w, i, j);
                            grad_in[p * h * w + r * w + s] += grad_out[p * oh * ow + i * ow + j];
                        }
                    }
                }
                grad_in
            }
        }
    }
}

/// Position of the first maximum in the 2x2 window at output cell `(i, j)`.
fn pool_argmax<T: Scalar>(plane: &[T], width: usize, i: usize, j: usize) -> (usize, usize) {
    let mut best = (2 * i, 2 * j);
    for (r, s) in [(2 * i, 2 * j + 1), (2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1)] {
        if plane[r * width + s] > plane[best.0 * width + best.1] {
            best = (r, s);
        }
    }
    best
}

struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(spec: &LayerSpec, input: &[usize], output: &[usize]) -> Self {
        let LayerSpec::Conv2d { kernel_h, kernel_w, stride, padding, .. } = *spec else {
            unreachable!("conv geometry for non-conv layer")
        };
        Self {
            in_c: input[0],
            in_h: input[1],
            in_w: input[2],
            out_c: output[0],
            out_h: output[1],
            out_w: output[2],
            k_h: kernel_h,
            k_w: kernel_w,
            stride,
            padding,
        }
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.padding)?;
        (pos < limit).then_some(pos)
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], bias: &[T], batch: usize) -> Vec<T> {
    let in_plane = g.in_h * g.in_w;
    let in_sample = g.in_c * in_plane;
    let kernel = g.in_c * g.k_h * g.k_w;
    let mut out = Vec::with_capacity(batch * g.out_c * g.out_h * g.out_w);
    for b in 0..batch {
        let xs = &x[b * in_sample..(b + 1) * in_sample];
        for oc in 0..g.out_c {
            let wk = &w[oc * kernel..(oc + 1) * kernel];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = bias[oc].to_acc();
                    for ic in 0..g.in_c {
                        for kh in 0..g.k_h {
                            let Some(ih) = g.source(oh, kh, g.in_h) else { continue };
                            for kw in 0..g.k_w {
                                let Some(iw) = g.source(ow, kw, g.in_w) else { continue };
                                acc += wk[(ic * g.k_h + kh) * g.k_w + kw].to_acc()
                                    * xs[ic * in_plane + ih * g.in_w + iw].to_acc();
                            }
                        }
                    }
                    out.push(T::from_acc(acc));
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    batch: usize,
    want_input_grad: bool,
) -> Vec<f64> {
    let in_plane = g.in_h * g.in_w;
    let in_sample = g.in_c * in_plane;
    let out_plane = g.out_h * g.out_w;
    let kernel = g.in_c * g.k_h * g.k_w;
    let mut grad_in = if want_input_grad { vec![0.0; x.len()] } else { Vec::new() };
    for b in 0..batch {
        let xs = &x[b * in_sample..(b + 1) * in_sample];
        for oc in 0..g.out_c {
            let ds = &grad_out[(b * g.out_c + oc) * out_plane..(b * g.out_c + oc + 1) * out_plane];
            let wk = &w[oc * kernel..(oc + 1) * kernel];
            let gw = &mut grad_weight[oc * kernel..(oc + 1) * kernel];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let d = ds[oh * g.out_w + ow];
                    if d == 0.0 {
                        continue;
                    }
                    grad_bias[oc] += d;
                    for ic in 0..g.in_c {
                        for kh in 0..g.k_h {
                            let Some(ih) = g.source(oh, kh, g.in_h) else { continue };
                            for kw in 0..g.k_w {
                                let Some(iw) = g.source(ow, kw, g.in_w) else { continue };
                                let widx = (ic * g.k_h + kh) * g.k_w + kw;
                                let xidx = ic * in_plane + ih * g.in_w + iw;
                                gw[widx] += d * xs[xidx].to_acc();
                                if want_input_grad {
                                    grad_in[b * in_sample + xidx] += d * wk[widx].to_acc();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}
