//! Feed-forward network with a flat parameter view, softmax cross-entropy
//! loss and reverse-mode gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layer::{Layer, LayerSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Labelled samples. `inputs` has a leading batch dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    inputs: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("batch must contain at least one sample".into()));
        }
        if inputs.shape().len() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { inputs, labels, num_classes })
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let width = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.inputs.data()[i * width..(i + 1) * width]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Self::new(Tensor::new(shape, data)?, labels, self.num_classes)
    }

    /// Concatenation of `self` followed by `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.sample_shape() != other.sample_shape() || self.num_classes != other.num_classes {
            return Err(Error::Shape("cannot concatenate batches of different layout".into()));
        }
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(self.sample_shape());
        Self::new(Tensor::new(shape, data)?, labels, self.num_classes)
    }

    /// Same samples with a new per-sample shape of equal size.
    pub fn reshaped(self, sample_shape: &[usize]) -> Result<Self> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        let inputs = self.inputs.reshaped(shape)?;
        Self::new(inputs, self.labels, self.num_classes)
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch { inputs: self.inputs.cast(), labels: self.labels.clone(), num_classes: self.num_classes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A contiguous run of the flat parameter vector belonging to one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBlock {
    pub layer: usize,
    pub kind: ParamKind,
    pub start: usize,
    pub len: usize,
}

/// Output of [`Network::forward`]: mean loss and each layer's output.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub loss: f64,
    pub activations: Vec<Tensor<T>>,
    batch_len: usize,
}

impl<T> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.activations.last().expect("network has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Network<T> {
    /// Validates the layer chain against `input_shape` (per-sample). The
    /// final layer must produce a flat logit vector.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for (k, layer) in layers.iter().enumerate() {
            current = layer
                .spec()
                .output_shape(&current)
                .map_err(|e| Error::Shape(format!("layer {k} ({}): {e}", layer.spec().name())))?;
            shapes.push(current.clone());
        }
        if current.len() != 1 {
            return Err(Error::Shape(format!("network output must be flat logits, got {current:?}")));
        }
        Ok(Self { input_shape, layers, shapes })
    }

    /// Randomly initialised network from specs.
    pub fn from_specs<R: Rng + ?Sized>(input_shape: Vec<usize>, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs.iter().map(|s| Layer::init(s.clone(), rng)).collect::<Result<Vec<_>>>()?;
        Self::new(input_shape, layers)
    }

    /// `[flatten] -> dense -> relu -> ... -> dense(classes)`.
    pub fn mlp<R: Rng + ?Sized>(input_shape: Vec<usize>, hidden: &[usize], classes: usize, rng: &mut R) -> Result<Self> {
        Self::from_specs(input_shape.clone(), &mlp_specs(&input_shape, hidden, classes), rng)
    }

    /// `conv3x3(8) -> relu -> pool -> conv3x3(16) -> relu -> pool -> flatten -> dense(classes)`.
    pub fn tiny_conv<R: Rng + ?Sized>(input_shape: Vec<usize>, classes: usize, rng: &mut R) -> Result<Self> {
        let specs = tiny_conv_specs(&input_shape, classes)?;
        Self::from_specs(input_shape, &specs, rng)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut Layer<T> {
        &mut self.layers[k]
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec().clone()).collect()
    }

    /// Per-sample output shape of layer `k`.
    pub fn output_shape(&self, k: usize) -> &[usize] {
        &self.shapes[k]
    }

    /// Per-sample input shape of layer `k`.
    pub fn input_shape_of(&self, k: usize) -> &[usize] {
        if k == 0 { &self.input_shape } else { &self.shapes[k - 1] }
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().expect("non-empty")[0]
    }

    pub fn same_architecture(&self, other: &Network<T>) -> bool {
        self.input_shape == other.input_shape && self.specs() == other.specs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Number of prunable weights (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(Layer::weight_count).sum()
    }

    /// Indices of layers that carry weights.
    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&k| self.layers[k].spec().is_weighted()).collect()
    }

    /// Layout of the flat parameter vector: per weighted layer, weights then bias.
    pub fn param_index(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut start = 0;
        for (k, layer) in self.layers.iter().enumerate() {
            if let (Some(w), Some(b)) = (layer.weight(), layer.bias()) {
                blocks.push(ParamBlock { layer: k, kind: ParamKind::Weight, start, len: w.len() });
                start += w.len();
                blocks.push(ParamBlock { layer: k, kind: ParamKind::Bias, start, len: b.len() });
                start += b.len();
            }
        }
        blocks
    }

    /// Maps a flat parameter index to `(layer, kind, offset within tensor)`.
    pub fn locate(&self, flat: usize) -> Option<(usize, ParamKind, usize)> {
        self.param_index()
            .into_iter()
            .find(|b| flat >= b.start && flat < b.start + b.len)
            .map(|b| (b.layer, b.kind, flat - b.start))
    }

    /// Layout of the weight-only view: `(layer, start, len)` per weighted layer.
    pub fn weight_blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut start = 0;
        for (k, layer) in self.layers.iter().enumerate() {
            if let Some(w) = layer.weight() {
                blocks.push(ParamBlock { layer: k, kind: ParamKind::Weight, start, len: w.len() });
                start += w.len();
            }
        }
        blocks
    }

    pub fn flatten_params(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            if let (Some(w), Some(b)) = (layer.weight(), layer.bias()) {
                flat.extend_from_slice(w.data());
                flat.extend_from_slice(b.data());
            }
        }
        flat
    }

    /// Overwrites all parameters from a vector in [`Self::flatten_params`] order.
    pub fn unflatten_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, network has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for t in [layer.weight.as_mut(), layer.bias.as_mut()].into_iter().flatten() {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Copy of this network carrying the given parameters.
    pub fn with_params(&self, flat: &[T]) -> Result<Self> {
        let mut net = self.clone();
        net.unflatten_params(flat)?;
        Ok(net)
    }

    pub fn weights_flat(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.weight_count());
        for layer in &self.layers {
            if let Some(w) = layer.weight() {
                flat.extend_from_slice(w.data());
            }
        }
        flat
    }

    pub fn set_weights_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.weight_count() {
            return Err(Error::Shape(format!(
                "weight vector has length {}, network has {} weights",
                flat.len(),
                self.weight_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            if let Some(w) = layer.weight_mut() {
                let n = w.len();
                w.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Expands a weight-view keep mask to the full parameter layout; biases are always kept.
    pub fn param_mask_from_weight_mask(&self, weight_mask: &[bool]) -> Result<Vec<bool>> {
        if weight_mask.len() != self.weight_count() {
            return Err(Error::Shape(format!(
                "mask has length {}, network has {} weights",
                weight_mask.len(),
                self.weight_count()
            )));
        }
        let mut out = Vec::with_capacity(self.param_count());
        let mut offset = 0;
        for layer in &self.layers {
            if let (Some(w), Some(b)) = (layer.weight(), layer.bias()) {
                out.extend_from_slice(&weight_mask[offset..offset + w.len()]);
                offset += w.len();
                out.extend(std::iter::repeat_n(true, b.len()));
            }
        }
        Ok(out)
    }

    /// Runs every layer on `inputs` (`[batch, ..input_shape]`) and returns all layer outputs.
    pub fn activations(&self, inputs: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if inputs.shape().len() < 2 || inputs.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects samples of shape {:?}, got batch {:?}",
                self.input_shape,
                inputs.shape()
            )));
        }
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outs.last().unwrap_or(inputs);
            let out = layer.forward(input)?;
            outs.push(out);
        }
        Ok(outs)
    }

    pub fn logits(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.activations(inputs)?.pop().expect("non-empty"))
    }

    /// Mean softmax cross-entropy over the batch, keeping every layer output.
    pub fn forward(&self, batch: &Batch<T>) -> Result<ForwardPass<T>> {
        if batch.num_classes() != self.num_classes() {
            return Err(Error::Shape(format!(
                "batch has {} classes, network outputs {}",
                batch.num_classes(),
                self.num_classes()
            )));
        }
        let activations = self.activations(batch.inputs())?;
        let logits = activations.last().expect("non-empty");
        let classes = self.num_classes();
        let mut total = 0.0;
        for (row, &y) in logits.data().chunks_exact(classes).zip(batch.labels()) {
            let (lse, _) = log_softmax_parts(row);
            total += lse - row[y].to_acc();
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NumericOverflow(format!("loss is {loss}")));
        }
        Ok(ForwardPass { loss, activations, batch_len: batch.len() })
    }

    pub fn loss(&self, batch: &Batch<T>) -> Result<f64> {
        Ok(self.forward(batch)?.loss)
    }

    /// Gradient of the mean loss with respect to all parameters, in
    /// [`Self::flatten_params`] order. `pass` must come from `forward` on the
    /// same network and batch.
    pub fn backward(&self, pass: &ForwardPass<T>, batch: &Batch<T>) -> Result<Vec<T>> {
        if pass.activations.len() != self.layers.len() || pass.batch_len != batch.len() {
            return Err(Error::Usage(
                "backward needs the forward pass of this network on this batch".into(),
            ));
        }
        for (k, act) in pass.activations.iter().enumerate() {
            if act.shape()[1..] != self.shapes[k][..] {
                return Err(Error::Usage(format!(
                    "forward state does not match layer {k} of this network"
                )));
            }
        }
        let classes = self.num_classes();
        let n = batch.len() as f64;
        let mut delta = Vec::with_capacity(batch.len() * classes);
        for (row, &y) in pass.logits().data().chunks_exact(classes).zip(batch.labels()) {
            let (lse, _) = log_softmax_parts(row);
            for (c, v) in row.iter().enumerate() {
                let p = (v.to_acc() - lse).exp();
                let target = if c == y { 1.0 } else { 0.0 };
                delta.push((p - target) / n);
            }
        }

        let blocks = self.param_index();
        let mut grad = vec![0.0f64; self.param_count()];
        let first_param_layer = blocks.first().map_or(usize::MAX, |b| b.layer);
        for k in (0..self.layers.len()).rev() {
            let input = if k == 0 { batch.inputs() } else { &pass.activations[k - 1] };
            let want_input_grad = k > first_param_layer;
            let layer = &self.layers[k];
            let (gw, gb) = match blocks.iter().position(|b| b.layer == k) {
                Some(i) => {
                    let (w, b) = (blocks[i], blocks[i + 1]);
                    let (head, tail) = grad.split_at_mut(b.start);
                    (&mut head[w.start..w.start + w.len], &mut tail[..b.len])
                }
                None => (&mut [][..], &mut [][..]),
            };
            delta = layer.backward(input, &delta, gw, gb, want_input_grad);
            if !want_input_grad {
                break;
            }
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NumericOverflow(format!("gradient component {i} is {}", grad[i])));
        }
        Ok(grad.into_iter().map(T::from_acc).collect())
    }

    pub fn loss_and_gradient(&self, batch: &Batch<T>) -> Result<(f64, Vec<T>)> {
        let pass = self.forward(batch)?;
        let grad = self.backward(&pass, batch)?;
        Ok((pass.loss, grad))
    }

    /// Gradient restricted to the weight-only view.
    pub fn weight_gradient(&self, batch: &Batch<T>) -> Result<Vec<T>> {
        let (_, grad) = self.loss_and_gradient(batch)?;
        Ok(self
            .param_index()
            .iter()
            .filter(|b| b.kind == ParamKind::Weight)
            .flat_map(|b| grad[b.start..b.start + b.len].iter().copied())
            .collect())
    }

    /// `w <- w - lr * g`, skipping coordinates whose mask entry is `false`.
    pub fn sgd_step(&mut self, gradient: &[T], lr: f64, mask: Option<&[bool]>) -> Result<()> {
        let count = self.param_count();
        if gradient.len() != count {
            return Err(Error::Shape(format!(
                "gradient has length {}, network has {count} parameters",
                gradient.len()
            )));
        }
        if let Some(m) = mask {
            if m.len() != count {
                return Err(Error::Shape(format!(
                    "mask has length {}, network has {count} parameters",
                    m.len()
                )));
            }
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for t in [layer.weight.as_mut(), layer.bias.as_mut()].into_iter().flatten() {
                for (i, w) in t.data_mut().iter_mut().enumerate() {
                    let j = offset + i;
                    if mask.is_some_and(|m| !m[j]) {
                        continue;
                    }
                    *w = T::from_acc(w.to_acc() - lr * gradient[j].to_acc());
                }
                offset += t.len();
            }
        }
        Ok(())
    }

    /// Same network stored in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            shapes: self.shapes.clone(),
        }
    }
}

/// `(logsumexp(row), max(row))` in f64.
fn log_softmax_parts<T: Scalar>(row: &[T]) -> (f64, f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_acc()));
    let sum: f64 = row.iter().map(|v| (v.to_acc() - max).exp()).sum();
    (max + sum.ln(), max)
}

pub fn mlp_specs(input_shape: &[usize], hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    if input_shape.len() > 1 {
        specs.push(LayerSpec::Flatten);
    }
    let mut width: usize = input_shape.iter().product();
    for &h in hidden {
        specs.push(LayerSpec::Dense { input_size: width, output_size: h });
        specs.push(LayerSpec::Relu);
        width = h;
    }
    specs.push(LayerSpec::Dense { input_size: width, output_size: classes });
    specs
}

pub fn tiny_conv_specs(input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    let &[channels, h, w] = input_shape else {
        return Err(Error::Shape(format!(
            "tinyconv needs [channels, height, width] samples, got {input_shape:?}"
        )));
    };
    let conv = |i, o| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel_h: 3,
        kernel_w: 3,
        stride: 1,
        padding: 1,
    };
    let flat = 16 * (h / 2 / 2) * (w / 2 / 2);
    if flat == 0 {
        return Err(Error::Shape(format!("tinyconv input {h}x{w} too small for two poolings")));
    }
    Ok(vec![
        conv(channels, 8),
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        conv(8, 16),
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Dense { input_size: flat, output_size: classes },
    ])
}
