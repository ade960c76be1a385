//! The embedding network: optional 3×3 convolution with ReLU, global average
//! pooling, a stack of dense layers, an optional reduction layer and a final
//! L2 normalization. Forward and backward passes are written out by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Payload, Record};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, FeatureMap, Matrix, NORM_EPSILON};

/// Shape of the records the network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Flat feature vectors of a fixed length.
    Vector { dim: usize },
    /// Feature maps with a fixed channel count and any spatial size.
    Map { channels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input: InputKind,
    /// Output channels of the optional same-padded 3×3 convolution.
    pub conv_channels: Option<usize>,
    /// Dense layer widths; the last entry is the embedding dimension.
    pub dense_dims: Vec<usize>,
    /// Width of the optional reduction layer appended after the embedding.
    pub fc_reduction: Option<usize>,
}

impl ModelConfig {
    /// Dense-only network over vector inputs.
    pub fn dense(input_dim: usize, dense_dims: &[usize]) -> Self {
        Self {
            input: InputKind::Vector { dim: input_dim },
            conv_channels: None,
            dense_dims: dense_dims.to_vec(),
            fc_reduction: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.input {
            InputKind::Vector { dim: 0 } | InputKind::Map { channels: 0 } => {
                return Err(Error::invalid("input dimension must be positive"));
            }
            InputKind::Vector { .. } if self.conv_channels.is_some() => {
                return Err(Error::invalid("convolution requires feature-map input"));
            }
            _ => {}
        }
        if self.conv_channels == Some(0) {
            return Err(Error::invalid("convolution must have at least one output channel"));
        }
        if self.dense_dims.is_empty() {
            return Err(Error::invalid("at least one dense layer is required"));
        }
        if self.dense_dims.contains(&0) {
            return Err(Error::invalid("dense layer widths must be positive"));
        }
        if let Some(r) = self.fc_reduction {
            let f = self.embedding_dim();
            if r == 0 || r >= f {
                return Err(Error::invalid(format!(
                    "reduction width {r} must lie in 1..{f} (below the embedding dimension)"
                )));
            }
        }
        Ok(())
    }

    /// Width of the last dense layer (before any reduction layer).
    pub fn embedding_dim(&self) -> usize {
        *self.dense_dims.last().expect("validated config has dense layers")
    }

    /// Width of the network output.
    pub fn output_dim(&self) -> usize {
        self.fc_reduction.unwrap_or_else(|| self.embedding_dim())
    }

    /// Per-layer shapes in evaluation order.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::new();
        let mut width = match self.input {
            InputKind::Vector { dim } => dim,
            InputKind::Map { channels } => channels,
        };
        if let Some(out) = self.conv_channels {
            shapes.push(LayerShape {
                kind: LayerKind::Conv3x3,
                inputs: width,
                outputs: out,
            });
            width = out;
        }
        for &out in self.dense_dims.iter().chain(self.fc_reduction.iter()) {
            shapes.push(LayerShape {
                kind: LayerKind::Dense,
                inputs: width,
                outputs: out,
            });
            width = out;
        }
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::num_params).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => self.outputs * self.inputs * 9,
            LayerKind::Dense => self.outputs * self.inputs,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => self.inputs * 9,
            LayerKind::Dense => self.inputs,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight_len() + self.outputs
    }
}

/// Weights and biases of one layer.
///
/// Dense weights are `[out][in]`; convolution weights are `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub shape: LayerShape,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// All trainable parameters of a network, together with its configuration.
///
/// Also used for gradients, which share the exact layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    config: ModelConfig,
    layers: Vec<LayerParams>,
}

impl ParamSet {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|shape| LayerParams {
                shape,
                weight: vec![0.0; shape.weight_len()],
                bias: vec![0.0; shape.outputs],
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation of `weight, bias` for every layer in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn unflatten(config: &ModelConfig, values: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        if values.len() != params.len() {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, configuration needs {}",
                values.len(),
                params.len()
            )));
        }
        let mut rest = values;
        for layer in &mut params.layers {
            let (w, tail) = rest.split_at(layer.weight.len());
            layer.weight.copy_from_slice(w);
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(params)
    }

    /// Visits every parameter value in flatten order.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    /// Copies every leading layer whose shape matches `base`, leaving the
    /// rest untouched. Used to start a reduction network from a trained
    /// embedding network.
    pub fn warm_start_from(&mut self, base: &ParamSet) -> usize {
        let mut copied = 0;
        for (dst, src) in self.layers.iter_mut().zip(&base.layers) {
            if dst.shape != src.shape {
                break;
            }
            dst.weight.clone_from(&src.weight);
            dst.bias.clone_from(&src.bias);
            copied += 1;
        }
        copied
    }
}

/// He-style uniform initialization: weights in `±sqrt(6 / fan_in)`, zero
/// biases. Deterministic in `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    let mut params = ParamSet::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut params.layers {
        let bound = (6.0 / layer.shape.fan_in() as f64).sqrt();
        for w in &mut layer.weight {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Global average pooling: the per-channel spatial mean.
pub fn gap(map: &FeatureMap) -> Vec<f64> {
    let mut out = vec![0.0; map.channels()];
    for h in 0..map.height() {
        for w in 0..map.width() {
            for (o, v) in out.iter_mut().zip(map.pixel(h, w)) {
                *o += v;
            }
        }
    }
    let scale = 1.0 / (map.height() * map.width()) as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Activations cached by [`forward`] for one batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: InputTrace,
    /// Input to each dense layer, `n × inputs`.
    dense_inputs: Vec<Matrix>,
    /// Pre-activation output of each dense layer, `n × outputs`.
    dense_pre: Vec<Matrix>,
    /// Output rows before normalization and their norms.
    norms: Vec<f64>,
    output: Matrix,
}

#[derive(Debug, Clone)]
enum InputTrace {
    Vector,
    /// Spatial shapes of the pooled maps.
    Pooled(Vec<(usize, usize, usize)>),
    Conv {
        inputs: Vec<FeatureMap>,
        pre_activation: Vec<FeatureMap>,
    },
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.output.rows()
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// Gradient with respect to one input record, shaped like its payload.
#[derive(Debug, Clone, PartialEq)]
pub enum InputGrad {
    Vector(Vec<f64>),
    Map(FeatureMap),
}

/// Embeds a batch. Every output row has unit norm.
pub fn forward(params: &ParamSet, batch: &[Record]) -> Result<(Matrix, ForwardTrace)> {
    let payloads: Vec<(&str, &Payload)> = batch.iter().map(|r| (r.id.as_str(), &r.payload)).collect();
    forward_payloads(params, &payloads)
}

/// Embeds a batch and discards the trace.
pub fn embed(params: &ParamSet, batch: &[Record]) -> Result<Matrix> {
    forward(params, batch).map(|(e, _)| e)
}

pub(crate) fn forward_payloads(
    params: &ParamSet,
    batch: &[(&str, &Payload)],
) -> Result<(Matrix, ForwardTrace)> {
    let config = &params.config;
    if batch.is_empty() {
        return Err(Error::invalid("forward pass over an empty batch"));
    }
    let mut layers = params.layers.iter();

    let (pooled, input_trace) = match config.input {
        InputKind::Vector { dim } => {
            let mut rows = Vec::with_capacity(batch.len());
            for (id, payload) in batch {
                match payload {
                    Payload::Vector(v) if v.len() == dim => rows.push(v.as_slice()),
                    _ => return Err(shape_mismatch(id, payload, config)),
                }
            }
            (Matrix::from_rows(&rows)?, InputTrace::Vector)
        }
        InputKind::Map { channels } => {
            let mut maps = Vec::with_capacity(batch.len());
            for (id, payload) in batch {
                match payload {
                    Payload::Map(m) if m.channels() == channels => maps.push(m),
                    _ => return Err(shape_mismatch(id, payload, config)),
                }
            }
            match config.conv_channels {
                None => {
                    let rows: Vec<Vec<f64>> = maps.iter().map(|m| gap(m)).collect();
                    let shapes = maps.iter().map(|m| (m.height(), m.width(), m.channels())).collect();
                    (Matrix::from_rows(&rows)?, InputTrace::Pooled(shapes))
                }
                Some(_) => {
                    let conv = layers.next().expect("conv layer present");
                    let mut pre_activation = Vec::with_capacity(maps.len());
                    let mut rows = Vec::with_capacity(maps.len());
                    for m in &maps {
                        let pre = conv3x3(conv, m);
                        let mut act = pre.clone();
                        act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                        rows.push(gap(&act));
                        pre_activation.push(pre);
                    }
                    let inputs = maps.into_iter().cloned().collect();
                    (
                        Matrix::from_rows(&rows)?,
                        InputTrace::Conv {
                            inputs,
                            pre_activation,
                        },
                    )
                }
            }
        }
    };

    let dense: Vec<&LayerParams> = layers.collect();
    let mut dense_inputs = Vec::with_capacity(dense.len());
    let mut dense_pre = Vec::with_capacity(dense.len());
    let mut act = pooled;
    for (i, layer) in dense.iter().enumerate() {
        let pre = dense_forward(layer, &act);
        let last = i + 1 == dense.len();
        let mut next = pre.clone();
        if !last {
            next.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        dense_inputs.push(act);
        dense_pre.push(pre);
        act = next;
    }

    let raw = act;
    let mut output = raw.clone();
    let mut norms = Vec::with_capacity(raw.rows());
    for i in 0..raw.rows() {
        let n = norm(raw.row(i));
        if n.is_nan() || n <= NORM_EPSILON {
            return Err(Error::DegenerateInput { row: i, norm: n });
        }
        output.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }

    let trace = ForwardTrace {
        input: input_trace,
        dense_inputs,
        dense_pre,
        norms,
        output: output.clone(),
    };
    Ok((output, trace))
}

fn shape_mismatch(id: &str, payload: &Payload, config: &ModelConfig) -> Error {
    let got = match payload {
        Payload::Vector(v) => format!("vector of length {}", v.len()),
        Payload::Map(m) => format!("{}x{}x{} map", m.height(), m.width(), m.channels()),
    };
    let want = match config.input {
        InputKind::Vector { dim } => format!("vector of length {dim}"),
        InputKind::Map { channels } => format!("map with {channels} channels"),
    };
    Error::invalid(format!("record {id:?}: expected {want}, got {got}"))
}

/// `act · Wᵀ + b`.
fn dense_forward(layer: &LayerParams, act: &Matrix) -> Matrix {
    let (inputs, outputs) = (layer.shape.inputs, layer.shape.outputs);
    let mut out = Matrix::zeros(act.rows(), outputs);
    for i in 0..act.rows() {
        let x = act.row(i);
        let row = out.row_mut(i);
        for (o, slot) in row.iter_mut().enumerate() {
            *slot = layer.bias[o] + dot(&layer.weight[o * inputs..(o + 1) * inputs], x);
        }
    }
    out
}

#[inline]
fn conv_index(inputs: usize, o: usize, c: usize, ky: usize, kx: usize) -> usize {
    ((o * inputs + c) * 3 + ky) * 3 + kx
}

/// Same-padded 3×3 convolution, stride 1.
fn conv3x3(layer: &LayerParams, input: &FeatureMap) -> FeatureMap {
    let (height, width) = (input.height(), input.width());
    let (inputs, outputs) = (layer.shape.inputs, layer.shape.outputs);
    let mut out = FeatureMap::zeros(height, width, outputs);
    for h in 0..height {
        for w in 0..width {
            for o in 0..outputs {
                let mut acc = layer.bias[o];
                for ky in 0..3 {
                    let Some(y) = (h + ky).checked_sub(1).filter(|&y| y < height) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(x) = (w + kx).checked_sub(1).filter(|&x| x < width) else {
                            continue;
                        };
                        let pixel = input.pixel(y, x);
                        for (c, &v) in pixel.iter().enumerate() {
                            acc += layer.weight[conv_index(inputs, o, c, ky, kx)] * v;
                        }
                    }
                }
                *out.get_mut(h, w, o) = acc;
            }
        }
    }
    out
}

/// Exact gradients of a scalar loss given its gradient with respect to the
/// normalized embeddings.
pub fn backward(
    params: &ParamSet,
    trace: &ForwardTrace,
    grad_embeddings: &Matrix,
) -> Result<(ParamSet, Vec<InputGrad>)> {
    if grad_embeddings.shape() != trace.output.shape() {
        return Err(Error::invalid(format!(
            "upstream gradient is {}x{}, forward output was {}x{}",
            grad_embeddings.rows(),
            grad_embeddings.cols(),
            trace.output.rows(),
            trace.output.cols()
        )));
    }
    if params.layers.len() != trace.dense_inputs.len() + usize::from(matches!(trace.input, InputTrace::Conv { .. })) {
        return Err(Error::invalid("trace was produced by a different network"));
    }
    let mut grads = ParamSet::zeros(&params.config)?;
    let n = trace.batch_size();

    let mut upstream = normalize_backward(&trace.output, &trace.norms, grad_embeddings);

    let first_dense = params.layers.len() - trace.dense_inputs.len();
    let dense_count = trace.dense_inputs.len();
    for i in (0..dense_count).rev() {
        let layer = &params.layers[first_dense + i];
        let grad_layer = &mut grads.layers[first_dense + i];
        if i + 1 != dense_count {
            let pre = &trace.dense_pre[i];
            for (g, &p) in upstream.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        upstream = dense_backward(layer, grad_layer, &trace.dense_inputs[i], &upstream);
    }

    let input_grads = match &trace.input {
        InputTrace::Vector => (0..n).map(|i| InputGrad::Vector(upstream.row(i).to_vec())).collect(),
        InputTrace::Pooled(shapes) => shapes
            .iter()
            .enumerate()
            .map(|(i, &(h, w, c))| InputGrad::Map(gap_backward(upstream.row(i), h, w, c)))
            .collect(),
        InputTrace::Conv {
            inputs,
            pre_activation,
        } => {
            let conv = &params.layers[0];
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let pre = &pre_activation[i];
                let mut d_pre = gap_backward(upstream.row(i), pre.height(), pre.width(), pre.channels());
                for (g, &p) in d_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                }
                out.push(InputGrad::Map(conv3x3_backward(conv, &mut grads.layers[0], &inputs[i], &d_pre)));
            }
            out
        }
    };
    Ok((grads, input_grads))
}

/// Backward of `y = x / ‖x‖`: `dx = (g − y⟨y, g⟩) / ‖x‖`.
fn normalize_backward(output: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(output.rows(), output.cols());
    for i in 0..output.rows() {
        let y = output.row(i);
        let g = grad.row(i);
        let proj = dot(y, g);
        for ((o, &yv), &gv) in out.row_mut(i).iter_mut().zip(y).zip(g) {
            *o = (gv - yv * proj) / norms[i];
        }
    }
    out
}

/// Accumulates `dW = dZᵀ·A`, `db = Σ dZ` and returns `dA = dZ·W`.
fn dense_backward(layer: &LayerParams, grad: &mut LayerParams, input: &Matrix, d_out: &Matrix) -> Matrix {
    let (inputs, outputs) = (layer.shape.inputs, layer.shape.outputs);
    let mut d_in = Matrix::zeros(input.rows(), inputs);
    for r in 0..input.rows() {
        let a = input.row(r);
        let dz = d_out.row(r);
        for o in 0..outputs {
            let g = dz[o];
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let w_row = &layer.weight[o * inputs..(o + 1) * inputs];
            let gw_row = &mut grad.weight[o * inputs..(o + 1) * inputs];
            for ((gw, &av), (di, &wv)) in gw_row.iter_mut().zip(a).zip(d_in.row_mut(r).iter_mut().zip(w_row)) {
                *gw += g * av;
                *di += g * wv;
            }
        }
    }
    d_in
}

/// Spreads a pooled gradient uniformly over the spatial grid.
fn gap_backward(grad: &[f64], height: usize, width: usize, channels: usize) -> FeatureMap {
    let scale = 1.0 / (height * width) as f64;
    let mut out = FeatureMap::zeros(height, width, channels);
    for h in 0..height {
        for w in 0..width {
            for c in 0..channels {
                *out.get_mut(h, w, c) = grad[c] * scale;
            }
        }
    }
    out
}

fn conv3x3_backward(layer: &LayerParams, grad: &mut LayerParams, input: &FeatureMap, d_pre: &FeatureMap) -> FeatureMap {
    let (height, width) = (input.height(), input.width());
    let (inputs, outputs) = (layer.shape.inputs, layer.shape.outputs);
    let mut d_in = FeatureMap::zeros(height, width, inputs);
    for h in 0..height {
        for w in 0..width {
            for o in 0..outputs {
                let g = d_pre.get(h, w, o);
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                for ky in 0..3 {
                    let Some(y) = (h + ky).checked_sub(1).filter(|&y| y < height) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(x) = (w + kx).checked_sub(1).filter(|&x| x < width) else {
                            continue;
                        };
                        for c in 0..inputs {
                            let idx = conv_index(inputs, o, c, ky, kx);
                            grad.weight[idx] += g * input.get(y, x, c);
                            *d_in.get_mut(y, x, c) += g * layer.weight[idx];
                        }
                    }
                }
            }
        }
    }
    d_in
}
