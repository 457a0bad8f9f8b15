// Copyright 2026 The gateprune Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Gated feed-forward networks.
//!
//! Every unit of a gated dense layer, and every filter of a gated convolutional layer,
//! carries a Bernoulli gate `ξ` multiplying its (post-activation) output. Biases are
//! never gated. Gate values are stored as `f64` so relaxed (continuous) gates share
//! the same forward/backward code as hard ones.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    affine_backward, affine_forward, conv2d_backward, conv2d_forward, loss_and_grad,
    pool_backward, pool_forward, ActivationKind, LossKind, PoolTrace, Tensor,
};

/// Leak slope used for hidden layers throughout the experiments.
pub const DEFAULT_LEAK: f64 = 1e-3;

/// Weights (`[units, fan-in...]`) and an ungated bias per unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            weights: Tensor::zeros(other.weights.shape().to_vec()),
            bias: vec![0.0; other.bias.len()],
        }
    }

    pub fn units(&self) -> usize {
        self.weights.batch()
    }

    pub fn count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn keep_rows(&mut self, keep: &[usize]) {
        self.weights = self.weights.select(keep);
        self.bias = keep.iter().map(|&k| self.bias[k]).collect();
    }

    /// Keeps the given blocks of the second axis; each block spans `block` entries of
    /// the flattened per-unit fan-in.
    fn keep_inputs(&mut self, keep: &[usize], block: usize) {
        let shape = self.weights.shape().to_vec();
        let row = self.weights.sample_len();
        let units = shape[0];
        let new_row = keep.len() * block;
        let mut data = Vec::with_capacity(units * new_row);
        for u in 0..units {
            let src = &self.weights.data()[u * row..(u + 1) * row];
            for &k in keep {
                data.extend_from_slice(&src[k * block..(k + 1) * block]);
            }
        }
        let mut new_shape = shape;
        new_shape[1] = if new_shape.len() == 2 { new_row } else { keep.len() };
        self.weights = Tensor::new(new_shape, data).expect("consistent compaction shape");
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { params: Params, activation: ActivationKind, gated: bool },
    Conv { params: Params, activation: ActivationKind, gated: bool },
    MaxPool,
    Flatten,
}

impl Layer {
    pub fn params(&self) -> Option<&Params> {
        match self {
            Layer::Dense { params, .. } | Layer::Conv { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut Params> {
        match self {
            Layer::Dense { params, .. } | Layer::Conv { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn gated(&self) -> bool {
        matches!(self, Layer::Dense { gated: true, .. } | Layer::Conv { gated: true, .. })
    }

    pub fn activation(&self) -> Option<ActivationKind> {
        match self {
            Layer::Dense { activation, .. } | Layer::Conv { activation, .. } => Some(*activation),
            _ => None,
        }
    }

    /// Structural description of this layer at its current size.
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { params, activation, gated } => LayerSpec::Dense {
                units: params.units(),
                activation: *activation,
                gated: *gated,
            },
            Layer::Conv { params, activation, gated } => LayerSpec::Conv {
                filters: params.units(),
                kernel: params.weights.shape()[2],
                activation: *activation,
                gated: *gated,
            },
            Layer::MaxPool => LayerSpec::MaxPool,
            Layer::Flatten => LayerSpec::Flatten,
        }
    }
}

/// Architecture description used to build networks and to record them in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { units: usize, activation: ActivationKind, gated: bool },
    Conv { filters: usize, kernel: usize, activation: ActivationKind, gated: bool },
    MaxPool,
    Flatten,
}

/// Where the fan-out weights of a gated layer's units live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FanOut {
    /// Unit `u` feeds input columns `u*block .. (u+1)*block` of a dense layer.
    DenseCols { layer: usize, block: usize },
    /// Filter `u` feeds input channel `u` of a convolutional layer.
    ConvChannel { layer: usize },
}

impl FanOut {
    pub fn layer(&self) -> usize {
        match *self {
            FanOut::DenseCols { layer, .. } | FanOut::ConvChannel { layer } => layer,
        }
    }
}

/// Layer stack plus loss. Input shapes of every layer are cached and validated.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    loss: LossKind,
    shapes: Vec<Vec<usize>>,
    gated: Vec<usize>,
    fan_out: Vec<FanOut>,
}

/// Glorot-normal sample for a parameter tensor of the given fan sizes.
fn glorot<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

impl Network {
    /// Builds a network with Glorot-normal weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        input_shape: &[usize],
        specs: &[LayerSpec],
        loss: LossKind,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Dense { units, activation, gated } => {
                    let fan_in = match shape.as_slice() {
                        [n] => *n,
                        s => return Err(Error::shape(format!("dense layer after shape {s:?}"))),
                    };
                    let weights = glorot(vec![units, fan_in], fan_in, units, rng);
                    shape = vec![units];
                    Layer::Dense { params: Params { weights, bias: vec![0.0; units] }, activation, gated }
                }
                LayerSpec::Conv { filters, kernel, activation, gated } => {
                    let (c, h, w) = match shape.as_slice() {
                        [c, h, w] => (*c, *h, *w),
                        s => return Err(Error::shape(format!("conv layer after shape {s:?}"))),
                    };
                    if kernel == 0 || kernel > h || kernel > w {
                        return Err(Error::shape(format!("kernel {kernel} does not fit {h}x{w}")));
                    }
                    let weights = glorot(
                        vec![filters, c, kernel, kernel],
                        c * kernel * kernel,
                        filters * kernel * kernel,
                        rng,
                    );
                    shape = vec![filters, h - kernel + 1, w - kernel + 1];
                    Layer::Conv { params: Params { weights, bias: vec![0.0; filters] }, activation, gated }
                }
                LayerSpec::MaxPool => {
                    if let [c, h, w] = shape.as_slice() {
                        shape = vec![*c, h / 2, w / 2];
                    }
                    Layer::MaxPool
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
            };
            layers.push(layer);
        }
        Self::from_layers(input_shape.to_vec(), layers, loss)
    }

    /// Assembles a network from explicit layers, validating the shape chain.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>, loss: LossKind) -> Result<Self> {
        loss.validate()?;
        if layers.is_empty() {
            return Err(Error::shape("network has no layers"));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shapes.push(shape.clone());
            let last = i + 1 == layers.len();
            if let Some(act) = layer.activation() {
                act.validate()?;
                if matches!(act, ActivationKind::SoftmaxOutput) && !last {
                    return Err(Error::shape("softmax output activation on a hidden layer"));
                }
            }
            shape = match (layer, shape.as_slice()) {
                (Layer::Dense { params, .. }, [n]) => {
                    let ws = params.weights.shape();
                    if ws.len() != 2 || ws[1] != *n || params.bias.len() != ws[0] {
                        return Err(Error::shape(format!("layer {i}: dense weights {ws:?} on input {n}")));
                    }
                    vec![ws[0]]
                }
                (Layer::Conv { params, .. }, [c, h, w]) => {
                    let ws = params.weights.shape();
                    if ws.len() != 4 || ws[1] != *c || ws[2] != ws[3] || params.bias.len() != ws[0] {
                        return Err(Error::shape(format!("layer {i}: filters {ws:?} on input channels {c}")));
                    }
                    if ws[2] > *h || ws[2] > *w {
                        return Err(Error::shape(format!("layer {i}: kernel larger than input")));
                    }
                    vec![ws[0], h - ws[2] + 1, w - ws[2] + 1]
                }
                (Layer::MaxPool, [c, h, w]) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::shape(format!("layer {i}: pooling odd dims {h}x{w}")));
                    }
                    vec![*c, h / 2, w / 2]
                }
                (Layer::Flatten, s) => vec![s.iter().product()],
                (_, s) => return Err(Error::shape(format!("layer {i} cannot consume shape {s:?}"))),
            };
        }
        shapes.push(shape);
        match layers.last() {
            Some(Layer::Dense { gated: false, activation, .. }) => match (loss, activation) {
                (LossKind::CategoricalCe, ActivationKind::SoftmaxOutput)
                | (LossKind::GaussianNll { .. }, ActivationKind::Identity) => {}
                _ => return Err(Error::shape("output activation does not match the loss")),
            },
            _ => return Err(Error::shape("output layer must be an ungated dense layer")),
        }
        let mut net = Network { input_shape, layers, loss, shapes, gated: Vec::new(), fan_out: Vec::new() };
        net.index_gates()?;
        Ok(net)
    }

    fn index_gates(&mut self) -> Result<()> {
        self.gated.clear();
        self.fan_out.clear();
        for i in 0..self.layers.len() {
            if !self.layers[i].gated() {
                continue;
            }
            let mut block = 1;
            let mut found = None;
            for j in i + 1..self.layers.len() {
                match &self.layers[j] {
                    Layer::MaxPool => {}
                    Layer::Flatten => {
                        let s = &self.shapes[j];
                        block = s[1..].iter().product();
                    }
                    Layer::Dense { .. } => {
                        found = Some(FanOut::DenseCols { layer: j, block });
                        break;
                    }
                    Layer::Conv { .. } => {
                        found = Some(FanOut::ConvChannel { layer: j });
                        break;
                    }
                }
            }
            let fo = found.ok_or_else(|| Error::shape(format!("gated layer {i} has no consumer")))?;
            self.gated.push(i);
            self.fan_out.push(fo);
        }
        Ok(())
    }

    /// Fully connected ReLU network `input - hidden... - output` with gated hidden layers.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        loss: LossKind,
        rng: &mut R,
    ) -> Result<Self> {
        let mut specs: Vec<LayerSpec> = hidden
            .iter()
            .map(|&units| LayerSpec::Dense {
                units,
                activation: ActivationKind::LeakyRelu { slope: DEFAULT_LEAK },
                gated: true,
            })
            .collect();
        specs.push(LayerSpec::Dense { units: output, activation: output_activation(loss), gated: false });
        Self::new(&[input], &specs, loss, rng)
    }

    /// LeNet5 on 28x28 single-channel input: conv6(5x5)-pool-conv16(5x5)-pool-120-84-out,
    /// with every filter and hidden unit gated.
    pub fn lenet5<R: Rng + ?Sized>(output: usize, rng: &mut R) -> Result<Self> {
        let leaky = ActivationKind::LeakyRelu { slope: DEFAULT_LEAK };
        let specs = [
            LayerSpec::Conv { filters: 6, kernel: 5, activation: leaky, gated: true },
            LayerSpec::MaxPool,
            LayerSpec::Conv { filters: 16, kernel: 5, activation: leaky, gated: true },
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 120, activation: leaky, gated: true },
            LayerSpec::Dense { units: 84, activation: leaky, gated: true },
            LayerSpec::Dense { units: output, activation: ActivationKind::SoftmaxOutput, gated: false },
        ];
        Self::new(&[1, 28, 28], &specs, LossKind::CategoricalCe, rng)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Network-layer indices of the gated layers, in order.
    pub fn gated_layers(&self) -> &[usize] {
        &self.gated
    }

    pub fn fan_out(&self, gate_layer: usize) -> FanOut {
        self.fan_out[gate_layer]
    }

    /// Number of gates in each gated layer.
    pub fn gate_widths(&self) -> Vec<usize> {
        self.gated
            .iter()
            .map(|&l| self.layers[l].params().map_or(0, Params::units))
            .collect()
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::params).map(Params::count).sum()
    }

    /// A zero-filled parameter list parallel to the layers (for optimizer state).
    pub fn zero_params(&self) -> Vec<Option<Params>> {
        self.layers.iter().map(|l| l.params().map(Params::zeros_like)).collect()
    }

    pub fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|p| p.weights.sum_sq() + p.bias.iter().map(|b| b * b).sum::<f64>())
            .sum()
    }

    fn check_masks(&self, masks: Option<&[Vec<f64>]>) -> Result<()> {
        if let Some(m) = masks {
            let widths = self.gate_widths();
            if m.len() != widths.len() || m.iter().zip(&widths).any(|(v, w)| v.len() != *w) {
                return Err(Error::shape("gate masks do not match gated layers"));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "input batch {:?} does not match network input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Applies layer `i`, returning `(output, pre-activation, pre-gate output, pool trace)`.
    fn apply(
        &self,
        i: usize,
        x: &Tensor,
        mask: Option<&[f64]>,
        keep: bool,
    ) -> Result<(Tensor, Option<Tensor>, Option<Tensor>, Option<PoolTrace>)> {
        match &self.layers[i] {
            Layer::Dense { params, activation, .. } | Layer::Conv { params, activation, .. } => {
                let pre = if matches!(self.layers[i], Layer::Dense { .. }) {
                    affine_forward(&params.weights, &params.bias, x)?
                } else {
                    conv2d_forward(&params.weights, &params.bias, x)?
                };
                let mut post = Tensor::zeros(pre.shape().to_vec());
                activation.apply(pre.data(), post.data_mut());
                match mask {
                    Some(m) => {
                        let mut out = post.clone();
                        apply_mask(&mut out, m);
                        if keep {
                            Ok((out, Some(pre), Some(post), None))
                        } else {
                            Ok((out, None, None, None))
                        }
                    }
                    None => Ok((post, keep.then_some(pre), None, None)),
                }
            }
            Layer::MaxPool => {
                let (y, trace) = pool_forward(x)?;
                Ok((y, None, None, keep.then_some(trace)))
            }
            Layer::Flatten => {
                let b = x.batch();
                let y = x.clone().reshape(vec![b, x.sample_len()])?;
                Ok((y, None, None, None))
            }
        }
    }

    /// Gated forward pass recording everything the backward pass and the estimators
    /// need. `masks` holds one gate vector per gated layer; `None` runs ungated.
    pub fn forward(&self, x: &Tensor, masks: Option<&[Vec<f64>]>) -> Result<ForwardTrace> {
        self.check_input(x)?;
        self.check_masks(masks)?;
        let n = self.layers.len();
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
            pools: Vec::with_capacity(n),
            masks: vec![None; n],
            output: Tensor::zeros(vec![0]),
        };
        let mut cur = x.clone();
        let mut g = 0;
        for i in 0..n {
            let mask = if self.layers[i].gated() {
                let m = masks.map(|m| m[g].as_slice());
                trace.masks[i] = Some(m.map_or_else(|| vec![1.0; self.gate_widths()[g]], <[f64]>::to_vec));
                g += 1;
                Some(trace.masks[i].as_deref().unwrap())
            } else {
                None
            };
            let (out, pre, post, pool) = self.apply(i, &cur, mask, true)?;
            trace.inputs.push(cur);
            trace.pre.push(pre);
            trace.post.push(post);
            trace.pools.push(pool);
            cur = out;
        }
        cur.ensure_finite("network output")?;
        trace.output = cur;
        Ok(trace)
    }

    /// Output of the network without recording a trace.
    pub fn predict(&self, x: &Tensor, masks: Option<&[Vec<f64>]>) -> Result<Tensor> {
        self.check_input(x)?;
        self.check_masks(masks)?;
        self.run_from(0, x.clone(), masks)
    }

    /// Runs layers `start..` on `x`, which must be the input to layer `start`.
    pub fn run_from(&self, start: usize, x: Tensor, masks: Option<&[Vec<f64>]>) -> Result<Tensor> {
        let mut g = self.gated.iter().filter(|&&l| l < start).count();
        let mut cur = x;
        for i in start..self.layers.len() {
            let mask = if self.layers[i].gated() {
                g += 1;
                masks.map(|m| m[g - 1].as_slice())
            } else {
                None
            };
            cur = self.apply(i, &cur, mask, false)?.0;
        }
        cur.ensure_finite("network output")?;
        Ok(cur)
    }

    /// Output after re-gating one gated layer of an existing trace with `mask` (all
    /// other gates as in `masks`). Only the layers downstream of it are recomputed.
    pub fn regated_output(
        &self,
        trace: &ForwardTrace,
        gate_layer: usize,
        mask: &[f64],
        masks: Option<&[Vec<f64>]>,
    ) -> Result<Tensor> {
        let l = self.gated[gate_layer];
        let post = trace.post[l].as_ref().ok_or_else(|| Error::shape("trace lacks gated outputs"))?;
        let mut out = post.clone();
        apply_mask(&mut out, mask);
        self.run_from(l + 1, out, masks)
    }

    /// Backward pass of the per-batch cost `C = data_scale · Σ_i nll_i`. Gates act as
    /// multiplicative masks on the way back; for every gated unit the derivative of
    /// `C` w.r.t. its gate value is reported as well.
    pub fn backward(&self, trace: &ForwardTrace, targets: &Tensor, data_scale: f64) -> Result<Gradients> {
        let n = self.layers.len();
        if trace.inputs.len() != n
            || trace.inputs.iter().zip(&self.shapes).any(|(t, s)| t.shape()[1..] != s[..])
        {
            return Err(Error::shape("stale forward trace"));
        }
        let loss = loss_and_grad(self.loss, &trace.output, targets)?;
        let mut g = loss.grad;
        g.data_mut().iter_mut().for_each(|v| *v *= data_scale);
        let mut params: Vec<Option<Params>> = vec![None; n];
        let mut deltas: Vec<Option<Tensor>> = vec![None; n];
        let mut gate_grads: Vec<Vec<f64>> = vec![Vec::new(); self.gated.len()];
        let mut gi = self.gated.len();
        for i in (0..n).rev() {
            match &self.layers[i] {
                Layer::Flatten => {
                    let shape = trace.inputs[i].shape().to_vec();
                    g = g.reshape(shape)?;
                }
                Layer::MaxPool => {
                    g = pool_backward(trace.pools[i].as_ref().expect("pool trace"), &g)?;
                }
                Layer::Dense { params: p, activation, .. } | Layer::Conv { params: p, activation, .. } => {
                    if self.layers[i].gated() {
                        gi -= 1;
                        let post = trace.post[i].as_ref().expect("gated trace");
                        let mask = trace.masks[i].as_ref().expect("gated mask");
                        gate_grads[gi] = channel_dot(&g, post, mask.len());
                        apply_mask(&mut g, mask);
                    }
                    let pre = trace.pre[i].as_ref().expect("pre-activation");
                    activation.backward(pre.data(), g.data_mut());
                    let (dw, db, dx) = if matches!(self.layers[i], Layer::Dense { .. }) {
                        affine_backward(&p.weights, &trace.inputs[i], &g, i > 0)?
                    } else {
                        conv2d_backward(&p.weights, &trace.inputs[i], &g, i > 0)?
                    };
                    params[i] = Some(Params { weights: dw, bias: db });
                    deltas[i] = Some(g);
                    g = match dx {
                        Some(dx) => dx,
                        None => Tensor::zeros(vec![0]),
                    };
                }
            }
        }
        Ok(Gradients {
            params,
            deltas,
            gate_grads,
            cost: data_scale * loss.total,
            per_sample: loss.per_sample,
        })
    }

    /// Sum over the fan-in row of unit `u` in gated layer `g` and its fan-out block.
    pub fn unit_sq_norms(&self, g: usize, u: usize) -> (f64, f64) {
        let mut b = 0.0;
        let row = self.fan_in(g, u);
        for v in row {
            b += v * v;
        }
        let mut f = 0.0;
        self.visit_fan_out(g, u, |v| f += v * v);
        (b, f)
    }

    fn fan_in(&self, g: usize, u: usize) -> &[f64] {
        let p = self.layers[self.gated[g]].params().expect("gated layers have params");
        let row = p.weights.sample_len();
        &p.weights.data()[u * row..(u + 1) * row]
    }

    fn visit_fan_out(&self, g: usize, u: usize, mut f: impl FnMut(f64)) {
        let fo = self.fan_out[g];
        let p = self.layers[fo.layer()].params().expect("consumer has params");
        let row = p.weights.sample_len();
        let (start, len) = match fo {
            FanOut::DenseCols { block, .. } => (u * block, block),
            FanOut::ConvChannel { .. } => {
                let k2 = p.weights.shape()[2] * p.weights.shape()[3];
                (u * k2, k2)
            }
        };
        for r in 0..p.units() {
            for &v in &p.weights.data()[r * row + start..r * row + start + len] {
                f(v);
            }
        }
    }

    /// Multiplies the fan-in and fan-out weights of a unit by `factor`.
    pub fn scale_unit(&mut self, g: usize, u: usize, factor: f64) {
        self.map_unit(g, u, |v| *v *= factor);
    }

    fn map_unit(&mut self, g: usize, u: usize, mut f: impl FnMut(&mut f64)) {
        let l = self.gated[g];
        let p = self.layers[l].params_mut().expect("gated layers have params");
        let row = p.weights.sample_len();
        p.weights.data_mut()[u * row..(u + 1) * row].iter_mut().for_each(&mut f);
        let fo = self.fan_out[g];
        let p = self.layers[fo.layer()].params_mut().expect("consumer has params");
        let row = p.weights.sample_len();
        let (start, len) = match fo {
            FanOut::DenseCols { block, .. } => (u * block, block),
            FanOut::ConvChannel { .. } => {
                let k2 = p.weights.shape()[2] * p.weights.shape()[3];
                (u * k2, k2)
            }
        };
        let units = p.units();
        let data = p.weights.data_mut();
        for r in 0..units {
            data[r * row + start..r * row + start + len].iter_mut().for_each(&mut f);
        }
    }

    /// Fan-in/fan-out views of every gated unit, grouped by gated layer.
    pub fn unit_views(&self) -> Vec<Vec<UnitView>> {
        (0..self.gated.len())
            .map(|g| {
                let units = self.layers[self.gated[g]].params().map_or(0, Params::units);
                (0..units)
                    .map(|u| {
                        let w_b = self.fan_in(g, u).to_vec();
                        let mut w_f = Vec::new();
                        self.visit_fan_out(g, u, |v| w_f.push(v));
                        let phi = 0.5
                            * (w_b.iter().map(|v| v * v).sum::<f64>()
                                + w_f.iter().map(|v| v * v).sum::<f64>());
                        UnitView { gate_layer: g, unit: u, w_b, w_f, phi }
                    })
                    .collect()
            })
            .collect()
    }

    /// `φ = ½(‖w_b‖² + ‖w_f‖²)` of one unit.
    pub fn phi(&self, g: usize, u: usize) -> f64 {
        let (b, f) = self.unit_sq_norms(g, u);
        0.5 * (b + f)
    }

    /// Zeroes a unit's fan-in, bias and fan-out.
    pub fn zero_unit(&mut self, g: usize, u: usize) {
        self.map_unit(g, u, |v| *v = 0.0);
        let l = self.gated[g];
        self.layers[l].params_mut().expect("params").bias[u] = 0.0;
    }

    /// Removes all units not listed in `keep` (per gated layer, ascending indices) from
    /// a parameter list shaped like this network. Works for the network's own
    /// parameters as well as optimizer state.
    pub fn compact_param_list(&self, keep: &[Vec<usize>], list: &mut [Option<Params>]) {
        for (g, k) in keep.iter().enumerate() {
            match self.fan_out[g] {
                FanOut::DenseCols { layer, block } => {
                    if let Some(p) = list[layer].as_mut() {
                        p.keep_inputs(k, block);
                    }
                }
                FanOut::ConvChannel { layer } => {
                    if let Some(p) = list[layer].as_mut() {
                        let s = p.weights.shape();
                        let block = s[2] * s[3];
                        p.keep_inputs(k, block);
                    }
                }
            }
        }
        for (g, k) in keep.iter().enumerate() {
            if let Some(p) = list[self.gated[g]].as_mut() {
                p.keep_rows(k);
            }
        }
    }

    /// Physically removes the units not listed in `keep`.
    pub fn compact(&mut self, keep: &[Vec<usize>]) -> Result<()> {
        if keep.len() != self.gated.len() {
            return Err(Error::shape("compaction plan does not match gated layers"));
        }
        let mut list: Vec<Option<Params>> = self.layers.iter().map(|l| l.params().cloned()).collect();
        self.compact_param_list(keep, &mut list);
        let layers = std::mem::take(&mut self.layers)
            .into_iter()
            .zip(list)
            .map(|(layer, p)| match (layer, p) {
                (Layer::Dense { activation, gated, .. }, Some(params)) => Layer::Dense { params, activation, gated },
                (Layer::Conv { activation, gated, .. }, Some(params)) => Layer::Conv { params, activation, gated },
                (other, _) => other,
            })
            .collect();
        *self = Network::from_layers(self.input_shape.clone(), layers, self.loss)?;
        Ok(())
    }
}

/// Output activation matching a loss.
pub fn output_activation(loss: LossKind) -> ActivationKind {
    match loss {
        LossKind::CategoricalCe => ActivationKind::SoftmaxOutput,
        LossKind::GaussianNll { .. } => ActivationKind::Identity,
    }
}

/// Multiplies channel/unit `j` of every sample by `mask[j]`.
fn apply_mask(t: &mut Tensor, mask: &[f64]) {
    let units = mask.len();
    if units == 0 || t.is_empty() {
        return;
    }
    let spatial = t.sample_len() / units;
    for sample in t.data_mut().chunks_exact_mut(units * spatial) {
        for (chunk, &m) in sample.chunks_exact_mut(spatial).zip(mask) {
            if m != 1.0 {
                chunk.iter_mut().for_each(|v| *v *= m);
            }
        }
    }
}

/// Per channel `j`: `Σ_{samples, positions} a·b`.
fn channel_dot(a: &Tensor, b: &Tensor, units: usize) -> Vec<f64> {
    let mut out = vec![0.0; units];
    if units == 0 || a.is_empty() {
        return out;
    }
    let spatial = a.sample_len() / units;
    for (sa, sb) in a.data().chunks_exact(units * spatial).zip(b.data().chunks_exact(units * spatial)) {
        for (j, o) in out.iter_mut().enumerate() {
            let r = j * spatial..(j + 1) * spatial;
            *o += sa[r.clone()].iter().zip(&sb[r]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    out
}

/// Everything a forward pass produced. `post` holds pre-gate unit outputs of gated
/// layers; the gated output is the next layer's input.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Vec<Tensor>,
    pub pre: Vec<Option<Tensor>>,
    pub post: Vec<Option<Tensor>>,
    pub pools: Vec<Option<PoolTrace>>,
    pub masks: Vec<Option<Vec<f64>>>,
    pub output: Tensor,
}

/// Result of [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    /// `∂C/∂W`, `∂C/∂b` per parametric layer.
    pub params: Vec<Option<Params>>,
    /// `δ` w.r.t. each parametric layer's pre-activations.
    pub deltas: Vec<Option<Tensor>>,
    /// `∂C/∂ξ` for every gate, grouped by gated layer.
    pub gate_grads: Vec<Vec<f64>>,
    /// Scaled minibatch cost `C`.
    pub cost: f64,
    /// Unscaled per-sample negative log-likelihoods.
    pub per_sample: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitView {
    pub gate_layer: usize,
    pub unit: usize,
    pub w_b: Vec<f64>,
    pub w_f: Vec<f64>,
    pub phi: f64,
}

/// Gate parameters of one gated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateLayer {
    pub theta: Vec<f64>,
    pub pi_star: Vec<f64>,
    pub last_xi: Vec<f64>,
    pub theta_max: Vec<f64>,
    pub alive: Vec<bool>,
    /// Index of each unit in the initial architecture (stable across compaction).
    pub origin: Vec<usize>,
}

impl GateLayer {
    pub fn new(units: usize, theta0: f64) -> Self {
        GateLayer {
            theta: vec![theta0; units],
            pi_star: vec![theta0; units],
            last_xi: vec![1.0; units],
            theta_max: vec![theta0; units],
            alive: vec![true; units],
            origin: (0..units).collect(),
        }
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    fn keep(&mut self, keep: &[usize]) {
        fn pick<T: Copy>(v: &[T], keep: &[usize]) -> Vec<T> {
            keep.iter().map(|&k| v[k]).collect()
        }
        self.theta = pick(&self.theta, keep);
        self.pi_star = pick(&self.pi_star, keep);
        self.last_xi = pick(&self.last_xi, keep);
        self.theta_max = pick(&self.theta_max, keep);
        self.alive = pick(&self.alive, keep);
        self.origin = pick(&self.origin, keep);
    }
}

/// Gates of every gated layer of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub layers: Vec<GateLayer>,
    /// After finalization gates are fixed: alive units always on, pruned ones off.
    pub deterministic: bool,
}

impl GateState {
    pub fn new(net: &Network, theta0: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta0) {
            return Err(Error::param(format!("initial theta {theta0} outside [0,1]")));
        }
        Ok(GateState {
            layers: net.gate_widths().into_iter().map(|w| GateLayer::new(w, theta0)).collect(),
            deterministic: false,
        })
    }

    pub fn alive_counts(&self) -> Vec<usize> {
        self.layers.iter().map(GateLayer::alive_count).collect()
    }

    pub fn total_alive(&self) -> usize {
        self.alive_counts().iter().sum()
    }

    /// Draws one gate realization shared by the whole minibatch. Pruned units are 0;
    /// in deterministic mode alive units are 1.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let mut xi = Vec::with_capacity(layer.theta.len());
            for (j, &t) in layer.theta.iter().enumerate() {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::param(format!("theta {t} outside [0,1]")));
                }
                let v = if !layer.alive[j] {
                    0.0
                } else if self.deterministic || rng.gen::<f64>() < t {
                    1.0
                } else {
                    0.0
                };
                xi.push(v);
            }
            layer.last_xi.clone_from(&xi);
            out.push(xi);
        }
        Ok(out)
    }

    /// Gate values used for evaluation: fixed gates when deterministic, otherwise the
    /// mean-field values `θ`; pruned units are always 0.
    pub fn eval_masks(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| {
                l.theta
                    .iter()
                    .zip(&l.alive)
                    .map(|(&t, &a)| match (a, self.deterministic) {
                        (false, _) => 0.0,
                        (true, true) => 1.0,
                        (true, false) => t,
                    })
                    .collect()
            })
            .collect()
    }

    /// Indices of alive units per gated layer.
    pub fn alive_indices(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| (0..l.alive.len()).filter(|&j| l.alive[j]).collect())
            .collect()
    }

    pub fn compact(&mut self, keep: &[Vec<usize>]) {
        for (layer, k) in self.layers.iter_mut().zip(keep) {
            layer.keep(k);
        }
    }
}

/// Prunes one unit: zeroes its weights and marks it dead with `θ` frozen. Returns
/// `false` when the unit was already pruned.
pub fn prune_unit(net: &mut Network, gates: &mut GateState, g: usize, u: usize) -> bool {
    let layer = &mut gates.layers[g];
    if !layer.alive[u] {
        return false;
    }
    layer.alive[u] = false;
    layer.last_xi[u] = 0.0;
    net.zero_unit(g, u);
    true
}

/// Drops every pruned unit from the network and the gate state; returns the plan so
/// callers can shrink parallel state (e.g. optimizer moments) the same way.
pub fn compact(net: &mut Network, gates: &mut GateState) -> Result<Vec<Vec<usize>>> {
    let keep = gates.alive_indices();
    net.compact(&keep)?;
    gates.compact(&keep);
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaky() -> ActivationKind {
        ActivationKind::LeakyRelu { slope: DEFAULT_LEAK }
    }

    fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_cnn(rng: &mut ChaCha8Rng) -> Network {
        let specs = [
            LayerSpec::Conv { filters: 3, kernel: 3, activation: leaky(), gated: true },
            LayerSpec::MaxPool,
            LayerSpec::Conv { filters: 2, kernel: 2, activation: leaky(), gated: true },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 4, activation: leaky(), gated: true },
            LayerSpec::Dense { units: 3, activation: ActivationKind::SoftmaxOutput, gated: false },
        ];
        Network::new(&[2, 8, 8], &specs, LossKind::CategoricalCe, rng).unwrap()
    }

    #[test]
    fn all_ones_gates_equal_ungated_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = small_cnn(&mut rng);
        let x = random_input(&[5, 2, 8, 8], &mut rng);
        let ones: Vec<Vec<f64>> = net.gate_widths().iter().map(|&w| vec![1.0; w]).collect();
        let a = net.forward(&x, Some(&ones)).unwrap().output;
        let b = net.forward(&x, None).unwrap().output;
        assert_eq!(a, b);
    }

    #[test]
    fn gated_off_unit_equals_deleted_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::mlp(3, &[4], 2, LossKind::GaussianNll { tau: 1.0 }, &mut rng).unwrap();
        let x = random_input(&[6, 3], &mut rng);
        let masks = vec![vec![1.0, 0.0, 1.0, 1.0]];
        let gated = net.predict(&x, Some(&masks)).unwrap();
        let mut reduced = net.clone();
        reduced.compact(&[vec![0, 2, 3]]).unwrap();
        let direct = reduced.predict(&x, None).unwrap();
        for (a, b) in gated.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::mlp(5, &[7, 3], 4, LossKind::CategoricalCe, &mut rng).unwrap();
        let y = net.predict(&Tensor::zeros(vec![2, 5]), None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gated_off_unit_ignores_its_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = small_cnn(&mut rng);
        let x = random_input(&[3, 2, 8, 8], &mut rng);
        for g in 0..net.gated_layers().len() {
            let mut masks: Vec<Vec<f64>> = net.gate_widths().iter().map(|&w| vec![1.0; w]).collect();
            masks[g][1] = 0.0;
            let before = net.predict(&x, Some(&masks)).unwrap();
            let l = net.gated_layers()[g];
            let p = net.layers_mut()[l].params_mut().unwrap();
            let row = p.weights.sample_len();
            p.weights.data_mut()[row..2 * row].iter_mut().for_each(|v| *v = 123.0);
            p.bias[1] = -5.0;
            let after = net.predict(&x, Some(&masks)).unwrap();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn closed_gate_blocks_both_weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::mlp(3, &[4], 2, LossKind::CategoricalCe, &mut rng).unwrap();
        let x = random_input(&[4, 3], &mut rng);
        let t = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let masks = vec![vec![1.0, 0.0, 1.0, 1.0]];
        let trace = net.forward(&x, Some(&masks)).unwrap();
        let grads = net.backward(&trace, &t, 1.0).unwrap();
        let g0 = grads.params[0].as_ref().unwrap();
        assert!(g0.weights.data()[3..6].iter().all(|&v| v == 0.0));
        assert_eq!(g0.bias[1], 0.0);
        let g1 = grads.params[1].as_ref().unwrap();
        assert_eq!(g1.weights.data()[1], 0.0);
        assert_eq!(g1.weights.data()[4 + 1], 0.0);
    }

    #[test]
    fn single_linear_unit_least_squares_gradient() {
        // y_hat = w·x + b, C = Σ (τ/2)(y_hat − y)²  ⇒  ∂C/∂w = τ Σ (y_hat − y) x
        let w = Tensor::from_rows(&[&[0.5, -2.0]]).unwrap();
        let layer = Layer::Dense {
            params: Params { weights: w, bias: vec![0.25] },
            activation: ActivationKind::Identity,
            gated: false,
        };
        let net = Network::from_layers(vec![2], vec![layer], LossKind::GaussianNll { tau: 3.0 }).unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let y = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let trace = net.forward(&x, None).unwrap();
        let grads = net.backward(&trace, &y, 1.0).unwrap();
        let r = [0.5 - 4.0 + 0.25 - 0.0, -0.5 - 1.0 + 0.25 - 1.0];
        let expect_w = [3.0 * (r[0] * 1.0 + r[1] * -1.0), 3.0 * (r[0] * 2.0 + r[1] * 0.5)];
        let g = grads.params[0].as_ref().unwrap();
        assert!((g.weights.data()[0] - expect_w[0]).abs() < 1e-12);
        assert!((g.weights.data()[1] - expect_w[1]).abs() < 1e-12);
        assert!((g.bias[0] - 3.0 * (r[0] + r[1])).abs() < 1e-12);
    }

    #[test]
    fn gate_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = small_cnn(&mut rng);
        let x = random_input(&[3, 2, 8, 8], &mut rng);
        let t = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let masks: Vec<Vec<f64>> = net.gate_widths().iter().map(|&w| vec![0.7; w]).collect();
        let grads = net.backward(&net.forward(&x, Some(&masks)).unwrap(), &t, 2.0).unwrap();
        let cost = |m: &[Vec<f64>]| {
            let out = net.predict(&x, Some(m)).unwrap();
            2.0 * loss_and_grad(net.loss(), &out, &t).unwrap().total
        };
        let h = 1e-6;
        for g in 0..masks.len() {
            for u in 0..masks[g].len() {
                let mut p = masks.clone();
                p[g][u] += h;
                let mut m = masks.clone();
                m[g][u] -= h;
                let fd = (cost(&p) - cost(&m)) / (2.0 * h);
                let an = grads.gate_grads[g][u];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{g}/{u}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn unit_views_partition_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Network::mlp(2, &[2], 1, LossKind::GaussianNll { tau: 1.0 }, &mut rng).unwrap();
        let views = net.unit_views();
        let out = net.layers()[1].params().unwrap();
        assert_eq!(views[0][0].w_f, vec![out.weights.data()[0]]);
        assert_eq!(views[0][1].w_f, vec![out.weights.data()[1]]);

        let cnn = small_cnn(&mut rng);
        let views = cnn.unit_views();
        let first = cnn.layers()[0].params().unwrap();
        let k = first.weights.sample_len();
        let ss: f64 = first.weights.data()[..k].iter().map(|v| v * v).sum();
        assert!((views[0][0].w_b.iter().map(|v| v * v).sum::<f64>() - ss).abs() < 1e-15);
        // every weight of a consumer belongs to exactly one upstream w_f
        for (g, layer) in views.iter().enumerate() {
            let consumer = cnn.layers()[cnn.fan_out(g).layer()].params().unwrap();
            let total: usize = layer.iter().map(|v| v.w_f.len()).sum();
            assert_eq!(total, consumer.weights.len());
            let fan_in: usize = layer.iter().map(|v| v.w_b.len()).sum();
            assert_eq!(fan_in, cnn.layers()[cnn.gated_layers()[g]].params().unwrap().weights.len());
        }
    }

    #[test]
    fn zero_weight_unit_has_zero_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = small_cnn(&mut rng);
        net.zero_unit(1, 0);
        assert_eq!(net.phi(1, 0), 0.0);
        assert!(net.phi(1, 1) > 0.0);
    }

    #[test]
    fn prune_matches_forced_gate_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = small_cnn(&mut rng);
        let mut gates = GateState::new(&net, 0.5).unwrap();
        let x = random_input(&[2, 2, 8, 8], &mut rng);
        let mut masks: Vec<Vec<f64>> = net.gate_widths().iter().map(|&w| vec![1.0; w]).collect();
        masks[0][2] = 0.0;
        let forced = net.predict(&x, Some(&masks)).unwrap();
        assert!(prune_unit(&mut net, &mut gates, 0, 2));
        assert!(!prune_unit(&mut net, &mut gates, 0, 2));
        assert_eq!(gates.alive_counts(), vec![2, 2, 4]);
        let pruned = net.predict(&x, None).unwrap();
        for (a, b) in forced.data().iter().zip(pruned.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        let sample = gates.sample(&mut rng).unwrap();
        assert_eq!(sample[0][2], 0.0);
    }

    #[test]
    fn pruning_a_whole_layer_leaves_bias_only_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = Network::mlp(3, &[4, 3], 2, LossKind::GaussianNll { tau: 1.0 }, &mut rng).unwrap();
        let mut gates = GateState::new(&net, 0.5).unwrap();
        for u in 0..3 {
            prune_unit(&mut net, &mut gates, 1, u);
        }
        net.layers_mut()[2].params_mut().unwrap().bias = vec![0.3, -0.7];
        let a = net.predict(&random_input(&[4, 3], &mut rng), None).unwrap();
        for row in a.data().chunks(2) {
            assert_eq!(row, &[0.3, -0.7]);
        }
    }

    #[test]
    fn a_layer_compacted_to_zero_width_still_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = Network::mlp(3, &[4, 3], 2, LossKind::CategoricalCe, &mut rng).unwrap();
        let mut gates = GateState::new(&net, 0.5).unwrap();
        for u in 0..3 {
            prune_unit(&mut net, &mut gates, 1, u);
        }
        compact(&mut net, &mut gates).unwrap();
        assert_eq!(net.gate_widths(), vec![4, 0]);
        let x = random_input(&[5, 3], &mut rng);
        let t = Tensor::new(vec![5, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let masks: Vec<Vec<f64>> = net.gate_widths().iter().map(|&w| vec![1.0; w]).collect();
        let grads = net.backward(&net.forward(&x, Some(&masks)).unwrap(), &t, 1.0).unwrap();
        assert!(grads.cost.is_finite());
        assert!(grads.gate_grads[1].is_empty());
        // Nothing upstream of the empty layer can influence the cost.
        assert!(grads.params[0].as_ref().unwrap().weights.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn compaction_preserves_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = small_cnn(&mut rng);
        let mut gates = GateState::new(&net, 0.5).unwrap();
        prune_unit(&mut net, &mut gates, 0, 1);
        prune_unit(&mut net, &mut gates, 1, 0);
        prune_unit(&mut net, &mut gates, 2, 3);
        let x = random_input(&[2, 2, 8, 8], &mut rng);
        let before = net.predict(&x, None).unwrap();
        let keep = compact(&mut net, &mut gates).unwrap();
        assert_eq!(keep, vec![vec![0, 2], vec![1], vec![0, 1, 2]]);
        assert_eq!(net.gate_widths(), vec![2, 1, 3]);
        assert_eq!(gates.layers[2].origin, vec![0, 1, 2]);
        let after = net.predict(&x, None).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn bernoulli_sampling_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = Network::mlp(1, &[3], 1, LossKind::GaussianNll { tau: 1.0 }, &mut rng).unwrap();
        let mut gates = GateState::new(&net, 0.5).unwrap();
        gates.layers[0].theta = vec![1.0, 0.0, 0.5];
        let draws = 100_000;
        let mut ones = 0.0;
        for _ in 0..draws {
            let s = gates.sample(&mut rng).unwrap();
            assert_eq!(s[0][0], 1.0);
            assert_eq!(s[0][1], 0.0);
            ones += s[0][2];
        }
        let mean = ones / draws as f64;
        let se = (0.25 / draws as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se);
        gates.layers[0].theta[0] = 1.5;
        assert!(gates.sample(&mut rng).is_err());
    }

    #[test]
    fn regated_output_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = small_cnn(&mut rng);
        let x = random_input(&[2, 2, 8, 8], &mut rng);
        let masks: Vec<Vec<f64>> = net.gate_widths().iter().map(|&w| vec![1.0; w]).collect();
        let trace = net.forward(&x, Some(&masks)).unwrap();
        let mut flipped = masks.clone();
        flipped[1][0] = 0.0;
        let direct = net.predict(&x, Some(&flipped)).unwrap();
        let partial = net.regated_output(&trace, 1, &flipped[1], Some(&flipped)).unwrap();
        assert_eq!(direct, partial);
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let gated_out = [LayerSpec::Dense { units: 2, activation: ActivationKind::SoftmaxOutput, gated: true }];
        assert!(Network::new(&[3], &gated_out, LossKind::CategoricalCe, &mut rng).is_err());
        let mismatched = [LayerSpec::Dense { units: 2, activation: ActivationKind::Identity, gated: false }];
        assert!(Network::new(&[3], &mismatched, LossKind::CategoricalCe, &mut rng).is_err());
        let odd = [
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 2, activation: ActivationKind::Identity, gated: false },
        ];
        assert!(Network::new(&[1, 3, 3], &odd, LossKind::GaussianNll { tau: 1.0 }, &mut rng).is_err());
    }

    #[test]
    fn lenet5_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let net = Network::lenet5(10, &mut rng).unwrap();
        assert_eq!(net.gate_widths(), vec![6, 16, 120, 84]);
        assert_eq!(net.fan_out(1), FanOut::DenseCols { layer: 5, block: 16 });
        assert_eq!(net.fan_out(0), FanOut::ConvChannel { layer: 2 });
        let y = net.predict(&Tensor::zeros(vec![1, 1, 28, 28]), None).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
    }
}
