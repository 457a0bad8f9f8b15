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

//! Dense and convolutional numeric primitives in f64 with explicit backward passes.
//!
//! Batches are row-major: dense activations are `[batch, features]`, feature maps are
//! `[batch, channels, height, width]`. Nothing in here allocates threads, so results are
//! bit-identical across runs for identical inputs.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    /// Builds a `[rows.len(), cols]` matrix from row slices.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent, i.e. the batch size for activation tensors.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of values per leading index.
    pub fn sample_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn ensure_finite(&self, label: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(label.to_string()))
        }
    }

    /// Gathers the given leading-axis entries into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let stride = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(indices.len());
        } else {
            shape[0] = indices.len();
        }
        Tensor { shape, data }
    }

    /// Contiguous leading-axis range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Tensor {
        let stride = self.sample_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major operands, where `op(a)` is `m x k` and
/// `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every element addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationKind {
    Identity,
    LeakyRelu { slope: f64 },
    /// Identity on the forward pass; the softmax is fused into the categorical loss.
    SoftmaxOutput,
}

impl ActivationKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::LeakyRelu { slope } if !(slope > 0.0 && slope < 1.0) => {
                Err(Error::param(format!("leaky slope {slope} outside (0,1)")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, pre: &[f64], out: &mut [f64]) {
        match *self {
            ActivationKind::Identity | ActivationKind::SoftmaxOutput => out.copy_from_slice(pre),
            ActivationKind::LeakyRelu { slope } => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = if p > 0.0 { p } else { slope * p };
                }
            }
        }
    }

    /// Multiplies `grad` in place by the activation derivative at `pre`. The leaky
    /// branch uses the leak slope at exactly zero.
    pub fn backward(&self, pre: &[f64], grad: &mut [f64]) {
        if let ActivationKind::LeakyRelu { slope } = *self {
            for (g, &p) in grad.iter_mut().zip(pre) {
                if p <= 0.0 {
                    *g *= slope;
                }
            }
        }
    }

    /// `a(s)/s`, the secant slope of the activation through the origin.
    pub fn secant(&self, s: f64) -> f64 {
        match *self {
            ActivationKind::LeakyRelu { slope } if s <= 0.0 => slope,
            _ => 1.0,
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        self.secant(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Gaussian likelihood with precision `tau` on a linear output.
    GaussianNll { tau: f64 },
    /// Categorical likelihood on a softmax output, one-hot targets.
    CategoricalCe,
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::GaussianNll { tau } if !(tau > 0.0 && tau.is_finite()) => {
                Err(Error::param(format!("precision tau must be > 0, got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

/// Loss summed over the batch together with its gradient w.r.t. the output
/// pre-activations.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: f64,
    pub per_sample: Vec<f64>,
    pub grad: Tensor,
}

pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn check_one_hot(row: &[f64]) -> bool {
    let mut ones = 0;
    for &v in row {
        if v == 1.0 {
            ones += 1;
        } else if v != 0.0 {
            return false;
        }
    }
    ones == 1
}

/// Negative log-likelihood per sample (constants included) and `d loss / d outputs`.
pub fn loss_and_grad(kind: LossKind, outputs: &Tensor, targets: &Tensor) -> Result<LossOutput> {
    kind.validate()?;
    if outputs.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "outputs {:?} vs targets {:?}",
            outputs.shape(),
            targets.shape()
        )));
    }
    let batch = outputs.batch();
    let width = outputs.sample_len();
    let mut grad = Tensor::zeros(outputs.shape().to_vec());
    let mut per_sample = Vec::with_capacity(batch);
    match kind {
        LossKind::GaussianNll { tau } => {
            let constant = 0.5 * ((2.0 * std::f64::consts::PI).ln() - tau.ln());
            for i in 0..batch {
                let y_hat = &outputs.data()[i * width..(i + 1) * width];
                let y = &targets.data()[i * width..(i + 1) * width];
                let g = &mut grad.data_mut()[i * width..(i + 1) * width];
                let mut loss = 0.0;
                for k in 0..width {
                    let r = y_hat[k] - y[k];
                    loss += 0.5 * tau * r * r + constant;
                    g[k] = tau * r;
                }
                per_sample.push(loss);
            }
        }
        LossKind::CategoricalCe => {
            let mut probs = vec![0.0; width];
            for i in 0..batch {
                let logits = &outputs.data()[i * width..(i + 1) * width];
                let y = &targets.data()[i * width..(i + 1) * width];
                if !check_one_hot(y) {
                    return Err(Error::Data(format!("target row {i} is not one-hot")));
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let log_norm = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                softmax(logits, &mut probs);
                let g = &mut grad.data_mut()[i * width..(i + 1) * width];
                let mut loss = 0.0;
                for k in 0..width {
                    if y[k] == 1.0 {
                        loss += log_norm - logits[k];
                    }
                    g[k] = probs[k] - y[k];
                }
                per_sample.push(loss);
            }
        }
    }
    let total = per_sample.iter().sum::<f64>();
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(LossOutput { total, per_sample, grad })
}

/// `input · Wᵀ + b` for `weights: [out, in]`, `input: [batch, in]`.
pub fn affine_forward(weights: &Tensor, bias: &[f64], input: &Tensor) -> Result<Tensor> {
    let (out_dim, in_dim) = matrix_dims(weights)?;
    if input.sample_len() != in_dim || bias.len() != out_dim {
        return Err(Error::shape(format!(
            "affine: weights {:?}, bias {}, input {:?}",
            weights.shape(),
            bias.len(),
            input.shape()
        )));
    }
    let batch = input.batch();
    let mut out = Vec::with_capacity(batch * out_dim);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm(batch, in_dim, out_dim, input.data(), false, weights.data(), true, &mut out, 1.0);
    Tensor::new(vec![batch, out_dim], out)
}

/// Gradients of an affine layer given `delta = dL/d(pre-activation)`.
/// Returns `(dW, db, dInput)`; the input gradient is skipped when not requested.
pub fn affine_backward(
    weights: &Tensor,
    input: &Tensor,
    delta: &Tensor,
    want_input_grad: bool,
) -> Result<(Tensor, Vec<f64>, Option<Tensor>)> {
    let (out_dim, in_dim) = matrix_dims(weights)?;
    let batch = input.batch();
    if delta.shape() != [batch, out_dim] || input.sample_len() != in_dim {
        return Err(Error::shape("affine backward operand mismatch"));
    }
    let mut dw = vec![0.0; out_dim * in_dim];
    gemm(out_dim, batch, in_dim, delta.data(), true, input.data(), false, &mut dw, 0.0);
    let mut db = vec![0.0; out_dim];
    for row in delta.data().chunks_exact(out_dim.max(1)) {
        for (d, r) in db.iter_mut().zip(row) {
            *d += r;
        }
    }
    let dx = if want_input_grad {
        let mut dx = vec![0.0; batch * in_dim];
        gemm(batch, out_dim, in_dim, delta.data(), false, weights.data(), false, &mut dx, 0.0);
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((Tensor::new(vec![out_dim, in_dim], dw)?, db, dx))
}

fn matrix_dims(weights: &Tensor) -> Result<(usize, usize)> {
    match weights.shape() {
        [o, i] => Ok((*o, *i)),
        s => Err(Error::shape(format!("expected a matrix, got {s:?}"))),
    }
}

fn filter_dims(filters: &Tensor) -> Result<(usize, usize, usize)> {
    match filters.shape() {
        [o, i, k, k2] if k == k2 => Ok((*o, *i, *k)),
        s => Err(Error::shape(format!("expected square filters [out,in,k,k], got {s:?}"))),
    }
}

fn fmap_dims(input: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match input.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        s => Err(Error::shape(format!("expected [batch,c,h,w], got {s:?}"))),
    }
}

fn im2col(x: &[f64], channels: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let src = &plane[(oh + kh) * w + kw..(oh + kh) * w + kw + wo];
                    dst[oh * wo..(oh + 1) * wo].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(cols: &[f64], channels: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let dst = &mut plane[(oh + kh) * w + kw..(oh + kh) * w + kw + wo];
                    for (d, s) in dst.iter_mut().zip(&src[oh * wo..(oh + 1) * wo]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Valid, stride-1 cross-correlation: `out[o] = Σ_i filters[o,i] ⋆ input[i] + bias[o]`.
pub fn conv2d_forward(filters: &Tensor, bias: &[f64], input: &Tensor) -> Result<Tensor> {
    let (out_c, in_c, k) = filter_dims(filters)?;
    let (batch, c, h, w) = fmap_dims(input)?;
    if c != in_c || bias.len() != out_c {
        return Err(Error::shape(format!(
            "conv: filters {:?}, bias {}, input {:?}",
            filters.shape(),
            bias.len(),
            input.shape()
        )));
    }
    if k > h || k > w {
        return Err(Error::shape(format!("kernel {k} larger than input {h}x{w}")));
    }
    let (ho, wo) = (h - k + 1, w - k + 1);
    let patch = in_c * k * k;
    let mut cols = vec![0.0; patch * ho * wo];
    let mut out = vec![0.0; batch * out_c * ho * wo];
    for b in 0..batch {
        im2col(&input.data()[b * c * h * w..(b + 1) * c * h * w], c, h, w, k, &mut cols);
        let dst = &mut out[b * out_c * ho * wo..(b + 1) * out_c * ho * wo];
        for (o, plane) in dst.chunks_exact_mut(ho * wo).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(out_c, patch, ho * wo, filters.data(), false, &cols, false, dst, 1.0);
    }
    Tensor::new(vec![batch, out_c, ho, wo], out)
}

/// Backward of [`conv2d_forward`] given `delta = dL/d(output)`.
pub fn conv2d_backward(
    filters: &Tensor,
    input: &Tensor,
    delta: &Tensor,
    want_input_grad: bool,
) -> Result<(Tensor, Vec<f64>, Option<Tensor>)> {
    let (out_c, in_c, k) = filter_dims(filters)?;
    let (batch, c, h, w) = fmap_dims(input)?;
    let (ho, wo) = (h - k + 1, w - k + 1);
    if c != in_c || delta.shape() != [batch, out_c, ho, wo] {
        return Err(Error::shape("conv backward operand mismatch"));
    }
    let patch = in_c * k * k;
    let mut cols = vec![0.0; patch * ho * wo];
    let mut dcols = vec![0.0; patch * ho * wo];
    let mut dw = vec![0.0; out_c * patch];
    let mut db = vec![0.0; out_c];
    let mut dx = if want_input_grad { vec![0.0; input.len()] } else { Vec::new() };
    for b in 0..batch {
        let x = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let d = &delta.data()[b * out_c * ho * wo..(b + 1) * out_c * ho * wo];
        im2col(x, c, h, w, k, &mut cols);
        gemm(out_c, ho * wo, patch, d, false, &cols, true, &mut dw, 1.0);
        for (o, plane) in d.chunks_exact(ho * wo).enumerate() {
            db[o] += plane.iter().sum::<f64>();
        }
        if want_input_grad {
            gemm(patch, out_c, ho * wo, filters.data(), true, d, false, &mut dcols, 0.0);
            col2im_add(&dcols, c, h, w, k, &mut dx[b * c * h * w..(b + 1) * c * h * w]);
        }
    }
    let dx = if want_input_grad {
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((Tensor::new(filters.shape().to_vec(), dw)?, db, dx))
}

/// Winner positions of a max-pool pass: flat input index for every output element.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolTrace {
    pub argmax: Vec<usize>,
    pub input_shape: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major order.
pub fn pool_forward(input: &Tensor) -> Result<(Tensor, PoolTrace)> {
    let (batch, c, h, w) = fmap_dims(input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("pooling needs even spatial dims, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * c * ho * wo);
    let mut argmax = Vec::with_capacity(batch * c * ho * wo);
    let x = input.data();
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + 2 * oh * w + 2 * ow;
                for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oh + dh) * w + 2 * ow + dw;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let trace = PoolTrace { argmax, input_shape: input.shape().to_vec() };
    Ok((Tensor::new(vec![batch, c, ho, wo], out)?, trace))
}

pub fn pool_backward(trace: &PoolTrace, grad: &Tensor) -> Result<Tensor> {
    if grad.len() != trace.argmax.len() {
        return Err(Error::shape("pool backward: gradient does not match trace"));
    }
    let mut dx = Tensor::zeros(trace.input_shape.clone());
    let d = dx.data_mut();
    for (&idx, &g) in trace.argmax.iter().zip(grad.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn affine_examples() {
        // identity block with zero bias
        let w = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let z = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(affine_forward(&w, &[0.0, 0.0], &z).unwrap().data(), &[3.0, 4.0]);

        // pure bias
        let w = Tensor::from_rows(&[&[0.0, 0.0]]).unwrap();
        let z = Tensor::new(vec![1, 2], vec![-7.0, 11.0]).unwrap();
        assert_eq!(affine_forward(&w, &[5.0], &z).unwrap().data(), &[5.0]);

        // 2·1 + 1·2 − 1
        let w = Tensor::from_rows(&[&[2.0, 1.0]]).unwrap();
        let z = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(affine_forward(&w, &[-1.0], &z).unwrap().data(), &[3.0]);
    }

    #[test]
    fn affine_rejects_mismatch() {
        let w = Tensor::zeros(vec![2, 3]);
        let z = Tensor::zeros(vec![1, 2]);
        assert!(matches!(affine_forward(&w, &[0.0; 2], &z), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::filled(vec![1, 1, 2, 2], 1.0);
        assert_eq!(conv2d_forward(&ones, &[0.0], &x).unwrap().data(), &[10.0]);

        let unit = Tensor::filled(vec![1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&unit, &[0.0], &x).unwrap();
        assert_eq!(y.data(), x.data());

        let zero = Tensor::zeros(vec![3, 1, 2, 2]);
        let y = conv2d_forward(&zero, &[0.0; 3], &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let big = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(conv2d_forward(&big, &[0.0], &x).is_err());
    }

    #[test]
    fn conv_impulse_reproduces_flipped_kernel() {
        // Cross-correlation of a centred impulse yields the kernel rotated by 180 degrees.
        let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
        let f = Tensor::new(vec![1, 1, 3, 3], kernel.clone()).unwrap();
        let mut x = Tensor::zeros(vec![1, 1, 5, 5]);
        x.data_mut()[12] = 1.0;
        let y = conv2d_forward(&f, &[0.0], &x).unwrap();
        let flipped: Vec<f64> = kernel.iter().rev().copied().collect();
        assert_eq!(y.data(), flipped.as_slice());

        // Backward consistency: dW for an impulse input and unit delta at the centre
        // reads the input patch, i.e. the impulse lands at the kernel centre.
        let mut delta = Tensor::zeros(vec![1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let (dw, _, dx) = conv2d_backward(&f, &x, &delta, true).unwrap();
        let mut centre = vec![0.0; 9];
        centre[4] = 1.0;
        assert_eq!(dw.data(), centre.as_slice());
        // dx scatters the (unflipped) kernel around the centre position.
        let dx = dx.unwrap();
        for kh in 0..3 {
            for kw in 0..3 {
                assert_eq!(dx.data()[(1 + kh) * 5 + 1 + kw], kernel[kh * 3 + kw]);
            }
        }
    }

    #[test]
    fn pool_examples() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, trace) = pool_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(trace.argmax, vec![3]); // (row 1, col 1)

        let c = Tensor::filled(vec![1, 1, 2, 2], 2.5);
        let (y, trace) = pool_forward(&c).unwrap();
        assert_eq!(y.data(), &[2.5]);
        assert_eq!(trace.argmax, vec![0]);

        let ramp = Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let (y, _) = pool_forward(&ramp).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);

        let odd = Tensor::zeros(vec![1, 1, 3, 2]);
        assert!(pool_forward(&odd).is_err());
    }

    #[test]
    fn pool_backward_routes_to_winner() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let (_, trace) = pool_forward(&x).unwrap();
        let g = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(pool_backward(&trace, &g).unwrap().data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn loss_examples() {
        let y = Tensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap();
        let out = loss_and_grad(LossKind::GaussianNll { tau: 1.0 }, &y, &y).unwrap();
        let constant = 2.0 * 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!(approx(out.total, constant, 1e-12));
        assert!(out.grad.data().iter().all(|&g| g == 0.0));

        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let target = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let out = loss_and_grad(LossKind::CategoricalCe, &logits, &target).unwrap();
        assert!(approx(out.grad.data()[0], -0.5, 1e-15));
        assert!(approx(out.grad.data()[1], 0.5, 1e-15));
        assert!(approx(out.total, 2f64.ln(), 1e-15));

        let y_hat = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let out = loss_and_grad(LossKind::GaussianNll { tau: 2.0 }, &y_hat, &y).unwrap();
        assert_eq!(out.grad.data(), &[2.0]);
    }

    #[test]
    fn loss_errors() {
        let logits = Tensor::zeros(vec![1, 2]);
        let bad = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            loss_and_grad(LossKind::CategoricalCe, &logits, &bad),
            Err(Error::Data(_))
        ));
        assert!(loss_and_grad(LossKind::GaussianNll { tau: 0.0 }, &logits, &logits).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let logits = [1000.0, -3.0, 0.5, 12.0];
        let mut p = [0.0; 4];
        softmax(&logits, &mut p);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn leaky_relu_subgradient_at_zero() {
        let act = ActivationKind::LeakyRelu { slope: 1e-3 };
        let mut g = [1.0, 1.0, 1.0];
        act.backward(&[-1.0, 0.0, 1.0], &mut g);
        assert_eq!(g, [1e-3, 1e-3, 1.0]);
        assert!(ActivationKind::LeakyRelu { slope: 1.5 }.validate().is_err());
    }
}
