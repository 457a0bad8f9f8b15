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

//! Estimators of the per-unit data term `C₁ − C₀` of the gate gradient.
//!
//! `C₁` (`C₀`) is the expected minibatch cost with one gate forced on (off) and every
//! other gate drawn from its posterior. All estimators are oriented so that a negative
//! value means the unit lowers the cost.

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{ForwardTrace, GateState, Gradients, Network};
use crate::tensor::{loss_and_grad, Tensor};

/// Maximum number of alive gates the exact oracle enumerates.
pub const BRUTE_FORCE_MAX_UNITS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EstimatorKind {
    /// First-order expansion in the fan-out weights (straight-through gate gradient).
    Taylor,
    /// Relaxed-gate pathwise gradient `∂C/∂θ` at temperature `t`.
    Concrete { t: f64 },
    /// One extra pass per alive unit with that unit's gate flipped.
    Sampling,
    /// Sampling for the `k` units with the largest `φ`, Taylor for the rest.
    Hybrid { k: usize },
    /// Exact enumeration over all gate configurations (tiny networks only).
    BruteForce,
}

impl EstimatorKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimatorKind::Concrete { t } if !(t > 0.0 && t < 1.0) => {
                Err(Error::param(format!("concrete temperature {t} outside (0,1)")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Taylor => "taylor",
            EstimatorKind::Concrete { .. } => "concrete",
            EstimatorKind::Sampling => "sampling",
            EstimatorKind::Hybrid { .. } => "hybrid",
            EstimatorKind::BruteForce => "brute-force",
        }
    }
}

/// Per-unit estimates grouped by gated layer. Pruned units carry `0.0` and no kind.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateReport {
    pub values: Vec<Vec<f64>>,
    pub kinds: Vec<Vec<Option<EstimatorKind>>>,
}

impl EstimateReport {
    fn empty(gates: &GateState) -> Self {
        EstimateReport {
            values: gates.layers.iter().map(|l| vec![0.0; l.theta.len()]).collect(),
            kinds: gates.layers.iter().map(|l| vec![None; l.theta.len()]).collect(),
        }
    }

    fn set(&mut self, g: usize, u: usize, value: f64, kind: EstimatorKind) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} estimate of unit {g}/{u}", kind.name())));
        }
        self.values[g][u] = value;
        self.kinds[g][u] = Some(kind);
        Ok(())
    }

    /// Values of alive units in layer-major order.
    pub fn alive_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.kinds)
            .flat_map(|(v, k)| v.iter().zip(k).filter(|(_, k)| k.is_some()).map(|(v, _)| *v))
            .collect()
    }
}

fn alive_units(gates: &GateState) -> Vec<(usize, usize)> {
    gates
        .layers
        .iter()
        .enumerate()
        .flat_map(|(g, l)| (0..l.alive.len()).filter(move |&u| l.alive[u]).map(move |u| (g, u)))
        .collect()
}

/// Taylor estimate from a backward pass: per unit `Σ_{i,positions} z·∂C/∂(ξz)`,
/// i.e. the derivative of the minibatch cost w.r.t. the unit's gate value.
pub fn taylor_diff(grads: &Gradients, gates: &GateState) -> Result<EstimateReport> {
    if grads.gate_grads.len() != gates.layers.len() {
        return Err(Error::shape("gradients lack gate derivatives for some layers"));
    }
    let mut report = EstimateReport::empty(gates);
    for (g, u) in alive_units(gates) {
        report.set(g, u, grads.gate_grads[g][u], EstimatorKind::Taylor)?;
    }
    Ok(report)
}

/// Relaxed gate `ξ(θ,u) = 1 − σ(h)` with `h = (ln(1−θ) − ln θ + ln u − ln(1−u))/t`, and
/// its derivative `∂ξ/∂θ = σ(h)(1−σ(h)) / (t·θ(1−θ))`.
pub fn concrete_gate(theta: f64, u: f64, t: f64) -> (f64, f64) {
    let h = ((-theta).ln_1p() - theta.ln() + u.ln() - (-u).ln_1p()) / t;
    let s = 1.0 / (1.0 + (-h).exp());
    (1.0 - s, s * (1.0 - s) / (t * theta * (1.0 - theta)))
}

/// Single-sample CONCRETE estimate of `∂C/∂θ` for every alive unit. `θ` is clamped to
/// `theta_bounds` to keep the relaxation finite. All gates are relaxed jointly.
#[allow(clippy::too_many_arguments)]
pub fn concrete_grad<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    targets: &Tensor,
    gates: &GateState,
    rng: &mut R,
    t: f64,
    data_scale: f64,
    theta_bounds: (f64, f64),
) -> Result<EstimateReport> {
    EstimatorKind::Concrete { t }.validate()?;
    let (lo, hi) = theta_bounds;
    if !(lo > 0.0 && hi < 1.0 && lo < hi) {
        return Err(Error::param("concrete theta bounds must lie inside (0,1)"));
    }
    let mut masks = Vec::with_capacity(gates.layers.len());
    let mut dxi = Vec::with_capacity(gates.layers.len());
    for layer in &gates.layers {
        let mut m = vec![0.0; layer.theta.len()];
        let mut d = vec![0.0; layer.theta.len()];
        for j in 0..layer.theta.len() {
            if layer.alive[j] {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let (xi, dx) = concrete_gate(layer.theta[j].clamp(lo, hi), u, t);
                m[j] = xi;
                d[j] = dx;
            }
        }
        masks.push(m);
        dxi.push(d);
    }
    let trace = net.forward(x, Some(&masks))?;
    let grads = net.backward(&trace, targets, data_scale)?;
    let kind = EstimatorKind::Concrete { t };
    let mut report = EstimateReport::empty(gates);
    for (g, u) in alive_units(gates) {
        report.set(g, u, grads.gate_grads[g][u] * dxi[g][u], kind)?;
    }
    Ok(report)
}

fn batch_cost(net: &Network, output: &Tensor, targets: &Tensor, data_scale: f64) -> Result<f64> {
    Ok(data_scale * loss_and_grad(net.loss(), output, targets)?.total)
}

fn sampling_unit(
    net: &Network,
    trace: &ForwardTrace,
    masks: &[Vec<f64>],
    targets: &Tensor,
    data_scale: f64,
    base: f64,
    g: usize,
    u: usize,
) -> Result<f64> {
    let mut flipped = masks[g].clone();
    let on = masks[g][u] != 0.0;
    flipped[u] = if on { 0.0 } else { 1.0 };
    let mut all = masks.to_vec();
    all[g].clone_from(&flipped);
    let out = net.regated_output(trace, g, &flipped, Some(&all))?;
    let other = batch_cost(net, &out, targets, data_scale)?;
    Ok(if on { base - other } else { other - base })
}

/// Sampling estimate: with the minibatch's gate draw `masks` (already run in `trace`),
/// flip each alive unit's gate in turn and take the cost difference, oriented as
/// `C₁ − C₀`.
pub fn sampling_diff(
    net: &Network,
    trace: &ForwardTrace,
    masks: &[Vec<f64>],
    targets: &Tensor,
    gates: &GateState,
    data_scale: f64,
) -> Result<EstimateReport> {
    let base = batch_cost(net, &trace.output, targets, data_scale)?;
    let mut report = EstimateReport::empty(gates);
    for (g, u) in alive_units(gates) {
        let v = sampling_unit(net, trace, masks, targets, data_scale, base, g, u)?;
        report.set(g, u, v, EstimatorKind::Sampling)?;
    }
    Ok(report)
}

/// Hybrid estimate: sampling for the `k` alive units with the largest `φ` (ties by
/// position), Taylor for the rest.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_diff(
    net: &Network,
    trace: &ForwardTrace,
    grads: &Gradients,
    masks: &[Vec<f64>],
    targets: &Tensor,
    gates: &GateState,
    data_scale: f64,
    k: usize,
) -> Result<EstimateReport> {
    let mut report = taylor_diff(grads, gates)?;
    let units = alive_units(gates);
    if k > units.len() {
        return Err(Error::param(format!("hybrid k={k} exceeds {} alive units", units.len())));
    }
    let phi: Vec<f64> = units.iter().map(|&(g, u)| net.phi(g, u)).collect();
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    let base = batch_cost(net, &trace.output, targets, data_scale)?;
    for &i in order.iter().take(k) {
        let (g, u) = units[i];
        let v = sampling_unit(net, trace, masks, targets, data_scale, base, g, u)?;
        report.set(g, u, v, EstimatorKind::Hybrid { k })?;
    }
    Ok(report)
}

/// Exact `C₁ − C₀` for every alive unit by enumerating all `2^M` gate configurations
/// of the `M` alive units, weighted by their posterior probabilities.
pub fn brute_force_diff(
    net: &Network,
    x: &Tensor,
    targets: &Tensor,
    gates: &GateState,
    data_scale: f64,
) -> Result<EstimateReport> {
    let units = alive_units(gates);
    let m = units.len();
    if m > BRUTE_FORCE_MAX_UNITS {
        return Err(Error::Unsupported(format!(
            "brute force over {m} gates (limit {BRUTE_FORCE_MAX_UNITS})"
        )));
    }
    let theta: Vec<f64> = units.iter().map(|&(g, u)| gates.layers[g].theta[u]).collect();
    let mut costs = Vec::with_capacity(1 << m);
    let mut masks: Vec<Vec<f64>> = gates.layers.iter().map(|l| vec![0.0; l.theta.len()]).collect();
    for config in 0..1usize << m {
        for (bit, &(g, u)) in units.iter().enumerate() {
            masks[g][u] = ((config >> bit) & 1) as f64;
        }
        let out = net.predict(x, Some(&masks))?;
        costs.push(batch_cost(net, &out, targets, data_scale)?);
    }
    let mut report = EstimateReport::empty(gates);
    for (j, &(g, u)) in units.iter().enumerate() {
        let mut diff = 0.0;
        for config in 0..1usize << m {
            if (config >> j) & 1 == 0 {
                continue;
            }
            let mut w = 1.0;
            for (k, &t) in theta.iter().enumerate() {
                if k != j {
                    w *= if (config >> k) & 1 == 1 { t } else { 1.0 - t };
                }
            }
            if w != 0.0 {
                diff += w * (costs[config] - costs[config & !(1 << j)]);
            }
        }
        report.set(g, u, diff, EstimatorKind::BruteForce)?;
    }
    Ok(report)
}

/// Monte-Carlo statistics of one estimator over repeated draws.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorStats {
    pub kind: EstimatorKind,
    /// Per alive unit (layer-major), mean over draws.
    pub mean: Vec<f64>,
    /// Per alive unit, standard error of the mean.
    pub std_err: Vec<f64>,
}

/// Exact `C₁ − C₀` and the Monte-Carlo behaviour of a set of estimators on one
/// minibatch of an enumerable network.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub units: Vec<(usize, usize)>,
    pub exact: Vec<f64>,
    pub estimators: Vec<EstimatorStats>,
}

/// Runs every estimator in `kinds` for `draws` independent gate draws on the fixed
/// minibatch `(x, targets)` and compares with brute-force enumeration.
#[allow(clippy::too_many_arguments)]
pub fn bench_estimators<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    targets: &Tensor,
    gates: &GateState,
    kinds: &[EstimatorKind],
    draws: usize,
    data_scale: f64,
    rng: &mut R,
) -> Result<BenchReport> {
    if draws < 2 {
        return Err(Error::param("at least two draws are needed for a standard error"));
    }
    let exact_report = brute_force_diff(net, x, targets, gates, data_scale)?;
    let units = alive_units(gates);
    let exact = exact_report.alive_values();
    let mut gates = gates.clone();
    let mut estimators = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        kind.validate()?;
        let m = units.len();
        let (mut sum, mut sum_sq) = (vec![0.0; m], vec![0.0; m]);
        let reps = if kind == EstimatorKind::BruteForce { 1 } else { draws };
        for _ in 0..reps {
            let values = match kind {
                EstimatorKind::BruteForce => exact.clone(),
                EstimatorKind::Concrete { t } => {
                    concrete_grad(net, x, targets, &gates, rng, t, data_scale, (1e-6, 1.0 - 1e-6))?.alive_values()
                }
                _ => {
                    let masks = gates.sample(rng)?;
                    let trace = net.forward(x, Some(&masks))?;
                    let report = match kind {
                        EstimatorKind::Sampling => sampling_diff(net, &trace, &masks, targets, &gates, data_scale)?,
                        EstimatorKind::Taylor => taylor_diff(&net.backward(&trace, targets, data_scale)?, &gates)?,
                        EstimatorKind::Hybrid { k } => {
                            let grads = net.backward(&trace, targets, data_scale)?;
                            hybrid_diff(net, &trace, &grads, &masks, targets, &gates, data_scale, k)?
                        }
                        _ => unreachable!("handled above"),
                    };
                    report.alive_values()
                }
            };
            for (i, v) in values.into_iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        let n = reps as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std_err = if reps == 1 {
            vec![0.0; m]
        } else {
            sum_sq
                .iter()
                .zip(&mean)
                .map(|(s2, mu)| ((s2 / n - mu * mu).max(0.0) * n / (n - 1.0) / n).sqrt())
                .collect()
        };
        estimators.push(EstimatorStats { kind, mean, std_err });
    }
    Ok(BenchReport { units, exact, estimators })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{prune_unit, LayerSpec};
    use crate::tensor::{ActivationKind, LossKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> (Tensor, Tensor) {
        let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut y = Tensor::zeros(vec![n, classes]);
        for i in 0..n {
            y.data_mut()[i * classes + rng.gen_range(0..classes)] = 1.0;
        }
        (x, y)
    }

    fn tiny(rng: &mut ChaCha8Rng) -> (Network, GateState) {
        let net = Network::mlp(2, &[3, 2], 2, LossKind::CategoricalCe, rng).unwrap();
        let mut gates = GateState::new(&net, 0.5).unwrap();
        for l in &mut gates.layers {
            for t in &mut l.theta {
                *t = rng.gen_range(0.2..0.9);
            }
        }
        (net, gates)
    }

    #[test]
    fn concrete_gate_limits_and_derivative() {
        let (xi, d) = concrete_gate(0.5, 0.5, 0.1);
        assert_eq!(xi, 0.5);
        assert!((d - 1.0 / 0.1).abs() < 1e-12);
        assert!(concrete_gate(0.6, 0.3, 1e-4).0 > 1.0 - 1e-12);
        assert!(concrete_gate(0.6, 0.9, 1e-4).0 < 1e-12);
        // derivative against central differences of ξ(θ, u)
        for (theta, u, t) in [(0.3, 0.4, 0.5), (0.7, 0.2, 0.1), (0.05, 0.01, 0.3)] {
            let h = 1e-7;
            let fd = (concrete_gate(theta + h, u, t).0 - concrete_gate(theta - h, u, t).0) / (2.0 * h);
            let an = concrete_gate(theta, u, t).1;
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
        }
    }

    #[test]
    fn single_gate_brute_force_is_two_forward_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::mlp(2, &[1], 2, LossKind::CategoricalCe, &mut rng).unwrap();
        let gates = GateState::new(&net, 0.3).unwrap();
        let (x, y) = data(&mut rng, 8, 2, 2);
        let bf = brute_force_diff(&net, &x, &y, &gates, 1.0).unwrap();
        let c = |m: f64| {
            let out = net.predict(&x, Some(&[vec![m]])).unwrap();
            loss_and_grad(net.loss(), &out, &y).unwrap().total
        };
        assert!((bf.values[0][0] - (c(1.0) - c(0.0))).abs() < 1e-12);
    }

    #[test]
    fn brute_force_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (net, gates) = tiny(&mut rng);
        let (x, y) = data(&mut rng, 8, 2, 2);
        let bf = brute_force_diff(&net, &x, &y, &gates, 1.0).unwrap();
        // MC over the other gates for unit (0, 1)
        let draws = 100_000;
        let mut g2 = gates.clone();
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let mut m = g2.sample(&mut rng).unwrap();
            m[0][1] = 1.0;
            let c1 = loss_and_grad(net.loss(), &net.predict(&x, Some(&m)).unwrap(), &y).unwrap().total;
            m[0][1] = 0.0;
            let c0 = loss_and_grad(net.loss(), &net.predict(&x, Some(&m)).unwrap(), &y).unwrap().total;
            sum += c1 - c0;
            sq += (c1 - c0) * (c1 - c0);
        }
        let mean = sum / draws as f64;
        let se = ((sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        assert!((mean - bf.values[0][1]).abs() < 3.0 * se, "{mean} ± {se} vs {}", bf.values[0][1]);
    }

    #[test]
    fn sampling_equals_brute_force_with_deterministic_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (net, mut gates) = tiny(&mut rng);
        gates.layers[0].theta = vec![1.0, 0.0, 1.0];
        gates.layers[1].theta = vec![0.0, 1.0];
        let (x, y) = data(&mut rng, 8, 2, 2);
        let masks = gates.sample(&mut rng).unwrap();
        let trace = net.forward(&x, Some(&masks)).unwrap();
        let s = sampling_diff(&net, &trace, &masks, &y, &gates, 1.0).unwrap();
        let bf = brute_force_diff(&net, &x, &y, &gates, 1.0).unwrap();
        for (a, b) in s.alive_values().iter().zip(bf.alive_values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_fan_out_unit_gives_zero_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut net, gates) = tiny(&mut rng);
        // zero the fan-out of unit (1, 0): output-layer column 0
        let out = net.layers_mut()[2].params_mut().unwrap();
        out.weights.data_mut()[0] = 0.0;
        out.weights.data_mut()[2] = 0.0;
        let (x, y) = data(&mut rng, 8, 2, 2);
        let mut g = gates.clone();
        let masks = g.sample(&mut rng).unwrap();
        let trace = net.forward(&x, Some(&masks)).unwrap();
        let grads = net.backward(&trace, &y, 1.0).unwrap();
        let reports = [
            taylor_diff(&grads, &gates).unwrap(),
            sampling_diff(&net, &trace, &masks, &y, &gates, 1.0).unwrap(),
            concrete_grad(&net, &x, &y, &gates, &mut rng, 0.1, 1.0, (1e-5, 1.0 - 1e-5)).unwrap(),
            brute_force_diff(&net, &x, &y, &gates, 1.0).unwrap(),
            hybrid_diff(&net, &trace, &grads, &masks, &y, &gates, 1.0, 2).unwrap(),
        ];
        for r in &reports {
            assert!(r.values[1][0].abs() < 1e-12, "{:?}", r.kinds[1][0]);
        }
    }

    #[test]
    fn hybrid_limits_and_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut net, gates) = tiny(&mut rng);
        net.scale_unit(0, 2, 10.0);
        let (x, y) = data(&mut rng, 8, 2, 2);
        let mut g = gates.clone();
        let masks = g.sample(&mut rng).unwrap();
        let trace = net.forward(&x, Some(&masks)).unwrap();
        let grads = net.backward(&trace, &y, 1.0).unwrap();
        let taylor = taylor_diff(&grads, &gates).unwrap();
        let sampling = sampling_diff(&net, &trace, &masks, &y, &gates, 1.0).unwrap();
        let h0 = hybrid_diff(&net, &trace, &grads, &masks, &y, &gates, 1.0, 0).unwrap();
        assert_eq!(h0.values, taylor.values);
        let all = hybrid_diff(&net, &trace, &grads, &masks, &y, &gates, 1.0, 5).unwrap();
        assert_eq!(all.values, sampling.values);
        let one = hybrid_diff(&net, &trace, &grads, &masks, &y, &gates, 1.0, 1).unwrap();
        for (g, layer) in one.values.iter().enumerate() {
            for (u, &v) in layer.iter().enumerate() {
                let expect = if (g, u) == (0, 2) { sampling.values[g][u] } else { taylor.values[g][u] };
                assert_eq!(v, expect);
            }
        }
        assert!(hybrid_diff(&net, &trace, &grads, &masks, &y, &gates, 1.0, 6).is_err());
    }

    #[test]
    fn pruned_units_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut net, mut gates) = tiny(&mut rng);
        prune_unit(&mut net, &mut gates, 0, 1);
        let (x, y) = data(&mut rng, 4, 2, 2);
        let bf = brute_force_diff(&net, &x, &y, &gates, 1.0).unwrap();
        assert_eq!(bf.kinds[0][1], None);
        assert_eq!(bf.alive_values().len(), 4);
    }

    #[test]
    fn brute_force_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Network::mlp(2, &[17], 2, LossKind::CategoricalCe, &mut rng).unwrap();
        let gates = GateState::new(&net, 0.5).unwrap();
        let (x, y) = data(&mut rng, 2, 2, 2);
        assert!(matches!(brute_force_diff(&net, &x, &y, &gates, 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn taylor_expectation_exact_for_quadratic_cost_at_half() {
        // Identity activations and a Gaussian loss make the cost quadratic in each gate,
        // so the first-order error is s²·f''·(θ−½) and vanishes in expectation at θ=½.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let specs = [
            LayerSpec::Dense { units: 3, activation: ActivationKind::Identity, gated: true },
            LayerSpec::Dense { units: 2, activation: ActivationKind::Identity, gated: false },
        ];
        let net = Network::new(&[2], &specs, LossKind::GaussianNll { tau: 1.0 }, &mut rng).unwrap();
        let mut gates = GateState::new(&net, 0.5).unwrap();
        gates.layers[0].theta = vec![0.5, 0.5, 0.5];
        let x = Tensor::new(vec![8, 2], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::new(vec![8, 2], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let bf = brute_force_diff(&net, &x, &y, &gates, 1.0).unwrap();
        let mut expect = [0.0; 3];
        for config in 0..8 {
            let masks = vec![(0..3).map(|b| ((config >> b) & 1) as f64).collect::<Vec<_>>()];
            let trace = net.forward(&x, Some(&masks)).unwrap();
            let grads = net.backward(&trace, &y, 1.0).unwrap();
            for u in 0..3 {
                expect[u] += grads.gate_grads[0][u] / 8.0;
            }
        }
        for u in 0..3 {
            assert!((expect[u] - bf.values[0][u]).abs() < 1e-10);
        }
    }

    #[test]
    fn bench_sampling_mean_tracks_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, y) = data(&mut rng, 8, 3, 2);
        let net = Network::mlp(3, &[3], 2, LossKind::CategoricalCe, &mut rng).unwrap();
        let mut gates = GateState::new(&net, 0.6).unwrap();
        gates.layers[0].theta = vec![0.3, 0.6, 0.8];
        let r = bench_estimators(&net, &x, &y, &gates, &[EstimatorKind::Sampling, EstimatorKind::BruteForce], 4000, 1.0, &mut rng)
            .unwrap();
        for i in 0..3 {
            let s = &r.estimators[0];
            assert!((s.mean[i] - r.exact[i]).abs() < 4.0 * s.std_err[i] + 1e-12);
            assert_eq!(r.estimators[1].mean[i], r.exact[i]);
        }
    }
}
