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

//! Simultaneous training and pruning (Algorithm 1), gate finalization, fine-tuning,
//! evaluation and pruning statistics.
//!
//! One iteration: draw `B` samples with replacement and one gate realization; run the
//! gated forward/backward pass with the data term scaled by `N/B`; form
//! `g_W = ∂C/∂W + λW` and `g_θ = (C₁−C₀ estimate) + ln(θ(1−π*)/((1−θ)π*))`; update both
//! with one optimizer; project every unit onto `‖w_b‖²+‖w_f‖² ≤ 2φ_max`; clip `θ`;
//! prune units that meet the pruning condition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{
    brute_force_diff, concrete_grad, hybrid_diff, sampling_diff, taylor_diff, EstimatorKind,
};
use crate::hyper_prior::{pi_star, reg_term, ClipBounds, HyperPrior};
use crate::metrics::{summary, MetricsRow};
use crate::network::{compact, prune_unit, GateState, Gradients, LayerSpec, Network, Params};
use crate::tensor::{loss_and_grad, LossKind, Tensor};

/// Threshold below which a gate is switched off when the network is made deterministic.
pub const FINALIZE_THRESHOLD: f64 = 1e-3;

/// Largest seed that survives a round trip through a TOML config or checkpoint.
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorFamily {
    Flattening,
    Beta,
}

/// Hyper-prior settings. `theta1`, when set, fixes the lower clip threshold and derives
/// `ε₁` from it; otherwise `eps1` is used, and when that is unset too it defaults to
/// `1e-4` unless that would push `θ₁` above `1e-2`, in which case `θ₁ = 1e-4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub family: PriorFamily,
    pub log_gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eps1: Option<f64>,
    pub theta1: Option<f64>,
    pub eps2: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            family: PriorFamily::Flattening,
            log_gamma: -25.0,
            alpha: 0.9,
            beta: 1e10,
            eps1: None,
            theta1: None,
            eps2: 1e-4,
        }
    }
}

impl PriorConfig {
    pub fn hyper_prior(&self) -> Result<HyperPrior> {
        let hp = match self.family {
            PriorFamily::Flattening => {
                if !(self.log_gamma < 0.0) {
                    return Err(Error::Config(format!(
                        "flattening log_gamma must be negative, got {}",
                        self.log_gamma
                    )));
                }
                HyperPrior::flattening_log(self.log_gamma)?
            }
            PriorFamily::Beta => HyperPrior::Beta { alpha: self.alpha, beta: self.beta },
        };
        hp.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(hp)
    }

    /// Hyper-prior and clip bounds. Without an explicit `eps1`/`theta1`, `ε₁ = 1e-4`
    /// is used unless it pushes `θ₁` more than `1e-2` above the family's smallest
    /// possible threshold (0 for the flattening family, `1−α` for Beta); then `θ₁` is
    /// placed `1e-4` above that floor instead.
    pub fn build(&self) -> Result<(HyperPrior, ClipBounds)> {
        let hp = self.hyper_prior()?;
        let cb = match (self.theta1, self.eps1) {
            (Some(t1), _) => ClipBounds::from_theta1(&hp, t1, self.eps2),
            (None, Some(e1)) => ClipBounds::new(&hp, e1, self.eps2),
            (None, None) => {
                let floor = match hp {
                    HyperPrior::Beta { alpha, .. } => 1.0 - alpha,
                    HyperPrior::Flattening { .. } => 0.0,
                };
                let cb = ClipBounds::new(&hp, 1e-4, self.eps2)?;
                if cb.theta1 <= floor + 1e-2 {
                    Ok(cb)
                } else {
                    ClipBounds::from_theta1(&hp, floor + 1e-4, self.eps2)
                }
            }
        }
        .map_err(|e| Error::Config(e.to_string()))?;
        Ok((hp, cb))
    }
}

/// Hyper-prior override for one gated layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPrior {
    pub layer: usize,
    pub prior: PriorConfig,
}

/// Step-size rule shared by the weights and the gate parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepSchedule {
    /// Plain SGD with `a(n) = a0 / (1 + n/tau)`: `Σa = ∞`, `Σa² < ∞`.
    RobbinsMonro { a0: f64, tau: f64 },
    /// Plain SGD with a constant step.
    Constant { lr: f64 },
    /// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    #[serde(rename = "adam")]
    AdamDefaults { lr: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::RobbinsMonro { a0, tau } => a0 > 0.0 && tau > 0.0,
            StepSchedule::Constant { lr } | StepSchedule::AdamDefaults { lr } => lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid step schedule {self:?}")))
        }
    }

    /// SGD step size at iteration `n` (0-based).
    pub fn rate(&self, n: u64) -> f64 {
        match *self {
            StepSchedule::RobbinsMonro { a0, tau } => a0 / (1.0 + n as f64 / tau),
            StepSchedule::Constant { lr } | StepSchedule::AdamDefaults { lr } => lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorName {
    Taylor,
    Concrete,
    Sampling,
    Hybrid,
    BruteForce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorName,
    pub temperature: f64,
    pub hybrid_k: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig { kind: EstimatorName::Taylor, temperature: 0.1, hybrid_k: 10 }
    }
}

impl EstimatorConfig {
    pub fn kind(&self) -> EstimatorKind {
        match self.kind {
            EstimatorName::Taylor => EstimatorKind::Taylor,
            EstimatorName::Concrete => EstimatorKind::Concrete { t: self.temperature },
            EstimatorName::Sampling => EstimatorKind::Sampling,
            EstimatorName::Hybrid => EstimatorKind::Hybrid { k: self.hybrid_k },
            EstimatorName::BruteForce => EstimatorKind::BruteForce,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneCondition {
    /// (i): prune when `θ < θ_tol`.
    Tolerance,
    /// (i) or (ii): additionally prune when `θ < θ_max(1−θ_per)` after `n₀` iterations.
    Relative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub condition: PruneCondition,
    pub theta_tol: f64,
    pub theta_per: f64,
    /// Iteration count after which condition (ii) may fire; defaults to three epochs.
    pub n0: Option<u64>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { condition: PruneCondition::Tolerance, theta_tol: 1e-3, theta_per: 0.1, n0: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    /// Weight-prior precision; multiplies `W` directly in the gradient.
    pub lambda: f64,
    pub prior: PriorConfig,
    pub layer_priors: Vec<LayerPrior>,
    pub theta_init: f64,
    /// Lower clip for `θ`; defaults to `min(1e-5, ε₁/10)` per layer.
    pub theta_low: Option<f64>,
    pub theta_high: f64,
    pub phi_max: f64,
    pub schedule: StepSchedule,
    pub estimator: EstimatorConfig,
    pub prune: PruneConfig,
    pub fine_tune_epochs: u64,
    pub fine_tune_lr: f64,
    /// First-layer weights below this magnitude are removed after fine-tuning.
    pub input_threshold: Option<f64>,
    pub seed: u64,
    /// Main training stops early once the last step's gradient norm falls below this.
    pub grad_tol: f64,
    /// `false` trains the unpruned baseline: all gates fixed on, no `θ` updates.
    pub pruning: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 50,
            lambda: 20.0,
            prior: PriorConfig::default(),
            layer_priors: Vec::new(),
            theta_init: 0.5,
            theta_low: None,
            theta_high: 1.0 - 1e-5,
            phi_max: 1e6,
            schedule: StepSchedule::AdamDefaults { lr: 1e-3 },
            estimator: EstimatorConfig::default(),
            prune: PruneConfig::default(),
            fine_tune_epochs: 10,
            fine_tune_lr: 1e-4,
            input_threshold: None,
            seed: 0,
            grad_tol: 1e-6,
            pruning: true,
        }
    }
}

/// Per gated layer: hyper-prior, clip bounds and the `θ` clip interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerGateConfig {
    pub prior: HyperPrior,
    pub clip: ClipBounds,
    pub theta_low: f64,
    pub theta_high: f64,
}

impl TrainConfig {
    /// Resolves and validates the per-layer gate settings.
    pub fn layer_gates(&self, gated_layers: usize) -> Result<Vec<LayerGateConfig>> {
        for lp in &self.layer_priors {
            if lp.layer >= gated_layers {
                return Err(Error::Config(format!(
                    "prior override for gated layer {} but the network has {gated_layers}",
                    lp.layer
                )));
            }
        }
        (0..gated_layers)
            .map(|l| {
                let pc = self
                    .layer_priors
                    .iter()
                    .rev()
                    .find(|lp| lp.layer == l)
                    .map_or(&self.prior, |lp| &lp.prior);
                let (prior, clip) = pc.build()?;
                let theta_low = self.theta_low.unwrap_or_else(|| (clip.eps1 / 10.0).min(1e-5));
                let theta_high = self.theta_high;
                if !(theta_low > 0.0 && theta_low < clip.eps1) {
                    return Err(Error::Config(format!(
                        "theta_low {theta_low} must lie in (0, eps1 = {})",
                        clip.eps1
                    )));
                }
                if !(theta_high < 1.0 && theta_high > 1.0 - clip.eps2) {
                    return Err(Error::Config(format!(
                        "theta_high {theta_high} must lie in (1 - eps2, 1)"
                    )));
                }
                Ok(LayerGateConfig { prior, clip, theta_low, theta_high })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return cfg("batch_size must be positive".into());
        }
        if self.seed > MAX_SEED {
            return cfg(format!("seed must be at most {MAX_SEED} (TOML integers are signed 64-bit)"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return cfg(format!("lambda must be > 0, got {}", self.lambda));
        }
        if !(self.phi_max > 0.0) {
            return cfg(format!("phi_max must be > 0, got {}", self.phi_max));
        }
        if !(0.0..=1.0).contains(&self.theta_init) {
            return cfg(format!("theta_init {} outside [0,1]", self.theta_init));
        }
        if !(self.fine_tune_lr > 0.0) {
            return cfg("fine_tune_lr must be > 0".into());
        }
        if !(self.prune.theta_tol > 0.0 && self.prune.theta_per > 0.0 && self.prune.theta_per < 1.0) {
            return cfg("prune.theta_tol must be > 0 and prune.theta_per in (0,1)".into());
        }
        if let Some(t) = self.input_threshold {
            if !(t >= 0.0) {
                return cfg(format!("input_threshold must be >= 0, got {t}"));
            }
        }
        self.schedule.validate()?;
        self.estimator.kind().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.prior.build()?;
        for lp in &self.layer_priors {
            lp.prior.build()?;
        }
        Ok(())
    }
}

/// Optimizer state for the weights and the gate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Option<Params>>,
    pub v: Vec<Option<Params>>,
    pub theta_m: Vec<Vec<f64>>,
    pub theta_v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        let widths = net.gate_widths();
        OptimizerState {
            step: 0,
            m: net.zero_params(),
            v: net.zero_params(),
            theta_m: widths.iter().map(|&w| vec![0.0; w]).collect(),
            theta_v: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    fn compact(&mut self, net_before: &Network, keep: &[Vec<usize>]) {
        net_before.compact_param_list(keep, &mut self.m);
        net_before.compact_param_list(keep, &mut self.v);
        for (k, (m, v)) in keep.iter().zip(self.theta_m.iter_mut().zip(self.theta_v.iter_mut())) {
            *m = k.iter().map(|&i| m[i]).collect();
            *v = k.iter().map(|&i| v[i]).collect();
        }
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One update of a parameter block; `step` is the 1-based update count.
fn update(schedule: StepSchedule, step: u64, x: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]) {
    match schedule {
        StepSchedule::AdamDefaults { lr } => {
            let c1 = 1.0 - ADAM_B1.powf(step as f64);
            let c2 = 1.0 - ADAM_B2.powf(step as f64);
            for i in 0..x.len() {
                m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g[i];
                v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                x[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        _ => {
            let a = schedule.rate(step - 1);
            for i in 0..x.len() {
                x[i] -= a * g[i];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Finalized,
    FineTune,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Finalized => "finalized",
            Phase::FineTune => "fine-tune",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Phase::Train => 0,
            Phase::Finalized => 1,
            Phase::FineTune => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Phase::Train),
            1 => Ok(Phase::Finalized),
            2 => Ok(Phase::FineTune),
            _ => Err(Error::Checkpoint(format!("unknown phase code {c}"))),
        }
    }
}

/// Result of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Scaled minibatch cost `C`.
    pub cost: f64,
    /// Mean per-sample negative log-likelihood of the minibatch.
    pub mean_nll: f64,
    /// Norm of the full gradient `(g_W, g_θ)`.
    pub grad_norm: f64,
    pub pruned: usize,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub net: Network,
    pub gates: GateState,
    pub opt: OptimizerState,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub epoch: u64,
    pub phase: Phase,
    /// Epoch at which the main phase ended (valid after finalization).
    pub main_epochs: u64,
    pub initial_param_count: usize,
    pub initial_widths: Vec<usize>,
    /// Last known `θ` of every unit of the initial architecture.
    pub theta_by_origin: Vec<Vec<f64>>,
    pub last_grad_norm: f64,
    layer_gates: Vec<LayerGateConfig>,
}

impl TrainState {
    /// Builds and initializes a network from `specs` (Glorot-normal weights, zero
    /// biases, all `θ` at `theta_init`) using the configured seed.
    pub fn init(input_shape: &[usize], specs: &[LayerSpec], loss: LossKind, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = Network::new(input_shape, specs, loss, &mut rng)?;
        Self::with_network(net, config, rng)
    }

    /// Wraps an existing network (fresh gates and optimizer).
    pub fn with_network(net: Network, config: TrainConfig, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut gates = GateState::new(&net, config.theta_init)?;
        gates.deterministic = !config.pruning;
        let layer_gates = config.layer_gates(gates.layers.len())?;
        for (layer, lg) in gates.layers.iter_mut().zip(&layer_gates) {
            for (t, p) in layer.theta.iter_mut().zip(layer.pi_star.iter_mut()) {
                if config.pruning {
                    *t = t.clamp(lg.theta_low, lg.theta_high);
                }
                *p = pi_star(&lg.prior, &lg.clip, *t)?;
            }
            layer.theta_max.clone_from(&layer.theta);
        }
        let initial_widths = net.gate_widths();
        let theta_by_origin = gates.layers.iter().map(|l| l.theta.clone()).collect();
        Ok(TrainState {
            opt: OptimizerState::new(&net),
            initial_param_count: net.param_count(),
            initial_widths,
            theta_by_origin,
            config,
            net,
            gates,
            rng,
            iteration: 0,
            epoch: 0,
            phase: Phase::Train,
            main_epochs: 0,
            last_grad_norm: f64::INFINITY,
            layer_gates,
        })
    }

    /// Reassembles a state from stored parts (used when loading checkpoints).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: TrainConfig,
        net: Network,
        gates: GateState,
        opt: OptimizerState,
        rng: ChaCha8Rng,
        counters: (u64, u64, Phase, u64),
        initial: (usize, Vec<usize>, Vec<Vec<f64>>),
        last_grad_norm: f64,
    ) -> Result<Self> {
        config.validate()?;
        let layer_gates = config.layer_gates(gates.layers.len())?;
        if net.gate_widths() != gates.layers.iter().map(|l| l.theta.len()).collect::<Vec<_>>() {
            return Err(Error::Checkpoint("gate state does not match the architecture".into()));
        }
        let (iteration, epoch, phase, main_epochs) = counters;
        let (initial_param_count, initial_widths, theta_by_origin) = initial;
        Ok(TrainState {
            config,
            net,
            gates,
            opt,
            rng,
            iteration,
            epoch,
            phase,
            main_epochs,
            initial_param_count,
            initial_widths,
            theta_by_origin,
            last_grad_norm,
            layer_gates,
        })
    }

    /// Replaces the configuration (e.g. to extend a resumed run), revalidating it
    /// against the current gates.
    pub fn set_config(&mut self, config: TrainConfig) -> Result<()> {
        config.validate()?;
        self.layer_gates = config.layer_gates(self.gates.layers.len())?;
        self.config = config;
        Ok(())
    }

    pub fn layer_gates(&self) -> &[LayerGateConfig] {
        &self.layer_gates
    }

    fn schedule(&self) -> StepSchedule {
        match self.phase {
            Phase::Train => self.config.schedule,
            _ => StepSchedule::AdamDefaults { lr: self.config.fine_tune_lr },
        }
    }

    fn gating(&self) -> bool {
        self.config.pruning && self.phase == Phase::Train
    }

    pub fn iterations_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    /// One iteration of Algorithm 1 on a given minibatch drawn from `n_total` samples.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor, n_total: usize) -> Result<StepStats> {
        let b = x.batch();
        if b == 0 || b > n_total {
            return Err(Error::param(format!("minibatch of {b} from {n_total} samples")));
        }
        let scale = n_total as f64 / b as f64;
        let masks = self.gates.sample(&mut self.rng)?;
        let trace = self.net.forward(x, Some(&masks)).map_err(numeric)?;
        let grads = self.net.backward(&trace, y, scale).map_err(numeric)?;
        if !grads.cost.is_finite() {
            return Err(Error::Numeric(format!("non-finite cost at iteration {}", self.iteration)));
        }
        let (g_w, mut norm_sq) = weight_gradient(&self.net, &grads, self.config.lambda);

        let mut g_theta: Vec<Vec<f64>> = self.gates.layers.iter().map(|l| vec![0.0; l.theta.len()]).collect();
        if self.gating() {
            let report = match self.config.estimator.kind() {
                EstimatorKind::Taylor => taylor_diff(&grads, &self.gates)?,
                EstimatorKind::Concrete { t } => {
                    let lo = self.layer_gates.iter().map(|l| l.theta_low).fold(f64::INFINITY, f64::min);
                    let hi = self.layer_gates.iter().map(|l| l.theta_high).fold(0.0, f64::max);
                    concrete_grad(&self.net, x, y, &self.gates, &mut self.rng, t, scale, (lo, hi))?
                }
                EstimatorKind::Sampling => sampling_diff(&self.net, &trace, &masks, y, &self.gates, scale)?,
                EstimatorKind::Hybrid { k } => {
                    let k = k.min(self.gates.total_alive());
                    hybrid_diff(&self.net, &trace, &grads, &masks, y, &self.gates, scale, k)?
                }
                EstimatorKind::BruteForce => brute_force_diff(&self.net, x, y, &self.gates, scale)?,
            };
            for (g, layer) in self.gates.layers.iter_mut().enumerate() {
                let lg = &self.layer_gates[g];
                for u in 0..layer.theta.len() {
                    if !layer.alive[u] {
                        continue;
                    }
                    let t = layer.theta[u];
                    layer.pi_star[u] = pi_star(&lg.prior, &lg.clip, t)?;
                    let gt = report.values[g][u] + reg_term(&lg.prior, &lg.clip, t)?;
                    g_theta[g][u] = gt;
                    norm_sq += gt * gt;
                }
            }
        }
        drop(trace);

        // Optimizer step on W and θ.
        let schedule = self.schedule();
        self.opt.step += 1;
        let step = self.opt.step;
        for (i, g) in g_w.iter().enumerate() {
            if let (Some(g), Some(p)) = (g, self.net.layers_mut()[i].params_mut()) {
                let m = self.opt.m[i].as_mut().expect("moment shapes follow the network");
                let v = self.opt.v[i].as_mut().expect("moment shapes follow the network");
                update(schedule, step, p.weights.data_mut(), g.weights.data(), m.weights.data_mut(), v.weights.data_mut());
                update(schedule, step, &mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
            }
        }
        let mut pruned = 0;
        if self.gating() {
            for (g, layer) in self.gates.layers.iter_mut().enumerate() {
                let (m, v) = (&mut self.opt.theta_m[g], &mut self.opt.theta_v[g]);
                let lg = &self.layer_gates[g];
                for u in 0..layer.theta.len() {
                    if !layer.alive[u] {
                        continue;
                    }
                    let mut t = [layer.theta[u]];
                    update(schedule, step, &mut t, &[g_theta[g][u]], &mut m[u..u + 1], &mut v[u..u + 1]);
                    let t = t[0].clamp(lg.theta_low, lg.theta_high);
                    layer.theta[u] = t;
                    layer.theta_max[u] = layer.theta_max[u].max(t);
                }
            }
        }
        // Pruned-but-not-yet-compacted units stay exactly zero.
        for g in 0..self.gates.layers.len() {
            for u in 0..self.gates.layers[g].alive.len() {
                if !self.gates.layers[g].alive[u] {
                    self.net.zero_unit(g, u);
                }
            }
        }
        self.project();
        self.iteration += 1;
        if self.gating() {
            pruned = self.prune_scan(self.iteration, n_total)?.len();
        }
        let grad_norm = norm_sq.sqrt();
        self.last_grad_norm = grad_norm;
        Ok(StepStats {
            cost: grads.cost,
            mean_nll: grads.per_sample.iter().sum::<f64>() / b as f64,
            grad_norm,
            pruned,
        })
    }

    /// Rescales every alive unit with `‖w_b‖² + ‖w_f‖² > 2φ_max` onto the boundary.
    pub fn project(&mut self) {
        let limit = 2.0 * self.config.phi_max;
        for g in 0..self.gates.layers.len() {
            for u in 0..self.gates.layers[g].alive.len() {
                if !self.gates.layers[g].alive[u] {
                    continue;
                }
                let (b, f) = self.net.unit_sq_norms(g, u);
                if b + f > limit {
                    self.net.scale_unit(g, u, (limit / (b + f)).sqrt());
                }
            }
        }
    }

    /// Applies the pruning condition to every alive unit at iteration `n`; returns the
    /// `(gated layer, unit)` pairs pruned.
    pub fn prune_scan(&mut self, n: u64, n_total: usize) -> Result<Vec<(usize, usize)>> {
        let pc = self.config.prune.clone();
        let n0 = pc.n0.unwrap_or(3 * self.iterations_per_epoch(n_total));
        let mut pruned = Vec::new();
        for g in 0..self.gates.layers.len() {
            for u in 0..self.gates.layers[g].alive.len() {
                let layer = &self.gates.layers[g];
                if !layer.alive[u] {
                    continue;
                }
                let t = layer.theta[u];
                let cond_i = t < pc.theta_tol;
                let cond_ii = pc.condition == PruneCondition::Relative
                    && t < layer.theta_max[u] * (1.0 - pc.theta_per)
                    && n > n0;
                if (cond_i || cond_ii) && prune_unit(&mut self.net, &mut self.gates, g, u) {
                    pruned.push((g, u));
                }
            }
        }
        Ok(pruned)
    }

    /// Physically removes pruned units from the network, gates and optimizer state.
    pub fn compact(&mut self) -> Result<()> {
        if self.gates.layers.iter().all(|l| l.alive.iter().all(|&a| a)) {
            return Ok(());
        }
        self.record_thetas();
        let before = self.net.clone();
        let keep = compact(&mut self.net, &mut self.gates)?;
        self.opt.compact(&before, &keep);
        Ok(())
    }

    fn record_thetas(&mut self) {
        for (g, layer) in self.gates.layers.iter().enumerate() {
            for (u, &o) in layer.origin.iter().enumerate() {
                self.theta_by_origin[g][o] = layer.theta[u];
            }
        }
    }

    /// `θ` of every unit of the initial architecture, layer-major (pruned units keep
    /// their final value).
    pub fn theta_snapshot(&mut self) -> Vec<f64> {
        self.record_thetas();
        self.theta_by_origin.iter().flatten().copied().collect()
    }

    /// Runs one epoch of `⌈N/B⌉` iterations with minibatches drawn with replacement,
    /// then compacts. Returns the mean per-sample NLL.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        let n = data.len();
        let b = self.config.batch_size;
        if b > n {
            return Err(Error::Config(format!("batch size {b} exceeds dataset size {n}")));
        }
        let iters = self.iterations_per_epoch(n);
        let mut total = 0.0;
        let mut idx = vec![0usize; b];
        for _ in 0..iters {
            for i in idx.iter_mut() {
                *i = self.rng.gen_range(0..n);
            }
            let (x, y) = data.select(&idx);
            total += self.train_step(&x, &y, n)?.mean_nll;
        }
        self.compact()?;
        self.epoch += 1;
        Ok(total / iters as f64)
    }

    /// Gate values used for monitoring evaluation.
    pub fn eval_masks(&self) -> Vec<Vec<f64>> {
        self.gates.eval_masks()
    }

    pub fn metrics_row(&self, train_loss: f64, test: Option<&Dataset>) -> Result<MetricsRow> {
        let eval = match test {
            Some(t) => Some(evaluate(&self.net, Some(&self.eval_masks()), t)?),
            None => None,
        };
        let mut theta_mean = Vec::new();
        let mut theta_min = Vec::new();
        let mut theta_max = Vec::new();
        for layer in &self.gates.layers {
            let alive: Vec<f64> = layer.theta.iter().zip(&layer.alive).filter(|(_, &a)| a).map(|(&t, _)| t).collect();
            let (mean, min, max) = summary(&alive);
            theta_mean.push(mean);
            theta_min.push(min);
            theta_max.push(max);
        }
        Ok(MetricsRow {
            epoch: self.epoch,
            iteration: self.iteration,
            phase: self.phase.name().to_string(),
            train_loss,
            test_accuracy: eval.and_then(|e| e.accuracy),
            test_loss: eval.map_or(f64::NAN, |e| e.mean_nll),
            alive: self.gates.alive_counts(),
            pruning_ratio: pruning_ratio(self.initial_param_count, &self.effective_network()?, None),
            theta_mean,
            theta_min,
            theta_max,
        })
    }

    /// The network with all pruned units removed (no-op after compaction).
    pub fn effective_network(&self) -> Result<Network> {
        let mut net = self.net.clone();
        net.compact(&self.gates.alive_indices())?;
        Ok(net)
    }

    /// Main training phase up to `config.epochs` (resumable). `on_epoch` is called after
    /// every epoch with the state and its metrics.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        on_epoch: &mut dyn FnMut(&mut TrainState, &MetricsRow) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.phase == Phase::Train && self.epoch < self.config.epochs {
            let loss = self.train_epoch(train)?;
            let row = self.metrics_row(loss, test)?;
            on_epoch(self, &row)?;
            rows.push(row);
            if self.last_grad_norm < self.config.grad_tol {
                log::info!("gradient norm {} below tolerance; stopping", self.last_grad_norm);
                break;
            }
        }
        Ok(rows)
    }

    /// Switches gates with `θ < 1e-3` off (pruning them), fixes all other gates on and
    /// compacts. `θ` values are kept as they are.
    pub fn finalize_gates(&mut self) -> Result<()> {
        for g in 0..self.gates.layers.len() {
            for u in 0..self.gates.layers[g].alive.len() {
                if self.gates.layers[g].alive[u] && self.gates.layers[g].theta[u] < FINALIZE_THRESHOLD {
                    prune_unit(&mut self.net, &mut self.gates, g, u);
                }
            }
        }
        self.gates.deterministic = true;
        self.compact()?;
        self.main_epochs = self.epoch;
        self.phase = Phase::Finalized;
        Ok(())
    }

    /// Fine-tunes the deterministic network for `config.fine_tune_epochs` epochs with a
    /// fresh Adam at `config.fine_tune_lr` (resumable).
    pub fn fine_tune(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        on_epoch: &mut dyn FnMut(&mut TrainState, &MetricsRow) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        if self.phase == Phase::Train {
            return Err(Error::param("fine-tuning requires finalized gates"));
        }
        if self.phase == Phase::Finalized {
            if self.config.fine_tune_epochs == 0 {
                return Ok(Vec::new());
            }
            self.opt = OptimizerState::new(&self.net);
            self.phase = Phase::FineTune;
        }
        let mut rows = Vec::new();
        while self.epoch < self.main_epochs + self.config.fine_tune_epochs {
            let loss = self.train_epoch(train)?;
            let row = self.metrics_row(loss, test)?;
            on_epoch(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Zeroes first-layer weights with `|w| < threshold`; returns how many were non-zero.
    pub fn apply_input_threshold(&mut self, threshold: f64) -> usize {
        let Some(p) = self.net.layers_mut().iter_mut().find_map(|l| l.params_mut()) else {
            return 0;
        };
        let mut count = 0;
        for w in p.weights.data_mut() {
            if w.abs() < threshold && *w != 0.0 {
                *w = 0.0;
                count += 1;
            }
        }
        count
    }
}

fn numeric(e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::Numeric(format!("non-finite values in {m}")),
        other => other,
    }
}

/// `g_W = ∂C/∂W + λW` for every parametric layer (biases included), together with its
/// squared norm.
pub fn weight_gradient(net: &Network, grads: &Gradients, lambda: f64) -> (Vec<Option<Params>>, f64) {
    let mut norm_sq = 0.0;
    let g_w = net
        .layers()
        .iter()
        .zip(&grads.params)
        .map(|(layer, g)| match (layer.params(), g) {
            (Some(p), Some(g)) => {
                let mut g = g.clone();
                for (gv, w) in g.weights.data_mut().iter_mut().zip(p.weights.data()) {
                    *gv += lambda * w;
                    norm_sq += *gv * *gv;
                }
                for (gv, w) in g.bias.iter_mut().zip(&p.bias) {
                    *gv += lambda * w;
                    norm_sq += *gv * *gv;
                }
                Some(g)
            }
            _ => None,
        })
        .collect();
    (g_w, norm_sq)
}

/// `θ`-gradient for a unit: data-term estimate plus the hyper-prior log-term.
pub fn theta_gradient(estimate: f64, hp: &HyperPrior, cb: &ClipBounds, theta: f64) -> Result<f64> {
    Ok(estimate + reg_term(hp, cb, theta)?)
}

/// Percentage of the initial `initial_count` weights and biases no longer present in
/// `net`; with `input_threshold`, first-layer weights below it count as removed too.
pub fn pruning_ratio(initial_count: usize, net: &Network, input_threshold: Option<f64>) -> f64 {
    if initial_count == 0 {
        return 0.0;
    }
    let mut removed = initial_count.saturating_sub(net.param_count());
    if let Some(t) = input_threshold {
        if let Some(p) = net.layers().iter().find_map(|l| l.params()) {
            removed += p.weights.data().iter().filter(|w| w.abs() < t).count();
        }
    }
    100.0 * removed as f64 / initial_count as f64
}

/// Accuracy (classification) and mean per-sample negative log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: Option<f64>,
    pub mean_nll: f64,
}

/// Evaluates `net` on a dataset in chunks with the given gate values (`None`: ungated).
pub fn evaluate(net: &Network, masks: Option<&[Vec<f64>]>, data: &Dataset) -> Result<EvalResult> {
    const CHUNK: usize = 1000;
    let n = data.len();
    if n == 0 {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let classify = matches!(net.loss(), LossKind::CategoricalCe);
    let k = data.targets.sample_len();
    let mut correct = 0usize;
    let mut nll = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = data.inputs.slice(start, end);
        let y = data.targets.slice(start, end);
        let out = net.predict(&x, masks).map_err(numeric)?;
        nll += loss_and_grad(net.loss(), &out, &y).map_err(numeric)?.total;
        if classify {
            for (o, t) in out.data().chunks_exact(k).zip(y.data().chunks_exact(k)) {
                let pred = argmax(o);
                if t[pred] == 1.0 {
                    correct += 1;
                }
            }
        }
        start = end;
    }
    Ok(EvalResult {
        accuracy: classify.then(|| correct as f64 / n as f64),
        mean_nll: nll / n as f64,
    })
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::network::{Layer, DEFAULT_LEAK};
    use crate::tensor::ActivationKind;

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 3,
            lambda: 1.0,
            prior: PriorConfig { log_gamma: -5.0, ..PriorConfig::default() },
            fine_tune_epochs: 1,
            ..TrainConfig::default()
        }
    }

    fn mlp_specs(hidden: &[usize], out: usize) -> Vec<LayerSpec> {
        let mut s: Vec<LayerSpec> = hidden
            .iter()
            .map(|&units| LayerSpec::Dense {
                units,
                activation: ActivationKind::LeakyRelu { slope: DEFAULT_LEAK },
                gated: true,
            })
            .collect();
        s.push(LayerSpec::Dense { units: out, activation: ActivationKind::SoftmaxOutput, gated: false });
        s
    }

    #[test]
    fn sgd_step_with_zero_data_gradient_is_pure_decay() {
        let mut config = TrainConfig {
            lambda: 50.0,
            pruning: false,
            schedule: StepSchedule::Constant { lr: 1e-3 },
            ..TrainConfig::default()
        };
        config.batch_size = 4;
        let layer = Layer::Dense {
            params: Params {
                weights: Tensor::from_rows(&[&[0.3, -0.2], &[1.0, 0.5]]).unwrap(),
                bias: vec![0.1, -0.1],
            },
            activation: ActivationKind::Identity,
            gated: false,
        };
        let net = Network::from_layers(vec![2], vec![layer], LossKind::GaussianNll { tau: 1.0 }).unwrap();
        let mut state = TrainState::with_network(net.clone(), config, ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::new(vec![4, 2], vec![1.0, 2.0, -1.0, 0.0, 0.5, 0.5, 3.0, 1.0]).unwrap();
        let y = net.predict(&x, None).unwrap();
        state.train_step(&x, &y, 4).unwrap();
        let before = net.layers()[0].params().unwrap();
        let after = state.net.layers()[0].params().unwrap();
        for (a, b) in after.weights.data().iter().zip(before.weights.data()) {
            assert!((a - b * (1.0 - 1e-3 * 50.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_prior_pushes_theta_down_without_data_signal() {
        let hp = HyperPrior::Flattening { gamma: 0.01 };
        let cb = ClipBounds::new(&hp, 1e-4, 1e-4).unwrap();
        let g = theta_gradient(0.0, &hp, &cb, 0.5).unwrap();
        assert!((g - 4.605_170_185_988_091).abs() < 1e-12);
        // gradient descent: θ decreases
        assert!(0.5 - 1e-3 * g < 0.5);
    }

    #[test]
    fn prune_conditions() {
        let data = synth_blobs(2, 3, 8, 1, 1.0).unwrap();
        let mut config = small_config();
        config.prune.condition = PruneCondition::Relative;
        config.prune.n0 = Some(10);
        let mut state = TrainState::init(&[3], &mlp_specs(&[3], 2), LossKind::CategoricalCe, config).unwrap();
        state.gates.layers[0].theta = vec![0.0009, 0.73, 0.5];
        state.gates.layers[0].theta_max = vec![0.5, 0.8, 0.9];
        // n ≤ n₀: only condition (i)
        assert_eq!(state.prune_scan(10, data.len()).unwrap(), vec![(0, 0)]);
        // 0.73 > 0.8·0.9 = 0.72 → kept; 0.5 < 0.81 → pruned
        assert_eq!(state.prune_scan(11, data.len()).unwrap(), vec![(0, 2)]);
        assert_eq!(state.gates.alive_counts(), vec![1]);
    }

    #[test]
    fn training_invariants_hold_every_step() {
        let data = synth_blobs(3, 4, 30, 2, 2.0).unwrap();
        let mut config = small_config();
        config.phi_max = 0.5;
        let mut state = TrainState::init(&[4], &mlp_specs(&[6, 5], 3), LossKind::CategoricalCe, config).unwrap();
        let mut dead_weights_seen = false;
        for _ in 0..200 {
            let idx: Vec<usize> = (0..16).map(|_| state.rng.gen_range(0..data.len())).collect();
            let (x, y) = data.select(&idx);
            state.train_step(&x, &y, data.len()).unwrap();
            for (g, layer) in state.gates.layers.iter().enumerate() {
                let lg = state.layer_gates()[g];
                for u in 0..layer.theta.len() {
                    let (b, f) = state.net.unit_sq_norms(g, u);
                    if layer.alive[u] {
                        assert!(b + f <= 2.0 * 0.5 + 1e-9);
                        assert!(layer.theta[u] >= lg.theta_low && layer.theta[u] <= lg.theta_high);
                    } else {
                        assert_eq!(b + f, 0.0);
                        dead_weights_seen = true;
                    }
                }
            }
        }
        let _ = dead_weights_seen;
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let data = synth_blobs(3, 4, 20, 3, 2.0).unwrap();
        let run = || {
            let mut s = TrainState::init(&[4], &mlp_specs(&[8], 3), LossKind::CategoricalCe, small_config()).unwrap();
            let rows = s.run(&data, Some(&data), &mut |_, _| Ok(())).unwrap();
            (rows, s.theta_snapshot())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finalize_and_fine_tune() {
        let data = synth_blobs(3, 4, 20, 4, 2.0).unwrap();
        let mut s = TrainState::init(&[4], &mlp_specs(&[6], 3), LossKind::CategoricalCe, small_config()).unwrap();
        s.gates.layers[0].theta = vec![0.9994, 5e-4, 0.5, 2e-4, 0.7, 0.001];
        let thetas = s.gates.layers[0].theta.clone();
        s.finalize_gates().unwrap();
        assert_eq!(s.net.gate_widths(), vec![4]);
        assert_eq!(s.gates.layers[0].theta, vec![thetas[0], thetas[2], thetas[4], thetas[5]]);
        let a = s.net.predict(&data.inputs, Some(&s.eval_masks())).unwrap();
        let b = s.net.predict(&data.inputs, Some(&s.eval_masks())).unwrap();
        assert_eq!(a, b);
        let before = s.gates.clone();
        let rows = s.fine_tune(&data, None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(s.gates.layers[0].theta, before.layers[0].theta);
        assert_eq!(s.phase, Phase::FineTune);
    }

    #[test]
    fn zero_fine_tune_epochs_is_identity() {
        let data = synth_blobs(2, 2, 10, 5, 2.0).unwrap();
        let mut config = small_config();
        config.fine_tune_epochs = 0;
        let mut s = TrainState::init(&[2], &mlp_specs(&[3], 2), LossKind::CategoricalCe, config).unwrap();
        s.finalize_gates().unwrap();
        let net = s.net.clone();
        assert!(s.fine_tune(&data, None, &mut |_, _| Ok(())).unwrap().is_empty());
        assert_eq!(net, s.net);
    }

    #[test]
    fn all_high_thetas_survive_finalization() {
        let mut s = TrainState::init(&[2], &mlp_specs(&[5, 4], 2), LossKind::CategoricalCe, small_config()).unwrap();
        for l in &mut s.gates.layers {
            l.theta.iter_mut().for_each(|t| *t = 0.9994);
        }
        s.finalize_gates().unwrap();
        assert_eq!(s.net.gate_widths(), vec![5, 4]);
    }

    #[test]
    fn pruning_ratio_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::mlp(4, &[3, 3], 2, LossKind::CategoricalCe, &mut rng).unwrap();
        let initial = net.param_count();
        assert_eq!(initial, 4 * 3 + 3 + 3 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(pruning_ratio(initial, &net, None), 0.0);
        // Removing the whole second hidden layer leaves 4·3+3 + 2 (output biases).
        let mut pruned = net.clone();
        pruned.compact(&[vec![0, 1, 2], vec![]]).unwrap();
        let expect = 100.0 * (initial - (4 * 3 + 3 + 2)) as f64 / initial as f64;
        assert!((pruning_ratio(initial, &pruned, None) - expect).abs() < 1e-12);
    }

    #[test]
    fn lenet300_ratio_for_paper_architecture() {
        // 49-30 hidden units: counting weights and biases, the structural part alone
        // removes 84.9% of LeNet300-100's parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full = Network::mlp(784, &[300, 100], 10, LossKind::CategoricalCe, &mut rng).unwrap();
        let small = Network::mlp(784, &[49, 30], 10, LossKind::CategoricalCe, &mut rng).unwrap();
        let r = pruning_ratio(full.param_count(), &small, None);
        assert!((r - 100.0 * (266_610.0 - 40_275.0) / 266_610.0).abs() < 1e-9);
    }

    #[test]
    fn evaluation_examples() {
        // constant prediction of class 1
        let layer = Layer::Dense {
            params: Params { weights: Tensor::zeros(vec![2, 2]), bias: vec![0.0, 1.0] },
            activation: ActivationKind::SoftmaxOutput,
            gated: false,
        };
        let net = Network::from_layers(vec![2], vec![layer], LossKind::CategoricalCe).unwrap();
        let data = synth_blobs(2, 2, 5, 9, 1.0).unwrap();
        let r = evaluate(&net, None, &data).unwrap();
        assert_eq!(r.accuracy, Some(0.5));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { lambda: 0.0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { seed: MAX_SEED + 1, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { theta_low: Some(0.5), ..TrainConfig::default() };
        assert!(bad.layer_gates(1).is_err());
        let lg = TrainConfig::default().layer_gates(2).unwrap();
        assert!(lg[0].clip.eps1 < 1e-14 && lg[0].theta_low < lg[0].clip.eps1);
        assert!((lg[0].clip.theta1 - 1e-4).abs() < 1e-18);
        let fig2 = PriorConfig { log_gamma: 0.01f64.ln(), ..PriorConfig::default() };
        assert_eq!(fig2.build().unwrap().1.eps1, 1e-4);
        // Beta thresholds start at 1−α: β = 10 keeps ε₁ = 1e-4, β = 1e10 moves θ₁.
        let beta = |b: f64| PriorConfig { family: PriorFamily::Beta, beta: b, ..PriorConfig::default() };
        assert_eq!(beta(10.0).build().unwrap().1.eps1, 1e-4);
        let huge = beta(1e10).build().unwrap().1;
        assert!((huge.theta1 - 0.1001).abs() < 1e-12 && huge.eps1 < 1e-13);
    }
}
