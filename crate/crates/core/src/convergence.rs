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

//! Single-unit gradient-flow dynamics and their stability analysis.
//!
//! For one unit with fan-in `w_b ∈ ℝᵖ`, fan-out `w_f ∈ ℝ^q` and gate parameter `θ`:
//!
//! ```text
//! ẇ_f = −θ M₁ w_b − λ w_f
//! ẇ_b = −θ M₂ w_f − λ w_b
//! θ̇   = −(C₁ − C₀) + ln((1−θ)π* / (θ(1−π*)))
//! ```
//!
//! With `|C₁−C₀| ≤ κφ`, `σ̄(M₁+M₂ᵀ) ≤ η` and `0 < ε₁ < ½λ/(η+κ)`, the pruned state
//! `(0, 0, ε₁)` is locally asymptotically stable with Lyapunov function
//! `V = φ + ½(θ−ε₁)²`, `φ = ½(‖w_f‖²+‖w_b‖²)`, on the ball of radius `λ/(η+κ) − ε₁`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hyper_prior::{reg_term, ClipBounds, HyperPrior};
use crate::network::{FanOut, GateState, Layer, Network};

/// Norm above which an integration is declared divergent.
pub const BLOW_UP_NORM: f64 = 1e12;

/// Model of the data term `C₁ − C₀` as a function of `(w_f, w_b)`.
#[derive(Clone)]
pub enum DiffFn {
    /// No data signal.
    Zero,
    /// `κ φ cos(Σw_f + Σw_b)`: sign-changing, bounded by `κφ`.
    Oscillating { kappa: f64 },
    /// `+κφ`: the bound attained with the sign that opposes pruning the least in `θ`
    /// but removes the gate's damping of the weights.
    Adversarial { kappa: f64 },
    /// User function; must satisfy `f(0,0) = 0` and the declared bound.
    Custom(Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for DiffFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DiffFn::Zero => write!(f, "Zero"),
            DiffFn::Oscillating { kappa } => write!(f, "Oscillating {{ kappa: {kappa} }}"),
            DiffFn::Adversarial { kappa } => write!(f, "Adversarial {{ kappa: {kappa} }}"),
            DiffFn::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl DiffFn {
    pub fn eval(&self, w_f: &[f64], w_b: &[f64]) -> f64 {
        match self {
            DiffFn::Zero => 0.0,
            DiffFn::Oscillating { kappa } => {
                let s: f64 = w_f.iter().chain(w_b).sum();
                kappa * phi(w_f, w_b) * s.cos()
            }
            DiffFn::Adversarial { kappa } => kappa * phi(w_f, w_b),
            DiffFn::Custom(f) => f(w_f, w_b),
        }
    }
}

/// `φ = ½(‖w_f‖² + ‖w_b‖²)`.
pub fn phi(w_f: &[f64], w_b: &[f64]) -> f64 {
    0.5 * (w_f.iter().map(|v| v * v).sum::<f64>() + w_b.iter().map(|v| v * v).sum::<f64>())
}

/// Largest singular value.
pub fn max_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// State of the single-unit system.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitState {
    pub w_f: Vec<f64>,
    pub w_b: Vec<f64>,
    pub theta: f64,
}

impl UnitState {
    pub fn norm_sq(&self) -> f64 {
        self.w_f.iter().chain(&self.w_b).map(|v| v * v).sum::<f64>() + self.theta * self.theta
    }

    /// Euclidean distance to `(0, 0, target_theta)`.
    pub fn distance_to(&self, target_theta: f64) -> f64 {
        (2.0 * phi(&self.w_f, &self.w_b) + (self.theta - target_theta).powi(2)).sqrt()
    }
}

/// The single-unit dynamical system.
#[derive(Clone, Debug)]
pub struct UnitDynamics {
    /// `q × p`.
    pub m1: DMatrix<f64>,
    /// `p × q`.
    pub m2: DMatrix<f64>,
    pub lambda: f64,
    /// Declared bound `|C₁−C₀| ≤ κφ`.
    pub kappa: f64,
    pub diff: DiffFn,
    pub prior: HyperPrior,
    pub clip: ClipBounds,
    pub theta_low: f64,
    pub theta_high: f64,
}

impl UnitDynamics {
    /// Validates dimensions and parameters and checks the declared `κ` by sampling
    /// 1000 points with `‖w‖ ≤ 1` (seeded).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        m1: DMatrix<f64>,
        m2: DMatrix<f64>,
        lambda: f64,
        kappa: f64,
        diff: DiffFn,
        prior: HyperPrior,
        clip: ClipBounds,
        theta_bounds: (f64, f64),
    ) -> Result<Self> {
        let (q, p) = m1.shape();
        if m2.shape() != (p, q) {
            return Err(Error::shape(format!("M1 is {q}x{p} but M2 is {:?}", m2.shape())));
        }
        if !(lambda > 0.0 && kappa >= 0.0) {
            return Err(Error::param("lambda must be > 0 and kappa >= 0"));
        }
        let (lo, hi) = theta_bounds;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(Error::param(format!("theta bounds ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
        }
        let dynamics = UnitDynamics { m1, m2, lambda, kappa, diff, prior, clip, theta_low: lo, theta_high: hi };
        let zero = dynamics.diff.eval(&vec![0.0; q], &vec![0.0; p]);
        if zero != 0.0 {
            return Err(Error::param(format!("C1 - C0 at zero weights is {zero}, expected 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x6b_6170_7061);
        for _ in 0..1000 {
            let scale = rng.gen::<f64>();
            let w_f: Vec<f64> = (0..q).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let w_b: Vec<f64> = (0..p).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let d = dynamics.diff.eval(&w_f, &w_b);
            if d.abs() > kappa * phi(&w_f, &w_b) * (1.0 + 1e-12) + 1e-300 {
                return Err(Error::param(format!("|C1 - C0| = {} exceeds kappa * phi", d.abs())));
            }
        }
        Ok(dynamics)
    }

    /// Random `M₁`, `M₂` (Gaussian, seeded) rescaled so that `σ̄(M₁+M₂ᵀ) = η`.
    pub fn random_matrices(p: usize, q: usize, eta: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m1 = DMatrix::from_fn(q, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m2 = DMatrix::from_fn(p, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = max_singular_value(&(&m1 + m2.transpose()));
        let f = if s > 0.0 { eta / s } else { 0.0 };
        (m1 * f, m2 * f)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.m2.nrows(), self.m1.nrows())
    }

    pub fn eta(&self) -> f64 {
        max_singular_value(&(&self.m1 + self.m2.transpose()))
    }

    /// Right-hand side of the system at `(w_f, w_b, θ)`, `θ ∈ (0,1)`.
    pub fn rhs(&self, s: &UnitState) -> Result<UnitState> {
        let (p, q) = self.dims();
        if s.w_f.len() != q || s.w_b.len() != p {
            return Err(Error::shape(format!("state dims ({}, {}) vs ({q}, {p})", s.w_f.len(), s.w_b.len())));
        }
        let t = s.theta;
        let mut df = vec![0.0; q];
        for (i, d) in df.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..p {
                acc += self.m1[(i, j)] * s.w_b[j];
            }
            *d = -t * acc - self.lambda * s.w_f[i];
        }
        let mut db = vec![0.0; p];
        for (i, d) in db.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..q {
                acc += self.m2[(i, j)] * s.w_f[j];
            }
            *d = -t * acc - self.lambda * s.w_b[i];
        }
        let dt = -self.diff.eval(&s.w_f, &s.w_b) - reg_term(&self.prior, &self.clip, t)?;
        Ok(UnitState { w_f: df, w_b: db, theta: dt })
    }

    fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.theta_low, self.theta_high)
    }

    /// Stiffness-safe default step: `min(1e-2, 0.1/λ, θ_l)`. The `θ` equation has
    /// slope ≈ `1/θ` near the lower clip, so the step must resolve it there.
    pub fn default_dt(&self) -> f64 {
        1e-2f64.min(0.1 / self.lambda).min(self.theta_low)
    }
}

/// `V = φ + ½(θ−ε₁)²`.
pub fn lyapunov_v(w_f: &[f64], w_b: &[f64], theta: f64, eps1: f64) -> f64 {
    phi(w_f, w_b) + 0.5 * (theta - eps1).powi(2)
}

/// A fixed-step trajectory: `states[k]` is the state at time `k·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<UnitState>,
}

impl Trajectory {
    pub fn last(&self) -> &UnitState {
        self.states.last().expect("trajectories hold the initial state")
    }

    pub fn lyapunov(&self, eps1: f64) -> Vec<f64> {
        self.states.iter().map(|s| lyapunov_v(&s.w_f, &s.w_b, s.theta, eps1)).collect()
    }

    /// Largest single-step increase of `V` (0 when `V` never increases).
    pub fn max_v_increase(&self, eps1: f64) -> f64 {
        self.lyapunov(eps1).windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

fn axpy(base: &UnitState, k: &UnitState, h: f64) -> UnitState {
    UnitState {
        w_f: base.w_f.iter().zip(&k.w_f).map(|(a, b)| a + h * b).collect(),
        w_b: base.w_b.iter().zip(&k.w_b).map(|(a, b)| a + h * b).collect(),
        theta: base.theta + h * k.theta,
    }
}

/// Classical RK4 over `[0, T]` with `⌈T/dt⌉` steps of size `dt` (the last state is at
/// `steps·dt`). `θ` is clamped to `[θ_l, θ_h]` at every stage.
pub fn integrate(dynamics: &UnitDynamics, x0: &UnitState, dt: f64, t_end: f64) -> Result<Trajectory> {
    if !(dt > 0.0 && t_end >= 0.0) {
        return Err(Error::param(format!("dt = {dt}, T = {t_end}")));
    }
    let steps = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    let mut x = x0.clone();
    x.theta = dynamics.clamp(x.theta);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x.clone());
    let clamped = |s: UnitState| UnitState { theta: dynamics.clamp(s.theta), ..s };
    for k in 0..steps {
        let k1 = dynamics.rhs(&x)?;
        let k2 = dynamics.rhs(&clamped(axpy(&x, &k1, 0.5 * dt)))?;
        let k3 = dynamics.rhs(&clamped(axpy(&x, &k2, 0.5 * dt)))?;
        let k4 = dynamics.rhs(&clamped(axpy(&x, &k3, dt)))?;
        let mut next = x.clone();
        for i in 0..next.w_f.len() {
            next.w_f[i] += dt / 6.0 * (k1.w_f[i] + 2.0 * k2.w_f[i] + 2.0 * k3.w_f[i] + k4.w_f[i]);
        }
        for i in 0..next.w_b.len() {
            next.w_b[i] += dt / 6.0 * (k1.w_b[i] + 2.0 * k2.w_b[i] + 2.0 * k3.w_b[i] + k4.w_b[i]);
        }
        next.theta = dynamics.clamp(x.theta + dt / 6.0 * (k1.theta + 2.0 * k2.theta + 2.0 * k3.theta + k4.theta));
        let n = next.norm_sq();
        if !n.is_finite() || n > BLOW_UP_NORM * BLOW_UP_NORM {
            return Err(Error::Numeric(format!(
                "trajectory diverged at t = {:.6} (state norm {:.3e})",
                (k + 1) as f64 * dt,
                n.sqrt()
            )));
        }
        states.push(next.clone());
        x = next;
    }
    Ok(Trajectory { dt, states })
}

/// Radius `λ/(η+κ) − ε₁` of the guaranteed region of attraction (may be ≤ 0).
pub fn roa_radius(lambda: f64, eta: f64, kappa: f64, eps1: f64) -> f64 {
    lambda / (eta + kappa) - eps1
}

/// Whether `(w_f, w_b, θ)` lies in the guaranteed region of attraction of `(0,0,ε₁)`.
pub fn roa_contains(w_f: &[f64], w_b: &[f64], theta: f64, lambda: f64, eta: f64, kappa: f64, eps1: f64) -> bool {
    let r = roa_radius(lambda, eta, kappa, eps1);
    if r <= 0.0 {
        log::warn!("empty region of attraction: lambda/(eta+kappa) = {} <= eps1 = {eps1}", lambda / (eta + kappa));
        return false;
    }
    2.0 * phi(w_f, w_b) + (theta - eps1).powi(2) < r * r
}

/// `0 < ε₁ < ½ λ/(η+κ)`.
pub fn stability_check(lambda: f64, eta: f64, kappa: f64, eps1: f64) -> bool {
    eps1 > 0.0 && eps1 < 0.5 * lambda / (eta + kappa)
}

/// Uniform sample from the ball of the given radius around `(0, 0, centre_theta)`,
/// rejecting points whose `θ` falls outside `[θ_lo, θ_hi]`.
pub fn sample_ball<R: Rng + ?Sized>(
    rng: &mut R,
    p: usize,
    q: usize,
    centre_theta: f64,
    radius: f64,
    theta_range: (f64, f64),
) -> UnitState {
    let d = p + q + 1;
    loop {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let r = radius * rng.gen::<f64>().powf(1.0 / d as f64) / norm;
        let theta = centre_theta + r * dir[p + q];
        if theta < theta_range.0 || theta > theta_range.1 {
            continue;
        }
        return UnitState {
            w_f: dir[..q].iter().map(|v| r * v).collect(),
            w_b: dir[q..p + q].iter().map(|v| r * v).collect(),
            theta,
        };
    }
}

/// Outcome of one trajectory of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryOutcome {
    pub start: UnitState,
    /// `None` if the integration diverged.
    pub trajectory: Option<Trajectory>,
    pub final_distance: f64,
    pub max_v_increase: f64,
}

/// Integrates every start, fanning out over the available cores; results keep the
/// order of `starts`.
pub fn sweep(dynamics: &UnitDynamics, starts: &[UnitState], dt: f64, t_end: f64) -> Vec<TrajectoryOutcome> {
    let eps1 = dynamics.clip.eps1;
    let run = |s: &UnitState| match integrate(dynamics, s, dt, t_end) {
        Ok(tr) => TrajectoryOutcome {
            start: s.clone(),
            final_distance: tr.last().distance_to(eps1),
            max_v_increase: tr.max_v_increase(eps1),
            trajectory: Some(tr),
        },
        Err(e) => {
            log::info!("trajectory from {s:?} failed: {e}");
            TrajectoryOutcome {
                start: s.clone(),
                trajectory: None,
                final_distance: f64::INFINITY,
                max_v_increase: f64::INFINITY,
            }
        }
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(starts.len().max(1));
    if workers <= 1 {
        return starts.iter().map(run).collect();
    }
    let chunk = starts.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = starts.chunks(chunk).map(|c| scope.spawn(move || c.iter().map(run).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

/// Parameters of the randomized Lyapunov descent experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovSuiteConfig {
    pub p: usize,
    pub q: usize,
    pub lambda: f64,
    pub kappa: f64,
    pub eta: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub log_gamma: f64,
    pub theta_low: f64,
    pub starts: usize,
    /// Horizon in units of `1/λ`.
    pub horizon: f64,
    pub seed: u64,
}

impl Default for LyapunovSuiteConfig {
    fn default() -> Self {
        LyapunovSuiteConfig {
            p: 3,
            q: 2,
            lambda: 1.0,
            kappa: 1.0,
            eta: 1.0,
            eps1: 0.05,
            eps2: 1e-4,
            log_gamma: 0.1f64.ln(),
            theta_low: 5e-3,
            starts: 100,
            horizon: 200.0,
            seed: 0,
        }
    }
}

impl LyapunovSuiteConfig {
    pub fn dynamics(&self, diff: DiffFn) -> Result<UnitDynamics> {
        let (m1, m2) = UnitDynamics::random_matrices(self.p, self.q, self.eta, self.seed);
        let prior = HyperPrior::flattening_log(self.log_gamma)?;
        let clip = ClipBounds::new(&prior, self.eps1, self.eps2)?;
        UnitDynamics::new(m1, m2, self.lambda, self.kappa, diff, prior, clip, (self.theta_low, 1.0 - 1e-5))
    }

    /// Seeded starts inside the guaranteed region of attraction.
    pub fn starts(&self) -> Vec<UnitState> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        let r = roa_radius(self.lambda, self.eta, self.kappa, self.eps1);
        (0..self.starts)
            .map(|_| sample_ball(&mut rng, self.p, self.q, self.eps1, r, (self.theta_low, 1.0 - 1e-5)))
            .collect()
    }
}

/// Summary of a Lyapunov experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub stable: bool,
    pub trajectories: usize,
    pub converged: usize,
    pub monotone: usize,
    pub worst_final_distance: f64,
    pub worst_v_increase: f64,
    pub outcomes: Vec<TrajectoryOutcome>,
}

/// Integrates every start over `horizon/λ` and counts trajectories ending within
/// `tol` of `(0,0,ε₁)` and trajectories whose `V` never grows by more than `v_tol`
/// in a step.
pub fn run_suite(
    dynamics: &UnitDynamics,
    starts: &[UnitState],
    horizon: f64,
    dt: f64,
    tol: f64,
    v_tol: f64,
) -> SuiteReport {
    let eta = dynamics.eta();
    let outcomes = sweep(dynamics, starts, dt, horizon / dynamics.lambda);
    let converged = outcomes.iter().filter(|o| o.final_distance < tol).count();
    let monotone = outcomes.iter().filter(|o| o.max_v_increase <= v_tol).count();
    SuiteReport {
        stable: stability_check(dynamics.lambda, eta, dynamics.kappa, dynamics.clip.eps1),
        trajectories: outcomes.len(),
        converged,
        monotone,
        worst_final_distance: outcomes.iter().map(|o| o.final_distance).fold(0.0, f64::max),
        worst_v_increase: outcomes.iter().map(|o| o.max_v_increase).fold(0.0, f64::max),
        outcomes,
    }
}

/// Empirical counterparts of the stability constants for one unit of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    /// Largest sampled `|Ĉ₁−Ĉ₀|/φ`.
    pub kappa_hat: f64,
    /// Largest sampled `σ̄(M̂₁+M̂₂ᵀ)`; `None` for units whose fan-out is not a dense layer.
    pub eta_hat: Option<f64>,
    /// `((1/L) Σ_l ‖W^l‖_F²)^{L/2}` over the parametric layers.
    pub lipschitz_prod: f64,
}

/// Product bound on the network's Lipschitz constant (weights only).
pub fn lipschitz_product(net: &Network) -> f64 {
    let norms: Vec<f64> = net.layers().iter().filter_map(|l| l.params()).map(|p| p.weights.sum_sq()).collect();
    if norms.is_empty() {
        return 0.0;
    }
    let l = norms.len() as f64;
    (norms.iter().sum::<f64>() / l).powf(l / 2.0)
}

/// Estimates `κ̂`, `η̂` for unit `u` of gated layer `g` from `n_samples` draws of
/// (gate configuration, minibatch of up to 64 samples with replacement, rescaling of
/// the unit's weights by a log-uniform factor in `[0.1, 10]`). The data term is scaled
/// by `N/B`. States with `φ < 1e-8` are skipped.
pub fn empirical_bounds<R: Rng + ?Sized>(
    net: &Network,
    gates: &GateState,
    data: &Dataset,
    unit: (usize, usize),
    n_samples: usize,
    rng: &mut R,
) -> Result<BoundReport> {
    let (g, u) = unit;
    if g >= gates.layers.len() || u >= gates.layers[g].alive.len() || !gates.layers[g].alive[u] {
        return Err(Error::param(format!("unit ({g}, {u}) is not an alive gated unit")));
    }
    if n_samples == 0 {
        return Err(Error::param("n_samples must be >= 1"));
    }
    if net.phi(g, u) == 0.0 {
        return Err(Error::param(format!("unit ({g}, {u}) has phi = 0")));
    }
    let n = data.len();
    let b = n.min(64);
    let scale = n as f64 / b as f64;
    let dense_fan_out = matches!(net.fan_out(g), FanOut::DenseCols { block: 1, .. })
        && matches!(net.layers()[net.gated_layers()[g]], Layer::Dense { .. });
    let mut kappa_hat: f64 = 0.0;
    let mut eta_hat: f64 = 0.0;
    let mut gates = gates.clone();
    gates.deterministic = false;
    for _ in 0..n_samples {
        let mut masks = gates.sample(rng)?;
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let (x, y) = data.select(&idx);
        let s = 10f64.powf(rng.gen_range(-1.0..1.0));
        let mut scaled = net.clone();
        scaled.scale_unit(g, u, s);
        let phi = scaled.phi(g, u);
        masks[g][u] = 1.0;
        let trace = scaled.forward(&x, Some(&masks))?;
        let c1 = crate::tensor::loss_and_grad(scaled.loss(), &trace.output, &y)?.total * scale;
        masks[g][u] = 0.0;
        let out0 = scaled.predict(&x, Some(&masks))?;
        let c0 = crate::tensor::loss_and_grad(scaled.loss(), &out0, &y)?.total * scale;
        if phi >= 1e-8 {
            kappa_hat = kappa_hat.max((c1 - c0).abs() / phi);
        }
        if dense_fan_out {
            eta_hat = eta_hat.max(m_hat_sigma(&scaled, &trace, &y, g, u, scale)?);
        }
    }
    Ok(BoundReport {
        kappa_hat,
        eta_hat: dense_fan_out.then_some(eta_hat),
        lipschitz_prod: lipschitz_product(net),
    })
}

/// `σ̄(M̂₁ + M̂₂ᵀ)` with `M̂₁ = Σᵢ a(sᵢ)/sᵢ · δ_f,ᵢ z_b,ᵢᵀ`, `M̂₂ = Σᵢ a'(sᵢ) z_b,ᵢ δ_f,ᵢᵀ`
/// from a trace with the unit's gate on; `δ_f` is the scaled backpropagated error at the
/// consuming layer's pre-activation.
fn m_hat_sigma(
    net: &Network,
    trace: &crate::network::ForwardTrace,
    targets: &crate::tensor::Tensor,
    g: usize,
    u: usize,
    scale: f64,
) -> Result<f64> {
    let l = net.gated_layers()[g];
    let j = net.fan_out(g).layer();
    let grads = net.backward(trace, targets, scale)?;
    let delta = grads.deltas[j].as_ref().expect("consumer delta");
    let act = net.layers()[l].activation().expect("dense activation");
    let z_b = &trace.inputs[l];
    let pre = trace.pre[l].as_ref().expect("pre-activation");
    let (bsz, p) = (z_b.batch(), z_b.sample_len());
    let q = delta.sample_len();
    let units = pre.sample_len();
    let mut m = DMatrix::<f64>::zeros(q, p);
    for i in 0..bsz {
        let s = pre.data()[i * units + u];
        let c = act.secant(s) + act.derivative(s);
        let d = &delta.data()[i * q..(i + 1) * q];
        let z = &z_b.data()[i * p..(i + 1) * p];
        for r in 0..q {
            for k in 0..p {
                m[(r, k)] += c * d[r] * z[k];
            }
        }
    }
    Ok(max_singular_value(&m))
}
