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

//! Hyper-priors over the prior keep-probability `π` of a gate, the constrained optimal
//! prior parameter `π*(θ)`, and the resulting log-term of the gate gradient.
//!
//! For a gate with posterior `Bernoulli(θ)` the optimal prior parameter minimizes
//!
//! ```text
//! J(π) = (1−θ)·ln((1−θ)/(1−π)) + θ·ln(θ/π) − ln p(π)
//! ```
//!
//! over `[ε₁, 1−ε₂]`. Both supported families give a closed-form interior solution
//! clipped at the interval ends; the clipping switches at `θ₁` and `θ₂`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HyperPrior {
    Beta { alpha: f64, beta: f64 },
    /// `p(π|γ) = c / (1 + (γ−1)(1−π))` with `c = (γ−1)/ln γ`.
    Flattening { gamma: f64 },
}

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

impl HyperPrior {
    pub fn flattening_log(log_gamma: f64) -> Result<Self> {
        let hp = HyperPrior::Flattening { gamma: log_gamma.exp() };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            HyperPrior::Beta { alpha, beta } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::param(format!("Beta alpha must lie in (0,1), got {alpha}")));
                }
                if !(beta > 1.0 && beta.is_finite()) {
                    return Err(Error::param(format!("Beta beta must be > 1, got {beta}")));
                }
            }
            HyperPrior::Flattening { gamma } => {
                if !(gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::param(format!("flattening gamma must be > 0, got {gamma}")));
                }
            }
        }
        Ok(())
    }

    /// Interior (unconstrained) minimizer of `J`.
    pub fn interior_pi(&self, theta: f64) -> f64 {
        match *self {
            HyperPrior::Beta { alpha, beta } => (theta + alpha - 1.0) / (alpha + beta - 1.0),
            HyperPrior::Flattening { gamma } => gamma * theta / (1.0 + theta * (gamma - 1.0)),
        }
    }

    /// `θ` at which the interior minimizer equals `pi`.
    pub fn interior_inverse(&self, pi: f64) -> f64 {
        match *self {
            HyperPrior::Beta { alpha, beta } => (1.0 - pi) * (1.0 - alpha) + pi * beta,
            HyperPrior::Flattening { gamma } => pi / (pi + gamma * (1.0 - pi)),
        }
    }

    /// Log-density `ln p(π)`.
    pub fn log_pdf(&self, pi: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&pi) {
            return Err(Error::param(format!("pi {pi} outside [0,1]")));
        }
        Ok(match *self {
            HyperPrior::Beta { alpha, beta } => {
                let log_b = libm::lgamma(alpha) + libm::lgamma(beta) - libm::lgamma(alpha + beta);
                let a = if alpha == 1.0 { 0.0 } else { (alpha - 1.0) * pi.ln() };
                let b = if beta == 1.0 { 0.0 } else { (beta - 1.0) * (-pi).ln_1p() };
                a + b - log_b
            }
            HyperPrior::Flattening { gamma } => {
                let d = gamma - 1.0;
                // ln c with c = d/ln(1+d); c → 1 as γ → 1.
                let log_c = if d.abs() < 1e-300 { 0.0 } else { (d / d.ln_1p()).ln() };
                log_c - (gamma + pi * (1.0 - gamma)).ln()
            }
        })
    }

    pub fn pdf(&self, pi: f64) -> Result<f64> {
        Ok(self.log_pdf(pi)?.exp())
    }
}

/// Interval `[ε₁, 1−ε₂]` for `π` and the `θ` thresholds where the optimum hits its ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipBounds {
    pub eps1: f64,
    pub eps2: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl ClipBounds {
    pub fn new(hp: &HyperPrior, eps1: f64, eps2: f64) -> Result<Self> {
        hp.validate()?;
        if !(eps1 > 0.0 && eps2 > 0.0 && eps1 + eps2 < 1.0) {
            return Err(Error::param(format!("clip bounds eps1={eps1}, eps2={eps2} invalid")));
        }
        Ok(ClipBounds {
            eps1,
            eps2,
            theta1: hp.interior_inverse(eps1),
            theta2: hp.interior_inverse(1.0 - eps2),
        })
    }

    /// Chooses `ε₁` such that the lower threshold sits at `theta1`. Useful for very
    /// small `γ` (or very large `β`), where a fixed `ε₁` would push `θ₁` above 1 and
    /// remove the interior branch altogether.
    pub fn from_theta1(hp: &HyperPrior, theta1: f64, eps2: f64) -> Result<Self> {
        hp.validate()?;
        if !(theta1 > 0.0 && theta1 < 1.0) {
            return Err(Error::param(format!("theta1 {theta1} outside (0,1)")));
        }
        let eps1 = hp.interior_pi(theta1);
        if !(eps1 > 0.0) {
            return Err(Error::param(format!(
                "theta1 {theta1} maps to a non-positive lower clip bound {eps1}"
            )));
        }
        let mut cb = Self::new(hp, eps1, eps2)?;
        cb.theta1 = theta1;
        Ok(cb)
    }

    /// `false` when the upper threshold lies beyond 1, i.e. the upper clip never binds.
    pub fn upper_active(&self) -> bool {
        self.theta2 <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Branch {
    Lower,
    Interior,
    Upper,
}

fn branch(cb: &ClipBounds, theta: f64) -> Branch {
    if theta <= cb.theta1 {
        Branch::Lower
    } else if theta >= cb.theta2 {
        Branch::Upper
    } else {
        Branch::Interior
    }
}

/// Closed-form constrained minimizer `π*(θ)` of `J`.
pub fn pi_star(hp: &HyperPrior, cb: &ClipBounds, theta: f64) -> Result<f64> {
    hp.validate()?;
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::param(format!("theta {theta} outside [0,1]")));
    }
    Ok(match branch(cb, theta) {
        Branch::Lower => cb.eps1,
        Branch::Upper => 1.0 - cb.eps2,
        Branch::Interior => hp.interior_pi(theta).clamp(cb.eps1, 1.0 - cb.eps2),
    })
}

/// `ln(θ(1−π*)/((1−θ)π*))`, evaluated from the branch formulas in log space.
pub fn reg_term(hp: &HyperPrior, cb: &ClipBounds, theta: f64) -> Result<f64> {
    hp.validate()?;
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::param(format!("regularization term undefined at theta {theta}")));
    }
    let lt = logit(theta);
    Ok(match branch(cb, theta) {
        Branch::Lower => lt - logit(cb.eps1),
        Branch::Upper => lt - logit(1.0 - cb.eps2),
        Branch::Interior => match *hp {
            HyperPrior::Flattening { gamma } => -gamma.ln(),
            HyperPrior::Beta { alpha, beta } => lt + ((beta - theta) / (theta + alpha - 1.0)).ln(),
        },
    })
}

/// Rows `(θ, reg_term(θ))` for plotting.
pub fn curve_export(hp: &HyperPrior, cb: &ClipBounds, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    grid.iter().map(|&t| Ok((t, reg_term(hp, cb, t)?))).collect()
}

/// `J(π)` for a given log-density.
pub fn objective_j(log_pdf: &dyn Fn(f64) -> f64, theta: f64, pi: f64) -> f64 {
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * (x / y).ln() };
    xlogy(1.0 - theta, 1.0 - pi) + xlogy(theta, pi) - log_pdf(pi)
}

/// Brute-force minimizer of `J` over `[ε₁, 1−ε₂]` for an arbitrary log-density: a dense
/// grid in logit space followed by bisection on the sign of `dJ/d logit(π)`, whose
/// density part is taken by central differences. Independent of the closed forms.
pub struct NumericMinimizer<'a> {
    log_pdf: &'a dyn Fn(f64) -> f64,
    pis: Vec<f64>,
    ln_pi: Vec<f64>,
    ln_1m: Vec<f64>,
    ln_p: Vec<f64>,
}

impl<'a> NumericMinimizer<'a> {
    pub const GRID: usize = 100_001;

    pub fn new(log_pdf: &'a dyn Fn(f64) -> f64, eps1: f64, eps2: f64) -> Self {
        let (lo, hi) = (logit(eps1), logit(1.0 - eps2));
        let n = Self::GRID;
        let mut pis = Vec::with_capacity(n);
        for i in 0..n {
            let s = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            pis.push(1.0 / (1.0 + (-s).exp()));
        }
        pis[0] = eps1;
        pis[n - 1] = 1.0 - eps2;
        let ln_pi = pis.iter().map(|p| p.ln()).collect();
        let ln_1m = pis.iter().map(|p| (-p).ln_1p()).collect();
        let ln_p = pis.iter().map(|&p| log_pdf(p)).collect();
        NumericMinimizer { log_pdf, pis, ln_pi, ln_1m, ln_p }
    }

    /// `dJ/ds` at `π = σ(s)`: `π − θ − π(1−π)·(ln p)'(π)`.
    fn slope(&self, theta: f64, pi: f64) -> f64 {
        let h = 1e-6 * pi.min(1.0 - pi);
        let d = ((self.log_pdf)(pi + h) - (self.log_pdf)(pi - h)) / (2.0 * h);
        pi - theta - pi * (1.0 - pi) * d
    }

    pub fn minimize(&self, theta: f64) -> f64 {
        // Terms constant in π are dropped; only the argmin matters.
        let n = self.pis.len();
        let mut best = 0;
        let mut best_j = f64::INFINITY;
        for i in 0..n {
            let j = -theta * self.ln_pi[i] - (1.0 - theta) * self.ln_1m[i] - self.ln_p[i];
            if j < best_j {
                best_j = j;
                best = i;
            }
        }
        let lo = best.saturating_sub(1);
        let hi = (best + 1).min(n - 1);
        let (mut a, mut b) = (logit(self.pis[lo]), logit(self.pis[hi]));
        let sigmoid = |s: f64| 1.0 / (1.0 + (-s).exp());
        let ga = self.slope(theta, self.pis[lo]);
        let gb = self.slope(theta, self.pis[hi]);
        if best == 0 && ga >= 0.0 {
            return self.pis[0];
        }
        if best == n - 1 && gb <= 0.0 {
            return self.pis[n - 1];
        }
        if !(ga < 0.0 && gb > 0.0) {
            return self.pis[best];
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if self.slope(theta, sigmoid(m)) < 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        sigmoid(0.5 * (a + b)).clamp(self.pis[0], self.pis[n - 1])
    }
}

/// One-shot numeric `π*` for a hyper-prior (builds the grid each call).
pub fn pi_star_numeric(hp: &HyperPrior, cb: &ClipBounds, theta: f64) -> Result<f64> {
    hp.validate()?;
    let hp = *hp;
    let f = move |p: f64| hp.log_pdf(p).unwrap_or(f64::NAN);
    Ok(NumericMinimizer::new(&f, cb.eps1, cb.eps2).minimize(theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(gamma: f64) -> HyperPrior {
        HyperPrior::Flattening { gamma }
    }

    #[test]
    fn uniform_limit_is_identity() {
        let hp = flat(1.0);
        let cb = ClipBounds::new(&hp, 1e-4, 1e-4).unwrap();
        for t in [0.01, 0.3, 0.77] {
            assert!((pi_star(&hp, &cb, t).unwrap() - t).abs() < 1e-15);
        }
    }

    #[test]
    fn spec_examples() {
        let hp = flat(0.01);
        let cb = ClipBounds::new(&hp, 1e-4, 1e-4).unwrap();
        let p = pi_star(&hp, &cb, 0.5).unwrap();
        assert!((p - 0.005 / 0.505).abs() < 1e-15);
        assert!((p - pi_star_numeric(&hp, &cb, 0.5).unwrap()).abs() < 1e-10);
        assert!((reg_term(&hp, &cb, 0.5).unwrap() - 4.605_170_185_988_091).abs() < 1e-12);

        let hp = HyperPrior::Beta { alpha: 0.9, beta: 10.0 };
        let cb = ClipBounds::new(&hp, 1e-4, 1e-4).unwrap();
        assert!((cb.theta1 - 0.10099).abs() < 1e-12);
        assert!((cb.theta2 - 9.99901).abs() < 1e-12);
        assert!(!cb.upper_active());
        let p = pi_star(&hp, &cb, 0.5).unwrap();
        assert!((p - 0.4 / 9.9).abs() < 1e-15);
        assert!((p - pi_star_numeric(&hp, &cb, 0.5).unwrap()).abs() < 1e-10);
        let r = reg_term(&hp, &cb, 0.5).unwrap();
        assert!((r - (9.5f64 / 0.4).ln()).abs() < 1e-12);
        assert!((r - 3.1676).abs() < 1e-4);
        let cross = (0.5 * (1.0 - p) / (0.5 * p)).ln();
        assert!((r - cross).abs() < 1e-12);
    }

    #[test]
    fn flattening_thresholds() {
        let hp = flat(0.01);
        let cb = ClipBounds::new(&hp, 1e-4, 1e-4).unwrap();
        let expect1 = 1e-4 / (1e-4 + 0.01 * (1.0 - 1e-4));
        let expect2 = (1.0 - 1e-4) / (1.0 + 1e-4 * (0.01 - 1.0));
        assert!((cb.theta1 - expect1).abs() < 1e-15);
        assert!((cb.theta2 - expect2).abs() < 1e-15);
    }

    #[test]
    fn closed_form_matches_oracle_on_grid() {
        let families = [
            (HyperPrior::Beta { alpha: 0.9, beta: 10.0 }, 1e-4),
            (flat(1e-2), 1e-4),
            (flat(1e-1), 1e-4),
        ];
        for (hp, eps) in families {
            let cb = ClipBounds::new(&hp, eps, eps).unwrap();
            let f = move |p: f64| hp.log_pdf(p).unwrap();
            let oracle = NumericMinimizer::new(&f, cb.eps1, cb.eps2);
            for i in 0..200 {
                let t = (i as f64 + 0.5) / 200.0;
                let a = pi_star(&hp, &cb, t).unwrap();
                let b = oracle.minimize(t);
                assert!((a - b).abs() <= 1e-7 * b, "{hp:?} θ={t}: {a} vs {b}");
                let j = |p| objective_j(&f, t, p);
                assert!(j(b) <= j(cb.eps1) + 1e-12 && j(b) <= j(1.0 - cb.eps2) + 1e-12);
            }
        }
    }

    #[test]
    fn lemma_one_sign_structure() {
        for hp in [HyperPrior::Beta { alpha: 0.9, beta: 10.0 }, flat(1e-2), flat(0.3)] {
            let cb = ClipBounds::new(&hp, 1e-2, 1e-4).unwrap();
            for i in 1..1000 {
                let t = i as f64 / 1000.0;
                let p = pi_star(&hp, &cb, t).unwrap();
                if t < cb.eps1 {
                    assert!(p > t);
                } else if t > cb.eps1 {
                    assert!(p < t, "{hp:?} θ={t} π*={p}");
                }
            }
            assert_eq!(pi_star(&hp, &cb, cb.eps1).unwrap(), cb.eps1);
            assert!(reg_term(&hp, &cb, cb.eps1).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn flatness_and_log_term_sign() {
        let hp = flat(1e-2);
        let cb = ClipBounds::new(&hp, 1e-4, 1e-4).unwrap();
        for i in 1..1000 {
            let t = cb.theta1 + (cb.theta2 - cb.theta1) * i as f64 / 1000.0;
            assert!((reg_term(&hp, &cb, t).unwrap() + 0.01f64.ln()).abs() < 1e-9);
        }
        let beta = HyperPrior::Beta { alpha: 0.9, beta: 10.0 };
        let cb = ClipBounds::new(&beta, 1e-4, 1e-4).unwrap();
        for i in 1..100 {
            let t = cb.theta1 + (1.0 - cb.theta1) * i as f64 / 100.0;
            let p = pi_star(&beta, &cb, t).unwrap();
            let r = reg_term(&beta, &cb, t).unwrap();
            assert_eq!(r > 0.0, t > p);
        }
        assert!(reg_term(&hp, &cb, 0.0).is_err());
        assert!(reg_term(&hp, &cb, 1.0).is_err());
    }

    #[test]
    fn pdf_normalization_and_monotonicity() {
        for gamma in [1e-3, 1e-2, 0.5, 3.0] {
            let hp = flat(gamma);
            let panels = 10_000;
            let h = 1.0 / panels as f64;
            let mut s = hp.pdf(0.0).unwrap() + hp.pdf(1.0).unwrap();
            for i in 1..panels {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * hp.pdf(i as f64 * h).unwrap();
            }
            assert!((s * h / 3.0 - 1.0).abs() < 1e-6, "γ={gamma}");
            let increasing = hp.pdf(0.9).unwrap() > hp.pdf(0.1).unwrap();
            assert_eq!(increasing, gamma > 1.0);
        }
        let near_uniform = flat(1.0 + 1e-9);
        for p in [0.0, 0.3, 1.0] {
            assert!((near_uniform.pdf(p).unwrap() - 1.0).abs() < 1e-8);
        }
        assert!(flat(0.5).pdf(1.5).is_err());
    }

    #[test]
    fn beta_curve_dips_then_increases_on_interior() {
        // d/dθ = 1/(θ(1−θ)) − 1/(β−θ) − 1/(θ+α−1): the last term dominates right above
        // θ₁, so the interior branch first falls, then rises for the rest of (θ₁, 1).
        let hp = HyperPrior::Beta { alpha: 0.9, beta: 10.0 };
        let cb = ClipBounds::new(&hp, 1e-4, 1e-4).unwrap();
        let grid: Vec<f64> = (1..2000).map(|i| cb.theta1 + (0.9999 - cb.theta1) * i as f64 / 2000.0).collect();
        let rows = curve_export(&hp, &cb, &grid).unwrap();
        let signs: Vec<bool> = rows.windows(2).map(|w| w[1].1 > w[0].1).collect();
        let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(changes, 1);
        assert!(!signs[0] && *signs.last().unwrap());
        // continuous across θ₁
        let below = reg_term(&hp, &cb, cb.theta1).unwrap();
        let above = reg_term(&hp, &cb, cb.theta1 * (1.0 + 1e-12)).unwrap();
        assert!((below - above).abs() < 1e-6);
        assert_eq!(curve_export(&hp, &cb, &[0.5]).unwrap().len(), 1);
    }

    #[test]
    fn theta1_parameterization_for_tiny_gamma() {
        let hp = HyperPrior::flattening_log(-25.0).unwrap();
        let cb = ClipBounds::from_theta1(&hp, 1e-4, 1e-4).unwrap();
        assert!(cb.eps1 > 0.0 && cb.eps1 < 1e-14);
        assert!((reg_term(&hp, &cb, 0.5).unwrap() - 25.0).abs() < 1e-9);
        // with the default ε₁ the interior branch disappears
        let plain = ClipBounds::new(&hp, 1e-4, 1e-4).unwrap();
        assert!(plain.theta1 > 0.9999);
    }

    #[test]
    fn invalid_parameters() {
        assert!(HyperPrior::Beta { alpha: 1.2, beta: 10.0 }.validate().is_err());
        assert!(HyperPrior::Beta { alpha: 0.5, beta: 0.9 }.validate().is_err());
        assert!(flat(0.0).validate().is_err());
        assert!(ClipBounds::new(&flat(0.1), 0.0, 1e-4).is_err());
        let hp = flat(0.1);
        let cb = ClipBounds::new(&hp, 1e-4, 1e-4).unwrap();
        assert!(pi_star(&hp, &cb, 1.2).is_err());
    }
}
