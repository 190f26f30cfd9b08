//! Uncorrelated SABR-type toy model with `σ(t, u) = e^{-t/2 + u}` and `f̂ = f`.
//!
//! Its terminal rate is `Ĩ_T(x) = ½ inf_f [x² / ∫_0^T e^{-t + 2f(t)} dt + ∫_0^T ḟ²]`, which
//! admits explicit two-sided bounds for small log-moneyness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::func::ScalarFn;
use crate::model::{DriftSpec, ModelSpec, StateFn, VolatilitySpec};
use crate::optim::OptimConfig;
use crate::ratefn::{itilde_terminal, RateResult};
use crate::volmap::VolProcessSpec;

const E: f64 = std::f64::consts::E;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ToyParams {
    #[serde(rename = "T")]
    pub t: f64,
    pub k: f64,
}

impl ToyParams {
    pub fn new(t: f64, k: f64) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Domain(format!("maturity must be positive, got {t}")));
        }
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::Domain(format!("log-moneyness must be positive, got {k}")));
        }
        Ok(ToyParams { t, k })
    }

    /// Upper end of the log-moneyness window where the bounds hold.
    pub fn window(t: f64) -> f64 {
        (-(-t).exp_m1() / (2.0 * t * E)).sqrt()
    }

    pub fn in_window(&self) -> bool {
        self.k > 0.0 && self.k < Self::window(self.t)
    }

    fn check_window(&self) -> Result<()> {
        if !self.in_window() {
            return Err(Error::OutOfRange(format!(
                "k = {} outside (0, {}) for T = {}",
                self.k,
                Self::window(self.t),
                self.t
            )));
        }
        Ok(())
    }
}

/// `1 - e^{-T}`.
fn one_minus_exp(t: f64) -> f64 {
    -(-t).exp_m1()
}

/// The toy model as a [`ModelSpec`] with `s0 = 1`, `r = 0`, `ρ = 0`.
pub fn toy_model_spec(t: f64, n_steps: usize) -> ModelSpec {
    ModelSpec {
        name: Some("toy_sabr".into()),
        horizon: t,
        n_steps,
        m: 1,
        vol: VolProcessSpec::toy(),
        drift: DriftSpec::Rate,
        volatility: VolatilitySpec::Scalar(StateFn { base: ScalarFn::Exp { scale: 1.0, rate: 1.0 }, component: 0, time_rate: -0.5 }),
        correlation: None,
        rho: Some(0.0),
        s0: vec![1.0],
        rate: 0.0,
        assumption_b: true,
        sigma_may_vanish: false,
    }
}

/// `Ĩ_T(k)` by optimization; defined for every `k > 0`.
pub fn toy_rate(p: ToyParams, n_steps: usize, cfg: &OptimConfig) -> Result<RateResult> {
    itilde_terminal(&toy_model_spec(p.t, n_steps), &[p.k], cfg)
}

/// `h(u) = u e^u`.
pub fn h(u: f64) -> f64 {
    u * u.exp()
}

/// Inverse of `h` on `[0, ∞)` by Newton's method.
pub fn h_inverse(y: f64) -> Result<f64> {
    if !(y >= 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!("h_inverse needs a finite y >= 0, got {y}")));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    // ln(1+y) lies to the right of the root; h is convex there, so Newton decreases monotonically
    let mut u = y.ln_1p();
    for _ in 0..200 {
        let eu = u.exp();
        let res = u * eu - y;
        if res.abs() < 1e-13 * y.max(1.0) {
            return Ok(u);
        }
        let next = (u - res / (eu * (1.0 + u))).max(0.0);
        if next == u {
            return Ok(u);
        }
        u = next;
    }
    Err(Error::NonConvergence { iterations: 200, residual: h(u) - y })
}

/// Truncated Lagrange series `Σ_{n=1}^{terms} (-1)^{n-1} n^{n-1}/n! yⁿ`, valid for `|y| < 1/e`.
pub fn h_inverse_series_n(y: f64, terms: usize) -> Result<f64> {
    if !(y.abs() < 1.0 / E) {
        return Err(Error::OutOfRange(format!("series needs |y| < 1/e, got {y}")));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    let (ly, sign_y) = (y.abs().ln(), y.signum());
    let mut sum = 0.0;
    let mut lfact = 0.0;
    for n in 1..=terms {
        let nf = n as f64;
        lfact += nf.ln();
        let mag = ((nf - 1.0) * nf.ln() - lfact + nf * ly).exp();
        let sign = if n % 2 == 1 { 1.0 } else { -1.0 } * sign_y.powi(n as i32);
        sum += sign * mag;
    }
    Ok(sum)
}

/// Lagrange series summed until terms fall below `1e-18` (at most 2000 terms).
pub fn h_inverse_series(y: f64) -> Result<f64> {
    if !(y.abs() < 1.0 / E) {
        return Err(Error::OutOfRange(format!("series needs |y| < 1/e, got {y}")));
    }
    // term magnitude behaves like (e|y|)ⁿ / (√(2π) n^{3/2})
    let q = E * y.abs();
    let mut terms = 40;
    while terms < 2000 && q.powi(terms as i32) / (terms as f64).powf(1.5) > 1e-18 {
        terms += 10;
    }
    h_inverse_series_n(y, terms)
}

/// `a(k) = ½ h⁻¹(2Tk²/(1-e^{-T}))`, so that `a e^{2a} = Tk²/(1-e^{-T})`.
pub fn a_of_k(p: ToyParams) -> Result<f64> {
    Ok(0.5 * h_inverse(2.0 * p.t * p.k * p.k / one_minus_exp(p.t))?)
}

/// `(k²(e-1)/(2e(1-e^{-T})), k²/(1-e^{-T}))`.
pub fn rate_bounds(p: ToyParams) -> Result<(f64, f64)> {
    p.check_window()?;
    let q = p.k * p.k / one_minus_exp(p.t);
    Ok((q * (E - 1.0) / (2.0 * E), q))
}

/// `(√(1-e^{-T})/√(2T), √(e(1-e^{-T}))/√(T(e-1)))`.
pub fn iv_limit_bounds(p: ToyParams) -> Result<(f64, f64)> {
    p.check_window()?;
    let a = one_minus_exp(p.t);
    Ok(((a / (2.0 * p.t)).sqrt(), (E * a / (p.t * (E - 1.0))).sqrt()))
}
