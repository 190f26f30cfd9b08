//! Volterra kernels `K(t, s)` and the Hilbert–Schmidt operators they induce.
//!
//! Every kernel vanishes for `s >= t`. Internally kernels are evaluated as
//! `K(s + x, s)` from the pair `(s, x)` with `x = t - s`, which keeps the
//! distance to the diagonal exact when `x` is tiny.
//!
//! Operators act on a [`TimeGrid`] through a [`DiscreteKernel`], which caches
//! the cell integrals `W[i][j] = ∫_{t_j}^{t_{j+1}} K(t_i, s) ds`. The
//! Riemann–Liouville and Brownian cells are closed form; the remaining kinds
//! are integrated after mapping away the endpoint singularities.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::paths::TimeGrid;
use crate::quad;

const QUAD_TOL: f64 = 1e-12;
const INNER_TOL: f64 = 1e-10;
const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Tagged description of an admissible Volterra kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `K(t, s) = 1_{s < t}`.
    Brownian,
    /// `(t - s)^{H - 1/2} / Γ(H + 1/2)`.
    RiemannLiouville { hurst: f64 },
    /// Molchan–Golosov kernel of fractional Brownian motion.
    FbmMolchanGolosov { hurst: f64 },
    /// `τ(t - s)` with `τ(x)^2 = β x^{-1} (log 1/x)^{-β-1}`, defined for lags below 1.
    Logarithmic { beta: f64 },
    /// Values `table[i][j] = K(t_i, s_j)` on the uniform grid of `[0, horizon]`.
    Tabulated { horizon: f64, table: Vec<Vec<f64>> },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Brownian => Ok(()),
            KernelSpec::RiemannLiouville { hurst } | KernelSpec::FbmMolchanGolosov { hurst } => {
                if hurst.is_finite() && *hurst > 0.0 && *hurst < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidKernel(format!("hurst = {hurst} not in (0, 1)")))
                }
            }
            KernelSpec::Logarithmic { beta } => {
                if beta.is_finite() && *beta > 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidKernel(format!("beta = {beta} must exceed 1")))
                }
            }
            KernelSpec::Tabulated { horizon, table } => {
                if !(horizon.is_finite() && *horizon > 0.0) {
                    return Err(Error::InvalidKernel("tabulated horizon must be positive".into()));
                }
                let n = table.len();
                if n < 2 || table.iter().any(|row| row.len() != n) {
                    return Err(Error::InvalidKernel(
                        "tabulated kernel needs a square table with at least 2 nodes".into(),
                    ));
                }
                if table.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidKernel("tabulated kernel has non-finite entries".into()));
                }
                Ok(())
            }
        }
    }

    /// True when `K(t, s)` depends on `t - s` only.
    pub fn is_convolution(&self) -> bool {
        matches!(
            self,
            KernelSpec::Brownian | KernelSpec::RiemannLiouville { .. } | KernelSpec::Logarithmic { .. }
        )
    }

    /// Largest horizon on which the kernel is defined.
    pub fn max_horizon(&self) -> f64 {
        match self {
            KernelSpec::Logarithmic { .. } => 1.0,
            KernelSpec::Tabulated { horizon, .. } => *horizon,
            _ => f64::INFINITY,
        }
    }

    /// Leading power exponents of `s ↦ K(t, s)` at `s = 0` and at `s = t`.
    fn exponents(&self) -> (f64, f64) {
        match self {
            KernelSpec::Brownian | KernelSpec::Tabulated { .. } => (0.0, 0.0),
            KernelSpec::RiemannLiouville { hurst } => (0.0, hurst - 0.5),
            KernelSpec::FbmMolchanGolosov { hurst } => {
                let a = hurst - 0.5;
                if a > 0.0 {
                    (-a, 0.0)
                } else {
                    (a, a)
                }
            }
            KernelSpec::Logarithmic { .. } => (0.0, -0.5),
        }
    }

    /// `K(s + x, s)` for `s >= 0`, `x > 0`.
    fn kval(&self, s: f64, x: f64) -> f64 {
        match self {
            KernelSpec::Brownian => 1.0,
            KernelSpec::RiemannLiouville { hurst } => x.powf(hurst - 0.5) / gamma(hurst + 0.5),
            KernelSpec::FbmMolchanGolosov { hurst } => mg_value(*hurst, s, x),
            KernelSpec::Logarithmic { beta } => log_kernel(*beta, x),
            KernelSpec::Tabulated { horizon, table } => tabulated(*horizon, table, s + x, s),
        }
    }
}

fn log_kernel(beta: f64, x: f64) -> f64 {
    if x >= 1.0 {
        return f64::NAN;
    }
    let l = -x.ln();
    (beta / x * l.powf(-beta - 1.0)).sqrt()
}

fn tabulated(horizon: f64, table: &[Vec<f64>], t: f64, s: f64) -> f64 {
    let n = table.len() - 1;
    let h = horizon / n as f64;
    let loc = |v: f64| {
        let p = (v / h).clamp(0.0, n as f64);
        let i = (p.floor() as usize).min(n - 1);
        (i, p - i as f64)
    };
    let (i, a) = loc(t);
    let (j, b) = loc(s);
    let v00 = table[i][j];
    let v01 = table[i][j + 1];
    let v10 = table[i + 1][j];
    let v11 = table[i + 1][j + 1];
    (1.0 - a) * ((1.0 - b) * v00 + b * v01) + a * ((1.0 - b) * v10 + b * v11)
}

/// Normalising constant of the Molchan–Golosov kernel.
fn mg_constant(hurst: f64) -> f64 {
    if hurst > 0.5 {
        (hurst * (2.0 * hurst - 1.0) / beta(hurst - 0.5, 2.0 - 2.0 * hurst)).sqrt()
    } else {
        (2.0 * hurst / ((1.0 - 2.0 * hurst) * beta(1.0 - 2.0 * hurst, hurst + 0.5))).sqrt()
    }
}

/// `∫_0^x h(w) dw` where `h ~ w^gamma` for `w ≪ scale`; the range above
/// `scale` is integrated on a logarithmic axis.
fn scaled_power_integral<H: Fn(f64) -> f64>(h: H, scale: f64, x: f64, gamma: f64) -> f64 {
    if x <= scale {
        return quad::half_integral(&h, x, gamma, INNER_TOL);
    }
    let near = quad::half_integral(&h, scale, gamma, INNER_TOL);
    let far = quad::integrate(|v: f64| {
        let w = v.exp();
        h(w) * w
    }, scale.ln(), x.ln(), INNER_TOL);
    near + far
}

fn mg_value(hurst: f64, s: f64, x: f64) -> f64 {
    let a = hurst - 0.5;
    if a == 0.0 {
        return 1.0;
    }
    if s <= 0.0 {
        return f64::INFINITY;
    }
    let c = mg_constant(hurst);
    if a > 0.0 {
        // s^{-a} ∫_0^x w^{a-1} (s + w)^a dw
        let inner = scaled_power_integral(|w| w.powf(a - 1.0) * (s + w).powf(a), s, x, a - 1.0);
        c * s.powf(-a) * inner
    } else {
        // ((s+x)/s)^a x^a - a s^{-a} ∫_0^x (s + w)^{a-1} w^a dw
        let t = s + x;
        let inner = scaled_power_integral(|w| (s + w).powf(a - 1.0) * w.powf(a), s, x, a);
        c * ((t / s).powf(a) * x.powf(a) - a * s.powf(-a) * inner)
    }
}

fn check_horizon(k: &KernelSpec, t: f64) -> Result<()> {
    match k {
        KernelSpec::Logarithmic { .. } if t >= 1.0 => Err(Error::Admissibility(format!(
            "logarithmic kernel is only square-integrable for lags below 1, got {t}"
        ))),
        KernelSpec::Tabulated { horizon, .. } if t > horizon * (1.0 + 1e-12) => Err(
            Error::Admissibility(format!("tabulated kernel covers [0, {horizon}] only, got {t}")),
        ),
        _ => Ok(()),
    }
}

/// Evaluates `K(t, s)`; zero whenever `s >= t`.
pub fn eval_kernel(k: &KernelSpec, t: f64, s: f64) -> Result<f64> {
    k.validate()?;
    if !(t.is_finite() && s.is_finite()) || t < 0.0 || s < 0.0 {
        return Err(Error::Domain(format!("kernel arguments must be nonnegative, got t={t}, s={s}")));
    }
    if s >= t {
        return Ok(0.0);
    }
    match k {
        KernelSpec::Tabulated { .. } => check_horizon(k, t)?,
        _ => check_horizon(k, t - s)?,
    }
    Ok(k.kval(s, t - s))
}

/// `∫_0^t K(t, s)^2 ds`.
pub fn slice_variance(k: &KernelSpec, t: f64) -> Result<f64> {
    k.validate()?;
    if t < 0.0 || !t.is_finite() {
        return Err(Error::Domain(format!("t = {t} must be nonnegative")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    check_horizon(k, t)?;
    let v = match k {
        KernelSpec::Logarithmic { beta } => {
            // With x = exp(-z) the squared kernel times dx is β z^{-β-1} dz; z = L/w maps
            // [L, ∞) onto (0, 1].
            let l = -t.ln();
            quad::integrate(
                |w: f64| {
                    if w <= 0.0 {
                        return 0.0;
                    }
                    let z = l / w;
                    beta * z.powf(-beta - 1.0) * l / (w * w)
                },
                0.0,
                1.0,
                QUAD_TOL,
            )
        }
        _ => {
            let (go, gd) = k.exponents();
            quad::integrate_endpoints(
                |s, x| {
                    let v = k.kval(s, x);
                    v * v
                },
                t,
                2.0 * go,
                2.0 * gd,
                QUAD_TOL,
            )
        }
    };
    if !v.is_finite() || v > DIVERGENCE_THRESHOLD {
        return Err(Error::Admissibility(format!("slice variance at t={t} diverges ({v})")));
    }
    Ok(v)
}

/// `∫_0^{min(t,s)} K(t, u) K(s, u) du`.
pub fn covariance(k: &KernelSpec, t: f64, s: f64) -> Result<f64> {
    let (hi, lo) = if t >= s { (t, s) } else { (s, t) };
    if lo <= 0.0 {
        return Ok(0.0);
    }
    if hi == lo {
        return slice_variance(k, hi);
    }
    k.validate()?;
    check_horizon(k, hi)?;
    let gap = hi - lo;
    let (go, gd) = k.exponents();
    let v = quad::integrate_endpoints(
        |u, x| k.kval(u, gap + x) * k.kval(u, x),
        lo,
        2.0 * go,
        gd,
        QUAD_TOL,
    );
    Ok(v)
}

/// Cell integrals of a kernel on a uniform grid.
#[derive(Clone, Debug)]
pub struct DiscreteKernel {
    n: usize,
    dt: f64,
    storage: Storage,
}

#[derive(Clone, Debug)]
enum Storage {
    /// Constant weight `dt`: cumulative sums suffice.
    Unit,
    /// `w[i - j - 1]`.
    Toeplitz(Vec<f64>),
    /// Row-major lower triangle, row `i` starting at `i (i - 1) / 2`.
    Dense(Vec<f64>),
}

impl DiscreteKernel {
    pub fn new(k: &KernelSpec, grid: &TimeGrid) -> Result<Self> {
        k.validate()?;
        let n = grid.n_steps;
        let dt = grid.dt();
        check_horizon(k, grid.horizon)?;
        let storage = match k {
            KernelSpec::Brownian => Storage::Unit,
            KernelSpec::RiemannLiouville { hurst } => {
                let p = hurst + 0.5;
                let c = dt.powf(p) / gamma(p + 1.0);
                Storage::Toeplitz(
                    (0..n).map(|m| c * ((m as f64 + 1.0).powf(p) - (m as f64).powf(p))).collect(),
                )
            }
            KernelSpec::Logarithmic { .. } => {
                let (_, gd) = k.exponents();
                Storage::Toeplitz(
                    (0..n)
                        .map(|m| {
                            let lo = m as f64 * dt;
                            let ga = if m == 0 { gd } else { 0.0 };
                            quad::integrate_endpoints(|a, _| k.kval(0.0, lo + a), dt, ga, 0.0, QUAD_TOL)
                        })
                        .collect(),
                )
            }
            _ => {
                let (go, gd) = k.exponents();
                let mut w = Vec::with_capacity(n * (n + 1) / 2);
                for i in 1..=n {
                    let ti = grid.node(i);
                    for j in 0..i {
                        let tj = grid.node(j);
                        let lag = ti - grid.node(j + 1);
                        let lag = if j + 1 == i { 0.0 } else { lag };
                        let ga = if j == 0 { go } else { 0.0 };
                        let gb = if j + 1 == i { gd } else { 0.0 };
                        w.push(quad::integrate_endpoints(
                            |a, b| k.kval(tj + a, lag + b),
                            dt,
                            ga,
                            gb,
                            QUAD_TOL,
                        ));
                    }
                }
                Storage::Dense(w)
            }
        };
        let dk = DiscreteKernel { n, dt, storage };
        if let Storage::Dense(w) | Storage::Toeplitz(w) = &dk.storage {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Admissibility(format!("kernel {k:?} has non-integrable cells")));
            }
        }
        Ok(dk)
    }

    pub fn n_steps(&self) -> usize {
        self.n
    }

    /// `∫_{t_j}^{t_{j+1}} K(t_i, s) ds`, zero for `j >= i`.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if j >= i {
            return 0.0;
        }
        match &self.storage {
            Storage::Unit => self.dt,
            Storage::Toeplitz(w) => w[i - j - 1],
            Storage::Dense(w) => w[i * (i - 1) / 2 + j],
        }
    }

    /// `t_i ↦ Σ_j W[i][j] c_j` for per-cell values `c` (length `n`).
    pub fn apply_cells(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n + 1];
        self.apply_cells_into(c, 1, 0, &mut out);
        out
    }

    /// Strided variant of [`apply_cells`](Self::apply_cells): reads
    /// `c[j * stride + offset]` and writes one value per node.
    pub fn apply_cells_into(&self, c: &[f64], stride: usize, offset: usize, out: &mut [f64]) {
        let n = self.n;
        out[0] = 0.0;
        match &self.storage {
            Storage::Unit => {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += self.dt * c[j * stride + offset];
                    out[j + 1] = acc;
                }
            }
            _ => {
                for i in 1..=n {
                    let mut acc = 0.0;
                    for j in 0..i {
                        acc += self.weight(i, j) * c[j * stride + offset];
                    }
                    out[i] = acc;
                }
            }
        }
    }

    /// Adjoint of [`apply_cells`](Self::apply_cells): `c̄_j = Σ_{i>j} W[i][j] ȳ_i`.
    pub fn adjoint_cells(&self, ybar: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        match &self.storage {
            Storage::Unit => {
                let mut acc = 0.0;
                for j in (0..n).rev() {
                    acc += ybar[j + 1];
                    out[j] = self.dt * acc;
                }
            }
            _ => {
                for i in 1..=n {
                    let y = ybar[i];
                    if y == 0.0 {
                        continue;
                    }
                    for (j, o) in out.iter_mut().enumerate().take(i) {
                        *o += self.weight(i, j) * y;
                    }
                }
            }
        }
        out
    }

    /// Applies the operator to nodal values using cell averages.
    pub fn apply_nodal(&self, f: &[f64]) -> Vec<f64> {
        let cells: Vec<f64> = (0..self.n).map(|j| 0.5 * (f[j] + f[j + 1])).collect();
        self.apply_cells(&cells)
    }
}

/// `t ↦ ∫_0^t K(t, s) f(s) ds` at every grid node for nodal samples `f`.
pub fn hs_apply(k: &KernelSpec, f: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    if f.len() != grid.n_steps + 1 {
        return Err(Error::Dimension(format!(
            "sampled function has {} values, grid has {} nodes",
            f.len(),
            grid.n_steps + 1
        )));
    }
    Ok(DiscreteKernel::new(k, grid)?.apply_nodal(f))
}

/// `sup_{|t-s| <= tau} ∫ (K(t,u) - K(s,u))^2 du` over grid node pairs.
pub fn l2_modulus(k: &KernelSpec, tau: f64, grid: &TimeGrid) -> Result<f64> {
    k.validate()?;
    if !(0.0..=grid.horizon * (1.0 + 1e-12)).contains(&tau) {
        return Err(Error::Domain(format!("tau = {tau} outside [0, T]")));
    }
    let dt = grid.dt();
    let max_lag = ((tau / dt) * (1.0 + 1e-12)).floor() as usize;
    if max_lag == 0 {
        return Ok(0.0);
    }
    let n = grid.n_steps;
    let var: Vec<f64> = (0..=n).map(|i| slice_variance(k, grid.node(i))).collect::<Result<_>>()?;
    let mut best: f64 = 0.0;
    for i in 1..=n {
        for lag in 1..=max_lag.min(i) {
            let j = i - lag;
            let cross = covariance(k, grid.node(i), grid.node(j))?;
            best = best.max(var[i] + var[j] - 2.0 * cross);
        }
    }
    Ok(best.max(0.0))
}
