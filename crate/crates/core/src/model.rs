//! Stochastic volatility model description and its compiled form.
//!
//! Log-prices follow `dX = b(t, B̂) dt - ½ ε diag(σσ') dt + √ε σ(t, B̂)(C̄ dW + C dB)`
//! where `B̂` is the volatility process of [`VolProcessSpec`] driven by `B`, and
//! `C̄` is the symmetric square root of `Id - C'C`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::func::ScalarFn;
use crate::paths::TimeGrid;
use crate::volmap::{VolMap, VolProcessSpec};

pub const DEFAULT_STEPS: usize = 200;

fn default_steps() -> usize {
    DEFAULT_STEPS
}

/// `e^{time_rate · t} · base(u[component])`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateFn {
    pub base: ScalarFn,
    #[serde(default)]
    pub component: usize,
    #[serde(default)]
    pub time_rate: f64,
}

impl StateFn {
    pub fn new(base: ScalarFn) -> Self {
        StateFn { base, component: 0, time_rate: 0.0 }
    }

    #[inline]
    pub fn eval(&self, t: f64, u: &[f64]) -> f64 {
        let g = if self.time_rate == 0.0 { 1.0 } else { (self.time_rate * t).exp() };
        g * self.base.eval(u[self.component])
    }

    /// Partial derivative in `u[k]`.
    #[inline]
    pub fn deriv(&self, t: f64, u: &[f64], k: usize) -> f64 {
        if k != self.component {
            return 0.0;
        }
        let g = if self.time_rate == 0.0 { 1.0 } else { (self.time_rate * t).exp() };
        g * self.base.deriv(u[self.component])
    }
}

/// Matrix-valued closure `(t, u) ↦ σ(t, u)` in row-major order.
#[derive(Clone)]
pub struct MatrixFn(pub Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>);

impl fmt::Debug for MatrixFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MatrixFn(..)")
    }
}

/// Volatility map `σ: [0,T] × R^d → R^{m×m}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum VolatilitySpec {
    /// One asset.
    Scalar(StateFn),
    Diagonal { entries: Vec<StateFn> },
    /// `σ = ξ(t, u) · O · C̄⁻¹` with a constant orthogonal `O` (identity when omitted).
    OrthogonalScalar {
        xi: StateFn,
        #[serde(default)]
        rotation: Option<Vec<Vec<f64>>>,
    },
    #[serde(skip)]
    Custom(MatrixFn),
}

/// Drift `b: [0,T] × R^d → R^m`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum DriftSpec {
    /// `b ≡ r` in every component.
    #[default]
    Rate,
    Constant { values: Vec<f64> },
    StateFns { entries: Vec<StateFn> },
    #[serde(skip)]
    Custom(MatrixFn),
}

/// Full model description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    pub m: usize,
    pub vol: VolProcessSpec,
    #[serde(default)]
    pub drift: DriftSpec,
    pub volatility: VolatilitySpec,
    /// `C`, `m × m`, Frobenius norm below 1.
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
    /// Shorthand for `C = [[rho]]` when `m = 1`.
    #[serde(default)]
    pub rho: Option<f64>,
    pub s0: Vec<f64>,
    #[serde(default)]
    pub rate: f64,
    /// Exponential integrability of `∫σ²` is asserted by the model author.
    #[serde(default)]
    pub assumption_b: bool,
    #[serde(default)]
    pub sigma_may_vanish: bool,
}

impl ModelSpec {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.n_steps)
    }

    pub fn with_steps(mut self, n: usize) -> Self {
        self.n_steps = n;
        self
    }

    pub fn x0(&self) -> Vec<f64> {
        self.s0.iter().map(|s| s.ln()).collect()
    }

    /// `C` as a row-major `m × m` array.
    pub fn c_matrix(&self) -> Result<Vec<f64>> {
        let m = self.m;
        match (&self.correlation, self.rho) {
            (Some(_), Some(_)) => Err(Error::InvalidModel("give either correlation or rho, not both".into())),
            (Some(c), None) => {
                if c.len() != m || c.iter().any(|r| r.len() != m) {
                    return Err(Error::InvalidModel("correlation must be m × m".into()));
                }
                Ok(c.iter().flatten().copied().collect())
            }
            (None, Some(r)) => {
                if m != 1 {
                    return Err(Error::InvalidModel("rho is only meaningful for m = 1".into()));
                }
                Ok(vec![r])
            }
            (None, None) => Ok(vec![0.0; m * m]),
        }
    }

    /// Correlation `ρ` for `m = 1`.
    pub fn rho(&self) -> f64 {
        self.c_matrix().map(|c| c[0]).unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        self.grid()?;
        if self.m == 0 {
            return bad("m must be positive".into());
        }
        self.vol.validate()?;
        if self.vol.m != self.m {
            return bad(format!("volatility process is driven by {} factors, m = {}", self.vol.m, self.m));
        }
        if self.s0.len() != self.m || self.s0.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("s0 needs m positive entries".into());
        }
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return bad("interest rate must be nonnegative".into());
        }
        let d = self.vol.d;
        let check_fn = |f: &StateFn| -> Result<()> {
            if f.component >= d {
                return Err(Error::InvalidModel(format!("state function reads component {} of {d}", f.component)));
            }
            Ok(())
        };
        match &self.volatility {
            VolatilitySpec::Scalar(f) => {
                if self.m != 1 {
                    return bad("scalar volatility requires m = 1".into());
                }
                check_fn(f)?;
            }
            VolatilitySpec::Diagonal { entries } => {
                if entries.len() != self.m {
                    return bad("diagonal volatility needs m entries".into());
                }
                entries.iter().try_for_each(check_fn)?;
            }
            VolatilitySpec::OrthogonalScalar { xi, rotation } => {
                check_fn(xi)?;
                if let Some(o) = rotation {
                    if o.len() != self.m || o.iter().any(|r| r.len() != self.m) {
                        return bad("rotation must be m × m".into());
                    }
                    let om = DMatrix::from_row_iterator(self.m, self.m, o.iter().flatten().copied());
                    let err = (om.transpose() * &om - DMatrix::identity(self.m, self.m)).amax();
                    if err > 1e-10 {
                        return bad(format!("rotation is not orthogonal (error {err:e})"));
                    }
                }
            }
            VolatilitySpec::Custom(_) => {}
        }
        match &self.drift {
            DriftSpec::Constant { values } if values.len() != self.m => {
                return bad("constant drift needs m values".into())
            }
            DriftSpec::StateFns { entries } => {
                if entries.len() != self.m {
                    return bad("drift needs m entries".into());
                }
                entries.iter().try_for_each(check_fn)?;
            }
            _ => {}
        }
        let c = self.c_matrix()?;
        let fro = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(fro < 1.0) {
            return bad(format!("correlation matrix has Frobenius norm {fro} >= 1"));
        }
        Ok(())
    }

    /// True when `b` does not depend on the volatility state.
    pub fn drift_is_constant(&self) -> bool {
        match &self.drift {
            DriftSpec::Rate | DriftSpec::Constant { .. } => true,
            DriftSpec::StateFns { entries } => entries.iter().all(|e| e.base.is_constant() && e.time_rate == 0.0),
            DriftSpec::Custom(_) => false,
        }
    }
}

fn sym_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = a.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
        return Err(Error::InvalidModel("Id - C'C is not positive definite".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.sqrt()));
    let s = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    let err = (&s * &s - a).amax();
    if err > 1e-10 {
        return Err(Error::InvalidModel(format!("square root of Id - C'C inaccurate ({err:e})")));
    }
    Ok(s)
}

fn to_vec(a: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = a.shape();
    (0..r).flat_map(|i| (0..c).map(move |j| a[(i, j)])).collect()
}

/// A [`ModelSpec`] compiled on a grid.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub grid: TimeGrid,
    pub vol: VolMap,
    pub c: Vec<f64>,
    pub cbar: Vec<f64>,
    pub cbar_inv: Vec<f64>,
    /// `O C̄⁻¹` for the orthogonal-scalar form.
    o_cbar_inv: Vec<f64>,
}

impl Model {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        Model::on_grid(spec, spec.grid()?)
    }

    pub fn on_grid(spec: &ModelSpec, grid: TimeGrid) -> Result<Self> {
        spec.validate()?;
        if (grid.horizon - spec.horizon).abs() > 1e-12 * spec.horizon {
            return Err(Error::Dimension(format!(
                "grid horizon {} differs from model horizon {}",
                grid.horizon, spec.horizon
            )));
        }
        let m = spec.m;
        let c = spec.c_matrix()?;
        let cm = DMatrix::from_row_slice(m, m, &c);
        let a = DMatrix::identity(m, m) - cm.transpose() * &cm;
        let cbar = sym_sqrt(&a)?;
        let cbar_inv = cbar
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidModel("C̄ is singular".into()))?;
        let o = match &spec.volatility {
            VolatilitySpec::OrthogonalScalar { rotation: Some(o), .. } => {
                DMatrix::from_row_iterator(m, m, o.iter().flatten().copied())
            }
            _ => DMatrix::identity(m, m),
        };
        let o_cbar_inv = to_vec(&(o * &cbar_inv));
        Ok(Model {
            spec: spec.clone(),
            grid,
            vol: VolMap::new(&spec.vol, grid)?,
            c,
            cbar: to_vec(&cbar),
            cbar_inv: to_vec(&cbar_inv),
            o_cbar_inv,
        })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.spec.m
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.spec.vol.d
    }

    /// `σ(t, u)` into `out` (`m × m`, row-major).
    pub fn sigma_into(&self, t: f64, u: &[f64], out: &mut [f64]) {
        let m = self.m();
        match &self.spec.volatility {
            VolatilitySpec::Scalar(f) => out[0] = f.eval(t, u),
            VolatilitySpec::Diagonal { entries } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for (i, e) in entries.iter().enumerate() {
                    out[i * m + i] = e.eval(t, u);
                }
            }
            VolatilitySpec::OrthogonalScalar { xi, .. } => {
                let x = xi.eval(t, u);
                for (o, a) in out.iter_mut().zip(&self.o_cbar_inv) {
                    *o = x * a;
                }
            }
            VolatilitySpec::Custom(f) => out.copy_from_slice(&(f.0)(t, u)),
        }
    }

    /// `∂σ/∂u_k` into `out`.
    pub fn sigma_du_into(&self, t: f64, u: &[f64], k: usize, out: &mut [f64]) {
        let m = self.m();
        match &self.spec.volatility {
            VolatilitySpec::Scalar(f) => out[0] = f.deriv(t, u, k),
            VolatilitySpec::Diagonal { entries } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for (i, e) in entries.iter().enumerate() {
                    out[i * m + i] = e.deriv(t, u, k);
                }
            }
            VolatilitySpec::OrthogonalScalar { xi, .. } => {
                let x = xi.deriv(t, u, k);
                for (o, a) in out.iter_mut().zip(&self.o_cbar_inv) {
                    *o = x * a;
                }
            }
            VolatilitySpec::Custom(f) => fd_partial(&f.0, t, u, k, out),
        }
    }

    pub fn drift_into(&self, t: f64, u: &[f64], out: &mut [f64]) {
        match &self.spec.drift {
            DriftSpec::Rate => out.iter_mut().for_each(|v| *v = self.spec.rate),
            DriftSpec::Constant { values } => out.copy_from_slice(values),
            DriftSpec::StateFns { entries } => {
                for (o, e) in out.iter_mut().zip(entries) {
                    *o = e.eval(t, u);
                }
            }
            DriftSpec::Custom(f) => out.copy_from_slice(&(f.0)(t, u)),
        }
    }

    pub fn drift_du_into(&self, t: f64, u: &[f64], k: usize, out: &mut [f64]) {
        match &self.spec.drift {
            DriftSpec::Rate | DriftSpec::Constant { .. } => out.iter_mut().for_each(|v| *v = 0.0),
            DriftSpec::StateFns { entries } => {
                for (o, e) in out.iter_mut().zip(entries) {
                    *o = e.deriv(t, u, k);
                }
            }
            DriftSpec::Custom(f) => fd_partial(&f.0, t, u, k, out),
        }
    }

    /// Scalar factor `ξ` and the constant matrix `M` with `σ C ḟ = ξ M ḟ`, `Σ ξ² = ρ̄² Σ σ²`.
    pub fn terminal_form(&self) -> Result<TerminalForm> {
        let m = self.m();
        if m == 1 {
            let rho = self.c[0];
            let rbar = self.cbar[0];
            return Ok(TerminalForm { kind: TerminalKind::OneDim { rbar }, mmat: vec![rho / rbar] });
        }
        match &self.spec.volatility {
            VolatilitySpec::OrthogonalScalar { xi, .. } => {
                let oc = DMatrix::from_row_slice(m, m, &self.o_cbar_inv);
                let cm = DMatrix::from_row_slice(m, m, &self.c);
                Ok(TerminalForm { kind: TerminalKind::Orthogonal(xi.clone()), mmat: to_vec(&(oc * cm)) })
            }
            _ => Err(Error::UnsupportedForm(
                "terminal rate for m > 1 needs the orthogonal-scalar volatility form".into(),
            )),
        }
    }
}

fn fd_partial(f: &Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>, t: f64, u: &[f64], k: usize, out: &mut [f64]) {
    let h = 1e-6 * u[k].abs().max(1.0);
    let mut up = u.to_vec();
    up[k] += h;
    let mut dn = u.to_vec();
    dn[k] -= h;
    let a = f(t, &up);
    let b = f(t, &dn);
    for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(&b)) {
        *o = (x - y) / (2.0 * h);
    }
}

#[derive(Clone, Debug)]
pub enum TerminalKind {
    OneDim { rbar: f64 },
    Orthogonal(StateFn),
}

#[derive(Clone, Debug)]
pub struct TerminalForm {
    pub kind: TerminalKind,
    /// `M`, `m × m` row-major.
    pub mmat: Vec<f64>,
}

impl TerminalForm {
    pub fn xi(&self, model: &Model, t: f64, u: &[f64]) -> f64 {
        match &self.kind {
            TerminalKind::OneDim { rbar } => {
                let mut s = [0.0];
                model.sigma_into(t, u, &mut s);
                rbar * s[0]
            }
            TerminalKind::Orthogonal(xi) => xi.eval(t, u),
        }
    }

    pub fn xi_du(&self, model: &Model, t: f64, u: &[f64], k: usize) -> f64 {
        match &self.kind {
            TerminalKind::OneDim { rbar } => {
                let mut s = [0.0];
                model.sigma_du_into(t, u, k, &mut s);
                rbar * s[0]
            }
            TerminalKind::Orthogonal(xi) => xi.deriv(t, u, k),
        }
    }
}
