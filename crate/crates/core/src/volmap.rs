//! Controlled skeleton of the volatility process.
//!
//! A control `f` drives three stages: the auxiliary ODE
//! `ψ' = b̄(ψ) + σ̄(ψ) ḟ`, the Volterra equation producing `η = Γ_y f`, and
//! the output map `G` (reflection at zero or the identity). The composite
//! `f ↦ f̂ = G(Γ_y f)` is the hat map.
//!
//! All stages are discretized on the master grid with left-endpoint
//! coefficients; [`VolMap::backward`] is the exact adjoint of
//! [`VolMap::forward`] and supplies gradients of any functional of `f̂`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::func::ScalarFn;
use crate::kernels::{DiscreteKernel, KernelSpec};
use crate::paths::{reflect_values, Control, PathFn, TimeGrid};

const BLOW_UP: f64 = 1e9;
const PICARD_TOL: f64 = 1e-10;
const PICARD_MAX_ITER: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Mixed,
    FractionalNongaussian,
    VolterraSde,
    ReflectedDiffusion,
    Toy,
}

/// One component of the auxiliary process `V`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuxSpec {
    pub v0: f64,
    pub drift: ScalarFn,
    pub dispersion: ScalarFn,
    /// Control component driving this equation.
    #[serde(default)]
    pub driver: usize,
    /// Evaluate both coefficients at `max(V, 0)`.
    #[serde(default)]
    pub full_truncation: bool,
}

/// `U_i(v) = map(v[component])`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UMap {
    pub map: ScalarFn,
    #[serde(default)]
    pub component: usize,
}

/// `η(t) = y + ∫ Ka(t,s) A(η(s)) ds + ∫ Kc(t,s) C(η(s)) ḟ_driver(s) ds`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolterraComponent {
    pub drift_kernel: KernelSpec,
    pub drift_fn: ScalarFn,
    pub noise_kernel: KernelSpec,
    pub noise_fn: ScalarFn,
    #[serde(default)]
    pub driver: usize,
}

/// Description of the volatility process `B̂` and its skeleton.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolProcessSpec {
    pub family: Family,
    pub d: usize,
    pub m: usize,
    pub y: Vec<f64>,
    /// `K_ij`, `d × m`; `null` entries are zero kernels.
    #[serde(default)]
    pub noise_kernels: Vec<Vec<Option<KernelSpec>>>,
    /// `K_i`, one per output component.
    #[serde(default)]
    pub drift_kernels: Vec<Option<KernelSpec>>,
    #[serde(default)]
    pub u_maps: Vec<Option<UMap>>,
    #[serde(default)]
    pub aux: Vec<AuxSpec>,
    #[serde(default)]
    pub volterra: Vec<VolterraComponent>,
    #[serde(default)]
    pub reflect: bool,
}

impl VolProcessSpec {
    /// `f̂ = f` in one dimension.
    pub fn toy() -> Self {
        VolProcessSpec {
            family: Family::Toy,
            d: 1,
            m: 1,
            y: vec![0.0],
            noise_kernels: vec![],
            drift_kernels: vec![],
            u_maps: vec![],
            aux: vec![],
            volterra: vec![],
            reflect: false,
        }
    }

    /// `η_i = y_i + Σ_j ∫ K_ij ḟ_j`.
    pub fn gaussian(y: Vec<f64>, kernels: Vec<Vec<Option<KernelSpec>>>) -> Self {
        let d = y.len();
        let m = kernels.first().map_or(0, |r| r.len());
        VolProcessSpec {
            family: Family::Gaussian,
            d,
            m,
            y,
            noise_kernels: kernels,
            drift_kernels: vec![],
            u_maps: vec![],
            aux: vec![],
            volterra: vec![],
            reflect: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if self.d == 0 || self.m == 0 {
            return bad("volatility process needs d >= 1 and m >= 1".into());
        }
        if self.y.len() != self.d {
            return bad(format!("y has {} entries, d = {}", self.y.len(), self.d));
        }
        if self.reflect && self.d != 1 {
            return Err(Error::UnsupportedDomain("reflection requires d = 1".into()));
        }
        let k = self.aux.len();
        for (i, a) in self.aux.iter().enumerate() {
            if a.driver >= self.m {
                return bad(format!("aux component {i} driven by {} but m = {}", a.driver, self.m));
            }
        }
        match self.family {
            Family::Toy => {
                if self.d != 1 || self.m != 1 || self.y[0] != 0.0 {
                    return bad("toy family has d = m = 1 and y = 0".into());
                }
            }
            Family::Gaussian | Family::Mixed | Family::FractionalNongaussian => {
                if !self.noise_kernels.is_empty()
                    && (self.noise_kernels.len() != self.d
                        || self.noise_kernels.iter().any(|r| r.len() != self.m))
                {
                    return bad("noise_kernels must be d × m".into());
                }
                if !self.drift_kernels.is_empty() && self.drift_kernels.len() != self.d {
                    return bad("drift_kernels must have d entries".into());
                }
                if !self.u_maps.is_empty() && self.u_maps.len() != self.d {
                    return bad("u_maps must have d entries".into());
                }
                for k_spec in self.noise_kernels.iter().flatten().flatten().chain(self.drift_kernels.iter().flatten()) {
                    k_spec.validate()?;
                }
                for i in 0..self.d {
                    let has_k = self.drift_kernels.get(i).is_some_and(|k| k.is_some());
                    let u = self.u_maps.get(i).and_then(|u| u.as_ref());
                    if has_k != u.is_some() {
                        return bad(format!("component {i}: drift kernel and U map must be given together"));
                    }
                    if let Some(u) = u {
                        if u.component >= k {
                            return bad(format!("U map {i} reads aux component {} of {k}", u.component));
                        }
                    }
                }
                let has_drift = self.u_maps.iter().any(|u| u.as_ref().is_some_and(|u| !u.map.is_zero()));
                let has_noise = self.noise_kernels.iter().flatten().any(|k| k.is_some());
                if self.family == Family::Gaussian && has_drift {
                    return bad("gaussian family requires U ≡ 0".into());
                }
                if self.family == Family::FractionalNongaussian && has_noise {
                    return bad("fractional_nongaussian family requires all K_ij ≡ 0".into());
                }
            }
            Family::VolterraSde => {
                if self.volterra.len() != self.d {
                    return bad("volterra_sde needs one coefficient set per component".into());
                }
                for v in &self.volterra {
                    v.drift_kernel.validate()?;
                    v.noise_kernel.validate()?;
                    if v.driver >= self.m {
                        return bad("volterra driver index out of range".into());
                    }
                }
            }
            Family::ReflectedDiffusion => {
                if self.d != 1 || self.m != 1 || k != 1 {
                    return bad("reflected_diffusion has d = m = 1 and one coefficient set in aux".into());
                }
                if self.y[0] < 0.0 {
                    return bad("reflected diffusion must start in [0, ∞)".into());
                }
            }
        }
        Ok(())
    }

    /// True when `f̂` does not depend on the control.
    pub fn is_trivial(&self) -> bool {
        match self.family {
            Family::Gaussian | Family::FractionalNongaussian | Family::Mixed => {
                !self.noise_kernels.iter().flatten().any(|k| k.is_some())
                    && !self.aux.iter().any(|a| !a.dispersion.is_zero())
            }
            _ => false,
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `(n+1) × k`
    pub psi: Vec<f64>,
    /// `(n+1) × d`
    pub eta: Vec<f64>,
    /// `(n+1) × d`
    pub fhat: Vec<f64>,
    argmin: Vec<Option<usize>>,
}

/// How the discrete Volterra equation is solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolterraSolver {
    Picard,
    /// Forward substitution; the discrete equation is explicit in the left-point rule.
    Forward,
}

/// A [`VolProcessSpec`] compiled against a grid (kernel cell integrals cached).
#[derive(Clone, Debug)]
pub struct VolMap {
    spec: VolProcessSpec,
    grid: TimeGrid,
    noise: Vec<Vec<Option<DiscreteKernel>>>,
    drift: Vec<Option<DiscreteKernel>>,
    volterra: Vec<(DiscreteKernel, DiscreteKernel)>,
    solver: VolterraSolver,
}

impl VolMap {
    pub fn new(spec: &VolProcessSpec, grid: TimeGrid) -> Result<Self> {
        spec.validate()?;
        let mut noise = Vec::new();
        let mut drift = Vec::new();
        let mut volterra = Vec::new();
        match spec.family {
            Family::Toy => {
                noise.push(vec![Some(DiscreteKernel::new(&KernelSpec::Brownian, &grid)?)]);
                drift.push(None);
            }
            Family::Gaussian | Family::Mixed | Family::FractionalNongaussian => {
                for i in 0..spec.d {
                    let row = (0..spec.m)
                        .map(|c| match spec.noise_kernels.get(i).and_then(|r| r[c].as_ref()) {
                            Some(k) => DiscreteKernel::new(k, &grid).map(Some),
                            None => Ok(None),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    noise.push(row);
                    drift.push(match spec.drift_kernels.get(i).and_then(|k| k.as_ref()) {
                        Some(k) => Some(DiscreteKernel::new(k, &grid)?),
                        None => None,
                    });
                }
            }
            Family::VolterraSde => {
                for v in &spec.volterra {
                    volterra.push((
                        DiscreteKernel::new(&v.drift_kernel, &grid)?,
                        DiscreteKernel::new(&v.noise_kernel, &grid)?,
                    ));
                }
            }
            Family::ReflectedDiffusion => {}
        }
        Ok(VolMap { spec: spec.clone(), grid, noise, drift, volterra, solver: VolterraSolver::Picard })
    }

    pub fn with_solver(mut self, solver: VolterraSolver) -> Self {
        self.solver = solver;
        self
    }

    pub fn spec(&self) -> &VolProcessSpec {
        &self.spec
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    fn check_control(&self, dot: &[f64]) -> Result<()> {
        if dot.len() != self.grid.n_steps * self.spec.m {
            return Err(Error::Dimension(format!(
                "control has {} slopes, expected {}",
                dot.len(),
                self.grid.n_steps * self.spec.m
            )));
        }
        Ok(())
    }

    /// Explicit Euler solution of the auxiliary ODE.
    fn psi(&self, dot: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.n_steps;
        let dt = self.grid.dt();
        let k = self.spec.aux.len();
        let m = self.spec.m;
        let mut psi = vec![0.0; (n + 1) * k];
        for (c, a) in self.spec.aux.iter().enumerate() {
            psi[c] = a.v0;
        }
        for j in 0..n {
            for (c, a) in self.spec.aux.iter().enumerate() {
                let x = psi[j * k + c];
                let xe = if a.full_truncation { x.max(0.0) } else { x };
                let next = x + a.drift.eval(xe) * dt + a.dispersion.eval(xe) * dot[j * m + a.driver] * dt;
                if !next.is_finite() || next.abs() > BLOW_UP {
                    return Err(Error::Divergence(format!(
                        "auxiliary component {c} exceeded {BLOW_UP:e} at t = {}",
                        self.grid.node(j + 1)
                    )));
                }
                psi[(j + 1) * k + c] = next;
            }
        }
        Ok(psi)
    }

    fn mixed_eta(&self, dot: &[f64], psi: &[f64]) -> Vec<f64> {
        let n = self.grid.n_steps;
        let d = self.spec.d;
        let m = self.spec.m;
        let k = self.spec.aux.len();
        let mut eta = vec![0.0; (n + 1) * d];
        let mut buf = vec![0.0; n + 1];
        for i in 0..d {
            let mut col = vec![self.spec.y[i]; n + 1];
            for (c, kern) in self.noise[i].iter().enumerate() {
                if let Some(kern) = kern {
                    kern.apply_cells_into(dot, m, c, &mut buf);
                    for (o, b) in col.iter_mut().zip(&buf) {
                        *o += b;
                    }
                }
            }
            if let (Some(kern), Some(Some(u))) = (&self.drift[i], self.spec.u_maps.get(i)) {
                let cells: Vec<f64> = (0..n)
                    .map(|j| 0.5 * (u.map.eval(psi[j * k + u.component]) + u.map.eval(psi[(j + 1) * k + u.component])))
                    .collect();
                kern.apply_cells_into(&cells, 1, 0, &mut buf);
                for (o, b) in col.iter_mut().zip(&buf) {
                    *o += b;
                }
            }
            for j in 0..=n {
                eta[j * d + i] = col[j];
            }
        }
        eta
    }

    fn volterra_rhs(&self, dot: &[f64], eta: &[f64], i: usize, row: usize) -> f64 {
        let d = self.spec.d;
        let m = self.spec.m;
        let v = &self.spec.volterra[i];
        let (ka, kc) = &self.volterra[i];
        let mut acc = self.spec.y[i];
        for j in 0..row {
            let x = eta[j * d + i];
            acc += ka.weight(row, j) * v.drift_fn.eval(x) + kc.weight(row, j) * v.noise_fn.eval(x) * dot[j * m + v.driver];
        }
        acc
    }

    fn volterra_forward(&self, dot: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.n_steps;
        let d = self.spec.d;
        let mut eta = vec![0.0; (n + 1) * d];
        eta[..d].copy_from_slice(&self.spec.y);
        for row in 1..=n {
            for i in 0..d {
                let v = self.volterra_rhs(dot, &eta, i, row);
                if !v.is_finite() || v.abs() > BLOW_UP {
                    return Err(Error::Divergence(format!("Volterra solution exceeded {BLOW_UP:e}")));
                }
                eta[row * d + i] = v;
            }
        }
        Ok(eta)
    }

    fn volterra_picard(&self, dot: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.n_steps;
        let d = self.spec.d;
        let mut eta: Vec<f64> = (0..=n).flat_map(|_| self.spec.y.iter().copied()).collect();
        let mut residual = f64::INFINITY;
        for _ in 0..PICARD_MAX_ITER {
            let mut next = eta.clone();
            for row in 1..=n {
                for i in 0..d {
                    next[row * d + i] = self.volterra_rhs(dot, &eta, i, row);
                }
            }
            residual = next.iter().zip(&eta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if !residual.is_finite() || next.iter().any(|v| v.abs() > BLOW_UP) {
                return Err(Error::Divergence(format!("Picard iterates exceeded {BLOW_UP:e}")));
            }
            eta = next;
            if residual < PICARD_TOL {
                return Ok(eta);
            }
        }
        Err(Error::NonConvergence { iterations: PICARD_MAX_ITER, residual })
    }

    fn reflected_diffusion(&self, dot: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<Option<usize>>)> {
        let n = self.grid.n_steps;
        let dt = self.grid.dt();
        let a = &self.spec.aux[0];
        let mut eta = vec![0.0; n + 1];
        let mut z = vec![0.0; n + 1];
        let mut arg = vec![None; n + 1];
        eta[0] = self.spec.y[0];
        let mut best: Option<usize> = None;
        for j in 0..=n {
            if eta[j] < 0.0 && best.is_none_or(|b| eta[j] < eta[b]) {
                best = Some(j);
            }
            arg[j] = best;
            z[j] = match best {
                Some(b) => eta[j] - eta[b],
                None => eta[j],
            };
            if j < n {
                let next = eta[j] + a.drift.eval(z[j]) * dt + a.dispersion.eval(z[j]) * dot[j] * dt;
                if !next.is_finite() || next.abs() > BLOW_UP {
                    return Err(Error::Divergence(format!("reflected diffusion exceeded {BLOW_UP:e}")));
                }
                eta[j + 1] = next;
            }
        }
        Ok((eta, z, arg))
    }

    /// Runs all stages for the slopes `dot` (`n × m`, row-major).
    pub fn forward(&self, dot: &[f64]) -> Result<Trace> {
        self.check_control(dot)?;
        let (psi, eta) = match self.spec.family {
            Family::VolterraSde => {
                let eta = match self.solver {
                    VolterraSolver::Picard => self.volterra_picard(dot)?,
                    VolterraSolver::Forward => self.volterra_forward(dot)?,
                };
                (Vec::new(), eta)
            }
            Family::ReflectedDiffusion => {
                let (eta, z, argmin) = self.reflected_diffusion(dot)?;
                return Ok(Trace { psi: Vec::new(), eta, fhat: z, argmin });
            }
            _ => {
                let psi = self.psi(dot)?;
                let eta = self.mixed_eta(dot, &psi);
                (psi, eta)
            }
        };
        if self.spec.reflect {
            let (fhat, argmin) = reflect_values(&eta);
            Ok(Trace { psi, eta, fhat, argmin })
        } else {
            Ok(Trace { psi, fhat: eta.clone(), eta, argmin: Vec::new() })
        }
    }

    /// Adjoint of [`forward`](Self::forward): maps `∂J/∂f̂` to `∂J/∂ḟ`.
    pub fn backward(&self, dot: &[f64], tr: &Trace, fhat_bar: &[f64]) -> Vec<f64> {
        let n = self.grid.n_steps;
        let dt = self.grid.dt();
        let d = self.spec.d;
        let m = self.spec.m;
        let mut dot_bar = vec![0.0; n * m];

        if self.spec.family == Family::ReflectedDiffusion {
            let a = &self.spec.aux[0];
            let z = &tr.fhat;
            let mut zbar = fhat_bar.to_vec();
            let mut ebar = vec![0.0; n + 1];
            for j in (0..=n).rev() {
                if j < n {
                    let up = ebar[j + 1];
                    zbar[j] += up * (a.drift.deriv(z[j]) + a.dispersion.deriv(z[j]) * dot[j]) * dt;
                    dot_bar[j] = up * a.dispersion.eval(z[j]) * dt;
                    ebar[j] += up;
                }
                ebar[j] += zbar[j];
                if let Some(b) = tr.argmin[j] {
                    ebar[b] -= zbar[j];
                }
            }
            return dot_bar;
        }

        let mut eta_bar = fhat_bar.to_vec();
        if self.spec.reflect {
            for (j, a) in tr.argmin.iter().enumerate() {
                if let Some(b) = a {
                    eta_bar[*b] -= fhat_bar[j];
                }
            }
        }

        if self.spec.family == Family::VolterraSde {
            for (i, v) in self.spec.volterra.iter().enumerate() {
                let (ka, kc) = &self.volterra[i];
                let mut ebar: Vec<f64> = (0..=n).map(|j| eta_bar[j * d + i]).collect();
                for j in (0..n).rev() {
                    let mut sa = 0.0;
                    let mut sc = 0.0;
                    for row in (j + 1)..=n {
                        sa += ebar[row] * ka.weight(row, j);
                        sc += ebar[row] * kc.weight(row, j);
                    }
                    let x = tr.eta[j * d + i];
                    let f = dot[j * m + v.driver];
                    ebar[j] += sa * v.drift_fn.deriv(x) + sc * v.noise_fn.deriv(x) * f;
                    dot_bar[j * m + v.driver] += sc * v.noise_fn.eval(x);
                }
            }
            return dot_bar;
        }

        let k = self.spec.aux.len();
        let mut psi_bar = vec![0.0; (n + 1) * k];
        for i in 0..d {
            let col: Vec<f64> = (0..=n).map(|j| eta_bar[j * d + i]).collect();
            for (c, kern) in self.noise[i].iter().enumerate() {
                if let Some(kern) = kern {
                    let adj = kern.adjoint_cells(&col);
                    for j in 0..n {
                        dot_bar[j * m + c] += adj[j];
                    }
                }
            }
            if let (Some(kern), Some(Some(u))) = (&self.drift[i], self.spec.u_maps.get(i)) {
                let adj = kern.adjoint_cells(&col);
                for j in 0..n {
                    let h = 0.5 * adj[j];
                    let c = u.component;
                    psi_bar[j * k + c] += h * u.map.deriv(tr.psi[j * k + c]);
                    psi_bar[(j + 1) * k + c] += h * u.map.deriv(tr.psi[(j + 1) * k + c]);
                }
            }
        }
        if k > 0 {
            for j in (0..n).rev() {
                for (c, a) in self.spec.aux.iter().enumerate() {
                    let up = psi_bar[(j + 1) * k + c];
                    if up == 0.0 {
                        continue;
                    }
                    let x = tr.psi[j * k + c];
                    let (xe, gate) = if a.full_truncation && x < 0.0 { (0.0, 0.0) } else { (x, 1.0) };
                    let f = dot[j * m + a.driver];
                    psi_bar[j * k + c] += up * (1.0 + gate * (a.drift.deriv(xe) + a.dispersion.deriv(xe) * f) * dt);
                    dot_bar[j * m + a.driver] += up * a.dispersion.eval(xe) * dt;
                }
            }
        }
        dot_bar
    }

    pub fn solve_psi(&self, f: &Control) -> Result<PathFn> {
        self.check_grid(f)?;
        if self.spec.aux.is_empty() {
            return Err(Error::Dimension("model has no auxiliary process".into()));
        }
        let k = self.spec.aux.len();
        Ok(PathFn { grid: self.grid, dim: k, values: self.psi(&f.dot)? })
    }

    pub fn gamma_y(&self, f: &Control) -> Result<PathFn> {
        self.check_grid(f)?;
        let tr = self.forward(&f.dot)?;
        Ok(PathFn { grid: self.grid, dim: self.spec.d, values: tr.eta })
    }

    pub fn hat_map(&self, f: &Control) -> Result<PathFn> {
        self.check_grid(f)?;
        let tr = self.forward(&f.dot)?;
        Ok(PathFn { grid: self.grid, dim: self.spec.d, values: tr.fhat })
    }

    fn check_grid(&self, f: &Control) -> Result<()> {
        if f.grid != self.grid || f.dim != self.spec.m {
            return Err(Error::Dimension(format!(
                "control on grid {:?} with dim {} does not match the model (grid {:?}, m = {})",
                f.grid, f.dim, self.grid, self.spec.m
            )));
        }
        Ok(())
    }
}

/// Solution `ψ_f` of the auxiliary ODE.
pub fn solve_psi(spec: &VolProcessSpec, f: &Control) -> Result<PathFn> {
    VolMap::new(spec, f.grid)?.solve_psi(f)
}

/// `η_f = Γ_y f`.
pub fn gamma_y(spec: &VolProcessSpec, f: &Control) -> Result<PathFn> {
    VolMap::new(spec, f.grid)?.gamma_y(f)
}

/// `f̂ = G(Γ_y f)`.
pub fn hat_map(spec: &VolProcessSpec, f: &Control) -> Result<PathFn> {
    VolMap::new(spec, f.grid)?.hat_map(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::hs_apply;
    use crate::paths::integrate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn cir(v0: f64, kappa: f64, theta: f64, eta: f64) -> AuxSpec {
        AuxSpec {
            v0,
            drift: ScalarFn::Affine { a: kappa * theta, b: -kappa },
            dispersion: ScalarFn::SqrtPositive { scale: eta },
            driver: 0,
            full_truncation: true,
        }
    }

    fn mixed_spec() -> VolProcessSpec {
        VolProcessSpec {
            family: Family::Mixed,
            d: 1,
            m: 1,
            y: vec![0.1],
            noise_kernels: vec![vec![Some(KernelSpec::RiemannLiouville { hurst: 0.4 })]],
            drift_kernels: vec![Some(KernelSpec::RiemannLiouville { hurst: 0.7 })],
            u_maps: vec![Some(UMap { map: ScalarFn::Square, component: 0 })],
            aux: vec![AuxSpec {
                v0: 0.5,
                drift: ScalarFn::Affine { a: 0.0, b: -1.0 },
                dispersion: ScalarFn::Constant { c: 0.4 },
                driver: 0,
                full_truncation: false,
            }],
            volterra: vec![],
            reflect: false,
        }
    }

    fn volterra_spec(reflect: bool) -> VolProcessSpec {
        VolProcessSpec {
            family: Family::VolterraSde,
            d: 1,
            m: 1,
            y: vec![0.2],
            noise_kernels: vec![],
            drift_kernels: vec![],
            u_maps: vec![],
            aux: vec![],
            volterra: vec![VolterraComponent {
                drift_kernel: KernelSpec::RiemannLiouville { hurst: 0.6 },
                drift_fn: ScalarFn::Affine { a: 0.1, b: -0.8 },
                noise_kernel: KernelSpec::RiemannLiouville { hurst: 0.3 },
                noise_fn: ScalarFn::Exp { scale: 0.3, rate: 0.5 },
                driver: 0,
            }],
            reflect,
        }
    }

    fn reflected_ou() -> VolProcessSpec {
        VolProcessSpec {
            family: Family::ReflectedDiffusion,
            d: 1,
            m: 1,
            y: vec![0.05],
            noise_kernels: vec![],
            drift_kernels: vec![],
            u_maps: vec![],
            aux: vec![AuxSpec {
                v0: 0.0,
                drift: ScalarFn::Affine { a: 0.1, b: -1.0 },
                dispersion: ScalarFn::Constant { c: 0.5 },
                driver: 0,
                full_truncation: false,
            }],
            volterra: vec![],
            reflect: false,
        }
    }

    fn fractional_heston() -> VolProcessSpec {
        VolProcessSpec {
            family: Family::FractionalNongaussian,
            d: 1,
            m: 1,
            y: vec![0.04],
            noise_kernels: vec![],
            drift_kernels: vec![Some(KernelSpec::RiemannLiouville { hurst: 0.3 })],
            u_maps: vec![Some(UMap { map: ScalarFn::Identity, component: 0 })],
            aux: vec![cir(0.04, 1.5, 0.04, 0.3)],
            volterra: vec![],
            reflect: false,
        }
    }

    #[test]
    fn psi_examples() {
        let g = grid(50);
        let mut spec = fractional_heston();
        spec.aux[0] = AuxSpec {
            v0: 0.3,
            drift: ScalarFn::Zero,
            dispersion: ScalarFn::Zero,
            driver: 0,
            full_truncation: false,
        };
        let p = solve_psi(&spec, &Control::constant(g, &[1.0])).unwrap();
        assert!(p.values.iter().all(|v| *v == 0.3));
        spec.aux[0].dispersion = ScalarFn::Constant { c: 1.0 };
        let p = solve_psi(&spec, &Control::constant(g, &[2.0])).unwrap();
        for j in 0..=50 {
            assert!((p.at(j, 0) - (0.3 + 2.0 * g.node(j))).abs() < 1e-13);
        }
    }

    #[test]
    fn cir_skeleton_tracks_ode() {
        let (v0, kappa, theta) = (0.09, 2.0, 0.04);
        let mut errs = Vec::new();
        for n in [100, 200, 400] {
            let mut spec = fractional_heston();
            spec.aux[0] = cir(v0, kappa, theta, 0.3);
            let g = grid(n);
            let p = solve_psi(&spec, &Control::zeros(g, 1)).unwrap();
            let e = (0..=n)
                .map(|j| (p.at(j, 0) - (theta + (v0 - theta) * (-kappa * g.node(j)).exp())).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        assert!(errs[0] < 1e-3);
        assert!(errs[1] < 0.6 * errs[0] && errs[2] < 0.6 * errs[1], "{errs:?}");
    }

    #[test]
    fn psi_blow_up_is_reported() {
        let mut spec = fractional_heston();
        spec.aux[0] = AuxSpec {
            v0: 1.0,
            drift: ScalarFn::Square,
            dispersion: ScalarFn::Zero,
            driver: 0,
            full_truncation: false,
        };
        let g = TimeGrid::new(5.0, 500).unwrap();
        assert!(matches!(solve_psi(&spec, &Control::zeros(g, 1)), Err(Error::Divergence(_))));
    }

    #[test]
    fn gaussian_constant_slopes() {
        let g = grid(20);
        let spec = VolProcessSpec::gaussian(
            vec![0.0, 0.0],
            vec![
                vec![Some(KernelSpec::Brownian), Some(KernelSpec::Brownian)],
                vec![Some(KernelSpec::Brownian), Some(KernelSpec::Brownian)],
            ],
        );
        let eta = gamma_y(&spec, &Control::constant(g, &[1.0, 1.0])).unwrap();
        for j in 0..=20 {
            for i in 0..2 {
                assert!((eta.at(j, i) - 2.0 * g.node(j)).abs() < 1e-13);
            }
        }
        let zero = hat_map(
            &VolProcessSpec::gaussian(vec![0.3], vec![vec![Some(KernelSpec::Brownian)]]),
            &Control::zeros(g, 1),
        )
        .unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.3));
    }

    #[test]
    fn toy_is_identity() {
        let g = grid(30);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Control::new(g, 1, (0..30).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let h = hat_map(&VolProcessSpec::toy(), &c).unwrap();
        assert!(h.sup_distance(&integrate(&c)) < 1e-14);
        assert!(gamma_y(&VolProcessSpec::toy(), &c).unwrap().sup_distance(&integrate(&c)) < 1e-14);
    }

    #[test]
    fn volterra_matches_kernel_operator() {
        let g = grid(40);
        let h = KernelSpec::RiemannLiouville { hurst: 0.3 };
        let spec = VolProcessSpec {
            family: Family::VolterraSde,
            d: 1,
            m: 1,
            y: vec![0.0],
            noise_kernels: vec![],
            drift_kernels: vec![],
            u_maps: vec![],
            aux: vec![],
            volterra: vec![VolterraComponent {
                drift_kernel: KernelSpec::Brownian,
                drift_fn: ScalarFn::Zero,
                noise_kernel: h.clone(),
                noise_fn: ScalarFn::Constant { c: 1.0 },
                driver: 0,
            }],
            reflect: false,
        };
        let eta = gamma_y(&spec, &Control::constant(g, &[1.0])).unwrap();
        let oracle = hs_apply(&h, &vec![1.0; 41], &g).unwrap();
        for j in 0..=40 {
            assert!((eta.at(j, 0) - oracle[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn picard_agrees_with_forward_substitution() {
        let g = grid(60);
        let vm = VolMap::new(&volterra_spec(false), g).unwrap();
        let c: Vec<f64> = (0..60).map(|j| (j as f64 * 0.3).sin()).collect();
        let a = vm.forward(&c).unwrap();
        let b = vm.clone().with_solver(VolterraSolver::Forward).forward(&c).unwrap();
        let diff = a.eta.iter().zip(&b.eta).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn reflection_of_negative_drift() {
        let g = grid(10);
        let mut spec = VolProcessSpec::gaussian(vec![0.0], vec![vec![Some(KernelSpec::Brownian)]]);
        spec.reflect = true;
        let h = hat_map(&spec, &Control::constant(g, &[-1.0])).unwrap();
        assert!(h.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn reflected_diffusion_stays_nonnegative() {
        let g = grid(100);
        let c = Control::constant(g, &[-3.0]);
        let h = hat_map(&reflected_ou(), &c).unwrap();
        assert!(h.values.iter().all(|v| *v >= 0.0));
        assert!(h.values[100] < 0.2);
    }

    #[test]
    fn mixed_is_sum_of_degenerate_parts() {
        let g = grid(40);
        let c = Control::new(g, 1, (0..40).map(|j| (j as f64 * 0.2).cos()).collect()).unwrap();
        let spec = mixed_spec();
        let full = gamma_y(&spec, &c).unwrap();
        let mut noise_only = spec.clone();
        noise_only.family = Family::Gaussian;
        noise_only.drift_kernels = vec![None];
        noise_only.u_maps = vec![None];
        noise_only.y = vec![0.0];
        let mut drift_only = spec.clone();
        drift_only.family = Family::FractionalNongaussian;
        drift_only.noise_kernels = vec![vec![None]];
        let a = gamma_y(&noise_only, &c).unwrap();
        let b = gamma_y(&drift_only, &c).unwrap();
        for j in 0..=40 {
            assert!((full.at(j, 0) - (a.at(j, 0) + b.at(j, 0))).abs() < 1e-15);
        }
    }

    #[test]
    fn family_constraints_are_checked() {
        let mut s = mixed_spec();
        s.family = Family::Gaussian;
        assert!(matches!(s.validate(), Err(Error::InvalidModel(_))));
        let mut s = mixed_spec();
        s.family = Family::FractionalNongaussian;
        assert!(matches!(s.validate(), Err(Error::InvalidModel(_))));
        let mut s = VolProcessSpec::gaussian(vec![0.0, 0.0], vec![vec![None], vec![None]]);
        s.reflect = true;
        assert!(matches!(s.validate(), Err(Error::UnsupportedDomain(_))));
    }

    #[test]
    fn refinement_changes_output_by_order_dt() {
        // A fixed smooth control, represented on nested grids.
        let spec = fractional_heston();
        let diff = |n: usize| {
            let g1 = grid(n);
            let g2 = grid(2 * n);
            let slope = |t: f64| (3.0 * t).sin();
            let c1 = Control::new(g1, 1, (0..n).map(|j| slope(g1.node(j))).collect()).unwrap();
            let c2 = Control::new(g2, 1, (0..2 * n).map(|j| slope(g2.node(j / 2 * 2))).collect()).unwrap();
            let h1 = hat_map(&spec, &c1).unwrap();
            let h2 = hat_map(&spec, &c2).unwrap();
            (0..=n).map(|j| (h1.at(j, 0) - h2.at(2 * j, 0)).abs()).fold(0.0, f64::max)
        };
        let d50 = diff(50);
        let d100 = diff(100);
        assert!(d50 < 2e-3, "{d50}");
        assert!(d100 < 0.7 * d50, "{d50} {d100}");
    }

    fn check_adjoint(spec: &VolProcessSpec, n: usize, seed: u64) {
        let g = grid(n);
        let vm = VolMap::new(spec, g).unwrap();
        let m = spec.m;
        let d = spec.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dot: Vec<f64> = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..(n + 1) * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tr = vm.forward(&dot).unwrap();
        let grad = vm.backward(&dot, &tr, &w);
        let obj = |x: &[f64]| -> f64 {
            let t = vm.forward(x).unwrap();
            t.fhat.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        for idx in [0, n * m / 3, n * m / 2, n * m - 1] {
            let h = 1e-6;
            let mut xp = dot.clone();
            xp[idx] += h;
            let mut xm = dot.clone();
            xm[idx] -= h;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * h);
            let scale = grad.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!((fd - grad[idx]).abs() < 1e-6 * scale.max(1e-3), "{:?} idx {idx}: {fd} vs {}", spec.family, grad[idx]);
        }
    }

    #[test]
    fn adjoints_match_differences() {
        check_adjoint(&mixed_spec(), 30, 1);
        check_adjoint(&fractional_heston(), 30, 2);
        check_adjoint(&volterra_spec(false), 30, 3);
        check_adjoint(&volterra_spec(true), 30, 4);
        check_adjoint(&reflected_ou(), 30, 5);
        let mut refl = mixed_spec();
        refl.reflect = true;
        refl.y = vec![0.01];
        check_adjoint(&refl, 30, 6);
    }

    proptest! {
        #[test]
        fn gaussian_hat_map_is_affine(
            f in proptest::collection::vec(-2.0f64..2.0, 20),
            g in proptest::collection::vec(-2.0f64..2.0, 20),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let tg = grid(20);
            let spec = VolProcessSpec::gaussian(
                vec![0.2],
                vec![vec![Some(KernelSpec::RiemannLiouville { hurst: 0.3 })]],
            );
            let vm = VolMap::new(&spec, tg).unwrap();
            let h0 = vm.forward(&vec![0.0; 20]).unwrap().fhat;
            let hf = vm.forward(&f).unwrap().fhat;
            let hg = vm.forward(&g).unwrap().fhat;
            let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
            let hm = vm.forward(&mix).unwrap().fhat;
            for j in 0..=20 {
                let rhs = a * (hf[j] - h0[j]) + b * (hg[j] - h0[j]);
                prop_assert!((hm[j] - h0[j] - rhs).abs() < 1e-9);
            }
        }
    }
}
