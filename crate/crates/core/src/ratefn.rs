//! Path and terminal rate functions of the log-price process.
//!
//! Controls are discretized as piecewise-linear paths; the objectives below are the exact
//! values of the discretized functionals (left-endpoint coefficients times increments).
//! Optimization runs in the scaled variables `z = √Δ ḟ` so that `½‖z‖²` is the energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, TerminalForm};
use crate::optim::{self, fd_gradient, Candidate, GradientMode, OptimConfig};
use crate::paths::{Control, PathFn, TimeGrid};
use crate::volmap::Trace;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateResult {
    pub value: f64,
    pub minimizer_f: Control,
    #[serde(default)]
    pub minimizer_l: Option<Control>,
    pub iterations: usize,
    pub restarts: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

fn singular(t: f64) -> Error {
    Error::SingularVolatility { t }
}

/// Explicit inverse of a small square matrix, refusing condition numbers above `1e12`.
pub(crate) fn small_inverse(a: &[f64], m: usize, t: f64) -> Result<Vec<f64>> {
    if m == 1 {
        if a[0] == 0.0 || !a[0].is_finite() {
            return Err(singular(t));
        }
        return Ok(vec![1.0 / a[0]]);
    }
    let mat = nalgebra::DMatrix::from_row_slice(m, m, a);
    let sv = mat.clone().svd(false, false).singular_values;
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(singular(t));
    }
    let inv = mat.try_inverse().ok_or_else(|| singular(t))?;
    Ok((0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| inv[(i, j)]).collect())
}

#[inline]
fn matvec(a: &[f64], x: &[f64], m: usize, out: &mut [f64]) {
    for i in 0..m {
        out[i] = (0..m).map(|j| a[i * m + j] * x[j]).sum();
    }
}

#[inline]
fn matvec_t(a: &[f64], x: &[f64], m: usize, out: &mut [f64]) {
    for j in 0..m {
        out[j] = (0..m).map(|i| a[i * m + j] * x[i]).sum();
    }
}

/// Evaluates `Φ(l, f)` and its adjoint on a compiled model.
pub struct PhiMap<'a> {
    pub model: &'a Model,
}

impl<'a> PhiMap<'a> {
    pub fn new(model: &'a Model) -> Self {
        PhiMap { model }
    }

    /// Nodal values of `Φ`, `(n+1) × m`, plus the volatility trace.
    pub fn forward(&self, ldot: &[f64], fdot: &[f64]) -> Result<(Vec<f64>, Trace)> {
        let md = self.model;
        let (n, m, d) = (md.grid.n_steps, md.m(), md.d());
        let dt = md.grid.dt();
        let tr = md.vol.forward(fdot)?;
        let mut phi = vec![0.0; (n + 1) * m];
        let mut sig = vec![0.0; m * m];
        let mut b = vec![0.0; m];
        let mut v = vec![0.0; m];
        let mut sv = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        for j in 0..n {
            let t = md.grid.node(j);
            let u = &tr.fhat[j * d..(j + 1) * d];
            md.sigma_into(t, u, &mut sig);
            md.drift_into(t, u, &mut b);
            matvec(&md.cbar, &ldot[j * m..(j + 1) * m], m, &mut v);
            matvec(&md.c, &fdot[j * m..(j + 1) * m], m, &mut tmp);
            v.iter_mut().zip(&tmp).for_each(|(a, c)| *a += c);
            matvec(&sig, &v, m, &mut sv);
            for c in 0..m {
                phi[(j + 1) * m + c] = phi[j * m + c] + (b[c] + sv[c]) * dt;
            }
        }
        Ok((phi, tr))
    }

    /// Gradients in `(l̇, ḟ)` of `⟨phi_bar, Φ⟩`.
    pub fn backward(&self, ldot: &[f64], fdot: &[f64], tr: &Trace, phi_bar: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let md = self.model;
        let (n, m, d) = (md.grid.n_steps, md.m(), md.d());
        let dt = md.grid.dt();
        let mut lbar = vec![0.0; n * m];
        let mut fbar = vec![0.0; n * m];
        let mut ubar = vec![0.0; (n + 1) * d];
        let mut s = vec![0.0; m];
        let mut sig = vec![0.0; m * m];
        let mut dsig = vec![0.0; m * m];
        let mut db = vec![0.0; m];
        let mut v = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        let mut st = vec![0.0; m];
        for j in (0..n).rev() {
            for c in 0..m {
                s[c] += phi_bar[(j + 1) * m + c];
            }
            let t = md.grid.node(j);
            let u = &tr.fhat[j * d..(j + 1) * d];
            md.sigma_into(t, u, &mut sig);
            matvec_t(&sig, &s, m, &mut st);
            matvec_t(&md.cbar, &st, m, &mut tmp);
            for c in 0..m {
                lbar[j * m + c] = dt * tmp[c];
            }
            matvec_t(&md.c, &st, m, &mut tmp);
            for c in 0..m {
                fbar[j * m + c] = dt * tmp[c];
            }
            matvec(&md.cbar, &ldot[j * m..(j + 1) * m], m, &mut v);
            matvec(&md.c, &fdot[j * m..(j + 1) * m], m, &mut tmp);
            v.iter_mut().zip(&tmp).for_each(|(a, c)| *a += c);
            for k in 0..d {
                md.sigma_du_into(t, u, k, &mut dsig);
                md.drift_du_into(t, u, k, &mut db);
                matvec(&dsig, &v, m, &mut tmp);
                ubar[j * d + k] = dt * (0..m).map(|c| s[c] * (db[c] + tmp[c])).sum::<f64>();
            }
        }
        let back = md.vol.backward(fdot, tr, &ubar);
        fbar.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
        (lbar, fbar)
    }
}

/// `Φ(l, f)` as a nodal path.
pub fn phi_functional(spec: &ModelSpec, l: &Control, f: &Control) -> Result<PathFn> {
    if l.grid != f.grid || l.dim != spec.m || f.dim != spec.m {
        return Err(Error::Dimension("l and f must share a grid and have dimension m".into()));
    }
    let model = Model::on_grid(spec, f.grid)?;
    let (phi, _) = PhiMap::new(&model).forward(&l.dot, &f.dot)?;
    PathFn::new(f.grid, spec.m, phi)
}

/// Discretized path objective with `l` eliminated in closed form.
pub struct PathObjective<'a> {
    model: &'a Model,
    gdot: Vec<f64>,
}

impl<'a> PathObjective<'a> {
    pub fn new(model: &'a Model, g: &PathFn) -> Result<Self> {
        if g.grid != model.grid || g.dim != model.m() {
            return Err(Error::Dimension("target path must live on the model grid with dimension m".into()));
        }
        if g.values[..g.dim].iter().any(|v| v.abs() > 1e-12) {
            return Err(Error::Domain("target path must start at 0".into()));
        }
        let m = g.dim;
        let dt = g.grid.dt();
        let gdot = (0..g.grid.n_steps)
            .flat_map(|j| (0..m).map(move |c| (j, c)))
            .map(|(j, c)| (g.at(j + 1, c) - g.at(j, c)) / dt)
            .collect();
        Ok(PathObjective { model, gdot })
    }

    pub fn value(&self, fdot: &[f64]) -> Result<f64> {
        self.eval(fdot, false).map(|r| r.0)
    }

    pub fn value_grad(&self, fdot: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(fdot, true)
    }

    /// The optimal `l̇` for a given `ḟ`.
    pub fn l_of_f(&self, fdot: &[f64]) -> Result<Vec<f64>> {
        let md = self.model;
        let (n, m, d) = (md.grid.n_steps, md.m(), md.d());
        let tr = md.vol.forward(fdot)?;
        let mut sig = vec![0.0; m * m];
        let mut b = vec![0.0; m];
        let mut w = vec![0.0; m];
        let mut cf = vec![0.0; m];
        let mut out = vec![0.0; n * m];
        for j in 0..n {
            let t = md.grid.node(j);
            let u = &tr.fhat[j * d..(j + 1) * d];
            md.sigma_into(t, u, &mut sig);
            md.drift_into(t, u, &mut b);
            let inv = small_inverse(&sig, m, t)?;
            let rhs: Vec<f64> = (0..m).map(|c| self.gdot[j * m + c] - b[c]).collect();
            matvec(&inv, &rhs, m, &mut w);
            matvec(&md.c, &fdot[j * m..(j + 1) * m], m, &mut cf);
            let v: Vec<f64> = w.iter().zip(&cf).map(|(a, c)| a - c).collect();
            matvec(&md.cbar_inv, &v, m, &mut out[j * m..(j + 1) * m]);
        }
        Ok(out)
    }

    fn eval(&self, fdot: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let md = self.model;
        let (n, m, d) = (md.grid.n_steps, md.m(), md.d());
        let dt = md.grid.dt();
        let tr = md.vol.forward(fdot)?;
        let mut sig = vec![0.0; m * m];
        let mut dsig = vec![0.0; m * m];
        let mut b = vec![0.0; m];
        let mut db = vec![0.0; m];
        let mut rhs = vec![0.0; m];
        let mut w = vec![0.0; m];
        let mut cf = vec![0.0; m];
        let mut r = vec![0.0; m];
        let mut q = vec![0.0; m];
        let mut p = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        let mut total = 0.0;
        let mut grad = if want_grad { vec![0.0; n * m] } else { Vec::new() };
        let mut ubar = if want_grad { vec![0.0; (n + 1) * d] } else { Vec::new() };
        for j in 0..n {
            let t = md.grid.node(j);
            let u = &tr.fhat[j * d..(j + 1) * d];
            let fj = &fdot[j * m..(j + 1) * m];
            md.sigma_into(t, u, &mut sig);
            md.drift_into(t, u, &mut b);
            let inv = small_inverse(&sig, m, t)?;
            for c in 0..m {
                rhs[c] = self.gdot[j * m + c] - b[c];
            }
            matvec(&inv, &rhs, m, &mut w);
            matvec(&md.c, fj, m, &mut cf);
            for c in 0..m {
                tmp[c] = w[c] - cf[c];
            }
            matvec(&md.cbar_inv, &tmp, m, &mut r);
            total += 0.5 * dt * (r.iter().map(|x| x * x).sum::<f64>() + fj.iter().map(|x| x * x).sum::<f64>());
            if want_grad {
                matvec(&md.cbar_inv, &r, m, &mut q);
                matvec_t(&md.c, &q, m, &mut tmp);
                for c in 0..m {
                    grad[j * m + c] = dt * (fj[c] - tmp[c]);
                }
                matvec_t(&inv, &q, m, &mut p);
                for k in 0..d {
                    md.sigma_du_into(t, u, k, &mut dsig);
                    md.drift_du_into(t, u, k, &mut db);
                    matvec(&dsig, &w, m, &mut tmp);
                    ubar[j * d + k] = -dt * (0..m).map(|c| p[c] * (tmp[c] + db[c])).sum::<f64>();
                }
            }
        }
        if want_grad {
            let back = md.vol.backward(fdot, &tr, &ubar);
            grad.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
        }
        Ok((total, grad))
    }
}

/// Discretized terminal objective `½‖A‖²/D + ½‖f‖²`.
///
/// With `tail` set (one asset only) the target is the half line `[x, ∞)`: `A` is replaced
/// by its positive part, which minimizes over all terminal points above `x` in closed form.
pub struct TerminalObjective<'a> {
    model: &'a Model,
    form: TerminalForm,
    x: Vec<f64>,
    tail: bool,
}

impl<'a> TerminalObjective<'a> {
    pub fn new(model: &'a Model, x: &[f64]) -> Result<Self> {
        if x.len() != model.m() {
            return Err(Error::Dimension(format!("terminal point has {} entries, m = {}", x.len(), model.m())));
        }
        Ok(TerminalObjective { model, form: model.terminal_form()?, x: x.to_vec(), tail: false })
    }

    pub fn tail(model: &'a Model, k: f64) -> Result<Self> {
        if model.m() != 1 {
            return Err(Error::Dimension("tail rate requires m = 1".into()));
        }
        let mut o = TerminalObjective::new(model, &[k])?;
        o.tail = true;
        Ok(o)
    }

    pub fn value(&self, fdot: &[f64]) -> Result<f64> {
        self.eval(fdot, false).map(|r| r.0)
    }

    pub fn value_grad(&self, fdot: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(fdot, true)
    }

    /// `∫ b(s, f̂(s)) ds + ∫ ξ M ḟ ds` and `∫ ξ² ds` for a control.
    pub fn mean_and_variance(&self, fdot: &[f64]) -> Result<(Vec<f64>, f64)> {
        let md = self.model;
        let (n, m, d) = (md.grid.n_steps, md.m(), md.d());
        let dt = md.grid.dt();
        let tr = md.vol.forward(fdot)?;
        let mut mean = vec![0.0; m];
        let mut b = vec![0.0; m];
        let mut mf = vec![0.0; m];
        let mut var = 0.0;
        for j in 0..n {
            let t = md.grid.node(j);
            let u = &tr.fhat[j * d..(j + 1) * d];
            md.drift_into(t, u, &mut b);
            let xi = self.form.xi(md, t, u);
            matvec(&self.form.mmat, &fdot[j * m..(j + 1) * m], m, &mut mf);
            for c in 0..m {
                mean[c] += (b[c] + xi * mf[c]) * dt;
            }
            var += xi * xi * dt;
        }
        Ok((mean, var))
    }

    fn eval(&self, fdot: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let md = self.model;
        let (n, m, d) = (md.grid.n_steps, md.m(), md.d());
        let dt = md.grid.dt();
        let tr = md.vol.forward(fdot)?;
        let mut b = vec![0.0; m];
        let mut mf = vec![0.0; n * m];
        let mut xi = vec![0.0; n];
        let mut a = self.x.clone();
        let mut dvar = 0.0;
        let mut energy = 0.0;
        for j in 0..n {
            let t = md.grid.node(j);
            let u = &tr.fhat[j * d..(j + 1) * d];
            md.drift_into(t, u, &mut b);
            xi[j] = self.form.xi(md, t, u);
            let fj = &fdot[j * m..(j + 1) * m];
            matvec(&self.form.mmat, fj, m, &mut mf[j * m..(j + 1) * m]);
            for c in 0..m {
                a[c] -= (b[c] + xi[j] * mf[j * m + c]) * dt;
            }
            dvar += xi[j] * xi[j] * dt;
            energy += 0.5 * dt * fj.iter().map(|v| v * v).sum::<f64>();
        }
        if self.tail {
            a[0] = a[0].max(0.0);
        }
        let a2: f64 = a.iter().map(|v| v * v).sum();
        if !(dvar > 0.0) {
            let scale = 1.0 + self.x.iter().map(|v| v.abs()).sum::<f64>();
            if a2.sqrt() <= 1e-14 * scale {
                let grad = if want_grad { fdot.iter().map(|v| v * dt).collect() } else { Vec::new() };
                return Ok((energy, grad));
            }
            return Err(singular(0.0));
        }
        let value = 0.5 * a2 / dvar + energy;
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let mut grad = vec![0.0; n * m];
        let mut mta = vec![0.0; m];
        matvec_t(&self.form.mmat, &a, m, &mut mta);
        let mut ubar = vec![0.0; (n + 1) * d];
        let mut db = vec![0.0; m];
        for j in 0..n {
            let t = md.grid.node(j);
            let u = &tr.fhat[j * d..(j + 1) * d];
            for c in 0..m {
                grad[j * m + c] = -(xi[j] * dt / dvar) * mta[c] + fdot[j * m + c] * dt;
            }
            for k in 0..d {
                md.drift_du_into(t, u, k, &mut db);
                let dxi = self.form.xi_du(md, t, u, k);
                let lin: f64 = (0..m).map(|c| a[c] * (db[c] + dxi * mf[j * m + c])).sum();
                ubar[j * d + k] = -(dt / dvar) * lin - (a2 / (dvar * dvar)) * xi[j] * dxi * dt;
            }
        }
        let back = md.vol.backward(fdot, &tr, &ubar);
        grad.iter_mut().zip(&back).for_each(|(g, b)| *g += b);
        Ok((value, grad))
    }
}

/// Multi-start minimization of an objective in `ḟ` coordinates (`dim = n·m`).
pub(crate) fn minimize_dot<F>(obj: F, grid: TimeGrid, dim: usize, cfg: &OptimConfig) -> Result<(Candidate, usize)>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync,
{
    let sq = grid.dt().sqrt();
    let zobj = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let dot: Vec<f64> = z.iter().map(|v| v / sq).collect();
        match cfg.gradient {
            GradientMode::Adjoint => {
                let (v, g) = obj(&dot)?;
                Ok((v, g.into_iter().map(|x| x / sq).collect()))
            }
            GradientMode::FiniteDifference => {
                let f = |zz: &[f64]| -> Result<f64> {
                    let dd: Vec<f64> = zz.iter().map(|v| v / sq).collect();
                    obj(&dd).map(|r| r.0)
                };
                let v = f(z)?;
                Ok((v, fd_gradient(f, z, 1e-6)?))
            }
        }
    };
    let starts = optim::start_points(dim, (2.0 / dim.max(1) as f64).sqrt(), cfg);
    let solve = |x0: Vec<f64>| -> Result<Candidate> { Ok(Candidate::from_lbfgs(optim::lbfgs(zobj, x0, &cfg.lbfgs)?)) };
    optim::multistart(solve, starts)
}

pub(crate) fn z_to_dot(z: &[f64], grid: TimeGrid) -> Vec<f64> {
    let sq = grid.dt().sqrt();
    z.iter().map(|v| v / sq).collect()
}

/// Path rate function of the log-price at the target path `g` (`g(0) = 0`).
pub fn qtilde_path(spec: &ModelSpec, g: &PathFn, cfg: &OptimConfig) -> Result<RateResult> {
    if (g.grid.horizon - spec.horizon).abs() > 1e-12 * spec.horizon {
        return Err(Error::Dimension("target path horizon differs from the model horizon".into()));
    }
    let model = Model::on_grid(spec, g.grid)?;
    let obj = PathObjective::new(&model, g)?;
    let dim = g.grid.n_steps * spec.m;
    let (best, restarts) = minimize_dot(|x| obj.value_grad(x), g.grid, dim, cfg)?;
    let dot = z_to_dot(&best.x, g.grid);
    let value = obj.value(&dot)?;
    let ldot = obj.l_of_f(&dot)?;
    Ok(RateResult {
        value,
        minimizer_l: Some(Control::new(g.grid, spec.m, ldot)?),
        minimizer_f: Control::new(g.grid, spec.m, dot)?,
        iterations: best.iterations,
        restarts,
        gradient_norm: best.grad_norm,
        converged: best.converged,
    })
}

fn terminal_result(model: &Model, obj: &TerminalObjective, cfg: &OptimConfig) -> Result<RateResult> {
    let grid = model.grid;
    let m = model.m();
    let zero = vec![0.0; grid.n_steps * m];
    // the zero control reaches the point: value 0 exactly
    if let Ok(0.0) = obj.value(&zero) {
        return Ok(RateResult {
            value: 0.0,
            minimizer_f: Control::zeros(grid, m),
            minimizer_l: None,
            iterations: 0,
            restarts: 0,
            gradient_norm: 0.0,
            converged: true,
        });
    }
    let (best, restarts) = minimize_dot(|x| obj.value_grad(x), grid, grid.n_steps * m, cfg)?;
    let dot = z_to_dot(&best.x, grid);
    let value = obj.value(&dot)?;
    Ok(RateResult {
        value,
        minimizer_f: Control::new(grid, m, dot)?,
        minimizer_l: None,
        iterations: best.iterations,
        restarts,
        gradient_norm: best.grad_norm,
        converged: best.converged,
    })
}

/// Terminal rate function of the log-price displacement `X_T - x0 = x`.
pub fn itilde_terminal(spec: &ModelSpec, x: &[f64], cfg: &OptimConfig) -> Result<RateResult> {
    let model = Model::new(spec)?;
    itilde_on(&model, x, cfg)
}

pub fn itilde_on(model: &Model, x: &[f64], cfg: &OptimConfig) -> Result<RateResult> {
    let obj = TerminalObjective::new(model, x)?;
    terminal_result(model, &obj, cfg)
}

/// Strategy for `inf_{x ≥ k}` of the terminal rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMethod {
    /// Golden-section search over `x ∈ [k, k + 10 σ_scale √T]`.
    #[default]
    GoldenSection,
    /// One minimization of the half-line objective over `f`.
    Joint,
}

/// Drift-only terminal point reached by the zero control.
pub fn zero_control_point(model: &Model) -> Result<f64> {
    let obj = TerminalObjective::new(model, &[0.0])?;
    let zero = vec![0.0; model.grid.n_steps];
    Ok(obj.mean_and_variance(&zero)?.0[0])
}

fn uncorrelated_constant_drift(model: &Model) -> Option<f64> {
    if model.m() != 1 || model.c[0] != 0.0 || !model.spec.drift_is_constant() {
        return None;
    }
    let mut b = [0.0];
    model.drift_into(0.0, &vec![0.0; model.d()], &mut b);
    Some(b[0])
}

/// `inf_{x ≥ k} Ĩ_T(x)` for one asset.
pub fn inf_tail(spec: &ModelSpec, k: f64, cfg: &OptimConfig) -> Result<RateResult> {
    inf_tail_with(spec, k, cfg, TailMethod::default())
}

pub fn inf_tail_with(spec: &ModelSpec, k: f64, cfg: &OptimConfig, method: TailMethod) -> Result<RateResult> {
    if spec.m != 1 {
        return Err(Error::Dimension("tail rate requires m = 1".into()));
    }
    let model = Model::new(spec)?;
    let t = spec.horizon;
    if let Some(r) = uncorrelated_constant_drift(&model) {
        if k <= r * t {
            return itilde_on(&model, &[r * t], cfg);
        }
        if !spec.sigma_may_vanish {
            return itilde_on(&model, &[k], cfg);
        }
    }
    let xstar = zero_control_point(&model)?;
    if k <= xstar {
        return itilde_on(&model, &[xstar], cfg);
    }
    match method {
        TailMethod::Joint => {
            let obj = TerminalObjective::tail(&model, k)?;
            terminal_result(&model, &obj, cfg)
        }
        TailMethod::GoldenSection => {
            let scale = sigma_scale(&model)?;
            let at_k = itilde_on(&model, &[k], cfg)?;
            let (mut a, mut b) = (k, k + 10.0 * scale * t.sqrt());
            let gr = 0.5 * (5f64.sqrt() - 1.0);
            let eval = |x: f64| itilde_on(&model, &[x], cfg);
            let mut c = b - gr * (b - a);
            let mut d = a + gr * (b - a);
            let mut fc = eval(c)?;
            let mut fd = eval(d)?;
            while (b - a) > 1e-4 * (1.0 + k.abs()) {
                if fc.value < fd.value {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - gr * (b - a);
                    fc = eval(c)?;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + gr * (b - a);
                    fd = eval(d)?;
                }
            }
            let inner = if fc.value < fd.value { fc } else { fd };
            Ok(if inner.value < at_k.value { inner } else { at_k })
        }
    }
}

/// `max_j |σ(t_j, f̂_0(t_j))|` along the zero control (one asset).
pub fn sigma_scale(model: &Model) -> Result<f64> {
    let n = model.grid.n_steps;
    let d = model.d();
    let tr = model.vol.forward(&vec![0.0; n * model.m()])?;
    let mut s = [0.0];
    let mut best = 0.0f64;
    for j in 0..n {
        model.sigma_into(model.grid.node(j), &tr.fhat[j * d..(j + 1) * d], &mut s);
        best = best.max(s[0].abs());
    }
    Ok(if best > 0.0 { best } else { 1.0 })
}
