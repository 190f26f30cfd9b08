//! Small-noise asymptotics of option prices and exit probabilities.
//!
//! Calls reduce to the tail of the terminal rate function. Asian options and exit
//! problems are constrained path problems in the pair `(l, f)`; they are solved with an
//! exterior quadratic penalty under geometric continuation, followed by a minimum-norm
//! Newton step that restores feasibility.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::optim::{self, lbfgs, OptimConfig};
use crate::paths::Control;
use crate::ratefn::{inf_tail, PhiMap, RateResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Call,
    ImpliedVol,
    Asian,
    ExitProb,
    Barrier,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub restarts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint_violation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_moneyness: Option<f64>,
    /// Index of the binding face for exit problems.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face: Option<usize>,
    /// `e^{-rT}`, which multiplies barrier payoffs but leaves the rate unchanged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discount_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AsymptoteReport {
    pub quantity: Quantity,
    pub rate: f64,
    #[serde(default)]
    pub limit_value: Option<f64>,
    #[serde(default)]
    pub minimizer_f: Option<Control>,
    #[serde(default)]
    pub minimizer_l: Option<Control>,
    pub diagnostics: Diagnostics,
}

impl AsymptoteReport {
    fn from_rate(quantity: Quantity, r: RateResult) -> Self {
        AsymptoteReport {
            quantity,
            rate: r.value,
            limit_value: None,
            diagnostics: Diagnostics {
                converged: r.converged,
                iterations: r.iterations,
                restarts: r.restarts,
                gradient_norm: Some(r.gradient_norm),
                ..Diagnostics::default()
            },
            minimizer_f: Some(r.minimizer_f),
            minimizer_l: r.minimizer_l,
        }
    }
}

/// Exit domain in log-price coordinates (or price coordinates for barriers).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExitDomain {
    /// `{x : lower < x < upper}` componentwise; `None` means unbounded.
    Box { lower: Vec<Option<f64>>, upper: Vec<Option<f64>> },
    /// `{x : ⟨normal, x⟩ < offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
}

/// One face `{⟨n, x⟩ = h}` of a domain `{⟨n, x⟩ < h}`.
#[derive(Clone, Debug)]
struct Face {
    normal: Vec<f64>,
    offset: f64,
}

impl ExitDomain {
    fn faces(&self, m: usize) -> Result<Vec<Face>> {
        match self {
            ExitDomain::Box { lower, upper } => {
                if lower.len() != m || upper.len() != m {
                    return Err(Error::Dimension("box bounds need m entries".into()));
                }
                let mut faces = Vec::new();
                for c in 0..m {
                    if let (Some(l), Some(u)) = (lower[c], upper[c]) {
                        if !(l < u) {
                            return Err(Error::Domain(format!("empty box in component {c}")));
                        }
                    }
                    if let Some(u) = upper[c] {
                        let mut n = vec![0.0; m];
                        n[c] = 1.0;
                        faces.push(Face { normal: n, offset: u });
                    }
                    if let Some(l) = lower[c] {
                        let mut n = vec![0.0; m];
                        n[c] = -1.0;
                        faces.push(Face { normal: n, offset: -l });
                    }
                }
                Ok(faces)
            }
            ExitDomain::HalfSpace { normal, offset } => {
                if normal.len() != m {
                    return Err(Error::Dimension("normal needs m entries".into()));
                }
                if normal.iter().all(|v| *v == 0.0) {
                    return Err(Error::Domain("normal must be nonzero".into()));
                }
                Ok(vec![Face { normal: normal.clone(), offset: *offset }])
            }
        }
    }

    /// Componentwise log of a price-space domain.
    pub fn log_transform(&self) -> Result<ExitDomain> {
        let log_bound = |b: Option<f64>, lower: bool| -> Result<Option<f64>> {
            match b {
                None => Ok(None),
                Some(v) if v < 0.0 => Err(Error::Domain(format!("price bound {v} is negative"))),
                Some(0.0) if lower => Ok(None),
                Some(0.0) => Err(Error::Domain("upper price bound 0 leaves an empty domain".into())),
                Some(v) => Ok(Some(v.ln())),
            }
        };
        match self {
            ExitDomain::Box { lower, upper } => Ok(ExitDomain::Box {
                lower: lower.iter().map(|b| log_bound(*b, true)).collect::<Result<_>>()?,
                upper: upper.iter().map(|b| log_bound(*b, false)).collect::<Result<_>>()?,
            }),
            ExitDomain::HalfSpace { normal, offset } => {
                let nz: Vec<usize> = (0..normal.len()).filter(|&c| normal[c] != 0.0).collect();
                if nz.len() != 1 {
                    return Err(Error::UnsupportedDomain(
                        "price-space half-spaces must have an axis-aligned normal".into(),
                    ));
                }
                let c = nz[0];
                let bound = offset / normal[c];
                let m = normal.len();
                let mut lower = vec![None; m];
                let mut upper = vec![None; m];
                if normal[c] > 0.0 {
                    upper[c] = log_bound(Some(bound), false)?;
                } else {
                    lower[c] = log_bound(Some(bound), true)?;
                }
                Ok(ExitDomain::Box { lower, upper })
            }
        }
    }

    /// Signed distances `h - ⟨n, x⟩` of `x` to every face.
    pub fn face_distances(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .faces(x.len())?
            .iter()
            .map(|f| f.offset - f.normal.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    /// Whether `x` lies in the open domain.
    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        Ok(self.face_distances(x)?.iter().all(|d| *d > 0.0))
    }
}

/// Exponent of a call price: `lim ε log C = -inf_{x ≥ k} Ĩ_T(x)`, `k = log(K/s0)`.
pub fn call_asymptote(spec: &ModelSpec, strike: f64, cfg: &OptimConfig) -> Result<AsymptoteReport> {
    if spec.m != 1 {
        return Err(Error::Dimension("call asymptotics require m = 1".into()));
    }
    if !(strike > 0.0) {
        return Err(Error::Domain(format!("strike must be positive, got {strike}")));
    }
    let s0 = spec.s0[0];
    let threshold = s0 * (spec.rate * spec.horizon).exp();
    if spec.sigma_may_vanish && strike <= threshold {
        return Err(Error::OutOfRange(format!(
            "volatility may vanish: strike must exceed s0·e^(rT) = {threshold}"
        )));
    }
    let k = (strike / s0).ln();
    let r = inf_tail(spec, k, cfg)?;
    let mut rep = AsymptoteReport::from_rate(Quantity::Call, r);
    rep.diagnostics.log_moneyness = Some(k);
    if !spec.assumption_b {
        rep.diagnostics.notes.push("model does not declare exponential integrability of ∫σ²".into());
    }
    Ok(rep)
}

/// Small-noise limit of the implied volatility, `k / √(2T · rate)`.
pub fn implied_vol_limit(spec: &ModelSpec, k: f64, cfg: &OptimConfig) -> Result<AsymptoteReport> {
    if spec.m != 1 || (spec.s0[0] - 1.0).abs() > 1e-15 || spec.rate != 0.0 {
        return Err(Error::Domain("implied-vol limits assume m = 1, s0 = 1 and r = 0".into()));
    }
    if !(k > 0.0) {
        return Err(Error::Domain(format!("log-strike must be positive, got {k}")));
    }
    let mut rep = call_asymptote(spec, k.exp(), cfg)?;
    if !(rep.rate > 0.0) {
        return Err(Error::DegenerateLimit(format!("rate is zero at k = {k}; the implied-vol limit is +∞")));
    }
    rep.quantity = Quantity::ImpliedVol;
    rep.limit_value = Some(k / (2.0 * spec.horizon * rep.rate).sqrt());
    Ok(rep)
}

/// Continuation schedule for the penalty method.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub initial: f64,
    pub factor: f64,
    pub stages: usize,
    /// Largest accepted violation of the normalized constraint.
    pub feasibility_tol: f64,
    /// Initial temperature of the smoothed maximum over exit times; divided by `factor` per stage.
    pub smoothing: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig { initial: 10.0, factor: 10.0, stages: 6, feasibility_tol: 1e-6, smoothing: 0.05 }
    }
}

/// A normalized scalar constraint `c(Φ) ≥ 0` on nodal `Φ`, with its gradient.
/// `tau > 0` requests a smoothed version; `tau = 0` is exact.
trait PathConstraint: Sync {
    fn eval(&self, phi: &[f64], tau: f64) -> (f64, Vec<f64>);
}

struct Outcome {
    z: Vec<f64>,
    energy: f64,
    violation: f64,
    iterations: usize,
    grad_norm: f64,
}

struct Penalized<'a, C: PathConstraint> {
    model: &'a Model,
    con: &'a C,
    sq: f64,
    nm: usize,
}

impl<'a, C: PathConstraint> Penalized<'a, C> {
    fn split(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let l = z[..self.nm].iter().map(|v| v / self.sq).collect();
        let f = z[self.nm..].iter().map(|v| v / self.sq).collect();
        (l, f)
    }

    /// Constraint value and its gradient in `z`.
    fn constraint(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (l, f) = self.split(z);
        let phi_map = PhiMap::new(self.model);
        let (phi, tr) = phi_map.forward(&l, &f)?;
        let (c, dphi) = self.con.eval(&phi, 0.0);
        let (lb, fb) = phi_map.backward(&l, &f, &tr, &dphi);
        let g = lb.iter().chain(&fb).map(|v| v / self.sq).collect();
        Ok((c, g))
    }

    fn objective(&self, z: &[f64], mu: f64, tau: f64) -> Result<(f64, Vec<f64>)> {
        let e = 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        let (l, f) = self.split(z);
        let phi_map = PhiMap::new(self.model);
        let (phi, tr) = phi_map.forward(&l, &f)?;
        let (c, dphi) = self.con.eval(&phi, tau);
        if !c.is_finite() {
            return Err(Error::Divergence("constraint is not finite".into()));
        }
        let viol = c.min(0.0);
        let mut g = z.to_vec();
        if viol < 0.0 {
            let scaled: Vec<f64> = dphi.iter().map(|v| v * mu * viol).collect();
            let (lb, fb) = phi_map.backward(&l, &f, &tr, &scaled);
            for (gi, b) in g.iter_mut().zip(lb.iter().chain(&fb)) {
                *gi += b / self.sq;
            }
        }
        Ok((e + 0.5 * mu * viol * viol, g))
    }

    fn solve(&self, z0: Vec<f64>, pc: &PenaltyConfig, cfg: &OptimConfig) -> Result<Outcome> {
        let mut z = z0;
        let mut mu = pc.initial;
        let mut tau = pc.smoothing;
        let mut iterations = 0;
        let mut grad_norm = 0.0;
        for _ in 0..pc.stages {
            let r = lbfgs(|x| self.objective(x, mu, tau), z, &cfg.lbfgs)?;
            iterations += r.iterations;
            grad_norm = r.grad_norm;
            z = r.x;
            mu *= pc.factor;
            tau /= pc.factor;
        }
        // minimum-norm Newton steps onto {c = 0⁺}
        let mut c = self.constraint(&z)?.0;
        for _ in 0..50 {
            if c >= 0.0 {
                break;
            }
            let (cv, g) = self.constraint(&z)?;
            let g2: f64 = g.iter().map(|v| v * v).sum();
            if !(g2 > 0.0) {
                break;
            }
            let step = (1e-12 - cv) / g2;
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let trial: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a + t * step * b).collect();
                if let Ok((ct, _)) = self.constraint(&trial) {
                    if ct > cv {
                        z = trial;
                        c = ct;
                        moved = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        let energy = 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        Ok(Outcome { z, energy, violation: (-c).max(0.0), iterations, grad_norm })
    }
}

struct ConstrainedResult {
    energy: f64,
    ldot: Vec<f64>,
    fdot: Vec<f64>,
    violation: f64,
    iterations: usize,
    restarts: usize,
    grad_norm: f64,
}

fn solve_constrained<C: PathConstraint>(
    model: &Model,
    con: &C,
    pc: &PenaltyConfig,
    cfg: &OptimConfig,
) -> Result<ConstrainedResult> {
    let nm = model.grid.n_steps * model.m();
    let sq = model.grid.dt().sqrt();
    let prob = Penalized { model, con, sq, nm };
    let starts = optim::start_points(2 * nm, (2.0 / (2 * nm) as f64).sqrt(), cfg);
    let restarts = starts.len() - 1;
    let outcomes: Vec<Result<Outcome>> = starts.into_par_iter().map(|z0| prob.solve(z0, pc, cfg)).collect();
    let mut best: Option<Outcome> = None;
    let mut first_err = None;
    let key = |o: &Outcome| (o.violation > pc.feasibility_tol, o.energy);
    for o in outcomes {
        match o {
            Ok(o) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        let (fo, eo) = key(&o);
                        let (fb, eb) = key(b);
                        match (fo, fb) {
                            (false, true) => true,
                            (true, false) => false,
                            (true, true) => o.violation < b.violation,
                            (false, false) => eo < eb - 1e-12 * (1.0 + eb),
                        }
                    }
                };
                if better {
                    best = Some(o);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let b = match best {
        Some(b) => b,
        None => return Err(first_err.unwrap_or_else(|| Error::Divergence("no start succeeded".into()))),
    };
    let (ldot, fdot) = prob.split(&b.z);
    Ok(ConstrainedResult {
        energy: b.energy,
        ldot,
        fdot,
        violation: b.violation,
        iterations: b.iterations,
        restarts,
        grad_norm: b.grad_norm,
    })
}

fn constrained_report(quantity: Quantity, model: &Model, r: ConstrainedResult, pc: &PenaltyConfig) -> Result<AsymptoteReport> {
    let converged = r.violation <= pc.feasibility_tol;
    let mut notes = Vec::new();
    if !converged {
        notes.push(format!("constraint still violated by {:e} after continuation", r.violation));
    }
    Ok(AsymptoteReport {
        quantity,
        rate: r.energy,
        limit_value: None,
        minimizer_f: Some(Control::new(model.grid, model.m(), r.fdot)?),
        minimizer_l: Some(Control::new(model.grid, model.m(), r.ldot)?),
        diagnostics: Diagnostics {
            converged,
            iterations: r.iterations,
            restarts: r.restarts,
            gradient_norm: Some(r.grad_norm),
            constraint_violation: Some(r.violation),
            notes,
            ..Diagnostics::default()
        },
    })
}

fn zero_report(quantity: Quantity, model: &Model, note: &str) -> AsymptoteReport {
    AsymptoteReport {
        quantity,
        rate: 0.0,
        limit_value: None,
        minimizer_f: Some(Control::zeros(model.grid, model.m())),
        minimizer_l: Some(Control::zeros(model.grid, model.m())),
        diagnostics: Diagnostics { converged: true, notes: vec![note.into()], ..Diagnostics::default() },
    }
}

/// `∫_0^1 e^{sd} ds` and `∫_0^1 s e^{sd} ds`.
fn seg_weights(d: f64) -> (f64, f64) {
    if d.abs() < 1e-3 {
        let g0 = 1.0 + d * (0.5 + d * (1.0 / 6.0 + d * (1.0 / 24.0 + d / 120.0)));
        let g1 = 0.5 + d * (1.0 / 3.0 + d * (1.0 / 8.0 + d * (1.0 / 30.0 + d / 144.0)));
        (g0, g1)
    } else {
        let em = d.exp_m1();
        (em / d, (d * d.exp() - em) / (d * d))
    }
}

/// `(log((1/T)∫e^Φ) - log 𝒦) / scale ≥ 0` with `Φ` piecewise linear between nodes.
struct AsianConstraint {
    n: usize,
    dt: f64,
    horizon: f64,
    log_target: f64,
    scale: f64,
}

impl AsianConstraint {
    fn log_average(&self, phi: &[f64]) -> (f64, Vec<f64>) {
        let shift = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut grad = vec![0.0; self.n + 1];
        for j in 0..self.n {
            let a = phi[j] - shift;
            let d = phi[j + 1] - phi[j];
            let (g0, g1) = seg_weights(d);
            let ea = a.exp() * self.dt;
            total += ea * g0;
            grad[j] += ea * (g0 - g1);
            grad[j + 1] += ea * g1;
        }
        grad.iter_mut().for_each(|g| *g /= total);
        ((total / self.horizon).ln() + shift, grad)
    }
}

impl PathConstraint for AsianConstraint {
    fn eval(&self, phi: &[f64], _tau: f64) -> (f64, Vec<f64>) {
        let (la, mut g) = self.log_average(phi);
        g.iter_mut().for_each(|v| *v /= self.scale);
        ((la - self.log_target) / self.scale, g)
    }
}

/// Exponent of an Asian call: minimal energy of `(l, f)` with `(1/T)∫ S/s0 ≥ K/s0`.
pub fn asian_asymptote(spec: &ModelSpec, strike: f64, cfg: &OptimConfig) -> Result<AsymptoteReport> {
    asian_asymptote_with(spec, strike, cfg, &PenaltyConfig::default())
}

pub fn asian_asymptote_with(spec: &ModelSpec, strike: f64, cfg: &OptimConfig, pc: &PenaltyConfig) -> Result<AsymptoteReport> {
    if spec.m != 1 {
        return Err(Error::Dimension("Asian asymptotics require m = 1".into()));
    }
    if !(strike > 0.0) {
        return Err(Error::Domain(format!("strike must be positive, got {strike}")));
    }
    let s0 = spec.s0[0];
    let (r, t) = (spec.rate, spec.horizon);
    if spec.sigma_may_vanish {
        let threshold = if r > 0.0 { s0 * (r * t).exp_m1() / (r * t) } else { s0 };
        if strike <= threshold {
            return Err(Error::OutOfRange(format!("volatility may vanish: strike must exceed {threshold}")));
        }
    }
    let model = Model::new(spec)?;
    let moneyness = strike / s0;
    let con = AsianConstraint {
        n: model.grid.n_steps,
        dt: model.grid.dt(),
        horizon: t,
        log_target: moneyness.ln(),
        scale: moneyness.ln().abs().max(1e-3),
    };
    let zero = vec![0.0; model.grid.n_steps];
    let (phi0, _) = PhiMap::new(&model).forward(&zero, &zero)?;
    if con.eval(&phi0, 0.0).0 >= 0.0 {
        let mut rep = zero_report(Quantity::Asian, &model, "zero control satisfies the averaging constraint");
        rep.diagnostics.log_moneyness = Some(moneyness.ln());
        return Ok(rep);
    }
    let res = solve_constrained(&model, &con, pc, cfg)?;
    let mut rep = constrained_report(Quantity::Asian, &model, res, pc)?;
    rep.diagnostics.log_moneyness = Some(moneyness.ln());
    if !spec.assumption_b {
        rep.diagnostics.notes.push("model does not declare exponential integrability of ∫σ²".into());
    }
    Ok(rep)
}

/// `max_{1 ≤ i ≤ last} ⟨n, Φ_i⟩ / dist - 1 ≥ 0`, smoothed by log-sum-exp when `tau > 0`.
struct ExitConstraint {
    normal: Vec<f64>,
    dist: f64,
    last: usize,
    m: usize,
}

impl PathConstraint for ExitConstraint {
    fn eval(&self, phi: &[f64], tau: f64) -> (f64, Vec<f64>) {
        let m = self.m;
        let s: Vec<f64> = (1..=self.last)
            .map(|i| (0..m).map(|c| self.normal[c] * phi[i * m + c]).sum::<f64>() / self.dist)
            .collect();
        let (mut smax, mut arg) = (f64::NEG_INFINITY, 0);
        for (i, v) in s.iter().enumerate() {
            // ties go to the latest node
            if *v >= smax {
                smax = *v;
                arg = i;
            }
        }
        let mut g = vec![0.0; phi.len()];
        if tau > 0.0 {
            let w: Vec<f64> = s.iter().map(|v| ((v - smax) / tau).exp()).collect();
            let total: f64 = w.iter().sum();
            for (i, wi) in w.iter().enumerate() {
                for c in 0..m {
                    g[(i + 1) * m + c] = wi / total * self.normal[c] / self.dist;
                }
            }
            (smax + tau * total.ln() - 1.0, g)
        } else {
            for c in 0..m {
                g[(arg + 1) * m + c] = self.normal[c] / self.dist;
            }
            (smax - 1.0, g)
        }
    }
}

/// Exponent of `P(τ ≤ t)` for the first exit of the log-price from `domain` (log coordinates).
pub fn exit_asymptote(spec: &ModelSpec, domain: &ExitDomain, t: f64, cfg: &OptimConfig) -> Result<AsymptoteReport> {
    exit_asymptote_with(spec, domain, t, cfg, &PenaltyConfig::default())
}

pub fn exit_asymptote_with(
    spec: &ModelSpec,
    domain: &ExitDomain,
    t: f64,
    cfg: &OptimConfig,
    pc: &PenaltyConfig,
) -> Result<AsymptoteReport> {
    if !(t > 0.0 && t <= spec.horizon * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("exit time must lie in (0, {}], got {t}", spec.horizon)));
    }
    let model = Model::new(spec)?;
    let m = spec.m;
    let x0 = spec.x0();
    let faces = domain.faces(m)?;
    let dists = domain.face_distances(&x0)?;
    if dists.iter().any(|d| *d < 0.0) {
        return Err(Error::Domain("initial log-price lies outside the exit domain".into()));
    }
    if let Some(i) = dists.iter().position(|d| *d == 0.0) {
        let mut rep = zero_report(Quantity::ExitProb, &model, "initial point lies on the boundary");
        rep.diagnostics.face = Some(i);
        return Ok(rep);
    }
    let last = (0..=model.grid.n_steps).filter(|&i| model.grid.node(i) <= t * (1.0 + 1e-12)).max().unwrap_or(0);
    if last == 0 {
        return Err(Error::Domain("exit time is shorter than one grid step".into()));
    }
    let results: Vec<Result<ConstrainedResult>> = faces
        .par_iter()
        .zip(dists.par_iter())
        .map(|(f, d)| {
            let con = ExitConstraint { normal: f.normal.clone(), dist: *d, last, m };
            solve_constrained(&model, &con, pc, cfg)
        })
        .collect();
    let mut best: Option<(usize, ConstrainedResult)> = None;
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        let feasible = r.violation <= pc.feasibility_tol;
        let better = match &best {
            None => true,
            Some((_, b)) => {
                let bf = b.violation <= pc.feasibility_tol;
                (feasible && !bf) || (feasible == bf && r.energy < b.energy)
            }
        };
        if better {
            best = Some((i, r));
        }
    }
    let (face, res) = best.ok_or_else(|| Error::Domain("exit domain has no finite face".into()))?;
    let mut rep = constrained_report(Quantity::ExitProb, &model, res, pc)?;
    rep.diagnostics.face = Some(face);
    Ok(rep)
}

/// Exponent of an up-and-in style binary barrier: exit of the price from `domain` by `T`.
pub fn barrier_asymptote(spec: &ModelSpec, domain: &ExitDomain, cfg: &OptimConfig) -> Result<AsymptoteReport> {
    if !domain.contains(&spec.s0)? {
        let on_boundary = domain.face_distances(&spec.s0)?.iter().all(|d| *d >= 0.0);
        if !on_boundary {
            return Err(Error::Domain("s0 lies outside the barrier domain".into()));
        }
    }
    let log_domain = domain.log_transform()?;
    let mut rep = exit_asymptote(spec, &log_domain, spec.horizon, cfg)?;
    rep.quantity = Quantity::Barrier;
    rep.diagnostics.discount_factor = Some((-spec.rate * spec.horizon).exp());
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::func::ScalarFn;
    use crate::kernels::KernelSpec;
    use crate::model::{DriftSpec, StateFn, VolatilitySpec};
    use crate::volmap::VolProcessSpec;

    fn bs(sigma: f64, n: usize) -> ModelSpec {
        ModelSpec {
            name: None,
            horizon: 1.0,
            n_steps: n,
            m: 1,
            vol: VolProcessSpec::gaussian(vec![0.0], vec![vec![Some(KernelSpec::Brownian)]]),
            drift: DriftSpec::Rate,
            volatility: VolatilitySpec::Scalar(StateFn::new(ScalarFn::Constant { c: sigma })),
            correlation: None,
            rho: Some(0.0),
            s0: vec![1.0],
            rate: 0.0,
            assumption_b: true,
            sigma_may_vanish: false,
        }
    }

    fn quick() -> OptimConfig {
        OptimConfig { restarts: 1, ..OptimConfig::default() }
    }

    #[test]
    fn segment_weights_are_smooth() {
        for d in [-2.0, -1e-3 - 1e-12, 1e-3 + 1e-12, 0.5] {
            let (a, b) = seg_weights(d);
            let qa = crate::quad::integrate(|s| (s * d).exp(), 0.0, 1.0, 1e-14);
            let qb = crate::quad::integrate(|s| s * (s * d).exp(), 0.0, 1.0, 1e-14);
            assert!((a - qa).abs() < 1e-12 && (b - qb).abs() < 1e-12);
        }
        let (a1, b1) = seg_weights(0.999e-3);
        let (a2, b2) = seg_weights(1.001e-3);
        assert!((a1 - a2).abs() < 1e-5 && (b1 - b2).abs() < 1e-5);
    }

    #[test]
    fn call_and_iv_oracles() {
        let spec = bs(0.2, 200);
        let rep = call_asymptote(&spec, 0.1f64.exp(), &quick()).unwrap();
        assert!((rep.rate - 0.125).abs() < 1e-6);
        let iv = implied_vol_limit(&spec, 0.1, &quick()).unwrap();
        let lv = iv.limit_value.unwrap();
        assert!((lv - 0.2).abs() < 1e-6);
        assert!((lv * (2.0 * iv.rate).sqrt() - 0.1).abs() < 1e-10);
        assert!(matches!(call_asymptote(&spec, -1.0, &quick()), Err(Error::Domain(_))));
    }

    #[test]
    fn exit_half_space_oracle() {
        let spec = bs(0.2, 100);
        let dom = ExitDomain::HalfSpace { normal: vec![1.0], offset: 0.16 };
        let rep = exit_asymptote(&spec, &dom, 1.0, &quick()).unwrap();
        let exact = 0.16f64.powi(2) / (2.0 * 0.04);
        assert!((rep.rate - exact).abs() < 1e-3 * exact, "{} vs {exact}", rep.rate);
        assert!(rep.diagnostics.converged);
        let half = exit_asymptote(&spec, &dom, 0.5, &quick()).unwrap();
        assert!(half.rate >= rep.rate);
    }

    #[test]
    fn barrier_log_transform() {
        let spec = bs(0.2, 100);
        let dom = ExitDomain::Box { lower: vec![Some(0.0)], upper: vec![Some(1.2)] };
        let rep = barrier_asymptote(&spec, &dom, &quick()).unwrap();
        let exact = 1.2f64.ln().powi(2) / 0.08;
        assert!((rep.rate - exact).abs() < 1e-3 * exact);
        let at = ExitDomain::Box { lower: vec![None], upper: vec![Some(1.0)] };
        assert_eq!(barrier_asymptote(&spec, &at, &quick()).unwrap().rate, 0.0);
        let bad = ExitDomain::HalfSpace { normal: vec![1.0, 1.0], offset: 3.0 };
        assert!(matches!(bad.log_transform(), Err(Error::UnsupportedDomain(_))));
    }

    #[test]
    fn asian_zero_and_monotone() {
        let spec = bs(0.2, 50);
        assert_eq!(asian_asymptote(&spec, 0.95, &quick()).unwrap().rate, 0.0);
        let a = asian_asymptote(&spec, 1.05, &quick()).unwrap();
        let b = asian_asymptote(&spec, 1.1, &quick()).unwrap();
        assert!(a.diagnostics.converged && b.diagnostics.converged);
        assert!(0.0 < a.rate && a.rate < b.rate);
    }
}
