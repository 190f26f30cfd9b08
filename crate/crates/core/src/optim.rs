//! Limited-memory BFGS with a strong Wolfe line search, and a seeded multi-start driver.
//!
//! Objective failures (divergent or singular volatility) are treated as `+∞` during the
//! line search, so the iterate backs away from them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iter: usize,
    /// Convergence when `‖∇J‖_∞ ≤ gtol`.
    pub gtol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig { memory: 10, max_iter: 2000, gtol: 1e-9 }
    }
}

/// How objective gradients are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Reverse-mode through the volatility map.
    #[default]
    Adjoint,
    /// Central differences with step `1e-6`.
    FiniteDifference,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Random starts in addition to the zero start.
    pub restarts: usize,
    pub seed: u64,
    pub lbfgs: LbfgsConfig,
    pub gradient: GradientMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { restarts: 8, seed: 20_240_601, lbfgs: LbfgsConfig::default(), gradient: GradientMode::Adjoint }
    }
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F: Fn(&[f64]) -> Result<f64>>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let a = f(&xp)?;
        xp[i] = xi - h;
        let b = f(&xp)?;
        xp[i] = xi;
        g[i] = (a - b) / (2.0 * h);
    }
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Point {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

fn probe<F>(f: &mut F, x: &[f64], p: &[f64], alpha: f64, evals: &mut usize) -> Option<Point>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    *evals += 1;
    let xt: Vec<f64> = x.iter().zip(p).map(|(a, b)| a + alpha * b).collect();
    match f(&xt) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => {
            let dphi = dot(&g, p);
            Some(Point { alpha, f: v, g, dphi })
        }
        _ => None,
    }
}

fn interpolate(lo: &Point, hi_alpha: f64, hi: Option<&Point>) -> f64 {
    let (a, b) = (lo.alpha, hi_alpha);
    let mid = 0.5 * (a + b);
    let Some(h) = hi else { return mid };
    // cubic through (a, f_a, g_a) and (b, f_b, g_b)
    let d1 = lo.dphi + h.dphi - 3.0 * (lo.f - h.f) / (a - b);
    let disc = d1 * d1 - lo.dphi * h.dphi;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (h.dphi + d2 - d1) / (h.dphi - lo.dphi + 2.0 * d2);
    let (l, u) = if a < b { (a, b) } else { (b, a) };
    let w = u - l;
    if t.is_finite() && t > l + 0.1 * w && t < u - 0.1 * w {
        t
    } else {
        mid
    }
}

fn line_search<F>(f: &mut F, x: &[f64], p: &[f64], f0: f64, g0: f64, alpha0: f64, evals: &mut usize) -> Option<Point>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let origin = Point { alpha: 0.0, f: f0, g: Vec::new(), dphi: g0 };
    let mut prev = origin;
    let mut alpha = alpha0;
    let mut best: Option<Point> = None;
    for i in 0..40 {
        let Some(pt) = probe(f, x, p, alpha, evals) else {
            alpha = 0.5 * (prev.alpha + alpha);
            if alpha - prev.alpha < 1e-20 {
                return None;
            }
            continue;
        };
        if pt.f > f0 + C1 * alpha * g0 || (i > 0 && pt.f >= prev.f) {
            return zoom(f, x, p, f0, g0, prev, pt, evals).or(best);
        }
        if pt.dphi.abs() <= -C2 * g0 {
            return Some(pt);
        }
        if pt.dphi >= 0.0 {
            return zoom(f, x, p, f0, g0, pt, prev, evals);
        }
        alpha = pt.alpha * 2.0;
        if pt.g.is_empty() {
            return None;
        }
        prev = Point { alpha: pt.alpha, f: pt.f, g: pt.g.clone(), dphi: pt.dphi };
        best = Some(pt);
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(f: &mut F, x: &[f64], p: &[f64], f0: f64, g0: f64, mut lo: Point, hi: Point, evals: &mut usize) -> Option<Point>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut hi_alpha = hi.alpha;
    let mut hi_pt = Some(hi);
    for _ in 0..50 {
        if (hi_alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1e-10) {
            break;
        }
        let a = interpolate(&lo, hi_alpha, hi_pt.as_ref());
        let Some(pt) = probe(f, x, p, a, evals) else {
            hi_alpha = a;
            hi_pt = None;
            continue;
        };
        if pt.f > f0 + C1 * a * g0 || pt.f >= lo.f {
            hi_alpha = a;
            hi_pt = Some(pt);
        } else {
            if pt.dphi.abs() <= -C2 * g0 {
                return Some(pt);
            }
            if pt.dphi * (hi_alpha - lo.alpha) >= 0.0 {
                hi_alpha = lo.alpha;
                hi_pt = Some(Point { alpha: lo.alpha, f: lo.f, g: lo.g.clone(), dphi: lo.dphi });
            }
            lo = pt;
        }
    }
    // accept the best sufficient-decrease point found
    if lo.alpha > 0.0 && !lo.g.is_empty() {
        Some(lo)
    } else {
        None
    }
}

/// Minimizes `f` from `x0`; `f` returns value and gradient.
pub fn lbfgs<F>(mut f: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut fx, mut g) = f(&x0)?;
    if !fx.is_finite() {
        return Err(Error::Divergence("objective is not finite at the start point".into()));
    }
    let mut x = x0;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut evals = 0usize;
    let mut iter = 0;
    let mut converged = inf_norm(&g) <= cfg.gtol;
    let mut stall = 0;
    while !converged && iter < cfg.max_iter {
        iter += 1;
        // two-loop recursion
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alph = vec![0.0; k];
        for i in (0..k).rev() {
            alph[i] = rho_hist[i] * dot(&s_hist[i], &q);
            for (qv, yv) in q.iter_mut().zip(&y_hist[i]) {
                *qv -= alph[i] * yv;
            }
        }
        let gamma = if k > 0 { dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]) } else { 1.0 };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let b = rho_hist[i] * dot(&y_hist[i], &q);
            for (qv, sv) in q.iter_mut().zip(&s_hist[i]) {
                *qv += (alph[i] - b) * sv;
            }
        }
        let mut p: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut g0 = dot(&g, &p);
        if !(g0 < 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            p = g.iter().map(|v| -v).collect();
            g0 = dot(&g, &p);
        }
        let alpha0 = if k == 0 { (1.0 / inf_norm(&g).max(1e-300)).min(1.0) } else { 1.0 };
        let Some(pt) = line_search(&mut f, &x, &p, fx, g0, alpha0, &mut evals) else {
            if !s_hist.is_empty() {
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                continue;
            }
            break;
        };
        let s: Vec<f64> = p.iter().map(|v| pt.alpha * v).collect();
        let y: Vec<f64> = pt.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let df = fx - pt.f;
        x.iter_mut().zip(&s).for_each(|(xv, sv)| *xv += sv);
        fx = pt.f;
        g = pt.g;
        if sy > 1e-300 {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
        converged = inf_norm(&g) <= cfg.gtol;
        if df <= 1e-16 * fx.abs().max(1e-300) {
            stall += 1;
            if stall >= 4 {
                break;
            }
        } else {
            stall = 0;
        }
    }
    let gn = inf_norm(&g);
    // stationary to working precision even if gtol was not reached
    if !converged && gn <= 1e-6 * fx.abs().max(1.0) {
        converged = true;
    }
    let _ = n;
    Ok(LbfgsResult { x, f: fx, grad_norm: gn, iterations: iter, converged })
}

/// Outcome of one start.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub x: Vec<f64>,
    pub value: f64,
    pub energy: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl Candidate {
    pub fn from_lbfgs(r: LbfgsResult) -> Self {
        let energy = 0.5 * dot(&r.x, &r.x);
        Candidate { energy, value: r.f, x: r.x, iterations: r.iterations, grad_norm: r.grad_norm, converged: r.converged }
    }
}

/// Start points: zero, then `restarts` Gaussian vectors with per-coordinate scale `scale`.
pub fn start_points(dim: usize, scale: f64, cfg: &OptimConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let mut v = vec![vec![0.0; dim]];
    for _ in 0..cfg.restarts {
        v.push((0..dim).map(|_| normal.sample(&mut rng)).collect());
    }
    v
}

/// Runs `solve` from every start point in parallel and keeps the best candidate.
/// Ties within `1e-12` relative are broken by the smaller energy, then by start order.
pub fn multistart<S>(solve: S, starts: Vec<Vec<f64>>) -> Result<(Candidate, usize)>
where
    S: Fn(Vec<f64>) -> Result<Candidate> + Sync + Send,
{
    let n = starts.len();
    let results: Vec<Result<Candidate>> = starts.into_par_iter().map(&solve).collect();
    let mut best: Option<Candidate> = None;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(c) if c.value.is_finite() => {
                let replace = match &best {
                    None => true,
                    Some(b) => {
                        let tol = 1e-12 * (1.0 + b.value.abs());
                        c.value < b.value - tol || ((c.value - b.value).abs() <= tol && c.energy < b.energy)
                    }
                };
                if replace {
                    best = Some(c);
                }
            }
            Ok(_) => {}
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some(b) => Ok((b, n.saturating_sub(1))),
        None => Err(first_err.unwrap_or_else(|| Error::Divergence("no start produced a finite value".into()))),
    }
}
