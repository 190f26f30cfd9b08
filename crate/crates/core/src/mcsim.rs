//! Monte Carlo simulation of the scaled model and empirical rate estimates.
//!
//! Each path (or antithetic pair) owns a ChaCha8 stream keyed by `(seed, index)`, and
//! work is split into fixed-size blocks reduced in order, so results do not depend on
//! the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::optim::OptimConfig;
use crate::paths::TimeGrid;
use crate::pricing::{exit_asymptote, ExitDomain};
use crate::ratefn::inf_tail;
use crate::volmap::{VolMap, VolProcessSpec, VolterraSolver};

const BLOCK: usize = 2048;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelSpec,
    pub epsilon_ladder: Vec<f64>,
    pub n_paths: usize,
    /// Time steps of the simulation grid on `[0, T]`; the model's own grid when absent.
    #[serde(default)]
    pub n_steps: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

impl SimConfig {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.model.horizon, self.n_steps.unwrap_or(self.model.n_steps))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.grid()?;
        if self.epsilon_ladder.is_empty() {
            return Err(Error::InvalidModel("epsilon ladder is empty".into()));
        }
        if self.epsilon_ladder.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(Error::InvalidModel("epsilon values must lie in (0, 1]".into()));
        }
        if self.epsilon_ladder.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidModel("epsilon ladder must be strictly decreasing".into()));
        }
        if self.n_paths == 0 || (self.antithetic && !self.n_paths.is_multiple_of(2)) {
            return Err(Error::InvalidModel("n_paths must be positive (and even with antithetic pairs)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McRow {
    pub epsilon: f64,
    pub estimate: f64,
    /// `-ε log(estimate)`; `None` when no path contributed (the `-∞` flag on `ε log`).
    pub eps_log_estimate: Option<f64>,
    /// Standard error of `estimate`.
    pub std_error: f64,
    /// Delta-method standard error of `eps_log_estimate`.
    pub eps_log_std_error: Option<f64>,
    /// Independent samples (pairs when antithetic).
    pub n_effective: usize,
    /// Paths with a positive payoff.
    pub hits: usize,
    /// Paths dropped because the volatility blew up.
    pub excluded: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McReport {
    pub quantity: String,
    pub rows: Vec<McRow>,
    pub reference_rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl McReport {
    /// Rows as CSV text.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epsilon", "estimate", "eps_log_estimate", "std_error", "eps_log_std_error", "n_effective", "hits", "excluded"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "-inf".into());
        for r in &self.rows {
            w.write_record([
                r.epsilon.to_string(),
                r.estimate.to_string(),
                opt(r.eps_log_estimate),
                r.std_error.to_string(),
                r.eps_log_std_error.map(|x| x.to_string()).unwrap_or_default(),
                r.n_effective.to_string(),
                r.hits.to_string(),
                r.excluded.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn fill_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Nodal volatility paths `(n+1) × d` for each simulated path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolEnsemble {
    pub grid: TimeGrid,
    pub d: usize,
    pub paths: Vec<Vec<f64>>,
    /// Paths dropped because of blow-up.
    pub excluded: usize,
}

fn vol_map_for_sim(spec: &VolProcessSpec, grid: TimeGrid) -> Result<VolMap> {
    Ok(VolMap::new(spec, grid)?.with_solver(VolterraSolver::Forward))
}

/// Simulates the scaled volatility process; path `i` uses stream `i` of `seed`.
pub fn simulate_vol(spec: &VolProcessSpec, epsilon: f64, n_paths: usize, grid: TimeGrid, seed: u64) -> Result<VolEnsemble> {
    if !(epsilon >= 0.0) {
        return Err(Error::Domain("epsilon must be nonnegative".into()));
    }
    let vm = vol_map_for_sim(spec, grid)?;
    let n = grid.n_steps;
    let m = spec.m;
    let scale = epsilon.sqrt() / grid.dt().sqrt();
    let out: Vec<Option<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let mut z = vec![0.0; 2 * n * m];
            fill_normals(&mut rng, &mut z);
            // the second half of the draws drives B, matching the log-price simulator
            let fdot: Vec<f64> = z[n * m..].iter().map(|v| v * scale).collect();
            vm.forward(&fdot).ok().map(|t| t.fhat)
        })
        .collect();
    let excluded = out.iter().filter(|p| p.is_none()).count();
    Ok(VolEnsemble { grid, d: spec.d, paths: out.into_iter().flatten().collect(), excluded })
}

/// Euler simulator of the log-price displacement for one noise vector.
struct PathSim<'a> {
    model: &'a Model,
    eps: f64,
}

impl<'a> PathSim<'a> {
    /// `z`: `n·m` draws for `W` followed by `n·m` draws for `B`; returns nodal `X - x0`.
    fn run(&self, z: &[f64], sign: f64, x: &mut [f64]) -> Result<()> {
        let md = self.model;
        let (n, m, d) = (md.grid.n_steps, md.m(), md.d());
        let dt = md.grid.dt();
        let sq = dt.sqrt();
        let se = self.eps.sqrt();
        let (zw, zb) = z.split_at(n * m);
        let fdot: Vec<f64> = zb.iter().map(|v| sign * se * v / sq).collect();
        let tr = md.vol.forward(&fdot)?;
        let mut sig = vec![0.0; m * m];
        let mut b = vec![0.0; m];
        let mut noise = vec![0.0; m];
        x[..m].iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            let t = md.grid.node(j);
            let u = &tr.fhat[j * d..(j + 1) * d];
            md.sigma_into(t, u, &mut sig);
            md.drift_into(t, u, &mut b);
            for a in 0..m {
                noise[a] = (0..m)
                    .map(|c| md.cbar[a * m + c] * zw[j * m + c] + md.c[a * m + c] * zb[j * m + c])
                    .sum::<f64>()
                    * sign
                    * sq;
            }
            for a in 0..m {
                let row = &sig[a * m..(a + 1) * m];
                let var: f64 = row.iter().map(|v| v * v).sum();
                let shock: f64 = row.iter().zip(&noise).map(|(s, w)| s * w).sum();
                x[(j + 1) * m + a] = x[j * m + a] + (b[a] - 0.5 * self.eps * var) * dt + se * shock;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("log-price is not finite".into()));
        }
        Ok(())
    }
}

/// Terminal (and optionally full) samples of `X_T - x0`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogPriceSamples {
    pub epsilon: f64,
    pub m: usize,
    /// `n_paths × m`
    pub terminal: Vec<f64>,
    /// `(n+1) × m` nodal paths when requested.
    #[serde(default)]
    pub paths: Option<Vec<Vec<f64>>>,
    pub excluded: usize,
}

fn compile(cfg: &SimConfig) -> Result<Model> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut model = Model::on_grid(&cfg.model, grid)?;
    model.vol = vol_map_for_sim(&cfg.model.vol, grid)?;
    Ok(model)
}

/// Simulates `n_paths` log-price paths at noise level `epsilon` (antithetic pairs share a stream).
pub fn simulate_logprice(cfg: &SimConfig, epsilon: f64, keep_paths: bool) -> Result<LogPriceSamples> {
    if !(epsilon >= 0.0) {
        return Err(Error::Domain("epsilon must be nonnegative".into()));
    }
    let model = compile(cfg)?;
    let sim = PathSim { model: &model, eps: epsilon };
    let (n, m) = (model.grid.n_steps, model.m());
    let per = if cfg.antithetic { 2 } else { 1 };
    let units = cfg.n_paths / per;
    let out: Vec<Vec<Option<Vec<f64>>>> = (0..units)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, i as u64);
            let mut z = vec![0.0; 2 * n * m];
            fill_normals(&mut rng, &mut z);
            let signs: &[f64] = if cfg.antithetic { &[1.0, -1.0] } else { &[1.0] };
            signs
                .iter()
                .map(|s| {
                    let mut x = vec![0.0; (n + 1) * m];
                    sim.run(&z, *s, &mut x).ok().map(|_| x)
                })
                .collect()
        })
        .collect();
    let mut terminal = Vec::with_capacity(cfg.n_paths * m);
    let mut paths = Vec::new();
    let mut excluded = 0;
    for p in out.into_iter().flatten() {
        match p {
            Some(x) => {
                terminal.extend_from_slice(&x[n * m..]);
                if keep_paths {
                    paths.push(x);
                }
            }
            None => excluded += 1,
        }
    }
    Ok(LogPriceSamples { epsilon, m, terminal, paths: keep_paths.then_some(paths), excluded })
}

#[derive(Clone, Copy, Default)]
struct Acc {
    sum: f64,
    sumsq: f64,
    count: usize,
    hits: usize,
    excluded: usize,
}

/// Runs `payoff` on every path at level `eps` and reduces block sums in order.
fn estimate<P>(cfg: &SimConfig, model: &Model, eps: f64, payoff: &P) -> Acc
where
    P: Fn(&[f64]) -> f64 + Sync,
{
    let sim = PathSim { model, eps };
    let (n, m) = (model.grid.n_steps, model.m());
    let per = if cfg.antithetic { 2 } else { 1 };
    let units = cfg.n_paths / per;
    let blocks = units.div_ceil(BLOCK);
    let parts: Vec<Acc> = (0..blocks)
        .into_par_iter()
        .map(|bi| {
            let mut acc = Acc::default();
            let mut z = vec![0.0; 2 * n * m];
            let mut x = vec![0.0; (n + 1) * m];
            for i in bi * BLOCK..((bi + 1) * BLOCK).min(units) {
                let mut rng = stream(cfg.seed, i as u64);
                fill_normals(&mut rng, &mut z);
                let mut total = 0.0;
                let mut ok = 0;
                for s in if cfg.antithetic { &[1.0, -1.0][..] } else { &[1.0][..] } {
                    match sim.run(&z, *s, &mut x) {
                        Ok(()) => {
                            let v = payoff(&x);
                            if v > 0.0 {
                                acc.hits += 1;
                            }
                            total += v;
                            ok += 1;
                        }
                        Err(_) => acc.excluded += 1,
                    }
                }
                if ok > 0 {
                    let v = total / ok as f64;
                    acc.sum += v;
                    acc.sumsq += v * v;
                    acc.count += 1;
                }
            }
            acc
        })
        .collect();
    parts.into_iter().fold(Acc::default(), |a, b| Acc {
        sum: a.sum + b.sum,
        sumsq: a.sumsq + b.sumsq,
        count: a.count + b.count,
        hits: a.hits + b.hits,
        excluded: a.excluded + b.excluded,
    })
}

fn report<P>(cfg: &SimConfig, quantity: &str, reference_rate: f64, payoff: P) -> Result<McReport>
where
    P: Fn(&[f64]) -> f64 + Sync,
{
    let model = compile(cfg)?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    if cfg.n_paths < 1000 {
        warnings.push(format!("only {} paths; estimates are unreliable below 1000", cfg.n_paths));
    }
    for &eps in &cfg.epsilon_ladder {
        let a = estimate(cfg, &model, eps, &payoff);
        let nf = a.count.max(1) as f64;
        let mean = a.sum / nf;
        let var = if a.count > 1 { ((a.sumsq / nf - mean * mean) * nf / (nf - 1.0)).max(0.0) } else { 0.0 };
        let se = (var / nf).sqrt();
        let (el, els) = if mean > 0.0 { (Some(-eps * mean.ln()), Some(eps * se / mean)) } else { (None, None) };
        if a.excluded > 0 {
            warnings.push(format!("{} paths excluded at epsilon = {eps}", a.excluded));
        }
        rows.push(McRow {
            epsilon: eps,
            estimate: mean,
            eps_log_estimate: el,
            std_error: se,
            eps_log_std_error: els,
            n_effective: a.count,
            hits: a.hits,
            excluded: a.excluded,
        });
    }
    if rows.iter().all(|r| r.hits == 0) {
        return Err(Error::InsufficientSampling(format!("no path hit the event at any epsilon ({quantity})")));
    }
    Ok(McReport { quantity: quantity.into(), rows, reference_rate, warnings })
}

/// `-ε log P(X_T - x0 ≥ k)` along the ladder, against `inf_{x ≥ k} Ĩ_T(x)`.
pub fn ldp_tail_report(cfg: &SimConfig, k: f64, opt: &OptimConfig) -> Result<McReport> {
    if cfg.model.m != 1 {
        return Err(Error::Dimension("tail reports require m = 1".into()));
    }
    let rate = inf_tail(&cfg.model, k, opt)?.value;
    let n = cfg.grid()?.n_steps;
    report(cfg, "tail_probability", rate, move |x| if x[n] >= k { 1.0 } else { 0.0 })
}

/// `-ε log E[(S_T - K)⁺]` along the ladder, against the call rate.
pub fn mc_call_report(cfg: &SimConfig, strike: f64, opt: &OptimConfig) -> Result<McReport> {
    if cfg.model.m != 1 {
        return Err(Error::Dimension("call reports require m = 1".into()));
    }
    if !(strike > 0.0) {
        return Err(Error::Domain("strike must be positive".into()));
    }
    let s0 = cfg.model.s0[0];
    let rate = crate::pricing::call_asymptote(&cfg.model, strike, opt)?.rate;
    let n = cfg.grid()?.n_steps;
    report(cfg, "call_price", rate, move |x| (s0 * x[n].exp() - strike).max(0.0))
}

/// `-ε log P(τ ≤ t)` for exit of the log-price from `domain` (log coordinates), checked at nodes.
pub fn mc_exit_report(cfg: &SimConfig, domain: &ExitDomain, t: f64, opt: &OptimConfig) -> Result<McReport> {
    let m = cfg.model.m;
    let x0 = cfg.model.x0();
    if !domain.face_distances(&x0)?.iter().all(|d| *d >= 0.0) {
        return Err(Error::Domain("initial log-price lies outside the exit domain".into()));
    }
    let rate = exit_asymptote(&cfg.model, domain, t, opt)?.rate;
    let grid = cfg.grid()?;
    let last = (0..=grid.n_steps).filter(|&i| grid.node(i) <= t * (1.0 + 1e-12)).max().unwrap_or(0);
    let dom = domain.clone();
    report(cfg, "exit_probability", rate, move |x| {
        let mut pt = vec![0.0; m];
        for i in 0..=last {
            for c in 0..m {
                pt[c] = x0[c] + x[i * m + c];
            }
            if dom.face_distances(&pt).map(|d| d.iter().any(|v| *v <= 0.0)).unwrap_or(false) {
                return 1.0;
            }
        }
        0.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::func::ScalarFn;
    use crate::kernels::{slice_variance, KernelSpec};
    use crate::model::{DriftSpec, StateFn, VolatilitySpec};
    use crate::paths::Control;

    fn bs(sigma: f64) -> ModelSpec {
        ModelSpec {
            name: None,
            horizon: 1.0,
            n_steps: 20,
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

    fn cfg(model: ModelSpec, n: usize) -> SimConfig {
        SimConfig { model, epsilon_ladder: vec![1.0], n_paths: n, n_steps: None, seed: 7, antithetic: false }
    }

    #[test]
    fn gaussian_vol_variance() {
        let spec = VolProcessSpec::gaussian(vec![0.0], vec![vec![Some(KernelSpec::RiemannLiouville { hurst: 0.3 })]]);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let e = simulate_vol(&spec, 1.0, 20000, grid, 3).unwrap();
        let term: Vec<f64> = e.paths.iter().map(|p| p[50]).collect();
        let nf = term.len() as f64;
        let mean = term.iter().sum::<f64>() / nf;
        let var = term.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        // discrete variance of the cell-averaged kernel
        let vm = VolMap::new(&spec, grid).unwrap();
        let mut exact = 0.0;
        for j in 0..50 {
            let mut unit = vec![0.0; 50];
            unit[j] = 1.0 / grid.dt().sqrt();
            exact += vm.forward(&unit).unwrap().fhat[50].powi(2);
        }
        let se = exact * (2.0 / nf).sqrt();
        assert!((var - exact).abs() < 3.0 * se, "{var} vs {exact}");
        let cont = slice_variance(&KernelSpec::RiemannLiouville { hurst: 0.3 }, 1.0).unwrap();
        assert!((exact - cont).abs() < 0.05 * cont);
    }

    #[test]
    fn zero_noise_is_skeleton() {
        let spec = VolProcessSpec::toy();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let e = simulate_vol(&spec, 0.0, 3, grid, 1).unwrap();
        let sk = crate::volmap::hat_map(&spec, &Control::zeros(grid, 1)).unwrap();
        assert!(e.paths.iter().all(|p| p == &sk.values));
        let mut c = cfg(bs(0.2), 4);
        c.model.rate = 0.03;
        let s = simulate_logprice(&c, 0.0, false).unwrap();
        assert!(s.terminal.iter().all(|v| (v - 0.03).abs() < 1e-14));
    }

    #[test]
    fn scaled_coherence() {
        let spec = VolProcessSpec::toy();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let a = simulate_vol(&spec, 0.09, 50, grid, 11).unwrap();
        let b = simulate_vol(&spec, 1.0, 50, grid, 11).unwrap();
        for (p, q) in a.paths.iter().zip(&b.paths) {
            for (x, y) in p.iter().zip(q) {
                assert!((x - 0.3 * y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn black_scholes_variance() {
        let s = simulate_logprice(&cfg(bs(0.2), 40000), 1.0, false).unwrap();
        let nf = s.terminal.len() as f64;
        let mean = s.terminal.iter().sum::<f64>() / nf;
        let var = s.terminal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        assert!((var - 0.04).abs() < 3.0 * 0.04 * (2.0 / nf).sqrt());
        assert!((mean + 0.02).abs() < 3.0 * 0.2 / nf.sqrt());
    }

    #[test]
    fn deterministic_under_thread_count() {
        let mut c = cfg(bs(0.2), 5000);
        c.epsilon_ladder = vec![0.5, 0.2];
        let opt = OptimConfig { restarts: 0, ..OptimConfig::default() };
        let a = ldp_tail_report(&c, 0.1, &opt).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| ldp_tail_report(&c, 0.1, &opt).unwrap());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.estimate.to_bits(), y.estimate.to_bits());
            assert_eq!(x.std_error.to_bits(), y.std_error.to_bits());
        }
    }

    #[test]
    fn sure_event_and_zero_hits() {
        let mut c = cfg(bs(0.2), 2000);
        c.epsilon_ladder = vec![0.1];
        let opt = OptimConfig { restarts: 0, ..OptimConfig::default() };
        let r = ldp_tail_report(&c, -10.0, &opt).unwrap();
        assert!(r.rows[0].eps_log_estimate.unwrap().abs() < 1e-12);
        let far = ExitDomain::HalfSpace { normal: vec![1.0], offset: 50.0 };
        c.epsilon_ladder = vec![0.001];
        assert!(matches!(mc_exit_report(&c, &far, 1.0, &opt), Err(Error::InsufficientSampling(_))));
    }

    #[test]
    fn antithetic_agrees() {
        let mut c = cfg(bs(0.2), 20000);
        c.epsilon_ladder = vec![0.5];
        let opt = OptimConfig { restarts: 0, ..OptimConfig::default() };
        let plain = mc_call_report(&c, 1.05, &opt).unwrap();
        c.antithetic = true;
        let anti = mc_call_report(&c, 1.05, &opt).unwrap();
        let (p, a) = (&plain.rows[0], &anti.rows[0]);
        let se = (p.std_error.powi(2) + a.std_error.powi(2)).sqrt();
        assert!((p.estimate - a.estimate).abs() < 3.0 * se);
    }
}
