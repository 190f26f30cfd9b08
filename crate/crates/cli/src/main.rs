//! `svldp`: command-line front end for the rate-function, pricing and Monte Carlo routines.
//!
//! Every command echoes its resolved configuration next to the result so that the JSON
//! output can be replayed with `svldp run --config <file>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use svldp_core::kernels::{slice_variance, KernelSpec};
use svldp_core::mcsim::{ldp_tail_report, mc_call_report, mc_exit_report, McReport, SimConfig};
use svldp_core::model::ModelSpec;
use svldp_core::optim::{GradientMode, OptimConfig};
use svldp_core::paths::PathFn;
use svldp_core::presets;
use svldp_core::pricing::{
    asian_asymptote, barrier_asymptote, call_asymptote, exit_asymptote, implied_vol_limit, AsymptoteReport,
    ExitDomain,
};
use svldp_core::ratefn::{itilde_terminal, qtilde_path, RateResult};
use svldp_core::toymodel::{iv_limit_bounds, rate_bounds, toy_rate, ToyParams};

#[derive(Parser)]
#[command(name = "svldp", version, about = "Small-noise large-deviation rates for stochastic volatility models")]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true, env = "SVLDP_WORKERS")]
    workers: Option<usize>,

    /// Output format written to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Also write `<PREFIX>.json` and, when available, `<PREFIX>.csv`.
    #[arg(long, global = true, value_name = "PREFIX")]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Bundled model name.
    #[arg(long, conflicts_with = "model")]
    preset: Option<String>,

    /// Model specification as a JSON file.
    #[arg(long)]
    model: Option<PathBuf>,

    /// Override the number of time steps.
    #[arg(long)]
    steps: Option<usize>,

    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Clone)]
struct OptimArgs {
    /// Random restarts in addition to the zero start.
    #[arg(long)]
    restarts: Option<usize>,

    /// Seed for the restart initializations.
    #[arg(long)]
    seed: Option<u64>,

    /// Use central finite differences instead of adjoint gradients.
    #[arg(long)]
    fd_gradient: bool,
}

impl OptimArgs {
    fn resolve(&self) -> OptimConfig {
        let mut cfg = OptimConfig::default();
        if let Some(r) = self.restarts {
            cfg.restarts = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.fd_gradient {
            cfg.gradient = GradientMode::FiniteDifference;
        }
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Path rate of the log-price along a target path.
    RatePath {
        #[command(flatten)]
        model: ModelArgs,
        /// Target path as CSV with columns t, x0, x1, ... on a uniform grid starting at 0.
        #[arg(long, conflicts_with = "slope")]
        path: Option<PathBuf>,
        /// Linear target path `g(t) = slope · t` (comma-separated, one entry per asset).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        slope: Option<Vec<f64>>,
    },
    /// Terminal rate of the log-price increment at `x`.
    RateTerminal {
        #[command(flatten)]
        model: ModelArgs,
        /// Terminal point (comma-separated, one entry per asset).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        x: Vec<f64>,
    },
    /// Exponent of out-of-the-money call prices; several strikes form a ladder.
    CallAsymptote {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        strike: Vec<f64>,
    },
    /// Small-noise implied-volatility limit at log-strikes `k`.
    IvLimit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<f64>,
    },
    /// Exponent of arithmetic-average Asian call prices.
    AsianAsymptote {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        strike: Vec<f64>,
    },
    /// Exponent of the probability that the log-price leaves a domain by time `t`.
    ExitRate {
        #[command(flatten)]
        model: ModelArgs,
        /// Exit domain in log coordinates: inline JSON or a JSON file.
        #[arg(long)]
        domain: String,
        /// Exit time; defaults to the model horizon.
        #[arg(long)]
        t: Option<f64>,
    },
    /// Exponent of a binary barrier: the price leaves a domain (price coordinates) by the horizon.
    BarrierRate {
        #[command(flatten)]
        model: ModelArgs,
        /// Barrier domain in price coordinates: inline JSON or a JSON file.
        #[arg(long)]
        domain: String,
    },
    /// Toy-model rate and its explicit rate and implied-vol bounds.
    ToyBounds {
        #[arg(long = "T")]
        t: f64,
        #[arg(long)]
        k: f64,
        /// Time steps for the rate optimization.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Monte Carlo check of a rate along an epsilon ladder.
    McVerify {
        /// Simulation configuration JSON (see README).
        #[arg(long)]
        config: PathBuf,
    },
    /// Properties of a Volterra kernel.
    KernelInfo {
        /// Kernel as inline JSON or a JSON file.
        #[arg(long)]
        kernel: String,
        /// Times at which to report the slice variance.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 1.0])]
        t: Vec<f64>,
    },
    /// Replay a resolved configuration previously echoed by another command.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

/// What to compute for a Monte Carlo check.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum McTarget {
    /// `P(X_T - x0 ≥ k)`.
    Tail { k: f64 },
    /// Undiscounted `E[(S_T - K)⁺]`.
    Call { strike: f64 },
    /// `P(τ ≤ t)` for the log-price leaving `domain`.
    Exit { domain: ExitDomain, t: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct McVerifyConfig {
    #[serde(flatten)]
    sim: SimConfig,
    target: McTarget,
    #[serde(default)]
    optim: OptimConfig,
}

/// Fully resolved command with every default filled in.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", content = "params", rename_all = "kebab-case")]
enum Task {
    RatePath { g: PathFn },
    RateTerminal { x: Vec<f64> },
    CallAsymptote { strikes: Vec<f64> },
    IvLimit { k: Vec<f64> },
    AsianAsymptote { strikes: Vec<f64> },
    ExitRate { domain: ExitDomain, t: f64 },
    BarrierRate { domain: ExitDomain },
    ToyBounds {
        #[serde(rename = "T")]
        t: f64,
        k: f64,
        n_steps: usize,
    },
    McVerify(McVerifyConfig),
    KernelInfo { kernel: KernelSpec, times: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunConfig {
    #[serde(flatten)]
    task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelSpec>,
    #[serde(default)]
    optim: OptimConfig,
    #[serde(default)]
    workers: Option<usize>,
}

/// Input that does not match a command's schema (exit status 2).
#[derive(Debug)]
struct SchemaError(String);

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SchemaError {}

/// Result of a command plus its plot-ready CSV form.
struct Outcome {
    result: Value,
    csv: Option<String>,
    converged: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            e.print().ok();
            if code != 0 {
                eprintln!("{}", json!({"error": {"kind": "usage", "message": e.kind().to_string()}}));
            }
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("{}", json!({"error": {"kind": kind, "message": format!("{e:#}")}}));
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = resolve(cli.command)?;
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    if let Some(n) = cfg.workers {
        if n == 0 {
            return Err(schema("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    }
    let out = execute(&cfg)?;
    let envelope = json!({"config": cfg, "result": out.result});
    let json_text = serde_json::to_string_pretty(&envelope)?;
    match cli.format {
        Format::Json => emit(&format!("{json_text}\n"))?,
        Format::Csv => match &out.csv {
            Some(c) => emit(c)?,
            None => return Err(schema("this command has no CSV form")),
        },
    }
    if let Some(prefix) = &cli.output {
        write_with_ext(prefix, "json", &json_text)?;
        if let Some(c) = &out.csv {
            write_with_ext(prefix, "csv", c)?;
        }
    }
    if !out.converged {
        eprintln!(
            "{}",
            json!({"error": {"kind": "non_convergence", "message": "optimizer did not meet its stopping criterion", "diagnostics": out.result}})
        );
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

/// Writes to stdout, treating a closed reader as success.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing to stdout"),
        _ => Ok(()),
    }
}

fn write_with_ext(prefix: &Path, ext: &str, text: &str) -> Result<()> {
    let mut name = prefix.as_os_str().to_owned();
    name.push(".");
    name.push(ext);
    let path = PathBuf::from(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn schema(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(SchemaError(msg.into()))
}

/// Exit status and error tag for a failure.
fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    use svldp_core::Error as E;
    for cause in e.chain() {
        if cause.downcast_ref::<SchemaError>().is_some() {
            return (2, "schema");
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return (2, "json");
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (2, "io");
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            let code = match err {
                E::NonConvergence { .. } | E::Divergence(_) => 3,
                E::InvalidKernel(_)
                | E::Admissibility(_)
                | E::Dimension(_)
                | E::UnsupportedDomain(_)
                | E::UnsupportedForm(_)
                | E::Domain(_)
                | E::OutOfRange(_)
                | E::InvalidModel(_)
                | E::Io(_)
                | E::Json(_) => 2,
                _ => 1,
            };
            return (code, err.kind());
        }
    }
    (1, "internal")
}

/// Inline JSON when the argument looks like an object, otherwise a file path.
fn json_arg<T: serde::de::DeserializeOwned>(arg: &str, what: &str) -> Result<T> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).with_context(|| format!("reading {what} file {arg}"))?
    };
    serde_json::from_str(&text).with_context(|| format!("parsing {what}"))
}

fn load_model(args: &ModelArgs) -> Result<ModelSpec> {
    let mut spec = match (&args.preset, &args.model) {
        (Some(name), None) => presets::preset(name)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading model file {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing model file {}", path.display()))?
        }
        _ => return Err(schema("pass exactly one of --preset or --model")),
    };
    if let Some(n) = args.steps {
        spec = spec.with_steps(n);
    }
    spec.validate()?;
    Ok(spec)
}

fn model_config(args: &ModelArgs, task: Task) -> Result<RunConfig> {
    Ok(RunConfig { task, model: Some(load_model(args)?), optim: args.optim.resolve(), workers: None })
}

fn resolve(cmd: Command) -> Result<RunConfig> {
    match cmd {
        Command::RatePath { model, path, slope } => {
            let mut spec = load_model(&model)?;
            let g = match (path, slope) {
                (Some(p), None) => {
                    let file = fs::File::open(&p).with_context(|| format!("reading path file {}", p.display()))?;
                    let g = PathFn::read_csv(file, spec.horizon)?;
                    if model.steps.is_none() {
                        spec = spec.with_steps(g.grid.n_steps);
                    }
                    g
                }
                (None, Some(s)) => {
                    if s.len() != spec.m {
                        return Err(schema(format!("--slope needs {} entries", spec.m)));
                    }
                    PathFn::from_fn(spec.grid()?, spec.m, |t| s.iter().map(|v| v * t).collect())?
                }
                _ => return Err(schema("pass exactly one of --path or --slope")),
            };
            Ok(RunConfig { task: Task::RatePath { g }, model: Some(spec), optim: model.optim.resolve(), workers: None })
        }
        Command::RateTerminal { model, x } => model_config(&model, Task::RateTerminal { x }),
        Command::CallAsymptote { model, strike } => model_config(&model, Task::CallAsymptote { strikes: strike }),
        Command::IvLimit { model, k } => model_config(&model, Task::IvLimit { k }),
        Command::AsianAsymptote { model, strike } => model_config(&model, Task::AsianAsymptote { strikes: strike }),
        Command::ExitRate { model, domain, t } => {
            let spec = load_model(&model)?;
            let domain = json_arg(&domain, "exit domain")?;
            let t = t.unwrap_or(spec.horizon);
            Ok(RunConfig { task: Task::ExitRate { domain, t }, model: Some(spec), optim: model.optim.resolve(), workers: None })
        }
        Command::BarrierRate { model, domain } => {
            let domain = json_arg(&domain, "barrier domain")?;
            model_config(&model, Task::BarrierRate { domain })
        }
        Command::ToyBounds { t, k, steps, optim } => {
            Ok(RunConfig { task: Task::ToyBounds { t, k, n_steps: steps }, model: None, optim: optim.resolve(), workers: None })
        }
        Command::McVerify { config } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mc: McVerifyConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            let optim = mc.optim.clone();
            Ok(RunConfig { task: Task::McVerify(mc), model: None, optim, workers: None })
        }
        Command::KernelInfo { kernel, t } => {
            let kernel = json_arg(&kernel, "kernel")?;
            Ok(RunConfig { task: Task::KernelInfo { kernel, times: t }, model: None, optim: OptimConfig::default(), workers: None })
        }
        Command::Run { config } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            // accept either a bare config or a full output envelope
            let inner = value.get("config").cloned().unwrap_or(value);
            serde_json::from_value(inner).with_context(|| format!("parsing {}", config.display()))
        }
    }
}

fn need_model(cfg: &RunConfig) -> Result<&ModelSpec> {
    cfg.model.as_ref().ok_or_else(|| schema("this command needs a model"))
}

fn csv_of<F: FnOnce(&mut Vec<u8>) -> svldp_core::Result<()>>(f: F) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(String::from_utf8(buf)?)
}

fn rate_outcome(r: RateResult) -> Result<Outcome> {
    let csv = csv_of(|b| r.minimizer_f.write_csv(b))?;
    Ok(Outcome { converged: r.converged, csv: Some(csv), result: serde_json::to_value(r)? })
}

/// One report per input; a single input is emitted as a bare object.
fn ladder_outcome(column: &str, inputs: &[f64], reports: Vec<AsymptoteReport>) -> Result<Outcome> {
    let mut csv = format!("{column},rate,limit_value,converged,constraint_violation\n");
    for (x, r) in inputs.iter().zip(&reports) {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{x},{},{},{},{}\n",
            r.rate,
            opt(r.limit_value),
            r.diagnostics.converged,
            opt(r.diagnostics.constraint_violation)
        ));
    }
    let converged = reports.iter().all(|r| r.diagnostics.converged);
    let result = if reports.len() == 1 { serde_json::to_value(&reports[0])? } else { serde_json::to_value(&reports)? };
    Ok(Outcome { result, csv: Some(csv), converged })
}

fn nonempty(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(schema(format!("{what} list is empty")));
    }
    Ok(())
}

fn execute(cfg: &RunConfig) -> Result<Outcome> {
    let opt = &cfg.optim;
    match &cfg.task {
        Task::RatePath { g } => {
            let spec = need_model(cfg)?;
            rate_outcome(qtilde_path(spec, g, opt)?)
        }
        Task::RateTerminal { x } => {
            let spec = need_model(cfg)?;
            rate_outcome(itilde_terminal(spec, x, opt)?)
        }
        Task::CallAsymptote { strikes } => {
            nonempty(strikes, "strike")?;
            let spec = need_model(cfg)?;
            let reps = strikes.iter().map(|s| call_asymptote(spec, *s, opt)).collect::<svldp_core::Result<Vec<_>>>()?;
            ladder_outcome("strike", strikes, reps)
        }
        Task::IvLimit { k } => {
            nonempty(k, "k")?;
            let spec = need_model(cfg)?;
            let reps = k.iter().map(|v| implied_vol_limit(spec, *v, opt)).collect::<svldp_core::Result<Vec<_>>>()?;
            ladder_outcome("k", k, reps)
        }
        Task::AsianAsymptote { strikes } => {
            nonempty(strikes, "strike")?;
            let spec = need_model(cfg)?;
            let reps = strikes.iter().map(|s| asian_asymptote(spec, *s, opt)).collect::<svldp_core::Result<Vec<_>>>()?;
            ladder_outcome("strike", strikes, reps)
        }
        Task::ExitRate { domain, t } => {
            let spec = need_model(cfg)?;
            ladder_outcome("t", &[*t], vec![exit_asymptote(spec, domain, *t, opt)?])
        }
        Task::BarrierRate { domain } => {
            let spec = need_model(cfg)?;
            ladder_outcome("t", &[spec.horizon], vec![barrier_asymptote(spec, domain, opt)?])
        }
        Task::ToyBounds { t, k, n_steps } => {
            let p = ToyParams::new(*t, *k)?;
            let (lower, upper) = rate_bounds(p)?;
            let (iv_lower, iv_upper) = iv_limit_bounds(p)?;
            let r = toy_rate(p, *n_steps, opt)?;
            let result = json!({
                "rate": r.value,
                "lower": lower,
                "upper": upper,
                "iv_lower": iv_lower,
                "iv_upper": iv_upper,
                "converged": r.converged,
                "iterations": r.iterations,
            });
            let csv = format!("T,k,rate,lower,upper,iv_lower,iv_upper\n{t},{k},{},{lower},{upper},{iv_lower},{iv_upper}\n", r.value);
            Ok(Outcome { result, csv: Some(csv), converged: r.converged })
        }
        Task::McVerify(mc) => {
            mc.sim.validate()?;
            let rep: McReport = match &mc.target {
                McTarget::Tail { k } => ldp_tail_report(&mc.sim, *k, opt)?,
                McTarget::Call { strike } => mc_call_report(&mc.sim, *strike, opt)?,
                McTarget::Exit { domain, t } => mc_exit_report(&mc.sim, domain, *t, opt)?,
            };
            Ok(Outcome { csv: Some(rep.to_csv()?), result: serde_json::to_value(&rep)?, converged: true })
        }
        Task::KernelInfo { kernel, times } => {
            kernel.validate()?;
            let mut csv = String::from("t,slice_variance\n");
            let mut rows = Vec::new();
            for t in times {
                let v = slice_variance(kernel, *t)?;
                csv.push_str(&format!("{t},{v}\n"));
                rows.push(json!({"t": t, "slice_variance": v}));
            }
            let max_h = kernel.max_horizon();
            let result = json!({
                "kernel": kernel,
                "convolution": kernel.is_convolution(),
                "max_horizon": if max_h.is_finite() { json!(max_h) } else { Value::Null },
                "slice_variance": rows,
            });
            Ok(Outcome { result, csv: Some(csv), converged: true })
        }
    }
}
