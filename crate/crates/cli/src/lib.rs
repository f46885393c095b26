//! `stoturn`: solve stochastic optimal control problems on scenario trees and
//! check stationarity, dissipativity and turnpike behaviour from the command
//! line.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use turnpike_core::config::ProblemConfig;
use turnpike_core::dissipativity::{
    certify_dist, certify_lr, Certification, ComparisonFunction, DistDissipation, DistSampler,
    ExprStorage, IndependentSquaredDeviation, LrSampler, SquaredDeviation, StorageDist, StorageRv,
    ZeroStorage,
};
use turnpike_core::metrics::{self, MetricKind, DEFAULT_BISECT_TOL};
use turnpike_core::ocp::{self, Diagnostics, OCPInstance};
use turnpike_core::rv::{Atom, DiscreteDistribution, ScenarioTree};
use turnpike_core::stationary::{
    fixed_point_iteration, stationary_process, verify_stationary_distribution,
    verify_stationary_process, ProcessCheck, StationarityCheck, StationaryPair, STATIONARY_TOL,
};
use turnpike_core::system::{
    Builtin, ControlSystem, CostTerm, Dynamics, MarkovPolicy, TransitionOptions,
};
use turnpike_core::turnpike::{turnpike_report, TurnpikeReport, TurnpikeSetup};

pub mod example;
pub mod plot;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "STOTURN_OUT_DIR";

const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] turnpike_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(
    name = "stoturn",
    version,
    about = "Stochastic optimal control on scenario trees"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Wasserstein,
    #[value(alias = "levy-prokhorov")]
    Lp,
    Moment,
}

impl Kind {
    pub fn metric(self, order: u32) -> MetricKind {
        match self {
            Kind::Wasserstein => MetricKind::Wasserstein { order },
            Kind::Lp => MetricKind::LevyProkhorov,
            Kind::Moment => MetricKind::MomentDistance { order },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Notion {
    /// Random-variable form with a storage `λ(k, X)`.
    Lr,
    /// Distributional form with a storage `Λ(P)`.
    Dist,
}

/// Stationary reference shared by several subcommands.
#[derive(Debug, Clone, clap::Args)]
pub struct StationaryArgs {
    /// Stationary policy: `identity`, `table:x=u,...` or an expression in `x`.
    #[arg(long)]
    pub policy: Option<String>,
    /// Stationary distribution (JSON atoms); found by fixed-point iteration
    /// from the noise law when omitted.
    #[arg(long)]
    pub dist: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the finite-horizon problem.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the horizon in the config.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turnpike counts, bounds and the metric hierarchy at several horizons.
    TurnpikeReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
        horizons: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.5,1.0")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        order: u32,
        /// `squared-deviation`, `zero` or an expression in `x` (state) and `w`
        /// (stationary state).
        #[arg(long, default_value = "squared-deviation")]
        storage: String,
        #[arg(long, default_value_t = 0.0)]
        storage_lower_bound: f64,
        #[arg(long, default_value = "identity")]
        alpha: ComparisonFunction,
        /// Distributional metrics to count.
        #[arg(long, value_delimiter = ',', default_value = "wasserstein,lp")]
        metrics: Vec<Kind>,
        #[command(flatten)]
        stationary: StationaryArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distance between two distributions given as JSON files.
    Metrics {
        #[arg(long, value_enum, default_value = "wasserstein")]
        kind: Kind,
        #[arg(long, default_value_t = 1)]
        order: u32,
        #[arg(long, default_value_t = DEFAULT_BISECT_TOL)]
        bisect_tol: f64,
        a: PathBuf,
        b: PathBuf,
    },
    /// Certify a dissipation inequality on seeded random samples.
    DissipativityCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "lr")]
        notion: Notion,
        /// `lr`: `squared-deviation`, `zero` or an expression in `x` and `w`;
        /// `dist`: `independent-squared-deviation` or `zero`.
        #[arg(long, default_value = "squared-deviation")]
        storage: String,
        #[arg(long, default_value_t = 0.0)]
        storage_lower_bound: f64,
        #[arg(long, default_value = "identity")]
        alpha: ComparisonFunction,
        #[arg(long, default_value_t = 2)]
        order: u32,
        /// Metric for the distributional notion.
        #[arg(long, value_enum, default_value = "wasserstein")]
        metric: Kind,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        max_depth: usize,
        #[command(flatten)]
        stationary: StationaryArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a stationary pair and the process it generates.
    StationaryCheck {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        stationary: StationaryArgs,
        #[arg(long, value_enum, default_value = "wasserstein")]
        metric: Kind,
        #[arg(long, default_value_t = 1)]
        order: u32,
        #[arg(long, default_value_t = STATIONARY_TOL)]
        tol: f64,
        /// Depth of the generated process.
        #[arg(long, default_value_t = 10)]
        depth: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the built-in example at several horizons and write CSV paths,
    /// SVG plots and JSON reports.
    ReproduceExample {
        #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
        horizons: Vec<usize>,
        /// Defaults to `$STOTURN_OUT_DIR`, then `out`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns 0 on success, 1 on a domain error and 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Solve {
            config,
            horizon,
            out,
        } => solve(&config, horizon, out.as_deref()),
        Command::TurnpikeReport {
            config,
            horizons,
            eps,
            order,
            storage,
            storage_lower_bound,
            alpha,
            metrics,
            stationary,
            out,
        } => {
            let cfg = ProblemConfig::load(&config)?;
            let system = cfg.system()?;
            let pair = stationary_pair(&cfg, &system, &stationary)?;
            let storage = storage_rv(&storage, storage_lower_bound)?;
            let setup = TurnpikeSetup {
                system: &system,
                x0: cfg.x0.to_distribution(),
                pair: &pair,
                storage: storage.as_ref(),
                alpha,
                order,
                eps_grid: eps,
                metrics: metrics.iter().map(|k| k.metric(order)).collect(),
                opt: cfg.opt_config(),
            };
            let reports = horizons
                .iter()
                .map(|&n| turnpike_report(&setup, n))
                .collect::<turnpike_core::Result<Vec<TurnpikeReport>>>()?;
            write_json(out.as_deref(), &reports)
        }
        Command::Metrics {
            kind,
            order,
            bisect_tol,
            a,
            b,
        } => {
            let p = read_distribution(&a)?;
            let q = read_distribution(&b)?;
            let d = match kind {
                Kind::Lp => metrics::levy_prokhorov(&p, &q, bisect_tol)?,
                other => other.metric(order).distance(&p, &q)?,
            };
            println!("{d}");
            Ok(())
        }
        Command::DissipativityCheck {
            config,
            notion,
            storage,
            storage_lower_bound,
            alpha,
            order,
            metric,
            samples,
            seed,
            max_depth,
            stationary,
            out,
        } => {
            let cfg = ProblemConfig::load(&config)?;
            let system = cfg.system()?;
            let pair = stationary_pair(&cfg, &system, &stationary)?;
            let certification = match notion {
                Notion::Lr => {
                    let storage = storage_rv(&storage, storage_lower_bound)?;
                    let sampler = LrSampler {
                        max_depth,
                        ..LrSampler::default()
                    };
                    certify_lr(
                        &system,
                        storage.as_ref(),
                        &alpha,
                        order,
                        &pair,
                        &sampler,
                        samples,
                        seed,
                    )?
                }
                Notion::Dist => {
                    let storage = storage_dist(&storage, &pair)?;
                    let setting = DistDissipation {
                        system: &system,
                        storage: storage.as_ref(),
                        alpha: alpha.clone(),
                        metric: metric.metric(order),
                        stationary: &pair,
                    };
                    certify_dist(&setting, &DistSampler::default(), samples, seed)?
                }
            };
            let report = DissipativityOutput {
                notion: match notion {
                    Notion::Lr => "lr",
                    Notion::Dist => "dist",
                },
                storage,
                alpha: alpha.to_string(),
                seed,
                stationary_cost: pair.stationary_cost,
                passed: certification.passed(),
                certification,
            };
            write_json(out.as_deref(), &report)
        }
        Command::StationaryCheck {
            config,
            stationary,
            metric,
            order,
            tol,
            depth,
            out,
        } => {
            let cfg = ProblemConfig::load(&config)?;
            let system = cfg.system()?;
            let pair = stationary_pair(&cfg, &system, &stationary)?;
            let metric = metric.metric(order);
            let distribution = verify_stationary_distribution(&pair, &system, metric, tol)?;
            let process = if distribution.stationary {
                let tree = Arc::new(ScenarioTree::fanned(
                    &pair.distribution,
                    system.noise.clone(),
                    depth,
                )?);
                let (xs, us) = stationary_process(&pair, &system, tree)?;
                Some(verify_stationary_process(&xs, &us, &pair, metric, tol)?)
            } else {
                None
            };
            write_json(
                out.as_deref(),
                &StationaryOutput {
                    policy: pair.policy.to_string(),
                    distribution: &pair.distribution,
                    stationary_cost: pair.stationary_cost,
                    check: distribution,
                    process,
                },
            )
        }
        Command::ReproduceExample { horizons, out_dir } => {
            let dir = out_dir
                .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
            let files = example::reproduce(&horizons, &dir)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    horizon: usize,
    cost: f64,
    stage_costs: &'a [f64],
    diagnostics: &'a Diagnostics,
    markov_consistent: bool,
    /// Node probabilities per depth.
    probabilities: Vec<&'a [f64]>,
    states: &'a [Vec<f64>],
    controls: &'a [Vec<f64>],
}

fn solve(config: &Path, horizon: Option<usize>, out: Option<&Path>) -> Result<()> {
    let cfg = ProblemConfig::load(config)?;
    let n = horizon.unwrap_or(cfg.horizon);
    let inst = OCPInstance::new(cfg.system()?, cfg.x0.clone(), n)?;
    let sol = ocp::solve(&inst, &cfg.opt_config())?;
    let tree = inst.tree();
    write_json(
        out,
        &SolveOutput {
            horizon: n,
            cost: sol.cost,
            stage_costs: &sol.stage_costs,
            diagnostics: &sol.diagnostics,
            markov_consistent: sol.markov_consistent,
            probabilities: (0..=n).map(|k| tree.probs(k)).collect(),
            states: sol.states.layers(),
            controls: sol.controls.layers(),
        },
    )
}

#[derive(Serialize)]
struct DissipativityOutput {
    notion: &'static str,
    storage: String,
    alpha: String,
    seed: u64,
    stationary_cost: f64,
    passed: bool,
    #[serde(flatten)]
    certification: Certification,
}

#[derive(Serialize)]
struct StationaryOutput<'a> {
    policy: String,
    distribution: &'a DiscreteDistribution,
    stationary_cost: f64,
    check: StationarityCheck,
    /// Present when the distribution itself is stationary.
    process: Option<ProcessCheck>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DistributionFile {
    Atoms(Vec<Atom>),
    Wrapped { atoms: Vec<Atom> },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Failure::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a distribution given as a JSON array of `{"value", "prob"}` atoms or
/// as `{"atoms": [...]}`.
pub fn read_distribution(path: &Path) -> Result<DiscreteDistribution> {
    let text = read_text(path)?;
    let parsed: DistributionFile = serde_json::from_str(&text)
        .or_else(|_| serde_json::from_str::<Vec<Atom>>(&text).map(DistributionFile::Atoms))
        .map_err(|e| Failure::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let atoms = match parsed {
        DistributionFile::Atoms(a) | DistributionFile::Wrapped { atoms: a } => a,
    };
    Ok(DiscreteDistribution::new(atoms)?)
}

/// Writes pretty JSON to `out` (creating parent directories) or to stdout.
pub fn write_json<T: Serialize + ?Sized>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| Failure::Io {
                path: PathBuf::from("<stdout>"),
                source,
            }),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Failure::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    fs::write(path, bytes).map_err(io_err)
}

fn storage_rv(spec: &str, lower_bound: f64) -> Result<Box<dyn StorageRv>> {
    Ok(match spec.trim() {
        "squared-deviation" => Box::new(SquaredDeviation),
        "zero" => Box::new(ZeroStorage),
        expr => Box::new(ExprStorage {
            integrand: expr.parse().map_err(turnpike_core::Error::from)?,
            lower_bound,
        }),
    })
}

fn storage_dist(spec: &str, pair: &StationaryPair) -> Result<Box<dyn StorageDist>> {
    match spec.trim() {
        "independent-squared-deviation" | "squared-deviation" => {
            Ok(Box::new(IndependentSquaredDeviation {
                reference: pair.distribution.clone(),
            }))
        }
        "zero" => Ok(Box::new(ZeroStorage)),
        other => Err(turnpike_core::Error::InvalidArgument(format!(
            "unknown distributional storage {other:?}"
        ))
        .into()),
    }
}

fn is_counterexample(cfg: &ProblemConfig) -> bool {
    matches!(
        cfg.dynamics,
        Dynamics::Builtin(Builtin::CounterexampleMultiplicative)
    )
}

/// Stationary pair from the flags, with defaults per system: the zero policy
/// and the target law for the multiplicative counterexample, otherwise the
/// identity policy and the fixed point reached from the noise law.
pub fn stationary_pair(
    cfg: &ProblemConfig,
    system: &ControlSystem,
    args: &StationaryArgs,
) -> Result<StationaryPair> {
    let policy: MarkovPolicy = match &args.policy {
        Some(spec) => spec.parse()?,
        None if is_counterexample(cfg) => MarkovPolicy::expr("0")?,
        None => MarkovPolicy::Identity,
    };
    let target = system.cost.iter().find_map(|t| match t {
        CostTerm::MetricToTarget { target, .. } => Some(target.clone()),
        _ => None,
    });
    let distribution = match (&args.dist, target) {
        (Some(path), _) => read_distribution(path)?,
        (None, Some(target)) if is_counterexample(cfg) => target,
        _ => {
            let fp = fixed_point_iteration(
                &policy,
                system.noise.distribution(),
                system,
                MetricKind::default(),
                STATIONARY_TOL,
                1000,
                &TransitionOptions::default(),
            )?;
            if !fp.converged {
                return Err(turnpike_core::Error::NotStationary {
                    distance: fp.distance,
                    tol: STATIONARY_TOL,
                }
                .into());
            }
            fp.distribution
        }
    };
    Ok(StationaryPair::new(distribution, policy, system)?)
}
