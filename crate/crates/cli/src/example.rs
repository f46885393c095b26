//! The built-in example: `x⁺ = (u − x)² + w`, `X(0) = 7`, `γ = 50`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use turnpike_core::config::{ProblemConfig, DEFAULT_GAMMA};
use turnpike_core::dissipativity::{
    certify_lr, rotated_cost_sum, Certification, ComparisonFunction, LrDissipation, LrSampler,
    RotatedSum, SquaredDeviation,
};
use turnpike_core::metrics::MetricKind;
use turnpike_core::ocp::{self, OCPInstance};
use turnpike_core::rv::ScenarioTree;
use turnpike_core::stationary::{stationary_process, StationaryPair};
use turnpike_core::system::{ControlSystem, MarkovPolicy};
use turnpike_core::turnpike::{analyze, couple, TurnpikeReport, TurnpikeSetup};
use turnpike_core::AdaptedProcess;

use crate::plot::realization_svg;
use crate::{write_file, write_json, Result};

pub const EPS_GRID: [f64; 4] = [0.05, 0.1, 0.5, 1.0];
pub const ORDER: u32 = 2;
pub const CERTIFICATION_SAMPLES: usize = 200;

pub const CSV_HEADER: [&str; 8] = [
    "horizon",
    "process",
    "path",
    "k",
    "noise",
    "state",
    "control",
    "probability",
];

/// One row per leaf of the tree and time step. `noise` at `k` is the noise
/// realized between `k` and `k + 1`; it and `control` are empty where they do
/// not exist.
pub fn path_rows(
    horizon: usize,
    process: &str,
    states: &AdaptedProcess,
    controls: &AdaptedProcess,
) -> Vec<[String; 8]> {
    let tree = states.tree();
    let depth = tree.depth();
    let mut rows = Vec::new();
    for leaf in 0..tree.node_count(depth) {
        let mut nodes = vec![leaf; depth + 1];
        for k in (0..depth).rev() {
            nodes[k] = tree.parent(nodes[k + 1]);
        }
        let prob = tree.prob(depth, leaf);
        for k in 0..=depth {
            let noise = if k < depth {
                tree.noise_value(nodes[k + 1])[0].to_string()
            } else {
                String::new()
            };
            let control = if k < controls.depths() {
                controls.scalar(k, nodes[k]).to_string()
            } else {
                String::new()
            };
            rows.push([
                horizon.to_string(),
                process.to_string(),
                leaf.to_string(),
                k.to_string(),
                noise,
                states.scalar(k, nodes[k]).to_string(),
                control,
                prob.to_string(),
            ]);
        }
    }
    rows
}

fn leaf_paths(states: &AdaptedProcess) -> Vec<Vec<f64>> {
    let tree = states.tree();
    let depth = tree.depth();
    (0..tree.node_count(depth))
        .map(|leaf| {
            let mut path = vec![0.0; depth + 1];
            let mut node = leaf;
            for k in (0..=depth).rev() {
                path[k] = states.scalar(k, node);
                if k > 0 {
                    node = tree.parent(node);
                }
            }
            path
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct HorizonDissipation {
    pub horizon: usize,
    /// Rotated costs of the optimal trajectory against the telescoped form.
    pub rotated: RotatedSum,
}

#[derive(Debug, Serialize)]
pub struct DissipativityReport {
    pub gamma: f64,
    pub storage: &'static str,
    pub alpha: ComparisonFunction,
    pub stationary_cost: f64,
    pub certification: Certification,
    pub horizons: Vec<HorizonDissipation>,
}

pub struct HorizonRun {
    pub report: TurnpikeReport,
    pub rotated: RotatedSum,
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub json: PathBuf,
}

/// Solves one horizon and writes `paths_N{n}.csv`, `paths_N{n}.svg` and
/// `turnpike_N{n}.json` into `dir`.
pub fn run_horizon(
    system: &ControlSystem,
    pair: &StationaryPair,
    horizon: usize,
    dir: &Path,
) -> Result<HorizonRun> {
    let cfg = ProblemConfig::paper_example(horizon);
    let inst = OCPInstance::new(system.clone(), cfg.x0.clone(), horizon)?;
    let sol = ocp::solve(&inst, &cfg.opt_config())?;

    let stat_tree = Arc::new(ScenarioTree::fanned(
        &pair.distribution,
        system.noise.clone(),
        horizon,
    )?);
    let (stat_states, stat_controls) = stationary_process(pair, system, stat_tree)?;

    let csv = dir.join(format!("paths_N{horizon}.csv"));
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(CSV_HEADER)?;
    for row in path_rows(horizon, "optimal", &sol.states, &sol.controls)
        .into_iter()
        .chain(path_rows(
            horizon,
            "stationary",
            &stat_states,
            &stat_controls,
        ))
    {
        writer.write_record(&row)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    write_file(&csv, &bytes)?;

    let svg = dir.join(format!("paths_N{horizon}.svg"));
    let plot = realization_svg(
        &format!("Realization paths, N = {horizon}"),
        &leaf_paths(&sol.states),
        &leaf_paths(&stat_states),
    );
    write_file(&svg, plot.as_bytes())?;

    let setup = TurnpikeSetup {
        system,
        x0: cfg.x0.to_distribution(),
        pair,
        storage: &SquaredDeviation,
        alpha: ComparisonFunction::Identity,
        order: ORDER,
        eps_grid: EPS_GRID.to_vec(),
        metrics: vec![
            MetricKind::Wasserstein { order: ORDER },
            MetricKind::LevyProkhorov,
        ],
        opt: cfg.opt_config(),
    };
    let run = couple(system, &setup.x0, pair, &sol.states, &sol.controls)?;
    let report = analyze(
        &setup,
        horizon,
        sol.cost,
        sol.diagnostics,
        sol.markov_consistent,
        run,
    )?;
    let setting = LrDissipation {
        system,
        storage: &SquaredDeviation,
        alpha: ComparisonFunction::Identity,
        order: ORDER,
        stationary_cost: pair.stationary_cost,
        stationary_states: &report.stationary_states,
    };
    let rotated = rotated_cost_sum(&setting, &report.states, &report.controls, horizon)?;

    let json = dir.join(format!("turnpike_N{horizon}.json"));
    write_json(Some(&json), &report)?;
    Ok(HorizonRun {
        report,
        rotated,
        csv,
        svg,
        json,
    })
}

/// Runs every horizon and writes `dissipativity.json`; returns the files
/// written.
pub fn reproduce(horizons: &[usize], dir: &Path) -> Result<Vec<PathBuf>> {
    let system = ControlSystem::paper_example(DEFAULT_GAMMA);
    let pair = StationaryPair::new(
        system.noise.distribution().clone(),
        MarkovPolicy::Identity,
        &system,
    )?;
    let mut files = Vec::new();
    let mut per_horizon = Vec::new();
    for &n in horizons {
        let run = run_horizon(&system, &pair, n, dir)?;
        files.extend([run.csv, run.svg, run.json]);
        per_horizon.push(HorizonDissipation {
            horizon: n,
            rotated: run.rotated,
        });
    }
    let certification = certify_lr(
        &system,
        &SquaredDeviation,
        &ComparisonFunction::Identity,
        ORDER,
        &pair,
        &LrSampler::default(),
        CERTIFICATION_SAMPLES,
        0,
    )?;
    let report = DissipativityReport {
        gamma: DEFAULT_GAMMA,
        storage: "squared-deviation",
        alpha: ComparisonFunction::Identity,
        stationary_cost: pair.stationary_cost,
        certification,
        horizons: per_horizon,
    };
    let path = dir.join("dissipativity.json");
    write_json(Some(&path), &report)?;
    files.push(path);
    Ok(files)
}
