//! Problem configuration files.
//!
//! ```json
//! {
//!   "dynamics": "paper-example",
//!   "gamma": 50,
//!   "x0": 7,
//!   "horizon": 5
//! }
//! ```
//!
//! `dynamics` is a builtin name or an expression in `x`, `u`, `w`. Builtins
//! supply their own cost and noise, which `cost`, `cost_integrand`, `noise`
//! and `target` override. Expression dynamics need `noise` and at least one
//! of `cost` or `cost_integrand`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::ocp::OptConfig;
use crate::rv::{Atom, DiscreteDistribution, NoiseModel};
use crate::system::{Builtin, Constraint, ControlSystem, CostTerm, Dynamics, InitialState};

pub const DEFAULT_GAMMA: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSpec {
    Atoms(Vec<Atom>),
    Wrapped { atoms: Vec<Atom> },
}

impl NoiseSpec {
    fn model(&self) -> Result<NoiseModel> {
        match self {
            NoiseSpec::Atoms(a) | NoiseSpec::Wrapped { atoms: a } => NoiseModel::new(a.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub dynamics: Dynamics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<Vec<CostTerm>>,
    /// Adds `E[g(x, u)]` to the cost.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_integrand: Option<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default = "default_x0")]
    pub x0: InitialState,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub constraint: Constraint,
    /// Weight of `(E[u])²` for the paper example.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Target law for the multiplicative counterexample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<DiscreteDistribution>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptConfig>,
}

fn default_x0() -> InitialState {
    InitialState::Value(0.0)
}

fn default_horizon() -> usize {
    1
}

impl ProblemConfig {
    /// The built-in example with `x0 = 7`, `γ = 50`.
    pub fn paper_example(horizon: usize) -> Self {
        ProblemConfig {
            dynamics: Dynamics::Builtin(Builtin::PaperExample),
            cost: None,
            cost_integrand: None,
            noise: None,
            x0: InitialState::Value(7.0),
            horizon,
            constraint: Constraint::None,
            gamma: Some(DEFAULT_GAMMA),
            target: None,
            seed: 0,
            optimizer: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ProblemConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.system()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Optimizer settings with the configured seed.
    pub fn opt_config(&self) -> OptConfig {
        let mut cfg = self.optimizer.unwrap_or_default();
        cfg.seed = self.seed;
        cfg
    }

    pub fn system(&self) -> Result<ControlSystem> {
        let mut sys = match &self.dynamics {
            Dynamics::Builtin(b) => {
                let mut sys = ControlSystem::builtin(*b, self.gamma.unwrap_or(DEFAULT_GAMMA));
                if let Some(target) = &self.target {
                    for term in &mut sys.cost {
                        if let CostTerm::MetricToTarget { target: t, .. } = term {
                            *t = target.clone();
                        }
                    }
                }
                if self.cost.is_some() || self.cost_integrand.is_some() {
                    sys.cost.clear();
                }
                sys
            }
            Dynamics::Expr(_) => {
                let noise = self
                    .noise
                    .as_ref()
                    .ok_or_else(|| Error::Config("expression dynamics need \"noise\"".into()))?
                    .model()?;
                if self.cost.is_none() && self.cost_integrand.is_none() {
                    return Err(Error::Config(
                        "expression dynamics need \"cost\" or \"cost_integrand\"".into(),
                    ));
                }
                ControlSystem {
                    dynamics: self.dynamics.clone(),
                    cost: Vec::new(),
                    noise,
                    constraint: Constraint::None,
                }
            }
        };
        if let Some(noise) = &self.noise {
            sys.noise = noise.model()?;
        }
        if let Some(cost) = &self.cost {
            sys.cost.extend(cost.iter().cloned());
        }
        if let Some(g) = &self.cost_integrand {
            sys.cost.push(CostTerm::Expectation {
                integrand: g.clone(),
                coefficient: 1.0,
            });
        }
        sys.constraint = self.constraint;
        sys.validate()?;
        Ok(sys)
    }
}
