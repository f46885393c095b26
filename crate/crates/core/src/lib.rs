//! Discrete-time stochastic optimal control with finite-support noise.
//!
//! Random variables live on explicit scenario trees ([`rv`]), so every
//! expectation is an exact weighted sum. On top of that the crate provides
//! probability metrics ([`metrics`]), a small expression language for
//! dynamics and costs ([`expr`]), rollouts and the transition operator on
//! distributions ([`system`]), a finite-horizon solver ([`ocp`]), stationary
//! pairs ([`stationary`]), dissipation inequalities ([`dissipativity`]) and
//! turnpike counters ([`turnpike`]).

pub mod config;
pub mod dissipativity;
pub mod error;
pub mod expr;
pub mod metrics;
pub mod norm;
pub mod ocp;
pub mod rv;
pub mod stationary;
pub mod system;
pub mod turnpike;

pub use error::{Error, Result};
pub use norm::Norm;
pub use rv::{AdaptedProcess, Atom, DiscreteDistribution, NoiseModel, ScenarioTree};
