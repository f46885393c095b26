//! The ambient norm on the state space.
//!
//! Every distance in the crate (L^r distances, Ky-Fan, Wasserstein ground
//! cost, Lévy-Prokhorov edges, moment norms) goes through [`norm`], so a
//! single process-wide setting keeps them consistent. Euclidean by default.

use std::sync::atomic::{AtomicU8, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Euclidean,
    Max,
    L1,
}

static AMBIENT: AtomicU8 = AtomicU8::new(0);

impl Norm {
    fn code(self) -> u8 {
        match self {
            Norm::Euclidean => 0,
            Norm::Max => 1,
            Norm::L1 => 2,
        }
    }

    fn from_code(code: u8) -> Norm {
        match code {
            1 => Norm::Max,
            2 => Norm::L1,
            _ => Norm::Euclidean,
        }
    }

    pub fn apply(self, v: &[f64]) -> f64 {
        match v {
            [x] => x.abs(),
            _ => match self {
                Norm::Euclidean => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
                Norm::Max => v.iter().fold(0.0, |m, x| m.max(x.abs())),
                Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            },
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match (a, b) {
            ([x], [y]) => (x - y).abs(),
            _ => match self {
                Norm::Euclidean => a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt(),
                Norm::Max => a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs())),
                Norm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            },
        }
    }
}

/// Sets the process-wide state-space norm.
pub fn set_ambient_norm(norm: Norm) {
    AMBIENT.store(norm.code(), Ordering::Relaxed);
}

pub fn ambient_norm() -> Norm {
    Norm::from_code(AMBIENT.load(Ordering::Relaxed))
}

/// `‖v‖` in the ambient norm.
pub fn norm(v: &[f64]) -> f64 {
    ambient_norm().apply(v)
}

/// `‖a − b‖` in the ambient norm.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    ambient_norm().distance(a, b)
}

/// Max-norm distance, used for atom aggregation regardless of the ambient norm.
pub(crate) fn max_distance(a: &[f64], b: &[f64]) -> f64 {
    Norm::Max.distance(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms_agree_in_one_dimension() {
        for n in [Norm::Euclidean, Norm::Max, Norm::L1] {
            assert_eq!(n.apply(&[-3.0]), 3.0);
            assert_eq!(n.distance(&[1.0], &[-0.5]), 1.5);
        }
    }

    #[test]
    fn vector_norms() {
        assert_eq!(Norm::Euclidean.distance(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
        assert_eq!(Norm::Max.distance(&[0.0, 0.0], &[3.0, 4.0]), 4.0);
        assert_eq!(Norm::L1.distance(&[0.0, 0.0], &[3.0, 4.0]), 7.0);
    }
}
