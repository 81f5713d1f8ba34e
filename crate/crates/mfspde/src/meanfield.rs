//! Mean-field operators acting on scenario ensembles.
//!
//! The dynamics and profits depend on the law of the state through operators
//! `F: L^2(P) -> R` evaluated here on empirical ensembles. Three kinds are
//! supported:
//!
//! ```text
//! Expectation          F(X) = E[X]            grad F = 1
//! SmoothedMoment(phi)  F(X) = E[phi(X)]       grad F = phi'(X)   (phi' supplied)
//! Scaled(c)            F(X) = c E[X]          grad F = c
//! ```
//!
//! The Fréchet gradient is realized as per-sample weights `w_i`, paired with
//! a direction `Z` by the empirical inner product
//!
//! ```text
//! <grad F(X), Z> = (1/M) * sum_i w_i z_i,
//! ```
//!
//! which is the first-order expansion `F(X + eps Z) = F(X) + eps <grad F, Z>
//! + o(eps)`. No automatic differentiation: smoothed moments carry their
//! derivative explicitly.

use crate::error::{Result, SolverError};
use std::fmt;
use std::sync::Arc;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Kind {
    Expectation,
    Scaled(f64),
    SmoothedMoment {
        phi: ScalarFn,
        dphi: ScalarFn,
        label: String,
    },
}

/// One mean-field functional together with its gradient realization.
#[derive(Clone)]
pub struct MeanFieldOperator {
    kind: Kind,
}

impl fmt::Debug for MeanFieldOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            Kind::Expectation => write!(f, "MeanFieldOperator::Expectation"),
            Kind::Scaled(c) => write!(f, "MeanFieldOperator::Scaled({c})"),
            Kind::SmoothedMoment { label, .. } => {
                write!(f, "MeanFieldOperator::SmoothedMoment({label})")
            }
        }
    }
}

impl MeanFieldOperator {
    /// Plain expectation `F(X) = E[X]`.
    pub fn expectation() -> Self {
        Self {
            kind: Kind::Expectation,
        }
    }

    /// Scaled expectation `F(X) = c * E[X]`.
    pub fn scaled(c: f64) -> Self {
        Self {
            kind: Kind::Scaled(c),
        }
    }

    /// Smoothed moment `F(X) = E[phi(X)]` with explicitly supplied `phi'`.
    pub fn smoothed<P, D>(phi: P, dphi: D, label: impl Into<String>) -> Self
    where
        P: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind: Kind::SmoothedMoment {
                phi: Arc::new(phi),
                dphi: Arc::new(dphi),
                label: label.into(),
            },
        }
    }

    /// Second moment `phi(x) = x^2`.
    pub fn smoothed_square() -> Self {
        Self::smoothed(|x| x * x, |x| 2.0 * x, "square")
    }

    /// Exponential moment `phi(x) = exp(a x)`.
    pub fn smoothed_exp_scale(a: f64) -> Self {
        Self::smoothed(
            move |x| (a * x).exp(),
            move |x| a * (a * x).exp(),
            format!("exp_scale({a})"),
        )
    }

    /// Evaluate the functional on an empirical ensemble.
    pub fn apply(&self, samples: &[f64]) -> Result<f64> {
        if samples.is_empty() {
            return Err(SolverError::EmptyEnsemble("mean-field apply"));
        }
        let m = samples.len() as f64;
        Ok(match &self.kind {
            Kind::Expectation => samples.iter().sum::<f64>() / m,
            Kind::Scaled(c) => c * samples.iter().sum::<f64>() / m,
            Kind::SmoothedMoment { phi, .. } => {
                samples.iter().map(|&x| phi(x)).sum::<f64>() / m
            }
        })
    }

    /// Per-sample gradient weights `w_i` of the functional at the ensemble.
    pub fn gradient(&self, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(SolverError::EmptyEnsemble("mean-field gradient"));
        }
        Ok(match &self.kind {
            Kind::Expectation => vec![1.0; samples.len()],
            Kind::Scaled(c) => vec![*c; samples.len()],
            Kind::SmoothedMoment { dphi, .. } => samples.iter().map(|&x| dphi(x)).collect(),
        })
    }

    /// Empirical pairing `(1/M) sum_i w_i z_i` of gradient weights with a
    /// direction.
    pub fn pairing(weights: &[f64], direction: &[f64]) -> Result<f64> {
        if weights.is_empty() {
            return Err(SolverError::EmptyEnsemble("mean-field pairing"));
        }
        if weights.len() != direction.len() {
            return Err(SolverError::DimensionMismatch {
                what: "pairing weights vs direction",
                expected: weights.len(),
                got: direction.len(),
            });
        }
        let m = weights.len() as f64;
        Ok(weights
            .iter()
            .zip(direction)
            .map(|(w, z)| w * z)
            .sum::<f64>()
            / m)
    }

    /// Short description used by configs and reports.
    pub fn label(&self) -> String {
        match &self.kind {
            Kind::Expectation => "expectation".into(),
            Kind::Scaled(c) => format!("scaled({c})"),
            Kind::SmoothedMoment { label, .. } => format!("smoothed_moment({label})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expectation_of_small_ensemble() {
        let f = MeanFieldOperator::expectation();
        assert_eq!(f.apply(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
    }

    #[test]
    fn square_moment_value() {
        let f = MeanFieldOperator::smoothed_square();
        assert_eq!(f.apply(&[1.0, 2.0]).unwrap(), 2.5);
    }

    #[test]
    fn scaled_zero_annihilates() {
        let f = MeanFieldOperator::scaled(0.0);
        assert_eq!(f.apply(&[3.0, -1.0, 7.5]).unwrap(), 0.0);
        assert!(f.gradient(&[3.0, -1.0]).unwrap().iter().all(|w| *w == 0.0));
    }

    #[test]
    fn empty_ensemble_is_an_error() {
        let f = MeanFieldOperator::expectation();
        assert!(f.apply(&[]).is_err());
        assert!(f.gradient(&[]).is_err());
    }

    #[test]
    fn expectation_gradient_is_unit() {
        let f = MeanFieldOperator::expectation();
        assert_eq!(f.gradient(&[5.0, -2.0, 0.0]).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_weights() {
        let f = MeanFieldOperator::smoothed_square();
        assert_eq!(f.gradient(&[1.0, 2.0]).unwrap(), vec![2.0, 4.0]);
    }

    /// Central finite differences of the functional along canonical
    /// directions recover the per-sample weights: M * dF/dx_i = w_i.
    #[test]
    fn gradient_matches_finite_differences() {
        let ops = [
            MeanFieldOperator::expectation(),
            MeanFieldOperator::scaled(1.7),
            MeanFieldOperator::smoothed_square(),
            MeanFieldOperator::smoothed_exp_scale(0.4),
        ];
        let x = [0.3, -1.2, 2.0, 0.9];
        let eps = 1e-4;
        for f in &ops {
            let w = f.gradient(&x).unwrap();
            for i in 0..x.len() {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += eps;
                xm[i] -= eps;
                let fd = (f.apply(&xp).unwrap() - f.apply(&xm).unwrap()) / (2.0 * eps)
                    * x.len() as f64;
                let scale = 1.0_f64.max(w[i].abs());
                assert!(
                    (fd - w[i]).abs() <= 1e-6 * scale,
                    "{}: weight {i} fd {fd} vs {}",
                    f.label(),
                    w[i]
                );
            }
        }
    }

    #[test]
    fn pairing_is_the_weighted_mean() {
        let w = [2.0, 4.0];
        let z = [1.0, -1.0];
        assert_eq!(MeanFieldOperator::pairing(&w, &z).unwrap(), -1.0);
        assert!(MeanFieldOperator::pairing(&w, &[1.0]).is_err());
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn operators() -> Vec<MeanFieldOperator> {
            vec![
                MeanFieldOperator::expectation(),
                MeanFieldOperator::scaled(-0.8),
                MeanFieldOperator::smoothed_square(),
                MeanFieldOperator::smoothed_exp_scale(0.3),
            ]
        }

        proptest! {
            /// Directional-derivative identity: central differences of
            /// F(X + eps Z) in eps converge to the gradient pairing.
            #[test]
            fn directional_derivative_matches_pairing(
                xz in proptest::collection::vec((-4.0..4.0f64, -4.0..4.0f64), 1..40)
            ) {
                let x: Vec<f64> = xz.iter().map(|p| p.0).collect();
                let z: Vec<f64> = xz.iter().map(|p| p.1).collect();
                let eps = 1e-4;
                for f in operators() {
                    let xp: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + eps * b).collect();
                    let xm: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a - eps * b).collect();
                    let fd = (f.apply(&xp).unwrap() - f.apply(&xm).unwrap()) / (2.0 * eps);
                    let w = f.gradient(&x).unwrap();
                    let pair = MeanFieldOperator::pairing(&w, &z).unwrap();
                    let scale = 1.0_f64.max(pair.abs());
                    prop_assert!(
                        (fd - pair).abs() <= 1e-5 * scale,
                        "{}: fd {} vs pairing {}", f.label(), fd, pair
                    );
                }
            }

            /// Expectation and scaled kinds are exactly linear: the pairing
            /// equals the forward difference at any eps, not only small ones.
            #[test]
            fn linear_kinds_pair_exactly(
                xz in proptest::collection::vec((-4.0..4.0f64, -4.0..4.0f64), 1..40),
                eps in 0.01..1.0f64,
            ) {
                let x: Vec<f64> = xz.iter().map(|p| p.0).collect();
                let z: Vec<f64> = xz.iter().map(|p| p.1).collect();
                for f in [MeanFieldOperator::expectation(), MeanFieldOperator::scaled(2.5)] {
                    let xp: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + eps * b).collect();
                    let fd = (f.apply(&xp).unwrap() - f.apply(&x).unwrap()) / eps;
                    let w = f.gradient(&x).unwrap();
                    let pair = MeanFieldOperator::pairing(&w, &z).unwrap();
                    prop_assert!((fd - pair).abs() <= 1e-9 * (1.0 + pair.abs()));
                }
            }
        }
    }
}
