//! Built-in verification suites: fast, self-contained checks of the
//! statistical and numerical contracts the solvers rely on, packaged so a
//! command-line run can re-certify an installation.
//!
//! Each suite returns one [`CheckResult`] per property — noise moments and
//! reproducibility, operator duality and coercivity, mean-field gradients,
//! contraction of the fixed-point iterations, and the optimality machinery
//! (directional derivatives, first-order conditions, concavity probes).

use ndarray::Array2;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::adjoint::{picard_backward, BackwardArgs, BackwardGenerator};
use crate::coeffs::{affine_model, AffineModelParams, CoeffArgs, CoefficientSet};
use crate::control::{check_concavity, check_necessary, gateaux_compare, InfoFiltration};
use crate::error::{Result, SolverError};
use crate::forward::{picard_forward, ControlField, ControlValues};
use crate::grid::{check_coercivity, DiscreteOperator, SpatialGrid};
use crate::meanfield::MeanFieldOperator;
use crate::noise::{sample_noise, LevyMeasure};
use crate::regression::RegressionSpec;
use crate::setup::{BoundaryData, SimSetup, TimeGrid};

/// Outcome of one verification check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of one suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

/// Names accepted by [`run_suite`].
pub fn suite_names() -> &'static [&'static str] {
    &["noise", "operators", "meanfield", "picard", "mp"]
}

/// Run one named verification suite with the given master seed.
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    let checks = match name {
        "noise" => noise_checks(seed),
        "operators" => operator_checks(seed),
        "meanfield" => meanfield_checks(seed),
        "picard" => picard_checks(seed),
        "mp" => mp_checks(seed),
        other => {
            return Err(SolverError::InvalidParameters(format!(
                "unknown verification suite '{other}'; available: {}",
                suite_names().join(", ")
            )))
        }
    };
    let passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport {
        suite: name.to_string(),
        checks,
        passed,
    })
}

fn check(name: &str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match body() {
        Ok((passed, detail)) => CheckResult {
            name: name.to_string(),
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail: format!("errored: {e}"),
        },
    }
}

fn noise_checks(seed: u64) -> Vec<CheckResult> {
    let levy = LevyMeasure::desk_default();
    let times = TimeGrid::new(0.5, 10).unwrap();
    let m = 40_000;

    vec![
        check("brownian increment variance matches dt", || {
            let noise = sample_noise(m, times.n_steps, times.dt, &levy, seed)?;
            let dt = times.dt;
            let mut worst: f64 = 0.0;
            for k in 0..times.n_steps {
                let col: Vec<f64> = (0..m).map(|s| noise.dw[[s, k]]).collect();
                let mean = col.iter().sum::<f64>() / m as f64;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (m - 1) as f64;
                // Var of the sample variance of a Gaussian: 2 dt^2 / (m - 1).
                let se = dt * (2.0 / (m - 1) as f64).sqrt();
                worst = worst.max((var - dt).abs() / se);
            }
            Ok((worst < 4.0, format!("worst variance deviation {worst:.2} se")))
        }),
        check("compensated jump sums are centered", || {
            let noise = sample_noise(m, times.n_steps, times.dt, &levy, seed ^ 1)?;
            let dt = times.dt;
            let mut worst: f64 = 0.0;
            for (j, (&_e, &nu)) in levy
                .marks()
                .iter()
                .zip(levy.intensities().iter())
                .enumerate()
            {
                for k in 0..times.n_steps {
                    let mut sum = 0.0;
                    for s in 0..m {
                        sum += noise.counts[[s, k, j]] as f64 - nu * dt;
                    }
                    let mean = sum / m as f64;
                    let se = (nu * dt / m as f64).sqrt();
                    worst = worst.max(mean.abs() / se);
                }
            }
            Ok((worst < 4.0, format!("worst centered-count mean {worst:.2} se")))
        }),
        check("identical seeds reproduce the draws", || {
            let a = sample_noise(50, times.n_steps, times.dt, &levy, seed)?;
            let b = sample_noise(50, times.n_steps, times.dt, &levy, seed)?;
            let c = sample_noise(50, times.n_steps, times.dt, &levy, seed + 1)?;
            let same = a.dw == b.dw && a.counts == b.counts;
            let differs = a.dw != c.dw;
            Ok((
                same && differs,
                format!("reseed identical: {same}, new seed differs: {differs}"),
            ))
        }),
    ]
}

fn operator_checks(seed: u64) -> Vec<CheckResult> {
    let grid = SpatialGrid::new(0.0, 1.0, 40).unwrap();
    let op = DiscreteOperator::laplacian(&grid, 1.0).unwrap();

    vec![
        check("duality of the operator and its adjoint", || {
            let adj = op.adjoint();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let u: Vec<f64> = (0..op.n()).map(|_| rng.random::<f64>() - 0.5).collect();
                let v: Vec<f64> = (0..op.n()).map(|_| rng.random::<f64>() - 0.5).collect();
                let lu = op.apply(&u);
                let ltv = adj.apply(&v);
                let lhs: f64 = lu.iter().zip(&v).map(|(a, b)| a * b).sum();
                let rhs: f64 = u.iter().zip(&ltv).map(|(a, b)| a * b).sum();
                let scale = lhs.abs().max(rhs.abs()).max(1.0);
                worst = worst.max((lhs - rhs).abs() / scale);
            }
            Ok((worst < 1e-12, format!("worst relative pairing gap {worst:.2e}")))
        }),
        check("coercivity constant of the diffusion operator", || {
            let report = check_coercivity(&op, &grid, 1.0, 1.0, 200, seed)?;
            Ok((
                report.satisfied && report.min_quotient >= 1.0 - 1e-12,
                format!(
                    "zeta = {} with worst quotient {:.4}",
                    report.zeta, report.min_quotient
                ),
            ))
        }),
        check("second-difference stencil is exact on cubics", || {
            let mut worst: f64 = 0.0;
            let u: Vec<f64> = grid
                .nodes
                .iter()
                .map(|&x| x * (1.0 - x) * (x - 2.0))
                .collect();
            let lu = op.apply(&u);
            for (i, &x) in grid.nodes.iter().enumerate() {
                // Interior rows of the stencil are exact on cubics with the
                // homogeneous boundary this probe satisfies.
                worst = worst.max((lu[i] - (6.0 - 6.0 * x)).abs());
            }
            Ok((worst < 1e-10, format!("worst stencil error {worst:.2e}")))
        }),
        check("shifted tridiagonal solve inverts its operator", || {
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 2);
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let x: Vec<f64> = (0..op.n()).map(|_| rng.random::<f64>() - 0.5).collect();
                // rhs = (I - c L) x, then solve back.
                let c = 0.01;
                let lx = op.apply(&x);
                let rhs: Vec<f64> = x.iter().zip(&lx).map(|(a, b)| a - c * b).collect();
                let back = op.solve_shifted(c, &rhs)?;
                for (a, b) in back.iter().zip(&x) {
                    worst = worst.max((a - b).abs());
                }
            }
            Ok((worst < 1e-11, format!("worst round-trip error {worst:.2e}")))
        }),
    ]
}

fn meanfield_checks(seed: u64) -> Vec<CheckResult> {
    let ops = [
        MeanFieldOperator::expectation(),
        MeanFieldOperator::scaled(1.7),
        MeanFieldOperator::smoothed_square(),
        MeanFieldOperator::smoothed_exp_scale(0.5),
    ];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sample: Vec<f64> = (0..60).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    let direction: Vec<f64> = (0..60).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();

    vec![
        check("gradients match central differences of the operators", || {
            let mut worst: f64 = 0.0;
            for op in &ops {
                let grad = op.gradient(&sample)?;
                let eps = 1e-6;
                for i in 0..sample.len() {
                    let mut up = sample.clone();
                    let mut dn = sample.clone();
                    up[i] += eps;
                    dn[i] -= eps;
                    let fd = (op.apply(&up)? - op.apply(&dn)?) / (2.0 * eps);
                    // Per-sample weight: gradient entry divided by the
                    // ensemble pairing convention.
                    let an = grad[i] / sample.len() as f64;
                    worst = worst.max((fd - an).abs());
                }
            }
            Ok((worst < 1e-7, format!("worst gradient gap {worst:.2e}")))
        }),
        check("pairing matches the directional derivative", || {
            let mut worst: f64 = 0.0;
            for op in &ops {
                let grad = op.gradient(&sample)?;
                let paired = MeanFieldOperator::pairing(&grad, &direction)?;
                let eps = 1e-6;
                let up: Vec<f64> = sample
                    .iter()
                    .zip(&direction)
                    .map(|(s, d)| s + eps * d)
                    .collect();
                let dn: Vec<f64> = sample
                    .iter()
                    .zip(&direction)
                    .map(|(s, d)| s - eps * d)
                    .collect();
                let fd = (op.apply(&up)? - op.apply(&dn)?) / (2.0 * eps);
                worst = worst.max((paired - fd).abs());
            }
            Ok((worst < 1e-7, format!("worst pairing gap {worst:.2e}")))
        }),
        check("expectation weights are identically one", || {
            let grad = MeanFieldOperator::expectation().gradient(&sample)?;
            let worst = grad
                .iter()
                .map(|w| (w - 1.0).abs())
                .fold(0.0_f64, f64::max);
            Ok((worst == 0.0, format!("worst weight deviation {worst:.2e}")))
        }),
    ]
}

fn picard_setup(seed: u64) -> Result<SimSetup> {
    let grid = SpatialGrid::new(0.0, 1.0, 10)?;
    let op = DiscreteOperator::laplacian(&grid, 0.5)?;
    let times = TimeGrid::new(0.5, 20)?;
    let coeffs = affine_model(AffineModelParams {
        by: -0.4,
        bybar: 0.3,
        s0: 0.2,
        sy: 0.1,
        th0: 0.1,
        gy: 1.0,
        ..Default::default()
    });
    SimSetup::new(
        grid,
        op,
        times,
        LevyMeasure::desk_default(),
        150,
        seed,
        coeffs,
        MeanFieldOperator::expectation(),
        MeanFieldOperator::expectation(),
        vec![1.0; 10],
        BoundaryData::Zero,
    )
}

fn picard_checks(seed: u64) -> Vec<CheckResult> {
    vec![
        check("forward iteration contracts", || {
            let setup = picard_setup(seed)?;
            let noise = setup.sample_noise()?;
            let control = ControlField::constant(0.0, 20, 10, (-1.0, 1.0))?;
            let report = picard_forward(&setup, &control, &noise, 5)?;
            let decreasing = report
                .distances
                .windows(2)
                .skip(1)
                .all(|w| w[1] <= w[0] * (1.0 + 1e-12));
            // With live mean-field coupling the frozen-trace iterate and the
            // direct solve differ by the contraction residual, not bitwise.
            Ok((
                decreasing && report.final_gap < 1e-10,
                format!(
                    "distances {:?}, gap to direct solve {:.2e}",
                    report.distances, report.final_gap
                ),
            ))
        }),
        check("backward iteration contracts at rate 1/2", || {
            let setup = picard_setup(seed ^ 3)?;
            let noise = setup.sample_noise()?;
            let m = setup.n_scenarios;
            let n = setup.n_nodes();
            let terminal = Array2::from_elem((m, n), 0.5);
            let generator = BackwardGenerator::new(
                |a: &BackwardArgs| {
                    -0.3 * a.y + 0.2 * a.y_mean + 0.1 * a.z - 0.05 * a.z_mean
                        + 0.05 * a.jumps.first().copied().unwrap_or(0.0)
                },
                "linear",
            );
            let report = picard_backward(
                &setup,
                &noise,
                &terminal,
                &generator,
                5,
                1.0,
                &RegressionSpec::default(),
            )?;
            let ok = report.ratios.iter().skip(1).all(|&r| r <= 0.5);
            Ok((ok, format!("ratios {:?}", report.ratios)))
        }),
    ]
}

fn mp_checks(seed: u64) -> Vec<CheckResult> {
    vec![
        check("directional derivative matches the gradient pairing", || {
            let grid = SpatialGrid::new(0.0, 1.0, 5)?;
            let op = DiscreteOperator::laplacian(&grid, 0.5)?;
            let times = TimeGrid::new(0.5, 10)?;
            let coeffs = affine_model(AffineModelParams {
                by: -0.3,
                bu: 1.0,
                s0: 0.2,
                fy: 0.5,
                fu: 1.0,
                fuu: -0.5,
                gy: 1.0,
                ..Default::default()
            });
            let setup = SimSetup::new(
                grid,
                op,
                times,
                LevyMeasure::empty(),
                200,
                seed,
                coeffs,
                MeanFieldOperator::expectation(),
                MeanFieldOperator::expectation(),
                vec![1.0; 5],
                BoundaryData::Zero,
            )?;
            let noise = setup.sample_noise()?;
            let control = ControlField::constant(0.4, 10, 5, (-5.0, 5.0))?;
            let direction = ControlValues::Deterministic(Array2::from_shape_fn(
                (10, 5),
                |(k, i)| (0.4 * k as f64).cos() + 0.1 * i as f64,
            ));
            let result = gateaux_compare(
                &setup,
                &control,
                &noise,
                &direction,
                1e-3,
                &InfoFiltration::full(),
                &RegressionSpec::default(),
            )?;
            Ok((
                result.rel_gap < 0.05,
                format!(
                    "fd {:.6e} vs pairing {:.6e} (gap {:.2e})",
                    result.fd, result.pairing, result.rel_gap
                ),
            ))
        }),
        check("gradient vanishes at an interior optimum", || {
            let grid = SpatialGrid::new(0.0, 1.0, 4)?;
            let op = DiscreteOperator::laplacian(&grid, 0.5)?;
            let times = TimeGrid::new(0.5, 8)?;
            let coeffs = CoefficientSet::builder("quadratic-profit")
                .running(
                    Arc::new(|a: &CoeffArgs| -(a.u - 0.7) * (a.u - 0.7)),
                    Arc::new(|_| 0.0),
                    Arc::new(|_| 0.0),
                    Arc::new(|a: &CoeffArgs| -2.0 * (a.u - 0.7)),
                    Arc::new(|_| 0.0),
                )
                .diffusion(
                    Arc::new(|_| 0.3),
                    Arc::new(|_| 0.0),
                    Arc::new(|_| 0.0),
                    Arc::new(|_| 0.0),
                    Arc::new(|_| 0.0),
                )
                .build();
            let setup = SimSetup::new(
                grid,
                op,
                times,
                LevyMeasure::empty(),
                50,
                seed ^ 5,
                coeffs,
                MeanFieldOperator::expectation(),
                MeanFieldOperator::expectation(),
                vec![1.0; 4],
                BoundaryData::Zero,
            )?;
            let noise = setup.sample_noise()?;
            let control = ControlField::constant(0.7, 8, 4, (0.0, 2.0))?;
            let report = check_necessary(
                &setup,
                &control,
                &noise,
                &InfoFiltration::full(),
                &RegressionSpec::default(),
                1e-9,
            )?;
            Ok((
                report.max_abs_interior < 1e-10 && report.n_active == 0,
                format!("max |gradient| = {:.2e}", report.max_abs_interior),
            ))
        }),
        check("midpoint probe flags a bilinear hamiltonian", || {
            let coeffs = CoefficientSet::builder("bilinear")
                .drift(
                    Arc::new(|a: &CoeffArgs| a.y * a.u),
                    Arc::new(|a: &CoeffArgs| a.u),
                    Arc::new(|_| 0.0),
                    Arc::new(|a: &CoeffArgs| a.y),
                    Arc::new(|_| 0.0),
                )
                .build();
            let report = check_concavity(
                &coeffs,
                &LevyMeasure::empty(),
                &MeanFieldOperator::expectation(),
                &MeanFieldOperator::expectation(),
                0.0,
                0.5,
                1.0,
                0.0,
                &[],
                (-1.0, 1.0),
                (-1.0, 1.0),
                200,
                seed ^ 7,
            )?;
            Ok((
                !report.violations.is_empty(),
                format!(
                    "{} violations, worst gap {:.3e}",
                    report.violations.len(),
                    report.worst_gap
                ),
            ))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_with_the_default_seed() {
        for &name in suite_names() {
            let report = run_suite(name, 20_240_817).unwrap();
            for c in &report.checks {
                assert!(c.passed, "[{name}] {}: {}", c.name, c.detail);
            }
            assert!(report.passed);
        }
    }

    #[test]
    fn unknown_suite_is_rejected_with_the_catalog() {
        let err = run_suite("bogus", 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("noise"), "{msg}");
    }
}
