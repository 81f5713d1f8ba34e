//! Optimal harvesting of a space-distributed population: a worked control
//! problem with a closed-form feedback law, used to verify the whole
//! pipeline end to end.
//!
//! The population density follows the harvesting form of the dynamics,
//!
//! ```text
//! dY = [ kappa d2Y/dx2 + ybar(t,x) b(t,x) - Y(t,x) u(t,x) ] dt
//!      + Y(t,x) sigma(t,x) dW + Y(t,x) int theta(t,x,e) Ntilde(dt, de),
//! ```
//!
//! with `ybar = E[Y]`, log utility of the harvest rate as running profit and
//! a linear salvage value:
//!
//! ```text
//! J(u) = E[ int int log(Y u) dx dt + int alpha(x) Y(T,x) dx ].
//! ```
//!
//! The Hamiltonian derivative in the control is `1/u - Y p`, so the
//! first-order condition has the explicit solution
//!
//! ```text
//! u*(t,x) = 1 / (Y(t,x) p(t,x)),
//! ```
//!
//! clamped into the admissible interval. [`solve_harvesting`] iterates this
//! feedback map with damping — each sweep simulates the population under
//! the current rate, solves the adjoint, and re-applies the law — and
//! reports the fixed-point residual `median |u Y p - 1|` away from the
//! clamps. [`verify_harvest_optimality`] stresses a candidate against
//! rescaled rates and randomized challenger strategies under common random
//! numbers.

use ndarray::Array3;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fmt;
use std::sync::Arc;

use crate::adjoint::{solve_adjoint, AdjointTriple};
use crate::coeffs::{CoeffArgs, CoefficientSet, MultiplicativeNoise};
use crate::control::{evaluate_objective, evaluate_objective_on, ObjectiveReport};
use crate::error::{Result, SolverError};
use crate::forward::{solve_forward, ControlField, ForwardPath};
use crate::grid::{DiscreteOperator, SpatialGrid};
use crate::meanfield::MeanFieldOperator;
use crate::noise::{LevyMeasure, NoisePath};
use crate::regression::RegressionSpec;
use crate::setup::{BoundaryData, SimSetup, TimeGrid};

/// Data of the harvesting problem: growth, noise ratios, salvage density,
/// initial population and admissible harvest-rate interval.
#[derive(Clone)]
pub struct HarvestingProblem {
    /// Growth rate multiplying the population mean in the drift.
    pub growth: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// Relative diffusion `sigma(t, x)`.
    pub sigma: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// Relative jump size `theta(t, x, e)`; must stay above -1 so jumps
    /// cannot push the population through zero.
    pub theta: Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>,
    /// Salvage density `alpha(x) >= 0` weighting the terminal population.
    pub alpha: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Initial population density, strictly positive.
    pub initial: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Admissible harvest rates `[u_min, u_max]` with `u_min > 0` (the log
    /// utility needs a positive harvest).
    pub bounds: (f64, f64),
}

impl fmt::Debug for HarvestingProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HarvestingProblem")
            .field("bounds", &self.bounds)
            .finish_non_exhaustive()
    }
}

impl HarvestingProblem {
    /// Reference configuration: constant growth 1, 20% relative diffusion,
    /// mark-proportional jumps at 30%, unit salvage, a smooth positive
    /// initial bump and wide rate bounds.
    pub fn desk_default() -> Self {
        Self {
            growth: Arc::new(|_, _| 1.0),
            sigma: Arc::new(|_, _| 0.2),
            theta: Arc::new(|_, _, e| 0.3 * e),
            alpha: Arc::new(|_| 1.0),
            initial: Arc::new(|x| 1.0 + (std::f64::consts::PI * x).sin()),
            bounds: (1e-3, 50.0),
        }
    }

    /// Check positivity requirements against a grid and jump marks.
    pub fn validate(&self, grid: &SpatialGrid, times: &TimeGrid, levy: &LevyMeasure) -> Result<()> {
        let (lo, hi) = self.bounds;
        if !(lo > 0.0) || !(hi > lo) || !hi.is_finite() {
            return Err(SolverError::InvalidParameters(format!(
                "harvest-rate bounds must satisfy 0 < u_min < u_max, got [{lo}, {hi}]"
            )));
        }
        for &x in &grid.nodes {
            if !((self.initial)(x) > 0.0) {
                return Err(SolverError::InvalidParameters(format!(
                    "initial population must be strictly positive, found {} at x = {x}",
                    (self.initial)(x)
                )));
            }
            if !((self.alpha)(x) >= 0.0) {
                return Err(SolverError::InvalidParameters(format!(
                    "salvage density must be nonnegative, found {} at x = {x}",
                    (self.alpha)(x)
                )));
            }
            for k in 0..=times.n_steps {
                let t = times.time(k);
                for &e in levy.marks() {
                    let th = (self.theta)(t, x, e);
                    if !(th > -1.0) {
                        return Err(SolverError::InvalidParameters(format!(
                            "relative jump size must exceed -1, found {th} at \
                             (t, x, e) = ({t}, {x}, {e})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Render the problem as a coefficient set in harvesting form, with the
    /// multiplicative-noise ratios attached so the forward solver can use
    /// the positivity-preserving scheme.
    pub fn coefficient_set(&self) -> CoefficientSet {
        let growth = Arc::clone(&self.growth);
        let sigma = Arc::clone(&self.sigma);
        let sigma_d = Arc::clone(&self.sigma);
        let theta = Arc::clone(&self.theta);
        let theta_d = Arc::clone(&self.theta);
        let alpha = Arc::clone(&self.alpha);
        let alpha_d = Arc::clone(&self.alpha);
        let growth_d = Arc::clone(&self.growth);
        CoefficientSet::builder("harvesting")
            .drift(
                Arc::new(move |a: &CoeffArgs| a.y_bar * growth(a.t, a.x) - a.y * a.u),
                Arc::new(|a: &CoeffArgs| -a.u),
                Arc::new(move |a: &CoeffArgs| growth_d(a.t, a.x)),
                Arc::new(|a: &CoeffArgs| -a.y),
                Arc::new(|_| 0.0),
            )
            .diffusion(
                Arc::new(move |a: &CoeffArgs| a.y * sigma(a.t, a.x)),
                Arc::new(move |a: &CoeffArgs| sigma_d(a.t, a.x)),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
            )
            .jump(
                Arc::new(move |a: &CoeffArgs, e| a.y * theta(a.t, a.x, e)),
                Arc::new(move |a: &CoeffArgs, e| theta_d(a.t, a.x, e)),
                Arc::new(|_, _| 0.0),
                Arc::new(|_, _| 0.0),
                Arc::new(|_, _| 0.0),
            )
            .running(
                Arc::new(|a: &CoeffArgs| (a.y * a.u).ln()),
                Arc::new(|a: &CoeffArgs| 1.0 / a.y),
                Arc::new(|_| 0.0),
                Arc::new(|a: &CoeffArgs| 1.0 / a.u),
                Arc::new(|_| 0.0),
            )
            .terminal(
                Arc::new(move |x, y, _| alpha(x) * y),
                Arc::new(move |x, _, _| alpha_d(x)),
                Arc::new(|_, _, _| 0.0),
            )
            .multiplicative(MultiplicativeNoise {
                sigma_ratio: Arc::clone(&self.sigma),
                theta_ratio: Arc::clone(&self.theta),
            })
            .build()
    }

    /// Assemble a full simulation setup for this problem on the given
    /// discretization (zero Dirichlet boundary, population mean as the
    /// field's mean-field operator).
    #[allow(clippy::too_many_arguments)]
    pub fn setup(
        &self,
        grid: SpatialGrid,
        kappa: f64,
        times: TimeGrid,
        levy: LevyMeasure,
        n_scenarios: usize,
        master_seed: u64,
    ) -> Result<SimSetup> {
        self.validate(&grid, &times, &levy)?;
        let op = DiscreteOperator::laplacian(&grid, kappa)?;
        let initial: Vec<f64> = grid.nodes.iter().map(|&x| (self.initial)(x)).collect();
        SimSetup::new(
            grid,
            op,
            times,
            levy,
            n_scenarios,
            master_seed,
            self.coefficient_set(),
            MeanFieldOperator::expectation(),
            MeanFieldOperator::expectation(),
            initial,
            BoundaryData::Zero,
        )
    }
}

/// Options of the damped fixed-point iteration on the feedback law.
#[derive(Debug, Clone, Copy)]
pub struct HarvestOptions {
    /// Maximum outer sweeps (forward solve + adjoint solve + rate update).
    pub max_outer: usize,
    /// Weight of the freshly computed rate in the damped update.
    pub damping: f64,
    /// Stop when the median rate change per sweep falls below this.
    pub tol_fp: f64,
    /// Largest tolerated fraction of positivity-floor activations in the
    /// final population path.
    pub floor_limit: f64,
    pub regression: RegressionSpec,
}

impl Default for HarvestOptions {
    fn default() -> Self {
        Self {
            max_outer: 30,
            damping: 0.5,
            tol_fp: 2e-4,
            floor_limit: 0.01,
            regression: RegressionSpec::default(),
        }
    }
}

/// Converged (or best-effort) harvesting strategy with its supporting
/// simulation data.
#[derive(Debug, Clone)]
pub struct HarvestingSolution {
    /// Per-scenario harvest rate, the damped fixed point of `1 / (Y p)`.
    pub control: ControlField,
    pub objective: ObjectiveReport,
    /// Median feedback residual `|u Y p - 1|` over samples away from the
    /// rate bounds, on the final refreshed path.
    pub residual_median: f64,
    /// Fraction of residual samples excluded as clamped.
    pub clamped_fraction: f64,
    /// Median rate change per outer sweep.
    pub changes: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Fraction of positivity-floor activations in the final path.
    pub floor_fraction: f64,
    pub path: ForwardPath,
    pub adjoint: AdjointTriple,
}

fn feedback_rate(y: f64, p: f64, bounds: (f64, f64)) -> f64 {
    let shadow = y * p;
    if shadow <= 1e-12 {
        // The marginal utility 1/u - Y p stays positive for any admissible
        // rate: harvest at the cap.
        bounds.1
    } else {
        (1.0 / shadow).clamp(bounds.0, bounds.1)
    }
}

fn feedback_control(
    setup: &SimSetup,
    path: &ForwardPath,
    adj: &AdjointTriple,
    bounds: (f64, f64),
) -> Result<ControlField> {
    let nt = setup.times.n_steps;
    let m = setup.n_scenarios;
    let n = setup.n_nodes();
    let values = Array3::from_shape_fn((nt, m, n), |(k, s, i)| {
        feedback_rate(path.fields[[k, s, i]], adj.p[[k, s, i]], bounds)
    });
    ControlField::per_scenario(values, bounds)
}

/// Median of `|u Y p - 1|` over space-time samples where the rate bounds
/// are inactive, plus the fraction excluded as clamped.
pub fn feedback_residual(
    setup: &SimSetup,
    control: &ControlField,
    path: &ForwardPath,
    adj: &AdjointTriple,
) -> (f64, f64) {
    let (lo, hi) = control.bounds();
    let eps = 1e-6 * (hi - lo);
    let nt = setup.times.n_steps;
    let m = setup.n_scenarios;
    let n = setup.n_nodes();
    let mut residuals = Vec::with_capacity(nt * m * n);
    let mut clamped = 0usize;
    for k in 0..nt {
        for s in 0..m {
            for i in 0..n {
                let u = control.value(k, s, i);
                if u <= lo + eps || u >= hi - eps {
                    clamped += 1;
                    continue;
                }
                residuals.push((u * path.fields[[k, s, i]] * adj.p[[k, s, i]] - 1.0).abs());
            }
        }
    }
    let total = nt * m * n;
    (median(&mut residuals), clamped as f64 / total as f64)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Solve the harvesting problem by damped fixed-point iteration on the
/// feedback law `u = 1 / (Y p)`.
///
/// Starting from the unit rate, each sweep simulates the population under
/// the current rate, solves the adjoint, applies the law, and blends the
/// result into the iterate. After the loop the population and adjoint are
/// refreshed under the final rate; a positivity-floor fraction above
/// `opts.floor_limit` on that path is an error. Non-convergence within
/// `opts.max_outer` sweeps is reported through the `converged` flag, with
/// the best iterate returned for inspection.
pub fn solve_harvesting(
    setup: &SimSetup,
    bounds: (f64, f64),
    noise: &NoisePath,
    opts: &HarvestOptions,
) -> Result<HarvestingSolution> {
    if opts.max_outer == 0 {
        return Err(SolverError::InvalidParameters(
            "harvesting needs at least one outer sweep".into(),
        ));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(SolverError::InvalidParameters(format!(
            "damping must lie in (0, 1], got {}",
            opts.damping
        )));
    }
    let nt = setup.times.n_steps;
    let m = setup.n_scenarios;
    let n = setup.n_nodes();
    let mut control =
        ControlField::per_scenario(Array3::from_elem((nt, m, n), 1.0), bounds)?;
    let mut changes = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_outer {
        let path = solve_forward(setup, &control, noise)?;
        let adj = solve_adjoint(setup, &control, noise, &path, &opts.regression)?;
        let fresh = feedback_control(setup, &path, &adj, bounds)?;
        let next = control.blend(&fresh, opts.damping)?;
        let change = control.median_abs_diff(&next)?;
        control = next;
        iterations += 1;
        changes.push(change);
        if change <= opts.tol_fp {
            converged = true;
            break;
        }
    }

    let path = solve_forward(setup, &control, noise)?;
    let adj = solve_adjoint(setup, &control, noise, &path, &opts.regression)?;
    let floor_fraction = path.floor_fraction();
    if floor_fraction > opts.floor_limit {
        return Err(SolverError::PositivityViolation {
            fraction: floor_fraction,
            limit: opts.floor_limit,
        });
    }
    let objective = evaluate_objective_on(setup, &control, &path)?;
    let (residual_median, clamped_fraction) = feedback_residual(setup, &control, &path, &adj);
    Ok(HarvestingSolution {
        control,
        objective,
        residual_median,
        clamped_fraction,
        changes,
        iterations,
        converged,
        floor_fraction,
        path,
        adjoint: adj,
    })
}

/// Outcome of one challenger strategy under common random numbers.
#[derive(Debug, Clone)]
pub struct ChallengerOutcome {
    pub label: String,
    /// Objective advantage of the challenger over the candidate (positive
    /// means the challenger did better).
    pub delta: f64,
    /// Monte Carlo standard error of the paired difference.
    pub standard_error: f64,
}

/// Evidence that a candidate rate is a genuine optimum: the feedback
/// residual, its growth under a control perturbation, and paired objective
/// comparisons against randomized challengers.
#[derive(Debug, Clone)]
pub struct HarvestEvidence {
    pub residual_median: f64,
    /// Residual after rescaling the rate by `1 + perturbation`.
    pub perturbed_residual: f64,
    /// Perturbed over unperturbed residual.
    pub residual_ratio: f64,
    pub challengers: Vec<ChallengerOutcome>,
    /// Challengers whose advantage exceeds twice its standard error.
    pub n_beating: usize,
}

/// Options of the optimality stress test.
#[derive(Debug, Clone, Copy)]
pub struct HarvestVerifyOptions {
    /// Relative rescaling used for the residual-growth probe.
    pub perturbation: f64,
    pub n_challengers: usize,
    pub challenger_seed: u64,
    pub regression: RegressionSpec,
}

impl Default for HarvestVerifyOptions {
    fn default() -> Self {
        Self {
            perturbation: 0.1,
            n_challengers: 20,
            challenger_seed: 0x9a75e5,
            regression: RegressionSpec::default(),
        }
    }
}

/// Stress a candidate harvest rate. The residual probe recomputes the
/// population and adjoint under the rescaled rate and expects the feedback
/// residual to grow; the challenger probe pits the candidate against
/// randomized admissible strategies (global rescalings, time-modulated
/// rates, blends toward a flat rate) under common random numbers and counts
/// how many achieve a paired advantage above twice its standard error.
pub fn verify_harvest_optimality(
    setup: &SimSetup,
    candidate: &ControlField,
    noise: &NoisePath,
    opts: &HarvestVerifyOptions,
) -> Result<HarvestEvidence> {
    let path = solve_forward(setup, candidate, noise)?;
    let adj = solve_adjoint(setup, candidate, noise, &path, &opts.regression)?;
    let (residual_median, _) = feedback_residual(setup, candidate, &path, &adj);

    let scaled = candidate.with_values_mapped(|_, _, _, v| v * (1.0 + opts.perturbation));
    let path_p = solve_forward(setup, &scaled, noise)?;
    let adj_p = solve_adjoint(setup, &scaled, noise, &path_p, &opts.regression)?;
    let (perturbed_residual, _) = feedback_residual(setup, &scaled, &path_p, &adj_p);

    let base = evaluate_objective_on(setup, candidate, &path)?;
    let mut rng = ChaCha12Rng::seed_from_u64(opts.challenger_seed);
    let mut challengers = Vec::with_capacity(opts.n_challengers);
    let mut n_beating = 0usize;
    let t_end = setup.times.t_end;
    for c in 0..opts.n_challengers {
        let (label, challenger) = match c % 3 {
            0 => {
                let factor = (0.4 * (rng.random::<f64>() - 0.5)).exp();
                (
                    format!("rescale x{factor:.3}"),
                    candidate.with_values_mapped(|_, _, _, v| v * factor),
                )
            }
            1 => {
                let amp = 0.05 + 0.15 * rng.random::<f64>();
                let phase = std::f64::consts::TAU * rng.random::<f64>();
                let freq = std::f64::consts::TAU * (1.0 + (3.0 * rng.random::<f64>()).floor());
                let dt = setup.times.dt;
                (
                    format!("modulate amp {amp:.3}"),
                    candidate.with_values_mapped(|k, _, _, v| {
                        v * (1.0 + amp * (freq * (k as f64 * dt) / t_end + phase).sin())
                    }),
                )
            }
            _ => {
                let w = 0.1 + 0.3 * rng.random::<f64>();
                let level = 0.5 + rng.random::<f64>();
                (
                    format!("flatten w {w:.3} to {level:.3}"),
                    candidate.with_values_mapped(|_, _, _, v| (1.0 - w) * v + w * level),
                )
            }
        };
        let other = evaluate_objective(setup, &challenger, noise)?;
        let m = base.per_scenario.len();
        let diffs: Vec<f64> = (0..m)
            .map(|s| other.per_scenario[s] - base.per_scenario[s])
            .collect();
        let delta = diffs.iter().sum::<f64>() / m as f64;
        let standard_error = if m > 1 {
            let var = diffs
                .iter()
                .map(|d| (d - delta) * (d - delta))
                .sum::<f64>()
                / (m - 1) as f64;
            (var / m as f64).sqrt()
        } else {
            0.0
        };
        if delta > 2.0 * standard_error {
            n_beating += 1;
        }
        challengers.push(ChallengerOutcome {
            label,
            delta,
            standard_error,
        });
    }

    Ok(HarvestEvidence {
        residual_median,
        perturbed_residual,
        residual_ratio: if residual_median > 0.0 {
            perturbed_residual / residual_median
        } else {
            f64::INFINITY
        },
        challengers,
        n_beating,
    })
}
