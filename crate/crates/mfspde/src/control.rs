//! Hamiltonian utilities and optimality checking.
//!
//! The Hamiltonian of the control problem pairs the coefficients with the
//! adjoint triple:
//!
//! ```text
//! H = f + b p + sigma q + sum_e theta(e) gamma_e nu_e,
//! ```
//!
//! and the first-order condition for a (possibly information-constrained)
//! maximizer is that the conditional projection of the control derivative
//! vanishes wherever the control bounds are inactive:
//!
//! ```text
//! r = E[ dH/du | E_t ] + mean[ dH/dubar ] * (grad G weight) = 0,
//! ```
//!
//! with `E_t = F_{(t - delay)+}` the delayed filtration. The projection is
//! the same per-node polynomial regression the backward solver uses, applied
//! to the field at the delayed time index; with no delay it conditions on
//! the current field, and when the delay exceeds `t` the features degenerate
//! and the projection falls back to the plain ensemble mean.
//!
//! The objective is the sampled profit functional
//!
//! ```text
//! J(u) = mean_s [ sum_k dt h sum_i f(t_k, x_i, ...) + h sum_i g(x_i, Y_T, ybar_T) ],
//! ```
//!
//! exposed per scenario so that differences of objectives under common
//! random numbers come with Monte Carlo standard errors. A Richardson-
//! extrapolated central difference of `J` along a control direction is
//! compared against the gradient pairing in [`gateaux_compare`]; both sides
//! agree exactly (to rounding) for dynamics that are affine in the control
//! with a running profit linear in `u`.

use ndarray::{Array2, Array3, Axis};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::adjoint::{solve_adjoint, AdjointTriple};
use crate::coeffs::{CoeffArgs, CoefficientSet};
use crate::error::{Result, SolverError};
use crate::forward::{
    solve_forward, ubar_row, validate_run, ControlField, ControlValues, ForwardPath,
};
use crate::meanfield::MeanFieldOperator;
use crate::noise::{LevyMeasure, NoisePath};
use crate::regression::{fit_conditional, RegressionDiagnostics, RegressionSpec};
use crate::setup::SimSetup;

/// Information available to the controller: the full filtration delayed by a
/// fixed lag (`delay = 0` recovers full information).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoFiltration {
    pub delay: f64,
}

impl InfoFiltration {
    pub fn full() -> Self {
        Self { delay: 0.0 }
    }

    pub fn delayed(delay: f64) -> Result<Self> {
        if !(delay >= 0.0) || !delay.is_finite() {
            return Err(SolverError::InvalidParameters(format!(
                "information delay must be nonnegative and finite, got {delay}"
            )));
        }
        Ok(Self { delay })
    }

    /// Time index whose field values serve as conditioning features for a
    /// projection at step `k`: the index of `(t_k - delay)+`. At index 0 the
    /// field is the deterministic initial datum, so the regression
    /// degenerates to the ensemble mean, which is the correct projection
    /// onto trivial information.
    pub fn feature_index(&self, k: usize, dt: f64) -> usize {
        if self.delay <= 0.0 {
            return k;
        }
        let shifted = (k as f64 * dt - self.delay).max(0.0);
        (shifted / dt + 1e-9).floor() as usize
    }
}

/// Hamiltonian value at one sample point.
pub fn hamiltonian(
    coeffs: &CoefficientSet,
    levy: &LevyMeasure,
    args: &CoeffArgs,
    p: f64,
    q: f64,
    gamma: &[f64],
) -> f64 {
    let mut h = (coeffs.running)(args) + (coeffs.drift)(args) * p + (coeffs.diffusion)(args) * q;
    for (j, &e) in levy.marks().iter().enumerate() {
        h += (coeffs.jump)(args, e) * gamma[j] * levy.intensities()[j];
    }
    h
}

/// Sampled objective with per-scenario values (left-endpoint rule in time,
/// interior quadrature in space).
#[derive(Debug, Clone)]
pub struct ObjectiveReport {
    pub total: f64,
    pub per_scenario: Vec<f64>,
}

impl ObjectiveReport {
    /// Monte Carlo standard error of the total.
    pub fn standard_error(&self) -> f64 {
        let m = self.per_scenario.len();
        if m < 2 {
            return 0.0;
        }
        let mean = self.total;
        let var = self
            .per_scenario
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (m - 1) as f64;
        (var / m as f64).sqrt()
    }
}

/// Evaluate the objective on an already-simulated path.
pub fn evaluate_objective_on(
    setup: &SimSetup,
    control: &ControlField,
    path: &ForwardPath,
) -> Result<ObjectiveReport> {
    let m = setup.n_scenarios;
    let n = setup.n_nodes();
    let nt = setup.times.n_steps;
    if path.fields.dim() != (nt + 1, m, n) {
        return Err(SolverError::DimensionMismatch {
            what: "forward path vs setup",
            expected: (nt + 1) * m * n,
            got: path.fields.len(),
        });
    }
    let dt = setup.times.dt;
    let h = setup.grid.h;
    let mut per_scenario = vec![0.0; m];
    for k in 0..nt {
        let t = setup.times.time(k);
        let ubar = ubar_row(control, &setup.g_op, k, m)?;
        for (s, acc) in per_scenario.iter_mut().enumerate() {
            let mut space = 0.0;
            for i in 0..n {
                let args = CoeffArgs::new(
                    t,
                    setup.grid.nodes[i],
                    path.fields[[k, s, i]],
                    path.mf_trace[[k, i]],
                    control.value(k, s, i),
                    ubar[i],
                );
                space += (setup.coeffs.running)(&args);
            }
            *acc += dt * h * space;
        }
    }
    for (s, acc) in per_scenario.iter_mut().enumerate() {
        let mut space = 0.0;
        for i in 0..n {
            space += (setup.coeffs.terminal)(
                setup.grid.nodes[i],
                path.fields[[nt, s, i]],
                path.mf_trace[[nt, i]],
            );
        }
        *acc += h * space;
    }
    let total = per_scenario.iter().sum::<f64>() / m as f64;
    if !total.is_finite() {
        return Err(SolverError::NonFinite {
            what: "objective",
            t: setup.times.t_end,
            x: f64::NAN,
        });
    }
    Ok(ObjectiveReport {
        total,
        per_scenario,
    })
}

/// Simulate under the given control and noise, then evaluate the objective.
pub fn evaluate_objective(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
) -> Result<ObjectiveReport> {
    let path = solve_forward(setup, control, noise)?;
    evaluate_objective_on(setup, control, &path)
}

/// Conditional projection of a per-scenario spatial sample onto the delayed
/// filtration at step `k`: per node, regression of the sample on the field
/// at the delayed feature index.
pub fn project_conditional(
    path: &ForwardPath,
    values: &Array2<f64>,
    k: usize,
    filtration: &InfoFiltration,
    dt: f64,
    spec: &RegressionSpec,
    diag: &mut RegressionDiagnostics,
) -> Result<Array2<f64>> {
    let (m, n) = values.dim();
    if path.fields.dim().1 != m || path.fields.dim().2 != n {
        return Err(SolverError::DimensionMismatch {
            what: "projection sample vs path",
            expected: path.fields.dim().1 * path.fields.dim().2,
            got: m * n,
        });
    }
    let j = filtration.feature_index(k, dt);
    let state = path.fields.index_axis(Axis(0), j);
    let mut out = Array2::zeros((m, n));
    for i in 0..n {
        let xs: Vec<f64> = (0..m).map(|s| state[[s, i]]).collect();
        let targets: Vec<f64> = (0..m).map(|s| values[[s, i]]).collect();
        let fit = fit_conditional(&xs, &targets, spec, diag)?;
        for s in 0..m {
            out[[s, i]] = fit[s];
        }
    }
    Ok(out)
}

/// Gradient of the Hamiltonian in the control, conditioned on the
/// controller's information.
#[derive(Debug, Clone)]
pub struct HamiltonianGradient {
    /// Conditioned per-sample gradient, `[n_steps, n_scenarios, n_nodes]`.
    pub per_scenario: Array3<f64>,
    /// Ensemble average per step and node: the ascent direction for
    /// deterministic controls.
    pub field: Array2<f64>,
    pub diagnostics: RegressionDiagnostics,
}

/// Assemble the conditioned control derivative of the Hamiltonian along a
/// solved forward/adjoint pair:
///
/// ```text
/// r[s] = E[ df/du + db/du p + dsigma/du q + sum dtheta/du gamma nu | E_k ](s)
///        + mean_s'[ dH/dubar(s') ] * wG[s],
/// ```
///
/// with `wG` the gradient weights of the control mean-field operator.
pub fn hamiltonian_gradient(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
    path: &ForwardPath,
    adj: &AdjointTriple,
    filtration: &InfoFiltration,
    spec: &RegressionSpec,
) -> Result<HamiltonianGradient> {
    validate_run(setup, control, noise)?;
    let m = setup.n_scenarios;
    let n = setup.n_nodes();
    let nt = setup.times.n_steps;
    if adj.p.dim() != (nt + 1, m, n) || adj.q.dim() != (nt, m, n) {
        return Err(SolverError::DimensionMismatch {
            what: "adjoint triple vs setup",
            expected: (nt + 1) * m * n,
            got: adj.p.len(),
        });
    }
    let dt = setup.times.dt;
    let marks = setup.levy.marks();
    let intensities = setup.levy.intensities();
    let c = &setup.coeffs;
    let mut per_scenario = Array3::zeros((nt, m, n));
    let mut field = Array2::zeros((nt, n));
    let mut diagnostics = RegressionDiagnostics::new();

    for k in 0..nt {
        let t = setup.times.time(k);
        let jdx = filtration.feature_index(k, dt);
        let features = path.fields.index_axis(Axis(0), jdx);
        let state = path.fields.index_axis(Axis(0), k);
        let ubar = ubar_row(control, &setup.g_op, k, m)?;

        struct NodeGrad {
            r: Vec<f64>,
            diag: RegressionDiagnostics,
        }
        let cols: Vec<NodeGrad> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<NodeGrad> {
                let mut diag = RegressionDiagnostics::new();
                let x = setup.grid.nodes[i];
                let ybar = path.mf_trace[[k, i]];
                let mut du = vec![0.0; m];
                let mut dubar = vec![0.0; m];
                for s in 0..m {
                    let args =
                        CoeffArgs::new(t, x, state[[s, i]], ybar, control.value(k, s, i), ubar[i]);
                    let p = adj.p[[k, s, i]];
                    let q = adj.q[[k, s, i]];
                    let mut a = (c.running_du)(&args)
                        + (c.drift_du)(&args) * p
                        + (c.diffusion_du)(&args) * q;
                    let mut b = (c.running_dubar)(&args)
                        + (c.drift_dubar)(&args) * p
                        + (c.diffusion_dubar)(&args) * q;
                    for (j, &e) in marks.iter().enumerate() {
                        let g = adj.gamma[[k, s, i, j]] * intensities[j];
                        a += (c.jump_du)(&args, e) * g;
                        b += (c.jump_dubar)(&args, e) * g;
                    }
                    du[s] = a;
                    dubar[s] = b;
                }
                let xs: Vec<f64> = (0..m).map(|s| features[[s, i]]).collect();
                let cond = fit_conditional(&xs, &du, spec, &mut diag)?;
                let mean_dubar = dubar.iter().sum::<f64>() / m as f64;
                let wg: Vec<f64> = match control.values() {
                    ControlValues::Deterministic(a) => {
                        let w = setup.g_op.gradient(&[a[[k, i]]])?[0];
                        vec![w; m]
                    }
                    ControlValues::PerScenario(a) => {
                        let col: Vec<f64> = (0..m).map(|s| a[[k, s, i]]).collect();
                        setup.g_op.gradient(&col)?
                    }
                };
                let r: Vec<f64> = (0..m).map(|s| cond[s] + mean_dubar * wg[s]).collect();
                Ok(NodeGrad { r, diag })
            })
            .collect::<Result<_>>()?;
        for (i, col) in cols.iter().enumerate() {
            diagnostics.merge(&col.diag);
            let mut acc = 0.0;
            for s in 0..m {
                per_scenario[[k, s, i]] = col.r[s];
                acc += col.r[s];
            }
            field[[k, i]] = acc / m as f64;
        }
    }
    Ok(HamiltonianGradient {
        per_scenario,
        field,
        diagnostics,
    })
}

/// Pair a gradient with a control direction under the space-time measure
/// `dt h` (and the ensemble average for per-scenario directions).
pub fn pair_gradient(
    grad: &HamiltonianGradient,
    direction: &ControlValues,
    dt: f64,
    h: f64,
) -> f64 {
    let (nt, m, n) = grad.per_scenario.dim();
    let mut acc = 0.0;
    match direction {
        ControlValues::Deterministic(b) => {
            for k in 0..nt {
                for i in 0..n {
                    acc += grad.field[[k, i]] * b[[k, i]];
                }
            }
        }
        ControlValues::PerScenario(b) => {
            for k in 0..nt {
                for i in 0..n {
                    let mut sum = 0.0;
                    for s in 0..m {
                        sum += grad.per_scenario[[k, s, i]] * b[[k, s, i]];
                    }
                    acc += sum / m as f64;
                }
            }
        }
    }
    dt * h * acc
}

/// Shift a control along a direction without silent clamping: any entry that
/// would leave the admissible interval is an error.
pub fn perturbed_control(
    control: &ControlField,
    direction: &ControlValues,
    z: f64,
) -> Result<ControlField> {
    let (lo, hi) = control.bounds();
    let slack = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
    let violated = std::cell::Cell::new(None);
    let shifted = control.with_values_mapped(|k, s, i, v| {
        let w = v + z * direction.value(k, s, i);
        if w < lo - slack || w > hi + slack {
            violated.set(Some(w));
        }
        w
    });
    if let Some(w) = violated.get() {
        return Err(SolverError::InadmissiblePerturbation(format!(
            "perturbed control value {w} leaves the bounds [{lo}, {hi}]"
        )));
    }
    Ok(shifted)
}

/// Comparison of the two sides of the directional derivative of `J`.
#[derive(Debug, Clone, Copy)]
pub struct GateauxCheck {
    /// Richardson-extrapolated central difference of the objective.
    pub fd: f64,
    /// Gradient pairing along the same direction.
    pub pairing: f64,
    /// Gap relative to the larger magnitude (floored).
    pub rel_gap: f64,
}

/// Compare the finite-difference directional derivative of the objective
/// against the Hamiltonian-gradient pairing, under common random numbers.
pub fn gateaux_compare(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
    direction: &ControlValues,
    z: f64,
    filtration: &InfoFiltration,
    spec: &RegressionSpec,
) -> Result<GateauxCheck> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(SolverError::InvalidParameters(format!(
            "perturbation size must be positive, got {z}"
        )));
    }
    let path = solve_forward(setup, control, noise)?;
    let adj = solve_adjoint(setup, control, noise, &path, spec)?;
    let grad = hamiltonian_gradient(setup, control, noise, &path, &adj, filtration, spec)?;
    let pairing = pair_gradient(&grad, direction, setup.times.dt, setup.grid.h);

    let objective_at = |zz: f64| -> Result<f64> {
        let shifted = perturbed_control(control, direction, zz)?;
        Ok(evaluate_objective(setup, &shifted, noise)?.total)
    };
    let d_full = (objective_at(z)? - objective_at(-z)?) / (2.0 * z);
    let d_half = (objective_at(0.5 * z)? - objective_at(-0.5 * z)?) / z;
    let fd = (4.0 * d_half - d_full) / 3.0;
    let scale = fd.abs().max(pairing.abs()).max(1e-12);
    Ok(GateauxCheck {
        fd,
        pairing,
        rel_gap: (fd - pairing).abs() / scale,
    })
}

/// First-order optimality report: the conditioned gradient must vanish
/// wherever the bounds are inactive, and push outward where they are active.
#[derive(Debug, Clone)]
pub struct OptimalityReport {
    /// Largest |gradient| over samples where the bounds are inactive (or
    /// active but pushing inward, which also violates optimality).
    pub max_abs_interior: f64,
    pub mean_abs_interior: f64,
    /// Samples excluded as consistently clamped.
    pub n_active: usize,
    pub n_checked: usize,
    pub gradient: HamiltonianGradient,
}

/// Check the necessary condition along a control: solve forward and adjoint,
/// assemble the conditioned gradient, and measure it away from consistently
/// active bounds (at the lower bound a negative gradient is consistent; at
/// the upper bound a positive one).
pub fn check_necessary(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
    filtration: &InfoFiltration,
    spec: &RegressionSpec,
    active_tol: f64,
) -> Result<OptimalityReport> {
    let path = solve_forward(setup, control, noise)?;
    let adj = solve_adjoint(setup, control, noise, &path, spec)?;
    let grad = hamiltonian_gradient(setup, control, noise, &path, &adj, filtration, spec)?;
    let (lo, hi) = control.bounds();
    let (nt, m, n) = grad.per_scenario.dim();

    let mut max_abs = 0.0_f64;
    let mut sum_abs = 0.0;
    let mut n_active = 0usize;
    let mut n_checked = 0usize;
    let mut consider = |u: f64, r: f64| {
        let at_lower = u <= lo + active_tol;
        let at_upper = u >= hi - active_tol;
        if (at_lower && r < 0.0) || (at_upper && r > 0.0) {
            n_active += 1;
        } else {
            n_checked += 1;
            let a = r.abs();
            sum_abs += a;
            if a > max_abs {
                max_abs = a;
            }
        }
    };
    match control.values() {
        ControlValues::Deterministic(a) => {
            for k in 0..nt {
                for i in 0..n {
                    consider(a[[k, i]], grad.field[[k, i]]);
                }
            }
        }
        ControlValues::PerScenario(a) => {
            for k in 0..nt {
                for s in 0..m {
                    for i in 0..n {
                        consider(a[[k, s, i]], grad.per_scenario[[k, s, i]]);
                    }
                }
            }
        }
    }
    Ok(OptimalityReport {
        max_abs_interior: max_abs,
        mean_abs_interior: if n_checked > 0 {
            sum_abs / n_checked as f64
        } else {
            0.0
        },
        n_active,
        n_checked,
        gradient: grad,
    })
}

/// A midpoint-concavity counterexample: the Hamiltonian restricted to the
/// one-sample rendering of the mean-field arguments fails
/// `H(mid) >= (H(a) + H(b)) / 2` on this pair.
#[derive(Debug, Clone, Copy)]
pub struct ConcavityWitness {
    pub y1: f64,
    pub u1: f64,
    pub y2: f64,
    pub u2: f64,
    /// `H(mid) - (H(a) + H(b)) / 2` (negative on a violation).
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct ConcavityReport {
    pub checked: usize,
    /// Most negative midpoint gap seen (0 when none).
    pub worst_gap: f64,
    pub violations: Vec<ConcavityWitness>,
}

/// Probe midpoint concavity of `(y, u) -> H(t, x, y, F({y}), u, G({u}))` at
/// fixed adjoint values over random pairs in a rectangle. The mean-field
/// arguments are rendered through the one-sample ensemble, which is the
/// diagonal restriction the sufficient-condition hypotheses quantify over.
#[allow(clippy::too_many_arguments)]
pub fn check_concavity(
    coeffs: &CoefficientSet,
    levy: &LevyMeasure,
    f_op: &MeanFieldOperator,
    g_op: &MeanFieldOperator,
    t: f64,
    x: f64,
    p: f64,
    q: f64,
    gamma: &[f64],
    y_range: (f64, f64),
    u_range: (f64, f64),
    n_pairs: usize,
    seed: u64,
) -> Result<ConcavityReport> {
    if !(y_range.0 < y_range.1) || !(u_range.0 < u_range.1) {
        return Err(SolverError::InvalidParameters(
            "concavity probe ranges must be nondegenerate".into(),
        ));
    }
    let eval = |y: f64, u: f64| -> Result<f64> {
        let args = CoeffArgs::new(t, x, y, f_op.apply(&[y])?, u, g_op.apply(&[u])?);
        Ok(hamiltonian(coeffs, levy, &args, p, q, gamma))
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut draw = |range: (f64, f64)| range.0 + (range.1 - range.0) * rng.random::<f64>();
    let mut violations = Vec::new();
    let mut worst: f64 = 0.0;
    for _ in 0..n_pairs {
        let (y1, u1) = (draw(y_range), draw(u_range));
        let (y2, u2) = (draw(y_range), draw(u_range));
        let h1 = eval(y1, u1)?;
        let h2 = eval(y2, u2)?;
        let hm = eval(0.5 * (y1 + y2), 0.5 * (u1 + u2))?;
        let gap = hm - 0.5 * (h1 + h2);
        let tol = 1e-10 * h1.abs().max(h2.abs()).max(hm.abs()).max(1.0);
        if gap < -tol {
            worst = worst.min(gap);
            violations.push(ConcavityWitness {
                y1,
                u1,
                y2,
                u2,
                gap,
            });
        }
    }
    Ok(ConcavityReport {
        checked: n_pairs,
        worst_gap: worst,
        violations,
    })
}

/// Options of the projected gradient ascent.
#[derive(Debug, Clone, Copy)]
pub struct AscentOptions {
    pub step: f64,
    pub n_iters: usize,
    /// Stop when the median control change per iteration drops below this.
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct AscentReport {
    /// Objective after each sweep, starting with the initial control.
    pub objectives: Vec<f64>,
    pub control: ControlField,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected gradient ascent on the objective under common random numbers:
/// each sweep solves forward and adjoint, assembles the conditioned
/// gradient, and moves the control by `step * gradient`, clamped into the
/// bounds.
pub fn gradient_ascent(
    setup: &SimSetup,
    initial: &ControlField,
    noise: &NoisePath,
    filtration: &InfoFiltration,
    spec: &RegressionSpec,
    opts: &AscentOptions,
) -> Result<AscentReport> {
    if !(opts.step > 0.0) || opts.n_iters == 0 {
        return Err(SolverError::InvalidParameters(
            "ascent needs a positive step and at least one iteration".into(),
        ));
    }
    let mut control = initial.clone();
    let mut objectives = vec![evaluate_objective(setup, &control, noise)?.total];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.n_iters {
        let path = solve_forward(setup, &control, noise)?;
        let adj = solve_adjoint(setup, &control, noise, &path, spec)?;
        let grad = hamiltonian_gradient(setup, &control, noise, &path, &adj, filtration, spec)?;
        let next = control.with_values_mapped(|k, s, i, v| match control.values() {
            ControlValues::Deterministic(_) => v + opts.step * grad.field[[k, i]],
            ControlValues::PerScenario(_) => v + opts.step * grad.per_scenario[[k, s, i]],
        });
        let change = control.median_abs_diff(&next)?;
        control = next;
        iterations += 1;
        objectives.push(evaluate_objective(setup, &control, noise)?.total);
        if change <= opts.tol {
            converged = true;
            break;
        }
    }
    Ok(AscentReport {
        objectives,
        control,
        iterations,
        converged,
    })
}
