//! Backward solvers: the adjoint triple of the maximum principle and a
//! standalone mean-field backward equation with contraction reporting.
//!
//! The adjoint process of the control problem solves, backward from
//!
//! ```text
//! p_T = dg/dy (x, Y_T, ybar_T) + mean[dg/dybar] * (grad F weight),
//! ```
//!
//! the semi-implicit recursion
//!
//! ```text
//! (I - dt L*) p_k = E[p_{k+1} | Y_k] + dt ( dH/dy + mean[dH/dybar] * wF ),
//! ```
//!
//! where the Hamiltonian derivative is expanded through the coefficients:
//! `dH/dy = df/dy + db/dy p + dsigma/dy q + sum_e dtheta/dy(e) gamma_e nu_e`
//! (and likewise for the `ybar` derivatives). The conditional expectation is
//! approximated per node by polynomial regression on the local field value,
//! and the covariation processes are recovered from the centered residual
//! `r = p_{k+1} - E[p_{k+1} | Y_k]`:
//!
//! ```text
//! q_k       = E[r dW | Y_k] / dt,
//! gamma_k,e = E[r (dN_e - nu_e dt) | Y_k] / (nu_e dt).
//! ```
//!
//! Centering on the fitted conditional mean makes the estimators exact in
//! the degenerate cases (deterministic dynamics give q = gamma = 0
//! identically, to rounding).
//!
//! The standalone backward solver [`picard_backward`] iterates a general
//! mean-field generator, freezing the expectation traces of `(Y, Z, U)` at
//! the previous iterate and reporting the weighted distances between
//! successive iterates; for Lipschitz generators with small constants the
//! distance ratios contract.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, Axis};
use rayon::prelude::*;

use crate::coeffs::CoeffArgs;
use crate::error::{Result, SolverError};
use crate::forward::{ubar_row, validate_run, ControlField, ForwardPath};
use crate::noise::NoisePath;
use crate::regression::{
    fit_conditional, fit_conditional_multi, RegressionDiagnostics, RegressionSpec,
};
use crate::setup::SimSetup;

/// Adjoint triple on the space-time-scenario grid.
#[derive(Debug, Clone)]
pub struct AdjointTriple {
    /// First adjoint `p`, `[n_steps + 1, n_scenarios, n_nodes]`.
    pub p: Array3<f64>,
    /// Brownian covariation `q`, `[n_steps, n_scenarios, n_nodes]`.
    pub q: Array3<f64>,
    /// Jump covariations `gamma`, `[n_steps, n_scenarios, n_nodes, n_marks]`.
    pub gamma: Array4<f64>,
    /// Accumulated regression diagnostics of the backward sweep.
    pub diagnostics: RegressionDiagnostics,
}

/// Terminal adjoint value: derivative of the terminal payoff through both
/// its direct and its mean-field argument.
pub fn terminal_condition(setup: &SimSetup, path: &ForwardPath) -> Result<Array2<f64>> {
    let m = setup.n_scenarios;
    let n = setup.n_nodes();
    let nt = setup.times.n_steps;
    let terminal = path.fields.index_axis(Axis(0), nt);
    let mut p_t = Array2::zeros((m, n));
    let g_dy = &setup.coeffs.terminal_dy;
    let g_dybar = &setup.coeffs.terminal_dybar;
    let mut col = vec![0.0; m];
    for i in 0..n {
        let x = setup.grid.nodes[i];
        let ybar = path.mf_trace[[nt, i]];
        for s in 0..m {
            col[s] = terminal[[s, i]];
        }
        let weights = setup.f_op.gradient(&col)?;
        let mean_dybar =
            col.iter().map(|&y| g_dybar(x, y, ybar)).sum::<f64>() / m as f64;
        for s in 0..m {
            p_t[[s, i]] = g_dy(x, col[s], ybar) + mean_dybar * weights[s];
        }
    }
    Ok(p_t)
}

/// Solve the adjoint equation backward along a simulated forward path.
pub fn solve_adjoint(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
    path: &ForwardPath,
    spec: &RegressionSpec,
) -> Result<AdjointTriple> {
    validate_run(setup, control, noise)?;
    spec.validate()?;
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
    let n_marks = setup.levy.n_marks();
    let dt = setup.times.dt;
    let marks = setup.levy.marks();
    let intensities = setup.levy.intensities();
    let adj_op = setup.op.adjoint();
    let c = &setup.coeffs;

    let mut p = Array3::zeros((nt + 1, m, n));
    let mut q = Array3::zeros((nt, m, n));
    let mut gamma = Array4::zeros((nt, m, n, n_marks));
    let mut diagnostics = RegressionDiagnostics::new();

    let p_terminal = terminal_condition(setup, path)?;
    for s in 0..m {
        for i in 0..n {
            p[[nt, s, i]] = p_terminal[[s, i]];
        }
    }

    for k in (0..nt).rev() {
        let t = setup.times.time(k);
        let ubar = ubar_row(control, &setup.g_op, k, m)?;
        let state = path.fields.index_axis(Axis(0), k);
        let p_next = p.index_axis(Axis(0), k + 1).to_owned();

        // Per-node regressions: conditional mean of p_{k+1}, then the
        // covariation targets on the centered residual.
        struct NodeFit {
            cond: Vec<f64>,
            q: Vec<f64>,
            gamma: Vec<Vec<f64>>,
            weights: Vec<f64>,
            diag: RegressionDiagnostics,
        }
        let fits: Vec<NodeFit> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<NodeFit> {
                let mut diag = RegressionDiagnostics::new();
                let xs: Vec<f64> = (0..m).map(|s| state[[s, i]]).collect();
                let targets: Vec<f64> = (0..m).map(|s| p_next[[s, i]]).collect();
                let cond = fit_conditional(&xs, &targets, spec, &mut diag)?;
                let resid: Vec<f64> = (0..m).map(|s| targets[s] - cond[s]).collect();

                let qt: Vec<f64> = (0..m)
                    .map(|s| resid[s] * noise.dw[[s, k]] / dt)
                    .collect();
                let q_fit = fit_conditional(&xs, &qt, spec, &mut diag)?;

                let mut gamma_fits = Vec::with_capacity(n_marks);
                for j in 0..n_marks {
                    let scale = intensities[j] * dt;
                    let gt: Vec<f64> = (0..m)
                        .map(|s| {
                            resid[s] * (noise.counts[[s, k, j]] as f64 - scale) / scale
                        })
                        .collect();
                    gamma_fits.push(fit_conditional(&xs, &gt, spec, &mut diag)?);
                }

                let weights = setup.f_op.gradient(&xs)?;
                Ok(NodeFit {
                    cond,
                    q: q_fit,
                    gamma: gamma_fits,
                    weights,
                    diag,
                })
            })
            .collect::<Result<_>>()?;
        for f in &fits {
            diagnostics.merge(&f.diag);
        }

        for (i, f) in fits.iter().enumerate() {
            for s in 0..m {
                q[[k, s, i]] = f.q[s];
                for j in 0..n_marks {
                    gamma[[k, s, i, j]] = f.gamma[j][s];
                }
            }
        }

        // Hamiltonian derivative terms, with the mean-field contribution
        // paired against the gradient weights of F.
        let mut mean_hybar = vec![0.0; n];
        let mut hy = Array2::zeros((m, n));
        for (i, f) in fits.iter().enumerate() {
            let x = setup.grid.nodes[i];
            let ybar = path.mf_trace[[k, i]];
            let mut acc = 0.0;
            for s in 0..m {
                let args =
                    CoeffArgs::new(t, x, state[[s, i]], ybar, control.value(k, s, i), ubar[i]);
                let p_tilde = f.cond[s];
                let mut dy = (c.running_dy)(&args)
                    + (c.drift_dy)(&args) * p_tilde
                    + (c.diffusion_dy)(&args) * f.q[s];
                let mut dybar = (c.running_dybar)(&args)
                    + (c.drift_dybar)(&args) * p_tilde
                    + (c.diffusion_dybar)(&args) * f.q[s];
                for (j, &e) in marks.iter().enumerate() {
                    dy += (c.jump_dy)(&args, e) * f.gamma[j][s] * intensities[j];
                    dybar += (c.jump_dybar)(&args, e) * f.gamma[j][s] * intensities[j];
                }
                hy[[s, i]] = dy;
                acc += dybar;
            }
            mean_hybar[i] = acc / m as f64;
        }

        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|s| -> Result<Vec<f64>> {
                let mut rhs = vec![0.0; n];
                for (i, f) in fits.iter().enumerate() {
                    rhs[i] =
                        f.cond[s] + dt * (hy[[s, i]] + mean_hybar[i] * f.weights[s]);
                }
                let row = adj_op.solve_shifted(dt, &rhs)?;
                for (i, v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(SolverError::NonFinite {
                            what: "adjoint state",
                            t,
                            x: setup.grid.nodes[i],
                        });
                    }
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;
        for (s, row) in rows.into_iter().enumerate() {
            for (i, v) in row.into_iter().enumerate() {
                p[[k, s, i]] = v;
            }
        }
    }

    Ok(AdjointTriple {
        p,
        q,
        gamma,
        diagnostics,
    })
}

/// Arguments handed to a backward generator at one (scenario, node) sample.
#[derive(Debug, Clone)]
pub struct BackwardArgs<'a> {
    pub t: f64,
    pub x: f64,
    /// Conditional state value (first unknown).
    pub y: f64,
    /// Frozen expectation trace of the state at this time level.
    pub y_mean: f64,
    /// Brownian covariation value (second unknown).
    pub z: f64,
    /// Frozen expectation trace of `z`.
    pub z_mean: f64,
    /// Jump covariation values per mark (third unknown).
    pub jumps: &'a [f64],
    /// Frozen expectation traces of the jump covariations per mark.
    pub jumps_mean: &'a [f64],
}

/// Generator of the standalone backward equation.
#[derive(Clone)]
pub struct BackwardGenerator {
    pub f: Arc<dyn Fn(&BackwardArgs) -> f64 + Send + Sync>,
    pub label: String,
}

impl fmt::Debug for BackwardGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BackwardGenerator({})", self.label)
    }
}

impl BackwardGenerator {
    pub fn new(
        f: impl Fn(&BackwardArgs) -> f64 + Send + Sync + 'static,
        label: impl Into<String>,
    ) -> Self {
        Self {
            f: Arc::new(f),
            label: label.into(),
        }
    }
}

/// Result of the backward iteration, with the contraction record.
#[derive(Debug, Clone)]
pub struct PicardBackwardReport {
    /// Weighted distance between successive iterates; the first entry
    /// compares the first sweep with the zero start.
    pub distances: Vec<f64>,
    /// `ratios[j] = distances[j + 1] / distances[j]` (zero when the previous
    /// distance already vanished).
    pub ratios: Vec<f64>,
    /// Final iterate: state, `[n_steps + 1, n_scenarios, n_nodes]`.
    pub y: Array3<f64>,
    /// Brownian covariation, `[n_steps, n_scenarios, n_nodes]`.
    pub z: Array3<f64>,
    /// Jump covariations, `[n_steps, n_scenarios, n_nodes, n_marks]`.
    pub u: Array4<f64>,
    pub diagnostics: RegressionDiagnostics,
}

/// Cumulative noise summaries used as regression features of the backward
/// solver: the Brownian path and the mark-weighted compensated jump sum at
/// each time level, `[n_steps + 1, n_scenarios]`.
pub fn noise_features(noise: &NoisePath, marks: &[f64], intensities: &[f64]) -> (Array2<f64>, Array2<f64>) {
    let m = noise.n_scenarios();
    let nt = noise.n_steps();
    let mut w = Array2::zeros((nt + 1, m));
    let mut jc = Array2::zeros((nt + 1, m));
    for s in 0..m {
        let mut acc_w = 0.0;
        let mut acc_j = 0.0;
        for k in 0..nt {
            acc_w += noise.dw[[s, k]];
            for (j, &e) in marks.iter().enumerate() {
                acc_j += e * (noise.counts[[s, k, j]] as f64 - intensities[j] * noise.dt);
            }
            w[[k + 1, s]] = acc_w;
            jc[[k + 1, s]] = acc_j;
        }
    }
    (w, jc)
}

/// Iterate the backward equation
///
/// ```text
/// dY = [A Y + f(t, Y, E Y, Z, E Z, U, E U)] dt + Z dW + U dNtilde,
/// Y_T = xi,  A = -L,
/// ```
///
/// by freezing the expectation traces at the previous iterate (zero start)
/// and sweeping backward with regression conditioning on the bivariate
/// quadratic basis in the cumulative noise features. Reports the weighted
/// distances
///
/// ```text
/// D = sum_k dt e^{w t_k} mean_s( |dY|_H^2 + |dZ|_H^2 + h sum_i sum_e dU^2 nu_e )
/// ```
///
/// between successive iterates.
pub fn picard_backward(
    setup: &SimSetup,
    noise: &NoisePath,
    terminal: &Array2<f64>,
    generator: &BackwardGenerator,
    n_iters: usize,
    weight_rate: f64,
    spec: &RegressionSpec,
) -> Result<PicardBackwardReport> {
    if n_iters < 2 {
        return Err(SolverError::InvalidParameters(
            "the backward iteration needs at least two sweeps".into(),
        ));
    }
    setup.validate()?;
    spec.validate()?;
    let m = setup.n_scenarios;
    let n = setup.n_nodes();
    let nt = setup.times.n_steps;
    if terminal.dim() != (m, n) {
        return Err(SolverError::DimensionMismatch {
            what: "terminal data vs ensemble",
            expected: m * n,
            got: terminal.len(),
        });
    }
    if noise.n_scenarios() != m || noise.n_steps() != nt {
        return Err(SolverError::DimensionMismatch {
            what: "noise vs setup",
            expected: m * nt,
            got: noise.n_scenarios() * noise.n_steps(),
        });
    }
    let n_marks = setup.levy.n_marks();
    let dt = setup.times.dt;
    let intensities = setup.levy.intensities();
    let (wf, jf) = noise_features(noise, setup.levy.marks(), intensities);

    let mut y_prev = Array3::zeros((nt + 1, m, n));
    let mut z_prev = Array3::zeros((nt, m, n));
    let mut u_prev = Array4::zeros((nt, m, n, n_marks));
    let mut distances = Vec::with_capacity(n_iters);
    let mut diagnostics = RegressionDiagnostics::new();

    for _ in 0..n_iters {
        // Frozen expectation traces of the previous iterate.
        let mut y_trace = Array2::zeros((nt + 1, n));
        for k in 0..=nt {
            for i in 0..n {
                let mut acc = 0.0;
                for s in 0..m {
                    acc += y_prev[[k, s, i]];
                }
                y_trace[[k, i]] = acc / m as f64;
            }
        }
        let mut z_trace = Array2::zeros((nt, n));
        let mut u_trace = Array3::zeros((nt, n, n_marks));
        for k in 0..nt {
            for i in 0..n {
                let mut acc = 0.0;
                for s in 0..m {
                    acc += z_prev[[k, s, i]];
                }
                z_trace[[k, i]] = acc / m as f64;
                for j in 0..n_marks {
                    let mut acc = 0.0;
                    for s in 0..m {
                        acc += u_prev[[k, s, i, j]];
                    }
                    u_trace[[k, i, j]] = acc / m as f64;
                }
            }
        }

        let mut y = Array3::zeros((nt + 1, m, n));
        let mut z = Array3::zeros((nt, m, n));
        let mut u = Array4::zeros((nt, m, n, n_marks));
        for s in 0..m {
            for i in 0..n {
                y[[nt, s, i]] = terminal[[s, i]];
            }
        }

        for k in (0..nt).rev() {
            let t = setup.times.time(k);
            let y_next = y.index_axis(Axis(0), k + 1).to_owned();
            // Regression features at this time level.
            let feats: Vec<Vec<f64>> = (0..m)
                .map(|s| {
                    let a = wf[[k, s]];
                    let b = jf[[k, s]];
                    vec![a, b, a * a, a * b, b * b]
                })
                .collect();

            struct NodeFit {
                cond: Vec<f64>,
                z: Vec<f64>,
                u: Vec<Vec<f64>>,
                diag: RegressionDiagnostics,
            }
            let fits: Vec<NodeFit> = (0..n)
                .into_par_iter()
                .map(|i| -> Result<NodeFit> {
                    let mut diag = RegressionDiagnostics::new();
                    let targets: Vec<f64> = (0..m).map(|s| y_next[[s, i]]).collect();
                    let cond = fit_conditional_multi(&feats, &targets, spec.ridge, &mut diag)?;
                    let resid: Vec<f64> = (0..m).map(|s| targets[s] - cond[s]).collect();
                    let zt: Vec<f64> = (0..m)
                        .map(|s| resid[s] * noise.dw[[s, k]] / dt)
                        .collect();
                    let z_fit = fit_conditional_multi(&feats, &zt, spec.ridge, &mut diag)?;
                    let mut u_fits = Vec::with_capacity(n_marks);
                    for j in 0..n_marks {
                        let scale = intensities[j] * dt;
                        let ut: Vec<f64> = (0..m)
                            .map(|s| resid[s] * (noise.counts[[s, k, j]] as f64 - scale) / scale)
                            .collect();
                        u_fits.push(fit_conditional_multi(&feats, &ut, spec.ridge, &mut diag)?);
                    }
                    Ok(NodeFit {
                        cond,
                        z: z_fit,
                        u: u_fits,
                        diag,
                    })
                })
                .collect::<Result<_>>()?;
            for f in &fits {
                diagnostics.merge(&f.diag);
            }

            for (i, f) in fits.iter().enumerate() {
                for s in 0..m {
                    z[[k, s, i]] = f.z[s];
                    for j in 0..n_marks {
                        u[[k, s, i, j]] = f.u[j][s];
                    }
                }
            }

            // Generator (with frozen traces) and the shifted solve.
            let rows: Vec<Vec<f64>> = (0..m)
                .into_par_iter()
                .map(|s| -> Result<Vec<f64>> {
                    let mut rhs = vec![0.0; n];
                    for (i, f) in fits.iter().enumerate() {
                        let jumps: Vec<f64> = (0..n_marks).map(|j| f.u[j][s]).collect();
                        let jumps_mean: Vec<f64> =
                            (0..n_marks).map(|j| u_trace[[k, i, j]]).collect();
                        let args = BackwardArgs {
                            t,
                            x: setup.grid.nodes[i],
                            y: f.cond[s],
                            y_mean: y_trace[[k, i]],
                            z: f.z[s],
                            z_mean: z_trace[[k, i]],
                            jumps: &jumps,
                            jumps_mean: &jumps_mean,
                        };
                        rhs[i] = f.cond[s] - dt * (generator.f)(&args);
                    }
                    let row = setup.op.solve_shifted(dt, &rhs)?;
                    for (i, v) in row.iter().enumerate() {
                        if !v.is_finite() {
                            return Err(SolverError::NonFinite {
                                what: "backward state",
                                t,
                                x: setup.grid.nodes[i],
                            });
                        }
                    }
                    Ok(row)
                })
                .collect::<Result<_>>()?;
            for (s, row) in rows.into_iter().enumerate() {
                for (i, v) in row.into_iter().enumerate() {
                    y[[k, s, i]] = v;
                }
            }
        }

        // Weighted distance to the previous iterate.
        let h = setup.grid.h;
        let mut dist = 0.0;
        for k in 0..nt {
            let wgt = (weight_rate * setup.times.time(k)).exp();
            let mut level = 0.0;
            for s in 0..m {
                let mut dy = 0.0;
                let mut dz = 0.0;
                let mut du = 0.0;
                for i in 0..n {
                    let a = y[[k, s, i]] - y_prev[[k, s, i]];
                    dy += a * a;
                    let b = z[[k, s, i]] - z_prev[[k, s, i]];
                    dz += b * b;
                    for j in 0..n_marks {
                        let c = u[[k, s, i, j]] - u_prev[[k, s, i, j]];
                        du += c * c * intensities[j];
                    }
                }
                level += h * (dy + dz + du);
            }
            dist += dt * wgt * level / m as f64;
        }
        distances.push(dist);

        y_prev = y;
        z_prev = z;
        u_prev = u;
    }

    let ratios = distances
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
        .collect();
    Ok(PicardBackwardReport {
        distances,
        ratios,
        y: y_prev,
        z: z_prev,
        u: u_prev,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{affine_model, heat_model, AffineModelParams};
    use crate::forward::solve_forward;
    use crate::grid::{DiscreteOperator, SpatialGrid};
    use crate::meanfield::MeanFieldOperator;
    use crate::noise::LevyMeasure;
    use crate::setup::{BoundaryData, SimSetup, TimeGrid};

    fn make_setup(
        n_nodes: usize,
        kappa: f64,
        t_end: f64,
        n_steps: usize,
        m: usize,
        coeffs: crate::coeffs::CoefficientSet,
        levy: LevyMeasure,
        initial: Vec<f64>,
        f_op: MeanFieldOperator,
        seed: u64,
    ) -> SimSetup {
        let grid = SpatialGrid::new(0.0, 1.0, n_nodes).unwrap();
        let op = DiscreteOperator::laplacian(&grid, kappa).unwrap();
        let times = TimeGrid::new(t_end, n_steps).unwrap();
        SimSetup::new(
            grid,
            op,
            times,
            levy,
            m,
            seed,
            coeffs,
            f_op,
            MeanFieldOperator::expectation(),
            initial,
            BoundaryData::Zero,
        )
        .unwrap()
    }

    fn zero_op_setup(
        t_end: f64,
        n_steps: usize,
        m: usize,
        coeffs: crate::coeffs::CoefficientSet,
        levy: LevyMeasure,
        seed: u64,
    ) -> SimSetup {
        let grid = SpatialGrid::new(0.0, 1.0, 1).unwrap();
        let op = DiscreteOperator::new(vec![0.0], vec![0.0], vec![0.0]).unwrap();
        let times = TimeGrid::new(t_end, n_steps).unwrap();
        SimSetup::new(
            grid,
            op,
            times,
            levy,
            m,
            seed,
            coeffs,
            MeanFieldOperator::expectation(),
            MeanFieldOperator::expectation(),
            vec![1.0],
            BoundaryData::Zero,
        )
        .unwrap()
    }

    fn control_for(setup: &SimSetup) -> ControlField {
        ControlField::constant(0.0, setup.times.n_steps, setup.n_nodes(), (-1e6, 1e6)).unwrap()
    }

    #[test]
    fn zero_payoff_gives_zero_triple() {
        let setup = make_setup(
            4,
            0.5,
            0.5,
            8,
            30,
            affine_model(AffineModelParams {
                s0: 0.5,
                th0: 0.3,
                ..Default::default()
            }),
            LevyMeasure::desk_default(),
            vec![1.0; 4],
            MeanFieldOperator::expectation(),
            41,
        );
        let noise = setup.sample_noise().unwrap();
        let control = control_for(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        let adj = solve_adjoint(&setup, &control, &noise, &path, &RegressionSpec::default())
            .unwrap();
        assert!(adj.p.iter().all(|v| *v == 0.0));
        assert!(adj.q.iter().all(|v| *v == 0.0));
        assert!(adj.gamma.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn terminal_condition_with_expectation_payoff() {
        // g = 2 y + 3 ybar with F = expectation: p_T = 2 + 3 for every
        // scenario and node.
        let setup = make_setup(
            3,
            0.5,
            0.2,
            4,
            25,
            affine_model(AffineModelParams {
                s0: 0.4,
                gy: 2.0,
                gybar: 3.0,
                ..Default::default()
            }),
            LevyMeasure::empty(),
            vec![1.0, 2.0, 1.0],
            MeanFieldOperator::expectation(),
            17,
        );
        let noise = setup.sample_noise().unwrap();
        let control = control_for(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        let p_t = terminal_condition(&setup, &path).unwrap();
        for v in p_t.iter() {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn terminal_condition_pairs_nonlinear_mean_field_gradient() {
        // g = ybar with F(mu) = mean of y^2: the gradient weight is 2 y, so
        // p_T[s] = 2 Y_T[s].
        let setup = make_setup(
            2,
            0.5,
            0.2,
            4,
            30,
            affine_model(AffineModelParams {
                s0: 0.4,
                gybar: 1.0,
                ..Default::default()
            }),
            LevyMeasure::empty(),
            vec![1.0, 1.5],
            MeanFieldOperator::smoothed_square(),
            23,
        );
        let noise = setup.sample_noise().unwrap();
        let control = control_for(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        let p_t = terminal_condition(&setup, &path).unwrap();
        for s in 0..30 {
            for i in 0..2 {
                let expect = 2.0 * path.fields[[4, s, i]];
                assert!((p_t[[s, i]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_dynamics_reduce_to_backward_recursion() {
        // No noise: the conditional expectation is the (degenerate) ensemble
        // mean, q and gamma vanish, and p solves a deterministic recursion
        // p_k = (I - dt L*)^{-1} [ p_{k+1} (1 + dt b_y) + dt f_y ].
        let by = -0.6;
        let fy = 0.8;
        let setup = make_setup(
            5,
            0.4,
            0.5,
            10,
            12,
            affine_model(AffineModelParams {
                by,
                fy,
                gy: 1.5,
                ..Default::default()
            }),
            LevyMeasure::empty(),
            vec![1.0; 5],
            MeanFieldOperator::expectation(),
            3,
        );
        let noise = setup.sample_noise().unwrap();
        let control = control_for(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        let adj = solve_adjoint(&setup, &control, &noise, &path, &RegressionSpec::default())
            .unwrap();

        assert!(adj.q.iter().all(|v| v.abs() < 1e-12));
        assert!(adj.gamma.iter().all(|v| v.abs() < 1e-12));

        let adj_op = setup.op.adjoint();
        let dt = setup.times.dt;
        let mut expect = vec![1.5; 5];
        for _ in (0..10).rev() {
            let rhs: Vec<f64> = expect
                .iter()
                .map(|&p| p * (1.0 + dt * by) + dt * fy)
                .collect();
            expect = adj_op.solve_shifted(dt, &rhs).unwrap();
        }
        for s in 0..12 {
            for i in 0..5 {
                assert!(
                    (adj.p[[0, s, i]] - expect[i]).abs() < 1e-10,
                    "p0[{s},{i}] = {} vs {}",
                    adj.p[[0, s, i]],
                    expect[i]
                );
            }
        }
        // Every regression hit the degenerate-ensemble fallback.
        assert_eq!(adj.diagnostics.fallbacks, adj.diagnostics.fits);
    }

    #[test]
    fn brownian_covariation_recovered_for_martingale_terminal() {
        // Zero operator, dY = s0 dW, g = y^2/2: p_t = E[Y_T | F_t] = Y_t and
        // q = s0. The regression basis contains Y linearly, so the
        // conditional fit is exact up to Monte Carlo noise in the
        // covariation estimate.
        let s0 = 0.7;
        let m = 4000;
        let coeffs = crate::coeffs::CoefficientSet::builder("flat-brownian")
            .diffusion(
                Arc::new(move |_| s0),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
            )
            .terminal(
                Arc::new(|_, y, _| 0.5 * y * y),
                Arc::new(|_, y, _| y),
                Arc::new(|_, _, _| 0.0),
            )
            .build();
        let setup = zero_op_setup(0.15, 3, m, coeffs, LevyMeasure::empty(), 271828);
        let noise = setup.sample_noise().unwrap();
        let control = control_for(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        let adj = solve_adjoint(&setup, &control, &noise, &path, &RegressionSpec::default())
            .unwrap();

        for k in 0..3 {
            let mean_q = (0..m).map(|s| adj.q[[k, s, 0]]).sum::<f64>() / m as f64;
            assert!(
                (mean_q - s0).abs() < 0.05,
                "step {k}: mean q {mean_q} vs {s0}"
            );
        }
        // p tracks the martingale state.
        for s in (0..m).step_by(537) {
            let err = (adj.p[[1, s, 0]] - path.fields[[1, s, 0]]).abs();
            assert!(err < 0.05, "p vs Y at scenario {s}: {err}");
        }
    }

    #[test]
    fn jump_covariation_recovered_for_martingale_terminal() {
        // Zero operator, dY = th0 dNtilde on a single mark, g = y^2/2:
        // gamma = th0 (the jump size of p equals that of Y).
        let th0 = 0.6;
        let m = 4000;
        let coeffs = crate::coeffs::CoefficientSet::builder("flat-jump")
            .jump(
                Arc::new(move |_, _e| th0),
                Arc::new(|_, _| 0.0),
                Arc::new(|_, _| 0.0),
                Arc::new(|_, _| 0.0),
                Arc::new(|_, _| 0.0),
            )
            .terminal(
                Arc::new(|_, y, _| 0.5 * y * y),
                Arc::new(|_, y, _| y),
                Arc::new(|_, _, _| 0.0),
            )
            .build();
        let levy = LevyMeasure::new(vec![1.0], vec![2.0]).unwrap();
        let setup = zero_op_setup(0.15, 3, m, coeffs, levy, 314159);
        let noise = setup.sample_noise().unwrap();
        let control = control_for(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        let adj = solve_adjoint(&setup, &control, &noise, &path, &RegressionSpec::default())
            .unwrap();
        for k in 0..3 {
            let mean_g = (0..m).map(|s| adj.gamma[[k, s, 0, 0]]).sum::<f64>() / m as f64;
            assert!(
                (mean_g - th0).abs() < 0.12,
                "step {k}: mean gamma {mean_g} vs {th0}"
            );
        }
    }

    #[test]
    fn regression_fit_counts_accumulate() {
        let setup = make_setup(
            3,
            0.5,
            0.2,
            5,
            40,
            affine_model(AffineModelParams {
                s0: 0.3,
                gy: 1.0,
                ..Default::default()
            }),
            LevyMeasure::desk_default(),
            vec![1.0; 3],
            MeanFieldOperator::expectation(),
            5,
        );
        let noise = setup.sample_noise().unwrap();
        let control = control_for(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        let adj = solve_adjoint(&setup, &control, &noise, &path, &RegressionSpec::default())
            .unwrap();
        // Per step and node: conditional mean, q, and one fit per mark.
        assert_eq!(adj.diagnostics.fits, 5 * 3 * (2 + 2));
    }

    #[test]
    fn backward_iteration_preserves_means_for_flat_generator() {
        // Zero operator and zero generator: each backward step is a pure
        // conditional-expectation projection, which preserves the ensemble
        // mean exactly; Y_0 carries the mean of the terminal data.
        let setup = zero_op_setup(
            0.5,
            10,
            600,
            heat_model(),
            LevyMeasure::desk_default(),
            777,
        );
        let noise = setup.sample_noise().unwrap();
        let (w, _) = noise_features(&noise, setup.levy.marks(), setup.levy.intensities());
        let mut terminal = Array2::zeros((600, 1));
        for s in 0..600 {
            terminal[[s, 0]] = 2.0 + (w[[10, s]]).tanh();
        }
        let generator = BackwardGenerator::new(|_| 0.0, "zero");
        let report = picard_backward(
            &setup,
            &noise,
            &terminal,
            &generator,
            2,
            1.0,
            &RegressionSpec::default(),
        )
        .unwrap();
        let mean_terminal = terminal.iter().sum::<f64>() / 600.0;
        for k in 0..=10 {
            let mean_k = (0..600).map(|s| report.y[[k, s, 0]]).sum::<f64>() / 600.0;
            assert!(
                (mean_k - mean_terminal).abs() < 1e-9,
                "mean at level {k}: {mean_k} vs {mean_terminal}"
            );
        }
        // Generator ignores the traces, so the second sweep repeats the first.
        assert_eq!(report.distances[1], 0.0);
    }

    #[test]
    fn backward_iteration_contracts_for_lipschitz_generator() {
        let setup = make_setup(
            3,
            0.5,
            0.5,
            10,
            400,
            heat_model(),
            LevyMeasure::desk_default(),
            vec![1.0; 3],
            MeanFieldOperator::expectation(),
            1001,
        );
        let noise = setup.sample_noise().unwrap();
        let (w, jc) = noise_features(&noise, setup.levy.marks(), setup.levy.intensities());
        let mut terminal = Array2::zeros((400, 3));
        for s in 0..400 {
            for (i, &x) in setup.grid.nodes.iter().enumerate() {
                let shape = (std::f64::consts::PI * x).sin();
                terminal[[s, i]] =
                    shape * (1.0 + 0.5 * w[[10, s]].tanh() + 0.2 * jc[[10, s]]);
            }
        }
        let generator = BackwardGenerator::new(
            |a: &BackwardArgs| {
                0.3 * a.y + 0.2 * a.y_mean + 0.2 * a.z + 0.1 * a.z_mean
                    + 0.1 * a.jumps.iter().sum::<f64>()
                    + 0.1 * a.jumps_mean.iter().sum::<f64>()
            },
            "lipschitz",
        );
        let report = picard_backward(
            &setup,
            &noise,
            &terminal,
            &generator,
            5,
            1.0,
            &RegressionSpec::default(),
        )
        .unwrap();
        assert_eq!(report.distances.len(), 5);
        for (j, r) in report.ratios.iter().enumerate().skip(1) {
            assert!(
                *r <= 0.5,
                "ratio {j} = {r}, distances {:?}",
                report.distances
            );
        }
    }
}
