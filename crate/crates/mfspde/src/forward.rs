//! Semi-implicit forward solver for the controlled mean-field dynamics.
//!
//! One step of the scheme, per scenario `s`:
//!
//! ```text
//! (I - dt L) Y_{k+1} = Y_k + dt b(t_k, x, Y_k, ybar_k, u_k, ubar_k)
//!                      + sigma(..) dW_k
//!                      + sum_e theta(.., e) (dN_e - nu_e dt)
//!                      + dt (boundary couplings) eta(t_{k+1})
//! ```
//!
//! The operator acts implicitly (unconditionally stable for dissipative L);
//! coefficients, noise increments and the mean-field trace
//! `ybar_k = F(Y_k(x, .))` enter explicitly at the old time level, so the
//! scheme is first order in `dt`. Models with state-proportional noise use
//! the multiplicative form
//!
//! ```text
//! rhs = Y_k * max(1 + sigma_ratio dW + sum theta_ratio (dN - nu dt), floor)
//!       + dt b,
//! ```
//!
//! followed by a post-solve floor, which keeps the state strictly positive;
//! every clamp is counted. When no clamp fires the multiplicative form is
//! algebraically identical to the general scheme with `sigma = y *
//! sigma_ratio`, `theta = y * theta_ratio`.
//!
//! The same stepping kernel drives three higher-level routines:
//! `picard_forward` (iteration that freezes the mean-field trace at the
//! previous iterate and reports contraction distances), `derivative_process`
//! (exact linearization of the scheme along a control direction), and
//! `simulate_particle_system` (the ensemble itself is the interacting
//! particle system, one scenario per box).

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

use crate::coeffs::CoeffArgs;
use crate::error::{Result, SolverError};
use crate::meanfield::MeanFieldOperator;
use crate::noise::NoisePath;
use crate::setup::SimSetup;

/// Control values on the space-time grid: one value per step and interior
/// node, either shared by all scenarios or scenario-dependent (e.g. a
/// feedback law evaluated along each path).
#[derive(Debug, Clone)]
pub enum ControlValues {
    /// `[n_steps, n_nodes]`.
    Deterministic(Array2<f64>),
    /// `[n_steps, n_scenarios, n_nodes]`.
    PerScenario(Array3<f64>),
}

impl ControlValues {
    pub fn n_steps(&self) -> usize {
        match self {
            ControlValues::Deterministic(a) => a.dim().0,
            ControlValues::PerScenario(a) => a.dim().0,
        }
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            ControlValues::Deterministic(a) => a.dim().1,
            ControlValues::PerScenario(a) => a.dim().2,
        }
    }

    pub fn scenario_dim(&self) -> Option<usize> {
        match self {
            ControlValues::Deterministic(_) => None,
            ControlValues::PerScenario(a) => Some(a.dim().1),
        }
    }

    pub fn value(&self, k: usize, s: usize, i: usize) -> f64 {
        match self {
            ControlValues::Deterministic(a) => a[[k, i]],
            ControlValues::PerScenario(a) => a[[k, s, i]],
        }
    }
}

/// Admissible control: grid values clamped into a bound interval.
#[derive(Debug, Clone)]
pub struct ControlField {
    values: ControlValues,
    bounds: (f64, f64),
}

impl ControlField {
    fn check_bounds(bounds: (f64, f64)) -> Result<()> {
        if !(bounds.0.is_finite() && bounds.1.is_finite() && bounds.0 <= bounds.1) {
            return Err(SolverError::InvalidParameters(format!(
                "control bounds must be finite with lower <= upper, got [{}, {}]",
                bounds.0, bounds.1
            )));
        }
        Ok(())
    }

    fn clamped(mut values: ControlValues, bounds: (f64, f64)) -> Result<Self> {
        Self::check_bounds(bounds)?;
        let clamp = |v: &mut f64| {
            if !v.is_finite() {
                *v = bounds.0;
            } else {
                *v = v.clamp(bounds.0, bounds.1);
            }
        };
        match &mut values {
            ControlValues::Deterministic(a) => a.iter_mut().for_each(clamp),
            ControlValues::PerScenario(a) => a.iter_mut().for_each(clamp),
        }
        Ok(Self { values, bounds })
    }

    /// Constant deterministic control (value clamped into the bounds).
    pub fn constant(value: f64, n_steps: usize, n_nodes: usize, bounds: (f64, f64)) -> Result<Self> {
        Self::clamped(
            ControlValues::Deterministic(Array2::from_elem((n_steps, n_nodes), value)),
            bounds,
        )
    }

    pub fn deterministic(values: Array2<f64>, bounds: (f64, f64)) -> Result<Self> {
        Self::clamped(ControlValues::Deterministic(values), bounds)
    }

    pub fn per_scenario(values: Array3<f64>, bounds: (f64, f64)) -> Result<Self> {
        Self::clamped(ControlValues::PerScenario(values), bounds)
    }

    pub fn values(&self) -> &ControlValues {
        &self.values
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn value(&self, k: usize, s: usize, i: usize) -> f64 {
        self.values.value(k, s, i)
    }

    pub fn n_steps(&self) -> usize {
        self.values.n_steps()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.n_nodes()
    }

    pub fn clamp_value(&self, v: f64) -> f64 {
        if v.is_finite() {
            v.clamp(self.bounds.0, self.bounds.1)
        } else {
            self.bounds.0
        }
    }

    /// New control with every entry remapped (and re-clamped); the closure
    /// receives `(step, scenario, node, value)`, with scenario 0 for
    /// deterministic controls.
    pub fn with_values_mapped(&self, f: impl Fn(usize, usize, usize, f64) -> f64) -> Self {
        let values = match &self.values {
            ControlValues::Deterministic(a) => {
                let mut out = a.clone();
                for ((k, i), v) in out.indexed_iter_mut() {
                    *v = f(k, 0, i, *v);
                }
                ControlValues::Deterministic(out)
            }
            ControlValues::PerScenario(a) => {
                let mut out = a.clone();
                for ((k, s, i), v) in out.indexed_iter_mut() {
                    *v = f(k, s, i, *v);
                }
                ControlValues::PerScenario(out)
            }
        };
        Self::clamped(values, self.bounds).expect("bounds already validated")
    }

    /// Damped mix `(1 - w) self + w other`; shapes and kinds must agree.
    pub fn blend(&self, other: &Self, w: f64) -> Result<Self> {
        let values = match (&self.values, &other.values) {
            (ControlValues::Deterministic(a), ControlValues::Deterministic(b)) => {
                if a.dim() != b.dim() {
                    return Err(SolverError::DimensionMismatch {
                        what: "control blend",
                        expected: a.len(),
                        got: b.len(),
                    });
                }
                ControlValues::Deterministic(a * (1.0 - w) + &(b * w))
            }
            (ControlValues::PerScenario(a), ControlValues::PerScenario(b)) => {
                if a.dim() != b.dim() {
                    return Err(SolverError::DimensionMismatch {
                        what: "control blend",
                        expected: a.len(),
                        got: b.len(),
                    });
                }
                ControlValues::PerScenario(a * (1.0 - w) + &(b * w))
            }
            _ => {
                return Err(SolverError::InvalidParameters(
                    "cannot blend deterministic with per-scenario control".into(),
                ))
            }
        };
        Self::clamped(values, self.bounds)
    }

    /// Median absolute difference over all grid entries.
    pub fn median_abs_diff(&self, other: &Self) -> Result<f64> {
        let mut diffs: Vec<f64> = match (&self.values, &other.values) {
            (ControlValues::Deterministic(a), ControlValues::Deterministic(b))
                if a.dim() == b.dim() =>
            {
                a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).collect()
            }
            (ControlValues::PerScenario(a), ControlValues::PerScenario(b))
                if a.dim() == b.dim() =>
            {
                a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).collect()
            }
            _ => {
                return Err(SolverError::InvalidParameters(
                    "control shapes differ; cannot compare".into(),
                ))
            }
        };
        diffs.sort_by(|a, b| a.total_cmp(b));
        Ok(if diffs.is_empty() {
            0.0
        } else {
            diffs[diffs.len() / 2]
        })
    }
}

/// Simulated ensemble of field paths with the recorded mean-field trace.
#[derive(Debug, Clone)]
pub struct ForwardPath {
    /// `[n_steps + 1, n_scenarios, n_nodes]`.
    pub fields: Array3<f64>,
    /// Mean-field trace `F(Y_k(x_i, .))`, `[n_steps + 1, n_nodes]`.
    pub mf_trace: Array2<f64>,
    /// Positivity clamps fired by the multiplicative scheme.
    pub floor_hits: usize,
    /// State samples stepped (denominator of the floor-hit fraction).
    pub samples: usize,
}

impl ForwardPath {
    pub fn n_steps(&self) -> usize {
        self.fields.dim().0 - 1
    }

    pub fn n_scenarios(&self) -> usize {
        self.fields.dim().1
    }

    pub fn n_nodes(&self) -> usize {
        self.fields.dim().2
    }

    /// Plain ensemble average per time level and node.
    pub fn ensemble_mean(&self) -> Array2<f64> {
        let (nt, m, n) = self.fields.dim();
        let mut out = Array2::zeros((nt, n));
        for k in 0..nt {
            for i in 0..n {
                let mut acc = 0.0;
                for s in 0..m {
                    acc += self.fields[[k, s, i]];
                }
                out[[k, i]] = acc / m as f64;
            }
        }
        out
    }

    /// Fraction of stepped state samples that hit the positivity floor.
    pub fn floor_fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.floor_hits as f64 / self.samples as f64
        }
    }
}

/// Mean over scenarios of the supremum over time of the squared H-norm gap.
/// This is the contraction metric of the Picard iteration.
pub fn ensemble_sup_distance(a: &Array3<f64>, b: &Array3<f64>, h: f64) -> f64 {
    assert_eq!(a.dim(), b.dim(), "path shapes differ");
    let (nt, m, n) = a.dim();
    let mut acc = 0.0;
    for s in 0..m {
        let mut sup = 0.0_f64;
        for k in 0..nt {
            let mut norm = 0.0;
            for i in 0..n {
                let d = a[[k, s, i]] - b[[k, s, i]];
                norm += d * d;
            }
            sup = sup.max(h * norm);
        }
        acc += sup;
    }
    acc / m as f64
}

/// Mean-field trace of one time level: `F` applied to the scenario ensemble
/// at each node.
pub(crate) fn mf_trace_row(f_op: &MeanFieldOperator, state: &Array2<f64>) -> Result<Vec<f64>> {
    let (m, n) = state.dim();
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; m];
    for i in 0..n {
        for s in 0..m {
            col[s] = state[[s, i]];
        }
        row[i] = f_op.apply(&col)?;
    }
    Ok(row)
}

/// Control mean-field trace `G(u_k(x_i, .))` for one step. Deterministic
/// controls give a one-sample ensemble: all our operators act pointwise
/// before averaging, so this matches the limit of identical samples.
pub(crate) fn ubar_row(
    control: &ControlField,
    g_op: &MeanFieldOperator,
    k: usize,
    m: usize,
) -> Result<Vec<f64>> {
    let n = control.n_nodes();
    let mut row = vec![0.0; n];
    match control.values() {
        ControlValues::Deterministic(a) => {
            for i in 0..n {
                row[i] = g_op.apply(&[a[[k, i]]])?;
            }
        }
        ControlValues::PerScenario(a) => {
            let mut col = vec![0.0; m];
            for i in 0..n {
                for s in 0..m {
                    col[s] = a[[k, s, i]];
                }
                row[i] = g_op.apply(&col)?;
            }
        }
    }
    Ok(row)
}

pub(crate) fn validate_run(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
) -> Result<()> {
    setup.validate()?;
    if noise.n_scenarios() != setup.n_scenarios {
        return Err(SolverError::DimensionMismatch {
            what: "noise scenarios vs setup",
            expected: setup.n_scenarios,
            got: noise.n_scenarios(),
        });
    }
    if noise.n_steps() != setup.times.n_steps {
        return Err(SolverError::DimensionMismatch {
            what: "noise steps vs time grid",
            expected: setup.times.n_steps,
            got: noise.n_steps(),
        });
    }
    if noise.n_marks() != setup.levy.n_marks() {
        return Err(SolverError::DimensionMismatch {
            what: "noise marks vs jump measure",
            expected: setup.levy.n_marks(),
            got: noise.n_marks(),
        });
    }
    if (noise.dt - setup.times.dt).abs() > 1e-12 * setup.times.dt {
        return Err(SolverError::InvalidParameters(format!(
            "noise step size {} does not match time grid {}",
            noise.dt, setup.times.dt
        )));
    }
    if control.n_steps() != setup.times.n_steps {
        return Err(SolverError::DimensionMismatch {
            what: "control steps vs time grid",
            expected: setup.times.n_steps,
            got: control.n_steps(),
        });
    }
    if control.n_nodes() != setup.n_nodes() {
        return Err(SolverError::DimensionMismatch {
            what: "control nodes vs grid",
            expected: setup.n_nodes(),
            got: control.n_nodes(),
        });
    }
    if let Some(ms) = control.values().scenario_dim() {
        if ms != setup.n_scenarios {
            return Err(SolverError::DimensionMismatch {
                what: "control scenarios vs setup",
                expected: setup.n_scenarios,
                got: ms,
            });
        }
    }
    Ok(())
}

/// One step of the scheme for the whole ensemble, using the supplied
/// mean-field rows (field trace `ybar` and control trace `ubar`).
fn step_ensemble(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
    k: usize,
    state: &Array2<f64>,
    ybar: &[f64],
    ubar: &[f64],
) -> Result<(Array2<f64>, usize)> {
    let m = setup.n_scenarios;
    let n = setup.n_nodes();
    let dt = setup.times.dt;
    let t = setup.times.time(k);
    let (bl, br) = setup.boundary.values(t + dt);
    let (cl, cr) = setup.op.boundary_coupling();
    let marks = setup.levy.marks();
    let intensities = setup.levy.intensities();
    let floor = setup.positivity_floor;

    let rows: Vec<(Vec<f64>, usize)> = (0..m)
        .into_par_iter()
        .map(|s| -> Result<(Vec<f64>, usize)> {
            let mut hits = 0usize;
            let dw = noise.dw[[s, k]];
            let mut rhs = vec![0.0; n];
            for i in 0..n {
                let x = setup.grid.nodes[i];
                let y = state[[s, i]];
                let args = CoeffArgs::new(t, x, y, ybar[i], control.value(k, s, i), ubar[i]);
                let base = if let Some(mult) = &setup.coeffs.multiplicative {
                    let mut factor = 1.0 + (mult.sigma_ratio)(t, x) * dw;
                    for (j, &e) in marks.iter().enumerate() {
                        let comp = noise.counts[[s, k, j]] as f64 - intensities[j] * dt;
                        factor += (mult.theta_ratio)(t, x, e) * comp;
                    }
                    if factor < floor {
                        hits += 1;
                        factor = floor;
                    }
                    y * factor
                } else {
                    let mut v = y + (setup.coeffs.diffusion)(&args) * dw;
                    for (j, &e) in marks.iter().enumerate() {
                        let comp = noise.counts[[s, k, j]] as f64 - intensities[j] * dt;
                        v += (setup.coeffs.jump)(&args, e) * comp;
                    }
                    v
                };
                rhs[i] = base + dt * (setup.coeffs.drift)(&args);
            }
            rhs[0] += dt * cl * bl;
            rhs[n - 1] += dt * cr * br;
            let mut next = setup.op.solve_shifted(dt, &rhs)?;
            if setup.coeffs.multiplicative.is_some() {
                for v in next.iter_mut() {
                    if *v < floor {
                        *v = floor;
                        hits += 1;
                    }
                }
            }
            for (i, v) in next.iter().enumerate() {
                if !v.is_finite() {
                    return Err(SolverError::NonFinite {
                        what: "forward state",
                        t: t + dt,
                        x: setup.grid.nodes[i],
                    });
                }
            }
            Ok((next, hits))
        })
        .collect::<Result<_>>()?;

    let mut out = Array2::zeros((m, n));
    let mut hits = 0;
    for (s, (row, h)) in rows.into_iter().enumerate() {
        hits += h;
        for (i, v) in row.into_iter().enumerate() {
            out[[s, i]] = v;
        }
    }
    Ok((out, hits))
}

/// Advance one time level; the mean-field rows are computed from the state
/// itself (the self-consistent explicit-in-mean-field scheme).
pub fn step_forward(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
    k: usize,
    state: &Array2<f64>,
) -> Result<(Array2<f64>, usize)> {
    let ybar = mf_trace_row(&setup.f_op, state)?;
    let ubar = ubar_row(control, &setup.g_op, k, setup.n_scenarios)?;
    step_ensemble(setup, control, noise, k, state, &ybar, &ubar)
}

fn solve_with_trace_source(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
    frozen_trace: Option<&Array2<f64>>,
) -> Result<ForwardPath> {
    let m = setup.n_scenarios;
    let n = setup.n_nodes();
    let nt = setup.times.n_steps;
    let mut fields = Array3::zeros((nt + 1, m, n));
    for s in 0..m {
        for i in 0..n {
            fields[[0, s, i]] = setup.initial[i];
        }
    }
    let mut mf_trace = Array2::zeros((nt + 1, n));
    let mut floor_hits = 0;
    for k in 0..nt {
        let state = fields.index_axis(Axis(0), k).to_owned();
        let self_trace = mf_trace_row(&setup.f_op, &state)?;
        for i in 0..n {
            mf_trace[[k, i]] = self_trace[i];
        }
        let ybar: Vec<f64> = match frozen_trace {
            Some(tr) => (0..n).map(|i| tr[[k, i]]).collect(),
            None => self_trace,
        };
        let ubar = ubar_row(control, &setup.g_op, k, m)?;
        let (next, hits) = step_ensemble(setup, control, noise, k, &state, &ybar, &ubar)?;
        floor_hits += hits;
        for s in 0..m {
            for i in 0..n {
                fields[[k + 1, s, i]] = next[[s, i]];
            }
        }
    }
    let last = fields.index_axis(Axis(0), nt).to_owned();
    let trace = mf_trace_row(&setup.f_op, &last)?;
    for i in 0..n {
        mf_trace[[nt, i]] = trace[i];
    }
    Ok(ForwardPath {
        fields,
        mf_trace,
        floor_hits,
        samples: nt * m * n,
    })
}

/// Simulate the full ensemble under the given control and noise.
pub fn solve_forward(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
) -> Result<ForwardPath> {
    validate_run(setup, control, noise)?;
    solve_with_trace_source(setup, control, noise, None)
}

/// Convergence record of the frozen-trace iteration.
#[derive(Debug, Clone)]
pub struct PicardForwardReport {
    /// `distances[j]` is the gap between iterates `j + 2` and `j + 1` in the
    /// mean-sup-H metric (the first solved iterate is iterate 1).
    pub distances: Vec<f64>,
    /// Gap between the last iterate and the direct self-consistent solve.
    pub final_gap: f64,
    /// The last iterate, packaged with its own mean-field trace.
    pub path: ForwardPath,
}

/// Iterate the scheme freezing the mean-field trace at the previous iterate:
/// iterate 0 is the constant-in-time initial field, and iterate `j + 1` solves
/// the dynamics with `ybar` read from iterate `j`. The reported distances
/// contract geometrically for Lipschitz coefficients on a fixed grid.
pub fn picard_forward(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
    n_iters: usize,
) -> Result<PicardForwardReport> {
    if n_iters < 2 {
        return Err(SolverError::InvalidParameters(
            "the iteration needs at least two sweeps to report a distance".into(),
        ));
    }
    validate_run(setup, control, noise)?;
    let n = setup.n_nodes();
    let nt = setup.times.n_steps;

    // Iterate 0: the initial field held constant in time.
    let m = setup.n_scenarios;
    let mut state0 = Array2::zeros((m, n));
    for s in 0..m {
        for i in 0..n {
            state0[[s, i]] = setup.initial[i];
        }
    }
    let row0 = mf_trace_row(&setup.f_op, &state0)?;
    let mut frozen = Array2::zeros((nt + 1, n));
    for k in 0..=nt {
        for i in 0..n {
            frozen[[k, i]] = row0[i];
        }
    }

    let mut distances = Vec::with_capacity(n_iters - 1);
    let mut prev: Option<ForwardPath> = None;
    let mut last: Option<ForwardPath> = None;
    for _ in 0..n_iters {
        let path = solve_with_trace_source(setup, control, noise, Some(&frozen))?;
        if let Some(p) = &prev {
            distances.push(ensemble_sup_distance(&path.fields, &p.fields, setup.grid.h));
        }
        frozen = path.mf_trace.clone();
        prev = Some(path.clone());
        last = Some(path);
    }
    let last = last.expect("at least two iterations");
    let direct = solve_with_trace_source(setup, control, noise, None)?;
    let final_gap = ensemble_sup_distance(&last.fields, &direct.fields, setup.grid.h);
    Ok(PicardForwardReport {
        distances,
        final_gap,
        path: last,
    })
}

/// Exact linearization of the scheme along a control direction `beta`:
/// the sensitivity `Z = d/dz Y(u + z beta) |_{z=0}` satisfies, per scenario,
///
/// ```text
/// (I - dt L) Z_{k+1} = Z_k + dt Db + Dsigma dW + sum_e Dtheta (dN - nu dt),
/// ```
///
/// where each `D` term is the chain rule through `(y, ybar, u, ubar)`:
/// the mean-field contributions enter through the pairing of the operator
/// gradients with `Z` (for F) and `beta` (for G). Zero boundary, no clamp.
pub fn derivative_process(
    setup: &SimSetup,
    control: &ControlField,
    noise: &NoisePath,
    path: &ForwardPath,
    direction: &ControlValues,
) -> Result<Array3<f64>> {
    validate_run(setup, control, noise)?;
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
    if direction.n_steps() != nt || direction.n_nodes() != n {
        return Err(SolverError::DimensionMismatch {
            what: "direction vs grid",
            expected: nt * n,
            got: direction.n_steps() * direction.n_nodes(),
        });
    }
    if let Some(ms) = direction.scenario_dim() {
        if ms != m {
            return Err(SolverError::DimensionMismatch {
                what: "direction scenarios vs setup",
                expected: m,
                got: ms,
            });
        }
    }

    let dt = setup.times.dt;
    let marks = setup.levy.marks();
    let intensities = setup.levy.intensities();
    let c = &setup.coeffs;
    let mut deriv = Array3::zeros((nt + 1, m, n));

    let mut col = vec![0.0; m];
    for k in 0..nt {
        let ubar = ubar_row(control, &setup.g_op, k, m)?;
        let t = setup.times.time(k);

        // Mean-field pairings per node: <grad F, Z> over the field ensemble
        // and <grad G, beta> over the control ensemble.
        let mut pair_f = vec![0.0; n];
        let mut pair_g = vec![0.0; n];
        for i in 0..n {
            for s in 0..m {
                col[s] = path.fields[[k, s, i]];
            }
            let wf = setup.f_op.gradient(&col)?;
            let zs: Vec<f64> = (0..m).map(|s| deriv[[k, s, i]]).collect();
            pair_f[i] = MeanFieldOperator::pairing(&wf, &zs)?;

            let beta_col: Vec<f64> = (0..m).map(|s| direction.value(k, s, i)).collect();
            let wg = match control.values() {
                ControlValues::Deterministic(a) => {
                    let w = setup.g_op.gradient(&[a[[k, i]]])?[0];
                    vec![w; m]
                }
                ControlValues::PerScenario(a) => {
                    for s in 0..m {
                        col[s] = a[[k, s, i]];
                    }
                    setup.g_op.gradient(&col)?
                }
            };
            pair_g[i] = MeanFieldOperator::pairing(&wg, &beta_col)?;
        }

        let state = path.fields.index_axis(Axis(0), k);
        let z_now = deriv.index_axis(Axis(0), k).to_owned();
        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|s| -> Result<Vec<f64>> {
                let dw = noise.dw[[s, k]];
                let mut rhs = vec![0.0; n];
                for i in 0..n {
                    let x = setup.grid.nodes[i];
                    let args = CoeffArgs::new(
                        t,
                        x,
                        state[[s, i]],
                        path.mf_trace[[k, i]],
                        control.value(k, s, i),
                        ubar[i],
                    );
                    let z = z_now[[s, i]];
                    let beta = direction.value(k, s, i);
                    let db = (c.drift_dy)(&args) * z
                        + (c.drift_dybar)(&args) * pair_f[i]
                        + (c.drift_du)(&args) * beta
                        + (c.drift_dubar)(&args) * pair_g[i];
                    let ds = (c.diffusion_dy)(&args) * z
                        + (c.diffusion_dybar)(&args) * pair_f[i]
                        + (c.diffusion_du)(&args) * beta
                        + (c.diffusion_dubar)(&args) * pair_g[i];
                    let mut v = z + dt * db + ds * dw;
                    for (j, &e) in marks.iter().enumerate() {
                        let comp = noise.counts[[s, k, j]] as f64 - intensities[j] * dt;
                        let dth = (c.jump_dy)(&args, e) * z
                            + (c.jump_dybar)(&args, e) * pair_f[i]
                            + (c.jump_du)(&args, e) * beta
                            + (c.jump_dubar)(&args, e) * pair_g[i];
                        v += dth * comp;
                    }
                    rhs[i] = v;
                }
                let next = setup.op.solve_shifted(dt, &rhs)?;
                for (i, v) in next.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(SolverError::NonFinite {
                            what: "derivative process",
                            t: t + dt,
                            x: setup.grid.nodes[i],
                        });
                    }
                }
                Ok(next)
            })
            .collect::<Result<_>>()?;
        for (s, row) in rows.into_iter().enumerate() {
            for (i, v) in row.into_iter().enumerate() {
                deriv[[k + 1, s, i]] = v;
            }
        }
    }
    Ok(deriv)
}

/// Run the interacting-particle approximation: `n_boxes` scenarios coupled
/// through the empirical mean-field operator — which is exactly the ensemble
/// the forward solver simulates, one box per scenario, with independent
/// noise streams per box.
pub fn simulate_particle_system(
    setup: &SimSetup,
    control: &ControlField,
    n_boxes: usize,
    master_seed: u64,
) -> Result<ForwardPath> {
    if n_boxes == 0 {
        return Err(SolverError::EmptyEnsemble("particle boxes"));
    }
    let mut boxed = setup.clone();
    boxed.n_scenarios = n_boxes;
    boxed.master_seed = master_seed;
    let noise = boxed.sample_noise()?;
    solve_forward(&boxed, control, &noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{affine_model, heat_model, AffineModelParams, CoefficientSet, MultiplicativeNoise};
    use crate::grid::{DiscreteOperator, SpatialGrid};
    use crate::noise::{sample_noise, LevyMeasure};
    use crate::setup::{BoundaryData, SimSetup, TimeGrid};
    use std::sync::Arc;

    fn build_setup(
        n_nodes: usize,
        kappa: f64,
        t_end: f64,
        n_steps: usize,
        m: usize,
        coeffs: CoefficientSet,
        levy: LevyMeasure,
        initial: Vec<f64>,
        boundary: BoundaryData,
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
            crate::meanfield::MeanFieldOperator::expectation(),
            crate::meanfield::MeanFieldOperator::expectation(),
            initial,
            boundary,
        )
        .unwrap()
    }

    fn zero_control(setup: &SimSetup) -> ControlField {
        ControlField::constant(
            0.0,
            setup.times.n_steps,
            setup.n_nodes(),
            (-1e6, 1e6),
        )
        .unwrap()
    }

    #[test]
    fn single_node_single_step_hand_value() {
        // One interior node, kappa = 1/2, h = 1/2: the operator entry is -4.
        // With Y0 = 0, b = 1, dt = 0.1: (1 + 0.4) Y1 = 0.1, so Y1 = 1/14.
        let coeffs = affine_model(AffineModelParams {
            b0: 1.0,
            ..Default::default()
        });
        let setup = build_setup(
            1,
            0.5,
            0.1,
            1,
            1,
            coeffs,
            LevyMeasure::empty(),
            vec![0.0],
            BoundaryData::Zero,
            7,
        );
        let noise = setup.sample_noise().unwrap();
        let control = zero_control(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        assert!((path.fields[[1, 0, 0]] - 1.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn noise_free_step_matches_implicit_heat_solve() {
        let setup = build_setup(
            9,
            0.7,
            0.5,
            10,
            1,
            heat_model(),
            LevyMeasure::empty(),
            (1..=9).map(|i| (i as f64 * 0.1).sin()).collect(),
            BoundaryData::Zero,
            3,
        );
        let noise = setup.sample_noise().unwrap();
        let control = zero_control(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        let mut expect = setup.initial.clone();
        for _ in 0..10 {
            expect = setup.op.solve_shifted(setup.times.dt, &expect).unwrap();
        }
        for i in 0..9 {
            assert!((path.fields[[10, 0, i]] - expect[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn heat_mode_decays_at_the_analytic_rate() {
        // Y0 = sin(pi x) decays like exp(-kappa pi^2 t) up to O(h^2) + O(dt).
        let n = 19;
        let grid = SpatialGrid::new(0.0, 1.0, n).unwrap();
        let initial: Vec<f64> = grid
            .nodes
            .iter()
            .map(|&x| (std::f64::consts::PI * x).sin())
            .collect();
        let setup = build_setup(
            n,
            0.5,
            0.5,
            1000,
            1,
            heat_model(),
            LevyMeasure::empty(),
            initial,
            BoundaryData::Zero,
            5,
        );
        let noise = setup.sample_noise().unwrap();
        let control = zero_control(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        let decay = (-0.5 * std::f64::consts::PI.powi(2) * 0.5).exp();
        let mut worst = 0.0_f64;
        for (i, &x) in setup.grid.nodes.iter().enumerate() {
            let exact = decay * (std::f64::consts::PI * x).sin();
            let rel = (path.fields[[1000, 0, i]] - exact).abs() / decay;
            worst = worst.max(rel);
        }
        assert!(worst < 0.02, "max relative error {worst}");
    }

    #[test]
    fn scheme_is_first_order_in_time() {
        // Nonlinear drift, no noise; halving dt should halve the error.
        let coeffs = CoefficientSet::builder("nonlinear-drift")
            .drift(
                Arc::new(|a: &crate::coeffs::CoeffArgs| (1.0 + 0.5 * a.y) * (1.0 + (2.0 * a.t).cos())),
                Arc::new(|a: &crate::coeffs::CoeffArgs| 0.5 * (1.0 + (2.0 * a.t).cos())),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
            )
            .build();
        let solve_at = |steps: usize| -> Vec<f64> {
            let setup = build_setup(
                9,
                0.3,
                0.5,
                steps,
                1,
                coeffs.clone(),
                LevyMeasure::empty(),
                vec![1.0; 9],
                BoundaryData::Zero,
                11,
            );
            let noise = setup.sample_noise().unwrap();
            let control = zero_control(&setup);
            let path = solve_forward(&setup, &control, &noise).unwrap();
            (0..9).map(|i| path.fields[[steps, 0, i]]).collect()
        };
        let coarse = solve_at(40);
        let medium = solve_at(80);
        let reference = solve_at(1280);
        let err = |v: &[f64]| -> f64 {
            v.iter()
                .zip(&reference)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let ratio = err(&coarse) / err(&medium);
        assert!(
            (1.6..=2.6).contains(&ratio),
            "error ratio {ratio} not consistent with first order"
        );
    }

    #[test]
    fn constant_boundary_relaxes_to_boundary_level() {
        let setup = build_setup(
            9,
            0.5,
            20.0,
            400,
            1,
            heat_model(),
            LevyMeasure::empty(),
            vec![0.0; 9],
            BoundaryData::Constant {
                left: 2.0,
                right: 2.0,
            },
            13,
        );
        let noise = setup.sample_noise().unwrap();
        let control = zero_control(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        for i in 0..9 {
            assert!(
                (path.fields[[400, 0, i]] - 2.0).abs() < 1e-8,
                "node {i} value {}",
                path.fields[[400, 0, i]]
            );
        }
    }

    #[test]
    fn martingale_terms_leave_the_ensemble_mean_unbiased() {
        // Multiplicative noise has mean one per step and is independent of
        // the running state, so the ensemble mean follows the noise-free
        // dynamics up to Monte Carlo error.
        let m = 5000;
        let coeffs = CoefficientSet::builder("mean-test")
            .drift(
                Arc::new(|a: &crate::coeffs::CoeffArgs| 0.2 * a.y_bar),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.2),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
            )
            .multiplicative(MultiplicativeNoise {
                sigma_ratio: Arc::new(|_, _| 0.3),
                theta_ratio: Arc::new(|_, _, e| e),
            })
            .build();
        let initial: Vec<f64> = (1..=9)
            .map(|i| 1.0 + (std::f64::consts::PI * i as f64 / 10.0).sin())
            .collect();
        let setup = build_setup(
            9,
            0.5,
            0.2,
            20,
            m,
            coeffs.clone(),
            LevyMeasure::desk_default(),
            initial.clone(),
            BoundaryData::Zero,
            20260819,
        );
        let noise = setup.sample_noise().unwrap();
        let control = zero_control(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();

        // Noise-free reference: single scenario, zero ratios.
        let det_coeffs = CoefficientSet::builder("mean-test-det")
            .drift(
                Arc::new(|a: &crate::coeffs::CoeffArgs| 0.2 * a.y_bar),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.2),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
            )
            .build();
        let det = build_setup(
            9,
            0.5,
            0.2,
            20,
            1,
            det_coeffs,
            LevyMeasure::empty(),
            initial,
            BoundaryData::Zero,
            1,
        );
        let det_noise = det.sample_noise().unwrap();
        let det_path = solve_forward(&det, &zero_control(&det), &det_noise).unwrap();

        let mean = path.ensemble_mean();
        for i in 0..9 {
            let mu = mean[[20, i]];
            let reference = det_path.fields[[20, 0, i]];
            let var = (0..m)
                .map(|s| {
                    let d = path.fields[[20, s, i]] - mu;
                    d * d
                })
                .sum::<f64>()
                / (m - 1) as f64;
            let se = (var / m as f64).sqrt();
            assert!(
                (mu - reference).abs() <= 4.0 * se,
                "node {i}: mean {mu} vs reference {reference}, se {se}"
            );
        }
        assert_eq!(path.floor_hits, 0, "clamp unexpectedly fired");
    }

    #[test]
    fn multiplicative_scheme_keeps_state_above_floor() {
        let coeffs = CoefficientSet::builder("violent")
            .multiplicative(MultiplicativeNoise {
                sigma_ratio: Arc::new(|_, _| 3.0),
                theta_ratio: Arc::new(|_, _, _| 0.0),
            })
            .build();
        let setup = build_setup(
            5,
            0.2,
            0.5,
            10,
            200,
            coeffs,
            LevyMeasure::empty(),
            vec![1.0; 5],
            BoundaryData::Zero,
            99,
        );
        let noise = setup.sample_noise().unwrap();
        let control = zero_control(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        assert!(path.floor_hits > 0, "expected clamps with sigma ratio 3");
        for v in path.fields.iter() {
            assert!(*v >= setup.positivity_floor * (1.0 - 1e-12));
        }
        assert!(path.floor_fraction() > 0.0 && path.floor_fraction() < 1.0);
    }

    #[test]
    fn mean_field_trace_matches_manual_average() {
        let coeffs = affine_model(AffineModelParams {
            s0: 1.0,
            bybar: 0.5,
            ..Default::default()
        });
        let setup = build_setup(
            3,
            0.5,
            0.2,
            4,
            50,
            coeffs,
            LevyMeasure::empty(),
            vec![1.0, 2.0, 1.0],
            BoundaryData::Zero,
            31,
        );
        let noise = setup.sample_noise().unwrap();
        let control = zero_control(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        for k in [0usize, 2, 4] {
            for i in 0..3 {
                let mean = (0..50).map(|s| path.fields[[k, s, i]]).sum::<f64>() / 50.0;
                assert!((path.mf_trace[[k, i]] - mean).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn iteration_is_exact_when_no_mean_field_enters() {
        // Without ybar in the coefficients the frozen trace is never read,
        // so consecutive iterates coincide bitwise.
        let coeffs = affine_model(AffineModelParams {
            by: 0.3,
            s0: 0.5,
            ..Default::default()
        });
        let setup = build_setup(
            5,
            0.5,
            0.5,
            10,
            40,
            coeffs,
            LevyMeasure::desk_default(),
            vec![1.0; 5],
            BoundaryData::Zero,
            77,
        );
        let noise = setup.sample_noise().unwrap();
        let control = zero_control(&setup);
        let report = picard_forward(&setup, &control, &noise, 3).unwrap();
        assert_eq!(report.distances.len(), 2);
        assert_eq!(report.distances[0], 0.0);
        assert_eq!(report.final_gap, 0.0);
    }

    #[test]
    fn iteration_contracts_and_lands_on_the_direct_solve() {
        let coeffs = affine_model(AffineModelParams {
            by: -0.5,
            bybar: 0.8,
            s0: 0.1,
            sy: 0.2,
            th0: 0.1,
            ..Default::default()
        });
        let setup = build_setup(
            5,
            0.5,
            1.0,
            50,
            200,
            coeffs,
            LevyMeasure::desk_default(),
            vec![1.0; 5],
            BoundaryData::Zero,
            123,
        );
        let noise = setup.sample_noise().unwrap();
        let control = zero_control(&setup);
        let report = picard_forward(&setup, &control, &noise, 5).unwrap();
        assert_eq!(report.distances.len(), 4);
        for w in report.distances[1..].windows(2) {
            assert!(
                w[1] <= w[0],
                "distances not decreasing: {:?}",
                report.distances
            );
        }
        let last = *report.distances.last().unwrap();
        assert!(
            report.final_gap <= last.max(1e-30),
            "gap {} vs last distance {last}",
            report.final_gap
        );
    }

    #[test]
    fn sensitivity_vanishes_without_control_dependence() {
        let coeffs = affine_model(AffineModelParams {
            by: 0.4,
            bybar: 0.2,
            s0: 0.3,
            ..Default::default()
        });
        let setup = build_setup(
            5,
            0.5,
            0.5,
            10,
            30,
            coeffs,
            LevyMeasure::desk_default(),
            vec![1.0; 5],
            BoundaryData::Zero,
            55,
        );
        let noise = setup.sample_noise().unwrap();
        let control = zero_control(&setup);
        let path = solve_forward(&setup, &control, &noise).unwrap();
        let direction = ControlValues::Deterministic(Array2::from_elem((10, 5), 1.0));
        let z = derivative_process(&setup, &control, &noise, &path, &direction).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sensitivity_matches_central_difference_of_the_solver() {
        // Nonlinear drift in y with control forcing; same noise for all runs.
        let coeffs = CoefficientSet::builder("sin-drift")
            .drift(
                Arc::new(|a: &crate::coeffs::CoeffArgs| 0.3 * a.y.sin() + a.u),
                Arc::new(|a: &crate::coeffs::CoeffArgs| 0.3 * a.y.cos()),
                Arc::new(|_| 0.0),
                Arc::new(|_| 1.0),
                Arc::new(|_| 0.0),
            )
            .diffusion(
                Arc::new(|_| 0.2),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
            )
            .build();
        let setup = build_setup(
            5,
            0.5,
            0.5,
            25,
            200,
            coeffs,
            LevyMeasure::empty(),
            vec![0.5; 5],
            BoundaryData::Zero,
            2026,
        );
        let noise = setup.sample_noise().unwrap();
        let bounds = (-10.0, 10.0);
        let base = ControlField::constant(0.5, 25, 5, bounds).unwrap();
        let beta = Array2::from_shape_fn((25, 5), |(k, i)| {
            ((k as f64) * 0.2).cos() * (1.0 + i as f64 * 0.1)
        });
        let path = solve_forward(&setup, &base, &noise).unwrap();
        let z = derivative_process(
            &setup,
            &base,
            &noise,
            &path,
            &ControlValues::Deterministic(beta.clone()),
        )
        .unwrap();

        let eps = 1e-4;
        let shift = |sign: f64| -> Array3<f64> {
            let shifted = base.with_values_mapped(|k, _, i, v| v + sign * eps * beta[[k, i]]);
            solve_forward(&setup, &shifted, &noise).unwrap().fields
        };
        let plus = shift(1.0);
        let minus = shift(-1.0);

        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..=25 {
            for s in 0..200 {
                for i in 0..5 {
                    let fd = (plus[[k, s, i]] - minus[[k, s, i]]) / (2.0 * eps);
                    let d = fd - z[[k, s, i]];
                    num += d * d;
                    den += fd * fd;
                }
            }
        }
        let rel = (num / den.max(1e-300)).sqrt();
        assert!(rel < 0.01, "relative sensitivity error {rel}");
    }

    #[test]
    fn particle_run_with_one_box_equals_single_scenario_solve() {
        let coeffs = affine_model(AffineModelParams {
            bybar: 0.5,
            s0: 0.2,
            ..Default::default()
        });
        let setup = build_setup(
            4,
            0.5,
            0.3,
            6,
            10,
            coeffs,
            LevyMeasure::desk_default(),
            vec![1.0; 4],
            BoundaryData::Zero,
            404,
        );
        let control = ControlField::constant(0.0, 6, 4, (-1.0, 1.0)).unwrap();
        let particle = simulate_particle_system(&setup, &control, 1, 909).unwrap();
        let mut single = setup.clone();
        single.n_scenarios = 1;
        single.master_seed = 909;
        let noise = single.sample_noise().unwrap();
        let direct = solve_forward(&single, &control, &noise).unwrap();
        assert_eq!(particle.fields, direct.fields);
    }

    #[test]
    fn noise_free_particle_boxes_coincide() {
        let coeffs = affine_model(AffineModelParams {
            bybar: 0.7,
            ..Default::default()
        });
        let setup = build_setup(
            4,
            0.5,
            0.3,
            6,
            3,
            coeffs,
            LevyMeasure::empty(),
            vec![1.0, 2.0, 2.0, 1.0],
            BoundaryData::Zero,
            8,
        );
        let control = ControlField::constant(0.0, 6, 4, (-1.0, 1.0)).unwrap();
        let path = simulate_particle_system(&setup, &control, 5, 17).unwrap();
        for k in 0..=6 {
            for s in 1..5 {
                for i in 0..4 {
                    assert_eq!(path.fields[[k, s, i]], path.fields[[k, 0, i]]);
                }
            }
        }
    }

    #[test]
    fn control_constructors_clamp_into_bounds() {
        let c = ControlField::constant(5.0, 2, 3, (0.0, 1.0)).unwrap();
        assert_eq!(c.value(0, 0, 0), 1.0);
        let d = ControlField::deterministic(
            Array2::from_shape_vec((1, 2), vec![-3.0, 0.5]).unwrap(),
            (0.0, 1.0),
        )
        .unwrap();
        assert_eq!(d.value(0, 0, 0), 0.0);
        assert_eq!(d.value(0, 0, 1), 0.5);
        assert!(ControlField::constant(0.0, 1, 1, (1.0, -1.0)).is_err());
    }

    #[test]
    fn control_blend_and_median_difference() {
        let a = ControlField::constant(1.0, 2, 2, (0.0, 10.0)).unwrap();
        let b = ControlField::constant(3.0, 2, 2, (0.0, 10.0)).unwrap();
        let mixed = a.blend(&b, 0.25).unwrap();
        assert!((mixed.value(0, 0, 0) - 1.5).abs() < 1e-15);
        assert!((a.median_abs_diff(&b).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let setup = build_setup(
            3,
            0.5,
            0.5,
            10,
            4,
            heat_model(),
            LevyMeasure::empty(),
            vec![0.0; 3],
            BoundaryData::Zero,
            1,
        );
        let control = zero_control(&setup);
        // Wrong number of steps in the noise.
        let bad_noise = sample_noise(4, 9, setup.times.dt, &LevyMeasure::empty(), 1).unwrap();
        assert!(solve_forward(&setup, &control, &bad_noise).is_err());
        // Wrong number of scenarios.
        let bad_noise = sample_noise(5, 10, setup.times.dt, &LevyMeasure::empty(), 1).unwrap();
        assert!(solve_forward(&setup, &control, &bad_noise).is_err());
        // Wrong control shape.
        let noise = setup.sample_noise().unwrap();
        let bad_control = ControlField::constant(0.0, 10, 2, (-1.0, 1.0)).unwrap();
        assert!(solve_forward(&setup, &bad_control, &noise).is_err());
    }
}
