//! Assembled problem description: grid, operator, time axis, noise law,
//! coefficients, mean-field operators, initial and boundary data.
//!
//! A [`SimSetup`] is the single argument threaded through the forward and
//! backward solvers. It owns everything that defines a run except the
//! control and the sampled noise, so two solves with the same setup, control
//! and noise are bitwise identical.

use std::fmt;
use std::sync::Arc;

use crate::coeffs::CoefficientSet;
use crate::error::{Result, SolverError};
use crate::grid::{DiscreteOperator, SpatialGrid};
use crate::meanfield::MeanFieldOperator;
use crate::noise::{sample_noise, LevyMeasure, NoisePath};

/// Uniform partition of `[0, t_end]` into `n_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_end: f64,
    pub n_steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(SolverError::InvalidParameters(format!(
                "horizon must be positive and finite, got {t_end}"
            )));
        }
        if n_steps == 0 {
            return Err(SolverError::InvalidParameters(
                "need at least one time step".into(),
            ));
        }
        Ok(Self {
            t_end,
            n_steps,
            dt: t_end / n_steps as f64,
        })
    }

    /// Time of step index `k` (0 ..= n_steps).
    pub fn time(&self, k: usize) -> f64 {
        self.dt * k as f64
    }
}

/// Dirichlet boundary values at the two domain endpoints.
#[derive(Clone)]
pub enum BoundaryData {
    /// Homogeneous boundary.
    Zero,
    /// Fixed values on the left and right endpoint.
    Constant { left: f64, right: f64 },
    /// Time-varying boundary `t -> (left, right)`.
    TimeVarying(Arc<dyn Fn(f64) -> (f64, f64) + Send + Sync>),
}

impl BoundaryData {
    pub fn values(&self, t: f64) -> (f64, f64) {
        match self {
            BoundaryData::Zero => (0.0, 0.0),
            BoundaryData::Constant { left, right } => (*left, *right),
            BoundaryData::TimeVarying(f) => f(t),
        }
    }
}

impl fmt::Debug for BoundaryData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryData::Zero => f.write_str("Zero"),
            BoundaryData::Constant { left, right } => {
                write!(f, "Constant {{ left: {left}, right: {right} }}")
            }
            BoundaryData::TimeVarying(_) => f.write_str("TimeVarying(..)"),
        }
    }
}

/// Positivity floor used by the multiplicative forward scheme.
pub const DEFAULT_POSITIVITY_FLOOR: f64 = 1e-8;

/// Complete description of one simulation problem.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub grid: SpatialGrid,
    pub op: DiscreteOperator,
    pub times: TimeGrid,
    pub levy: LevyMeasure,
    pub n_scenarios: usize,
    pub master_seed: u64,
    pub coeffs: CoefficientSet,
    /// Mean-field operator applied to the field ensemble.
    pub f_op: MeanFieldOperator,
    /// Mean-field operator applied to the control ensemble.
    pub g_op: MeanFieldOperator,
    /// Initial field on the interior nodes.
    pub initial: Vec<f64>,
    pub boundary: BoundaryData,
    /// Floor for the multiplicative scheme's noise factor and post-step state.
    pub positivity_floor: f64,
}

impl SimSetup {
    /// Construct and validate. The operator must match the grid and the
    /// initial data must live on the interior nodes.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: SpatialGrid,
        op: DiscreteOperator,
        times: TimeGrid,
        levy: LevyMeasure,
        n_scenarios: usize,
        master_seed: u64,
        coeffs: CoefficientSet,
        f_op: MeanFieldOperator,
        g_op: MeanFieldOperator,
        initial: Vec<f64>,
        boundary: BoundaryData,
    ) -> Result<Self> {
        let s = Self {
            grid,
            op,
            times,
            levy,
            n_scenarios,
            master_seed,
            coeffs,
            f_op,
            g_op,
            initial,
            boundary,
            positivity_floor: DEFAULT_POSITIVITY_FLOOR,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_interior;
        if self.op.n() != n {
            return Err(SolverError::DimensionMismatch {
                what: "operator size vs grid",
                expected: n,
                got: self.op.n(),
            });
        }
        if self.initial.len() != n {
            return Err(SolverError::DimensionMismatch {
                what: "initial data vs grid",
                expected: n,
                got: self.initial.len(),
            });
        }
        if self.n_scenarios == 0 {
            return Err(SolverError::EmptyEnsemble("scenarios"));
        }
        if !self.initial.iter().all(|v| v.is_finite()) {
            return Err(SolverError::InvalidParameters(
                "initial data contains non-finite values".into(),
            ));
        }
        if !(self.positivity_floor > 0.0) {
            return Err(SolverError::InvalidParameters(format!(
                "positivity floor must be positive, got {}",
                self.positivity_floor
            )));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_interior
    }

    /// Sample the noise ensemble for this setup (optionally under a
    /// different master seed).
    pub fn sample_noise_with_seed(&self, master_seed: u64) -> Result<NoisePath> {
        sample_noise(
            self.n_scenarios,
            self.times.n_steps,
            self.times.dt,
            &self.levy,
            master_seed,
        )
    }

    pub fn sample_noise(&self) -> Result<NoisePath> {
        self.sample_noise_with_seed(self.master_seed)
    }
}
