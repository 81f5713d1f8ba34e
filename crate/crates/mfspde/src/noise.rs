//! Driving noise: Brownian increments and a finite-mark jump measure.
//!
//! The jump part of the dynamics integrates against a compensated Poisson
//! random measure with a finite set of marks,
//!
//! ```text
//! nu = sum_k nu_k * delta_{e_k},      e_k != 0,  nu_k > 0,
//! ```
//!
//! so a path is fully described per scenario and step by one Gaussian
//! increment `dW ~ N(0, dt)` and one Poisson count per mark with intensity
//! `nu_k * dt`. The compensated increment of a jump coefficient theta is
//!
//! ```text
//! sum_k theta(e_k) * (count_k - nu_k * dt).
//! ```
//!
//! # Reproducibility
//!
//! Every (scenario, step) cell draws from its own ChaCha stream derived from
//! `(master_seed, scenario, step)`; within a cell the draw order is fixed
//! (Gaussian first, then the marks in order). Sampling is therefore a pure
//! function of the inputs: any scenario subset, any step prefix, and any
//! worker scheduling reproduce identical increments.

use crate::error::{Result, SolverError};
use ndarray::{Array2, Array3};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Poisson, StandardNormal};
use rayon::prelude::*;

/// Finite-mark Lévy measure: marks with their jump intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyMeasure {
    marks: Vec<f64>,
    intensities: Vec<f64>,
}

impl LevyMeasure {
    pub fn new(marks: Vec<f64>, intensities: Vec<f64>) -> Result<Self> {
        if marks.len() != intensities.len() {
            return Err(SolverError::DimensionMismatch {
                what: "levy marks vs intensities",
                expected: marks.len(),
                got: intensities.len(),
            });
        }
        for (k, &e) in marks.iter().enumerate() {
            if e == 0.0 || !e.is_finite() {
                return Err(SolverError::InvalidParameters(format!(
                    "levy mark {k} must be a nonzero finite real, got {e}"
                )));
            }
        }
        for (k, &v) in intensities.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SolverError::InvalidParameters(format!(
                    "levy intensity {k} must be strictly positive and finite, got {v}"
                )));
            }
        }
        Ok(Self { marks, intensities })
    }

    /// Desk default: two marks, a downward and an upward one, at unit rate.
    pub fn desk_default() -> Self {
        Self::new(vec![-0.3, 0.5], vec![1.0, 1.0]).expect("desk measure is valid")
    }

    /// A measure with no marks: the jump integral vanishes identically.
    pub fn empty() -> Self {
        Self {
            marks: Vec::new(),
            intensities: Vec::new(),
        }
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }
}

/// Sampled driving noise for an ensemble of scenarios.
#[derive(Debug, Clone)]
pub struct NoisePath {
    /// Brownian increments, `[scenario][step]`, each `~ N(0, dt)`.
    pub dw: Array2<f64>,
    /// Poisson jump counts, `[scenario][step][mark]`.
    pub counts: Array3<u32>,
    pub dt: f64,
    pub master_seed: u64,
}

impl NoisePath {
    pub fn n_scenarios(&self) -> usize {
        self.dw.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.dw.ncols()
    }

    pub fn n_marks(&self) -> usize {
        self.counts.dim().2
    }
}

/// Draw the full noise path for `(n_scenarios, n_steps)` at step width `dt`.
///
/// Deterministic in all inputs; see the module notes on stream derivation.
pub fn sample_noise(
    n_scenarios: usize,
    n_steps: usize,
    dt: f64,
    levy: &LevyMeasure,
    master_seed: u64,
) -> Result<NoisePath> {
    if n_scenarios == 0 {
        return Err(SolverError::InvalidParameters(
            "need at least one scenario".into(),
        ));
    }
    if n_steps == 0 {
        return Err(SolverError::InvalidParameters(
            "need at least one time step".into(),
        ));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(SolverError::InvalidParameters(format!(
            "step width must be positive and finite, got {dt}"
        )));
    }
    if n_scenarios > u32::MAX as usize || n_steps > u32::MAX as usize {
        return Err(SolverError::InvalidParameters(
            "scenario/step counts exceed the stream-id space".into(),
        ));
    }
    let n_marks = levy.n_marks();
    let poissons: Vec<Poisson<f64>> = levy
        .intensities()
        .iter()
        .map(|&nu| {
            Poisson::new(nu * dt).map_err(|e| {
                SolverError::InvalidParameters(format!("poisson rate {nu}*{dt}: {e}"))
            })
        })
        .collect::<Result<_>>()?;
    let sqrt_dt = dt.sqrt();

    // One row of increments per scenario, generated independently and
    // collected in scenario order.
    let rows: Vec<(Vec<f64>, Vec<u32>)> = (0..n_scenarios)
        .into_par_iter()
        .map(|s| {
            let mut dw_row = Vec::with_capacity(n_steps);
            let mut count_row = Vec::with_capacity(n_steps * n_marks);
            for step in 0..n_steps {
                let mut rng = cell_rng(master_seed, s, step);
                let z: f64 = rng.sample(StandardNormal);
                dw_row.push(sqrt_dt * z);
                for p in &poissons {
                    let c: f64 = rng.sample(*p);
                    count_row.push(c.min(u32::MAX as f64) as u32);
                }
            }
            (dw_row, count_row)
        })
        .collect();

    let mut dw = Array2::zeros((n_scenarios, n_steps));
    let mut counts = Array3::zeros((n_scenarios, n_steps, n_marks));
    for (s, (dw_row, count_row)) in rows.into_iter().enumerate() {
        for (t, v) in dw_row.into_iter().enumerate() {
            dw[[s, t]] = v;
        }
        for (i, c) in count_row.into_iter().enumerate() {
            counts[[s, i / n_marks.max(1), i % n_marks.max(1)]] = c;
        }
    }

    Ok(NoisePath {
        dw,
        counts,
        dt,
        master_seed,
    })
}

/// ChaCha stream for one (scenario, step) cell of the sampling schedule.
fn cell_rng(master_seed: u64, scenario: usize, step: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(((scenario as u64) << 32) | step as u64);
    rng
}

/// Compensated jump increment `sum_k theta_k * (count_k - nu_k * dt)` for one
/// scenario-step cell, given the jump coefficient evaluated at each mark.
pub fn compensated_jump_increment(
    theta_at_marks: &[f64],
    counts: &[u32],
    levy: &LevyMeasure,
    dt: f64,
) -> Result<f64> {
    if theta_at_marks.len() != levy.n_marks() {
        return Err(SolverError::DimensionMismatch {
            what: "theta values vs levy marks",
            expected: levy.n_marks(),
            got: theta_at_marks.len(),
        });
    }
    if counts.len() != levy.n_marks() {
        return Err(SolverError::DimensionMismatch {
            what: "jump counts vs levy marks",
            expected: levy.n_marks(),
            got: counts.len(),
        });
    }
    let mut s = 0.0;
    for k in 0..levy.n_marks() {
        s += theta_at_marks[k] * (counts[k] as f64 - levy.intensities()[k] * dt);
    }
    Ok(s)
}
