//! Regression-based conditional expectations.
//!
//! Backward solvers approximate `E[target | state]` by least squares on a
//! polynomial basis of the state observed across the scenario ensemble
//! (the Longstaff–Schwartz device). The fit solves the ridge normal
//! equations
//!
//! ```text
//! (X'X + ridge * diag(0, 1, ..., 1)) beta = X'y
//! ```
//!
//! on standardized features with an unpenalized intercept, so constant
//! targets are reproduced exactly and the fitted values always preserve the
//! ensemble mean of the target. A rank-deficient system (degenerate state,
//! non-positive Cholesky pivot) falls back to the ensemble mean; every
//! fallback is counted in the diagnostics.

use crate::error::{Result, SolverError};

/// Basis/ridge choice for all conditional-expectation fits of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionSpec {
    /// Polynomial degree in the local state (basis size degree + 1).
    pub degree: usize,
    /// Ridge weight on the non-intercept coefficients.
    pub ridge: f64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            degree: 2,
            ridge: 1e-8,
        }
    }
}

impl RegressionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(SolverError::InvalidParameters(
                "regression degree must be at least 1".into(),
            ));
        }
        if self.degree > 8 {
            return Err(SolverError::InvalidParameters(format!(
                "regression degree {} is unreasonably large",
                self.degree
            )));
        }
        if !(self.ridge >= 0.0) {
            return Err(SolverError::InvalidParameters(format!(
                "ridge must be nonnegative, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// Counters accumulated over all fits of a solve, reported alongside results.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegressionDiagnostics {
    /// Number of least-squares fits performed.
    pub fits: usize,
    /// Fits that fell back to the ensemble mean (degenerate state or
    /// non-positive pivot).
    pub fallbacks: usize,
    /// Smallest relative Cholesky pivot seen across all successful fits.
    pub min_rel_pivot: f64,
}

impl RegressionDiagnostics {
    pub fn new() -> Self {
        Self {
            fits: 0,
            fallbacks: 0,
            min_rel_pivot: f64::INFINITY,
        }
    }

    fn record_pivot(&mut self, rel: f64) {
        if rel < self.min_rel_pivot {
            self.min_rel_pivot = rel;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.fits += other.fits;
        self.fallbacks += other.fallbacks;
        if other.min_rel_pivot < self.min_rel_pivot {
            self.min_rel_pivot = other.min_rel_pivot;
        }
    }
}

/// Fitted conditional expectation of `targets` given the scalar state `xs`,
/// evaluated at each sample. Lengths must match and be nonzero.
pub fn fit_conditional(
    xs: &[f64],
    targets: &[f64],
    spec: &RegressionSpec,
    diag: &mut RegressionDiagnostics,
) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(SolverError::EmptyEnsemble("regression"));
    }
    if xs.len() != targets.len() {
        return Err(SolverError::DimensionMismatch {
            what: "regression state vs target",
            expected: xs.len(),
            got: targets.len(),
        });
    }
    spec.validate()?;
    diag.fits += 1;
    let m = xs.len();
    let mean_t = targets.iter().sum::<f64>() / m as f64;

    // Standardize the state; a degenerate ensemble has no usable basis
    // beyond the intercept.
    let mean_x = xs.iter().sum::<f64>() / m as f64;
    let var_x = xs.iter().map(|&x| (x - mean_x) * (x - mean_x)).sum::<f64>() / m as f64;
    let sd_x = var_x.sqrt();
    if !sd_x.is_finite() || sd_x <= 1e-13 * (1.0 + mean_x.abs()) {
        diag.fallbacks += 1;
        return Ok(vec![mean_t; m]);
    }

    let k = spec.degree + 1;
    // Row features per sample: (1, z, z^2, ..., z^degree).
    let feat = |x: f64| -> Vec<f64> {
        let z = (x - mean_x) / sd_x;
        let mut row = Vec::with_capacity(k);
        let mut p = 1.0;
        for _ in 0..k {
            row.push(p);
            p *= z;
        }
        row
    };

    // Normal equations.
    let mut a = vec![0.0; k * k];
    let mut b = vec![0.0; k];
    for (i, &x) in xs.iter().enumerate() {
        let row = feat(x);
        for r in 0..k {
            b[r] += row[r] * targets[i];
            for c in r..k {
                a[r * k + c] += row[r] * row[c];
            }
        }
    }
    for r in 0..k {
        for c in 0..r {
            a[r * k + c] = a[c * k + r];
        }
    }
    for r in 1..k {
        a[r * k + r] += spec.ridge;
    }

    match cholesky_solve(&mut a, &b, k) {
        Some((beta, min_rel_pivot)) => {
            diag.record_pivot(min_rel_pivot);
            Ok(xs
                .iter()
                .map(|&x| {
                    let row = feat(x);
                    row.iter().zip(&beta).map(|(f, c)| f * c).sum()
                })
                .collect())
        }
        None => {
            diag.fallbacks += 1;
            Ok(vec![mean_t; m])
        }
    }
}

/// Multi-feature variant: `features` holds one row of raw regressors per
/// sample (the intercept is added internally, each column standardized;
/// degenerate columns are dropped).
pub fn fit_conditional_multi(
    features: &[Vec<f64>],
    targets: &[f64],
    ridge: f64,
    diag: &mut RegressionDiagnostics,
) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(SolverError::EmptyEnsemble("regression"));
    }
    if features.len() != targets.len() {
        return Err(SolverError::DimensionMismatch {
            what: "regression rows vs target",
            expected: features.len(),
            got: targets.len(),
        });
    }
    diag.fits += 1;
    let m = features.len();
    let n_raw = features[0].len();
    let mean_t = targets.iter().sum::<f64>() / m as f64;

    // Column statistics; keep only non-degenerate columns.
    let mut keep = Vec::new();
    let mut mu = vec![0.0; n_raw];
    let mut sd = vec![0.0; n_raw];
    for j in 0..n_raw {
        let mean = features.iter().map(|r| r[j]).sum::<f64>() / m as f64;
        let var = features
            .iter()
            .map(|r| (r[j] - mean) * (r[j] - mean))
            .sum::<f64>()
            / m as f64;
        mu[j] = mean;
        sd[j] = var.sqrt();
        if sd[j].is_finite() && sd[j] > 1e-13 * (1.0 + mean.abs()) {
            keep.push(j);
        }
    }
    if keep.is_empty() {
        diag.fallbacks += 1;
        return Ok(vec![mean_t; m]);
    }

    let k = keep.len() + 1;
    let feat = |row: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(k);
        out.push(1.0);
        for &j in &keep {
            out.push((row[j] - mu[j]) / sd[j]);
        }
        out
    };

    let mut a = vec![0.0; k * k];
    let mut b = vec![0.0; k];
    for (i, raw) in features.iter().enumerate() {
        let row = feat(raw);
        for r in 0..k {
            b[r] += row[r] * targets[i];
            for c in r..k {
                a[r * k + c] += row[r] * row[c];
            }
        }
    }
    for r in 0..k {
        for c in 0..r {
            a[r * k + c] = a[c * k + r];
        }
    }
    for r in 1..k {
        a[r * k + r] += ridge;
    }

    match cholesky_solve(&mut a, &b, k) {
        Some((beta, min_rel_pivot)) => {
            diag.record_pivot(min_rel_pivot);
            Ok(features
                .iter()
                .map(|raw| {
                    let row = feat(raw);
                    row.iter().zip(&beta).map(|(f, c)| f * c).sum()
                })
                .collect())
        }
        None => {
            diag.fallbacks += 1;
            Ok(vec![mean_t; m])
        }
    }
}

/// In-place Cholesky factorization and solve of the symmetric system; returns
/// the solution and the smallest pivot relative to the largest diagonal
/// entry, or `None` when a pivot is non-positive / non-finite.
fn cholesky_solve(a: &mut [f64], b: &[f64], k: usize) -> Option<(Vec<f64>, f64)> {
    let diag_max = (0..k)
        .map(|r| a[r * k + r].abs())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut min_rel_pivot = f64::INFINITY;
    // Lower-triangular factor written over `a`.
    for r in 0..k {
        for c in 0..=r {
            let mut s = a[r * k + c];
            for p in 0..c {
                s -= a[r * k + p] * a[c * k + p];
            }
            if r == c {
                if !(s > 1e-14 * diag_max) || !s.is_finite() {
                    return None;
                }
                min_rel_pivot = min_rel_pivot.min(s / diag_max);
                a[r * k + c] = s.sqrt();
            } else {
                a[r * k + c] = s / a[c * k + c];
            }
        }
    }
    // Forward and backward substitution.
    let mut y = vec![0.0; k];
    for r in 0..k {
        let mut s = b[r];
        for p in 0..r {
            s -= a[r * k + p] * y[p];
        }
        y[r] = s / a[r * k + r];
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let mut s = y[r];
        for p in r + 1..k {
            s -= a[p * k + r] * x[p];
        }
        x[r] = s / a[r * k + r];
    }
    Some((x, min_rel_pivot))
}
