//! Run configuration: a TOML description of the discretization, the noise
//! environment, a model from the built-in catalog, a baseline control and
//! the solver tuning knobs.
//!
//! Parsing and semantic validation are separated from numerics so the
//! command-line driver can distinguish "the configuration is wrong" (every
//! complaint carries the offending field path) from "the solve failed".
//! [`RunConfig::load`] parses and validates; [`RunConfig::build_setup`]
//! assembles the simulation state the solvers consume.

use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

use crate::coeffs::{affine_model, heat_model, AffineModelParams, CoefficientSet};
use crate::control::InfoFiltration;
use crate::error::Result;
use crate::forward::ControlField;
use crate::grid::{DiscreteOperator, SpatialGrid};
use crate::harvest::{HarvestOptions, HarvestingProblem};
use crate::meanfield::MeanFieldOperator;
use crate::noise::LevyMeasure;
use crate::regression::RegressionSpec;
use crate::setup::{BoundaryData, SimSetup, TimeGrid};

/// Configuration problems, kept apart from numerical failures so callers
/// can map them to a distinct exit path.
#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("invalid configuration:\n{}", format_problems(.0))]
    Invalid(Vec<String>),
}

fn format_problems(problems: &[String]) -> String {
    problems
        .iter()
        .map(|p| format!("  - {p}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Spatial discretization parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    /// Number of interior nodes.
    pub n_interior: usize,
    /// Diffusivity of the second-order operator.
    pub kappa: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 1.0,
            n_interior: 49,
            kappa: 0.5,
        }
    }
}

/// Time discretization parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    pub n_steps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            t_end: 0.5,
            n_steps: 100,
        }
    }
}

/// Scenario count, seeding and the jump-mark catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub n_scenarios: usize,
    pub seed: u64,
    /// Jump marks of the discrete intensity measure (empty for none).
    pub marks: Vec<f64>,
    /// Arrival intensities, one per mark.
    pub intensities: Vec<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            n_scenarios: 200,
            seed: 12345,
            marks: vec![-0.3, 0.5],
            intensities: vec![1.0, 1.0],
        }
    }
}

/// Which coefficient family drives the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Pure diffusion: zero drift, noise and profit.
    Heat,
    /// The affine reference family driven by [`AffineModelParams`].
    Affine,
    /// The optimal-harvesting problem with log utility.
    Harvesting,
}

/// Mean-field operator catalog.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeanFieldConfig {
    /// Plain ensemble mean.
    Expectation,
    /// Scaled mean `c * mean`.
    Scaled { factor: f64 },
    /// Mean of squares.
    SmoothedSquare,
    /// Scaled exponential moment `mean(exp(a x))`.
    SmoothedExp { scale: f64 },
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self::Expectation
    }
}

impl MeanFieldConfig {
    pub fn build(&self) -> MeanFieldOperator {
        match *self {
            Self::Expectation => MeanFieldOperator::expectation(),
            Self::Scaled { factor } => MeanFieldOperator::scaled(factor),
            Self::SmoothedSquare => MeanFieldOperator::smoothed_square(),
            Self::SmoothedExp { scale } => MeanFieldOperator::smoothed_exp_scale(scale),
        }
    }

    fn is_expectation(&self) -> bool {
        matches!(self, Self::Expectation)
    }
}

/// Initial-field catalog.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Constant { value: f64 },
    /// `offset + amplitude * sin(pi * (x - x_min) / (x_max - x_min))`.
    Sine { amplitude: f64, offset: f64 },
    /// Gaussian bump `height * exp(-((x - center) / width)^2)`.
    Bump { height: f64, center: f64, width: f64 },
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self::Constant { value: 1.0 }
    }
}

impl InitialConfig {
    pub fn evaluate(&self, x: f64, x_min: f64, x_max: f64) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::Sine { amplitude, offset } => {
                offset + amplitude * (std::f64::consts::PI * (x - x_min) / (x_max - x_min)).sin()
            }
            Self::Bump {
                height,
                center,
                width,
            } => {
                let z = (x - center) / width;
                height * (-z * z).exp()
            }
        }
    }
}

/// Dirichlet boundary catalog.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryConfig {
    Zero,
    Constant { left: f64, right: f64 },
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self::Zero
    }
}

impl BoundaryConfig {
    pub fn build(&self) -> BoundaryData {
        match *self {
            Self::Zero => BoundaryData::Zero,
            Self::Constant { left, right } => BoundaryData::Constant { left, right },
        }
    }
}

/// Parameters of the harvesting model (used when `model.kind` is
/// `"harvesting"`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestingParams {
    /// Constant growth rate multiplying the population mean.
    pub growth: f64,
    /// Constant relative diffusion.
    pub sigma: f64,
    /// Relative jump size per unit mark: `theta(e) = theta_scale * e`.
    pub theta_scale: f64,
    /// Constant salvage density.
    pub alpha: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for HarvestingParams {
    fn default() -> Self {
        Self {
            growth: 1.0,
            sigma: 0.2,
            theta_scale: 0.3,
            alpha: 1.0,
            u_min: 1e-3,
            u_max: 50.0,
        }
    }
}

/// Model selection plus the per-family parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Parameters of the affine family (ignored by the other kinds).
    pub affine: AffineModelParams,
    /// Parameters of the harvesting family (ignored by the other kinds).
    pub harvesting: HarvestingParams,
    /// Mean-field operator applied to the field.
    pub mean_field_f: MeanFieldConfig,
    /// Mean-field operator applied to the control.
    pub mean_field_g: MeanFieldConfig,
    pub initial: InitialConfig,
    pub boundary: BoundaryConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Heat,
            affine: AffineModelParams::default(),
            harvesting: HarvestingParams::default(),
            mean_field_f: MeanFieldConfig::default(),
            mean_field_g: MeanFieldConfig::default(),
            initial: InitialConfig::default(),
            boundary: BoundaryConfig::default(),
        }
    }
}

/// Baseline control used by simulation and as the starting point of
/// gradient ascent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// Constant baseline value (clamped into the bounds).
    pub value: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Information delay of the controller (0 for full information).
    pub delay: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            value: 1.0,
            u_min: -10.0,
            u_max: 10.0,
            delay: 0.0,
        }
    }
}

/// Solver tuning knobs shared by the drivers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Polynomial degree of the conditional regressions.
    pub regression_degree: usize,
    /// Ridge weight on the non-constant regression coefficients.
    pub ridge: f64,
    /// Positivity floor of the multiplicative scheme.
    pub positivity_floor: f64,
    /// Outer sweeps of the harvesting fixed point.
    pub max_outer: usize,
    /// Damping of the harvesting fixed point.
    pub damping: f64,
    /// Median-change stopping tolerance of the harvesting fixed point
    /// (0 disables early stopping and runs all sweeps).
    pub tol_fp: f64,
    /// Largest tolerated positivity-floor fraction.
    pub floor_limit: f64,
    /// Sweeps of the contraction iterations.
    pub picard_iters: usize,
    /// Step size of gradient ascent.
    pub ascent_step: f64,
    pub ascent_iters: usize,
    pub ascent_tol: f64,
    /// Perturbation size of the directional-derivative comparison.
    pub gateaux_z: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            regression_degree: 2,
            ridge: 1e-8,
            positivity_floor: 1e-8,
            max_outer: 30,
            damping: 0.5,
            tol_fp: 2e-4,
            floor_limit: 0.01,
            picard_iters: 6,
            ascent_step: 0.2,
            ascent_iters: 10,
            ascent_tol: 1e-6,
            gateaux_z: 1e-3,
        }
    }
}

/// Complete description of one run.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub control: ControlConfig,
    pub solver: SolverConfig,
}

impl RunConfig {
    /// Parse a TOML string and validate it.
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Read, parse and validate a TOML file.
    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Render the configuration back to TOML (e.g. to echo the resolved
    /// run parameters next to the results).
    pub fn to_toml_string(&self) -> std::result::Result<String, ConfigError> {
        toml::to_string_pretty(self)
            .map_err(|e| ConfigError::Invalid(vec![format!("serialization: {e}")]))
    }

    /// Check every semantic constraint, reporting all violations at once
    /// with their field paths.
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, field: &str, msg: String| {
            if !ok {
                problems.push(format!("{field}: {msg}"));
            }
        };

        let g = &self.grid;
        check(
            g.x_max > g.x_min,
            "grid.x_max",
            format!("domain must be nondegenerate, got [{}, {}]", g.x_min, g.x_max),
        );
        check(
            g.n_interior >= 2,
            "grid.n_interior",
            format!("need at least 2 interior nodes, got {}", g.n_interior),
        );
        check(
            g.kappa > 0.0 && g.kappa.is_finite(),
            "grid.kappa",
            format!("diffusivity must be positive and finite, got {}", g.kappa),
        );

        let t = &self.time;
        check(
            t.t_end > 0.0 && t.t_end.is_finite(),
            "time.t_end",
            format!("horizon must be positive and finite, got {}", t.t_end),
        );
        check(
            t.n_steps >= 1,
            "time.n_steps",
            "need at least one time step".into(),
        );

        let n = &self.noise;
        check(
            n.n_scenarios >= 1,
            "noise.n_scenarios",
            "need at least one scenario".into(),
        );
        check(
            n.marks.len() == n.intensities.len(),
            "noise.intensities",
            format!(
                "need one intensity per mark, got {} marks and {} intensities",
                n.marks.len(),
                n.intensities.len()
            ),
        );
        for (j, &nu) in n.intensities.iter().enumerate() {
            check(
                nu >= 0.0 && nu.is_finite(),
                "noise.intensities",
                format!("intensity {j} must be nonnegative and finite, got {nu}"),
            );
        }

        if self.model.kind == ModelKind::Harvesting {
            let p = &self.model.harvesting;
            check(
                p.u_min > 0.0,
                "model.harvesting.u_min",
                format!("log utility needs a positive minimum rate, got {}", p.u_min),
            );
            check(
                p.u_max > p.u_min && p.u_max.is_finite(),
                "model.harvesting.u_max",
                format!("need u_min < u_max < inf, got [{}, {}]", p.u_min, p.u_max),
            );
            check(
                p.alpha >= 0.0,
                "model.harvesting.alpha",
                format!("salvage density must be nonnegative, got {}", p.alpha),
            );
            for &e in &n.marks {
                check(
                    p.theta_scale * e > -1.0,
                    "model.harvesting.theta_scale",
                    format!(
                        "relative jump size {} at mark {e} would push the population \
                         through zero",
                        p.theta_scale * e
                    ),
                );
            }
            check(
                self.model.mean_field_f.is_expectation(),
                "model.mean_field_f",
                "the harvesting drift couples to the population mean; \
                 use kind = \"expectation\""
                    .into(),
            );
            let floor_ok = match self.model.initial {
                InitialConfig::Constant { value } => value > 0.0,
                InitialConfig::Sine { amplitude, offset } => {
                    offset > 0.0 && offset + amplitude > 0.0 && amplitude >= 0.0
                }
                InitialConfig::Bump { height, .. } => height > 0.0,
            };
            check(
                floor_ok,
                "model.initial",
                "the initial population must be strictly positive".into(),
            );
        }

        let c = &self.control;
        check(
            c.u_min < c.u_max,
            "control.u_min",
            format!("bounds must be ordered, got [{}, {}]", c.u_min, c.u_max),
        );
        check(
            c.delay >= 0.0 && c.delay.is_finite(),
            "control.delay",
            format!("information delay must be nonnegative, got {}", c.delay),
        );

        let s = &self.solver;
        check(
            (1..=6).contains(&s.regression_degree),
            "solver.regression_degree",
            format!("degree must lie in 1..=6, got {}", s.regression_degree),
        );
        check(
            s.ridge >= 0.0 && s.ridge.is_finite(),
            "solver.ridge",
            format!("ridge weight must be nonnegative, got {}", s.ridge),
        );
        check(
            s.positivity_floor > 0.0,
            "solver.positivity_floor",
            format!("floor must be positive, got {}", s.positivity_floor),
        );
        check(
            s.max_outer >= 1,
            "solver.max_outer",
            "need at least one outer sweep".into(),
        );
        check(
            s.damping > 0.0 && s.damping <= 1.0,
            "solver.damping",
            format!("damping must lie in (0, 1], got {}", s.damping),
        );
        check(
            s.tol_fp >= 0.0,
            "solver.tol_fp",
            format!("tolerance must be nonnegative, got {}", s.tol_fp),
        );
        check(
            (0.0..=1.0).contains(&s.floor_limit),
            "solver.floor_limit",
            format!("floor limit is a fraction in [0, 1], got {}", s.floor_limit),
        );
        check(
            s.picard_iters >= 2,
            "solver.picard_iters",
            format!(
                "contraction diagnostics need at least 2 sweeps, got {}",
                s.picard_iters
            ),
        );
        check(
            s.ascent_step > 0.0,
            "solver.ascent_step",
            format!("step must be positive, got {}", s.ascent_step),
        );
        check(
            s.ascent_iters >= 1,
            "solver.ascent_iters",
            "need at least one ascent sweep".into(),
        );
        check(
            s.gateaux_z > 0.0,
            "solver.gateaux_z",
            format!("perturbation size must be positive, got {}", s.gateaux_z),
        );

        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// The coefficient family selected by `model.kind`.
    pub fn coefficient_set(&self) -> CoefficientSet {
        match self.model.kind {
            ModelKind::Heat => heat_model(),
            ModelKind::Affine => affine_model(self.model.affine),
            ModelKind::Harvesting => self.harvesting_problem().coefficient_set(),
        }
    }

    /// The harvesting problem described by `model.harvesting` and
    /// `model.initial` (meaningful when `model.kind` is `"harvesting"`).
    pub fn harvesting_problem(&self) -> HarvestingProblem {
        let p = self.model.harvesting;
        let initial = self.model.initial;
        let (x_min, x_max) = (self.grid.x_min, self.grid.x_max);
        HarvestingProblem {
            growth: Arc::new(move |_, _| p.growth),
            sigma: Arc::new(move |_, _| p.sigma),
            theta: Arc::new(move |_, _, e| p.theta_scale * e),
            alpha: Arc::new(move |_| p.alpha),
            initial: Arc::new(move |x| initial.evaluate(x, x_min, x_max)),
            bounds: (p.u_min, p.u_max),
        }
    }

    /// Assemble the simulation state (validated configurations only).
    pub fn build_setup(&self) -> Result<SimSetup> {
        let grid = SpatialGrid::new(self.grid.x_min, self.grid.x_max, self.grid.n_interior)?;
        let op = DiscreteOperator::laplacian(&grid, self.grid.kappa)?;
        let times = TimeGrid::new(self.time.t_end, self.time.n_steps)?;
        let levy = if self.noise.marks.is_empty() {
            LevyMeasure::empty()
        } else {
            LevyMeasure::new(self.noise.marks.clone(), self.noise.intensities.clone())?
        };
        let initial: Vec<f64> = grid
            .nodes
            .iter()
            .map(|&x| {
                self.model
                    .initial
                    .evaluate(x, self.grid.x_min, self.grid.x_max)
            })
            .collect();
        let mut setup = SimSetup::new(
            grid,
            op,
            times,
            levy,
            self.noise.n_scenarios,
            self.noise.seed,
            self.coefficient_set(),
            self.model.mean_field_f.build(),
            self.model.mean_field_g.build(),
            initial,
            self.model.boundary.build(),
        )?;
        setup.positivity_floor = self.solver.positivity_floor;
        Ok(setup)
    }

    /// Bounds of the admissible control interval: the harvesting bounds for
    /// the harvesting model, the `[control]` bounds otherwise.
    pub fn control_bounds(&self) -> (f64, f64) {
        if self.model.kind == ModelKind::Harvesting {
            (self.model.harvesting.u_min, self.model.harvesting.u_max)
        } else {
            (self.control.u_min, self.control.u_max)
        }
    }

    /// Constant baseline control on the configured grid.
    pub fn baseline_control(&self) -> Result<ControlField> {
        ControlField::constant(
            self.control.value,
            self.time.n_steps,
            self.grid.n_interior,
            self.control_bounds(),
        )
    }

    pub fn filtration(&self) -> Result<InfoFiltration> {
        InfoFiltration::delayed(self.control.delay)
    }

    pub fn regression_spec(&self) -> RegressionSpec {
        RegressionSpec {
            degree: self.solver.regression_degree,
            ridge: self.solver.ridge,
        }
    }

    /// Harvesting fixed-point options from the `[solver]` table. A zero
    /// `tol_fp` disables early stopping (every sweep runs).
    pub fn harvest_options(&self) -> HarvestOptions {
        HarvestOptions {
            max_outer: self.solver.max_outer,
            damping: self.solver.damping,
            tol_fp: self.solver.tol_fp,
            floor_limit: self.solver.floor_limit,
            regression: self.regression_spec(),
        }
    }
}

/// A complete commented example accepted by [`RunConfig::from_toml_str`].
pub fn example_toml() -> &'static str {
    r#"# Simulation of the optimal-harvesting model on (0, 1).

[grid]
x_min = 0.0
x_max = 1.0
n_interior = 49
kappa = 0.05

[time]
t_end = 0.5
n_steps = 100

[noise]
n_scenarios = 200
seed = 42
marks = [-0.3, 0.5]
intensities = [1.0, 1.0]

[model]
kind = "harvesting"
mean_field_f = { kind = "expectation" }
mean_field_g = { kind = "expectation" }
initial = { kind = "sine", amplitude = 1.0, offset = 1.0 }
boundary = { kind = "zero" }

[model.harvesting]
growth = 1.0
sigma = 0.2
theta_scale = 0.3
alpha = 1.0
u_min = 1e-3
u_max = 50.0

[control]
value = 1.0
delay = 0.0

[solver]
regression_degree = 2
ridge = 1e-8
max_outer = 30
damping = 0.5
tol_fp = 2e-4
floor_limit = 0.01
"#
}
