//! Numerical laboratory for optimal control of mean-field stochastic PDEs
//! with jumps.
//!
//! The library discretizes controlled dynamics of the form
//!
//! ```text
//! dY(t,x) = [L Y + b(t, x, Y, F(Y), u, G(u))] dt
//!           + sigma(t, x, Y, F(Y), u, G(u)) dW(t)
//!           + int theta(t, x, Y, F(Y), u, G(u), e) Ntilde(dt, de)
//! ```
//!
//! on an interval with Dirichlet boundary data, where `F` and `G` are
//! mean-field operators acting on the law of the field and of the control,
//! realized on a finite scenario ensemble. On top of the forward solver sit
//! a regression-based backward solver for the adjoint triple `(p, q, gamma)`
//! of the stochastic maximum principle, Hamiltonian utilities for checking
//! optimality conditions, and a solved optimal-harvesting example with a
//! closed-form feedback law for end-to-end verification.

pub mod adjoint;
pub mod coeffs;
pub mod config;
pub mod control;
pub mod error;
pub mod forward;
pub mod grid;
pub mod harvest;
pub mod meanfield;
pub mod noise;
pub mod output;
pub mod regression;
pub mod setup;
pub mod verify;

pub use adjoint::{
    noise_features, picard_backward, solve_adjoint, terminal_condition, AdjointTriple,
    BackwardArgs, BackwardGenerator, PicardBackwardReport,
};
pub use coeffs::{
    affine_model, heat_model, AffineModelParams, CoeffArgs, CoefficientSet, MultiplicativeNoise,
};
pub use config::{
    example_toml, BoundaryConfig, ConfigError, ControlConfig, GridConfig, HarvestingParams,
    InitialConfig, MeanFieldConfig, ModelConfig, ModelKind, NoiseConfig, RunConfig, SolverConfig,
    TimeConfig,
};
pub use control::{
    check_concavity, check_necessary, evaluate_objective, evaluate_objective_on, gateaux_compare,
    gradient_ascent, hamiltonian, hamiltonian_gradient, pair_gradient, perturbed_control,
    project_conditional, AscentOptions, AscentReport, ConcavityReport, ConcavityWitness,
    GateauxCheck, HamiltonianGradient, InfoFiltration, ObjectiveReport, OptimalityReport,
};
pub use error::{Result, SolverError};
pub use forward::{
    derivative_process, ensemble_sup_distance, picard_forward, simulate_particle_system,
    solve_forward, step_forward, ControlField, ControlValues, ForwardPath, PicardForwardReport,
};
pub use grid::{check_coercivity, CoercivityReport, DiscreteOperator, SpatialGrid};
pub use harvest::{
    feedback_residual, solve_harvesting, verify_harvest_optimality, ChallengerOutcome,
    HarvestEvidence, HarvestOptions, HarvestVerifyOptions, HarvestingProblem, HarvestingSolution,
};
pub use meanfield::MeanFieldOperator;
pub use noise::{compensated_jump_increment, sample_noise, LevyMeasure, NoisePath};
pub use output::{field_csv, format_float, long_csv, sha256_hex, Manifest, ResultBundle};
pub use regression::{fit_conditional, fit_conditional_multi, RegressionDiagnostics, RegressionSpec};
pub use setup::{BoundaryData, SimSetup, TimeGrid, DEFAULT_POSITIVITY_FLOOR};
pub use verify::{run_suite, suite_names, CheckResult, SuiteReport};
