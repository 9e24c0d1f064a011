//! Numerical laboratory for divergence-form Schrödinger operators
//! A = div(Q grad) - V with unbounded diffusion and potential.
//!
//! The crate builds truncated-domain Dirichlet approximations of the
//! semigroup generated by A, evolves them with unconditionally stable
//! steppers, extracts desk-scale heat-kernel slices in one and two
//! dimensions, and audits the explicit inequalities that the kernel theory
//! rests on: Lyapunov drift conditions, weight-function hypotheses,
//! Gaussian-type kernel upper bounds, and eigenfunction decay envelopes.
//!
//! Everything is deterministic: fixed seeds, fixed grids, no environment
//! dependence in numerical paths.

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod bounds;
pub mod coefficients;
pub mod error;
pub mod discretize;
pub mod fitting;
pub mod linalg;
pub mod lyapunov;
pub mod quad;
pub mod report;
pub mod semigroup;
pub mod spectral;

pub use bounds::{
    assemble_rhs_budget, bound_exp, bound_poly, calibrate_and_verify, check_weight_constants,
    holdout_margins, verify_constant, BoundParams, BoundReport, ExpBoundParams, WeightConstantsReport,
    WeightConstantsSamples, WeightConstants, PolyBoundParams, ScalingFit, WeightTriple,
};
pub use coefficients::{
    check_z_drift, CoefficientField, Family, ZDriftReport, RadialProfile, SmoothedPower,
    SmoothedRadius, SymMat, ZFunction,
};
pub use discretize::{assemble, build_grid, form_check, DiscreteOperator, Grid};
pub use error::{CoreError, Result};
pub use lyapunov::{
    admissible_params, apply_eta_ratio, apply_l_ratio, audit_lyapunov, calibrate_rate, xi_budget,
    AuditGrid, LyapunovSpec, ParamRegion, RateFunction, WeightKind,
};
pub use report::{MarginReport, Verdict};
pub use spectral::{
    decay_fit, eigen_lowest, eigen_rho_stability, eigenfunction_bound_check, kernel_diagonal,
    DecayFit, DecayShape, SpectralResult, StabilityTable,
};
pub use semigroup::{
    check_monotone_rho, check_submarkov, check_xi_w, evolve, evolve_path, kernel_column,
    kernel_column_at, ultracontractivity_probe, EvolverConfig, KernelManifest, KernelSlice,
    MonotoneReport, Scheme, StepPolicy, UltraReport,
};
