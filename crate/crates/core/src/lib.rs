//! Critical clearing time of faults in inequality-constrained nonlinear
//! systems, its instability mode, and first-order sensitivity of the CCT to
//! system parameters.
//!
//! ```
//! use cct_core::{compute_cct, cct_sensitivity, CctOptions, InstabilityMode, Smib, SmibParams};
//!
//! let params = SmibParams::default();
//! let sys = Smib::new(params);
//! let p = params.param_vector();
//! let opts = CctOptions::precise();
//! let critical = compute_cct(&sys, &p, &opts).unwrap();
//! assert_eq!(critical.mode, InstabilityMode::Mode1FaultHitsBoundary);
//! let s = cct_sensitivity(&sys, &p, &critical, 0, &opts).unwrap();
//! assert!(s.dtcl_dp < 0.0);
//! ```

// `!(a > b)` is used on purpose so NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary;
pub mod cct;
pub mod error;
pub mod integrator;
pub mod model;
pub mod sensitivity;
pub mod validate;

pub use boundary::{
    classify_pseudo_ep, combined_h, eval_h, eval_h_dot, eval_h_gradients, sample_stability_region, GridSpec,
    PseudoEpClass, PseudoEpKind, SrCellClass, SrGrid,
};
pub use cct::{classify_post_fault, compute_cct, CctOptions, CriticalResult, InstabilityMode, PostFaultOutcome};
pub use error::{Error, Result};
pub use integrator::{
    integrate, integrate_with_sensitivities, state_at, EventKind, EventSpec, IntegrationOptions, SensitivityBundle,
    Trajectory,
};
pub use model::{
    eval_f, eval_jacobians, find_equilibrium, sep_sensitivity, ConstrainedSystem, EquilibriumClass,
    EquilibriumResult, ExprSystem, ExprSystemDef, NewtonOptions, Phase, Smib, SmibParams,
};
pub use sensitivity::{cct_sensitivity, CctSensitivity};
pub use validate::{fd_cct_slope, scan_cct, OracleReport};
