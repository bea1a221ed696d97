//! Constrained dynamical systems `ẋ = f(x, p)`, `h(x, p) > 0` over the
//! pre-fault, fault-on and post-fault phases.
//!
//! Systems implement [`ConstrainedSystem`]; the free functions in this module
//! add dimension checking, Newton equilibrium solving and the implicit-function
//! sensitivity of an equilibrium with respect to the parameters.

mod expr;
mod expr_system;
pub mod smib;

pub use expr::{Expr, ExprContext};
pub use expr_system::{ConstraintDef, ExprPhaseDef, ExprSystem, ExprSystemDef, NamedValue};
pub use smib::{EvOverX, Smib, SmibParams};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which piece of the switched system is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    PreFault,
    FaultOn,
    PostFault,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::PreFault, Phase::FaultOn, Phase::PostFault];

    pub fn index(self) -> usize {
        match self {
            Phase::PreFault => 0,
            Phase::FaultOn => 1,
            Phase::PostFault => 2,
        }
    }
}

/// A parametric vector field per phase together with per-phase inequality
/// constraints `h_k(x, p) > 0`.
///
/// Implementations may assume the dimensions of `x` and `p` are correct; the
/// checked entry points ([`eval_f`], [`eval_jacobians`], ...) validate them.
/// Gradients are returned as column vectors.
pub trait ConstrainedSystem: Send + Sync {
    fn state_dim(&self) -> usize;

    fn param_names(&self) -> &[String];

    fn param_dim(&self) -> usize {
        self.param_names().len()
    }

    fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names().iter().position(|n| n == name)
    }

    fn field(&self, phase: Phase, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64>;

    /// `(∂f/∂x, ∂f/∂p)`, of shapes n×n and n×np.
    fn field_jacobians(
        &self,
        phase: Phase,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>);

    /// Stable identifiers of the constraints active in `phase`.
    fn constraint_names(&self, phase: Phase) -> &[String];

    fn constraint(&self, phase: Phase, k: usize, x: &DVector<f64>, p: &DVector<f64>) -> f64;

    /// `(∂h_k/∂x, ∂h_k/∂p)` as column vectors.
    fn constraint_gradients(
        &self,
        phase: Phase,
        k: usize,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>);

    /// `(∂²h_k/∂x², ∂²h_k/∂x∂p)` of shapes n×n and n×np, when available.
    fn constraint_hessians(
        &self,
        phase: Phase,
        k: usize,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>)>;
}

pub(crate) fn check_dims<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<()> {
    if x.len() != sys.state_dim() {
        return Err(Error::dims("state", sys.state_dim(), x.len()));
    }
    if p.len() != sys.param_dim() {
        return Err(Error::dims("parameters", sys.param_dim(), p.len()));
    }
    Ok(())
}

pub fn eval_f<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dims(sys, x, p)?;
    Ok(sys.field(phase, x, p))
}

pub fn eval_jacobians<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dims(sys, x, p)?;
    Ok(sys.field_jacobians(phase, x, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EquilibriumClass {
    Stable,
    Unstable,
    NonHyperbolic,
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub x_s: DVector<f64>,
    pub residual_norm: f64,
    pub classification: EquilibriumClass,
    pub eigenvalues: Vec<(f64, f64)>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Eigenvalues with `|Re λ|` below this are treated as non-hyperbolic.
    pub hyperbolicity_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 50,
            hyperbolicity_tol: 1e-8,
        }
    }
}

/// Classify an equilibrium from the eigenvalues of `∂f/∂x`.
pub fn classify_jacobian(jx: &DMatrix<f64>, hyperbolicity_tol: f64) -> (EquilibriumClass, Vec<(f64, f64)>) {
    let eig: Vec<(f64, f64)> = jx
        .complex_eigenvalues()
        .iter()
        .map(|c| (c.re, c.im))
        .collect();
    let class = if eig.iter().any(|(re, _)| re.abs() < hyperbolicity_tol) {
        EquilibriumClass::NonHyperbolic
    } else if eig.iter().all(|(re, _)| *re < 0.0) {
        EquilibriumClass::Stable
    } else {
        EquilibriumClass::Unstable
    };
    (class, eig)
}

/// Newton iteration on `f(x, p) = 0` with step halving whenever the residual
/// would increase.
pub fn find_equilibrium<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    p: &DVector<f64>,
    x_guess: &DVector<f64>,
    opts: &NewtonOptions,
) -> Result<EquilibriumResult> {
    check_dims(sys, x_guess, p)?;
    let mut x = x_guess.clone();
    let mut fx = sys.field(phase, &x, p);
    let mut res = fx.norm();
    let mut iterations = 0;

    while res > opts.tol {
        if iterations >= opts.max_iterations || !res.is_finite() {
            return Err(Error::NoEquilibriumFound {
                iterations,
                residual: res,
            });
        }
        iterations += 1;
        let (jx, _) = sys.field_jacobians(phase, &x, p);
        let step = match jx.lu().solve(&fx) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => return Err(Error::SingularJacobian { at: x.iter().copied().collect() }),
        };

        let mut lambda = 1.0;
        loop {
            let trial = &x - &step * lambda;
            let f_trial = sys.field(phase, &trial, p);
            let r_trial = f_trial.norm();
            if r_trial < res || lambda < 1.0 / 1024.0 {
                x = trial;
                fx = f_trial;
                res = r_trial;
                break;
            }
            lambda *= 0.5;
        }
    }

    // polish to round-off
    for _ in 0..3 {
        if res == 0.0 {
            break;
        }
        let (jx, _) = sys.field_jacobians(phase, &x, p);
        let Some(step) = jx.lu().solve(&fx) else { break };
        let trial = &x - step;
        let f_trial = sys.field(phase, &trial, p);
        if !(f_trial.norm() < res) {
            break;
        }
        x = trial;
        res = f_trial.norm();
        fx = f_trial;
    }

    let (jx, _) = sys.field_jacobians(phase, &x, p);
    let (classification, eigenvalues) = classify_jacobian(&jx, opts.hyperbolicity_tol);
    Ok(EquilibriumResult {
        x_s: x,
        residual_norm: res,
        classification,
        eigenvalues,
        iterations,
    })
}

/// Sensitivity of a hyperbolic equilibrium to the parameters,
/// `−[∂f/∂x]⁻¹ ∂f/∂p` (n×np).
pub fn sep_sensitivity<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    p: &DVector<f64>,
    x_s: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_dims(sys, x_s, p)?;
    let (jx, jp) = sys.field_jacobians(phase, x_s, p);
    let singular = || Error::SingularJacobian {
        at: x_s.iter().copied().collect(),
    };
    let lu = jx.clone().lu();
    let u = lu.u();
    let scale = jx.amax().max(f64::MIN_POSITIVE);
    if (0..u.nrows()).any(|i| u[(i, i)].abs() <= 1e-14 * scale) {
        return Err(singular());
    }
    let sol = lu.solve(&jp).ok_or_else(singular)?;
    Ok(-sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn smib(pm: f64) -> (Smib, DVector<f64>) {
        let params = SmibParams {
            pm,
            m: 0.1,
            ..SmibParams::default()
        };
        let p = params.param_vector();
        (Smib::new(params), p)
    }

    #[test]
    fn post_fault_equilibrium_is_asin_pm() {
        let (sys, p) = smib(0.5);
        let eq = find_equilibrium(&sys, Phase::PostFault, &p, &DVector::zeros(2), &NewtonOptions::default())
            .unwrap();
        assert_relative_eq!(eq.x_s[0], 0.5f64.asin(), epsilon = 1e-12);
        assert_relative_eq!(eq.x_s[1], 0.0, epsilon = 1e-12);
        assert!(eq.residual_norm <= 1e-10);
        assert_eq!(eq.classification, EquilibriumClass::Stable);
    }

    #[test]
    fn zero_input_equilibrium_is_origin() {
        let (sys, p) = smib(0.0);
        let eq = find_equilibrium(&sys, Phase::PostFault, &p, &DVector::zeros(2), &NewtonOptions::default())
            .unwrap();
        assert_eq!(eq.iterations, 0);
        assert_eq!(eq.x_s, DVector::zeros(2));
    }

    #[test]
    fn overloaded_machine_has_no_equilibrium() {
        let (sys, p) = smib(1.5);
        let err = find_equilibrium(&sys, Phase::PostFault, &p, &DVector::zeros(2), &NewtonOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::NoEquilibriumFound { .. }), "{err}");
    }

    #[test]
    fn fault_phase_jacobian_is_singular() {
        let (sys, p) = smib(0.5);
        let err = find_equilibrium(&sys, Phase::FaultOn, &p, &DVector::zeros(2), &NewtonOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::SingularJacobian { .. }), "{err}");
    }

    #[test]
    fn unstable_equilibrium_classified() {
        let (sys, p) = smib(0.5);
        let guess = DVector::from_vec(vec![2.5, 0.0]);
        let eq = find_equilibrium(&sys, Phase::PostFault, &p, &guess, &NewtonOptions::default()).unwrap();
        assert_relative_eq!(eq.x_s[0], std::f64::consts::PI - 0.5f64.asin(), epsilon = 1e-10);
        assert_eq!(eq.classification, EquilibriumClass::Unstable);
    }

    #[test]
    fn sep_sensitivity_columns() {
        let (sys, p) = smib(0.5);
        let xs = DVector::from_vec(vec![0.5f64.asin(), 0.0]);
        let m4 = sep_sensitivity(&sys, Phase::PreFault, &p, &xs).unwrap();
        assert_relative_eq!(m4[(0, 0)], 1.0 / 0.5f64.asin().cos(), epsilon = 1e-12);
        assert_relative_eq!(m4[(0, 0)], 1.1547005383792515, epsilon = 1e-12);
        for k in 1..4 {
            assert_eq!(m4[(0, k)], 0.0);
            assert_eq!(m4[(1, k)], 0.0);
        }
        // defining identity J M4 + Fp = 0
        let (jx, jp) = sys.field_jacobians(Phase::PreFault, &xs, &p);
        assert!((jx * &m4 + jp).amax() <= 1e-10);
    }

    #[test]
    fn sep_sensitivity_rejects_singular() {
        let (sys, p) = smib(0.5);
        let xs = DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, 0.0]);
        assert!(matches!(
            sep_sensitivity(&sys, Phase::PostFault, &p, &xs),
            Err(Error::SingularJacobian { .. })
        ));
    }

    #[test]
    fn first_order_equilibrium_prediction_is_second_order_accurate() {
        let (sys, p) = smib(0.5);
        let opts = NewtonOptions::default();
        let xs = find_equilibrium(&sys, Phase::PostFault, &p, &DVector::zeros(2), &opts).unwrap().x_s;
        let m4 = sep_sensitivity(&sys, Phase::PostFault, &p, &xs).unwrap();
        let err = |dp: f64| {
            let mut q = p.clone();
            q[0] += dp;
            let exact = find_equilibrium(&sys, Phase::PostFault, &q, &xs, &opts).unwrap().x_s;
            (exact - (&xs + m4.column(0) * dp)).norm()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (sys, p) = smib(0.5);
        let x = DVector::zeros(3);
        assert!(matches!(
            eval_f(&sys, Phase::PostFault, &x, &p),
            Err(Error::DimensionMismatch { what: "state", .. })
        ));
        let short = DVector::zeros(2);
        assert!(matches!(
            eval_jacobians(&sys, Phase::PostFault, &DVector::zeros(2), &short),
            Err(Error::DimensionMismatch { what: "parameters", .. })
        ));
    }
}
