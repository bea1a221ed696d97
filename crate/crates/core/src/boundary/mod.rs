//! Feasibility-boundary analytics.
//!
//! `H = ∏ h_k` is the constraint product of a phase; its zero set is the
//! feasibility boundary. Points on it are equilibria of the transformed field
//! `H·f` (pseudo equilibria) and are classified by the sign of the flow
//! derivative `Ḣ = ∇H·f`.

mod sr_grid;

pub use sr_grid::{
    sample_stability_region, AnnotationKind, BoundaryAnnotation, GridSpec, SrCell, SrCellClass, SrGrid,
};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{check_dims, ConstrainedSystem, Phase};

/// Value and first derivatives of a constraint product.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryProduct {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub grad_p: DVector<f64>,
}

/// Fault/post-fault combined boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedBoundary {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub grad_p: DVector<f64>,
    /// Constraints multiplied together, as `(phase, name)`.
    pub members: Vec<(Phase, String)>,
    /// Fault-phase constraints dropped because the post-fault phase has one
    /// with the same name.
    pub excluded: Vec<String>,
}

fn phase_members<S: ConstrainedSystem + ?Sized>(sys: &S, phase: Phase) -> Vec<(Phase, usize)> {
    (0..sys.constraint_names(phase).len()).map(|k| (phase, k)).collect()
}

/// Post-fault constraints plus the fault-phase constraints not duplicated
/// in the post-fault list.
pub(crate) fn combined_members<S: ConstrainedSystem + ?Sized>(sys: &S) -> Vec<(Phase, usize)> {
    let post = sys.constraint_names(Phase::PostFault);
    let mut members = phase_members(sys, Phase::PostFault);
    members.extend(
        sys.constraint_names(Phase::FaultOn)
            .iter()
            .enumerate()
            .filter(|(_, name)| !post.contains(name))
            .map(|(k, _)| (Phase::FaultOn, k)),
    );
    members
}

fn product<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    members: &[(Phase, usize)],
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> BoundaryProduct {
    let values: Vec<f64> = members.iter().map(|&(ph, k)| sys.constraint(ph, k, x, p)).collect();
    let mut grad_x = DVector::zeros(x.len());
    let mut grad_p = DVector::zeros(p.len());
    for (i, &(ph, k)) in members.iter().enumerate() {
        let others: f64 = values
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| v)
            .product();
        if others != 0.0 {
            let (gx, gp) = sys.constraint_gradients(ph, k, x, p);
            grad_x += gx * others;
            grad_p += gp * others;
        }
    }
    BoundaryProduct {
        value: values.iter().product(),
        grad_x,
        grad_p,
    }
}

fn product_hessians<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    members: &[(Phase, usize)],
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, np) = (x.len(), p.len());
    let values: Vec<f64> = members.iter().map(|&(ph, k)| sys.constraint(ph, k, x, p)).collect();
    let grads: Vec<_> = members
        .iter()
        .map(|&(ph, k)| sys.constraint_gradients(ph, k, x, p))
        .collect();
    let rest = |skip: &[usize]| -> f64 {
        values
            .iter()
            .enumerate()
            .filter(|(j, _)| !skip.contains(j))
            .map(|(_, v)| v)
            .product()
    };
    let mut hxx = DMatrix::zeros(n, n);
    let mut hxp = DMatrix::zeros(n, np);
    for (i, &(ph, k)) in members.iter().enumerate() {
        let (kxx, kxp) = sys
            .constraint_hessians(ph, k, x, p)
            .ok_or_else(|| Error::MissingSecondDerivatives {
                constraint: sys.constraint_names(ph)[k].clone(),
            })?;
        let r = rest(&[i]);
        hxx += kxx * r;
        hxp += kxp * r;
        for l in 0..members.len() {
            if l == i {
                continue;
            }
            let r = rest(&[i, l]);
            hxx += &grads[i].0 * grads[l].0.transpose() * r;
            hxp += &grads[i].0 * grads[l].1.transpose() * r;
        }
    }
    Ok((hxx, hxp))
}

pub(crate) fn h_and_gradients<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> (f64, DVector<f64>, DVector<f64>) {
    let b = product(sys, &phase_members(sys, phase), x, p);
    (b.value, b.grad_x, b.grad_p)
}

pub(crate) fn combined_h_unchecked<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> BoundaryProduct {
    product(sys, &combined_members(sys), x, p)
}

/// `H = ∏ h_k` over the constraints of `phase` (1 when there are none).
pub fn eval_h<S: ConstrainedSystem + ?Sized>(sys: &S, phase: Phase, x: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
    check_dims(sys, x, p)?;
    Ok((0..sys.constraint_names(phase).len())
        .map(|k| sys.constraint(phase, k, x, p))
        .product())
}

/// `(∂H/∂x, ∂H/∂p)` by the product rule.
pub fn eval_h_gradients<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dims(sys, x, p)?;
    let (_, gx, gp) = h_and_gradients(sys, phase, x, p);
    Ok((gx, gp))
}

/// `(∂²H/∂x², ∂²H/∂x∂p)`.
pub fn eval_h_hessians<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dims(sys, x, p)?;
    product_hessians(sys, &phase_members(sys, phase), x, p)
}

pub fn eval_h_dot<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<f64> {
    check_dims(sys, x, p)?;
    let (_, gx, _) = h_and_gradients(sys, phase, x, p);
    Ok(gx.dot(&sys.field(phase, x, p)))
}

/// `(∂Ḣ/∂x, ∂Ḣ/∂p)` with `∂Ḣ/∂x = H_xx f + J_xᵀ ∇H` and
/// `∂Ḣ/∂p = H_xpᵀ f + J_pᵀ ∇H`.
pub fn eval_h_dot_gradients<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dims(sys, x, p)?;
    let (_, gx, _) = h_and_gradients(sys, phase, x, p);
    let (hxx, hxp) = product_hessians(sys, &phase_members(sys, phase), x, p)?;
    let f = sys.field(phase, x, p);
    let (jx, jp) = sys.field_jacobians(phase, x, p);
    Ok((&hxx * &f + jx.transpose() * &gx, hxp.transpose() * &f + jp.transpose() * &gx))
}

/// `H(x, p)·f(x, p)`.
pub fn transformed_field<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<DVector<f64>> {
    let h = eval_h(sys, phase, x, p)?;
    Ok(sys.field(phase, x, p) * h)
}

/// Fault/post-fault combined boundary `H^fault × H^post`, with fault-phase
/// constraints that share a name with a post-fault constraint left out.
pub fn combined_h<S: ConstrainedSystem + ?Sized>(sys: &S, x: &DVector<f64>, p: &DVector<f64>) -> Result<CombinedBoundary> {
    check_dims(sys, x, p)?;
    let members = combined_members(sys);
    if members.is_empty() {
        return Err(Error::EmptyCombinedBoundary);
    }
    let post = sys.constraint_names(Phase::PostFault);
    let excluded = sys
        .constraint_names(Phase::FaultOn)
        .iter()
        .filter(|n| post.contains(n))
        .cloned()
        .collect();
    let b = product(sys, &members, x, p);
    Ok(CombinedBoundary {
        value: b.value,
        grad_x: b.grad_x,
        grad_p: b.grad_p,
        members: members
            .iter()
            .map(|&(ph, k)| (ph, sys.constraint_names(ph)[k].clone()))
            .collect(),
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PseudoEpKind {
    StablePseudoEp,
    UnstablePseudoEp,
    SemiSaddle,
    NotOnBoundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PseudoEpClass {
    pub kind: PseudoEpKind,
    pub h_value: f64,
    pub h_dot_value: f64,
    /// `Ḣ / (‖∂H/∂x‖·‖f‖)`, zero when either norm vanishes.
    pub h_dot_normalized: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoEpTolerances {
    /// `|H|` at or below this counts as on the boundary.
    pub boundary: f64,
    /// Bound on the normalized `|Ḣ|` for a semi-saddle.
    pub semi_saddle: f64,
}

impl Default for PseudoEpTolerances {
    fn default() -> Self {
        Self {
            boundary: 1e-8,
            semi_saddle: 1e-6,
        }
    }
}

pub fn classify_pseudo_ep<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x: &DVector<f64>,
    p: &DVector<f64>,
    tol: &PseudoEpTolerances,
) -> Result<PseudoEpClass> {
    check_dims(sys, x, p)?;
    let (h, gx, _) = h_and_gradients(sys, phase, x, p);
    let f = sys.field(phase, x, p);
    let h_dot = gx.dot(&f);
    let scale = gx.norm() * f.norm();
    let h_dot_normalized = if scale > 0.0 { h_dot / scale } else { 0.0 };
    let kind = if h.abs() > tol.boundary {
        PseudoEpKind::NotOnBoundary
    } else if h_dot_normalized.abs() <= tol.semi_saddle {
        PseudoEpKind::SemiSaddle
    } else if h_dot < 0.0 {
        PseudoEpKind::StablePseudoEp
    } else {
        PseudoEpKind::UnstablePseudoEp
    };
    Ok(PseudoEpClass {
        kind,
        h_value: h,
        h_dot_value: h_dot,
        h_dot_normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstraintDef, ExprPhaseDef, ExprSystem, ExprSystemDef, NamedValue, Smib, SmibParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn smib() -> (Smib, DVector<f64>) {
        let params = SmibParams {
            pm: 0.5,
            m: 0.1,
            delta_max: 2.0,
            omega_max: 1.5,
            ..SmibParams::default()
        };
        (Smib::new(params), params.param_vector())
    }

    fn v(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn fd_grad(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(at.len(), |i, _| {
            let h = 1e-6 * at[i].abs().max(1.0);
            let mut a = at.clone();
            let mut b = at.clone();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
    }

    /// Two-state system whose fault and post phases carry different constraints.
    fn split_system() -> ExprSystem {
        let phase = |cs: Vec<(&str, &str)>| ExprPhaseDef {
            field: vec!["x2".into(), "-sin(x1) - 0.3*x2 + k".into()],
            constraints: cs
                .into_iter()
                .map(|(n, e)| ConstraintDef {
                    name: n.into(),
                    expr: e.into(),
                })
                .collect(),
        };
        ExprSystem::new(&ExprSystemDef {
            states: vec!["x1".into(), "x2".into()],
            params: vec![
                NamedValue { name: "k".into(), value: 0.2 },
                NamedValue { name: "c".into(), value: 1.5 },
            ],
            constants: Default::default(),
            pre: phase(vec![]),
            fault: phase(vec![("a", "c - x1^2"), ("shared", "2 - x2")]),
            post: phase(vec![("b", "1 + x1 - x2*x2"), ("shared", "2 - x2")]),
        })
        .unwrap()
    }

    #[test]
    fn h_values() {
        let (sys, p) = smib();
        assert_relative_eq!(eval_h(&sys, Phase::PostFault, &v(0.5, 0.5), &p).unwrap(), 1.5);
        assert_eq!(eval_h(&sys, Phase::PostFault, &v(2.0, 0.3), &p).unwrap(), 0.0);
        assert_eq!(eval_h(&sys, Phase::PostFault, &v(0.3, 1.5), &p).unwrap(), 0.0);
        assert_relative_eq!(eval_h(&sys, Phase::PostFault, &v(2.5, 0.5), &p).unwrap(), -0.5);
    }

    #[test]
    fn h_gradient_on_speed_limit() {
        let (sys, p) = smib();
        let (gx, gp) = eval_h_gradients(&sys, Phase::PostFault, &v(0.5, 1.5), &p).unwrap();
        assert_eq!(gx[0], 0.0);
        assert_relative_eq!(gx[1], -1.5);
        assert_eq!(gp[2], 0.0);
        assert_relative_eq!(gp[3], 1.5);
    }

    #[test]
    fn h_dot_hand_value() {
        let (sys, p) = smib();
        let x = v(0.5, 1.5);
        let hd = eval_h_dot(&sys, Phase::PostFault, &x, &p).unwrap();
        let expected = -1.5 * ((0.5 - 0.5f64.sin() - 0.75) / 0.1);
        assert_relative_eq!(hd, expected, epsilon = 1e-12);
        assert!((hd - 10.94).abs() < 0.01);
        let c = classify_pseudo_ep(&sys, Phase::PostFault, &x, &p, &PseudoEpTolerances::default()).unwrap();
        assert_eq!(c.kind, PseudoEpKind::UnstablePseudoEp);
        let xs = v(0.5f64.asin(), 0.0);
        assert!(eval_h_dot(&sys, Phase::PostFault, &xs, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn off_boundary_point() {
        let (sys, p) = smib();
        // (2 - 1.3)(1.5 - 0.5) = 0.7
        let c = classify_pseudo_ep(&sys, Phase::PostFault, &v(1.3, 0.5), &p, &PseudoEpTolerances::default()).unwrap();
        assert_relative_eq!(c.h_value, 0.7, epsilon = 1e-12);
        assert_eq!(c.kind, PseudoEpKind::NotOnBoundary);
    }

    #[test]
    fn semi_saddle_on_speed_limit() {
        let (sys, p) = smib();
        // Pm − sin x1 − D ω_max = 0 on x2 = ω_max
        let x1 = (0.5 - 0.5 * 1.5f64).asin();
        let x = v(x1, 1.5);
        let c = classify_pseudo_ep(&sys, Phase::PostFault, &x, &p, &PseudoEpTolerances::default()).unwrap();
        assert_eq!(c.kind, PseudoEpKind::SemiSaddle);
        assert!(c.h_value.abs() <= 1e-8 && c.h_dot_normalized.abs() <= 1e-6);
    }

    #[test]
    fn transformed_field_scaling() {
        let (sys, p) = smib();
        for (x, sign) in [(v(0.5, 0.5), 1.0), (v(2.5, 0.5), -1.0)] {
            let g = transformed_field(&sys, Phase::PostFault, &x, &p).unwrap();
            let f = sys.field(Phase::PostFault, &x, &p);
            let ratio = g.dot(&f) / f.norm_squared();
            assert!(ratio * sign > 0.0);
            assert!((g - f * ratio).norm() < 1e-12);
        }
        assert_eq!(transformed_field(&sys, Phase::PostFault, &v(2.0, 0.1), &p).unwrap().norm(), 0.0);
    }

    #[test]
    fn smib_combined_boundary_drops_fault_duplicates() {
        let (sys, p) = smib();
        let x = v(0.7, 0.4);
        let c = combined_h(&sys, &x, &p).unwrap();
        assert_eq!(c.excluded, vec!["angle".to_string(), "speed".to_string()]);
        assert_eq!(c.members.len(), 2);
        assert!(c.members.iter().all(|(ph, _)| *ph == Phase::PostFault));
        assert_relative_eq!(c.value, eval_h(&sys, Phase::PostFault, &x, &p).unwrap());
    }

    #[test]
    fn disjoint_combined_boundary_product_rule() {
        let sys = split_system();
        let p = sys.nominal_params().clone();
        let x = v(0.4, -0.3);
        let c = combined_h(&sys, &x, &p).unwrap();
        let a = 1.5 - 0.16;
        let b = 1.0 + 0.4 - 0.09;
        let s = 2.3;
        assert_relative_eq!(c.value, a * b * s, epsilon = 1e-12);
        assert_eq!(c.excluded, vec!["shared".to_string()]);
        let value = |x: &DVector<f64>| combined_h(&sys, x, &p).unwrap().value;
        let fd = fd_grad(value, &x);
        assert!((c.grad_x.clone() - fd).norm() <= 1e-6 * c.grad_x.norm());
        let value_p = |q: &DVector<f64>| combined_h(&sys, &x, q).unwrap().value;
        let fdp = fd_grad(value_p, &p);
        assert!((c.grad_p - &fdp).norm() <= 1e-6 * fdp.norm());
    }

    #[test]
    fn empty_combined_boundary() {
        let bare = ExprSystem::new(&ExprSystemDef {
            states: vec!["x".into()],
            params: vec![],
            constants: Default::default(),
            pre: ExprPhaseDef { field: vec!["-x".into()], constraints: vec![] },
            fault: ExprPhaseDef { field: vec!["1".into()], constraints: vec![] },
            post: ExprPhaseDef { field: vec!["-x".into()], constraints: vec![] },
        })
        .unwrap();
        assert!(matches!(
            combined_h(&bare, &DVector::zeros(1), &DVector::zeros(0)),
            Err(Error::EmptyCombinedBoundary)
        ));
    }

    #[test]
    fn h_dot_gradients_match_finite_differences() {
        let sys = split_system();
        let p = sys.nominal_params().clone();
        let x = v(0.3, 0.6);
        let (gx, gp) = eval_h_dot_gradients(&sys, Phase::PostFault, &x, &p).unwrap();
        let fx = fd_grad(|y| eval_h_dot(&sys, Phase::PostFault, y, &p).unwrap(), &x);
        let fp = fd_grad(|q| eval_h_dot(&sys, Phase::PostFault, &x, q).unwrap(), &p);
        assert!((gx - &fx).norm() <= 1e-6 * fx.norm());
        assert!((gp - &fp).norm() <= 1e-6 * fp.norm().max(1e-8));

        let (hxx, _) = eval_h_hessians(&sys, Phase::PostFault, &x, &p).unwrap();
        assert!((hxx.clone() - hxx.transpose()).norm() < 1e-12);
    }

    #[test]
    fn single_constraint_gradient_is_constraint_gradient() {
        let sys = split_system();
        let p = sys.nominal_params().clone();
        let x = v(0.3, 0.6);
        let (gx, _) = eval_h_gradients(&sys, Phase::PreFault, &x, &p).unwrap();
        assert_eq!(gx, DVector::zeros(2));
        let one = ExprSystem::new(&ExprSystemDef {
            states: vec!["x1".into(), "x2".into()],
            params: vec![],
            constants: Default::default(),
            pre: ExprPhaseDef { field: vec!["x2".into(), "-x1".into()], constraints: vec![] },
            fault: ExprPhaseDef { field: vec!["x2".into(), "-x1".into()], constraints: vec![] },
            post: ExprPhaseDef {
                field: vec!["x2".into(), "-x1".into()],
                constraints: vec![ConstraintDef { name: "only".into(), expr: "1 - x1^2 - 3*x2".into() }],
            },
        })
        .unwrap();
        let q = DVector::zeros(0);
        for x in [v(0.3, 0.6), v(-1.0, 2.0)] {
            let (gx, _) = eval_h_gradients(&one, Phase::PostFault, &x, &q).unwrap();
            let (hx, _) = one.constraint_gradients(Phase::PostFault, 0, &x, &q);
            assert_eq!(gx, hx);
        }
    }

    proptest! {
        #[test]
        fn sign_semantics(x1 in -4.0f64..4.0, x2 in -3.0f64..3.0) {
            let (sys, p) = smib();
            let x = v(x1, x2);
            let h = eval_h(&sys, Phase::PostFault, &x, &p).unwrap();
            let hs = [2.0 - x1, 1.5 - x2];
            let violated = hs.iter().filter(|v| **v < 0.0).count();
            if hs.contains(&0.0) {
                prop_assert_eq!(h, 0.0);
            } else {
                prop_assert_eq!(h < 0.0, violated % 2 == 1);
                prop_assert_eq!(h > 0.0, violated % 2 == 0);
            }
        }

        #[test]
        fn gradients_match_fd(x1 in -2.0f64..2.0, x2 in -1.0f64..1.0) {
            let (sys, p) = smib();
            let x = v(x1, x2);
            let (gx, gp) = eval_h_gradients(&sys, Phase::PostFault, &x, &p).unwrap();
            let fx = fd_grad(|y| eval_h(&sys, Phase::PostFault, y, &p).unwrap(), &x);
            let fp = fd_grad(|q| eval_h(&sys, Phase::PostFault, &x, q).unwrap(), &p);
            prop_assert!((gx - &fx).norm() <= 1e-6 * fx.norm().max(1e-6));
            prop_assert!((gp - &fp).norm() <= 1e-6 * fp.norm().max(1e-6));
        }
    }
}
