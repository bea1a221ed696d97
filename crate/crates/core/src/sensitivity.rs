//! First-order sensitivity of the critical clearing time to one parameter
//! component at a time.
//!
//! With `x_cl = φ^fault(x_s^pre(p), t_cl, p)` the clearing state moves as
//!
//! ```text
//! dx_cl = (M1·M4 + M3) dp + M2 dt_cl
//! ```
//!
//! In mode 1 the critical clearing state stays on the combined boundary,
//! `H^comb(x_cl, p) = 0`, which gives
//!
//! ```text
//! dt_cl/dp = (M6 − M5·(M1·M4 + M3)) / (M5·M2)
//! ```
//!
//! with `M5 = ∂H^comb/∂x` and `M6 = −∂H^comb/∂p`. In mode 2 the critical
//! post-fault trajectory touches the boundary tangentially at `x_T`, so both
//! `H^post(x_T) = 0` and `Ḣ^post(x_T) = 0` persist. With `O4 = [∂H/∂x; ∂Ḣ/∂x]`
//! and `O5 = −[∂H/∂p; ∂Ḣ/∂p]`:
//!
//! ```text
//! O4·[O1·M2  O2]·[dt_cl/dp; dT/dp] = O5 − O4·(O3 + O1·(M1·M4 + M3))
//! ```

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::Serialize;

use crate::boundary::{self, classify_pseudo_ep, combined_h, PseudoEpKind, PseudoEpTolerances};
use crate::cct::{compute_cct, CctOptions, CriticalResult, InstabilityMode};
use crate::error::{Error, Result};
use crate::integrator::{integrate, integrate_with_sensitivities, EventSpec};
use crate::model::{sep_sensitivity, ConstrainedSystem, Phase};

#[derive(Debug, Clone, PartialEq)]
pub struct FaultSensitivityMatrices {
    /// `∂φ^fault/∂x0` at `t_cr`.
    pub m1: DMatrix<f64>,
    /// `f^fault(x_cr)`.
    pub m2: DVector<f64>,
    /// `∂φ^fault/∂p_k` at `t_cr`.
    pub m3: DVector<f64>,
    /// `∂x_s^pre/∂p_k`.
    pub m4: DVector<f64>,
}

impl FaultSensitivityMatrices {
    /// Sensitivity of the clearing state at fixed clearing time, `M1·M4 + M3`.
    pub fn fixed_time_state_sensitivity(&self) -> DVector<f64> {
        &self.m1 * &self.m4 + &self.m3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostSensitivityMatrices {
    /// `∂φ^post/∂x0` from `x_cr` at `T`.
    pub o1: DMatrix<f64>,
    /// `f^post(x_T)`.
    pub o2: DVector<f64>,
    /// `∂φ^post/∂p_k` at `T`.
    pub o3: DVector<f64>,
    pub t_limit: f64,
    pub x_limit: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CctSensitivity {
    pub param_index: usize,
    pub param_name: String,
    pub mode: InstabilityMode,
    pub dtcl_dp: f64,
    /// `dT/dp`, mode 2 only.
    pub dt_limit_dp: Option<f64>,
    /// `M5·M2` in mode 1, the determinant of the 2×2 system in mode 2.
    pub pivot: f64,
    pub warnings: Vec<String>,
}

fn check_param<S: ConstrainedSystem + ?Sized>(sys: &S, k: usize) -> Result<()> {
    if k >= sys.param_dim() {
        return Err(Error::InvalidInput(format!(
            "parameter index {k} out of range for {} parameters",
            sys.param_dim()
        )));
    }
    Ok(())
}

pub fn fault_matrices<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    critical: &CriticalResult,
    k: usize,
    opts: &CctOptions,
) -> Result<FaultSensitivityMatrices> {
    check_param(sys, k)?;
    let x_pre = &critical.operating_point.x_pre;
    let iopts = opts.integration.with_t_max(critical.t_cr);
    let (_, bundle) = integrate_with_sensitivities(sys, Phase::FaultOn, x_pre, p, &iopts)?;
    let m4 = sep_sensitivity(sys, Phase::PreFault, p, x_pre)?;
    Ok(FaultSensitivityMatrices {
        m1: bundle.final_phi_x().clone(),
        m2: sys.field(Phase::FaultOn, &critical.x_cr, p),
        m3: bundle.final_phi_p().column(k).into_owned(),
        m4: m4.column(k).into_owned(),
    })
}

/// Time of the boundary contact of the post-fault run from `x_cr`: the local
/// minimum of `H^post` nearest to the recorded limit time.
fn tangency_time<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    critical: &CriticalResult,
    opts: &CctOptions,
) -> Result<Option<f64>> {
    let t_guess = critical.t_limit;
    let t_end = (t_guess + 0.5 * t_guess.max(0.2)).min(opts.integration.t_max);
    let mut iopts = opts.integration.with_t_max(t_end);
    iopts.max_step = iopts.max_step.min(1e-3 * t_end.max(1.0));
    let traj = integrate(sys, Phase::PostFault, &critical.x_cr, p, &iopts, &EventSpec::default())?;
    let h_dot = |x: &DVector<f64>| -> f64 {
        let (_, g, _) = boundary::h_and_gradients(sys, Phase::PostFault, x, p);
        g.dot(&sys.field(Phase::PostFault, x, p))
    };
    let signs: Vec<f64> = traj.states.iter().map(h_dot).collect();
    let candidate = (1..traj.times.len())
        .filter(|&i| signs[i - 1] < 0.0 && signs[i] >= 0.0)
        .min_by(|&a, &b| {
            (traj.times[a] - t_guess)
                .abs()
                .total_cmp(&(traj.times[b] - t_guess).abs())
        });
    let Some(i) = candidate else {
        return Ok(None);
    };
    let (mut lo, mut hi) = (traj.times[i - 1], traj.times[i]);
    for _ in 0..80 {
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if h_dot(&traj.state_at(mid)?) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

pub fn post_matrices<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    critical: &CriticalResult,
    k: usize,
    opts: &CctOptions,
) -> Result<PostSensitivityMatrices> {
    check_param(sys, k)?;
    let t_limit = match critical.mode {
        InstabilityMode::Mode2PostHitsBoundary => tangency_time(sys, p, critical, opts)?.unwrap_or(critical.t_limit),
        _ => critical.t_limit,
    };
    let iopts = opts.integration.with_t_max(t_limit);
    let (traj, bundle) = integrate_with_sensitivities(sys, Phase::PostFault, &critical.x_cr, p, &iopts)?;
    let x_limit = traj.final_state().clone();
    Ok(PostSensitivityMatrices {
        o1: bundle.final_phi_x().clone(),
        o2: sys.field(Phase::PostFault, &x_limit, p),
        o3: bundle.final_phi_p().column(k).into_owned(),
        t_limit,
        x_limit,
    })
}

pub fn cct_sensitivity_mode1<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    critical: &CriticalResult,
    k: usize,
    opts: &CctOptions,
) -> Result<CctSensitivity> {
    if critical.mode != InstabilityMode::Mode1FaultHitsBoundary {
        return Err(Error::InvalidInput(format!("mode-1 sensitivity requested for a {} result", critical.mode)));
    }
    let fm = fault_matrices(sys, p, critical, k, opts)?;
    let comb = combined_h(sys, &critical.x_cr, p)?;
    let m5 = &comb.grad_x;
    let m6 = -comb.grad_p[k];
    let pivot = m5.dot(&fm.m2);
    if !(pivot.abs() >= 1e-8 * m5.norm() * fm.m2.norm()) || pivot == 0.0 {
        return Err(Error::TangentialIntersection { pivot });
    }
    let dtcl_dp = (m6 - m5.dot(&fm.fixed_time_state_sensitivity())) / pivot;
    Ok(CctSensitivity {
        param_index: k,
        param_name: sys.param_names()[k].clone(),
        mode: critical.mode,
        dtcl_dp,
        dt_limit_dp: None,
        pivot,
        warnings: Vec::new(),
    })
}

pub fn cct_sensitivity_mode2<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    critical: &CriticalResult,
    k: usize,
    opts: &CctOptions,
) -> Result<CctSensitivity> {
    if critical.mode != InstabilityMode::Mode2PostHitsBoundary {
        return Err(Error::InvalidInput(format!("mode-2 sensitivity requested for a {} result", critical.mode)));
    }
    let fm = fault_matrices(sys, p, critical, k, opts)?;
    let pm = post_matrices(sys, p, critical, k, opts)?;
    let x_t = &pm.x_limit;
    let (hx, hp) = boundary::eval_h_gradients(sys, Phase::PostFault, x_t, p)?;
    let (hdx, hdp) = boundary::eval_h_dot_gradients(sys, Phase::PostFault, x_t, p)?;

    let o4 = DMatrix::from_rows(&[hx.transpose(), hdx.transpose()]);
    let o5 = -Vector2::new(hp[k], hdp[k]);
    let lhs_cols = DMatrix::from_columns(&[&pm.o1 * &fm.m2, pm.o2.clone()]);
    let a_dyn = &o4 * lhs_cols;
    let a = Matrix2::new(a_dyn[(0, 0)], a_dyn[(0, 1)], a_dyn[(1, 0)], a_dyn[(1, 1)]);
    let rhs_dyn = &o4 * (&pm.o3 + &pm.o1 * fm.fixed_time_state_sensitivity());
    let b = o5 - Vector2::new(rhs_dyn[0], rhs_dyn[1]);

    let det = a.determinant();
    let scale = a.norm_squared();
    if !det.is_finite() || det.abs() <= 1e-12 * scale {
        return Err(Error::DegenerateGeometry { det });
    }
    let sol = a.lu().solve(&b).ok_or(Error::DegenerateGeometry { det })?;

    let mut warnings = Vec::new();
    let relaxed = PseudoEpTolerances {
        boundary: 1e-3 * critical.operating_point.h_ref,
        semi_saddle: 1e-3,
    };
    let c = classify_pseudo_ep(sys, Phase::PostFault, x_t, p, &relaxed)?;
    if c.kind != PseudoEpKind::SemiSaddle {
        warnings.push(format!(
            "limit point is not a semi-saddle within relaxed tolerance (H = {:.3e}, normalized H_dot = {:.3e})",
            c.h_value, c.h_dot_normalized
        ));
    }
    Ok(CctSensitivity {
        param_index: k,
        param_name: sys.param_names()[k].clone(),
        mode: critical.mode,
        dtcl_dp: sol[0],
        dt_limit_dp: Some(sol[1]),
        pivot: det,
        warnings,
    })
}

/// Dispatch on the instability mode; mode 3 is not supported.
pub fn cct_sensitivity<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    critical: &CriticalResult,
    k: usize,
    opts: &CctOptions,
) -> Result<CctSensitivity> {
    match critical.mode {
        InstabilityMode::Mode1FaultHitsBoundary => cct_sensitivity_mode1(sys, p, critical, k, opts),
        InstabilityMode::Mode2PostHitsBoundary => cct_sensitivity_mode2(sys, p, critical, k, opts),
        mode @ InstabilityMode::Mode3NoReturn => Err(Error::UnsupportedMode(mode)),
    }
}

/// Sensitivities for several parameter components, evaluated concurrently.
pub fn cct_sensitivities<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    critical: &CriticalResult,
    ks: &[usize],
    opts: &CctOptions,
) -> Vec<Result<CctSensitivity>> {
    ks.par_iter().map(|&k| cct_sensitivity(sys, p, critical, k, opts)).collect()
}

/// Recompute the CCT with `p_k` moved by `±rel` (relative, floor 1e-6
/// absolute) and report a warning when the instability mode differs.
pub fn probe_mode_switch<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    k: usize,
    mode: InstabilityMode,
    rel: f64,
    opts: &CctOptions,
) -> Result<Option<String>> {
    check_param(sys, k)?;
    let h = rel * p[k].abs().max(1e-6);
    let probe = |sign: f64| {
        let mut q = p.clone();
        q[k] += sign * h;
        (q[k], compute_cct(sys, &q, opts))
    };
    let (minus, plus) = rayon::join(|| probe(-1.0), || probe(1.0));
    let mut notes = Vec::new();
    for (value, r) in [minus, plus] {
        match r {
            Ok(c) if c.mode != mode => notes.push(format!(
                "{} changes to {} at {} = {value}",
                mode,
                c.mode,
                sys.param_names()[k]
            )),
            Ok(_) => {}
            Err(e) => notes.push(format!("CCT fails at {} = {value}: {e}", sys.param_names()[k])),
        }
    }
    Ok(if notes.is_empty() {
        None
    } else {
        Some(format!("near a mode switch: {}", notes.join("; ")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::smib::{DELTA_MAX, INERTIA, OMEGA_MAX, PM};
    use crate::model::{Smib, SmibParams};
    use approx::assert_relative_eq;

    fn smib(m: f64) -> (Smib, DVector<f64>) {
        let params = SmibParams {
            pm: 0.5,
            m,
            delta_max: 0.8,
            omega_max: 0.6,
            ..SmibParams::default()
        };
        (Smib::new(params), params.param_vector())
    }

    /// Closed-form mode-1 CCT: speed limit reached during the sustained fault.
    fn t_hit(p: &DVector<f64>) -> f64 {
        let (pm, m, w) = (p[PM], p[INERTIA], p[OMEGA_MAX]);
        -(m / 0.5) * (1.0 - 0.5 * w / pm).ln()
    }

    #[test]
    fn mode_one_matches_closed_form_derivatives() {
        let (sys, p) = smib(0.1);
        let opts = CctOptions::precise();
        let crit = compute_cct(&sys, &p, &opts).unwrap();
        assert_eq!(crit.mode, InstabilityMode::Mode1FaultHitsBoundary);
        let u = 0.5 * 0.6 / 0.5;
        let t = t_hit(&p);
        let expected = [
            -(0.1 / 0.5) * u / (0.5 * (1.0 - u)),
            t / 0.1,
            0.0,
            0.1 / (0.5 * (1.0 - u)),
        ];
        for (k, e) in expected.iter().enumerate() {
            let s = cct_sensitivity(&sys, &p, &crit, k, &opts).unwrap();
            assert_relative_eq!(s.dtcl_dp, *e, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn constraint_only_parameters_have_zero_dynamics_terms() {
        let (sys, p) = smib(0.1);
        let opts = CctOptions::precise();
        let crit = compute_cct(&sys, &p, &opts).unwrap();
        for k in [DELTA_MAX, OMEGA_MAX] {
            let fm = fault_matrices(&sys, &p, &crit, k, &opts).unwrap();
            assert_eq!(fm.m3.amax(), 0.0);
            assert_eq!(fm.m4.amax(), 0.0);
        }
        let s = cct_sensitivity(&sys, &p, &crit, DELTA_MAX, &opts).unwrap();
        assert!(s.dtcl_dp.abs() < 1e-8);
        let fm = fault_matrices(&sys, &p, &crit, PM, &opts).unwrap();
        assert_eq!(fm.m2, sys.field(Phase::FaultOn, &crit.x_cr, &p));
    }

    #[test]
    fn mode_two_signs_and_zero_parameters() {
        let (sys, p) = smib(0.3);
        let opts = CctOptions::precise();
        let crit = compute_cct(&sys, &p, &opts).unwrap();
        assert_eq!(crit.mode, InstabilityMode::Mode2PostHitsBoundary);
        let s = cct_sensitivity(&sys, &p, &crit, INERTIA, &opts).unwrap();
        assert!(s.dtcl_dp > 0.0, "{s:?}");
        assert!(s.dt_limit_dp.is_some());
        // the speed limit is inactive at the angle-limit contact
        let w = cct_sensitivity(&sys, &p, &crit, OMEGA_MAX, &opts).unwrap();
        assert!(w.dtcl_dp.abs() < 1e-4, "{w:?}");
        for k in [DELTA_MAX, OMEGA_MAX] {
            let pm = post_matrices(&sys, &p, &crit, k, &opts).unwrap();
            assert_eq!(pm.o3.amax(), 0.0);
        }
    }

    #[test]
    fn mode_three_is_unsupported() {
        let params = SmibParams {
            delta_max: 100.0,
            omega_max: 100.0,
            ..SmibParams::default()
        };
        let (sys, p) = (Smib::new(params), params.param_vector());
        let crit = compute_cct(&sys, &p, &CctOptions::default()).unwrap();
        assert!(matches!(
            cct_sensitivity(&sys, &p, &crit, PM, &CctOptions::default()),
            Err(Error::UnsupportedMode(InstabilityMode::Mode3NoReturn))
        ));
    }

    #[test]
    fn parameter_index_checked() {
        let (sys, p) = smib(0.1);
        let opts = CctOptions::default();
        let crit = compute_cct(&sys, &p, &opts).unwrap();
        assert!(matches!(cct_sensitivity(&sys, &p, &crit, 7, &opts), Err(Error::InvalidInput(_))));
    }
}
