//! Finite-difference and brute-force oracles.
//!
//! Nothing here calls the analytic sensitivity formulas: slopes come from
//! re-running the CCT search at perturbed parameters, trajectory
//! sensitivities from re-integrating perturbed initial conditions, and the
//! reference CCT from a uniform scan over clearing times.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::cct::{classify_clearing_time, compute_cct, prepare, sustained_fault, CctOptions, InstabilityMode};
use crate::error::{Error, Result};
use crate::integrator::{integrate, EventSpec, IntegrationOptions};
use crate::model::{check_dims, ConstrainedSystem, Phase};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub quantity: String,
    pub analytic: f64,
    pub oracle: f64,
    /// `|analytic − oracle| / max(|oracle|, 1e-12)`.
    pub rel_error: f64,
    pub step: f64,
    pub tol: f64,
    /// Absolute error accepted regardless of the relative error.
    pub abs_tol: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(quantity: impl Into<String>, analytic: f64, oracle: f64, step: f64, tol: f64) -> Self {
        Self::with_abs_tol(quantity, analytic, oracle, step, tol, 0.0)
    }

    pub fn with_abs_tol(quantity: impl Into<String>, analytic: f64, oracle: f64, step: f64, tol: f64, abs_tol: f64) -> Self {
        let diff = (analytic - oracle).abs();
        let rel_error = diff / oracle.abs().max(1e-12);
        Self {
            quantity: quantity.into(),
            analytic,
            oracle,
            rel_error,
            step,
            tol,
            abs_tol,
            pass: rel_error <= tol || diff <= abs_tol,
        }
    }
}

/// Default central-difference step for parameter `value`.
pub fn default_fd_step(value: f64) -> f64 {
    (1e-4 * value.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdSlope {
    pub slope: f64,
    pub step: f64,
    pub cct_minus: f64,
    pub cct_plus: f64,
    pub mode: InstabilityMode,
}

/// Central-difference slope of the CCT with respect to `p_k`, with the
/// bisection tolerance tightened to at most `step / 10`.
pub fn fd_cct_slope<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    k: usize,
    eps: Option<f64>,
    opts: &CctOptions,
) -> Result<FdSlope> {
    if k >= sys.param_dim() {
        return Err(Error::InvalidInput(format!("parameter index {k} out of range")));
    }
    let h = eps.unwrap_or_else(|| default_fd_step(p[k]));
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {h}")));
    }
    let mut o = opts.clone();
    o.bisection_tol = o.bisection_tol.min(h / 10.0);
    let at = |sign: f64| {
        let mut q = p.clone();
        q[k] += sign * h;
        compute_cct(sys, &q, &o)
    };
    let (minus, plus) = rayon::join(|| at(-1.0), || at(1.0));
    let (minus, plus) = (minus?, plus?);
    if minus.mode != plus.mode {
        return Err(Error::ModeChangedAcrossStep {
            minus: minus.mode,
            plus: plus.mode,
        });
    }
    Ok(FdSlope {
        slope: (plus.t_cr - minus.t_cr) / (2.0 * h),
        step: h,
        cct_minus: minus.t_cr,
        cct_plus: plus.t_cr,
        mode: plus.mode,
    })
}

fn tight(t: f64) -> IntegrationOptions {
    IntegrationOptions::default().with_t_max(t).with_tolerances(1e-12, 1e-14)
}

/// Central differences of `φ(x0, t, p)` with respect to `x0` (n×n) and to
/// `p_k` (n).
pub fn fd_trajectory_sensitivity<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x0: &DVector<f64>,
    p: &DVector<f64>,
    t: f64,
    k: usize,
    eps: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_dims(sys, x0, p)?;
    if k >= sys.param_dim() {
        return Err(Error::InvalidInput(format!("parameter index {k} out of range")));
    }
    let opts = tight(t);
    let end = |x: &DVector<f64>, q: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(integrate(sys, phase, x, q, &opts, &EventSpec::default())?.final_state().clone())
    };
    let n = x0.len();
    let mut phi_x = DMatrix::zeros(n, n);
    for i in 0..n {
        let h = eps * x0[i].abs().max(1.0);
        let mut a = x0.clone();
        let mut b = x0.clone();
        a[i] += h;
        b[i] -= h;
        phi_x.set_column(i, &((end(&a, p)? - end(&b, p)?) / (2.0 * h)));
    }
    let h = eps * p[k].abs().max(1.0);
    let mut a = p.clone();
    let mut b = p.clone();
    a[k] += h;
    b[k] -= h;
    let phi_p = (end(x0, &a)? - end(x0, &b)?) / (2.0 * h);
    Ok((phi_x, phi_p))
}

/// Central differences of the field Jacobians.
pub fn fd_jacobians<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x: &DVector<f64>,
    p: &DVector<f64>,
    eps: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dims(sys, x, p)?;
    let n = x.len();
    let mut jx = DMatrix::zeros(n, n);
    for i in 0..n {
        let h = eps * x[i].abs().max(1.0);
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += h;
        b[i] -= h;
        jx.set_column(i, &((sys.field(phase, &a, p) - sys.field(phase, &b, p)) / (2.0 * h)));
    }
    let mut jp = DMatrix::zeros(n, p.len());
    for k in 0..p.len() {
        let h = eps * p[k].abs().max(1.0);
        let mut a = p.clone();
        let mut b = p.clone();
        a[k] += h;
        b[k] -= h;
        jp.set_column(k, &((sys.field(phase, x, &a) - sys.field(phase, x, &b)) / (2.0 * h)));
    }
    Ok((jx, jp))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    pub cct: f64,
    pub last_stable: f64,
    pub first_unstable: f64,
    /// Scanned clearing times classified stable after the first unstable one.
    pub violations: Vec<f64>,
    pub points: usize,
}

/// Brute-force CCT: classify clearing times `step, 2·step, …` up to the
/// sustained-fault boundary hit (or the horizon) and return the midpoint
/// between the last stable and the first unstable time.
pub fn scan_cct<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    step: f64,
    opts: &CctOptions,
) -> Result<ScanResult> {
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("scan step must be positive, got {step}")));
    }
    let op = prepare(sys, p, opts)?;
    let t_hit = sustained_fault(sys, p, &op.x_pre, opts)?.crossing().map(|e| e.t);
    let limit = t_hit.unwrap_or(opts.integration.t_max);
    let count = (limit / step).ceil() as usize;
    let times: Vec<f64> = (1..count).map(|i| i as f64 * step).filter(|t| *t < limit).collect();
    let stable: Vec<bool> = times
        .par_iter()
        .map(|&t| classify_clearing_time(sys, p, t, opts).map(|o| o.stable))
        .collect::<Result<_>>()?;

    let first = stable.iter().position(|s| !s);
    let (first_unstable, last_stable) = match (first, t_hit) {
        (Some(i), _) => (times[i], if i == 0 { 0.0 } else { times[i - 1] }),
        (None, Some(t)) => (t, times.last().copied().unwrap_or(0.0)),
        (None, None) => return Err(Error::NoFiniteCct { horizon: opts.integration.t_max }),
    };
    let violations = match first {
        Some(i) => times[i..]
            .iter()
            .zip(&stable[i..])
            .filter(|(_, s)| **s)
            .map(|(t, _)| *t)
            .collect(),
        None => Vec::new(),
    };
    Ok(ScanResult {
        cct: 0.5 * (last_stable + first_unstable),
        last_stable,
        first_unstable,
        violations,
        points: times.len(),
    })
}
