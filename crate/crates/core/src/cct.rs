//! Critical clearing time by bisection over the fault duration.
//!
//! Each candidate clearing time `t_cl` is judged by integrating the fault-on
//! system from the pre-fault equilibrium to `t_cl` and then the post-fault
//! system from the clearing state. A post-fault run is stable when it reaches
//! the post-fault equilibrium without touching the feasibility boundary.
//! Unstable runs record the limit-approach point `(T, x_T)`: the first
//! boundary contact `t1` or the first near-zero local minimum of `‖f‖` (an
//! approach to an unstable equilibrium) `t2`, whichever comes first.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::boundary::{self, combined_h};
use crate::error::{Error, Result};
use crate::integrator::{
    integrate, BoundarySource, BoundaryWatch, EventSpec, IntegrationOptions, SepWatch, Trajectory,
};
use crate::model::{classify_jacobian, find_equilibrium, ConstrainedSystem, EquilibriumClass, NewtonOptions, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstabilityMode {
    /// The sustained fault trajectory reaches the feasibility boundary.
    Mode1FaultHitsBoundary,
    /// The post-fault trajectory reaches the feasibility boundary.
    Mode2PostHitsBoundary,
    /// The post-fault trajectory does not return to the equilibrium.
    Mode3NoReturn,
}

impl InstabilityMode {
    pub fn number(self) -> u8 {
        match self {
            InstabilityMode::Mode1FaultHitsBoundary => 1,
            InstabilityMode::Mode2PostHitsBoundary => 2,
            InstabilityMode::Mode3NoReturn => 3,
        }
    }
}

impl fmt::Display for InstabilityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mode {}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CctOptions {
    pub integration: IntegrationOptions,
    pub bisection_tol: f64,
    /// Boundary contact threshold on `H^post / H^post(x_pre)`.
    pub boundary_threshold: f64,
    /// `‖f^post‖` at or below this marks an approach to an unstable equilibrium.
    pub norm_min_threshold: f64,
    /// Radius of the convergence ball around the post-fault equilibrium.
    pub sep_tol: f64,
    pub max_bisections: usize,
    pub newton: NewtonOptions,
    /// Newton starting point for the pre-fault equilibrium (origin if absent).
    pub x_guess: Option<DVector<f64>>,
    /// First clearing time tried when the sustained fault never meets the boundary.
    pub search_start: f64,
}

impl Default for CctOptions {
    fn default() -> Self {
        Self {
            integration: IntegrationOptions::default(),
            bisection_tol: 0.01,
            boundary_threshold: 1e-5,
            norm_min_threshold: 1e-3,
            sep_tol: 1e-3,
            max_bisections: 100,
            newton: NewtonOptions::default(),
            x_guess: None,
            search_start: 0.05,
        }
    }
}

impl CctOptions {
    /// Tight bisection and integration tolerances, for sensitivity work and
    /// finite-difference oracles.
    pub fn precise() -> Self {
        let mut opts = Self {
            bisection_tol: 1e-9,
            ..Self::default()
        };
        opts.integration.rel_tol = 1e-11;
        opts.integration.abs_tol = 1e-13;
        opts.integration.max_step = 0.05;
        opts
    }

    pub fn validate(&self) -> Result<()> {
        self.integration.validate()?;
        let ok = self.bisection_tol > 0.0
            && self.boundary_threshold >= 0.0
            && self.norm_min_threshold > 0.0
            && self.sep_tol > 0.0
            && self.search_start > 0.0
            && self.max_bisections > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid CCT options {self:?}")))
        }
    }
}

/// Pre- and post-fault equilibria and the post-fault boundary scale.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub x_pre: DVector<f64>,
    pub x_post: DVector<f64>,
    /// `H^post(x_pre)`, the reference for the boundary contact threshold.
    pub h_ref: f64,
}

pub(crate) fn operating_point<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    opts: &CctOptions,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let guess = opts.x_guess.clone().unwrap_or_else(|| DVector::zeros(sys.state_dim()));
    let pre = find_equilibrium(sys, Phase::PreFault, p, &guess, &opts.newton)?;
    let post = find_equilibrium(sys, Phase::PostFault, p, &pre.x_s, &opts.newton)?;
    Ok((pre.x_s, post.x_s))
}

pub fn prepare<S: ConstrainedSystem + ?Sized>(sys: &S, p: &DVector<f64>, opts: &CctOptions) -> Result<OperatingPoint> {
    let (x_pre, x_post) = operating_point(sys, p, opts)?;
    let h_ref = boundary::eval_h(sys, Phase::PostFault, &x_pre, p)?;
    if !(h_ref > 0.0) {
        return Err(Error::InfeasibleOperatingPoint { h: h_ref });
    }
    Ok(OperatingPoint { x_pre, x_post, h_ref })
}

#[derive(Debug, Clone)]
pub struct PostFaultOutcome {
    pub stable: bool,
    /// Boundary contact time.
    pub t1: Option<f64>,
    /// Time of the first qualifying `‖f‖` minimum.
    pub t2: Option<f64>,
    /// `T = min(t1, t2)` for unstable runs.
    pub t_limit: Option<f64>,
    pub x_limit: Option<DVector<f64>>,
    /// Unnormalized `H^post(x_T)`.
    pub h_raw_at_limit: Option<f64>,
    pub horizon_reached: bool,
    pub trajectory: Trajectory,
}

/// Integrate the post-fault system from `x_cl` and decide stability.
pub fn classify_post_fault<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    x_cl: &DVector<f64>,
    op: &OperatingPoint,
    opts: &CctOptions,
) -> Result<PostFaultOutcome> {
    if x_cl.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("clearing state is not finite".into()));
    }
    let spec = EventSpec {
        boundary: Some(BoundaryWatch {
            source: BoundarySource::Phase,
            level: opts.boundary_threshold * op.h_ref,
        }),
        field_minima: true,
        sep: Some(SepWatch {
            center: op.x_post.clone(),
            radius: opts.sep_tol,
        }),
    };
    let traj = integrate(sys, Phase::PostFault, x_cl, p, &opts.integration, &spec)?;
    let horizon_reached = traj.final_time() >= opts.integration.t_max;

    if traj.converged().is_some() {
        return Ok(PostFaultOutcome {
            stable: true,
            t1: None,
            t2: None,
            t_limit: None,
            x_limit: None,
            h_raw_at_limit: None,
            horizon_reached,
            trajectory: traj,
        });
    }

    let t1 = traj.crossing().map(|e| (e.t, e.state.clone()));
    let t2 = traj
        .field_minima()
        .filter(|(_, value)| *value <= opts.norm_min_threshold)
        .find(|(e, _)| {
            // minima while settling onto a stable equilibrium are not an approach
            let (jx, _) = sys.field_jacobians(Phase::PostFault, &e.state, p);
            classify_jacobian(&jx, opts.newton.hyperbolicity_tol).0 != EquilibriumClass::Stable
        })
        .map(|(e, _)| (e.t, e.state.clone()));

    let limit = match (&t1, &t2) {
        (Some(a), Some(b)) => Some(if a.0 <= b.0 { a.clone() } else { b.clone() }),
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => Some(b.clone()),
        (None, None) => None,
    };

    if limit.is_none() {
        let d0 = (x_cl - &op.x_post).norm();
        let d1 = (traj.final_state() - &op.x_post).norm();
        if d1 <= d0 {
            return Err(Error::InconclusiveRun {
                t_cl: f64::NAN,
                detail: format!(
                    "no convergence, boundary contact or equilibrium approach by t = {}; distance to the equilibrium went from {d0:.3e} to {d1:.3e}",
                    traj.final_time()
                ),
            });
        }
    }

    let h_raw = limit
        .as_ref()
        .map(|(_, x)| boundary::eval_h(sys, Phase::PostFault, x, p))
        .transpose()?;
    Ok(PostFaultOutcome {
        stable: false,
        t1: t1.map(|v| v.0),
        t2: t2.map(|v| v.0),
        t_limit: limit.as_ref().map(|v| v.0),
        x_limit: limit.map(|v| v.1),
        h_raw_at_limit: h_raw,
        horizon_reached,
        trajectory: traj,
    })
}

/// One bisection iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BracketStep {
    pub t_cl: f64,
    pub stable: bool,
    pub t_stable: f64,
    pub t_unstable: f64,
}

#[derive(Debug, Clone)]
pub struct CriticalResult {
    pub t_stable: f64,
    pub t_unstable: f64,
    /// Reported CCT: the bracket midpoint, or the boundary-hit time in mode 1.
    pub t_cr: f64,
    pub x_cr: DVector<f64>,
    pub mode: InstabilityMode,
    /// `T` along the critical post-fault run (0 in mode 1).
    pub t_limit: f64,
    pub x_limit: DVector<f64>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub h_raw_at_limit: f64,
    /// Time at which the sustained fault trajectory meets the combined boundary.
    pub t_hit: Option<f64>,
    pub operating_point: OperatingPoint,
    pub history: Vec<BracketStep>,
    /// The critical post-fault run ended at the horizon.
    pub horizon_bound: bool,
    /// Fault-on trajectory from the pre-fault equilibrium to `t_cr`.
    pub fault_trajectory: Trajectory,
    /// Post-fault trajectory from the clearing state at `t_unstable`.
    pub post_trajectory: Trajectory,
}

impl CriticalResult {
    pub fn bracket_width(&self) -> f64 {
        self.t_unstable - self.t_stable
    }
}

fn fault_run<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    x_pre: &DVector<f64>,
    t: f64,
    opts: &CctOptions,
) -> Result<Trajectory> {
    let iopts = opts.integration.with_t_max(t);
    integrate(sys, Phase::FaultOn, x_pre, p, &iopts, &EventSpec::default())
}

/// Fault-on state after a fault of duration `t_cl`.
pub fn clearing_state<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    x_pre: &DVector<f64>,
    t_cl: f64,
    opts: &CctOptions,
) -> Result<DVector<f64>> {
    Ok(fault_run(sys, p, x_pre, t_cl, opts)?.final_state().clone())
}

fn classify_at<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    op: &OperatingPoint,
    t_cl: f64,
    opts: &CctOptions,
) -> Result<PostFaultOutcome> {
    let x_cl = clearing_state(sys, p, &op.x_pre, t_cl, opts)?;
    classify_post_fault(sys, p, &x_cl, op, opts).map_err(|e| match e {
        Error::InconclusiveRun { detail, .. } => Error::InconclusiveRun { t_cl, detail },
        other => other,
    })
}

/// Stability of the post-fault run after clearing at `t_cl`.
pub fn classify_clearing_time<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    t_cl: f64,
    opts: &CctOptions,
) -> Result<PostFaultOutcome> {
    let op = prepare(sys, p, opts)?;
    classify_at(sys, p, &op, t_cl, opts)
}

/// Sustained-fault run stopped at the combined boundary.
pub fn sustained_fault<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    x_pre: &DVector<f64>,
    opts: &CctOptions,
) -> Result<Trajectory> {
    combined_h(sys, x_pre, p)?;
    let spec = EventSpec {
        boundary: Some(BoundaryWatch {
            source: BoundarySource::Combined,
            level: 0.0,
        }),
        ..Default::default()
    };
    integrate(sys, Phase::FaultOn, x_pre, p, &opts.integration, &spec)
}

pub fn compute_cct<S: ConstrainedSystem + ?Sized>(sys: &S, p: &DVector<f64>, opts: &CctOptions) -> Result<CriticalResult> {
    opts.validate()?;
    let op = prepare(sys, p, opts)?;
    let t_max = opts.integration.t_max;

    let sustained = sustained_fault(sys, p, &op.x_pre, opts)?;
    let hit = sustained.crossing().map(|e| (e.t, e.state.clone()));
    if let Some((t, x)) = &hit {
        if *t == 0.0 {
            return Err(Error::InfeasibleOperatingPoint {
                h: combined_h(sys, x, p)?.value,
            });
        }
    }

    let mut t_stable = 0.0;
    let mut history = Vec::new();
    // unstable side: (t_unstable, outcome); outcome is None for the boundary hit itself
    let (mut t_unstable, mut unstable): (f64, Option<PostFaultOutcome>) = match &hit {
        Some((t, _)) => (*t, None),
        None => {
            let mut t = opts.search_start;
            let mut found = None;
            while t <= t_max {
                let outcome = classify_at(sys, p, &op, t, opts)?;
                history.push(BracketStep {
                    t_cl: t,
                    stable: outcome.stable,
                    t_stable,
                    t_unstable: f64::INFINITY,
                });
                if outcome.stable {
                    t_stable = t;
                    t *= 2.0;
                } else {
                    found = Some((t, outcome));
                    break;
                }
            }
            match found {
                Some((t, outcome)) => {
                    if let Some(last) = history.last_mut() {
                        last.t_unstable = t;
                    }
                    (t, Some(outcome))
                }
                None => return Err(Error::NoFiniteCct { horizon: t_max }),
            }
        }
    };

    let captured = |u: &Option<PostFaultOutcome>| match u {
        None => true,
        Some(o) => o.t_limit.is_some(),
    };
    let mut iterations = 0;
    while t_unstable - t_stable >= opts.bisection_tol || !captured(&unstable) {
        if iterations >= opts.max_bisections {
            return Err(Error::InconclusiveRun {
                t_cl: 0.5 * (t_stable + t_unstable),
                detail: format!(
                    "no limit-approach point captured after {iterations} bisections (bracket [{t_stable}, {t_unstable}])"
                ),
            });
        }
        iterations += 1;
        let t_cl = 0.5 * (t_stable + t_unstable);
        if t_cl <= t_stable || t_cl >= t_unstable {
            break;
        }
        let outcome = classify_at(sys, p, &op, t_cl, opts)?;
        let stable = outcome.stable;
        if stable {
            t_stable = t_cl;
        } else {
            t_unstable = t_cl;
            unstable = Some(outcome);
        }
        history.push(BracketStep {
            t_cl,
            stable,
            t_stable,
            t_unstable,
        });
    }
    if !captured(&unstable) {
        return Err(Error::InconclusiveRun {
            t_cl: t_unstable,
            detail: "bracket collapsed before a limit-approach point was captured".into(),
        });
    }

    let check = classify_at(sys, p, &op, t_stable, opts)?;
    if !check.stable {
        return Err(Error::BracketCollapse {
            t: t_stable,
            found: "unstable",
        });
    }

    match unstable {
        None => {
            let (t_hit, x_hit) = hit.expect("boundary hit recorded");
            let fault_trajectory = fault_run(sys, p, &op.x_pre, t_hit, opts)?;
            let h_raw = boundary::eval_h(sys, Phase::PostFault, &x_hit, p)?;
            let post_trajectory = Trajectory {
                times: vec![0.0],
                states: vec![x_hit.clone()],
                derivatives: vec![sys.field(Phase::PostFault, &x_hit, p)],
                events: Vec::new(),
            };
            Ok(CriticalResult {
                t_stable,
                t_unstable,
                t_cr: t_hit,
                x_cr: x_hit.clone(),
                mode: InstabilityMode::Mode1FaultHitsBoundary,
                t_limit: 0.0,
                x_limit: x_hit,
                t1: Some(0.0),
                t2: None,
                h_raw_at_limit: h_raw,
                t_hit: Some(t_hit),
                operating_point: op,
                history,
                horizon_bound: false,
                fault_trajectory,
                post_trajectory,
            })
        }
        Some(outcome) => {
            let t_limit = outcome.t_limit.expect("captured");
            let mode = if outcome.t1 == Some(t_limit) {
                InstabilityMode::Mode2PostHitsBoundary
            } else {
                InstabilityMode::Mode3NoReturn
            };
            let t_cr = 0.5 * (t_stable + t_unstable);
            let fault_trajectory = fault_run(sys, p, &op.x_pre, t_cr, opts)?;
            Ok(CriticalResult {
                t_stable,
                t_unstable,
                t_cr,
                x_cr: fault_trajectory.final_state().clone(),
                mode,
                t_limit,
                x_limit: outcome.x_limit.clone().expect("captured"),
                t1: outcome.t1,
                t2: outcome.t2,
                h_raw_at_limit: outcome.h_raw_at_limit.expect("captured"),
                t_hit: hit.map(|h| h.0),
                operating_point: op,
                history,
                horizon_bound: outcome.horizon_reached,
                fault_trajectory,
                post_trajectory: outcome.trajectory,
            })
        }
    }
}
