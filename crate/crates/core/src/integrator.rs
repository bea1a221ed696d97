//! Adaptive Dormand–Prince 5(4) integration of one phase of a
//! [`ConstrainedSystem`], with event detection and optional simultaneous
//! integration of the variational equations
//!
//! ```text
//! Φ̇x = ∂f/∂x · Φx,        Φx(0) = I
//! Φ̇p = ∂f/∂x · Φp + ∂f/∂p, Φp(0) = 0
//! ```
//!
//! Events are located without dense output: the state at an interior time of
//! an accepted step is recomputed with one shorter Runge–Kutta step from the
//! step's left end point.
//!
//! * boundary crossings of `H(x, p) = level` are bracketed by sign, or by a
//!   sign change of `Ḣ` when `H` dips and recovers inside one step, and then
//!   refined by bisection;
//! * local minima of `‖f(x, p)‖` are found by a three-sample test and refined
//!   by golden-section search;
//! * convergence to an equilibrium is declared when the state enters a ball
//!   around it while `‖f‖` is decreasing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::boundary;
use crate::error::{Error, Result};
use crate::model::{check_dims, ConstrainedSystem, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub t_max: f64,
    pub event_refine_tol: f64,
    /// Store every `sample_stride`-th accepted step (first, last and event
    /// states are always stored).
    pub sample_stride: usize,
    pub max_steps: usize,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: 0.1,
            t_max: 20.0,
            event_refine_tol: 1e-10,
            sample_stride: 1,
            max_steps: 2_000_000,
        }
    }
}

impl IntegrationOptions {
    pub fn with_t_max(mut self, t_max: f64) -> Self {
        self.t_max = t_max;
        self
    }

    pub fn with_tolerances(mut self, rel_tol: f64, abs_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self.abs_tol = abs_tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rel_tol > 0.0
            && self.abs_tol > 0.0
            && self.max_step > 0.0
            && self.t_max >= 0.0
            && self.t_max.is_finite()
            && self.event_refine_tol > 0.0
            && self.sample_stride >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid integration options {self:?}")))
        }
    }
}

/// Which boundary function a [`BoundaryWatch`] tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySource {
    /// Product of the integrated phase's constraints.
    Phase,
    /// Fault/post-fault combined boundary.
    Combined,
}

/// Terminal watch for `H(x, p)` falling to `level`.
///
/// A start with `H ≤ 0` is reported immediately at `t = 0`. A start with
/// `0 < H ≤ level` arms the level only once `H` has risen above it; until then
/// an actual sign change of `H` is watched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryWatch {
    pub source: BoundarySource,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SepWatch {
    pub center: DVector<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventSpec {
    pub boundary: Option<BoundaryWatch>,
    pub field_minima: bool,
    pub sep: Option<SepWatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum EventKind {
    /// `constraint` names the smallest constraint at the crossing state.
    ConstraintCrossing { constraint: Option<String> },
    FieldNormLocalMin { value: f64 },
    ConvergedToSep,
    HorizonReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub state: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Vector field at each stored state (used for Hermite interpolation).
    pub derivatives: Vec<DVector<f64>>,
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn initial_state(&self) -> &DVector<f64> {
        &self.states[0]
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one sample")
    }

    pub fn crossing(&self) -> Option<&Event> {
        self.events
            .iter()
            .find(|e| matches!(e.kind, EventKind::ConstraintCrossing { .. }))
    }

    pub fn converged(&self) -> Option<&Event> {
        self.events.iter().find(|e| e.kind == EventKind::ConvergedToSep)
    }

    pub fn field_minima(&self) -> impl Iterator<Item = (&Event, f64)> {
        self.events.iter().filter_map(|e| match e.kind {
            EventKind::FieldNormLocalMin { value } => Some((e, value)),
            _ => None,
        })
    }

    pub fn state_at(&self, t: f64) -> Result<DVector<f64>> {
        state_at(self, t)
    }
}

/// Trajectory sensitivities at the stored sample times, plus at every event.
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    pub times: Vec<f64>,
    pub phi_x: Vec<DMatrix<f64>>,
    pub phi_p: Vec<DMatrix<f64>>,
    pub at_events: Vec<(f64, DMatrix<f64>, DMatrix<f64>)>,
}

impl SensitivityBundle {
    pub fn final_phi_x(&self) -> &DMatrix<f64> {
        self.phi_x.last().expect("bundle is never empty")
    }

    pub fn final_phi_p(&self) -> &DMatrix<f64> {
        self.phi_p.last().expect("bundle is never empty")
    }
}

// ---------------------------------------------------------------------------
// Dormand–Prince 5(4)

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// C6 = C7 = 1; the stage times are not needed for autonomous systems.
#[allow(dead_code)]
const STAGE_TIMES: [f64; 4] = [C2, C3, C4, C5];

trait Rhs {
    fn dim(&self) -> usize;
    fn eval(&self, y: &[f64], dy: &mut [f64]);
}

struct Dp5<'r, R: Rhs> {
    rhs: &'r R,
    k: [Vec<f64>; 6],
    tmp: Vec<f64>,
}

struct StepOut {
    y: Vec<f64>,
    dy: Vec<f64>,
    err: Vec<f64>,
}

impl<'r, R: Rhs> Dp5<'r, R> {
    fn new(rhs: &'r R) -> Self {
        let d = rhs.dim();
        Self {
            rhs,
            k: std::array::from_fn(|_| vec![0.0; d]),
            tmp: vec![0.0; d],
        }
    }

    /// One step of size `h` from `y` with `k1 = f(y)`.
    fn step(&mut self, y: &[f64], k1: &[f64], h: f64) -> StepOut {
        let d = y.len();
        let [k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..d {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        self.rhs.eval(tmp, k2);
        for i in 0..d {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        self.rhs.eval(tmp, k3);
        for i in 0..d {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        self.rhs.eval(tmp, k4);
        for i in 0..d {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        self.rhs.eval(tmp, k5);
        for i in 0..d {
            tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        self.rhs.eval(tmp, k6);
        let mut y_new = vec![0.0; d];
        for i in 0..d {
            y_new[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        self.rhs.eval(&y_new, k7);
        let err = (0..d)
            .map(|i| h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]))
            .collect();
        StepOut {
            y: y_new,
            dy: k7.clone(),
            err,
        }
    }
}

fn error_norm(out: &StepOut, y_old: &[f64], opts: &IntegrationOptions) -> f64 {
    let d = y_old.len();
    let sum: f64 = (0..d)
        .map(|i| {
            let sc = opts.abs_tol + opts.rel_tol * y_old[i].abs().max(out.y[i].abs());
            (out.err[i] / sc).powi(2)
        })
        .sum();
    (sum / d as f64).sqrt()
}

fn initial_step<R: Rhs>(rhs: &R, y: &[f64], f0: &[f64], opts: &IntegrationOptions) -> f64 {
    let d = y.len();
    let sc: Vec<f64> = y.iter().map(|v| opts.abs_tol + opts.rel_tol * v.abs()).collect();
    let rms = |v: &dyn Fn(usize) -> f64| ((0..d).map(|i| (v(i) / sc[i]).powi(2)).sum::<f64>() / d as f64).sqrt();
    let d0 = rms(&|i| y[i]);
    let d1 = rms(&|i| f0[i]);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = (0..d).map(|i| y[i] + h0 * f0[i]).collect();
    let mut f1 = vec![0.0; d];
    rhs.eval(&y1, &mut f1);
    let d2 = rms(&|i| f1[i] - f0[i]) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(opts.max_step)
}

// ---------------------------------------------------------------------------
// Right-hand sides

struct PhaseRhs<'a, S: ConstrainedSystem + ?Sized> {
    sys: &'a S,
    phase: Phase,
    p: &'a DVector<f64>,
    n: usize,
    np: usize,
    sensitivities: bool,
}

impl<S: ConstrainedSystem + ?Sized> Rhs for PhaseRhs<'_, S> {
    fn dim(&self) -> usize {
        if self.sensitivities {
            self.n + self.n * self.n + self.n * self.np
        } else {
            self.n
        }
    }

    fn eval(&self, y: &[f64], dy: &mut [f64]) {
        let n = self.n;
        let x = DVector::from_column_slice(&y[..n]);
        let f = self.sys.field(self.phase, &x, self.p);
        dy[..n].copy_from_slice(f.as_slice());
        if self.sensitivities {
            let (jx, jp) = self.sys.field_jacobians(self.phase, &x, self.p);
            let nn = n * n;
            let phi_x = DMatrix::from_column_slice(n, n, &y[n..n + nn]);
            let phi_p = DMatrix::from_column_slice(n, self.np, &y[n + nn..]);
            let dphi_x = &jx * phi_x;
            let dphi_p = &jx * phi_p + jp;
            dy[n..n + nn].copy_from_slice(dphi_x.as_slice());
            dy[n + nn..].copy_from_slice(dphi_p.as_slice());
        }
    }
}

// ---------------------------------------------------------------------------
// Event monitor

struct Monitor<'a, S: ConstrainedSystem + ?Sized> {
    sys: &'a S,
    phase: Phase,
    p: &'a DVector<f64>,
    n: usize,
    spec: &'a EventSpec,
    armed: bool,
}

impl<S: ConstrainedSystem + ?Sized> Monitor<'_, S> {
    fn x(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&y[..self.n])
    }

    /// `(H, Ḣ)` of the watched boundary.
    fn boundary_values(&self, y: &[f64]) -> (f64, f64) {
        let watch = self.spec.boundary.expect("boundary watch configured");
        let x = self.x(y);
        let f = self.sys.field(self.phase, &x, self.p);
        match watch.source {
            BoundarySource::Phase => {
                let (h, gx, _) = boundary::h_and_gradients(self.sys, self.phase, &x, self.p);
                (h, gx.dot(&f))
            }
            BoundarySource::Combined => {
                let c = boundary::combined_h_unchecked(self.sys, &x, self.p);
                (c.value, c.grad_x.dot(&f))
            }
        }
    }

    fn active_level(&self) -> f64 {
        if self.armed {
            self.spec.boundary.map(|b| b.level).unwrap_or(0.0)
        } else {
            0.0
        }
    }

    fn update_arming(&mut self, h: f64) {
        if let Some(b) = self.spec.boundary {
            if !self.armed && h > b.level {
                self.armed = true;
            }
        }
    }

    fn crossing_name(&self, y: &[f64]) -> Option<String> {
        let x = self.x(y);
        let watch = self.spec.boundary?;
        let names: Vec<(String, f64)> = match watch.source {
            BoundarySource::Phase => self
                .sys
                .constraint_names(self.phase)
                .iter()
                .enumerate()
                .map(|(k, n)| (n.clone(), self.sys.constraint(self.phase, k, &x, self.p)))
                .collect(),
            BoundarySource::Combined => boundary::combined_members(self.sys)
                .into_iter()
                .map(|(ph, k)| {
                    (
                        self.sys.constraint_names(ph)[k].clone(),
                        self.sys.constraint(ph, k, &x, self.p),
                    )
                })
                .collect(),
        };
        names
            .into_iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| n)
    }

    fn field_norm(&self, y: &[f64]) -> f64 {
        self.sys.field(self.phase, &self.x(y), self.p).norm()
    }
}

#[derive(Clone)]
struct Sample {
    t: f64,
    y: Vec<f64>,
    dy: Vec<f64>,
}

struct RawEvent {
    t: f64,
    kind: EventKind,
    y: Vec<f64>,
}

struct RawRun {
    samples: Vec<Sample>,
    events: Vec<RawEvent>,
}

fn run<S, R>(rhs: &R, monitor: &mut Monitor<'_, S>, y0: Vec<f64>, opts: &IntegrationOptions) -> Result<RawRun>
where
    S: ConstrainedSystem + ?Sized,
    R: Rhs,
{
    opts.validate()?;
    let d = rhs.dim();
    let mut dp = Dp5::new(rhs);
    let mut dy0 = vec![0.0; d];
    rhs.eval(&y0, &mut dy0);
    if y0.iter().chain(dy0.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericalBlowup { t: 0.0 });
    }

    let mut cur = Sample {
        t: 0.0,
        y: y0,
        dy: dy0,
    };
    let mut samples = vec![cur.clone()];
    let mut events = Vec::new();
    let spec = monitor.spec;

    // start-of-run checks
    if spec.boundary.is_some() {
        let (h, _) = monitor.boundary_values(&cur.y);
        if h <= 0.0 {
            events.push(RawEvent {
                t: 0.0,
                kind: EventKind::ConstraintCrossing {
                    constraint: monitor.crossing_name(&cur.y),
                },
                y: cur.y.clone(),
            });
            return Ok(RawRun { samples, events });
        }
        monitor.update_arming(h);
    }
    let mut fnorm_cur = monitor.field_norm(&cur.y);
    if let Some(sep) = &spec.sep {
        if (monitor.x(&cur.y) - &sep.center).norm() <= sep.radius {
            events.push(RawEvent {
                t: 0.0,
                kind: EventKind::ConvergedToSep,
                y: cur.y.clone(),
            });
            return Ok(RawRun { samples, events });
        }
    }
    if opts.t_max == 0.0 {
        events.push(RawEvent {
            t: 0.0,
            kind: EventKind::HorizonReached,
            y: cur.y.clone(),
        });
        return Ok(RawRun { samples, events });
    }

    let mut prev: Option<(Sample, f64)> = None;
    let mut h = initial_step(rhs, &cur.y, &cur.dy, opts).min(opts.t_max);
    let mut last_rejected = false;
    let mut accepted = 0usize;
    let mut bad_values = 0usize;

    loop {
        let remaining = opts.t_max - cur.t;
        let mut h_try = h.min(opts.max_step);
        let mut lands = false;
        if h_try >= remaining * (1.0 - 1e-12) {
            h_try = remaining;
            lands = true;
        }
        let out = dp.step(&cur.y, &cur.dy, h_try);
        let err = error_norm(&out, &cur.y, opts);

        if !err.is_finite() || out.y.iter().any(|v| !v.is_finite() || v.abs() > 1e100) {
            bad_values += 1;
            if bad_values > 20 {
                return Err(Error::NumericalBlowup { t: cur.t });
            }
            h = h_try * 0.1;
            last_rejected = true;
            continue;
        }
        bad_values = 0;

        if err > 1.0 {
            h = h_try * (0.9 * err.powf(-0.2)).max(0.2);
            last_rejected = true;
            if h < 16.0 * f64::EPSILON * cur.t.abs().max(1.0) {
                return Err(Error::StiffnessFailure { t: cur.t, h });
            }
            continue;
        }

        // accepted
        accepted += 1;
        if accepted > opts.max_steps {
            return Err(Error::StiffnessFailure { t: cur.t, h: h_try });
        }
        let next = Sample {
            t: if lands { opts.t_max } else { cur.t + h_try },
            y: out.y,
            dy: out.dy,
        };
        let step_len = next.t - cur.t;

        // 1. boundary crossing inside (cur, next]
        if spec.boundary.is_some() {
            if let Some((s, y_e)) = locate_crossing(&mut dp, monitor, &cur, &next, step_len, opts) {
                let t_e = cur.t + s;
                let mut dy_e = vec![0.0; d];
                rhs.eval(&y_e, &mut dy_e);
                events.push(RawEvent {
                    t: t_e,
                    kind: EventKind::ConstraintCrossing {
                        constraint: monitor.crossing_name(&y_e),
                    },
                    y: y_e.clone(),
                });
                samples.push(Sample {
                    t: t_e,
                    y: y_e,
                    dy: dy_e,
                });
                return Ok(RawRun { samples, events });
            }
            let (h_next, _) = monitor.boundary_values(&next.y);
            monitor.update_arming(h_next);
        }

        let fnorm_next = monitor.field_norm(&next.y);

        // 2. local minimum of ‖f‖ over (prev, cur, next)
        if spec.field_minima {
            if let Some((a, fnorm_a)) = &prev {
                if fnorm_cur < *fnorm_a && fnorm_cur <= fnorm_next {
                    let (t_m, y_m, value) = golden_min(&mut dp, monitor, a, &cur, next.t, opts);
                    events.push(RawEvent {
                        t: t_m,
                        kind: EventKind::FieldNormLocalMin { value },
                        y: y_m,
                    });
                }
            }
        }

        // 3. convergence to the equilibrium
        let mut converged = false;
        if let Some(sep) = &spec.sep {
            if fnorm_next < fnorm_cur && (monitor.x(&next.y) - &sep.center).norm() <= sep.radius {
                converged = true;
            }
        }

        let keep = converged || lands || accepted.is_multiple_of(opts.sample_stride);
        if keep {
            samples.push(next.clone());
        }
        if converged {
            events.push(RawEvent {
                t: next.t,
                kind: EventKind::ConvergedToSep,
                y: next.y,
            });
            return Ok(RawRun { samples, events });
        }
        if lands {
            events.push(RawEvent {
                t: next.t,
                kind: EventKind::HorizonReached,
                y: next.y,
            });
            return Ok(RawRun { samples, events });
        }

        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = if last_rejected { h_try * fac.min(1.0) } else { h_try * fac };
        last_rejected = false;
        prev = Some((std::mem::replace(&mut cur, next), fnorm_cur));
        fnorm_cur = fnorm_next;
    }
}

/// State at `s` past `from.t`, by one Runge–Kutta step.
fn substep<R: Rhs>(dp: &mut Dp5<'_, R>, from: &Sample, s: f64) -> Vec<f64> {
    if s == 0.0 {
        return from.y.clone();
    }
    dp.step(&from.y, &from.dy, s).y
}

fn locate_crossing<S, R>(
    dp: &mut Dp5<'_, R>,
    monitor: &Monitor<'_, S>,
    cur: &Sample,
    next: &Sample,
    step_len: f64,
    opts: &IntegrationOptions,
) -> Option<(f64, Vec<f64>)>
where
    S: ConstrainedSystem + ?Sized,
    R: Rhs,
{
    let level = monitor.active_level();
    let (h0, hd0) = monitor.boundary_values(&cur.y);
    let (h1, hd1) = monitor.boundary_values(&next.y);
    let g = |h: f64| h - level;

    let hi = if g(h1) <= 0.0 {
        step_len
    } else if hd0 < 0.0 && hd1 > 0.0 && g(h0) > 0.0 {
        // H dips inside the step: find where Ḣ = 0 and look at the minimum
        let (mut lo, mut up) = (0.0, step_len);
        for _ in 0..60 {
            if up - lo <= opts.event_refine_tol {
                break;
            }
            let mid = 0.5 * (lo + up);
            let (_, hd) = monitor.boundary_values(&substep(dp, cur, mid));
            if hd < 0.0 {
                lo = mid;
            } else {
                up = mid;
            }
        }
        let (h_min, _) = monitor.boundary_values(&substep(dp, cur, up));
        if g(h_min) > 0.0 {
            return None;
        }
        up
    } else {
        return None;
    };

    let (mut lo, mut up) = (0.0, hi);
    let mut y_up = if hi == step_len {
        next.y.clone()
    } else {
        substep(dp, cur, hi)
    };
    for _ in 0..60 {
        if up - lo <= opts.event_refine_tol {
            break;
        }
        let mid = 0.5 * (lo + up);
        let y_mid = substep(dp, cur, mid);
        let (h_mid, _) = monitor.boundary_values(&y_mid);
        if g(h_mid) > 0.0 {
            lo = mid;
        } else {
            up = mid;
            y_up = y_mid;
        }
    }
    Some((up, y_up))
}

fn golden_min<S, R>(
    dp: &mut Dp5<'_, R>,
    monitor: &Monitor<'_, S>,
    a: &Sample,
    b: &Sample,
    t_c: f64,
    opts: &IntegrationOptions,
) -> (f64, Vec<f64>, f64)
where
    S: ConstrainedSystem + ?Sized,
    R: Rhs,
{
    let state = |dp: &mut Dp5<'_, R>, t: f64| -> Vec<f64> {
        if t <= b.t {
            substep(dp, a, t - a.t)
        } else {
            substep(dp, b, t - b.t)
        }
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (a.t, t_c);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = monitor.field_norm(&state(dp, x1));
    let mut f2 = monitor.field_norm(&state(dp, x2));
    for _ in 0..80 {
        if hi - lo <= opts.event_refine_tol {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = monitor.field_norm(&state(dp, x1));
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = monitor.field_norm(&state(dp, x2));
        }
    }
    let t_m = 0.5 * (lo + hi);
    let y_m = state(dp, t_m);
    let value = monitor.field_norm(&y_m);
    (t_m, y_m, value)
}

// ---------------------------------------------------------------------------
// Public entry points

fn check_x0<S: ConstrainedSystem + ?Sized>(sys: &S, x0: &DVector<f64>, p: &DVector<f64>, spec: &EventSpec) -> Result<()> {
    check_dims(sys, x0, p)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial state is not finite".into()));
    }
    if let Some(sep) = &spec.sep {
        if sep.center.len() != x0.len() {
            return Err(Error::dims("equilibrium watch", x0.len(), sep.center.len()));
        }
    }
    Ok(())
}

fn split(run: RawRun, n: usize) -> Trajectory {
    let (mut times, mut states, mut derivatives) = (Vec::new(), Vec::new(), Vec::new());
    for s in &run.samples {
        times.push(s.t);
        states.push(DVector::from_column_slice(&s.y[..n]));
        derivatives.push(DVector::from_column_slice(&s.dy[..n]));
    }
    let events = run
        .events
        .iter()
        .map(|e| Event {
            t: e.t,
            kind: e.kind.clone(),
            state: DVector::from_column_slice(&e.y[..n]),
        })
        .collect();
    Trajectory {
        times,
        states,
        derivatives,
        events,
    }
}

/// Integrate `phase` from `x0` until `opts.t_max` or a terminal event.
pub fn integrate<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x0: &DVector<f64>,
    p: &DVector<f64>,
    opts: &IntegrationOptions,
    events: &EventSpec,
) -> Result<Trajectory> {
    check_x0(sys, x0, p, events)?;
    let n = sys.state_dim();
    let rhs = PhaseRhs {
        sys,
        phase,
        p,
        n,
        np: sys.param_dim(),
        sensitivities: false,
    };
    let mut monitor = Monitor {
        sys,
        phase,
        p,
        n,
        spec: events,
        armed: false,
    };
    let raw = run(&rhs, &mut monitor, x0.as_slice().to_vec(), opts)?;
    Ok(split(raw, n))
}

/// Integrate the state together with `Φx = ∂φ/∂x0` and `Φp = ∂φ/∂p` over
/// `[0, opts.t_max]` with shared step-size control.
pub fn integrate_with_sensitivities<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x0: &DVector<f64>,
    p: &DVector<f64>,
    opts: &IntegrationOptions,
) -> Result<(Trajectory, SensitivityBundle)> {
    integrate_with_sensitivities_and_events(sys, phase, x0, p, opts, &EventSpec::default())
}

pub fn integrate_with_sensitivities_and_events<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    phase: Phase,
    x0: &DVector<f64>,
    p: &DVector<f64>,
    opts: &IntegrationOptions,
    events: &EventSpec,
) -> Result<(Trajectory, SensitivityBundle)> {
    check_x0(sys, x0, p, events)?;
    let n = sys.state_dim();
    let np = sys.param_dim();
    let rhs = PhaseRhs {
        sys,
        phase,
        p,
        n,
        np,
        sensitivities: true,
    };
    let mut monitor = Monitor {
        sys,
        phase,
        p,
        n,
        spec: events,
        armed: false,
    };
    let mut y0 = x0.as_slice().to_vec();
    y0.extend(DMatrix::<f64>::identity(n, n).as_slice());
    y0.extend(std::iter::repeat_n(0.0, n * np));
    let raw = run(&rhs, &mut monitor, y0, opts)?;

    let unpack = |y: &[f64]| {
        (
            DMatrix::from_column_slice(n, n, &y[n..n + n * n]),
            DMatrix::from_column_slice(n, np, &y[n + n * n..]),
        )
    };
    let mut bundle = SensitivityBundle {
        times: Vec::with_capacity(raw.samples.len()),
        phi_x: Vec::with_capacity(raw.samples.len()),
        phi_p: Vec::with_capacity(raw.samples.len()),
        at_events: Vec::new(),
    };
    for s in &raw.samples {
        let (px, pp) = unpack(&s.y);
        bundle.times.push(s.t);
        bundle.phi_x.push(px);
        bundle.phi_p.push(pp);
    }
    for e in &raw.events {
        let (px, pp) = unpack(&e.y);
        bundle.at_events.push((e.t, px, pp));
    }
    Ok((split(raw, n), bundle))
}

/// Cubic Hermite interpolation between stored samples.
pub fn state_at(traj: &Trajectory, t: f64) -> Result<DVector<f64>> {
    let start = traj.times[0];
    let end = traj.final_time();
    if !(t >= start && t <= end) {
        return Err(Error::OutOfRange { t, start, end });
    }
    let i = traj.times.partition_point(|&s| s <= t);
    if i > 0 && traj.times[i - 1] == t {
        return Ok(traj.states[i - 1].clone());
    }
    let (a, b) = (i - 1, i);
    let (t0, t1) = (traj.times[a], traj.times[b]);
    let h = t1 - t0;
    let s = (t - t0) / h;
    let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
    let h10 = s.powi(3) - 2.0 * s * s + s;
    let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
    let h11 = s.powi(3) - s * s;
    Ok(&traj.states[a] * h00
        + &traj.derivatives[a] * (h10 * h)
        + &traj.states[b] * h01
        + &traj.derivatives[b] * (h11 * h))
}
