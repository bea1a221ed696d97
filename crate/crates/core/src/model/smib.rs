//! Single machine connected to an infinite bus.
//!
//! States are rotor angle `x1` and speed deviation `x2`:
//!
//! ```text
//! ẋ1 = x2
//! M ẋ2 = Pm − (EV/X) sin(x1) − D x2
//! ```
//!
//! with angle and speed limits `h = [δmax − x1, ωmax − x2]` in every phase.
//! The parameter vector is `p = [Pm, M, delta_max, omega_max]`; damping and
//! the per-phase transfer coefficient `EV/X` are fixed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ConstrainedSystem, Phase};

pub const PM: usize = 0;
pub const INERTIA: usize = 1;
pub const DELTA_MAX: usize = 2;
pub const OMEGA_MAX: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvOverX {
    pub pre: f64,
    pub fault: f64,
    pub post: f64,
}

impl Default for EvOverX {
    fn default() -> Self {
        Self {
            pre: 1.0,
            fault: 0.0,
            post: 1.0,
        }
    }
}

impl EvOverX {
    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::PreFault => self.pre,
            Phase::FaultOn => self.fault,
            Phase::PostFault => self.post,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmibParams {
    #[serde(rename = "Pm")]
    pub pm: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "D", default = "default_damping")]
    pub d: f64,
    #[serde(default)]
    pub ev_over_x: EvOverX,
    pub delta_max: f64,
    pub omega_max: f64,
}

fn default_damping() -> f64 {
    0.5
}

impl Default for SmibParams {
    fn default() -> Self {
        Self {
            pm: 0.5,
            m: 0.1,
            d: 0.5,
            ev_over_x: EvOverX::default(),
            delta_max: 0.8,
            omega_max: 0.6,
        }
    }
}

impl SmibParams {
    pub fn param_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.pm, self.m, self.delta_max, self.omega_max])
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.m > 0.0) {
            return Err(format!("inertia M must be positive, got {}", self.m));
        }
        if !(self.d >= 0.0) {
            return Err(format!("damping D must be non-negative, got {}", self.d));
        }
        if !self.delta_max.is_finite() || !self.omega_max.is_finite() || !self.pm.is_finite() {
            return Err("Pm, delta_max and omega_max must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Smib {
    damping: f64,
    ev_over_x: EvOverX,
    param_names: Vec<String>,
    constraint_names: Vec<String>,
}

impl Smib {
    /// Only `D` and `EV/X` are baked in; the remaining fields of `params`
    /// travel in the parameter vector.
    pub fn new(params: SmibParams) -> Self {
        Self {
            damping: params.d,
            ev_over_x: params.ev_over_x,
            param_names: ["Pm", "M", "delta_max", "omega_max"].map(String::from).to_vec(),
            constraint_names: vec!["angle".into(), "speed".into()],
        }
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    fn accel(&self, phase: Phase, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        (p[PM] - self.ev_over_x.get(phase) * x[0].sin() - self.damping * x[1]) / p[INERTIA]
    }
}

impl ConstrainedSystem for Smib {
    fn state_dim(&self) -> usize {
        2
    }

    fn param_names(&self) -> &[String] {
        &self.param_names
    }

    fn field(&self, phase: Phase, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[1], self.accel(phase, x, p)])
    }

    fn field_jacobians(
        &self,
        phase: Phase,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = p[INERTIA];
        let a = self.ev_over_x.get(phase);
        let jx = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -a * x[0].cos() / m, -self.damping / m]);
        let mut jp = DMatrix::zeros(2, 4);
        jp[(1, PM)] = 1.0 / m;
        jp[(1, INERTIA)] = -self.accel(phase, x, p) / m;
        (jx, jp)
    }

    fn constraint_names(&self, _phase: Phase) -> &[String] {
        &self.constraint_names
    }

    fn constraint(&self, _phase: Phase, k: usize, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        match k {
            0 => p[DELTA_MAX] - x[0],
            1 => p[OMEGA_MAX] - x[1],
            _ => panic!("SMIB has two constraints, asked for {k}"),
        }
    }

    fn constraint_gradients(
        &self,
        _phase: Phase,
        k: usize,
        _x: &DVector<f64>,
        _p: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let mut gx = DVector::zeros(2);
        let mut gp = DVector::zeros(4);
        gx[k] = -1.0;
        gp[DELTA_MAX + k] = 1.0;
        (gx, gp)
    }

    fn constraint_hessians(
        &self,
        _phase: Phase,
        _k: usize,
        _x: &DVector<f64>,
        _p: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((DMatrix::zeros(2, 2), DMatrix::zeros(2, 4)))
    }
}
