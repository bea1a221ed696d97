use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::expr::{Expr, ExprContext, Var};
use super::{ConstrainedSystem, Phase};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintDef {
    pub name: String,
    pub expr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExprPhaseDef {
    pub field: Vec<String>,
    #[serde(default)]
    pub constraints: Vec<ConstraintDef>,
}

/// Declarative system: one expression per state derivative and per
/// constraint, for each phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExprSystemDef {
    pub states: Vec<String>,
    /// Parameter names with their nominal values (the default `p0`).
    #[serde(default)]
    pub params: Vec<NamedValue>,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
    pub pre: ExprPhaseDef,
    pub fault: ExprPhaseDef,
    pub post: ExprPhaseDef,
}

#[derive(Debug, Clone)]
struct CompiledConstraint {
    h: Expr,
    grad_x: Vec<Expr>,
    grad_p: Vec<Expr>,
    hess_xx: Vec<Vec<Expr>>,
    hess_xp: Vec<Vec<Expr>>,
}

#[derive(Debug, Clone)]
struct CompiledPhase {
    field: Vec<Expr>,
    jac_x: Vec<Vec<Expr>>,
    jac_p: Vec<Vec<Expr>>,
    constraint_names: Vec<String>,
    constraints: Vec<CompiledConstraint>,
}

/// A [`ConstrainedSystem`] compiled from an [`ExprSystemDef`]. All first and
/// second derivatives are derived symbolically at construction.
#[derive(Debug, Clone)]
pub struct ExprSystem {
    n: usize,
    param_names: Vec<String>,
    nominal: DVector<f64>,
    phases: [CompiledPhase; 3],
}

impl ExprSystem {
    pub fn new(def: &ExprSystemDef) -> Result<Self> {
        let n = def.states.len();
        if n == 0 {
            return Err(Error::InvalidInput("system needs at least one state".into()));
        }
        let ctx = ExprContext {
            states: def.states.clone(),
            params: def.params.iter().map(|v| v.name.clone()).collect(),
            constants: def.constants.clone(),
        };
        let np = ctx.params.len();
        let compile_phase = |pd: &ExprPhaseDef, label: &str| -> Result<CompiledPhase> {
            if pd.field.len() != n {
                return Err(Error::InvalidInput(format!(
                    "{label} phase defines {} field components for {n} states",
                    pd.field.len()
                )));
            }
            let field = pd
                .field
                .iter()
                .map(|s| Expr::parse(s, &ctx))
                .collect::<Result<Vec<_>>>()?;
            let jac_x = field
                .iter()
                .map(|f| (0..n).map(|j| f.diff(Var::State(j))).collect())
                .collect();
            let jac_p = field
                .iter()
                .map(|f| (0..np).map(|j| f.diff(Var::Param(j))).collect())
                .collect();
            let mut names: Vec<String> = Vec::new();
            let mut constraints = Vec::new();
            for c in &pd.constraints {
                if names.contains(&c.name) {
                    return Err(Error::InvalidInput(format!(
                        "duplicate constraint `{}` in {label} phase",
                        c.name
                    )));
                }
                names.push(c.name.clone());
                let h = Expr::parse(&c.expr, &ctx)?;
                let grad_x: Vec<Expr> = (0..n).map(|j| h.diff(Var::State(j))).collect();
                let grad_p = (0..np).map(|j| h.diff(Var::Param(j))).collect();
                let hess_xx = grad_x
                    .iter()
                    .map(|g| (0..n).map(|j| g.diff(Var::State(j))).collect())
                    .collect();
                let hess_xp = grad_x
                    .iter()
                    .map(|g| (0..np).map(|j| g.diff(Var::Param(j))).collect())
                    .collect();
                constraints.push(CompiledConstraint {
                    h,
                    grad_x,
                    grad_p,
                    hess_xx,
                    hess_xp,
                });
            }
            Ok(CompiledPhase {
                field,
                jac_x,
                jac_p,
                constraint_names: names,
                constraints,
            })
        };
        Ok(Self {
            n,
            nominal: DVector::from_iterator(np, def.params.iter().map(|v| v.value)),
            param_names: ctx.params.clone(),
            phases: [
                compile_phase(&def.pre, "pre")?,
                compile_phase(&def.fault, "fault")?,
                compile_phase(&def.post, "post")?,
            ],
        })
    }

    /// Parameter values given in the definition.
    pub fn nominal_params(&self) -> &DVector<f64> {
        &self.nominal
    }

    fn phase(&self, phase: Phase) -> &CompiledPhase {
        &self.phases[phase.index()]
    }
}

fn eval_matrix(rows: &[Vec<Expr>], ncols: usize, x: &[f64], p: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j].eval(x, p))
}

impl ConstrainedSystem for ExprSystem {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn param_names(&self) -> &[String] {
        &self.param_names
    }

    fn field(&self, phase: Phase, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let ph = self.phase(phase);
        DVector::from_iterator(self.n, ph.field.iter().map(|e| e.eval(x.as_slice(), p.as_slice())))
    }

    fn field_jacobians(
        &self,
        phase: Phase,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let ph = self.phase(phase);
        (
            eval_matrix(&ph.jac_x, self.n, x.as_slice(), p.as_slice()),
            eval_matrix(&ph.jac_p, self.param_dim(), x.as_slice(), p.as_slice()),
        )
    }

    fn constraint_names(&self, phase: Phase) -> &[String] {
        &self.phase(phase).constraint_names
    }

    fn constraint(&self, phase: Phase, k: usize, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        self.phase(phase).constraints[k].h.eval(x.as_slice(), p.as_slice())
    }

    fn constraint_gradients(
        &self,
        phase: Phase,
        k: usize,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let c = &self.phase(phase).constraints[k];
        let (xs, ps) = (x.as_slice(), p.as_slice());
        (
            DVector::from_iterator(c.grad_x.len(), c.grad_x.iter().map(|e| e.eval(xs, ps))),
            DVector::from_iterator(c.grad_p.len(), c.grad_p.iter().map(|e| e.eval(xs, ps))),
        )
    }

    fn constraint_hessians(
        &self,
        phase: Phase,
        k: usize,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let c = &self.phase(phase).constraints[k];
        let (xs, ps) = (x.as_slice(), p.as_slice());
        Some((
            eval_matrix(&c.hess_xx, self.n, xs, ps),
            eval_matrix(&c.hess_xp, self.param_dim(), xs, ps),
        ))
    }
}
