use std::collections::HashMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{classify_pseudo_ep, h_and_gradients, PseudoEpKind, PseudoEpTolerances};
use crate::cct::{operating_point, CctOptions};
use crate::error::{Error, Result};
use crate::integrator::{integrate, BoundarySource, BoundaryWatch, EventSpec, SepWatch};
use crate::model::{ConstrainedSystem, Phase};

/// Cell-centred grid over a planar state window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x1_range: (f64, f64),
    pub x2_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let (a, b) = self.x1_range;
        let (c, d) = self.x2_range;
        (
            a + (i as f64 + 0.5) * (b - a) / self.nx as f64,
            c + (j as f64 + 0.5) * (d - c) / self.ny as f64,
        )
    }

    fn validate(&self) -> Result<()> {
        let ok = self.nx > 0
            && self.ny > 0
            && self.x1_range.0 < self.x1_range.1
            && self.x2_range.0 < self.x2_range.1
            && [self.x1_range.0, self.x1_range.1, self.x2_range.0, self.x2_range.1]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid grid {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SrCellClass {
    Stable,
    HitsBoundary,
    DivergesOrOtherLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SrCell {
    pub x1: f64,
    pub x2: f64,
    pub class: SrCellClass,
    /// Time of convergence or of the boundary crossing; the horizon otherwise.
    pub t_event: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AnnotationKind {
    StableFeasibilitySegment,
    UnstableFeasibilitySegment,
    SemiSaddle,
    StableManifoldSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryAnnotation {
    pub x1: f64,
    pub x2: f64,
    pub kind: AnnotationKind,
    /// Normalized `Ḣ` at feasibility-boundary samples, `NaN` for manifold samples.
    pub h_dot_normalized: f64,
}

#[derive(Debug, Clone)]
pub struct SrGrid {
    pub spec: GridSpec,
    pub x_sep: DVector<f64>,
    /// Row-major over `x2` (index `j * nx + i`).
    pub cells: Vec<SrCell>,
    pub annotations: Vec<BoundaryAnnotation>,
}

impl SrGrid {
    pub fn cell(&self, i: usize, j: usize) -> &SrCell {
        &self.cells[j * self.spec.nx + i]
    }
}

struct Ctx<'a, S: ConstrainedSystem + ?Sized> {
    sys: &'a S,
    p: &'a DVector<f64>,
    x_sep: DVector<f64>,
    opts: &'a CctOptions,
}

impl<S: ConstrainedSystem + ?Sized> Ctx<'_, S> {
    fn classify(&self, x: &DVector<f64>) -> Result<(SrCellClass, f64)> {
        let spec = EventSpec {
            boundary: Some(BoundaryWatch {
                source: BoundarySource::Phase,
                level: 0.0,
            }),
            field_minima: false,
            sep: Some(SepWatch {
                center: self.x_sep.clone(),
                radius: self.opts.sep_tol,
            }),
        };
        let traj = integrate(self.sys, Phase::PostFault, x, self.p, &self.opts.integration, &spec)?;
        Ok(if let Some(e) = traj.converged() {
            (SrCellClass::Stable, e.t)
        } else if let Some(e) = traj.crossing() {
            (SrCellClass::HitsBoundary, e.t)
        } else {
            (SrCellClass::DivergesOrOtherLimit, traj.final_time())
        })
    }

    fn h(&self, x: &DVector<f64>) -> f64 {
        h_and_gradients(self.sys, Phase::PostFault, x, self.p).0
    }

    fn h_dot(&self, x: &DVector<f64>) -> f64 {
        let (_, g, _) = h_and_gradients(self.sys, Phase::PostFault, x, self.p);
        g.dot(&self.sys.field(Phase::PostFault, x, self.p))
    }

    /// Newton projection onto `H = 0` along `∇H`.
    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = x.clone();
        for _ in 0..8 {
            let (h, g, _) = h_and_gradients(self.sys, Phase::PostFault, &y, self.p);
            let gg = g.norm_squared();
            if gg == 0.0 || h.abs() < 1e-14 {
                break;
            }
            y -= g * (h / gg);
        }
        y
    }
}

fn lerp(a: &DVector<f64>, b: &DVector<f64>, s: f64) -> DVector<f64> {
    a + (b - a) * s
}

/// Bisection for the point where `pred` flips along `a → b` (`pred(a)` true).
fn bisect(a: &DVector<f64>, b: &DVector<f64>, iterations: usize, mut pred: impl FnMut(&DVector<f64>) -> bool) -> DVector<f64> {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if pred(&lerp(a, b, mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lerp(a, b, 0.5 * (lo + hi))
}

/// Classify the post-fault stability of every cell centre of a planar grid
/// and annotate the feasibility boundary (stable/unstable segments,
/// semi-saddles) and sampled stable-manifold points crossing the window.
pub fn sample_stability_region<S: ConstrainedSystem + ?Sized>(
    sys: &S,
    p: &DVector<f64>,
    grid: &GridSpec,
    opts: &CctOptions,
) -> Result<SrGrid> {
    if sys.state_dim() != 2 {
        return Err(Error::NotPlanar { n: sys.state_dim() });
    }
    grid.validate()?;
    let (_, x_sep) = operating_point(sys, p, opts)?;
    let ctx = Ctx { sys, p, x_sep, opts };
    let (nx, ny) = (grid.nx, grid.ny);

    let cells = (0..nx * ny)
        .into_par_iter()
        .map(|idx| {
            let (x1, x2) = grid.center(idx % nx, idx / nx);
            let (class, t_event) = ctx.classify(&DVector::from_vec(vec![x1, x2]))?;
            Ok(SrCell { x1, x2, class, t_event })
        })
        .collect::<Result<Vec<_>>>()?;

    let point = |i: usize, j: usize| {
        let (a, b) = grid.center(i, j);
        DVector::from_vec(vec![a, b])
    };
    let mut edges = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if i + 1 < nx {
                edges.push(((i, j), (i + 1, j)));
            }
            if j + 1 < ny {
                edges.push(((i, j), (i, j + 1)));
            }
        }
    }
    let tol = PseudoEpTolerances::default();

    // feasibility-boundary samples on grid edges
    let boundary_points: Vec<Option<(DVector<f64>, f64, PseudoEpKind)>> = edges
        .par_iter()
        .map(|&(a, b)| {
            let (xa, xb) = (point(a.0, a.1), point(b.0, b.1));
            let (ha, hb) = (ctx.h(&xa), ctx.h(&xb));
            if (ha > 0.0) == (hb > 0.0) {
                return Ok(None);
            }
            let x = bisect(&xa, &xb, 60, |y| (ctx.h(y) > 0.0) == (ha > 0.0));
            let c = classify_pseudo_ep(sys, Phase::PostFault, &x, p, &PseudoEpTolerances { boundary: 1e-6, ..tol })?;
            Ok(match c.kind {
                PseudoEpKind::NotOnBoundary => None,
                kind => Some((x, c.h_dot_normalized, kind)),
            })
        })
        .collect::<Result<_>>()?;

    let mut annotations: Vec<BoundaryAnnotation> = boundary_points
        .iter()
        .flatten()
        .map(|(x, hdn, kind)| BoundaryAnnotation {
            x1: x[0],
            x2: x[1],
            kind: match kind {
                PseudoEpKind::StablePseudoEp => AnnotationKind::StableFeasibilitySegment,
                PseudoEpKind::UnstablePseudoEp => AnnotationKind::UnstableFeasibilitySegment,
                _ => AnnotationKind::SemiSaddle,
            },
            h_dot_normalized: *hdn,
        })
        .collect();

    // semi-saddles between boundary samples of opposite Ḣ sign within a grid square
    let edge_lookup: HashMap<_, usize> = edges.iter().enumerate().map(|(k, e)| (*e, k)).collect();
    let edge_index = |a: (usize, usize), b: (usize, usize)| edge_lookup.get(&(a, b)).copied();
    if nx > 1 && ny > 1 {
        let mut saddles = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let square = [
                    ((i, j), (i + 1, j)),
                    ((i, j), (i, j + 1)),
                    ((i + 1, j), (i + 1, j + 1)),
                    ((i, j + 1), (i + 1, j + 1)),
                ];
                let pts: Vec<&(DVector<f64>, f64, PseudoEpKind)> = square
                    .iter()
                    .filter_map(|&(a, b)| edge_index(a, b))
                    .filter_map(|k| boundary_points[k].as_ref())
                    .collect();
                let pos = pts.iter().find(|q| q.2 == PseudoEpKind::UnstablePseudoEp);
                let neg = pts.iter().find(|q| q.2 == PseudoEpKind::StablePseudoEp);
                if let (Some(u), Some(s)) = (pos, neg) {
                    let x = bisect(&s.0, &u.0, 50, |y| ctx.h_dot(&ctx.project(y)) < 0.0);
                    let x = ctx.project(&x);
                    let c = classify_pseudo_ep(sys, Phase::PostFault, &x, p, &tol)?;
                    if c.kind == PseudoEpKind::SemiSaddle {
                        saddles.push(BoundaryAnnotation {
                            x1: x[0],
                            x2: x[1],
                            kind: AnnotationKind::SemiSaddle,
                            h_dot_normalized: c.h_dot_normalized,
                        });
                    }
                }
            }
        }
        annotations.extend(saddles);
    }

    // stable-manifold samples between feasible stable and feasible unstable cells
    let class_at = |(i, j): (usize, usize)| cells[j * nx + i].class;
    let manifold: Vec<Option<BoundaryAnnotation>> = edges
        .par_iter()
        .map(|&(a, b)| {
            let (ca, cb) = (class_at(a), class_at(b));
            if (ca == SrCellClass::Stable) == (cb == SrCellClass::Stable) {
                return Ok(None);
            }
            let (xa, xb) = (point(a.0, a.1), point(b.0, b.1));
            if ctx.h(&xa) <= 0.0 || ctx.h(&xb) <= 0.0 {
                return Ok(None);
            }
            let (xs, xu) = if ca == SrCellClass::Stable { (xa, xb) } else { (xb, xa) };
            let mut failure = None;
            let x = bisect(&xs, &xu, 12, |y| match ctx.classify(y) {
                Ok((c, _)) => c == SrCellClass::Stable,
                Err(e) => {
                    failure.get_or_insert(e);
                    false
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(Some(BoundaryAnnotation {
                x1: x[0],
                x2: x[1],
                kind: AnnotationKind::StableManifoldSample,
                h_dot_normalized: f64::NAN,
            }))
        })
        .collect::<Result<_>>()?;
    annotations.extend(manifold.into_iter().flatten());

    Ok(SrGrid {
        spec: grid.clone(),
        x_sep: ctx.x_sep,
        cells,
        annotations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Smib, SmibParams};

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

    #[test]
    fn sep_cell_is_stable_and_infeasible_cell_hits_at_zero() {
        let (sys, p) = smib(0.2);
        let xs = 0.5f64.asin();
        // a 3x1 grid whose middle cell centre is the equilibrium and last is infeasible
        let grid = GridSpec {
            x1_range: (xs - 1.5, xs + 1.5),
            x2_range: (-0.1, 0.1),
            nx: 3,
            ny: 1,
        };
        let sr = sample_stability_region(&sys, &p, &grid, &CctOptions::default()).unwrap();
        assert_eq!(sr.cell(1, 0).class, SrCellClass::Stable);
        assert_eq!(sr.cell(1, 0).t_event, 0.0);
        assert_eq!(sr.cell(2, 0).class, SrCellClass::HitsBoundary);
        assert_eq!(sr.cell(2, 0).t_event, 0.0);
    }

    #[test]
    fn annotations_cover_both_segment_kinds() {
        let (sys, p) = smib(0.2);
        let grid = GridSpec {
            x1_range: (-2.0, 1.2),
            x2_range: (-1.0, 1.0),
            nx: 16,
            ny: 16,
        };
        let sr = sample_stability_region(&sys, &p, &grid, &CctOptions::default()).unwrap();
        let has = |k| sr.annotations.iter().any(|a| a.kind == k);
        assert!(has(AnnotationKind::StableFeasibilitySegment));
        assert!(has(AnnotationKind::UnstableFeasibilitySegment));
        assert!(has(AnnotationKind::StableManifoldSample));
        for a in sr.annotations.iter().filter(|a| a.kind == AnnotationKind::SemiSaddle) {
            assert!(a.h_dot_normalized.abs() <= 1e-6);
        }
    }

    #[test]
    fn rejects_non_planar() {
        use crate::model::{ExprPhaseDef, ExprSystem, ExprSystemDef};
        let phase = ExprPhaseDef {
            field: vec!["-x".into()],
            constraints: vec![],
        };
        let sys = ExprSystem::new(&ExprSystemDef {
            states: vec!["x".into()],
            params: vec![],
            constants: Default::default(),
            pre: phase.clone(),
            fault: phase.clone(),
            post: phase,
        })
        .unwrap();
        let grid = GridSpec {
            x1_range: (0.0, 1.0),
            x2_range: (0.0, 1.0),
            nx: 2,
            ny: 2,
        };
        assert!(matches!(
            sample_stability_region(&sys, &DVector::zeros(0), &grid, &CctOptions::default()),
            Err(Error::NotPlanar { n: 1 })
        ));
    }
}
