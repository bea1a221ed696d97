use std::path::Path;

use cct_core::sensitivity::probe_mode_switch;
use cct_core::validate::{default_fd_step, fd_trajectory_sensitivity};
use cct_core::{
    cct_sensitivity, compute_cct, eval_h, fd_cct_slope, find_equilibrium, integrate_with_sensitivities,
    sample_stability_region, scan_cct, sep_sensitivity, CctOptions, CriticalResult, Error, IntegrationOptions,
    OracleReport, Phase, Trajectory,
};
use nalgebra::DVector;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{Loaded, QUANTITIES};
use crate::output::{num, opt, write_csv, write_json};
use crate::Failure;

/// Relative parameter offset used to look for a nearby mode switch.
const PROBE_REL: f64 = 0.01;

fn error_doc(hash: &str, e: &Error) -> Value {
    json!({
        "config_sha256": hash,
        "error": e.kind(),
        "message": e.to_string(),
    })
}

/// Write the error document and turn `e` into a computation failure.
fn fail(dir: &Path, name: &str, hash: &str, e: Error) -> Failure {
    match write_json(dir, name, &error_doc(hash, &e)) {
        Ok(()) => Failure::Compute(e.to_string()),
        Err(w) => w,
    }
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<_>>())
}

fn trajectory_rows(sys: &Loaded, phase: Phase, traj: &Trajectory, t0: f64) -> Vec<Vec<String>> {
    traj.times
        .iter()
        .zip(&traj.states)
        .map(|(t, x)| {
            let mut row = vec![num(t0 + t)];
            row.extend(x.iter().map(|v| num(*v)));
            row.push(num(eval_h(sys.system.as_ref(), phase, x, &sys.p).unwrap_or(f64::NAN)));
            row
        })
        .collect()
}

fn state_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("x{i}")));
    h.push("H".into());
    h
}

fn critical_doc(l: &Loaded, c: &CriticalResult) -> Value {
    json!({
        "config_sha256": l.hash,
        "params": l.system.param_names(),
        "p": vec_json(&l.p),
        "mode": c.mode.number(),
        "mode_name": format!("{:?}", c.mode),
        "t_cr": c.t_cr,
        "bracket": [c.t_stable, c.t_unstable],
        "bracket_width": c.bracket_width(),
        "x_cr": vec_json(&c.x_cr),
        "T": c.t_limit,
        "x_T": vec_json(&c.x_limit),
        "t1": c.t1,
        "t2": c.t2,
        "t_hit": c.t_hit,
        "H_at_T": c.h_raw_at_limit,
        "H_ref": c.operating_point.h_ref,
        "x_pre": vec_json(&c.operating_point.x_pre),
        "x_post": vec_json(&c.operating_point.x_post),
        "horizon_bound": c.horizon_bound,
        "history": c.history,
    })
}

pub fn cmd_cct(l: &Loaded, out: &Path, verify: bool) -> Result<(), Failure> {
    let opts = l.options(false);
    let sys = l.system.as_ref();
    let c = compute_cct(sys, &l.p, &opts).map_err(|e| fail(out, "cct.json", &l.hash, e))?;
    let mut doc = critical_doc(l, &c);

    let header = state_header(sys.state_dim());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        out,
        "fault_trajectory.csv",
        &l.hash,
        &header,
        &trajectory_rows(l, Phase::FaultOn, &c.fault_trajectory, 0.0),
    )?;
    let t_post = if c.post_trajectory.times.len() > 1 { c.t_unstable } else { c.t_cr };
    write_csv(
        out,
        "post_trajectory.csv",
        &l.hash,
        &header,
        &trajectory_rows(l, Phase::PostFault, &c.post_trajectory, t_post),
    )?;

    let mut failed = None;
    if verify {
        let step = opts.bisection_tol / 10.0;
        match scan_cct(sys, &l.p, step, &opts) {
            Ok(s) => {
                let r = OracleReport::with_abs_tol("cct", c.t_cr, s.cct, step, 0.0, opts.bisection_tol);
                if !r.pass || !s.violations.is_empty() {
                    failed = Some(format!(
                        "scan oracle disagrees: t_cr = {}, scan = {}, monotonicity violations = {}",
                        c.t_cr,
                        s.cct,
                        s.violations.len()
                    ));
                }
                doc["verify"] = json!({ "scan": s, "report": r });
            }
            Err(e) => {
                failed = Some(format!("scan oracle failed: {e}"));
                doc["verify"] = error_doc(&l.hash, &e);
            }
        }
    }
    write_json(out, "cct.json", &doc)?;
    match failed {
        Some(msg) => Err(Failure::Validation(msg)),
        None => Ok(()),
    }
}

fn sensitivity_row(l: &Loaded, c: &CriticalResult, k: usize, opts: &CctOptions, verify: bool) -> (Value, bool) {
    let sys = l.system.as_ref();
    let mut row = json!({ "param": sys.param_names()[k], "index": k });
    let s = match cct_sensitivity(sys, &l.p, c, k, opts) {
        Ok(s) => s,
        Err(e) => {
            row["error"] = json!(e.kind());
            row["message"] = json!(e.to_string());
            return (row, false);
        }
    };
    let mut warnings = s.warnings.clone();
    match probe_mode_switch(sys, &l.p, k, c.mode, PROBE_REL, opts) {
        Ok(Some(w)) => warnings.push(w),
        Ok(None) => {}
        Err(e) => warnings.push(format!("mode-switch probe failed: {e}")),
    }
    row["mode"] = json!(s.mode.number());
    row["dtcl_dp"] = json!(s.dtcl_dp);
    row["dT_dp"] = json!(s.dt_limit_dp);
    row["pivot"] = json!(s.pivot);
    row["warnings"] = json!(warnings);
    let mut ok = true;
    if verify {
        match fd_cct_slope(sys, &l.p, k, None, opts) {
            Ok(fd) => {
                let r = OracleReport::with_abs_tol(
                    format!("dtcl/d{}", sys.param_names()[k]),
                    s.dtcl_dp,
                    fd.slope,
                    fd.step,
                    l.config.validate.slope_tol,
                    l.config.validate.slope_abs_tol,
                );
                ok = r.pass;
                row["verify"] = json!(r);
            }
            Err(e) => {
                ok = false;
                row["verify"] = json!({ "error": e.kind(), "message": e.to_string() });
            }
        }
    }
    (row, ok)
}

pub fn cmd_sens(l: &Loaded, out: &Path, verify: bool) -> Result<(), Failure> {
    let opts = l.options(true);
    let ks = l.active_params().map_err(Failure::Config)?;
    let c = compute_cct(l.system.as_ref(), &l.p, &opts).map_err(|e| fail(out, "sens.json", &l.hash, e))?;
    let rows: Vec<(Value, bool)> = ks.par_iter().map(|&k| sensitivity_row(l, &c, k, &opts, verify)).collect();
    let computed = rows.iter().all(|(r, _)| r.get("error").is_none());
    let verified = rows.iter().all(|(_, ok)| *ok);
    let doc = json!({
        "config_sha256": l.hash,
        "mode": c.mode.number(),
        "t_cr": c.t_cr,
        "bracket": [c.t_stable, c.t_unstable],
        "rows": rows.into_iter().map(|(r, _)| r).collect::<Vec<_>>(),
    });
    write_json(out, "sens.json", &doc)?;
    if !computed {
        Err(Failure::Compute(format!("sensitivity not available in {}", c.mode)))
    } else if verify && !verified {
        Err(Failure::Validation("sensitivity disagrees with the finite-difference oracle".into()))
    } else {
        Ok(())
    }
}

const SWEEP_HEADER: [&str; 8] = [
    "value",
    "t_cr",
    "mode",
    "t_stable",
    "t_unstable",
    "dtcl_dp",
    "tangent_intercept",
    "note",
];

fn sweep_row(l: &Loaded, k: usize, value: f64, tangents: bool, opts: &CctOptions) -> Vec<String> {
    let sys = l.system.as_ref();
    let mut p = l.p.clone();
    p[k] = value;
    let c = match compute_cct(sys, &p, opts) {
        Ok(c) => c,
        Err(e) => {
            let mut row = vec![num(value)];
            row.extend(std::iter::repeat_n(String::new(), 6));
            row.push(format!("{}: {e}", e.kind()));
            return row;
        }
    };
    let mut slope = None;
    let mut notes = Vec::new();
    if tangents {
        match cct_sensitivity(sys, &p, &c, k, opts) {
            Ok(s) => {
                slope = Some(s.dtcl_dp);
                notes.extend(s.warnings);
            }
            Err(e) => notes.push(format!("{}: {e}", e.kind())),
        }
        match probe_mode_switch(sys, &p, k, c.mode, PROBE_REL, opts) {
            Ok(Some(w)) => notes.push(w),
            Ok(None) => {}
            Err(e) => notes.push(format!("mode-switch probe failed: {e}")),
        }
    }
    vec![
        num(value),
        num(c.t_cr),
        c.mode.number().to_string(),
        num(c.t_stable),
        num(c.t_unstable),
        opt(slope),
        opt(slope.map(|s| c.t_cr - s * value)),
        notes.join("; "),
    ]
}

pub fn cmd_sweep(l: &Loaded, out: &Path) -> Result<(), Failure> {
    let spec = l
        .config
        .sweep
        .as_ref()
        .ok_or_else(|| Failure::Config("config has no `sweep` section".into()))?;
    let k = l.param_index(&spec.param).map_err(Failure::Config)?;
    let opts = l.options(spec.tangents);
    let rows: Vec<Vec<String>> = spec
        .values()
        .par_iter()
        .map(|&v| sweep_row(l, k, v, spec.tangents, &opts))
        .collect();
    write_csv(out, "sweep.csv", &l.hash, &SWEEP_HEADER, &rows)
}

pub fn cmd_sr_grid(l: &Loaded, out: &Path) -> Result<(), Failure> {
    let grid = l
        .config
        .grid
        .as_ref()
        .ok_or_else(|| Failure::Config("config has no `grid` section".into()))?;
    let opts = l.options(false);
    let sr = sample_stability_region(l.system.as_ref(), &l.p, grid, &opts).map_err(|e| match e {
        Error::NotPlanar { .. } => Failure::Config(e.to_string()),
        e => Failure::Compute(e.to_string()),
    })?;
    let cells: Vec<Vec<String>> = sr
        .cells
        .iter()
        .map(|c| vec![num(c.x1), num(c.x2), format!("{:?}", c.class), num(c.t_event)])
        .collect();
    write_csv(out, "sr_cells.csv", &l.hash, &["x1", "x2", "class", "t_event"], &cells)?;
    let ann: Vec<Vec<String>> = sr
        .annotations
        .iter()
        .map(|a| vec![num(a.x1), num(a.x2), format!("{:?}", a.kind), num(a.h_dot_normalized)])
        .collect();
    write_csv(out, "sr_annotations.csv", &l.hash, &["x1", "x2", "kind", "h_dot_normalized"], &ann)
}

fn sep_reports(l: &Loaded, opts: &CctOptions, ks: &[usize]) -> Result<Vec<OracleReport>, Error> {
    let sys = l.system.as_ref();
    let guess = opts.x_guess.clone().unwrap_or_else(|| DVector::zeros(sys.state_dim()));
    let pre = find_equilibrium(sys, Phase::PreFault, &l.p, &guess, &opts.newton)?;
    let m4 = sep_sensitivity(sys, Phase::PreFault, &l.p, &pre.x_s)?;
    let mut out = Vec::new();
    for &k in ks {
        let h = default_fd_step(l.p[k]);
        let at = |s: f64| {
            let mut q = l.p.clone();
            q[k] += s * h;
            find_equilibrium(sys, Phase::PreFault, &q, &pre.x_s, &opts.newton).map(|r| r.x_s)
        };
        let fd = (at(1.0)? - at(-1.0)?) / (2.0 * h);
        for i in 0..sys.state_dim() {
            out.push(OracleReport::with_abs_tol(
                format!("dxs_pre[x{}]/d{}", i + 1, sys.param_names()[k]),
                m4[(i, k)],
                fd[i],
                h,
                1e-6,
                1e-9,
            ));
        }
    }
    Ok(out)
}

fn trajectory_reports(l: &Loaded, opts: &CctOptions, ks: &[usize]) -> Result<Vec<OracleReport>, Error> {
    let sys = l.system.as_ref();
    let guess = opts.x_guess.clone().unwrap_or_else(|| DVector::zeros(sys.state_dim()));
    let pre = find_equilibrium(sys, Phase::PreFault, &l.p, &guess, &opts.newton)?;
    let x0 = pre.x_s.add_scalar(0.05);
    let t = 0.2;
    let iopts = IntegrationOptions::default().with_t_max(t).with_tolerances(1e-11, 1e-13);
    let eps = 1e-5;
    let mut out = Vec::new();
    for phase in [Phase::FaultOn, Phase::PostFault] {
        let (_, bundle) = integrate_with_sensitivities(sys, phase, &x0, &l.p, &iopts)?;
        let (px, pp) = (bundle.final_phi_x(), bundle.final_phi_p());
        for (n, &k) in ks.iter().enumerate() {
            let (fx, fp) = fd_trajectory_sensitivity(sys, phase, &x0, &l.p, t, k, eps)?;
            if n == 0 {
                for (idx, (a, o)) in px.iter().zip(fx.iter()).enumerate() {
                    let (i, j) = (idx % px.nrows(), idx / px.nrows());
                    out.push(OracleReport::with_abs_tol(
                        format!("{phase:?} Phi_x[{i}][{j}]"),
                        *a,
                        *o,
                        eps,
                        1e-3,
                        1e-8,
                    ));
                }
            }
            for i in 0..sys.state_dim() {
                out.push(OracleReport::with_abs_tol(
                    format!("{phase:?} Phi_p[{i}][{}]", sys.param_names()[k]),
                    pp[(i, k)],
                    fp[i],
                    eps,
                    1e-3,
                    1e-8,
                ));
            }
        }
    }
    Ok(out)
}

fn slope_reports(l: &Loaded, opts: &CctOptions, ks: &[usize]) -> Result<Vec<OracleReport>, Error> {
    let sys = l.system.as_ref();
    let c = compute_cct(sys, &l.p, opts)?;
    ks.par_iter()
        .map(|&k| {
            let s = cct_sensitivity(sys, &l.p, &c, k, opts)?;
            let fd = fd_cct_slope(sys, &l.p, k, None, opts)?;
            Ok(OracleReport::with_abs_tol(
                format!("dtcl/d{}", sys.param_names()[k]),
                s.dtcl_dp,
                fd.slope,
                fd.step,
                l.config.validate.slope_tol,
                l.config.validate.slope_abs_tol,
            ))
        })
        .collect()
}

fn scan_reports(l: &Loaded) -> Result<Vec<OracleReport>, Error> {
    let sys = l.system.as_ref();
    let opts = l.options(false);
    let c = compute_cct(sys, &l.p, &opts)?;
    let step = opts.bisection_tol / 10.0;
    let s = scan_cct(sys, &l.p, step, &opts)?;
    Ok(vec![
        OracleReport::with_abs_tol("cct", c.t_cr, s.cct, step, 0.0, opts.bisection_tol),
        OracleReport::with_abs_tol("scan_monotonicity_violations", s.violations.len() as f64, 0.0, step, 0.0, 0.0),
    ])
}

pub fn cmd_validate(l: &Loaded, out: &Path) -> Result<(), Failure> {
    let opts = l.options(true);
    let ks = l.active_params().map_err(Failure::Config)?;
    let selected: Vec<&str> = if l.config.validate.quantities.is_empty() {
        QUANTITIES.to_vec()
    } else {
        l.config.validate.quantities.iter().map(String::as_str).collect()
    };
    let mut reports = Vec::new();
    for q in selected {
        let r = match q {
            "sep_sensitivity" => sep_reports(l, &opts, &ks),
            "trajectory_sensitivity" => trajectory_reports(l, &opts, &ks),
            "cct_slope" => slope_reports(l, &opts, &ks),
            "scan_cct" => scan_reports(l),
            _ => unreachable!("quantities are checked at load"),
        };
        reports.extend(r.map_err(|e| Failure::Compute(format!("{q}: {e}")))?);
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.quantity.clone(),
                num(r.analytic),
                num(r.oracle),
                num(r.rel_error),
                num(r.step),
                num(r.tol),
                num(r.abs_tol),
                r.pass.to_string(),
            ]
        })
        .collect();
    write_csv(
        out,
        "validate.csv",
        &l.hash,
        &["quantity", "analytic", "oracle", "rel_error", "step", "tol", "abs_tol", "pass"],
        &rows,
    )?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.quantity.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("failing rows: {}", failed.join(", "))))
    }
}
