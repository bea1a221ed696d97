use std::collections::BTreeMap;
use std::path::Path;

use cct_core::{CctOptions, ConstrainedSystem, ExprSystem, ExprSystemDef, GridSpec, Smib, SmibParams};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SystemConfig {
    Smib(SmibParams),
    Expr(ExprSystemDef),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: String,
    pub from: f64,
    pub to: f64,
    pub count: usize,
    /// Also report the analytic tangent line at every point.
    #[serde(default)]
    pub tangents: bool,
}

impl SweepSpec {
    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![self.from],
            n => (0..n)
                .map(|i| self.from + (self.to - self.from) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bisection_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundary_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_min_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sep_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_bisections: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search_start: Option<f64>,
}

impl Tolerances {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let num = || value.parse::<f64>().map_err(|e| format!("--tol {key}={value}: {e}"));
        match key {
            "bisection_tol" => self.bisection_tol = Some(num()?),
            "rel_tol" => self.rel_tol = Some(num()?),
            "abs_tol" => self.abs_tol = Some(num()?),
            "max_step" => self.max_step = Some(num()?),
            "t_max" => self.t_max = Some(num()?),
            "boundary_threshold" => self.boundary_threshold = Some(num()?),
            "norm_min_threshold" => self.norm_min_threshold = Some(num()?),
            "sep_tol" => self.sep_tol = Some(num()?),
            "search_start" => self.search_start = Some(num()?),
            "max_bisections" => {
                self.max_bisections = Some(value.parse().map_err(|e| format!("--tol {key}={value}: {e}"))?)
            }
            _ => return Err(format!("unknown tolerance `{key}`")),
        }
        Ok(())
    }

    fn apply(&self, opts: &mut CctOptions) {
        let i = &mut opts.integration;
        if let Some(v) = self.rel_tol {
            i.rel_tol = v;
        }
        if let Some(v) = self.abs_tol {
            i.abs_tol = v;
        }
        if let Some(v) = self.max_step {
            i.max_step = v;
        }
        if let Some(v) = self.t_max {
            i.t_max = v;
        }
        if let Some(v) = self.bisection_tol {
            opts.bisection_tol = v;
        }
        if let Some(v) = self.boundary_threshold {
            opts.boundary_threshold = v;
        }
        if let Some(v) = self.norm_min_threshold {
            opts.norm_min_threshold = v;
        }
        if let Some(v) = self.sep_tol {
            opts.sep_tol = v;
        }
        if let Some(v) = self.max_bisections {
            opts.max_bisections = v;
        }
        if let Some(v) = self.search_start {
            opts.search_start = v;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSpec {
    /// Oracle groups to run; all of them when empty.
    #[serde(default)]
    pub quantities: Vec<String>,
    #[serde(default = "default_slope_tol")]
    pub slope_tol: f64,
    #[serde(default = "default_slope_abs_tol")]
    pub slope_abs_tol: f64,
}

fn default_slope_tol() -> f64 {
    0.05
}

fn default_slope_abs_tol() -> f64 {
    1e-4
}

impl Default for ValidateSpec {
    fn default() -> Self {
        Self {
            quantities: Vec::new(),
            slope_tol: default_slope_tol(),
            slope_abs_tol: default_slope_abs_tol(),
        }
    }
}

pub const QUANTITIES: [&str; 4] = ["sep_sensitivity", "trajectory_sensitivity", "cct_slope", "scan_cct"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    /// Overrides of individual parameter values by name.
    #[serde(default)]
    pub p0: BTreeMap<String, f64>,
    /// Parameters to differentiate with respect to; all when empty.
    #[serde(default)]
    pub params: Vec<String>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Start from the tight preset instead of the defaults.
    #[serde(default)]
    pub precise: Option<bool>,
    #[serde(default)]
    pub x_guess: Option<Vec<f64>>,
    #[serde(default)]
    pub validate: ValidateSpec,
}

pub struct Loaded {
    pub config: RunConfig,
    pub system: Box<dyn ConstrainedSystem>,
    pub p: DVector<f64>,
    pub hash: String,
}

impl Loaded {
    pub fn param_index(&self, name: &str) -> Result<usize, String> {
        self.system
            .param_index(name)
            .ok_or_else(|| format!("unknown parameter `{name}`; known: {}", self.system.param_names().join(", ")))
    }

    /// Indices of the configured sensitivity parameters.
    pub fn active_params(&self) -> Result<Vec<usize>, String> {
        if self.config.params.is_empty() {
            return Ok((0..self.system.param_dim()).collect());
        }
        self.config.params.iter().map(|n| self.param_index(n)).collect()
    }

    pub fn options(&self, precise_by_default: bool) -> CctOptions {
        let mut opts = if self.config.precise.unwrap_or(precise_by_default) {
            CctOptions::precise()
        } else {
            CctOptions::default()
        };
        self.config.tolerances.apply(&mut opts);
        opts.x_guess = self.config.x_guess.as_ref().map(|v| DVector::from_vec(v.clone()));
        opts
    }
}

pub fn load(path: &Path, overrides: &[String]) -> Result<Loaded, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut config: RunConfig =
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))?;
    for item in overrides.iter().flat_map(|o| o.split(',')).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| format!("--tol expects key=value, got `{item}`"))?;
        config.tolerances.set(k.trim(), v.trim())?;
    }

    let (system, mut p): (Box<dyn ConstrainedSystem>, DVector<f64>) = match &config.system {
        SystemConfig::Smib(params) => {
            params.validate()?;
            (Box::new(Smib::new(*params)), params.param_vector())
        }
        SystemConfig::Expr(def) => {
            let sys = ExprSystem::new(def).map_err(|e| e.to_string())?;
            let p = sys.nominal_params().clone();
            (Box::new(sys), p)
        }
    };
    for (name, value) in &config.p0 {
        let k = system
            .param_index(name)
            .ok_or_else(|| format!("unknown parameter `{name}` in p0"))?;
        p[k] = *value;
    }
    if let Some(x) = &config.x_guess {
        if x.len() != system.state_dim() {
            return Err(format!("x_guess has {} entries, system has {} states", x.len(), system.state_dim()));
        }
    }
    for q in &config.validate.quantities {
        if !QUANTITIES.contains(&q.as_str()) {
            return Err(format!("unknown validation quantity `{q}`; known: {}", QUANTITIES.join(", ")));
        }
    }

    let canonical = serde_json::to_vec(&config).map_err(|e| e.to_string())?;
    let hash = hex::encode(Sha256::digest(&canonical));
    let loaded = Loaded {
        config,
        system,
        p,
        hash,
    };
    loaded.active_params()?;
    if let Some(s) = &loaded.config.sweep {
        loaded.param_index(&s.param)?;
        if !(s.from.is_finite() && s.to.is_finite()) {
            return Err("sweep range must be finite".into());
        }
    }
    loaded.options(false).validate().map_err(|e| e.to_string())?;
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_values_include_both_ends() {
        let s = SweepSpec {
            param: "Pm".into(),
            from: 0.4,
            to: 0.58,
            count: 10,
            tangents: false,
        };
        let v = s.values();
        assert_eq!(v.len(), 10);
        assert_eq!(v[0], 0.4);
        assert!((v[9] - 0.58).abs() < 1e-15);
        assert!(SweepSpec { count: 0, ..s }.values().is_empty());
    }

    #[test]
    fn tolerance_overrides() {
        let mut t = Tolerances::default();
        t.set("bisection_tol", "1e-4").unwrap();
        t.set("max_bisections", "7").unwrap();
        assert!(t.set("nope", "1").is_err());
        assert!(t.set("rel_tol", "x").is_err());
        let mut o = CctOptions::default();
        t.apply(&mut o);
        assert_eq!(o.bisection_tol, 1e-4);
        assert_eq!(o.max_bisections, 7);
    }

    #[test]
    fn smib_config_parses() {
        let c: RunConfig = serde_json::from_str(
            r#"{"system": {"kind": "smib", "Pm": 0.5, "M": 0.1, "delta_max": 0.8, "omega_max": 0.6}}"#,
        )
        .unwrap();
        match c.system {
            SystemConfig::Smib(p) => assert_eq!(p.d, 0.5),
            _ => panic!("expected smib"),
        }
        assert!(serde_json::from_str::<RunConfig>(r#"{"system": {"kind": "smib", "Pm": 0.5}}"#).is_err());
    }
}
