//! Run configuration: one JSON document, with `--key=value` overrides on
//! dotted paths (`--reduction.tau=1e-3`).

use std::path::{Path, PathBuf};

use hyperred_core::material::MaterialParams;
use hyperred_core::mesh::PlateGeometry;
use hyperred_core::solver::SolverConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Fom,
    Dpod,
    Ddeim,
    Decsw,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reduction {
    #[serde(default)]
    pub method: Method,
    pub m_u: Option<usize>,
    pub m_d: Option<usize>,
    pub k_u: Option<usize>,
    pub k_d: Option<usize>,
    pub tau: Option<f64>,
}

impl Reduction {
    pub fn modes(&self) -> Result<(usize, usize), CliError> {
        match (self.m_u, self.m_d) {
            (Some(u), Some(d)) => Ok((u, d)),
            _ => Err(CliError::Usage(format!("method {:?} needs reduction.m_u and reduction.m_d", self.method))),
        }
    }

    pub fn deim_size(&self) -> Result<(usize, usize), CliError> {
        match (self.k_u, self.k_d) {
            (Some(u), Some(d)) => Ok((u, d)),
            _ => Err(CliError::Usage("method ddeim needs reduction.k_u and reduction.k_d".into())),
        }
    }

    pub fn tau(&self) -> Result<f64, CliError> {
        match self.tau {
            Some(t) if t > 0.0 => Ok(t),
            Some(t) => Err(CliError::Usage(format!("reduction.tau = {t} must be positive"))),
            None => Err(CliError::Usage("method decsw needs reduction.tau".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizeMode {
    /// Full-order model at every Brent iterate.
    Fom,
    /// Full-order seeds, then the reduced model of `reduction`.
    #[default]
    Rom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSpec {
    /// Target limit load in N.
    pub target_limit_load: f64,
    pub b_lo: f64,
    pub b_hi: f64,
    /// Width tolerance in mm.
    pub tol_b: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub mode: OptimizeMode,
}

fn default_max_iterations() -> usize {
    40
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: PlateGeometry,
    pub material: MaterialParams,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Node set whose maximum `u_y` is the control displacement.
    #[serde(default = "default_control_set")]
    pub control_set: String,
    #[serde(default)]
    pub reduction: Reduction,
    /// Snapshot directory (input of `rom-build`, and of `rom-run` when
    /// replaying the training step sizes).
    pub snapshots: Option<PathBuf>,
    /// Reduction artifacts; defaults to `output`.
    pub artifacts: Option<PathBuf>,
    /// Output directory of a reference run (`record.csv`, `run.json`).
    pub reference: Option<PathBuf>,
    /// Output directory of the candidate run (`compare` only).
    pub candidate: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Replay the training run's arc lengths up to its final control
    /// displacement (reduced runs at the training parameters).
    #[serde(default)]
    pub replay_schedule: bool,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub optimize: Option<OptimizeSpec>,
}

fn default_control_set() -> String {
    "top".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_samples() -> usize {
    1000
}

impl RunConfig {
    /// Reads `path`, applies the overrides and resolves relative paths
    /// against the configuration file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let mut doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg = Self::from_value(doc)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_value(doc: Value) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.solver.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.material.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.samples == 0 {
            return Err(CliError::Usage("samples must be positive".into()));
        }
        match self.reduction.method {
            Method::Fom => {}
            Method::Dpod => {
                self.reduction.modes()?;
            }
            Method::Ddeim => {
                self.reduction.modes()?;
                self.reduction.deim_size()?;
            }
            Method::Decsw => {
                self.reduction.modes()?;
                self.reduction.tau()?;
            }
        }
        if let Some(o) = &self.optimize {
            if !(o.b_lo > 0.0 && o.b_lo < o.b_hi) || !(o.tol_b > 0.0) || !o.target_limit_load.is_finite() {
                return Err(CliError::Usage("optimize needs 0 < b_lo < b_hi, tol_b > 0 and a finite target".into()));
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        for p in [&mut self.snapshots, &mut self.artifacts, &mut self.reference, &mut self.candidate].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn artifacts_dir(&self) -> &Path {
        self.artifacts.as_deref().unwrap_or(&self.output)
    }

    pub fn require<'a>(&self, p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
        p.as_deref().ok_or_else(|| CliError::Usage(format!("configuration needs `{name}`")))
    }
}

/// Sets `doc[a][b]… = value` for `key=value` with `key = "a.b…"`. The value
/// is parsed as JSON, falling back to a plain string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let spec = spec.trim_start_matches("--");
    let (key, raw) = spec.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Usage(format!("bad override key `{key}`")));
        }
        let obj = node.as_object_mut().ok_or_else(|| CliError::Usage(format!("`{key}`: not an object at `{part}`")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_set_nested_values() {
        let mut doc = json!({"reduction": {"method": "dpod"}});
        apply_override(&mut doc, "--reduction.m_u=20").unwrap();
        apply_override(&mut doc, "output=runs/a").unwrap();
        apply_override(&mut doc, "solver.arc_schedule=[0.1,0.2]").unwrap();
        assert_eq!(doc["reduction"]["m_u"], json!(20));
        assert_eq!(doc["output"], json!("runs/a"));
        assert_eq!(doc["solver"]["arc_schedule"], json!([0.1, 0.2]));
        assert!(apply_override(&mut doc, "novalue").is_err());
        assert!(apply_override(&mut doc, "output.x=1").is_err());
    }
}
