//! Experiment configuration: a flat TOML document.
//!
//! Only `experiment` is required. Every other key is optional and falls back
//! to the experiment's default; keys an experiment does not read are
//! accepted but listed as unused by `validate`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::registry::{self, Experiment};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub benchmark: Option<String>,
    pub seed: Option<u64>,
    /// Parent directory of the run directory (default `runs`).
    pub output_dir: Option<String>,
    pub horizon: Option<f64>,
    pub steps: Option<usize>,
    /// `"path"` or `"recombining"`.
    pub mode: Option<String>,
    /// Refinement levels (numbers of time steps).
    pub levels: Option<Vec<usize>>,
    /// Grid spacings, one per refinement level.
    pub spacings: Option<Vec<f64>>,
    /// Tolerances, one per refinement level.
    pub tolerances: Option<Vec<f64>>,
    pub policy_cap: Option<u64>,
    /// Monte Carlo sample size.
    pub paths: Option<usize>,
    pub pilot_paths: Option<usize>,
    pub euler_steps: Option<usize>,
    pub pairs: Option<usize>,
    pub max_n: Option<usize>,
    /// Nodal-set threshold; defaults to twice the terminal interpolation error.
    pub eps: Option<f64>,
    pub tolerance: Option<f64>,
    /// Skip the grid dual in `static-value`.
    pub primal_only: Option<bool>,
    /// Allow intra-experiment parallelism (results are identical either way).
    pub parallel: Option<bool>,
}

/// One field-level diagnostic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    Parse(String),
    UnknownExperiment { name: String, valid: Vec<&'static str> },
    Invalid(Vec<FieldError>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse(msg) => write!(f, "config does not parse: {msg}"),
            ConfigError::UnknownExperiment { name, valid } => {
                write!(f, "unknown experiment '{name}'; valid experiments: {}", valid.join(", "))
            }
            ConfigError::Invalid(errors) => {
                writeln!(f, "config failed validation:")?;
                for e in errors {
                    writeln!(f, "  {}: {}", e.field, e.message)?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn for_experiment(name: &str) -> Self {
        Self { experiment: name.to_string(), ..Self::default() }
    }

    /// Checks identifiers, ranges and required fields.
    pub fn validate(&self) -> Result<&'static Experiment, ConfigError> {
        let exp = registry::find(&self.experiment).ok_or_else(|| ConfigError::UnknownExperiment {
            name: self.experiment.clone(),
            valid: registry::EXPERIMENTS.iter().map(|e| e.name).collect(),
        })?;
        let mut errors = Vec::new();
        let mut err = |field: &str, message: String| errors.push(FieldError { field: field.into(), message });
        if exp.stochastic && self.seed.is_none() {
            err("seed", format!("required: '{}' draws random numbers", exp.name));
        }
        if let Some(b) = &self.benchmark {
            if !exp.benchmarks.contains(&b.as_str()) {
                let hint = if exp.benchmarks.is_empty() {
                    "this experiment takes no benchmark".to_string()
                } else {
                    format!("expected one of {}", exp.benchmarks.join(", "))
                };
                match b.parse::<tic_core::benchmarks::BenchmarkId>() {
                    Err(e) => err("benchmark", format!("{e}")),
                    Ok(_) => err("benchmark", format!("'{b}' is not supported here; {hint}")),
                }
            }
        }
        if let Some(m) = &self.mode {
            if m != "path" && m != "recombining" {
                err("mode", format!("'{m}' must be \"path\" or \"recombining\""));
            }
        }
        if let Some(h) = self.horizon {
            if !(h.is_finite() && h > 0.0) {
                err("horizon", format!("{h} must be positive and finite"));
            }
        }
        for (name, v) in [
            ("steps", self.steps),
            ("paths", self.paths),
            ("pilot_paths", self.pilot_paths),
            ("euler_steps", self.euler_steps),
            ("pairs", self.pairs),
            ("max_n", self.max_n),
        ] {
            if v == Some(0) {
                err(name, "must be positive".into());
            }
        }
        if self.policy_cap == Some(0) {
            err("policy_cap", "must be positive".into());
        }
        for (name, v) in [("eps", self.eps), ("tolerance", self.tolerance)] {
            if let Some(x) = v {
                if !(x.is_finite() && x > 0.0) {
                    err(name, format!("{x} must be positive and finite"));
                }
            }
        }
        if let Some(levels) = &self.levels {
            if levels.is_empty() || levels.contains(&0) {
                err("levels", "must be a non-empty list of positive step counts".into());
            }
        }
        for (name, list) in [("spacings", &self.spacings), ("tolerances", &self.tolerances)] {
            if let Some(list) = list {
                if list.is_empty() || list.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                    err(name, "must be a non-empty list of positive numbers".into());
                }
            }
        }
        if let (Some(l), Some(s)) = (&self.levels, &self.spacings) {
            if exp.paired_levels && l.len() != s.len() {
                err("spacings", format!("needs one entry per level ({} levels, {} spacings)", l.len(), s.len()));
            }
        }
        if let (Some(l), Some(t)) = (&self.levels, &self.tolerances) {
            if l.len() != t.len() {
                err("tolerances", format!("needs one entry per level ({} levels, {} tolerances)", l.len(), t.len()));
            }
        }
        if errors.is_empty() {
            Ok(exp)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    /// Keys that are set but not read by the configured experiment.
    pub fn unused_fields(&self, exp: &Experiment) -> Vec<String> {
        let value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object()
            .expect("config is an object")
            .iter()
            .filter(|(k, v)| !v.is_null() && !["experiment", "output_dir", "parallel"].contains(&k.as_str()) && !exp.fields.contains(&k.as_str()))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Hash of the config (without `output_dir`), used to name run directories.
    pub fn digest(&self) -> String {
        let mut echo = self.clone();
        echo.output_dir = None;
        let canonical = serde_json::to_string(&serde_json::to_value(&echo).expect("config serializes")).expect("json");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..6])
    }

    /// `<experiment>-<seed>-<digest>`.
    pub fn run_name(&self) -> String {
        let seed = self.seed.map_or_else(|| "noseed".to_string(), |s| s.to_string());
        format!("{}-{}-{}", self.experiment, seed, self.digest())
    }

    pub fn horizon_or(&self, default: f64) -> f64 {
        self.horizon.unwrap_or(default)
    }

    pub fn steps_or(&self, default: usize) -> usize {
        self.steps.unwrap_or(default)
    }

    pub fn tree_mode(&self, default: tic_core::lattice::TreeMode) -> tic_core::lattice::TreeMode {
        match self.mode.as_deref() {
            Some("path") => tic_core::lattice::TreeMode::Path,
            Some("recombining") => tic_core::lattice::TreeMode::Recombining,
            _ => default,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("experiment = \"duality\"\nfoo = 1\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn unknown_experiment_lists_valid_ones() {
        let cfg = ExperimentConfig::for_experiment("nope");
        match cfg.validate() {
            Err(ConfigError::UnknownExperiment { valid, .. }) => assert!(valid.len() >= 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stochastic_experiment_needs_a_seed() {
        let cfg = ExperimentConfig::for_experiment("tau-bound");
        match cfg.validate() {
            Err(ConfigError::Invalid(errs)) => assert_eq!(errs[0].field, "seed"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn field_diagnostics_are_collected() {
        let cfg = ExperimentConfig {
            steps: Some(0),
            mode: Some("tree".into()),
            benchmark: Some("probability_distortion".into()),
            ..ExperimentConfig::for_experiment("benchmark-verify")
        };
        match cfg.validate() {
            Err(ConfigError::Invalid(errs)) => {
                let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
                assert_eq!(fields, ["benchmark", "mode", "steps"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn digest_ignores_output_dir() {
        let a = ExperimentConfig { output_dir: Some("x".into()), ..ExperimentConfig::for_experiment("duality") };
        let b = ExperimentConfig::for_experiment("duality");
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.run_name(), format!("duality-noseed-{}", a.digest()));
    }
}
