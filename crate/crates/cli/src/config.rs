//! Run configuration: defaults, JSON overrides, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use cylpose::backbone::BackboneConfig;
use cylpose::evalkit::{ProtocolKind, DEFAULT_THRESHOLD_M};
use cylpose::geom::ViewId;
use cylpose::synthgait::DatasetSpec;
use cylpose::semitrain::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub views: Vec<ViewId>,
    pub threshold: f64,
    pub protocol: Option<ProtocolKind>,
    pub folds: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { views: ViewId::ALL.to_vec(), threshold: DEFAULT_THRESHOLD_M, protocol: None, folds: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivSettings {
    /// Empty means every multiple of the θ stride in `[-C, C]`.
    pub shifts: Vec<i64>,
    pub clouds: usize,
    pub points: usize,
    pub heatmap_tol: f64,
    pub theta_tol: f64,
}

impl Default for EquivSettings {
    fn default() -> Self {
        Self { shifts: Vec::new(), clouds: 4, points: 1000, heatmap_tol: 1e-5, theta_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub equiv: EquivSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            dataset_dir: None,
            dataset: DatasetSpec::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalSettings::default(),
            equiv: EquivSettings::default(),
        }
    }
}

/// Objects merge key by key; anything else in `over` replaces `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with a partial JSON document. Unknown keys are errors.
    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let over: Value = serde_json::from_str(s)?;
        let mut base = serde_json::to_value(RunConfig::default())?;
        let known = base.clone();
        check_keys(&known, &over, "")?;
        merge(&mut base, over);
        Ok(serde_json::from_value(base)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_json_str(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Keeps the training seed in step with the run seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.dataset.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.eval.threshold > 0.0) {
            return Err(ConfigError::Invalid(format!("threshold must be positive, got {}", self.eval.threshold)));
        }
        if self.eval.views.is_empty() {
            return Err(ConfigError::Invalid("no evaluation views".into()));
        }
        Ok(())
    }

    pub fn shifts(&self) -> Vec<i64> {
        if !self.equiv.shifts.is_empty() {
            return self.equiv.shifts.clone();
        }
        let c = self.backbone.grid.cube_len as i64;
        (-c..=c).step_by(self.backbone.theta_stride()).collect()
    }
}

/// Catches typos in hand-written configs; maps with free-form keys are
/// not descended into.
fn check_keys(known: &Value, over: &Value, path: &str) -> Result<(), ConfigError> {
    if let (Value::Object(k), Value::Object(o)) = (known, over) {
        for (key, v) in o {
            let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
            match k.get(key) {
                Some(kv) => check_keys(kv, v, &here)?,
                None if k.is_empty() => {}
                None => return Err(ConfigError::Invalid(format!("unknown key `{here}`"))),
            }
        }
    }
    Ok(())
}

pub fn parse_views(s: &str) -> Result<Vec<ViewId>, ConfigError> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| ViewId::parse(t).ok_or_else(|| ConfigError::Invalid(format!("unknown view `{}`", t.trim()))))
        .collect()
}

pub fn parse_shifts(s: &str) -> Result<Vec<i64>, ConfigError> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<i64>().map_err(|_| ConfigError::Invalid(format!("bad shift `{}`", t.trim()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_keeps_other_defaults() {
        let c = RunConfig::from_json_str(r#"{"seed": 7, "train": {"epochs": 3}, "backbone": {"grid": {"cube_len": 16}}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, TrainConfig::desk().lr);
        assert_eq!(c.backbone.grid.cube_len, 16);
        assert_eq!(c.backbone.grid.rho_max, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json_str(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json_str(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn list_flags() {
        assert_eq!(parse_views("A, x2").unwrap(), vec![ViewId::A, ViewId::X2]);
        assert!(parse_views("B").is_err());
        assert_eq!(parse_shifts("-4,0,8").unwrap(), vec![-4, 0, 8]);
    }
}
