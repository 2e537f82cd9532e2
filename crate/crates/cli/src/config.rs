//! Run configuration: one JSON document, overlaid on defaults, then flags.

use std::path::{Path, PathBuf};

use delt_core::nn::{Architecture, NetSpec};
use delt_core::teacher::SqueezeConfig;
use delt_core::types::{DatasetProfile, EvalConfig, RecoveryConfig};
use delt_core::{DeltError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: String,
    pub teacher: Option<PathBuf>,
    pub teacher_arch: Architecture,
    pub teacher_width: Option<usize>,
    pub student_arch: Architecture,
    pub student_width: Option<usize>,
    pub squeeze: SqueezeConfig,
    pub recovery: RecoveryConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: "digits".into(),
            teacher: None,
            teacher_arch: Architecture::ConvNet { depth: 2 },
            teacher_width: Some(32),
            student_arch: Architecture::ConvNet { depth: 2 },
            student_width: Some(32),
            squeeze: SqueezeConfig {
                epochs: 30,
                ..Default::default()
            },
            recovery: RecoveryConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Copies `patch` into `base`; keys absent from `base` are rejected.
fn overlay(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(DeltError::Config(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub teacher: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults, then the config file (if any), then flag overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| DeltError::Config(format!("cannot read config {}: {e}", p.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| DeltError::Config(format!("config {} is not valid JSON: {e}", p.display())))?;
            if !patch.is_object() {
                return Err(DeltError::Config("config must be a JSON object".into()));
            }
            overlay(&mut value, &patch, "")?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| DeltError::Config(format!("invalid config: {e}")))?;
        if let Some(seed) = overrides.seed {
            cfg.recovery.seed = seed;
            cfg.eval.seed = seed;
            cfg.squeeze.seed = seed;
        }
        if let Some(t) = &overrides.teacher {
            cfg.teacher = Some(t.clone());
        }
        cfg.profile()?;
        Ok(cfg)
    }

    pub fn profile(&self) -> Result<DatasetProfile> {
        DatasetProfile::by_name(&self.profile)
    }

    fn spec(&self, arch: Architecture, width: Option<usize>) -> Result<NetSpec> {
        let p = self.profile()?;
        let spec = NetSpec::new(arch, p.channels(), p.num_classes, p.resolution);
        let spec = match width {
            Some(w) => spec.with_width(w),
            None => spec,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn teacher_spec(&self) -> Result<NetSpec> {
        self.spec(self.teacher_arch, self.teacher_width)
    }

    pub fn student_spec(&self) -> Result<NetSpec> {
        self.spec(self.student_arch, self.student_width)
    }

    pub fn teacher_path(&self) -> Result<&Path> {
        self.teacher
            .as_deref()
            .ok_or_else(|| DeltError::Config("no teacher checkpoint (use --teacher or `teacher` in the config)".into()))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_flags_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"recovery": {"ipc": 10, "num_subbatches": 5}, "eval": {"epochs": 3}}"#).unwrap();
        let cfg = RunConfig::load(Some(&path), &Overrides { seed: Some(9), teacher: None }).unwrap();
        assert_eq!(cfg.recovery.ipc, 10);
        assert_eq!(cfg.recovery.max_iterations, 4000);
        assert_eq!(cfg.eval.epochs, 3);
        assert_eq!((cfg.recovery.seed, cfg.eval.seed), (9, 9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"recovery": {"ipcs": 10}}"#).unwrap();
        let err = RunConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("recovery.ipcs"), "{err}");
        assert!(err.is_validation());
    }
}
