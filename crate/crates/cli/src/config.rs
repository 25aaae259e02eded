use std::fs;
use std::path::Path;

use objmim::net::ModelConfig;
use objmim::objtok::TokenizerBackend;
use objmim::scenegen::SceneSpec;
use objmim::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Scenes used for recovery trials; all when absent.
    pub trials: Option<usize>,
    /// Panels written by `render`.
    pub panels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: None,
            panels: 8,
        }
    }
}

/// Every tunable of the pipeline in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub backend: TokenizerBackend,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            model: ModelConfig::default(),
            backend: TokenizerBackend::Oracle,
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the file, then `key.path=value` overrides, then the
    /// seed shorthand.
    pub fn load(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut doc = toml::Table::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(p) = file {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let user: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut doc, user);
        }
        for s in sets {
            apply_override(&mut doc, s)?;
        }
        let mut cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(seed) = seed {
            cfg.model.seed = seed;
            cfg.stage1.seed = seed;
            cfg.stage2.seed = seed;
        }
        cfg.stage1.stage = 1;
        cfg.stage2.stage = 2;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate()?;
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn stage(&self, stage: u8) -> &TrainConfig {
        if stage == 1 {
            &self.stage1
        } else {
            &self.stage2
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`; `value` is parsed as TOML, falling back to a bare
/// string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one element");
    let mut table = doc;
    for k in parents {
        table = match table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(Default::default())) {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("`{path}`: `{k}` is not a table"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn override_reaches_nested_field() {
        let c = RunConfig::load(None, &["stage2.r_obj=0.25".into()], Some(9)).unwrap();
        assert_eq!(c.stage2.r_obj, 0.25);
        assert_eq!(c.stage1.seed, 9);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::load(None, &["stage2.robj=0.25".into()], None).is_err());
    }
}
