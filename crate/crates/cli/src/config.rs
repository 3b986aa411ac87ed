//! Run configuration: TOML file, then `key=value` overrides, over built-in defaults.

use std::fs;
use std::path::Path;

use htcl_core::eval::{ProbeConfig, RankerConfig};
use htcl_core::mel::MelConfig;
use htcl_core::model::ModelConfig;
use htcl_core::synth::GeneratorConfig;
use htcl_core::train::TrainConfig;
use htcl_core::{HtclError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub ranker: RankerConfig,
    pub k_retrieve: usize,
    pub cutoff: usize,
    pub bins: usize,
    /// Songs per inference batch.
    pub embed_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            ranker: RankerConfig::default(),
            k_retrieve: 10,
            cutoff: 100,
            bins: 40,
            embed_batch: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub mel: MelConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: GeneratorConfig::default(),
            mel: MelConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.mel.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.model.audio_encoder.n_mels != self.mel.n_mels {
            return Err(HtclError::config(
                "model.audio_encoder.n_mels",
                format!("must equal mel.n_mels ({})", self.mel.n_mels),
            ));
        }
        Ok(())
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HtclError::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HtclError::config(key, "empty path segment"));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| HtclError::config(key, format!("`{part}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Recursively lays `top` over `base`; tables merge key by key, anything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves defaults, then the file (if any), then each override in order.
///
/// Defaults are materialised first so a partial `[finetune]` section keeps the
/// stage-2 defaults rather than falling back to the stage-1 ones.
pub fn parse_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut user = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| HtclError::config(path.display().to_string(), format!("cannot read config: {e}")))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| HtclError::config(path.display().to_string(), e.message()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let mut table = toml::Table::try_from(RunConfig::default())
        .map_err(|e| HtclError::config("config", format!("cannot encode defaults: {e}")))?;
    merge(&mut table, user);
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        HtclError::config(field_of(e.message()), e.message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Best-effort name of the offending key in a deserialisation message.
fn field_of(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("run.toml");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "");
        assert_eq!(parse_config(Some(&p), &[]).unwrap(), RunConfig::default());
        assert_eq!(parse_config(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn flags_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "[model.loss]\ntemperature = 0.1\n");
        assert_eq!(parse_config(Some(&p), &[]).unwrap().model.loss.temperature, 0.1);
        let cfg = parse_config(Some(&p), &["model.loss.temperature=0.05".into()]).unwrap();
        assert_eq!(cfg.model.loss.temperature, 0.05);
        let cfg = parse_config(None, &["finetune.ablation=no_text".into(), "pretrain.steps=7".into()]).unwrap();
        assert_eq!(cfg.finetune.ablation, htcl_core::train::Ablation::NoText);
        assert_eq!(cfg.pretrain.steps, 7);
    }

    #[test]
    fn partial_section_keeps_its_own_defaults() {
        let cfg = parse_config(None, &["finetune.steps=3".into()]).unwrap();
        let want = TrainConfig {
            steps: 3,
            ..TrainConfig::finetune()
        };
        assert_eq!(cfg.finetune, want);
    }

    #[test]
    fn misspelled_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "[model.loss]\ntemprature = 0.1\n");
        let err = parse_config(Some(&p), &[]).unwrap_err();
        assert!(matches!(err, HtclError::Config { .. }));
        assert!(err.to_string().contains("temprature"), "{err}");
        let err = parse_config(None, &["pretrain.stepz=3".into()]).unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn type_mismatch_is_a_config_error() {
        let err = parse_config(None, &["pretrain.batch_size=\"many\"".into()]).unwrap_err();
        assert!(matches!(err, HtclError::Config { .. }));
        let err = parse_config(None, &["data.acceptance_noise=2.0".into()]).unwrap_err();
        assert!(err.to_string().contains("acceptance_noise"));
    }
}
