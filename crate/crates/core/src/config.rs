//! Experiment configuration files.
//!
//! A TOML document with top-level `seed`, `variant` and `output` keys and the
//! sections `[model]`, `[data]`, `[source]`, `[adapt]` and optionally
//! `[[multi.sources]]`. Unknown keys are rejected. The variant fixes the
//! number of prompt stages, so `[model]` has no `num_stages` key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptationConfig, Mode};
use crate::data::{BaseSet, DomainShiftSpec, ShiftKind};
use crate::error::{Error, Result};
use crate::model::{PromptViTConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub prompts_per_stage: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub base: BaseSet,
    pub shift: ShiftKind,
    pub severity: f64,
    pub classes: usize,
    pub per_class_count: usize,
    pub image_size: usize,
}

/// One extra labeled source domain for multi-source training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDomain {
    pub name: String,
    pub shift: ShiftKind,
    pub severity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiSection {
    pub sources: Vec<SourceDomain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    pub output: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub source: AdaptationConfig,
    pub adapt: AdaptationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi: Option<MultiSection>,
}

impl ExperimentConfig {
    /// Parses and validates; every error names the offending line.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| line_of(text, s.start))
                .map_or_else(String::new, |l| format!("line {l}: "));
            Error::Config(format!("{line}{}", e.message()))
        })?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Applies the `--seed` and `--steps` overrides.
    pub fn apply_overrides(&mut self, seed: Option<u64>, steps: Option<usize>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(n) = steps {
            self.adapt.steps = n;
        }
        self.source.seed = self.seed;
        self.adapt.seed = self.seed;
    }

    pub fn model_config(&self) -> PromptViTConfig {
        let m = &self.model;
        PromptViTConfig {
            num_layers: m.num_layers,
            num_stages: self.variant.num_stages(m.num_layers),
            prompts_per_stage: m.prompts_per_stage,
            embed_dim: m.embed_dim,
            num_classes: self.data.classes,
            patch_size: m.patch_size,
            image_size: self.data.image_size,
            num_heads: m.num_heads,
            mlp_ratio: m.mlp_ratio,
        }
    }

    pub fn shift_spec(&self) -> DomainShiftSpec {
        let d = &self.data;
        DomainShiftSpec {
            base: d.base,
            shift: d.shift,
            severity: d.severity,
            classes: d.classes,
            per_class_count: d.per_class_count,
            image_size: d.image_size,
            seed: self.seed,
        }
    }

    fn validate(&self, text: &str) -> Result<()> {
        // Messages start with the offending key where there is one.
        let at = |section: &str, e: Error| match e {
            Error::Config(m) => {
                let key = m.split_whitespace().next().unwrap_or("");
                Error::Config(format!("line {}: {m}", key_line(text, section, key)))
            }
            other => other,
        };
        self.model_config().validate().map_err(|e| at("model", e))?;
        self.shift_spec().validate().map_err(|e| at("data", e))?;
        self.source.validate().map_err(|e| at("source", e))?;
        self.adapt.validate().map_err(|e| at("adapt", e))?;
        if self.source.mode != Mode::Offline {
            return Err(Error::Config(format!(
                "line {}: mode: source training has no online mode",
                key_line(text, "source", "mode")
            )));
        }
        if self.multi.as_ref().is_some_and(|m| m.sources.is_empty()) {
            return Err(Error::Config(format!(
                "line {}: [multi] needs at least one source domain",
                key_line(text, "multi", "")
            )));
        }
        Ok(())
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-indexed line of `key = ...` inside `[section]`, else of the section
/// header, else 1.
fn key_line(text: &str, section: &str, key: &str) -> usize {
    let lines: Vec<&str> = text.lines().collect();
    let header = lines.iter().position(|l| {
        let t = l.trim();
        t == format!("[{section}]") || t.starts_with(&format!("[{section}.")) || t.starts_with(&format!("[[{section}."))
    });
    let Some(h) = header else { return 1 };
    let body = lines[h + 1..]
        .iter()
        .take_while(|l| !l.trim_start().starts_with('['))
        .position(|l| {
            let t = l.trim_start();
            !key.is_empty() && t.starts_with(key) && t[key.len()..].trim_start().starts_with('=')
        });
    body.map_or(h + 1, |i| h + i + 2)
}

/// Resolved config written into every run directory.
pub fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
seed = 3
variant = "G"
output = "runs/example"

[model]
num_layers = 4
prompts_per_stage = 4
embed_dim = 32
patch_size = 4
num_heads = 4
mlp_ratio = 2.0

[data]
base = "shapes"
shift = "color_jitter"
severity = 1.0
classes = 8
per_class_count = 20
image_size = 16

[source]
learning_rate = 0.02
steps = 10

[adapt]
steps = 5
projection_dim = 16
"#;

    #[test]
    fn parses_and_round_trips() -> Result<()> {
        let cfg = ExperimentConfig::parse(EXAMPLE)?;
        assert_eq!(cfg.model_config().num_stages, 4);
        assert_eq!(cfg.adapt.learning_rate, 5e-3);
        let again = ExperimentConfig::parse(&cfg.to_toml()?)?;
        assert_eq!(cfg, again);
        Ok(())
    }

    #[test]
    fn unknown_key_names_its_line() {
        let text = EXAMPLE.replace("embed_dim = 32", "embed_dim = 32\nwidth = 3");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 10"), "{err}");
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn semantic_errors_name_a_line() {
        let text = EXAMPLE.replace("num_layers = 4", "num_layers = 6");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 7"), "{err}");
        let text = EXAMPLE.replace("steps = 5", "steps = 5\ndata_ratio = 0.0");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 28"), "{err}");
        let text = EXAMPLE.replace("classes = 8", "classes = 1");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 6") || err.contains("line 14"), "{err}");
    }

    #[test]
    fn overrides_propagate_seed() -> Result<()> {
        let mut cfg = ExperimentConfig::parse(EXAMPLE)?;
        cfg.apply_overrides(Some(9), Some(2));
        assert_eq!((cfg.seed, cfg.source.seed, cfg.adapt.seed, cfg.adapt.steps), (9, 9, 9, 2));
        assert_eq!(cfg.shift_spec().seed, 9);
        Ok(())
    }
}
