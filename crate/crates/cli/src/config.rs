use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use dkv_core::cache::CacheConfig;
use dkv_core::model::ModelConfig;
use dkv_core::sampler::SamplerConfig;

/// Token ids given inline or as a file of whitespace-separated integers.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum PromptSource {
    Ids(Vec<u32>),
    File(PromptFile),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptFile {
    pub file: PathBuf,
}

/// The JSON run configuration shared by every subcommand.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "ModelConfig::toy")]
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default = "default_prompt")]
    pub prompt: PromptSource,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub deterministic: bool,
    /// Layer whose K/V is captured every step.
    #[serde(default)]
    pub snapshots: Option<usize>,
}

fn default_prompt() -> PromptSource {
    PromptSource::Ids(Vec::new())
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Parse whitespace-separated token ids.
pub fn parse_ids(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, tok)| tok.parse().with_context(|| format!("token {i} (`{tok}`) is not a token id")))
        .collect()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("field `{path}`: {}", e.into_inner())
        })
    }

    /// Read and check a config file. Relative prompt files resolve against
    /// the config's directory.
    pub fn load(path: &Path) -> Result<(Self, Vec<u32>)> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.model.validate().context("field `model`")?;
        cfg.sampler.cache = cfg.cache;
        if let Some(layer) = cfg.snapshots {
            cfg.sampler.snapshot_layer = Some(layer);
        }
        cfg.cache.validate(cfg.model.shifted_output).context("field `cache`")?;
        cfg.sampler.validate().context("field `sampler`")?;
        if let Some(layer) = cfg.sampler.snapshot_layer {
            if layer >= cfg.model.n_layers {
                bail!("field `snapshots`: layer {layer} but the model has {} layers", cfg.model.n_layers);
            }
        }
        let prompt = match &cfg.prompt {
            PromptSource::Ids(ids) => ids.clone(),
            PromptSource::File(PromptFile { file }) => {
                let file = path.parent().unwrap_or(Path::new(".")).join(file);
                let text = fs::read_to_string(&file)
                    .with_context(|| format!("field `prompt.file`: reading {}", file.display()))?;
                parse_ids(&text).with_context(|| format!("field `prompt.file`: {}", file.display()))?
            }
        };
        Ok((cfg, prompt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"sampler": {"gen_len": 8, "steps": 4, "block_size": 8}, "prompt": [1, 2]}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.model, ModelConfig::toy());
        assert_eq!(cfg.cache, CacheConfig::default());
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert!(matches!(cfg.prompt, PromptSource::Ids(ref v) if v == &[1, 2]));
    }

    #[test]
    fn errors_name_the_field() {
        let bad = r#"{"sampler": {"gen_len": "eight", "steps": 4, "block_size": 8}}"#;
        let msg = RunConfig::from_json(bad).unwrap_err().to_string();
        assert!(msg.contains("sampler.gen_len"), "{msg}");

        let typo = r#"{"sampler": {"gen_len": 8, "steps": 4, "block_size": 8}, "cache": {"variant": {"kind": "decod"}}}"#;
        let msg = RunConfig::from_json(typo).unwrap_err().to_string();
        assert!(msg.contains("cache.variant"), "{msg}");

        let unknown = r#"{"sampler": {"gen_len": 8, "steps": 4, "block_size": 8, "temprature": 1.0}}"#;
        let msg = RunConfig::from_json(unknown).unwrap_err().to_string();
        assert!(msg.contains("temprature"), "{msg}");
    }

    #[test]
    fn prompt_file_form() {
        let cfg = RunConfig::from_json(
            r#"{"sampler": {"gen_len": 8, "steps": 4, "block_size": 8}, "prompt": {"file": "p.txt"}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.prompt, PromptSource::File(_)));
        assert_eq!(parse_ids(" 4 5\n6 ").unwrap(), vec![4, 5, 6]);
        assert!(parse_ids("4 x").is_err());
    }
}
