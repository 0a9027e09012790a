//! Run configuration as read from TOML or JSON files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::BackendConfig;
use crate::decision::{DecisionStrategy, JudgeTemplate};
use crate::error::{Error, Result};
use crate::memory::MemoryTemplate;
use crate::planner::PromptTemplate;
use crate::sampler::SamplingPolicy;

use super::presets;

fn default_preset() -> String {
    presets::DEFAULT_PRESET.into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("epd-run")
}

fn default_concurrency() -> usize {
    4
}

fn default_memory_backend() -> String {
    presets::GPT.into()
}

fn default_snap_tolerance() -> f64 {
    0.25
}

fn default_fallback_letter() -> char {
    'A'
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub seed: u64,
    /// Backend used for memory extraction.
    #[serde(default = "default_memory_backend")]
    pub memory_backend: String,
    /// Memory journal; defaults to `memory.jsonl` in the output directory.
    #[serde(default)]
    pub memory_cache: Option<PathBuf>,
    /// Few-shot examples; the shipped set when absent.
    #[serde(default)]
    pub shots_file: Option<PathBuf>,
    /// Overrides the frame root named in the dataset file.
    #[serde(default)]
    pub frame_root: Option<PathBuf>,
    #[serde(default)]
    pub extractor_command: Option<String>,
    #[serde(default = "default_snap_tolerance")]
    pub snap_tolerance_s: f64,
    /// Letter exported for samples that produced no answer.
    #[serde(default = "default_fallback_letter")]
    pub fallback_letter: char,
    #[serde(default)]
    pub sampling: SamplingPolicy,
    /// Replaces the preset's prompt template.
    #[serde(default)]
    pub template: Option<PromptTemplate>,
    /// Replaces the preset's decision strategy.
    #[serde(default)]
    pub strategy: Option<DecisionStrategy>,
    #[serde(default)]
    pub memory_template: Option<MemoryTemplate>,
    #[serde(default)]
    pub judge_template: Option<JudgeTemplate>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            preset: default_preset(),
            output_dir: output_dir.into(),
            concurrency: default_concurrency(),
            seed: 0,
            memory_backend: default_memory_backend(),
            memory_cache: None,
            shots_file: None,
            frame_root: None,
            extractor_command: None,
            snap_tolerance_s: default_snap_tolerance(),
            fallback_letter: default_fallback_letter(),
            sampling: SamplingPolicy::default(),
            template: None,
            strategy: None,
            memory_template: None,
            judge_template: None,
            backends: BTreeMap::new(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn with_backend(mut self, name: &str, config: BackendConfig) -> Self {
        self.backends.insert(name.to_string(), config);
        self
    }

    pub fn with_preset(mut self, preset: &str) -> Self {
        self.preset = preset.to_string();
        self
    }

    pub fn memory_cache_path(&self) -> PathBuf {
        self.memory_cache
            .clone()
            .unwrap_or_else(|| self.output_dir.join("memory.jsonl"))
    }

    /// Checks what can be checked without touching the dataset or backends.
    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if !self.fallback_letter.is_ascii_uppercase() {
            return Err(Error::Config(format!(
                "fallback_letter must be an uppercase letter, got `{}`",
                self.fallback_letter
            )));
        }
        if !self.snap_tolerance_s.is_finite() || self.snap_tolerance_s < 0.0 {
            return Err(Error::Config("snap_tolerance_s must be >= 0".into()));
        }
        self.sampling.validate()?;
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.dataset);
        join(&mut self.output_dir);
        for p in [&mut self.memory_cache, &mut self.shots_file, &mut self.frame_root]
            .into_iter()
            .flatten()
        {
            join(p);
        }
        self.base_dir = base.to_path_buf();
    }
}

/// Reads a config file; `.toml` is TOML, anything else JSON. Relative paths
/// inside are taken relative to the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?
    };
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let base = if base.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        base
    };
    config.resolve_paths(&base);
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_with_defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            r#"
dataset = "data/dataset.json"
preset = "vote5"
seed = 3

[backends.gpt]
kind = "oracle-mock"
"#,
        )
        .unwrap();
        let c = load_config(&path).unwrap();
        assert_eq!(c.dataset, dir.path().join("data/dataset.json"));
        assert_eq!(c.output_dir, dir.path().join("epd-run"));
        assert_eq!(c.preset, "vote5");
        assert_eq!(c.concurrency, 4);
        assert_eq!(c.memory_backend, "gpt");
        assert_eq!(c.backends["gpt"].kind, "oracle-mock");
        assert_eq!(c.memory_cache_path(), dir.path().join("epd-run/memory.jsonl"));
    }

    #[test]
    fn json_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"dataset": "/abs/d.json", "concurrency": 0}"#).unwrap();
        assert!(matches!(load_config(&path), Err(Error::Config(_))));
        fs::write(&path, r#"{"dataset": "/abs/d.json", "bogus": 1}"#).unwrap();
        assert!(load_config(&path).is_err());
        fs::write(&path, r#"{"dataset": "/abs/d.json"}"#).unwrap();
        assert_eq!(load_config(&path).unwrap().dataset, PathBuf::from("/abs/d.json"));
    }
}
