//! TOML run configuration. Command-line flags take precedence over these
//! values, which take precedence over built-in defaults. Relative paths are
//! resolved against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use kprompt::tmn::TrainSchedule;
use serde::{Deserialize, Serialize};

use crate::args::{EvalMode, ScorerKind};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub scorer: Option<ScorerKind>,
    pub endpoint: Option<String>,
    pub temperature: Option<f64>,
    pub data: DataSection,
    pub kb: KbSection,
    pub model: ModelSection,
    pub schedule: TrainSchedule,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub videos: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub base_split: Option<PathBuf>,
    pub test_split: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub frames: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbSection {
    pub path: Option<PathBuf>,
    pub states: Option<PathBuf>,
    pub nouns: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub lm_corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: Option<usize>,
    pub blocks: Option<usize>,
    pub kernel: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mode: Option<EvalMode>,
    pub ways: Option<usize>,
    pub shots: Option<usize>,
    pub queries: Option<usize>,
    pub tasks: Option<usize>,
    pub samplings: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        let d = &mut self.data;
        for p in [&mut d.videos, &mut d.manifest, &mut d.base_split, &mut d.test_split, &mut d.cache] {
            fix(p);
        }
        let k = &mut self.kb;
        for p in [&mut k.path, &mut k.states, &mut k.nouns, &mut k.lm_corpus] {
            fix(p);
        }
    }
}
