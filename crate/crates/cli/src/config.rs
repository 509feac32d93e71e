//! TOML run configuration for `uadt train`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uadt_core::dit::{LoraConfig, ModelConfig};
use uadt_core::flow_match::TrainConfig;
use uadt_core::{Error, Result};

/// Everything `train` needs. Relative paths resolve against the directory
/// holding the config file.
///
/// ```toml
/// dataset = "data"
/// output = "run"
/// seed = 0
/// init = "base.uadt"   # optional starting checkpoint
///
/// [model]          # ModelConfig; omitted keys take defaults
/// [pretrain]       # optional pose-free stage on all weights
/// [lora]           # optional; wraps the model before `train`
/// [train]          # main stage
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Seeds model and adapter initialisation.
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint to start from instead of a fresh model.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    pub train: TrainConfig,
    /// Fold adapters into the base weights before saving.
    #[serde(default)]
    pub merge: bool,
    /// Flow times per clip in the deterministic probe loss.
    #[serde(default = "default_probe_times")]
    pub probe_times: usize,
}

fn default_probe_times() -> usize {
    4
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`, leaving relative paths untouched.
    pub fn load_as_written(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Copy with relative paths joined onto the directory of `config_path`.
    pub fn resolved(&self, config_path: &Path) -> RunConfig {
        let base = config_path.parent().unwrap_or(Path::new("."));
        RunConfig {
            dataset: base.join(&self.dataset),
            output: base.join(&self.output),
            init: self.init.as_ref().map(|p| base.join(p)),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate().map_err(|e| e.context("[pretrain]"))?;
        }
        if let Some(l) = &self.lora {
            l.validate().map_err(|e| e.context("[lora]"))?;
        }
        self.train.validate().map_err(|e| e.context("[train]"))?;
        if self.lora.is_some() && self.pretrain.is_none() && self.init.is_none() {
            return Err(Error::config(
                "[lora] freezes the base weights, so it needs a [pretrain] stage or an init checkpoint",
            ));
        }
        if self.merge && self.lora.is_none() {
            return Err(Error::config("merge = true needs a [lora] table"));
        }
        if self.probe_times == 0 {
            return Err(Error::config("probe_times must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset = \"d\"\noutput = \"o\"\n[train]\nsteps = 3\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        assert_eq!(cfg.model, ModelConfig::default());
        assert!(cfg.lora.is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse(&format!("{MINIMAL}learning_rate = 1.0\n")).is_err());
        assert!(RunConfig::parse(&format!("bogus = 1\n{MINIMAL}")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}[model]\nwidth = 3\n")).is_err());
    }

    #[test]
    fn resolution_joins_relative_paths_only() {
        let cfg = RunConfig::parse(&format!("init = \"/abs/base.uadt\"\n{MINIMAL}")).unwrap();
        let r = cfg.resolved(Path::new("/runs/a/run.toml"));
        assert_eq!(r.dataset, Path::new("/runs/a/d"));
        assert_eq!(r.output, Path::new("/runs/a/o"));
        assert_eq!(r.init.as_deref(), Some(Path::new("/abs/base.uadt")));
        assert_eq!(cfg.dataset, Path::new("d"));
    }

    #[test]
    fn merge_needs_lora() {
        assert!(RunConfig::parse(&format!("merge = true\n{MINIMAL}")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}[lora]\n")).is_err());
        let ok = format!("merge = true\ninit = \"base.uadt\"\n{MINIMAL}[lora]\nrank = 2\n");
        assert_eq!(RunConfig::parse(&ok).unwrap().lora.unwrap().rank, 2);
    }
}
