//! Run configuration: a TOML file whose keys mirror the CLI flags.
//!
//! ```toml
//! manifest = "data/toy.jsonl"
//! output_dir = "runs/toy"
//! seed = 7
//! augmentations = 5
//! budget = 1            # or "all"
//! mode = "same_caption" # or "per_augmentation"
//! parallelism = 4
//! mock = true
//!
//! [canny]
//! low_threshold = 0.1
//! high_threshold = 0.2
//! blur_sigma = 1.4
//!
//! [endpoints]
//! llm = "http://localhost:8081"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{Role, DEFAULT_IN_FLIGHT, DEFAULT_TIMEOUT_SECS};
use crate::conditioning::CannyParams;
use crate::hash::canonical_json_hash;
use crate::model::EditBudget;
use crate::prompt::retry::{DEFAULT_MAX_ATTEMPTS, DEFAULT_TEMPERATURE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationMode {
    /// One counterfactual per image; augmentations differ only by generator seed.
    #[default]
    SameCaption,
    /// A separate record, with its own LLM calls, for every augmentation.
    PerAugmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Replaces the manifest's task statement in prompts.
    pub task_text: Option<String>,
    pub seed: u64,
    /// Images sampled per class; all entries when unset.
    pub per_class: Option<u32>,
    pub augmentations: u32,
    pub budget: EditBudget,
    pub mode: AugmentationMode,
    pub max_attempts: u32,
    pub temperature: f64,
    pub guidance: Option<f64>,
    pub canny: CannyParams,
    pub parallelism: usize,
    pub in_flight: usize,
    pub cache_dir: Option<PathBuf>,
    pub replay_only: bool,
    pub mock: bool,
    pub templates_dir: Option<PathBuf>,
    pub timeout_secs: f64,
    /// Base URLs per role (`captioner`, `llm`, `generator`, `predictor`);
    /// `DILLEMA_<ROLE>_URL` is used for roles left out.
    pub endpoints: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: None,
            task_text: None,
            seed: 0,
            per_class: None,
            augmentations: 5,
            budget: EditBudget::default(),
            mode: AugmentationMode::default(),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            temperature: DEFAULT_TEMPERATURE,
            guidance: None,
            canny: CannyParams::default(),
            parallelism: 4,
            in_flight: DEFAULT_IN_FLIGHT,
            cache_dir: None,
            replay_only: false,
            mock: false,
            templates_dir: None,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            endpoints: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Read { path: "<inline>".into(), message: e.to_string() })
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let read_err = |message: String| ConfigError::Read { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let mut config: Self = toml::from_str(&text).map_err(|e| read_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.manifest, &mut config.output_dir, &mut config.cache_dir, &mut config.templates_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        match &self.manifest {
            None => return invalid("no manifest given"),
            Some(p) if !p.is_file() => {
                return Err(ConfigError::Invalid(format!("manifest {} does not exist", p.display())))
            }
            _ => {}
        }
        if self.output_dir.is_none() {
            return invalid("no output directory given");
        }
        if self.parallelism == 0 {
            return invalid("parallelism must be at least 1");
        }
        if self.in_flight == 0 {
            return invalid("in_flight must be at least 1");
        }
        if self.augmentations == 0 {
            return invalid("augmentations must be at least 1");
        }
        if self.per_class == Some(0) {
            return invalid("per_class must be at least 1");
        }
        if self.max_attempts == 0 {
            return invalid("max_attempts must be at least 1");
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return invalid("timeout_secs must be positive");
        }
        if let Some(dir) = &self.templates_dir {
            if !dir.is_dir() {
                return Err(ConfigError::Invalid(format!("templates dir {} does not exist", dir.display())));
            }
        }
        if self.replay_only && self.cache_dir.is_none() {
            return invalid("replay_only needs a cache_dir");
        }
        for role in self.endpoints.keys() {
            role.parse::<Role>().map_err(ConfigError::Invalid)?;
        }
        self.canny.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Hash of every setting that can change ledger contents. Paths,
    /// endpoints and concurrency limits are left out.
    pub fn config_hash(&self) -> String {
        canonical_json_hash(&json!({
            "task_text": self.task_text,
            "seed": self.seed,
            "per_class": self.per_class,
            "augmentations": self.augmentations,
            "budget": self.budget,
            "mode": self.mode,
            "max_attempts": self.max_attempts,
            "temperature": self.temperature,
            "guidance": self.guidance,
            "canny": self.canny,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_with_overrides() {
        let c = RunConfig::from_toml_str(
            "seed = 9\nbudget = \"all\"\nmode = \"per_augmentation\"\n[canny]\nlow_threshold = 0.05\nhigh_threshold = 0.3\nblur_sigma = 1.0\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.budget, EditBudget::All);
        assert_eq!(c.mode, AugmentationMode::PerAugmentation);
        assert_eq!(c.canny.low_threshold, 0.05);
        assert_eq!(c.augmentations, 5);
        assert!(RunConfig::from_toml_str("sed = 1").is_err());
    }

    #[test]
    fn hash_ignores_plumbing() {
        let a = RunConfig::default();
        let b = RunConfig { parallelism: 1, cache_dir: Some("x".into()), mock: true, ..a.clone() };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn validation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.jsonl");
        std::fs::write(&manifest, "").unwrap();
        let ok = RunConfig { manifest: Some(manifest), output_dir: Some(dir.path().into()), ..Default::default() };
        ok.validate().unwrap();
        assert!(RunConfig { parallelism: 0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { manifest: Some("/nope".into()), ..ok.clone() }.validate().is_err());
        let bad_role = RunConfig { endpoints: [("gpu".to_string(), "http://x".to_string())].into(), ..ok };
        assert!(bad_role.validate().is_err());
    }
}
