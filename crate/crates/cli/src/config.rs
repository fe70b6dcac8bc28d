//! Declarative run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use softrec::data::{InputFormat, PromptTemplate, SampleCaps, SplitRatios, SyntheticSpec};
use softrec::{ModelConfig, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Extra ranking cutoffs; 1, 5 and 20 are always reported.
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: RegimeTraining,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_cutoffs() -> Vec<usize> {
    vec![5, 20]
}

/// Exactly one of `synthetic` or `file`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<FileSource>,
    /// Fixed corpus seed. When absent each run seed draws its own corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub path: PathBuf,
    /// Inferred from the extension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<InputFormat>,
    #[serde(default = "default_min_interactions")]
    pub min_interactions: usize,
}

fn default_min_interactions() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_valid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_test: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self {
            train: r.train,
            valid: r.valid,
            test: r.test,
            max_train: None,
            max_valid: None,
            max_test: None,
        }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            valid: self.valid,
            test: self.test,
        }
    }

    pub fn caps(&self) -> SampleCaps {
        SampleCaps {
            train: self.max_train,
            valid: self.max_valid,
            test: self.max_test,
        }
    }
}

/// Model shape; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub d_ff: usize,
    pub l_max: usize,
    pub tied_output: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let c = ModelConfig::new(0);
        Self {
            d_model: c.d_model,
            d_ff: c.d_ff,
            l_max: c.l_max,
            tied_output: c.tied_output,
        }
    }
}

impl ModelSpec {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            d_ff: self.d_ff,
            l_max: self.l_max,
            tied_output: self.tied_output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeTraining {
    pub sft: TrainConfig,
    pub sdft_only: TrainConfig,
    /// `alpha` here is replaced by each value of the alpha grid.
    pub soft: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// SOFT is trained once per value and the best on validation is kept.
    pub alpha_grid: Vec<f64>,
    /// Run the SDFT-only ablation.
    pub sdft_only: bool,
    /// Also train SOFT from the starting point not chosen by
    /// `train.soft.init_from`, reported as `soft_from_sft` or `soft_from_base`.
    pub report_other_init: bool,
    pub keep_epoch_checkpoints: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha_grid: vec![0.1, 1.0, 10.0, 100.0],
            sdft_only: true,
            report_other_init: true,
            keep_epoch_checkpoints: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every check that can be made without touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        match (&self.dataset.synthetic, &self.dataset.file) {
            (Some(_), Some(_)) | (None, None) => {
                return bad("dataset needs exactly one of [dataset.synthetic] or [dataset.file]".into())
            }
            (Some(s), None) => {
                if s.n_categories == 0 || s.n_items < s.n_categories {
                    return bad(format!("synthetic corpus needs n_items >= n_categories > 0, got {s:?}"));
                }
                if !(0.0..=1.0).contains(&s.stickiness) || s.min_len < 2 || s.max_len < s.min_len || s.n_users == 0 {
                    return bad(format!("invalid synthetic corpus {s:?}"));
                }
            }
            (None, Some(f)) => {
                if f.format.is_none() && InputFormat::from_path(&f.path).is_none() {
                    return bad(format!("cannot infer the format of {}", f.path.display()));
                }
                if f.min_interactions < 2 {
                    return bad("min_interactions must be at least 2".into());
                }
            }
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.cutoffs.iter().any(|&k| k == 0) {
            return bad("cutoffs must be positive".into());
        }
        let s = &self.split;
        if [s.train, s.valid, s.test].iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("split ratios must be positive".into());
        }
        let m = &self.model;
        if m.d_model == 0 || m.d_ff == 0 || m.l_max < 8 {
            return bad(format!("invalid model shape {m:?}"));
        }
        for t in ["{instruction}", "{history}"] {
            if !self.template.template.contains(t) {
                return bad(format!("template is missing the {t} slot"));
            }
        }
        if self.template.history_window == 0 {
            return bad("history_window must be at least 1".into());
        }
        for (name, t) in [("sft", &self.train.sft), ("sdft_only", &self.train.sdft_only), ("soft", &self.train.soft)] {
            t.validate().map_err(|e| CliError::Config(format!("train.{name}: {e}")))?;
        }
        let p = &self.pipeline;
        if p.alpha_grid.is_empty() || p.alpha_grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("alpha_grid needs at least one non-negative value".into());
        }
        Ok(())
    }

    /// Hash of the whole configuration, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        digest(&c)
    }

    pub fn corpus_seed(&self, run_seed: u64) -> u64 {
        self.dataset.seed.unwrap_or(run_seed)
    }
}

/// SHA-256 of the JSON encoding.
pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(bytes))
}
