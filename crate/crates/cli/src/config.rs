//! Run configuration: one TOML file captures every knob of a run, so the
//! config digest in the run manifest pins the whole experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use figmine_core::lvlm::{DEFAULT_MAX_IN_FLIGHT, DEFAULT_RETRY_LIMIT};
use figmine_core::panels::{ConsolidateConfig, DEFAULT_N_VIEWS};
use figmine_core::postprocess::CleanupConfig;
use figmine_core::regions::RegionConfig;
use figmine_core::train::OptimizerConfig;

use crate::{sha256_hex, CliError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub lvlm: LvlmSection,
    /// No defaults here on purpose: a config that does not spell out its
    /// seeds fails to parse, so no run ever picks up ambient entropy.
    pub seeds: SeedsSection,
    #[serde(default)]
    pub panels: PanelsSection,
    #[serde(default)]
    pub regions: RegionConfig,
    #[serde(default)]
    pub cleanup: CleanupConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub run: RunSection,
    /// SHA-256 of the raw config file, stamped by [`load_config`].
    #[serde(skip)]
    pub config_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Line-delimited figure records, one JSON object per line.
    pub figures: PathBuf,
    /// Directory the records' image paths are relative to.
    pub images_dir: PathBuf,
    /// Every stage output lands under this directory.
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LvlmMode {
    Mock,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvlmSection {
    pub mode: LvlmMode,
    /// Directory of canned responses keyed by request hash (mock mode).
    pub mock_dir: Option<PathBuf>,
    /// Error on requests absent from the mock store instead of handing back
    /// empty responses; keeps fixture drift loud.
    #[serde(default = "default_true")]
    pub strict_mock: bool,
    /// OpenAI-compatible base URL (http mode).
    pub endpoint: Option<String>,
    pub model: Option<String>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_true() -> bool {
    true
}

fn default_api_key_env() -> String {
    "FIGMINE_LVLM_API_KEY".to_string()
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_retry_limit() -> u32 {
    DEFAULT_RETRY_LIMIT
}

fn default_max_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

/// Every stage seed is explicit and independent so reruns of one stage never
/// disturb another.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    /// Per-figure view jitter during panel decomposition.
    pub pipeline: u64,
    /// Encoder initialization and batch sampling.
    pub train: u64,
    /// Figure-level holdout split.
    pub split: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanelsSection {
    pub n_views: usize,
    pub vote_merge_iou: f64,
    pub nms_iou: f64,
}

impl Default for PanelsSection {
    fn default() -> Self {
        let c = ConsolidateConfig::default();
        PanelsSection { n_views: DEFAULT_N_VIEWS, vote_merge_iou: c.vote_merge_iou, nms_iou: c.nms_iou }
    }
}

impl PanelsSection {
    pub fn consolidate(&self) -> ConsolidateConfig {
        ConsolidateConfig { vote_merge_iou: self.vote_merge_iou, nms_iou: self.nms_iou }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Embedding width.
    pub d: usize,
    /// Tower hidden width.
    pub hidden: usize,
    /// ROI pooling grid side.
    pub g: usize,
    /// Steps per level in one cycle, "M:P:R".
    pub cycle: String,
    pub steps: u64,
    pub batch_m: usize,
    pub batch_p: usize,
    pub batch_r: usize,
    pub renormalize_aggregates: bool,
    pub lr_shared: f64,
    pub lr_roi_head: f64,
    pub lr_p_head: f64,
    pub lr_m_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub lr_floor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        TrainSection {
            d: 32,
            hidden: 64,
            g: 2,
            cycle: "1:1:1".to_string(),
            steps: 300,
            batch_m: 16,
            batch_p: 16,
            batch_r: 16,
            renormalize_aggregates: true,
            lr_shared: o.lr_shared,
            lr_roi_head: o.lr_roi_head,
            lr_p_head: o.lr_p_head,
            lr_m_head: o.lr_m_head,
            beta1: o.beta1,
            beta2: o.beta2,
            weight_decay: o.weight_decay,
            eps: o.eps,
            warmup_steps: o.warmup_steps,
            lr_floor: o.lr_floor,
        }
    }
}

impl TrainSection {
    /// The schedule stamps `total_steps` from its own step budget.
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr_shared: self.lr_shared,
            lr_roi_head: self.lr_roi_head,
            lr_p_head: self.lr_p_head,
            lr_m_head: self.lr_m_head,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            lr_floor: self.lr_floor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Fraction of figures held out, with all their panels and regions.
    pub holdout_fraction: f64,
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { holdout_fraction: 0.2, ks: vec![1, 5, 10] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Worker threads for per-figure parallelism; 0 keeps the rayon default.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { workers: 0 }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let raw = std::fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&raw)
        .map_err(|e| CliError::Config(format!("config {} is not UTF-8: {e}", path.display())))?;
    let mut cfg: RunConfig = toml::from_str(text)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
    cfg.config_digest = sha256_hex(&raw);
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Internal consistency only; stages check the paths they actually read
    /// so a synthetic-corpus run does not need figure inputs on disk.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        match self.lvlm.mode {
            LvlmMode::Mock => {
                if self.lvlm.mock_dir.is_none() {
                    return bad("lvlm.mode = \"mock\" requires lvlm.mock_dir".to_string());
                }
            }
            LvlmMode::Http => {
                if self.lvlm.endpoint.is_none() || self.lvlm.model.is_none() {
                    return bad("lvlm.mode = \"http\" requires lvlm.endpoint and lvlm.model".to_string());
                }
            }
        }
        if self.panels.n_views == 0 {
            return bad("panels.n_views must be at least 1".to_string());
        }
        if self.train.d < 2 || self.train.hidden == 0 || self.train.g == 0 {
            return bad(format!(
                "train dims invalid: d={} (min 2), hidden={}, g={} (min 1)",
                self.train.d, self.train.hidden, self.train.g
            ));
        }
        if self.train.steps == 0 {
            return bad("train.steps must be at least 1".to_string());
        }
        if self.train.batch_m == 0 || self.train.batch_p == 0 || self.train.batch_r == 0 {
            return bad("train batch sizes must be at least 1".to_string());
        }
        if !(self.eval.holdout_fraction > 0.0 && self.eval.holdout_fraction < 1.0) {
            return bad(format!(
                "eval.holdout_fraction must lie in (0,1), got {}",
                self.eval.holdout_fraction
            ));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be non-empty positive integers".to_string());
        }
        self.cleanup.validate().map_err(CliError::Config)?;
        Ok(())
    }
}
