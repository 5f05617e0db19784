//! The flat, self-describing run configuration stored in every run
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sckan_core::backbone::TapLevel;
use sckan_core::ckaf::FusionStrategy;
use sckan_core::data::{SplitManifest, DEFAULT_LABELED_FRACTION, DEFAULT_TEST_FRACTION};
use sckan_core::pcc::PcclConfig;
use sckan_core::trainer::TrainConfig;
use sckan_core::volume::Dims;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Every knob of a training run in one flat JSON object. Missing keys take
/// the defaults below; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Corpus directory produced by `gen-data`.
    pub corpus: PathBuf,
    pub run_dir: PathBuf,
    /// Must match the corpus manifest.
    pub dataset_seed: u64,
    pub labeled_fraction: f64,
    pub test_fraction: f64,

    pub seed: u64,
    pub steps: usize,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub ema_decay: f64,
    pub crop_size: Dims,
    pub tap: TapLevel,

    pub use_proto: bool,
    pub use_ssd: bool,
    pub use_pcc: bool,
    pub use_ckaf: bool,
    pub k: usize,
    pub fusion_strategy: FusionStrategy,
    pub tau_p: f64,

    pub tau: f64,
    pub alpha: f64,
    pub lambda_div: f64,
    pub w_same_region: f64,
    pub w_diff_region: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

impl RunConfig {
    fn from_train(t: &TrainConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            corpus: PathBuf::new(),
            run_dir: PathBuf::new(),
            dataset_seed: 0,
            labeled_fraction: DEFAULT_LABELED_FRACTION,
            test_fraction: DEFAULT_TEST_FRACTION,
            seed: t.seed,
            steps: t.steps,
            labeled_per_batch: t.labeled_per_batch,
            unlabeled_per_batch: t.unlabeled_per_batch,
            lr: t.lr,
            momentum: t.momentum,
            ema_decay: t.ema_decay,
            crop_size: t.crop_size,
            tap: t.tap,
            use_proto: t.use_proto,
            use_ssd: t.use_ssd,
            use_pcc: t.use_pcc,
            use_ckaf: t.use_ckaf,
            k: t.k,
            fusion_strategy: t.fusion_strategy,
            tau_p: t.tau_p,
            tau: t.pccl.tau,
            alpha: t.pccl.alpha,
            lambda_div: t.pccl.lambda_div,
            w_same_region: t.pccl.w_same_region,
            w_diff_region: t.pccl.w_diff_region,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            labeled_per_batch: self.labeled_per_batch,
            unlabeled_per_batch: self.unlabeled_per_batch,
            lr: self.lr,
            momentum: self.momentum,
            ema_decay: self.ema_decay,
            k: self.k,
            crop_size: self.crop_size,
            use_proto: self.use_proto,
            use_ssd: self.use_ssd,
            use_pcc: self.use_pcc,
            use_ckaf: self.use_ckaf,
            fusion_strategy: self.fusion_strategy,
            pccl: PcclConfig {
                tau: self.tau,
                alpha: self.alpha,
                lambda_div: self.lambda_div,
                w_same_region: self.w_same_region,
                w_diff_region: self.w_diff_region,
            },
            tau_p: self.tau_p,
            tap: self.tap,
            seed: self.seed,
        }
    }

    /// Parses a JSON document, reporting the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config { path, message: e.into_inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self, CliError> {
        Self::from_json(&v.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, message: &str| Err(CliError::Config { path: path.into(), message: message.into() });
        if self.schema_version != SCHEMA_VERSION {
            return bad("schema_version", &format!("expected {SCHEMA_VERSION}"));
        }
        if self.corpus.as_os_str().is_empty() {
            return bad("corpus", "required");
        }
        if self.run_dir.as_os_str().is_empty() {
            return bad("run_dir", "required");
        }
        if self.steps == 0 {
            return bad("steps", "must be >= 1");
        }
        if self.labeled_per_batch == 0 {
            return bad("labeled_per_batch", "must be >= 1");
        }
        if self.unlabeled_per_batch == 0 {
            return bad("unlabeled_per_batch", "must be >= 1");
        }
        if self.k == 0 {
            return bad("k", "must be >= 1");
        }
        if self.crop_size.iter().any(|&d| d == 0 || d % 4 != 0) {
            return bad("crop_size", "entries must be positive multiples of 4");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay", "must be in [0, 1]");
        }
        if !(self.tau_p > 0.0) {
            return bad("tau_p", "must be > 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau", "must be > 0");
        }
        if !(-1.0..=1.0).contains(&self.alpha) {
            return bad("alpha", "must be in [-1, 1]");
        }
        if !(self.lambda_div >= 0.0) {
            return bad("lambda_div", "must be >= 0");
        }
        if !(self.w_same_region >= 0.0) {
            return bad("w_same_region", "must be >= 0");
        }
        if !(self.w_diff_region >= 0.0) {
            return bad("w_diff_region", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.labeled_fraction) {
            return bad("labeled_fraction", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction", "must be in [0, 1)");
        }
        // Anything the trainer still objects to.
        self.train_config().validate().map_err(|e| CliError::Config { path: String::new(), message: e.to_string() })
    }

    /// The corpus must be the one this config was written for.
    pub fn check_manifest(&self, m: &SplitManifest) -> Result<(), CliError> {
        let bad = |path: &str, found: String| Err(CliError::Config { path: path.into(), message: format!("corpus manifest has {found}") });
        if m.dataset_seed != self.dataset_seed {
            return bad("dataset_seed", m.dataset_seed.to_string());
        }
        if m.labeled_fraction != self.labeled_fraction {
            return bad("labeled_fraction", m.labeled_fraction.to_string());
        }
        if m.test_fraction != self.test_fraction {
            return bad("test_fraction", m.test_fraction.to_string());
        }
        Ok(())
    }
}
