//! Run configuration: a human-readable TOML key-value file with defaults
//! matching the desk-scale setup (64x48, four pyramid levels).

use crate::domain::LossWeights;
use crate::error::{Result, RmgnError};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub seed: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Fake images sampled per person per step.
    #[serde(default = "d_nfake")]
    pub n_fake: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_height")]
    pub height: usize,
    #[serde(default = "d_width")]
    pub width: usize,
    /// Encoder-decoder depth of the generator's feature extractors.
    #[serde(default = "d_levels")]
    pub k_levels: usize,
    /// Flow pyramid depth of the warp module.
    #[serde(default = "d_levels")]
    pub l_scales: usize,
    #[serde(default = "d_lambda_f")]
    pub lambda_f: f64,
    #[serde(default = "d_lambda_sec")]
    pub lambda_sec: f64,
    #[serde(default = "d_lambda_d")]
    pub lambda_d: f64,
    #[serde(default = "d_lambda_p")]
    pub lambda_p: f64,
    #[serde(default = "d_ckpt")]
    pub checkpoint_interval: u64,
    #[serde(default = "d_warp_channels")]
    pub warp_channels: Vec<usize>,
    #[serde(default = "d_gen_channels")]
    pub gen_channels: Vec<usize>,
    #[serde(default = "d_embed_channels")]
    pub embed_channels: Vec<usize>,
    /// Fusion blocks stacked inside each residual unit.
    #[serde(default = "d_fusion_units")]
    pub fusion_units: usize,
    /// Ablation toggle: skip connections in the two-way extractor.
    #[serde(default = "d_true")]
    pub use_multilevel_extractor: bool,
    /// Ablation toggle: regional-mask fusion versus plain concat+conv.
    #[serde(default = "d_true")]
    pub use_mask_fusion: bool,
}

fn d_batch() -> usize {
    1
}
fn d_nfake() -> usize {
    3
}
fn d_lr() -> f64 {
    2e-4
}
fn d_height() -> usize {
    64
}
fn d_width() -> usize {
    48
}
fn d_levels() -> usize {
    4
}
fn d_lambda_f() -> f64 {
    1.0
}
fn d_lambda_sec() -> f64 {
    0.01
}
fn d_lambda_d() -> f64 {
    0.25
}
fn d_lambda_p() -> f64 {
    0.2
}
fn d_ckpt() -> u64 {
    100
}
fn d_warp_channels() -> Vec<usize> {
    vec![16, 32, 64, 128]
}
fn d_gen_channels() -> Vec<usize> {
    vec![16, 32, 64, 128]
}
fn d_embed_channels() -> Vec<usize> {
    vec![8, 16, 32, 64]
}
fn d_fusion_units() -> usize {
    2
}
fn d_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            seed: 0,
            batch_size: d_batch(),
            n_fake: d_nfake(),
            learning_rate: d_lr(),
            height: d_height(),
            width: d_width(),
            k_levels: d_levels(),
            l_scales: d_levels(),
            lambda_f: d_lambda_f(),
            lambda_sec: d_lambda_sec(),
            lambda_d: d_lambda_d(),
            lambda_p: d_lambda_p(),
            checkpoint_interval: d_ckpt(),
            warp_channels: d_warp_channels(),
            gen_channels: d_gen_channels(),
            embed_channels: d_embed_channels(),
            fusion_units: d_fusion_units(),
            use_multilevel_extractor: true,
            use_mask_fusion: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RmgnError::Config("batch_size must be >= 1".into()));
        }
        if !(1..=3).contains(&self.n_fake) {
            return Err(RmgnError::Config("n_fake must be in [1, 3]".into()));
        }
        if self.k_levels == 0 || self.l_scales == 0 {
            return Err(RmgnError::Config("pyramid depths must be >= 1".into()));
        }
        let div = 1usize << (self.k_levels.max(self.l_scales) - 1);
        if self.height % div != 0 || self.width % div != 0 {
            return Err(RmgnError::Config(format!(
                "resolution {}x{} must be divisible by 2^(max(K, L) - 1) = {div}",
                self.height, self.width
            )));
        }
        if self.warp_channels.len() != self.l_scales {
            return Err(RmgnError::Config("warp_channels length must equal l_scales".into()));
        }
        if self.gen_channels.len() != self.k_levels {
            return Err(RmgnError::Config("gen_channels length must equal k_levels".into()));
        }
        if self.embed_channels.is_empty() {
            return Err(RmgnError::Config("embed_channels must be nonempty".into()));
        }
        if self.fusion_units == 0 {
            return Err(RmgnError::Config("fusion_units must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(RmgnError::Config("learning_rate must be nonnegative".into()));
        }
        for (name, v) in [
            ("lambda_f", self.lambda_f),
            ("lambda_sec", self.lambda_sec),
            ("lambda_d", self.lambda_d),
            ("lambda_p", self.lambda_p),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RmgnError::Config(format!("{name} must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn loss_weights<F: Scalar>(&self) -> LossWeights<F> {
        LossWeights {
            lambda_f: F::cast(self.lambda_f),
            lambda_sec: F::cast(self.lambda_sec),
            lambda_d: F::cast(self.lambda_d),
            lambda_p: F::cast(self.lambda_p),
        }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| RmgnError::io(path.display().to_string(), e))?;
    let cfg: TrainConfig = toml::from_str(&text)
        .map_err(|e| RmgnError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(path, text).map_err(|e| RmgnError::io(path.display().to_string(), e))
}

/// Generalized Charbonnier constants (standard optical-flow values).
pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const CHARBONNIER_ALPHA: f64 = 0.45;
/// Instance-normalization variance floor.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
