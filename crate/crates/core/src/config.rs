//! Model and optimization settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PairFeatureVariant, DEFAULT_BINS, DEFAULT_NORMAL_K};

/// Architecture and geometry settings. Serialized field names double as the
/// configuration-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Points per cloud after ingestion.
    pub n: usize,
    /// Patch count.
    pub g: usize,
    /// Points per patch.
    pub k: usize,
    /// Masking ratio.
    pub r: f64,
    /// Neighbors used for normal estimation.
    pub k_n: usize,
    /// Histogram bins per angle.
    pub bins: usize,
    pub pair_feature_variant: PairFeatureVariant,
    pub patch_channels: usize,
    pub descriptor_channels: usize,
    /// Hidden width of the point, descriptor and position embedding MLPs.
    pub embed_hidden: usize,
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// External memory slots per head.
    pub s_mem: usize,
    pub ea_query_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 1024,
            g: 64,
            k: 32,
            r: 0.6,
            k_n: DEFAULT_NORMAL_K,
            bins: DEFAULT_BINS,
            pair_feature_variant: PairFeatureVariant::Standard,
            patch_channels: 128,
            descriptor_channels: 128,
            embed_hidden: 128,
            d: 384,
            heads: 6,
            mlp_ratio: 4,
            encoder_depth: 12,
            decoder_depth: 4,
            s_mem: 64,
            ea_query_projection: true,
        }
    }
}

impl ModelConfig {
    /// Small model for desk-scale experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            n: 512,
            g: 16,
            k: 16,
            patch_channels: 32,
            descriptor_channels: 32,
            d: 96,
            heads: 4,
            encoder_depth: 4,
            decoder_depth: 2,
            s_mem: 16,
            ..Self::default()
        }
    }

    /// Smallest configuration, used by the float64 gradient checks.
    pub fn gradcheck() -> Self {
        ModelConfig {
            n: 64,
            g: 4,
            k: 8,
            patch_channels: 16,
            descriptor_channels: 16,
            embed_hidden: 16,
            d: 24,
            heads: 2,
            mlp_ratio: 2,
            encoder_depth: 2,
            decoder_depth: 1,
            s_mem: 4,
            ..Self::default()
        }
    }

    pub fn masked_count(&self) -> usize {
        masked_count(self.g, self.r)
    }

    pub fn visible_count(&self) -> usize {
        self.g - self.masked_count()
    }

    pub fn descriptor_len(&self) -> usize {
        3 * self.bins
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n == 0 || self.g == 0 || self.k == 0 {
            return fail("n, g and k must be positive".into());
        }
        if self.g > self.n || self.k > self.n {
            return fail(format!("g ({}) and k ({}) must not exceed n ({})", self.g, self.k, self.n));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return fail(format!("r must lie in (0, 1), got {}", self.r));
        }
        let masked = self.masked_count();
        if masked == 0 || masked == self.g {
            return fail(format!("r = {} leaves {masked} of {} patches masked", self.r, self.g));
        }
        if self.k_n < 3 {
            return fail(format!("k-n must be at least 3, got {}", self.k_n));
        }
        if self.bins == 0 {
            return fail("bins must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d ({}) must be divisible by heads ({})", self.d, self.heads));
        }
        if self.mlp_ratio == 0 || self.encoder_depth == 0 || self.decoder_depth == 0 || self.s_mem == 0 {
            return fail("mlp-ratio, depths and s-mem must be positive".into());
        }
        if self.patch_channels == 0 || self.descriptor_channels == 0 || self.embed_hidden == 0 {
            return fail("channel widths must be positive".into());
        }
        Ok(())
    }
}

/// `floor(r * g)`, robust to representation error in `r`.
pub fn masked_count(groups: usize, ratio: f64) -> usize {
    (ratio * groups as f64 + 1e-9).floor().max(0.0) as usize
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub label_smoothing: f64,
    /// Epochs after which a checkpoint is written.
    pub checkpoint_epochs: Vec<usize>,
    /// Random scale/translate augmentation during training.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 1e-6,
            weight_decay: 0.05,
            epochs: 300,
            batch_size: 128,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            label_smoothing: 0.0,
            checkpoint_epochs: vec![100, 200, 300],
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return fail(format!("need 0 <= lr-min ({}) <= lr-max ({})", self.lr_min, self.lr_max));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch-size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return fail("eps must be positive and weight-decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label-smoothing must lie in [0, 1)".into());
        }
        Ok(())
    }
}
