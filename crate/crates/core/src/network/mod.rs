//! The detector: a four-stage convolutional encoder, key/value projections,
//! attention-weighted local/global memory aggregation, non-local memory
//! read, and a refinement decoder.
//!
//! Per query frame the network encodes the five preceding frames of the
//! original video (local memory) and the five entries preceding the query's
//! position in a shuffled index sequence (global memory). Each memory
//! feature is projected to a compact key map and a richer value map; an
//! attention block per branch collapses the five maps into one weighted
//! average, and the local and global results are summed into a single
//! aggregated key/value pair per feature level. A memory-read module then
//! matches query keys against the aggregated memory keys with a scaled
//! softmax affinity and reads out memory values, which the decoder fuses
//! with encoder skip features into per-pixel instance logits.

mod checkpoint;
mod model;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use model::{
    memory_read, memory_read_with_affinity, AttentionBlock, FeaturePyramidVars, ForwardFlags,
    KeyValueVars, MemoryBankVars, MmaNet, CLASS_COUNT,
};
pub use params::{
    check_parameter_gradients, he_weights, Conv2dLayer, ParamId, ParamStore, ResBlock, Session,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Feature level touched by memory aggregation and reading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    /// Stride-8 features.
    Low = 0,
    /// Stride-16 features.
    High = 1,
}

impl Level {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// The five studied network variants.
///
/// `Basic` reads a plain averaged local memory; `+LM` makes the local
/// average attention-weighted; `+GM` adds an attentive global memory to the
/// basic local average; `+LGM` uses attention on both; `Full` additionally
/// applies memory aggregation and reading at both feature levels instead of
/// the high level only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Basic,
    Lm,
    Gm,
    Lgm,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Basic,
        Variant::Lm,
        Variant::Gm,
        Variant::Lgm,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Lm => "lm",
            Variant::Gm => "gm",
            Variant::Lgm => "lgm",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(Variant::Basic),
            "lm" => Ok(Variant::Lm),
            "gm" => Ok(Variant::Gm),
            "lgm" => Ok(Variant::Lgm),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected basic|lm|gm|lgm|full)"
            ))),
        }
    }

    /// Flag triple `(use_local_attention, use_global_memory, multi_level)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Basic => (false, false, false),
            Variant::Lm => (true, false, false),
            Variant::Gm => (false, true, false),
            Variant::Lgm => (true, true, false),
            Variant::Full => (true, true, true),
        }
    }
}

/// Structural configuration of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels after each encoder stage (strides 2, 4, 8, 16).
    pub encoder_widths: [usize; 4],
    /// Value-map channels per level `[low, high]`; key maps get a quarter.
    pub value_channels: [usize; 2],
    /// Hidden width of attention blocks.
    pub attn_width: usize,
    /// Channels the decoder compresses read features to.
    pub decoder_channels: usize,
    /// Memory frames per branch (the 3/5/7 sweep).
    pub memory_size: usize,
    /// Output classes: background + 8 position labels.
    pub num_classes: usize,
    pub use_local_attention: bool,
    pub use_global_memory: bool,
    pub multi_level: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: [64, 128, 256, 512],
            value_channels: [128, 256],
            attn_width: 64,
            decoder_channels: 256,
            memory_size: 5,
            num_classes: CLASS_COUNT,
            use_local_attention: true,
            use_global_memory: true,
            multi_level: true,
        }
    }
}

impl ModelConfig {
    /// A small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            encoder_widths: [8, 16, 24, 32],
            value_channels: [12, 16],
            attn_width: 12,
            decoder_channels: 24,
            ..Self::default()
        }
    }

    pub fn key_channels(&self, level: Level) -> usize {
        self.value_channels[level.index()] / 4
    }

    pub fn value_channels(&self, level: Level) -> usize {
        self.value_channels[level.index()]
    }

    /// Encoder channels feeding the projections at a level.
    pub fn feature_channels(&self, level: Level) -> usize {
        match level {
            Level::Low => self.encoder_widths[2],
            Level::High => self.encoder_widths[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        for (i, &v) in self.value_channels.iter().enumerate() {
            if v < 4 || v % 4 != 0 {
                return Err(Error::Config(format!(
                    "value_channels[{i}] = {v} must be a positive multiple of 4 (keys are value/4)"
                )));
            }
        }
        if self.attn_width == 0 || self.decoder_channels == 0 {
            return Err(Error::Config(
                "attention/decoder widths must be positive".into(),
            ));
        }
        if self.memory_size == 0 {
            return Err(Error::Config("memory_size must be at least 1".into()));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config("num_classes must be in 2..=256".into()));
        }
        self.variant()?;
        Ok(())
    }

    /// Which studied variant the flag combination corresponds to. Flag
    /// combinations outside the studied set are configuration errors.
    pub fn variant(&self) -> Result<Variant> {
        let flags = (
            self.use_local_attention,
            self.use_global_memory,
            self.multi_level,
        );
        Variant::ALL
            .into_iter()
            .find(|v| v.flags() == flags)
            .ok_or_else(|| {
                Error::Config(format!(
                    "flag combination {flags:?} is not one of the studied variants \
                     (basic|lm|gm|lgm|full); multi_level requires both memories"
                ))
            })
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        let (la, gm, ml) = v.flags();
        self.use_local_attention = la;
        self.use_global_memory = gm;
        self.multi_level = ml;
        self
    }
}
