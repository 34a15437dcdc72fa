//! The miniature contrastive speech encoder.
//!
//! Waveform → strided convolutional feature extractor → latent frames `Z`
//! (one per 20 ms) → optional span masking → convolutional positional
//! encoding + pre-norm transformer → context frames `C`. In parallel the
//! unmasked `Z` is discretized by a product quantizer into targets `Q`.

pub mod encoder;
pub mod mask;
pub mod params;
pub mod quantizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use encoder::{contextualize, extract_features, normalize_waveform};
pub use mask::{apply_mask, sample_mask, MaskConfig, MaskPlan};
pub use params::{Model, ParamStore};
pub use quantizer::{gumbel_noise, gumbel_softmax_select, quantize, Quantized, Selection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub conv_channels: usize,
    pub conv_strides: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub ctx_layers: usize,
    pub ctx_dim: usize,
    pub ctx_heads: usize,
    pub ffn_dim: usize,
    /// Odd kernel width of the convolutional positional encoding.
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
}

pub const CONV_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];
pub const CONV_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            conv_channels: 64,
            conv_strides: CONV_STRIDES.to_vec(),
            conv_kernels: CONV_KERNELS.to_vec(),
            ctx_layers: 2,
            ctx_dim: 64,
            ctx_heads: 4,
            ffn_dim: 128,
            pos_conv_kernel: 9,
            pos_conv_groups: 4,
        }
    }

    /// Full-size base configuration.
    pub fn paper() -> Self {
        Self {
            conv_channels: 512,
            ctx_layers: 12,
            ctx_dim: 768,
            ctx_heads: 8,
            ffn_dim: 3072,
            pos_conv_kernel: 127,
            pos_conv_groups: 16,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_strides.len() != 7 || self.conv_kernels.len() != 7 {
            return Err(Error::Argument("feature extractor needs 7 strides and 7 kernels".into()));
        }
        if self.conv_strides.iter().chain(&self.conv_kernels).any(|&v| v == 0) {
            return Err(Error::Argument("zero stride or kernel".into()));
        }
        if self.conv_channels == 0 || self.ctx_dim == 0 || self.ffn_dim == 0 || self.ctx_heads == 0 {
            return Err(Error::Argument("zero-sized layer".into()));
        }
        if self.ctx_dim % self.ctx_heads != 0 {
            return Err(Error::Argument(format!(
                "ctx_dim {} not divisible by {} heads",
                self.ctx_dim, self.ctx_heads
            )));
        }
        if self.pos_conv_kernel % 2 == 0 || self.ctx_dim % self.pos_conv_groups != 0 {
            return Err(Error::Argument(
                "positional conv needs an odd kernel and groups dividing ctx_dim".into(),
            ));
        }
        Ok(())
    }

    /// Product of all strides (samples per frame).
    pub fn total_stride(&self) -> usize {
        self.conv_strides.iter().product()
    }

    /// Smallest input length that yields one frame.
    pub fn receptive_field(&self) -> usize {
        self.conv_kernels
            .iter()
            .zip(&self.conv_strides)
            .rev()
            .fold(1, |len, (&k, &s)| (len - 1) * s + k)
    }
}

/// Number of output frames for `num_samples` input samples.
pub fn frame_count(num_samples: usize, cfg: &EncoderConfig) -> Result<usize> {
    let mut len = num_samples;
    for (&k, &s) in cfg.conv_kernels.iter().zip(&cfg.conv_strides) {
        if len < k {
            return Err(Error::TooShort {
                samples: num_samples,
                minimum: cfg.receptive_field(),
            });
        }
        len = (len - k) / s + 1;
    }
    Ok(len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerConfig {
    pub num_codebooks: usize,
    pub entries_per_codebook: usize,
    /// Width of each codebook entry.
    pub entry_dim: usize,
    pub temperature_start: f64,
    pub temperature_floor: f64,
    pub temperature_decay: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            num_codebooks: 2,
            entries_per_codebook: 32,
            entry_dim: 32,
            temperature_start: 2.0,
            temperature_floor: 0.5,
            temperature_decay: 0.999,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_codebooks == 0 || self.entries_per_codebook == 0 || self.entry_dim == 0 {
            return Err(Error::Argument("quantizer sizes must be ≥ 1".into()));
        }
        if !(self.temperature_start > 0.0 && self.temperature_floor > 0.0) {
            return Err(Error::Argument("Gumbel temperatures must be > 0".into()));
        }
        Ok(())
    }

    /// Annealed Gumbel temperature at an optimizer step.
    pub fn temperature(&self, step: usize) -> f64 {
        (self.temperature_start * self.temperature_decay.powi(step as i32))
            .max(self.temperature_floor)
    }

    pub fn logits_dim(&self) -> usize {
        self.num_codebooks * self.entries_per_codebook
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub mask: MaskConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.quantizer.validate()?;
        self.mask.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameRole {
    Latent,
    Context,
    Quantized,
}

/// Per-frame vectors (`T×D`, one row per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Mat,
    role: FrameRole,
}

impl FrameSequence {
    pub fn new(frames: Mat, role: FrameRole) -> Self {
        Self { frames, role }
    }

    pub fn frames(&self) -> &Mat {
        &self.frames
    }

    pub fn into_frames(self) -> Mat {
        self.frames
    }

    pub fn role(&self) -> FrameRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.frames.rows
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Length recurrence written out layer by layer, independent of
    /// `frame_count`.
    fn oracle(mut len: i64) -> i64 {
        for (k, s) in [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)] {
            len = (len - k).div_euclid(s) + 1;
            if len <= 0 {
                return 0;
            }
        }
        len
    }

    #[test]
    fn frame_arithmetic() {
        let cfg = EncoderConfig::desk();
        assert_eq!(frame_count(16000, &cfg).unwrap(), 49);
        assert_eq!(frame_count(400, &cfg).unwrap(), 1);
        assert!(matches!(
            frame_count(399, &cfg),
            Err(Error::TooShort { minimum: 400, .. })
        ));
        assert_eq!(cfg.receptive_field(), 400);
        assert_eq!(cfg.total_stride(), 320);
        for n in (400..20000).step_by(37) {
            assert_eq!(frame_count(n, &cfg).unwrap() as i64, oracle(n as i64));
        }
        assert_eq!(oracle(399), 0);
    }

    #[test]
    fn configs_validate() {
        assert!(EncoderConfig::desk().validate().is_ok());
        assert!(EncoderConfig::paper().validate().is_ok());
        let bad = EncoderConfig {
            ctx_heads: 5,
            ..EncoderConfig::desk()
        };
        assert!(bad.validate().is_err());
        let q = QuantizerConfig::default();
        assert_eq!(q.temperature(0), 2.0);
        assert!((q.temperature(1) - 1.998).abs() < 1e-12);
        assert_eq!(q.temperature(100_000), 0.5);
    }
}
