//! Pre-training pipelines, continual training with replay, CTC fine-tuning,
//! evaluation and checkpointing.

pub mod checkpoint;
pub mod eval;
pub mod finetune;
pub mod metrics;
pub mod optim;
pub mod pretrain;
pub mod replay;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ModelConfig};
use crate::objectives::LossConfig;
use crate::synthcorpus::{synthetic_noise_pool, synthetic_rir_pool};
use crate::variants::{AugmentPolicy, MvcMode};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use eval::{
    edit_distance, evaluate, representation_consistency, token_error_rate, EvalMetrics,
};
pub use finetune::{finetune_ctc, supervised_transfer};
pub use metrics::{MetricRecord, MetricsLog, StepMetrics};
pub use optim::{AdamConfig, AdamState, LrSchedule};
pub use pretrain::{continual_pretrain, pretrain};
pub use replay::{build_replay_mixture, MixSlot, ReplayMixture, ReplayRate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PipelineMode {
    /// Pre-train on the source corpus only.
    #[default]
    SourceData,
    /// Pre-train on the union of source and target corpora.
    DataMixing,
    /// Source pre-training followed by continual training on the target
    /// corpus with source replay.
    Continual,
    /// Labeled source fine-tuning followed by labeled target fine-tuning.
    SupervisedTransfer,
}

/// Augmentation probabilities; room responses and noise clips are
/// synthesized from the pipeline seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub pitch_prob: f64,
    pub pitch_semitone_range: (i32, i32),
    pub rir_prob: f64,
    pub noise_prob: f64,
    pub snr_range_db: (f64, f64),
    pub rir_pool_size: usize,
    pub noise_pool_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = AugmentPolicy::default();
        Self {
            pitch_prob: p.pitch_prob,
            pitch_semitone_range: p.pitch_semitone_range,
            rir_prob: p.rir_prob,
            noise_prob: p.noise_prob,
            snr_range_db: p.snr_range_db,
            rir_pool_size: 8,
            noise_pool_size: 8,
        }
    }
}

impl AugmentConfig {
    pub fn policy(&self, seed: u64) -> Result<AugmentPolicy> {
        let policy = AugmentPolicy {
            pitch_prob: self.pitch_prob,
            pitch_semitone_range: self.pitch_semitone_range,
            rir_prob: self.rir_prob,
            noise_prob: self.noise_prob,
            snr_range_db: self.snr_range_db,
            rir_pool: synthetic_rir_pool(self.rir_pool_size, seed),
            noise_pool: synthetic_noise_pool(self.noise_pool_size, 16_000, seed),
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    /// Steps of the second (target) stage of supervised transfer.
    pub target_steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Keep the convolutional feature extractor fixed throughout.
    pub freeze_feature_extractor: bool,
    /// Train only the output layer for this many initial steps.
    pub freeze_encoder_steps: usize,
    /// Channel used from multichannel recordings.
    pub channel: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            target_steps: 1000,
            lr: 5e-4,
            warmup_steps: 100,
            batch_size: 4,
            freeze_feature_extractor: true,
            freeze_encoder_steps: 0,
            channel: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Variants per utterance (K) for MVC modes.
    pub variants: usize,
    /// Variant construction for the clean source corpus.
    pub source_mvc: MvcMode,
    /// Variant construction for the multichannel target corpus.
    pub target_mvc: MvcMode,
    pub replay_rate: ReplayRate,
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Learning rate of continual pre-training.
    pub fixed_lr: f64,
    pub batch_size: usize,
    /// Random crop applied to each utterance before variant construction.
    pub max_samples: Option<usize>,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub finetune: FinetuneConfig,
    /// Parallel per-utterance workers. Results do not depend on it.
    pub workers: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::SourceData,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            variants: 2,
            source_mvc: MvcMode::da(),
            target_mvc: MvcMode::mc(),
            replay_rate: ReplayRate::default(),
            steps: 2000,
            warmup_steps: 200,
            peak_lr: 5e-4,
            fixed_lr: 5e-5,
            batch_size: 4,
            max_samples: Some(32_000),
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            finetune: FinetuneConfig::default(),
            workers: 1,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Full-scale model and schedule.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig {
                encoder: EncoderConfig::paper(),
                ..ModelConfig::default()
            },
            steps: 400_000,
            warmup_steps: 32_000,
            peak_lr: 5e-3,
            fixed_lr: 5e-5,
            batch_size: 64,
            max_samples: Some(250_000),
            finetune: FinetuneConfig {
                steps: 20_000,
                ..FinetuneConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.variants == 0 {
            return Err(Error::Argument("variants must be ≥ 1".into()));
        }
        if self.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Argument("batch size must be ≥ 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.fixed_lr > 0.0 && self.finetune.lr > 0.0) {
            return Err(Error::Argument("learning rates must be > 0".into()));
        }
        if self.workers == 0 {
            return Err(Error::Argument("workers must be ≥ 1".into()));
        }
        if self.max_samples.is_some_and(|n| n < self.model.encoder.receptive_field()) {
            return Err(Error::Argument("max_samples below the encoder receptive field".into()));
        }
        Ok(())
    }
}

/// Deterministic generator for a (stage, step, slot) triple.
pub(crate) fn stream_rng(seed: u64, stage: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream((step << 16) | (slot & 0xffff));
    rng
}

/// Runs `f` over `0..n` on up to `workers` threads, returning results in
/// index order.
pub(crate) fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let f = &f;
                s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_round_trip() {
        let cfg = PipelineConfig {
            source_mvc: "da+mc".parse().unwrap(),
            replay_rate: "1:3".parse().unwrap(),
            ..PipelineConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        let partial = PipelineConfig::from_toml("steps = 7\n[model.encoder]\nconv_channels = 16\n").unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.model.encoder.conv_channels, 16);
        assert_eq!(partial.model.encoder.ctx_dim, 64);
        assert!(PipelineConfig::from_toml("variants = 0").is_err());
        assert!(PipelineConfig::from_toml("nonsense = [").is_err());
    }

    #[test]
    fn parallel_map_preserves_order() {
        let v = parallel_map(11, 3, |i| i * i);
        assert_eq!(v, (0..11).map(|i| i * i).collect::<Vec<_>>());
    }
}
