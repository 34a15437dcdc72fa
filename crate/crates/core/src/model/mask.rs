//! Span masking of latent frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FrameSequence;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Probability that a frame starts a masked span.
    pub start_prob: f64,
    /// Span length in frames.
    pub span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            start_prob: 0.065,
            span: 10,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.start_prob > 0.0 && self.start_prob < 1.0) {
            return Err(Error::Argument(format!(
                "mask start probability {} outside (0, 1)",
                self.start_prob
            )));
        }
        if self.span == 0 {
            return Err(Error::Argument("mask span must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Expected masked fraction far from the sequence edges.
    pub fn expected_fraction(&self) -> f64 {
        1.0 - (1.0 - self.start_prob).powi(self.span as i32)
    }
}

/// Masked frame indices for one utterance. One plan is shared by every
/// variant of that utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    masked: Vec<usize>,
    frames: usize,
}

impl MaskPlan {
    pub fn new(mut masked: Vec<usize>, frames: usize) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= frames) {
            return Err(Error::Argument(format!(
                "masked index beyond {frames} frames"
            )));
        }
        Ok(Self { masked, frames })
    }

    pub fn empty(frames: usize) -> Self {
        Self {
            masked: Vec::new(),
            frames,
        }
    }

    pub fn all(frames: usize) -> Self {
        Self {
            masked: (0..frames).collect(),
            frames,
        }
    }

    pub fn masked_indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.masked.binary_search(&t).is_ok()
    }

    pub fn fraction(&self) -> f64 {
        self.masked.len() as f64 / self.frames as f64
    }
}

/// Draws span starts independently with `start_prob` and masks
/// `[start, start + span)` clipped to the sequence. When fewer than two
/// frames end up masked, a full span placed uniformly where it fits is
/// added, so every masked step has at least one distractor.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, cfg: &MaskConfig, rng: &mut R) -> MaskPlan {
    let mut masked = vec![false; frames];
    for t in 0..frames {
        if rng.gen::<f64>() < cfg.start_prob {
            for m in masked.iter_mut().skip(t).take(cfg.span) {
                *m = true;
            }
        }
    }
    if masked.iter().filter(|&&m| m).count() < 2.min(frames) {
        let width = cfg.span.min(frames);
        let start = rng.gen_range(0..=frames - width);
        masked[start..start + width].iter_mut().for_each(|m| *m = true);
    }
    MaskPlan {
        masked: (0..frames).filter(|&t| masked[t]).collect(),
        frames,
    }
}

/// Replaces masked frames by `mask_vector`.
pub fn apply_mask(z: &FrameSequence, plan: &MaskPlan, mask_vector: &[f64]) -> Result<FrameSequence> {
    let frames = z.frames();
    if plan.frames() != frames.rows {
        return Err(Error::Dimension(format!(
            "mask plan covers {} frames, sequence has {}",
            plan.frames(),
            frames.rows
        )));
    }
    if mask_vector.len() != frames.cols {
        return Err(Error::Dimension(format!(
            "mask vector has {} dims, frames have {}",
            mask_vector.len(),
            frames.cols
        )));
    }
    let mut out: Mat = frames.clone();
    for &t in plan.masked_indices() {
        out.row_mut(t).copy_from_slice(mask_vector);
    }
    Ok(FrameSequence::new(out, z.role()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FrameRole;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn near_certain_starts_mask_everything() {
        let cfg = MaskConfig {
            start_prob: 0.999_999,
            span: 3,
        };
        let plan = sample_mask(40, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(plan.len(), 40);
    }

    #[test]
    fn span_clipped_at_boundary() {
        // T = 5, M = 10 and any start at 0 covers the whole sequence
        let cfg = MaskConfig {
            start_prob: 0.5,
            span: 10,
        };
        for seed in 0..20 {
            let plan = sample_mask(5, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            if plan.contains(0) {
                assert_eq!(plan.masked_indices(), &[0, 1, 2, 3, 4]);
            }
        }
    }

    #[test]
    fn never_empty() {
        let cfg = MaskConfig {
            start_prob: 1e-9,
            span: 4,
        };
        for seed in 0..50 {
            let plan = sample_mask(20, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(plan.len(), 4);
            let m = plan.masked_indices();
            assert_eq!(m[3] - m[0], 3);
        }
        let plan = sample_mask(1, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(plan.masked_indices(), &[0]);
        let sparse = MaskConfig {
            start_prob: 0.03,
            span: 10,
        };
        for seed in 0..2000 {
            assert!(sample_mask(24, &sparse, &mut ChaCha8Rng::seed_from_u64(seed)).len() >= 2);
        }
    }

    #[test]
    fn apply_mask_cases() {
        let z = FrameSequence::new(
            Mat::from_vec(5, 2, (0..10).map(|v| v as f64).collect()),
            FrameRole::Latent,
        );
        let mv = [9.0, -9.0];
        let same = apply_mask(&z, &MaskPlan::empty(5), &mv).unwrap();
        assert_eq!(same.frames(), z.frames());
        let all = apply_mask(&z, &MaskPlan::all(5), &mv).unwrap();
        assert!((0..5).all(|t| all.frames().row(t) == mv));
        let one = apply_mask(&z, &MaskPlan::new(vec![3], 5).unwrap(), &mv).unwrap();
        for t in 0..5 {
            if t == 3 {
                assert_eq!(one.frames().row(t), mv);
            } else {
                assert_eq!(one.frames().row(t), z.frames().row(t));
            }
        }
        assert!(apply_mask(&z, &MaskPlan::empty(4), &mv).is_err());
        assert!(apply_mask(&z, &MaskPlan::empty(5), &[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MaskConfig::default().validate().is_ok());
        assert!(MaskConfig { start_prob: 0.0, span: 10 }.validate().is_err());
        assert!(MaskConfig { start_prob: 0.1, span: 0 }.validate().is_err());
    }
}
