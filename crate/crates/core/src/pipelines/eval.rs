//! Token error rate, masked-prediction accuracy and representation
//! consistency.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{contextualize, extract_features, Model, Selection};
use crate::objectives::ctc::greedy_ctc_decode;
use crate::objectives::{cosine_sim, Vocabulary};
use crate::pipelines::finetune::ctc_logits;
use crate::pipelines::pretrain::ssl_slot;
use crate::pipelines::{stream_rng, PipelineConfig};
use crate::synthcorpus::Utterance;
use crate::variants::{augment, build_variant_set, AugmentPolicy, MvcMode, Provenance, VariantSet};

pub(crate) const STAGE_EVAL: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub utterances: usize,
    /// Present when the model has a CTC output layer.
    pub token_error_rate: Option<f64>,
    pub contrastive_accuracy: f64,
    pub contrastive_loss: f64,
}

/// Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Total edit distance over total reference length.
pub fn token_error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let errors: usize = pairs.iter().map(|(r, h)| edit_distance(r, h)).sum();
    let len: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if len == 0 {
        return if errors == 0 { 0.0 } else { 1.0 };
    }
    errors as f64 / len as f64
}

/// Greedy CTC transcription of one channel.
pub fn transcribe(model: &Model, utt: &Utterance, channel: usize) -> Result<String> {
    let ch = channel.min(utt.recording.num_channels() - 1);
    let logits = ctc_logits(model, utt.recording.channel(ch).samples())?;
    Ok(greedy_ctc_decode(&logits, &Vocabulary::default()))
}

/// Deterministic evaluation on held-out utterances.
pub fn evaluate(model: &Model, test: &[Utterance], cfg: &PipelineConfig) -> Result<EvalMetrics> {
    let vocab = Vocabulary::default();
    let eval_cfg = PipelineConfig {
        max_samples: None,
        ..cfg.clone()
    };
    let identity = AugmentPolicy::identity();
    let mut pairs = Vec::new();
    let mut correct = 0;
    let mut terms = 0;
    let mut loss = 0.0;
    for (i, utt) in test.iter().enumerate() {
        if model.has_ctc_head() {
            if let Some(text) = &utt.transcript {
                let hyp = transcribe(model, utt, cfg.finetune.channel)?;
                pairs.push((vocab.encode(text)?, vocab.encode(&hyp)?));
            }
        }
        let mut rng = stream_rng(cfg.seed, STAGE_EVAL, i as u64, 0);
        let out = ssl_slot(
            model,
            &eval_cfg,
            utt,
            &MvcMode::None,
            &identity,
            Selection::Argmax,
            &mut rng,
            false,
        )?;
        correct += out.breakdown.correct;
        terms += out.breakdown.terms;
        loss += out.breakdown.total * out.breakdown.terms as f64;
    }
    Ok(EvalMetrics {
        utterances: test.len(),
        token_error_rate: (!pairs.is_empty()).then(|| token_error_rate(&pairs)),
        contrastive_accuracy: if terms > 0 { correct as f64 / terms as f64 } else { 0.0 },
        contrastive_loss: if terms > 0 { loss / terms as f64 } else { 0.0 },
    })
}

/// Mean frame-wise cosine similarity between the unmasked context
/// representations of the two members of each pair.
pub fn representation_consistency(model: &Model, pairs: &[VariantSet]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for set in pairs {
        if set.k() != 2 {
            return Err(Error::Contract(format!(
                "consistency needs pairs, {} has {} members",
                set.origin_id,
                set.k()
            )));
        }
        let c: Vec<_> = set
            .members
            .iter()
            .map(|w| contextualize(model, &extract_features(model, w)?))
            .collect::<Result<_>>()?;
        for t in 0..c[0].len() {
            total += cosine_sim(c[0].frames().row(t), c[1].frames().row(t))?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Argument("no frames to compare".into()));
    }
    Ok(total / count as f64)
}

/// (original, augmented) pairs from channel 0; identity draws are redrawn.
pub fn augmented_pairs(utts: &[Utterance], policy: &AugmentPolicy, seed: u64) -> Result<Vec<VariantSet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    utts.iter()
        .map(|u| {
            let w = u.recording.channel(0);
            let mut draw = augment(w, policy, &mut rng)?;
            for _ in 0..32 {
                if !draw.1.is_identity() {
                    break;
                }
                draw = augment(w, policy, &mut rng)?;
            }
            let (aug, ops) = draw;
            VariantSet::new(
                u.id.clone(),
                vec![w.clone(), aug],
                vec![
                    Provenance::Original { channel: 0 },
                    Provenance::Augmented { channel: 0, ops },
                ],
            )
        })
        .collect()
}

/// Pairs of distinct microphones of each multichannel recording.
pub fn channel_pairs(utts: &[Utterance], seed: u64) -> Result<Vec<VariantSet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = AugmentPolicy::identity();
    utts.iter()
        .map(|u| build_variant_set(&u.id, &u.recording, &MvcMode::mc(), 2, &identity, &mut rng))
        .collect()
}
