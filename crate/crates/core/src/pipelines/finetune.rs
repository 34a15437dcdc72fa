//! CTC fine-tuning and two-stage supervised transfer.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::encoder::{context_graph, features_graph};
use crate::model::params::{Binder, CTC_HEAD};
use crate::model::{extract_features, Model};
use crate::objectives::ctc::min_frames;
use crate::objectives::{ctc_loss_with_grad, Vocabulary};
use crate::pipelines::checkpoint::Checkpoint;
use crate::pipelines::metrics::{FinetuneMetrics, MetricRecord, MetricsLog};
use crate::pipelines::optim::{adamw_step, clip_grad_norm, AdamState, LrSchedule};
use crate::pipelines::{parallel_map, stream_rng, PipelineConfig};
use crate::synthcorpus::Utterance;
use crate::tensor::Mat;

pub(crate) const STAGE_FINETUNE: u64 = 4;
pub(crate) const STAGE_TRANSFER: u64 = 5;

/// CTC output logits on top of context frames.
pub(crate) fn head_graph(g: &mut Graph, b: &mut Binder, c: Var) -> Var {
    let w = b.param(g, CTC_HEAD);
    let bias = b.param(g, "ctc.bias");
    g.linear(c, w, bias)
}

/// Output logits (`T×|vocab|`) for a waveform.
pub fn ctc_logits(model: &Model, samples: &[f64]) -> Result<Mat> {
    if !model.has_ctc_head() {
        return Err(Error::Contract("model has no CTC output layer".into()));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params);
    let z = features_graph(&mut g, &mut b, &model.config.encoder, samples)?;
    let c = context_graph(&mut g, &mut b, &model.config.encoder, z);
    let out = head_graph(&mut g, &mut b, c);
    Ok(g.value(out).clone())
}

struct Labeled {
    samples: Vec<f64>,
    /// Cached latent frames when the feature extractor is frozen.
    z: Option<Mat>,
    target: Vec<usize>,
}

fn prepare(model: &Model, utts: &[Utterance], cfg: &PipelineConfig) -> Result<Vec<Labeled>> {
    let vocab = Vocabulary::default();
    utts.iter()
        .map(|u| {
            let text = u
                .transcript
                .as_deref()
                .ok_or_else(|| Error::Data(format!("{}: no transcript", u.id)))?;
            let target = vocab.encode(text)?;
            let ch = cfg.finetune.channel;
            if ch >= u.recording.num_channels() {
                return Err(Error::Argument(format!(
                    "{}: channel {ch} requested, recording has {}",
                    u.id,
                    u.recording.num_channels()
                )));
            }
            let w = u.recording.channel(ch);
            let z = extract_features(model, w)?;
            if z.len() < min_frames(&target) {
                return Err(Error::InfeasibleAlignment {
                    frames: z.len(),
                    required: min_frames(&target),
                });
            }
            Ok(Labeled {
                samples: w.samples().to_vec(),
                z: cfg.finetune.freeze_feature_extractor.then(|| z.into_frames()),
                target,
            })
        })
        .collect()
}

fn ctc_slot(model: &Model, item: &Labeled) -> Result<(f64, Vec<Mat>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params);
    let enc = &model.config.encoder;
    let z = match &item.z {
        Some(z) => g.leaf(z.clone()),
        None => features_graph(&mut g, &mut b, enc, &item.samples)?,
    };
    let c = context_graph(&mut g, &mut b, enc, z);
    let logits = head_graph(&mut g, &mut b, c);
    let (loss, mut dl) = ctc_loss_with_grad(g.value(logits), &item.target)?;
    let scale = 1.0 / item.target.len().max(1) as f64;
    dl.scale(scale);
    let node = g.scalar_with_grads(loss * scale, vec![(logits, dl)]);
    let back = g.backward(node);
    let mut grads = model.params.zeros_like();
    b.accumulate(&back, 1.0, &mut grads);
    Ok((loss * scale, grads))
}

fn finetune_stage(
    ckpt: &Checkpoint,
    labeled: &[Utterance],
    cfg: &PipelineConfig,
    steps: usize,
    stage: &str,
    tag: u64,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let fcfg = &cfg.finetune;
    let mut model = ckpt.model.clone();
    let fresh_head = !model.has_ctc_head();
    if fresh_head {
        model.add_ctc_head(&Vocabulary::default(), cfg.seed);
    }
    let resumed = match &ckpt.optimizer {
        Some(o) if !fresh_head && o.matches(&model.params) => Some(o.clone()),
        _ => None,
    };
    let schedule = if resumed.is_some() {
        LrSchedule::Constant(fcfg.lr)
    } else {
        LrSchedule::WarmupConstant {
            lr: fcfg.lr,
            warmup: fcfg.warmup_steps,
        }
    };
    let mut opt = resumed.unwrap_or_else(|| AdamState::new(&model.params));
    let data = prepare(&model, labeled, cfg)?;
    if steps > 0 && data.is_empty() {
        return Err(Error::Argument(format!("{stage}: no labeled utterances")));
    }
    let batch = fcfg.batch_size;
    for s in 0..steps {
        let lr = schedule.at(s);
        let mut brng = stream_rng(cfg.seed, tag, s as u64, 0xffff);
        let picks: Vec<usize> = (0..batch).map(|_| brng.gen_range(0..data.len())).collect();
        let frozen: &Model = &model;
        let outputs = parallel_map(batch, cfg.workers, |i| ctc_slot(frozen, &data[picks[i]]));
        let mut acc = model.params.zeros_like();
        let mut loss = 0.0;
        for out in outputs {
            let (l, grads) = out?;
            loss += l;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.add_assign(g);
            }
        }
        let n = batch as f64;
        acc.iter_mut().for_each(|g| g.scale(1.0 / n));
        let global = ckpt.step as usize + s;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: global,
                detail: format!("{stage}: non-finite CTC loss"),
            });
        }
        clip_grad_norm(&mut acc, cfg.adam.clip_norm);
        let head_only = s < fcfg.freeze_encoder_steps;
        let fe_frozen = fcfg.freeze_feature_extractor;
        adamw_step(&mut model.params, &mut opt, &acc, lr, &cfg.adam, |name| {
            name.starts_with("ctc.")
                || (!head_only && name.starts_with("ctx."))
                || (!head_only && !fe_frozen && Model::is_feature_extractor_param(name))
        })?;
        log.push(MetricRecord::Finetune(FinetuneMetrics {
            stage: stage.to_string(),
            step: global,
            lr,
            ctc_loss: loss / n,
        }))?;
    }
    log::info!("{stage}: {steps} steps on {} utterances", data.len());
    let mut out = ckpt.clone();
    out.model = model;
    out.optimizer = Some(opt);
    out.step += steps as u64;
    out.meta.stages.push(stage.into());
    Ok(out)
}

/// Adds a CTC output layer (if absent) and trains on labeled utterances.
pub fn finetune_ctc(
    ckpt: &Checkpoint,
    labeled: &[Utterance],
    cfg: &PipelineConfig,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    finetune_stage(ckpt, labeled, cfg, cfg.finetune.steps, "finetune", STAGE_FINETUNE, log)
}

/// Fine-tunes on the labeled source corpus, then continues on the labeled
/// target corpus.
pub fn supervised_transfer(
    ckpt: &Checkpoint,
    source: &[Utterance],
    target: &[Utterance],
    cfg: &PipelineConfig,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    let stage1 = finetune_ctc(ckpt, source, cfg, log)?;
    log::info!("transfer: source stage done at step {}", stage1.step);
    finetune_stage(
        &stage1,
        target,
        cfg,
        cfg.finetune.target_steps,
        "transfer",
        STAGE_TRANSFER,
        log,
    )
}
