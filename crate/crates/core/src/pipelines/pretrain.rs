//! Self-supervised pre-training with multi-variant consistency.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::MultiChannelRecording;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::encoder::{context_graph, features_graph, mask_graph};
use crate::model::params::Binder;
use crate::model::quantizer::quantizer_graph;
use crate::model::{sample_mask, Model, Selection};
use crate::objectives::{diversity_with_grad, evaluate_terms_with_grad, plan_terms, CclBreakdown};
use crate::pipelines::checkpoint::Checkpoint;
use crate::pipelines::metrics::{code_usage_entropy, MetricRecord, MetricsLog, StepMetrics};
use crate::pipelines::optim::{adamw_step, clip_grad_norm, AdamState, LrSchedule};
use crate::pipelines::replay::{MixSlot, ReplayMixture};
use crate::pipelines::{parallel_map, stream_rng, PipelineConfig, PipelineMode};
use crate::synthcorpus::Utterance;
use crate::tensor::Mat;
use crate::variants::{build_variant_set, AugmentPolicy, MvcMode};

pub(crate) const STAGE_PRETRAIN: u64 = 1;
pub(crate) const STAGE_CONTINUAL: u64 = 2;
pub(crate) const STAGE_AUGMENT_POOLS: u64 = 7;

/// Result of one utterance's forward/backward pass.
pub(crate) struct SlotOutput {
    pub grads: Vec<Mat>,
    pub breakdown: CclBreakdown,
    pub diversity: f64,
    pub codes: Vec<Vec<usize>>,
}

/// Random crop of all channels to at most `max` samples.
pub(crate) fn crop<R: Rng + ?Sized>(
    rec: &MultiChannelRecording,
    max: Option<usize>,
    rng: &mut R,
) -> Result<MultiChannelRecording> {
    match max {
        Some(max) if rec.len() > max => {
            let start = rng.gen_range(0..=rec.len() - max);
            let channels = rec
                .channels()
                .iter()
                .map(|w| w.with_samples(w.samples()[start..start + max].to_vec()))
                .collect::<Result<Vec<_>>>()?;
            MultiChannelRecording::new(channels)
        }
        _ => Ok(rec.clone()),
    }
}

/// Forward and backward pass of the consistency objective for one
/// utterance: K variants, one shared mask plan.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ssl_slot(
    model: &Model,
    cfg: &PipelineConfig,
    utt: &Utterance,
    mode: &MvcMode,
    policy: &AugmentPolicy,
    selection: Selection,
    rng: &mut ChaCha8Rng,
    with_grads: bool,
) -> Result<SlotOutput> {
    let rec = crop(&utt.recording, cfg.max_samples, rng)?;
    let k = mode.variants(cfg.variants);
    let set = build_variant_set(&utt.id, &rec, mode, k, policy, rng)?;
    let enc = &model.config.encoder;
    let qcfg = &model.config.quantizer;
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params);
    let zs = set
        .members
        .iter()
        .map(|w| features_graph(&mut g, &mut b, enc, w.samples()))
        .collect::<Result<Vec<Var>>>()?;
    let plan = sample_mask(g.value(zs[0]).rows, &model.config.mask, rng);
    let mut qs = Vec::with_capacity(k);
    let mut probs = Vec::with_capacity(k);
    let mut codes = Vec::new();
    for &z in &zs {
        let nodes = quantizer_graph(&mut g, &mut b, qcfg, z, selection, rng)?;
        qs.push(nodes.q);
        probs.push(nodes.avg_probs);
        codes.extend(nodes.codes);
    }
    let mut cs = Vec::with_capacity(k);
    for &z in &zs {
        let zm = mask_graph(&mut g, &mut b, z, &plan)?;
        cs.push(context_graph(&mut g, &mut b, enc, zm));
    }
    let terms = plan_terms(k, &plan, &cfg.loss, rng)?;
    let c_vals: Vec<Mat> = cs.iter().map(|&c| g.value(c).clone()).collect();
    let q_vals: Vec<Mat> = qs.iter().map(|&q| g.value(q).clone()).collect();
    let (breakdown, dc, dq) = evaluate_terms_with_grad(&c_vals, &q_vals, &terms, cfg.loss.temperature)?;
    let w = cfg.loss.diversity_weight;
    let mut diversity = 0.0;
    let mut local: Vec<(Var, Mat)> = cs.iter().copied().zip(dc).chain(qs.iter().copied().zip(dq)).collect();
    for &p in &probs {
        let (d, grad) = diversity_with_grad(&g.value(p).data, qcfg.num_codebooks)?;
        diversity += d / k as f64;
        let mut gm = Mat::row_vector(grad);
        gm.scale(w / k as f64);
        local.push((p, gm));
    }
    let mut grads = model.params.zeros_like();
    if with_grads {
        let loss = g.scalar_with_grads(breakdown.total + w * diversity, local);
        let back = g.backward(loss);
        b.accumulate(&back, 1.0, &mut grads);
    }
    Ok(SlotOutput {
        grads,
        breakdown,
        diversity,
        codes,
    })
}

/// One pooled training example: the utterance, its variant mode and
/// whether it belongs to the target corpus.
pub(crate) type PoolItem<'a> = (&'a Utterance, &'a MvcMode, bool);

#[allow(clippy::too_many_arguments)]
fn train_loop(
    model: &mut Model,
    opt: &mut AdamState,
    pool: &[PoolItem<'_>],
    schedule: LrSchedule,
    steps: usize,
    start_step: u64,
    cfg: &PipelineConfig,
    policy: &AugmentPolicy,
    stage: &str,
    tag: u64,
    log: &mut MetricsLog,
) -> Result<()> {
    if steps > 0 && pool.is_empty() {
        return Err(Error::Argument(format!("{stage}: no training utterances")));
    }
    let batch = cfg.batch_size;
    let entries = model.config.quantizer.entries_per_codebook;
    for s in 0..steps {
        let lr = schedule.at(s);
        let tau = model.config.quantizer.temperature(start_step as usize + s);
        let mut brng = stream_rng(cfg.seed, tag, s as u64, 0xffff);
        let picks: Vec<usize> = (0..batch).map(|_| brng.gen_range(0..pool.len())).collect();
        let frozen: &Model = model;
        let outputs = parallel_map(batch, cfg.workers, |i| {
            let (utt, mode, _) = pool[picks[i]];
            let mut rng = stream_rng(cfg.seed, tag, s as u64, i as u64);
            ssl_slot(frozen, cfg, utt, mode, policy, Selection::training(tau), &mut rng, true)
        });
        let mut acc = model.params.zeros_like();
        let mut loss = 0.0;
        let mut l_self = 0.0;
        let mut l_cross = 0.0;
        let mut diversity = 0.0;
        let mut correct = 0;
        let mut terms = 0;
        let mut codes = Vec::new();
        for out in outputs {
            let out = out?;
            for (a, g) in acc.iter_mut().zip(&out.grads) {
                a.add_assign(g);
            }
            let bd = out.breakdown;
            loss += bd.total + cfg.loss.diversity_weight * out.diversity;
            l_self += bd.self_part;
            l_cross += bd.cross_part;
            diversity += out.diversity;
            correct += bd.correct;
            terms += bd.terms;
            codes.extend(out.codes);
        }
        let n = batch as f64;
        acc.iter_mut().for_each(|g| g.scale(1.0 / n));
        if !loss.is_finite() || !acc.iter().all(Mat::is_finite) {
            return Err(Error::Divergence {
                step: start_step as usize + s,
                detail: format!("{stage}: non-finite loss {loss}"),
            });
        }
        clip_grad_norm(&mut acc, cfg.adam.clip_norm);
        adamw_step(&mut model.params, opt, &acc, lr, &cfg.adam, |_| true)?;
        log.push(MetricRecord::Step(StepMetrics {
            stage: stage.to_string(),
            step: start_step as usize + s,
            lr,
            tau,
            loss: loss / n,
            l_self: l_self / n,
            l_cross: l_cross / n,
            diversity: diversity / n,
            accuracy: if terms > 0 { correct as f64 / terms as f64 } else { 0.0 },
            code_entropy: code_usage_entropy(&codes, entries),
            target_fraction: picks.iter().filter(|&&p| pool[p].2).count() as f64 / n,
        }))?;
    }
    Ok(())
}

/// Fresh pre-training in the `SourceData` or `DataMixing` mode.
pub fn pretrain(
    cfg: &PipelineConfig,
    source: &[Utterance],
    target: &[Utterance],
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut pool: Vec<PoolItem> = source.iter().map(|u| (u, &cfg.source_mvc, false)).collect();
    let stage = match cfg.mode {
        PipelineMode::SourceData => "source_data",
        PipelineMode::DataMixing => {
            pool.extend(target.iter().map(|u| (u, &cfg.target_mvc, true)));
            "data_mixing"
        }
        other => {
            return Err(Error::Argument(format!("pretrain does not run mode {other:?}")));
        }
    };
    let policy = cfg.augment.policy(cfg.seed ^ STAGE_AUGMENT_POOLS)?;
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamState::new(&model.params);
    let schedule = LrSchedule::WarmupDecay {
        peak: cfg.peak_lr,
        warmup: cfg.warmup_steps,
        total: cfg.steps,
    };
    train_loop(
        &mut model, &mut opt, &pool, schedule, cfg.steps, 0, cfg, &policy, stage, STAGE_PRETRAIN, log,
    )?;
    log::info!("{stage}: {} steps", cfg.steps);
    let mut ck = Checkpoint::new(model, cfg.seed);
    ck.optimizer = Some(opt);
    ck.step = cfg.steps as u64;
    ck.meta.stages.push(stage.into());
    Ok(ck)
}

/// Continues pre-training of `seed_ckpt` on `D_r ∪ D'_c` at a fixed
/// learning rate.
pub fn continual_pretrain(
    seed_ckpt: &Checkpoint,
    mixture: &ReplayMixture,
    source: &[Utterance],
    target: &[Utterance],
    cfg: &PipelineConfig,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let expected = Model::init(cfg.model.clone(), 0)?;
    expected.check_compatible(&seed_ckpt.model.params)?;
    if seed_ckpt.model.config != cfg.model {
        return Err(Error::Version("seed checkpoint was built with a different model config".into()));
    }
    let mut pool: Vec<PoolItem> = Vec::with_capacity(mixture.len());
    for i in 0..mixture.len() {
        pool.push(match mixture.get(i) {
            MixSlot::Target(j) => (
                target.get(j).ok_or_else(|| Error::Argument(format!("target index {j} out of range")))?,
                &cfg.target_mvc,
                true,
            ),
            MixSlot::Replay(j) => (
                source.get(j).ok_or_else(|| Error::Argument(format!("source index {j} out of range")))?,
                &cfg.source_mvc,
                false,
            ),
        });
    }
    let policy = cfg.augment.policy(cfg.seed ^ STAGE_AUGMENT_POOLS)?;
    let mut model = seed_ckpt.model.clone();
    let mut opt = AdamState::new(&model.params);
    train_loop(
        &mut model,
        &mut opt,
        &pool,
        LrSchedule::Constant(cfg.fixed_lr),
        cfg.steps,
        seed_ckpt.step,
        cfg,
        &policy,
        "continual",
        STAGE_CONTINUAL,
        log,
    )?;
    log::info!("continual: {} steps at rate {}", cfg.steps, mixture.rate);
    let mut ck = seed_ckpt.clone();
    ck.model = model;
    ck.optimizer = Some(opt);
    ck.step += cfg.steps as u64;
    ck.meta.stages.push("continual".into());
    Ok(ck)
}
