//! Pipeline behavior on tiny configurations.

use mvc_core::gradcheck::small_model_config;
use mvc_core::model::Model;
use mvc_core::objectives::{ctc_loss, Vocabulary};
use mvc_core::pipelines::eval::{augmented_pairs, transcribe};
use mvc_core::pipelines::finetune::ctc_logits;
use mvc_core::pipelines::*;
use mvc_core::synthcorpus::{synthesize, CorpusSpec, Utterance};
use mvc_core::variants::{AugmentPolicy, VariantSet};
use mvc_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, seed: u64, noisy: bool) -> Vec<Utterance> {
    let base = if noisy {
        CorpusSpec::noisy_multichannel()
    } else {
        CorpusSpec::default()
    };
    let spec = CorpusSpec {
        num_utterances: n,
        seed,
        duration_range: (0.4, 0.6),
        tokens_per_utt: (3, 5),
        ..base
    };
    synthesize(&spec, &Vocabulary::default())
        .unwrap()
        .iter()
        .map(Utterance::from)
        .collect()
}

fn tiny() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.model = small_model_config();
    cfg.max_samples = Some(4000);
    cfg.batch_size = 2;
    cfg.steps = 4;
    cfg.warmup_steps = 1;
    cfg.finetune.steps = 4;
    cfg.finetune.target_steps = 3;
    cfg.finetune.warmup_steps = 1;
    cfg.finetune.batch_size = 2;
    cfg.seed = 5;
    cfg
}

#[test]
fn zero_step_pretrain_is_initialization() {
    let dc = corpus(3, 1, false);
    let cfg = PipelineConfig { steps: 0, ..tiny() };
    let mut log = MetricsLog::new();
    let ck = pretrain(&cfg, &dc, &[], &mut log).unwrap();
    assert!(log.records.is_empty());
    let init = Model::init(cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(ck.model.params.values(), init.params.values());
    let again = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let m = evaluate(&again.model, &dc, &cfg).unwrap();
    assert_eq!(m.utterances, 3);
    assert!(m.token_error_rate.is_none());
    assert!((0.0..=1.0).contains(&m.contrastive_accuracy));
}

#[test]
fn pretrain_metrics_are_well_formed() {
    let dc = corpus(3, 1, false);
    let dr = corpus(2, 2, true);
    let cfg = PipelineConfig {
        mode: PipelineMode::DataMixing,
        ..tiny()
    };
    let mut log = MetricsLog::new();
    let ck = pretrain(&cfg, &dc, &dr, &mut log).unwrap();
    assert_eq!(ck.step, 4);
    assert_eq!(ck.meta.stages, vec!["data_mixing".to_string()]);
    let steps: Vec<&StepMetrics> = log.steps().collect();
    assert_eq!(steps.len(), 4);
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s.step, i);
        assert!(s.loss.is_finite());
        assert!((0.0..=1.0).contains(&s.accuracy));
        assert!((0.0..=1.0).contains(&s.target_fraction));
        assert!(s.code_entropy >= 0.0);
        assert!((s.l_self + s.l_cross - (s.loss - cfg.loss.diversity_weight * s.diversity)).abs() < 1e-9);
    }
    let schedule = LrSchedule::WarmupDecay {
        peak: cfg.peak_lr,
        warmup: cfg.warmup_steps,
        total: cfg.steps,
    };
    assert!(steps.iter().all(|s| s.lr == schedule.at(s.step)));
    assert!(steps[3].lr < steps[1].lr);
}

#[test]
fn continual_edge_cases() {
    let dc = corpus(4, 1, false);
    let dr = corpus(3, 2, true);
    let cfg = tiny();
    let seed_ck = pretrain(&cfg, &dc, &[], &mut MetricsLog::new()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let no_replay = build_replay_mixture(dr.len(), dc.len(), ReplayRate::new(1, 0).unwrap(), &mut rng).unwrap();
    assert_eq!(no_replay.len(), dr.len());
    assert_eq!(no_replay.target_fraction(), 1.0);
    let mut log = MetricsLog::new();
    let cont = continual_pretrain(&seed_ck, &no_replay, &dc, &dr, &cfg, &mut log).unwrap();
    assert!(log.steps().all(|s| s.target_fraction == 1.0 && s.lr == cfg.fixed_lr));
    assert_eq!(cont.step, seed_ck.step + cfg.steps as u64);
    assert_eq!(cont.meta.stages.last().unwrap(), "continual");

    let zero = PipelineConfig { steps: 0, ..cfg.clone() };
    let same = continual_pretrain(&seed_ck, &no_replay, &dc, &dr, &zero, &mut MetricsLog::new()).unwrap();
    assert_eq!(same.model.params.values(), seed_ck.model.params.values());

    let mut other = cfg.clone();
    other.model.encoder.ctx_dim = 12;
    let err = continual_pretrain(&seed_ck, &no_replay, &dc, &dr, &other, &mut MetricsLog::new()).unwrap_err();
    assert!(matches!(err, Error::Version(_)), "{err}");

    assert!(matches!(
        build_replay_mixture(dr.len(), 2, ReplayRate::new(1, 1).unwrap(), &mut rng),
        Err(Error::Argument(_))
    ));
}

#[test]
fn untrained_head_is_chance_level() {
    let dc = corpus(4, 3, false);
    let cfg = tiny();
    let seed_ck = Checkpoint::new(Model::init(cfg.model.clone(), cfg.seed).unwrap(), cfg.seed);
    let zero = PipelineConfig {
        finetune: FinetuneConfig {
            steps: 0,
            ..cfg.finetune.clone()
        },
        ..cfg.clone()
    };
    let ck = finetune_ctc(&seed_ck, &dc, &zero, &mut MetricsLog::new()).unwrap();
    assert!(ck.model.has_ctc_head());
    let vocab = Vocabulary::default();
    let mut total_loss = 0.0;
    let mut total_tokens = 0;
    for u in &dc {
        let logits = ctc_logits(&ck.model, u.recording.channel(0).samples()).unwrap();
        let target = vocab.encode(u.transcript.as_deref().unwrap()).unwrap();
        total_loss += ctc_loss(&logits, &target).unwrap();
        total_tokens += logits.rows;
    }
    // per-frame cross-entropy of an uninformed head sits near ln |V|
    let per_frame = total_loss / total_tokens as f64;
    assert!(per_frame > 0.5 * (vocab.len() as f64).ln(), "{per_frame}");
    let ter = evaluate(&ck.model, &dc, &zero).unwrap().token_error_rate.unwrap();
    assert!(ter >= 0.5, "{ter}");
}

#[test]
fn finetune_is_deterministic_and_validates_transcripts() {
    let dc = corpus(4, 3, false);
    let cfg = tiny();
    let seed_ck = pretrain(&cfg, &dc, &[], &mut MetricsLog::new()).unwrap();
    let a = finetune_ctc(&seed_ck, &dc, &cfg, &mut MetricsLog::new()).unwrap();
    let b = finetune_ctc(&seed_ck, &dc, &cfg, &mut MetricsLog::new()).unwrap();
    for u in &dc {
        assert_eq!(transcribe(&a.model, u, 0).unwrap(), transcribe(&b.model, u, 0).unwrap());
    }
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());

    let mut bad = dc.clone();
    bad[1].transcript = Some("QZ!".into());
    let err = finetune_ctc(&seed_ck, &bad, &cfg, &mut MetricsLog::new()).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    bad[1].transcript = None;
    let err = finetune_ctc(&seed_ck, &bad, &cfg, &mut MetricsLog::new()).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn transfer_stage_boundaries() {
    let dc = corpus(4, 3, false);
    let dr = corpus(3, 4, true);
    let cfg = tiny();
    let seed_ck = pretrain(&cfg, &dc, &[], &mut MetricsLog::new()).unwrap();

    let stage1 = finetune_ctc(&seed_ck, &dc, &cfg, &mut MetricsLog::new()).unwrap();
    let no_stage2 = PipelineConfig {
        finetune: FinetuneConfig {
            target_steps: 0,
            ..cfg.finetune.clone()
        },
        ..cfg.clone()
    };
    let mut log = MetricsLog::new();
    let full = supervised_transfer(&seed_ck, &dc, &dr, &no_stage2, &mut log).unwrap();
    assert_eq!(full.model.params.values(), stage1.model.params.values());
    assert_eq!(full.meta.stages.last().unwrap(), "transfer");

    let mut log = MetricsLog::new();
    let both = supervised_transfer(&seed_ck, &dc, &dr, &cfg, &mut log).unwrap();
    let stages: Vec<&str> = log.finetune_steps().map(|s| s.stage.as_str()).collect();
    let n1 = cfg.finetune.steps;
    assert_eq!(stages.len(), n1 + cfg.finetune.target_steps);
    assert!(stages[..n1].iter().all(|&s| s == "finetune"));
    assert!(stages[n1..].iter().all(|&s| s == "transfer"));
    let steps: Vec<usize> = log.finetune_steps().map(|s| s.step).collect();
    assert!(steps.windows(2).all(|w| w[1] == w[0] + 1));
    assert_eq!(both.step, seed_ck.step + (n1 + cfg.finetune.target_steps) as u64);
}

#[test]
fn transfer_to_same_corpus_continues_smoothly() {
    let dc = corpus(4, 3, false);
    let mut cfg = tiny();
    cfg.finetune.steps = 40;
    cfg.finetune.target_steps = 20;
    let seed_ck = Checkpoint::new(Model::init(cfg.model.clone(), 0).unwrap(), 0);
    let mut log = MetricsLog::new();
    supervised_transfer(&seed_ck, &dc, &dc, &cfg, &mut log).unwrap();
    let losses: Vec<f64> = log.finetune_steps().map(|s| s.ctc_loss).collect();
    let before = losses[30..40].iter().sum::<f64>() / 10.0;
    let after = losses[40..50].iter().sum::<f64>() / 10.0;
    let start = losses[..5].iter().sum::<f64>() / 5.0;
    assert!(after < start, "{start} -> {after}");
    assert!((after - before).abs() < 0.25 * before, "{before} vs {after}");
}

#[test]
fn transfer_improves_target_error() {
    let dc = corpus(6, 3, false);
    let dr = corpus(6, 4, true);
    let mut cfg = tiny();
    cfg.model.encoder.conv_channels = 16;
    cfg.model.encoder.ctx_dim = 16;
    cfg.model.encoder.ffn_dim = 32;
    cfg.finetune.steps = 150;
    cfg.finetune.target_steps = 150;
    cfg.finetune.lr = 2e-3;
    cfg.finetune.warmup_steps = 10;
    let seed_ck = Checkpoint::new(Model::init(cfg.model.clone(), 0).unwrap(), 0);
    let stage1 = finetune_ctc(&seed_ck, &dc, &cfg, &mut MetricsLog::new()).unwrap();
    let full = supervised_transfer(&seed_ck, &dc, &dr, &cfg, &mut MetricsLog::new()).unwrap();
    let ter1 = evaluate(&stage1.model, &dr, &cfg).unwrap().token_error_rate.unwrap();
    let ter2 = evaluate(&full.model, &dr, &cfg).unwrap().token_error_rate.unwrap();
    assert!(ter2 <= ter1, "{ter1} -> {ter2}");
}

#[test]
fn evaluation_is_deterministic() {
    let dc = corpus(3, 1, false);
    let cfg = tiny();
    let model = Model::init(cfg.model.clone(), 2).unwrap();
    assert_eq!(evaluate(&model, &dc, &cfg).unwrap(), evaluate(&model, &dc, &cfg).unwrap());
}

#[test]
fn identical_pairs_are_fully_consistent() {
    let dc = corpus(3, 1, false);
    let model = Model::init(small_model_config(), 2).unwrap();
    let pairs = augmented_pairs(&dc, &AugmentPolicy::identity(), 0).unwrap();
    let c = representation_consistency(&model, &pairs).unwrap();
    assert!((c - 1.0).abs() < 1e-12, "{c}");

    let triple = VariantSet::new(
        "x",
        vec![dc[0].recording.channel(0).clone(); 3],
        pairs[0].provenance.iter().cloned().cycle().take(3).collect(),
    )
    .unwrap();
    assert!(matches!(
        representation_consistency(&model, &[triple]),
        Err(Error::Contract(_))
    ));
}
