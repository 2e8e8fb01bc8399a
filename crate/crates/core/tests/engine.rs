//! Inference with pruning, the joint loss, training loops and bundles.

use uragate_core::corpus::{generate_corpus, CorpusConfig, SyntheticDocument};
use uragate_core::engine::{
    infer, joint_loss_on_tape, prune_hidden, train_stage1, train_stage2, DecodeKvPolicy, EngineConfig,
    InferOptions, ModelBundle, PruningMode, Stage2Params,
};
use uragate_core::model::{embed_matrix, planted_backbone, BoundModel, LoraSet, TransformerWeights};
use uragate_core::numerics::{Matrix, Rng, Tape};
use uragate_core::retrieval::{select_topk, BoundModule, ModuleLora, RetrievalModule};
use uragate_core::Error;

fn corpus(n: usize) -> (CorpusConfig, Vec<SyntheticDocument>) {
    let cc = CorpusConfig { n_docs: n, n_test: n / 4, ..Default::default() };
    let docs = generate_corpus(&cc).unwrap();
    (cc, docs)
}

fn random_setup(seed: u64) -> (TransformerWeights, RetrievalModule) {
    let cfg = EngineConfig::default();
    let mut rng = Rng::new(seed);
    (TransformerWeights::random(&cfg.model, &mut rng), RetrievalModule::random(&cfg.model, &mut rng))
}

#[test]
fn keeping_every_page_reproduces_the_baseline() {
    let (_, docs) = corpus(8);
    for (seed, doc) in docs.iter().enumerate() {
        let (w, m) = random_setup(seed as u64);
        let base = EngineConfig { pruning_mode: PruningMode::Baseline, ..EngineConfig::default() };
        let mut keep_all = EngineConfig::default();
        keep_all.model.top_k = 16 + seed;
        keep_all.model.reindex_positions = seed % 2 == 0;
        let opts = InferOptions { prefill_only: true, ..Default::default() };
        let a = infer(doc, &w, &m, &base, opts).unwrap();
        let b = infer(doc, &w, &m, &keep_all, opts).unwrap();
        let diff = a.first_logits.iter().zip(&b.first_logits).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-9, "seed {seed}: {diff}");
        assert_eq!(a.scores, b.scores);
    }
}

#[test]
fn one_instance_one_prefill_one_retrieval_call() {
    let (cc, docs) = corpus(8);
    let cfg = EngineConfig::default();
    let w = planted_backbone(&cfg.model, &cc.vocab(), 7).unwrap();
    let m = RetrievalModule::random(&cfg.model, &mut Rng::new(1));
    let urag = infer(&docs[0], &w, &m, &cfg, InferOptions::default()).unwrap();
    let s = &urag.trace.stats;
    assert_eq!((s.model_instances, s.prefill_passes, s.retrieval_calls), (1, 1, 1));
    assert!(s.decode_steps <= cfg.model.max_decode_steps);
    let retained = urag.trace.retrieval.as_ref().unwrap();
    assert_eq!(retained.selected.len(), cfg.model.top_k);
    assert_eq!(urag.trace.pruned_from, cfg.model.retrieval_layer);

    let base_cfg = EngineConfig { pruning_mode: PruningMode::Baseline, ..cfg.clone() };
    let base = infer(&docs[0], &w, &m, &base_cfg, InferOptions::default()).unwrap();
    assert_eq!(base.trace.stats.retrieval_calls, 0);
    assert!(urag.trace.stats.prefill_macs < base.trace.stats.prefill_macs);
}

#[test]
fn inference_never_reads_evidence_labels() {
    let (cc, docs) = corpus(8);
    let cfg = EngineConfig::default();
    let w = planted_backbone(&cfg.model, &cc.vocab(), 7).unwrap();
    let m = RetrievalModule::random(&cfg.model, &mut Rng::new(2));
    for doc in &docs[..3] {
        let a = infer(doc, &w, &m, &cfg, InferOptions::default()).unwrap();
        let b = infer(&doc.without_labels(), &w, &m, &cfg, InferOptions::default()).unwrap();
        assert_eq!(a.answer, b.answer);
        assert_eq!(a.scores, b.scores);
    }
}

#[test]
fn kv_policies_share_the_prefill() {
    let (cc, docs) = corpus(8);
    let cfg = EngineConfig::default();
    let other = EngineConfig { decode_kv_policy: DecodeKvPolicy::FullEarlyLayers, ..cfg.clone() };
    let w = planted_backbone(&cfg.model, &cc.vocab(), 7).unwrap();
    let m = RetrievalModule::random(&cfg.model, &mut Rng::new(3));
    let a = infer(&docs[1], &w, &m, &cfg, InferOptions::default()).unwrap();
    let b = infer(&docs[1], &w, &m, &other, InferOptions::default()).unwrap();
    assert_eq!(a.first_logits, b.first_logits);
}

#[test]
fn pruning_gathers_selected_pages_and_the_query() {
    let (_, docs) = corpus(4);
    let cfg = EngineConfig::default();
    let (w, _) = random_setup(4);
    let (h, layout) = embed_matrix(&docs[0], &w, &cfg.model, false).unwrap();
    let scores: Vec<f64> = (0..16).map(|p| ((p * 7) % 16) as f64).collect();
    let result = select_topk(&scores, 5, None).unwrap();
    for reindex in [false, true] {
        let (hp, record) = prune_hidden(&h, &layout, &result, reindex).unwrap();
        record.surviving.validate().unwrap();
        assert_eq!(record.surviving.page_ids(), result.selected);
        assert_eq!(hp.rows(), 5 * 16 + 8);
        assert_eq!(hp, h.gather_rows(&record.surviving_indices));
        assert_eq!(record.surviving.query.len(), layout.query.len());
        let expected: Vec<usize> = if reindex {
            (0..hp.rows()).collect()
        } else {
            record.surviving_indices.clone()
        };
        assert_eq!(record.surviving.positions, expected);
    }
    let bad = select_topk(&scores, 5, None).map(|mut r| {
        r.selected = vec![3, 1];
        r
    });
    assert!(prune_hidden(&h, &layout, &bad.unwrap(), false).is_err());
}

#[test]
fn training_loss_forces_evidence_into_the_pruned_sequence() {
    let (_, docs) = corpus(12);
    let cfg = EngineConfig::default();
    let (w, m) = random_setup(5);
    for doc in &docs {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &cfg.model, &w, None, false);
        let bm = BoundModule::bind(&mut tape, &m, None, false, false);
        let loss = joint_loss_on_tape(&mut tape, doc, &bound, &bm, &cfg, None).unwrap();
        let kept = loss.record.surviving.page_ids();
        assert!(doc.evidence_pages.iter().all(|e| kept.contains(e)));
        assert_eq!(kept.len(), cfg.model.top_k);
        let total = tape.value(loss.total).item();
        let parts = tape.value(loss.retrieval).item() + tape.value(loss.generation).item();
        assert!((total - parts).abs() < 1e-12);
    }
}

#[test]
fn uniform_logits_cost_log_vocabulary() {
    let (_, docs) = corpus(4);
    let cfg = EngineConfig::default();
    let (mut w, m) = random_setup(12);
    w.head = Matrix::zeros(w.head.rows(), w.head.cols());
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, &cfg.model, &w, None, false);
    let bm = BoundModule::bind(&mut tape, &m, None, false, false);
    let loss = joint_loss_on_tape(&mut tape, &docs[0], &bound, &bm, &cfg, None).unwrap();
    let ce = tape.value(loss.generation).item();
    assert!((ce - (cfg.model.v_txt as f64).ln()).abs() < 1e-12);
    assert!((ce - 5.5452).abs() < 1e-4);
}

fn tiny_engine() -> EngineConfig {
    let mut cfg = EngineConfig::default();
    for stage in [&mut cfg.stage1, &mut cfg.stage2] {
        stage.batch_size = 2;
        stage.grad_accum = 1;
        stage.max_steps = Some(2);
    }
    cfg
}

#[test]
fn stage_one_is_deterministic_per_seed() {
    let (cc, docs) = corpus(8);
    let cfg = tiny_engine();
    let w = planted_backbone(&cfg.model, &cc.vocab(), 7).unwrap();
    let init = RetrievalModule::random(&cfg.model, &mut Rng::new(6));
    let run = |seed| {
        let mut m = init.clone();
        let log = train_stage1(&docs, &w, &mut m, &cfg, seed, &mut |_| {}).unwrap();
        (log, m)
    };
    let (log_a, m_a) = run(1);
    let (log_b, m_b) = run(1);
    let (_, m_c) = run(2);
    assert_eq!(log_a, log_b);
    assert_eq!(m_a, m_b);
    assert_ne!(m_a, m_c);
    assert_ne!(m_a, init);
    assert_eq!(log_a.len(), 2);
    assert!(log_a.iter().all(|r| r.loss_generation == 0.0 && r.loss_total == r.loss_retrieval));
}

#[test]
fn stage_two_updates_only_adapters() {
    let (cc, docs) = corpus(8);
    let cfg = tiny_engine();
    let w = planted_backbone(&cfg.model, &cc.vocab(), 7).unwrap();
    let m = RetrievalModule::random(&cfg.model, &mut Rng::new(7));
    let mut rng = Rng::new(8);
    let mut params = Stage2Params {
        lora: LoraSet::new(&cfg.model, &mut rng),
        module_lora: ModuleLora::new(&cfg.model, &mut rng),
    };
    let before = params.lora.clone();
    let log = train_stage2(&docs, &w, &m, &mut params, &cfg, 3, &mut |_| {}).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|r| r.loss_generation > 0.0 && r.loss_retrieval > 0.0));
    assert_ne!(params.lora, before);
}

#[test]
fn non_finite_losses_stop_training_with_divergence() {
    let (_, docs) = corpus(8);
    let cfg = tiny_engine();
    let (mut w, mut m) = random_setup(9);
    w.vis_embed.data_mut()[..1000].iter_mut().for_each(|v| *v = f64::NAN);
    match train_stage1(&docs, &w, &mut m, &cfg, 1, &mut |_| {}) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn bundles_round_trip_with_and_without_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = EngineConfig::default();
    let (w, m) = random_setup(10);
    let mut rng = Rng::new(11);
    let mut lora = LoraSet::new(&cfg.model, &mut rng);
    for (_, p) in lora.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += 0.01);
    }
    let bundle = ModelBundle {
        model: cfg.model.clone(),
        weights: w.clone(),
        module: m.clone(),
        lora: Some(lora),
        module_lora: Some(ModuleLora::new(&cfg.model, &mut rng)),
        stage: "stage2".into(),
    };
    let path = dir.path().join("b").join("model.json");
    bundle.save(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    assert_eq!(back.weights, bundle.weights);
    assert_eq!(back.module, bundle.module);
    assert_eq!(back.lora, bundle.lora);
    assert_eq!(back.module_lora, bundle.module_lora);
    assert_eq!(back.stage, "stage2");
    let manifest = std::fs::read_to_string(&path).unwrap();
    assert!(manifest.contains("\"retrieval_module."));

    let plain = ModelBundle { lora: None, module_lora: None, stage: "stage1".into(), ..bundle };
    plain.save(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    assert_eq!(back.merged().unwrap(), (w, m));
    assert!(matches!(ModelBundle::load(&dir.path().join("none.json")), Err(Error::MissingCheckpoint(_))));
}

#[test]
fn engine_config_rejects_bad_fields_with_paths() {
    let mut cfg = EngineConfig::default();
    cfg.model.top_k = 0;
    assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "engine.model.top_k"));
    let mut cfg = EngineConfig::default();
    cfg.stage2.base_lr = -1.0;
    assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "engine.stage2.base_lr"));
    let parsed: Result<EngineConfig, _> = serde_json::from_str(r#"{"pruning_mode":"urag","extra":1}"#);
    assert!(parsed.is_err());
}
