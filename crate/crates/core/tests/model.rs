//! Forward pass, adapters, decoding and checkpoints.

use std::collections::BTreeMap;

use uragate_core::corpus::{generate_corpus, CorpusConfig, SyntheticDocument, Vocab};
use uragate_core::engine::{infer, EngineConfig, InferOptions, PruningMode};
use uragate_core::model::{
    embed, forward_layers, layout_for, lm_logits, load_checkpoint, planted_backbone, save_checkpoint, BoundModel,
    ForwardOptions, ForwardTrace, LoraSet, ModelConfig, SequenceLayout, TransformerWeights,
};
use uragate_core::numerics::{argmax, Matrix, Rng, Tape};
use uragate_core::retrieval::RetrievalModule;
use uragate_core::Error;

fn small_corpus() -> (CorpusConfig, Vec<SyntheticDocument>) {
    let cc = CorpusConfig { n_docs: 12, n_test: 4, ..Default::default() };
    let docs = generate_corpus(&cc).unwrap();
    (cc, docs)
}

struct Pass {
    hidden: Matrix,
    logits: Matrix,
    trace: ForwardTrace,
    layout: SequenceLayout,
}

fn full_pass(doc: &SyntheticDocument, w: &TransformerWeights, cfg: &ModelConfig, lora: Option<&LoraSet>, with_answer: bool) -> Pass {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, cfg, w, lora, false);
    let (h0, layout) = embed(&mut tape, &bound, doc, cfg, with_answer).unwrap();
    let mut trace = ForwardTrace::new(cfg.n_layers, layout.clone());
    let mut opts = ForwardOptions { retain_hidden: true, retain_attention: true, dropout_rng: None };
    let h = forward_layers(&mut tape, h0, &layout.positions, &bound, 0..cfg.n_layers, &mut opts, Some(&mut trace), None)
        .unwrap();
    let logits = lm_logits(&mut tape, h, &bound, None).unwrap();
    Pass { hidden: tape.value(h).clone(), logits: tape.value(logits).clone(), trace, layout }
}

#[test]
fn full_documents_fill_264_positions_and_attention_rows_are_distributions() {
    let (_, docs) = small_corpus();
    let cfg = ModelConfig::default();
    let w = TransformerWeights::random(&cfg, &mut Rng::new(1));
    let p = full_pass(&docs[0], &w, &cfg, None, false);
    assert_eq!(p.layout.len(), 16 * 16 + 8);
    assert_eq!(p.hidden.shape(), (264, cfg.hidden_dim));
    for layer in p.trace.attention.iter().map(|a| a.as_ref().unwrap()) {
        assert_eq!(layer.len(), cfg.n_heads);
        for head in layer {
            for i in 0..head.rows() {
                assert!((head.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(head.row(i)[i + 1..].iter().all(|&a| a == 0.0));
            }
        }
    }
}

#[test]
fn rows_never_see_later_tokens() {
    let (_, docs) = small_corpus();
    let cfg = ModelConfig::default();
    let w = TransformerWeights::random(&cfg, &mut Rng::new(2));
    let base = full_pass(&docs[0], &w, &cfg, None, false);
    let mut edited = docs[0].clone();
    let last = edited.query.len() - 1;
    edited.query[last] = (edited.query[last] + 1) % cfg.v_txt;
    let changed = full_pass(&edited, &w, &cfg, None, false);
    let t = base.layout.len();
    assert_eq!(base.hidden.slice_rows(0, t - 1), changed.hidden.slice_rows(0, t - 1));
    assert_ne!(base.hidden.row(t - 1), changed.hidden.row(t - 1));
}

#[test]
fn fresh_adapters_leave_outputs_bitwise_unchanged() {
    let (_, docs) = small_corpus();
    let cfg = ModelConfig::default();
    let mut rng = Rng::new(3);
    let w = TransformerWeights::random(&cfg, &mut rng);
    let lora = LoraSet::new(&cfg, &mut rng);
    let plain = full_pass(&docs[1], &w, &cfg, None, false);
    let adapted = full_pass(&docs[1], &w, &cfg, Some(&lora), false);
    assert_eq!(plain.logits, adapted.logits);
}

#[test]
fn merged_adapters_match_adapted_forward() {
    let (_, docs) = small_corpus();
    let cfg = ModelConfig::default();
    let mut rng = Rng::new(4);
    let w = TransformerWeights::random(&cfg, &mut rng);
    let mut lora = LoraSet::new(&cfg, &mut rng);
    for (_, m) in lora.params_mut() {
        for v in m.data_mut() {
            *v = 0.02 * rng.normal();
        }
    }
    let merged = lora.merge_into(&w).unwrap();
    let adapted = full_pass(&docs[1], &w, &cfg, Some(&lora), false);
    let folded = full_pass(&docs[1], &merged, &cfg, None, false);
    assert!(adapted.logits.max_abs_diff(&folded.logits) < 1e-9);
    assert!(adapted.logits.max_abs_diff(&full_pass(&docs[1], &w, &cfg, None, false).logits) > 1e-6);
}

#[test]
fn cached_decoding_matches_teacher_forced_recomputation() {
    let (cc, docs) = small_corpus();
    let cfg = EngineConfig { pruning_mode: PruningMode::Baseline, ..EngineConfig::default() };
    let w = planted_backbone(&cfg.model, &cc.vocab(), 7).unwrap();
    let module = RetrievalModule::random(&cfg.model, &mut Rng::new(0));
    for doc in &docs[..4] {
        let inf = infer(doc, &w, &module, &cfg, InferOptions::default()).unwrap();
        let mut forced = doc.clone();
        forced.answer = inf.answer.clone();
        let p = full_pass(&forced, &w, &cfg.model, None, true);
        let q_last = p.layout.query.end - 1;
        let first = p.logits.row(q_last);
        let diff = first.iter().zip(&inf.first_logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "first-step logits differ by {diff}");
        let mut expected: Vec<usize> = (q_last..p.layout.answer.end).map(|r| argmax(p.logits.row(r))).collect();
        if inf.answer.len() < cfg.model.max_decode_steps {
            assert_eq!(expected.pop(), Some(Vocab::EOS));
        } else {
            expected.pop();
        }
        assert_eq!(expected, inf.answer);
    }
}

#[test]
fn planted_backbone_answers_planted_questions() {
    let (cc, docs) = small_corpus();
    let cfg = EngineConfig { pruning_mode: PruningMode::Baseline, ..EngineConfig::default() };
    let w = planted_backbone(&cfg.model, &cc.vocab(), 7).unwrap();
    let module = RetrievalModule::random(&cfg.model, &mut Rng::new(0));
    let correct = docs
        .iter()
        .filter(|d| infer(d, &w, &module, &cfg, InferOptions::default()).unwrap().answer == d.answer)
        .count();
    assert!(correct >= 11, "{correct}/12 answered");
}

#[test]
fn planted_backbone_rejects_unsupported_shapes() {
    let vocab = CorpusConfig::default().vocab();
    for cfg in [
        ModelConfig { hidden_dim: 64, ..ModelConfig::default() },
        ModelConfig { n_layers: 2, retrieval_layer: 1, ..ModelConfig::default() },
        ModelConfig { n_heads: 1, hidden_dim: 32, ..ModelConfig::default() },
    ] {
        assert!(planted_backbone(&cfg, &vocab, 0).is_err());
    }
}

#[test]
fn layouts_reject_overlong_sequences_and_foreign_tokens() {
    let (_, docs) = small_corpus();
    let short = ModelConfig { max_seq_len: 100, ..ModelConfig::default() };
    assert!(layout_for(&docs[0], &short, false).is_err());
    let mut bad = docs[0].clone();
    bad.pages[0].tokens[0] = 10_000;
    assert!(layout_for(&bad, &ModelConfig::default(), false).is_err());
    assert!(layout_for(&docs[0], &ModelConfig::default(), true).unwrap().answer.len() == docs[0].answer.len());
}

#[test]
fn config_validation_reports_field_names() {
    let cfg = ModelConfig { retrieval_layer: 8, ..ModelConfig::default() };
    match cfg.validate() {
        Err(Error::Config { field, .. }) => assert_eq!(field, "model.retrieval_layer"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn checkpoints_round_trip_bitwise_and_detect_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let cfg = ModelConfig::default();
    let w = TransformerWeights::random(&cfg, &mut Rng::new(9));
    save_checkpoint(&path, serde_json::json!({"note": "test"}), &w.named_tensors()).unwrap();
    let (config, mut tensors) = load_checkpoint(&path).unwrap();
    assert_eq!(config["note"], "test");
    let back = TransformerWeights::from_named(&cfg, &mut tensors).unwrap();
    assert_eq!(back, w);

    let blob = path.with_extension("bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    std::fs::remove_file(&blob).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::MissingCheckpoint(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("absent.json")), Err(Error::MissingCheckpoint(_))));
}

#[test]
fn weights_reject_missing_and_misshapen_tensors() {
    let cfg = ModelConfig::default();
    let w = TransformerWeights::random(&cfg, &mut Rng::new(10));
    let mut named: BTreeMap<String, Matrix> = w.named_tensors().into_iter().map(|(n, m)| (n, m.clone())).collect();
    let first = named.keys().next().unwrap().clone();
    named.insert(first.clone(), Matrix::zeros(1, 1));
    assert!(TransformerWeights::from_named(&cfg, &mut named.clone()).is_err());
    named.remove(&first);
    assert!(TransformerWeights::from_named(&cfg, &mut named).is_err());
}
