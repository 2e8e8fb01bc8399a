//! Probes against hand-built traces and direct recomputation.

use proptest::prelude::*;
use uragate_core::analysis::{
    attention_entropy, embedding_retrieval_accuracy, export_similarity_map, page_attention_weights, probe_document,
    probe_layers,
};
use uragate_core::corpus::{generate_corpus, CorpusConfig, SyntheticDocument};
use uragate_core::engine::{infer, EngineConfig, InferOptions};
use uragate_core::model::{
    embed, forward_layers, planted_backbone, BoundModel, ForwardOptions, ForwardTrace, SequenceLayout, TransformerWeights,
};
use uragate_core::numerics::{row_l2_normalize, Matrix, Rng, Tape};
use uragate_core::retrieval::{project, rank_pages, RetrievalModule};

proptest! {
    #[test]
    fn entropy_lies_between_zero_and_log_n(w in prop::collection::vec(0.0f64..5.0, 1..20)) {
        prop_assume!(w.iter().sum::<f64>() > 0.0);
        let h = attention_entropy(&w).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (w.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn entropy_ignores_scale(w in prop::collection::vec(0.01f64..5.0, 1..20), s in 0.01f64..100.0) {
        let scaled: Vec<f64> = w.iter().map(|x| x * s).collect();
        prop_assert!((attention_entropy(&w).unwrap() - attention_entropy(&scaled).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn entropy_reference_values() {
    assert!((attention_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!((attention_entropy(&[1.0, 3.0]).unwrap() - 0.562335).abs() < 1e-6);
    assert_eq!(attention_entropy(&[0.0, 2.0, 0.0]).unwrap(), 0.0);
    assert!(attention_entropy(&[0.0, 0.0]).is_err());
    assert!(attention_entropy(&[1.0, -0.5]).is_err());
}

#[test]
fn page_weights_sum_heads_and_page_rows_and_average_generating_rows() {
    // Two pages of two rows, then a two-row query.
    let layout = SequenceLayout::contiguous(2, 2, 2, 0);
    let mut trace = ForwardTrace::new(1, layout);
    let head_a = Matrix::from_rows(&[
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
        vec![0.2, 0.2, 0.6, 0.0, 0.0, 0.0],
        vec![0.1, 0.1, 0.1, 0.7, 0.0, 0.0],
        vec![0.1, 0.2, 0.3, 0.1, 0.3, 0.0],
        vec![0.0, 0.1, 0.4, 0.2, 0.1, 0.2],
    ])
    .unwrap();
    let mut head_b = Matrix::zeros(6, 6);
    for i in 0..6 {
        head_b.set(i, 0, 1.0);
    }
    trace.attention[0] = Some(vec![head_a, head_b]);
    let w = page_attention_weights(&trace, 0, &[4, 5]).unwrap();
    // Row 4: pages (0.3, 0.4) + (1, 0); row 5: (0.1, 0.6) + (1, 0).
    let expected = [(1.3 + 1.1) / 2.0, (0.4 + 0.6) / 2.0];
    for (got, want) in w.weights.iter().zip(expected) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(w.page_ids, vec![0, 1]);
    assert!(!w.pruned);
    assert!(page_attention_weights(&trace, 0, &[]).is_err());
    assert!(page_attention_weights(&trace, 0, &[9]).is_err());
}

fn setup() -> (CorpusConfig, Vec<SyntheticDocument>, EngineConfig, TransformerWeights) {
    let cc = CorpusConfig { n_docs: 12, n_test: 4, ..Default::default() };
    let docs = generate_corpus(&cc).unwrap();
    let cfg = EngineConfig::default();
    let w = planted_backbone(&cfg.model, &cc.vocab(), 7).unwrap();
    (cc, docs, cfg, w)
}

#[test]
fn pruned_layers_report_surviving_pages_only() {
    let (_, docs, cfg, w) = setup();
    let m = RetrievalModule::random(&cfg.model, &mut Rng::new(1));
    let opts = InferOptions { retain_attention: true, prefill_only: true, ..Default::default() };
    let inf = infer(&docs[0], &w, &m, &cfg, opts).unwrap();
    let q_last = inf.trace.layout.query.end - 1;
    let early = page_attention_weights(&inf.trace, 0, &[q_last]).unwrap();
    assert_eq!(early.weights.len(), 16);
    assert!(!early.pruned);
    let deep_last = inf.trace.pruned_layout.as_ref().unwrap().query.end - 1;
    let deep = page_attention_weights(&inf.trace, cfg.model.retrieval_layer, &[deep_last]).unwrap();
    assert!(deep.pruned);
    assert_eq!(deep.page_ids, inf.trace.retrieval.as_ref().unwrap().selected);
}

#[test]
fn probes_are_pure_and_reader_layer_concentrates() {
    let (_, docs, cfg, w) = setup();
    let before = w.clone();
    let a = probe_document(&docs[2], &w, &cfg).unwrap();
    let b = probe_document(&docs[2], &w, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(w, before);
    let reader = cfg.model.n_layers - 2;
    assert!(a.entropy[reader] + 0.2 <= a.entropy[0]);
    assert!(docs[2].evidence_pages.contains(&a.attention_ranking[reader][0]));
}

#[test]
fn embedding_probe_matches_direct_recomputation() {
    let (_, docs, cfg, w) = setup();
    let doc = &docs[3];
    let probe = probe_document(doc, &w, &cfg).unwrap();
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, &cfg.model, &w, None, false);
    let (h0, layout) = embed(&mut tape, &bound, doc, &cfg.model, false).unwrap();
    let mut trace = ForwardTrace::new(cfg.model.n_layers, layout.clone());
    let mut opts = ForwardOptions { retain_hidden: true, ..Default::default() };
    forward_layers(&mut tape, h0, &layout.positions, &bound, 0..cfg.model.n_layers, &mut opts, Some(&mut trace), None)
        .unwrap();
    for l in 0..cfg.model.n_layers {
        let e = row_l2_normalize(trace.hidden[l].as_ref().unwrap());
        let scores: Vec<f64> = layout
            .pages
            .iter()
            .map(|p| {
                layout
                    .query
                    .clone()
                    .map(|i| {
                        p.span
                            .clone()
                            .map(|j| e.row(i).iter().zip(e.row(j)).map(|(x, y)| x * y).sum::<f64>())
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .sum()
            })
            .collect();
        assert_eq!(rank_pages(&scores), probe.embedding_ranking[l], "layer {l}");
    }
}

#[test]
fn layer_report_aggregates_per_question_probes() {
    let (_, docs, cfg, w) = setup();
    let report = probe_layers(&docs[..4], &w, &cfg).unwrap();
    assert_eq!(report.rows.len(), cfg.model.n_layers);
    assert_eq!(report.n_questions, 4);
    let probes: Vec<_> = docs[..4].iter().map(|d| probe_document(d, &w, &cfg).unwrap()).collect();
    for (l, row) in report.rows.iter().enumerate() {
        assert_eq!(row.layer, l);
        assert_eq!(row.emb_top5, embedding_retrieval_accuracy(&probes, l, 5).unwrap());
        let mean = probes.iter().map(|p| p.entropy[l]).sum::<f64>() / 4.0;
        assert!((row.entropy_mean - mean).abs() < 1e-12);
        assert!(report.entropies.iter().all(|e| e[l] >= 0.0 && e[l] <= 16f64.ln() + 1e-12));
    }
    assert!(probe_layers(&[], &w, &cfg).is_err());
}

#[test]
fn similarity_map_takes_the_best_query_token() {
    let (_, docs, cfg, w) = setup();
    let m = RetrievalModule::random(&cfg.model, &mut Rng::new(2));
    let doc = &docs[0];
    let map = export_similarity_map(doc, &w, &m, &cfg).unwrap();
    assert_eq!(map.len(), 16 * 16);
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, &cfg.model, &w, None, false);
    let (h0, layout) = embed(&mut tape, &bound, doc, &cfg.model, false).unwrap();
    let mut opts = ForwardOptions::default();
    let hr = forward_layers(&mut tape, h0, &layout.positions, &bound, 0..cfg.model.retrieval_layer, &mut opts, None, None)
        .unwrap();
    let e = project(tape.value(hr), &m).unwrap();
    for row in &map {
        let j = layout.pages[row.page_id].span.start + row.token_index;
        let best = layout
            .query
            .clone()
            .map(|i| e.row(i).iter().zip(e.row(j)).map(|(x, y)| x * y).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((row.similarity - best).abs() < 1e-12);
        assert!(row.similarity <= 1.0 + 1e-12);
    }
}
