//! Page scoring, selection and the pairwise loss against hand-written
//! oracles.

use proptest::prelude::*;
use uragate_core::model::{ModelConfig, SequenceLayout};
use uragate_core::numerics::{Matrix, Rng, Tape};
use uragate_core::retrieval::{
    late_interaction_score, project, rank_pages, retrieval_loss, retrieval_loss_on_tape, score_pages,
    select_topk, RetrievalModule,
};

/// Triple loop with no shared code: for each query row, scan every page row
/// and keep the best dot product.
fn brute_force_late_interaction(eq: &[Vec<f64>], ev: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for q in eq {
        let mut best = f64::NEG_INFINITY;
        for v in ev {
            let mut d = 0.0;
            for c in 0..q.len() {
                d += q[c] * v[c];
            }
            if d > best {
                best = d;
            }
        }
        total += best;
    }
    total
}

fn random_rows(rows: usize, cols: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.normal()).collect()).collect()
}

proptest! {
    #[test]
    fn late_interaction_matches_brute_force(m in 1usize..=32, t in 1usize..=32, wide in any::<bool>(), seed in any::<u64>()) {
        let d = if wide { 16 } else { 4 };
        let mut rng = Rng::new(seed);
        let eq = random_rows(m, d, &mut rng);
        let ev = random_rows(t, d, &mut rng);
        let got = late_interaction_score(&Matrix::from_rows(&eq).unwrap(), &Matrix::from_rows(&ev).unwrap()).unwrap();
        prop_assert_eq!(got, brute_force_late_interaction(&eq, &ev));
    }

    #[test]
    fn unit_rows_bound_the_score(m in 1usize..=16, t in 1usize..=16, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let norm = |rows: Vec<Vec<f64>>| {
            rows.into_iter()
                .map(|r| {
                    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    r.into_iter().map(|x| x / n).collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        };
        let eq = norm(random_rows(m, 8, &mut rng));
        let ev = norm(random_rows(t, 8, &mut rng));
        let s = late_interaction_score(&Matrix::from_rows(&eq).unwrap(), &Matrix::from_rows(&ev).unwrap()).unwrap();
        prop_assert!(s.abs() <= m as f64 + 1e-12);
    }

    #[test]
    fn selection_keeps_min_k_n_pages_in_order(n in 1usize..=24, k in 1usize..=30, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let r = select_topk(&scores, k, None).unwrap();
        prop_assert_eq!(r.selected.len(), k.min(n));
        prop_assert!(r.selected.windows(2).all(|w| w[0] < w[1]));
        let floor = r.selected.iter().map(|&p| scores[p]).fold(f64::INFINITY, f64::min);
        for p in 0..n {
            if !r.selected.contains(&p) {
                prop_assert!(scores[p] <= floor);
            }
        }
    }

    #[test]
    fn forced_pages_always_survive(n in 2usize..=16, k in 1usize..=16, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let forced = vec![(seed as usize) % n];
        let r = select_topk(&scores, k, Some(&forced)).unwrap();
        prop_assert!(r.selected.contains(&forced[0]));
        prop_assert_eq!(r.selected.len(), k.min(n));
    }

    #[test]
    fn loss_is_positive_and_tape_agrees(n in 2usize..=12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let scores: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
        let pos = vec![(seed as usize) % n];
        let l = retrieval_loss(&scores, &pos).unwrap();
        prop_assert!(l > 0.0);
        let mut tape = Tape::new();
        let s = tape.leaf(Matrix::row_vector(scores.clone()), true);
        let lt = retrieval_loss_on_tape(&mut tape, s, &pos).unwrap();
        prop_assert_eq!(tape.value(lt).item(), l);
    }
}

#[test]
fn zero_margin_loss_is_ln2() {
    let l = retrieval_loss(&[0.7, 0.7, 0.1], &[0]).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn two_positive_example_matches_closed_form() {
    // Positives score 1.0 and 2.0; the two hardest of the negatives
    // 0.5, 1.5, 0.2 sum to 2.0, so the margin is -1.
    let scores = [1.0, 2.0, 0.5, 1.5, 0.2];
    let l = retrieval_loss(&scores, &[0, 1]).unwrap();
    assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!((l - 0.313262).abs() < 1e-6);
}

#[test]
fn loss_takes_as_many_hard_negatives_as_positives() {
    // Positives 0 and 3; the two strongest negatives are 1 and 2.
    let scores = [1.0, 0.9, 0.8, 0.5, -2.0];
    let l = retrieval_loss(&scores, &[0, 3]).unwrap();
    let expected = (1.0 + ((0.9 + 0.8) - (1.0 + 0.5f64)).exp()).ln();
    assert!((l - expected).abs() < 1e-15);
}

#[test]
fn loss_without_negatives_is_rejected() {
    assert!(retrieval_loss(&[1.0, 2.0], &[0, 1]).is_err());
    assert!(retrieval_loss(&[1.0, 2.0], &[]).is_err());
}

#[test]
fn ranking_breaks_ties_by_index() {
    assert_eq!(rank_pages(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
}

#[test]
fn zero_k_is_rejected() {
    assert!(select_topk(&[1.0], 0, None).is_err());
}

#[test]
fn projected_rows_are_unit_and_pages_score_in_order() {
    let cfg = ModelConfig::default();
    let mut rng = Rng::new(5);
    let module = RetrievalModule::random(&cfg, &mut rng);
    let layout = SequenceLayout::contiguous(3, 4, 2, 0);
    let h = Matrix::from_rows(&random_rows(layout.len(), cfg.hidden_dim, &mut rng)).unwrap();
    let p = project(&h, &module).unwrap();
    for i in 0..p.rows() {
        let n: f64 = p.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    let scores = score_pages(&p, &layout).unwrap();
    let eq = p.slice_rows(12, 14);
    for (i, s) in scores.iter().enumerate() {
        assert_eq!(*s, late_interaction_score(&eq, &p.slice_rows(4 * i, 4 * i + 4)).unwrap());
    }
}
