//! Kernels against naive oracles, tape gradients against central
//! differences, and the optimiser and schedule against closed forms.

use proptest::prelude::*;
use uragate_core::numerics::{
    adamw_step, lr_at, matmul, matmul_at, matmul_bt, pairwise_dots, row_l2_normalize, row_softmax, Matrix,
    OptimizerState, RopeSpec, Rng, Tape, Var,
};

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_variants_match_naive(m in 1usize..20, k in 1usize..20, n in 1usize..20, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = random(m, k, &mut rng);
        let b = random(k, n, &mut rng);
        let expected = naive_matmul(&a, &b);
        prop_assert!(matmul(&a, &b).unwrap().max_abs_diff(&expected) < 1e-12);
        prop_assert!(matmul_bt(&a, &b.transpose()).unwrap().max_abs_diff(&expected) < 1e-12);
        prop_assert!(matmul_at(&a.transpose(), &b).unwrap().max_abs_diff(&expected) < 1e-12);
        prop_assert_eq!(pairwise_dots(&a, &b.transpose()).unwrap(), expected);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..8, cols in 1usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let s = row_softmax(&random(rows, cols, &mut rng).scaled(20.0));
        for i in 0..rows {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn normalised_rows_have_unit_norm(rows in 1usize..8, cols in 1usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let n = row_l2_normalize(&random(rows, cols, &mut rng));
        for i in 0..rows {
            prop_assert!((n.row(i).iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_preserves_norms_and_depends_on_offsets_only(shift in 0usize..50, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let q = random(1, 8, &mut rng);
        let k = random(1, 8, &mut rng);
        let rotate = |x: &Matrix, pos: usize| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let spec = RopeSpec { positions: vec![pos], n_heads: 2, head_dim: 4, base: 1e4 };
            let r = t.rope(v, spec).unwrap();
            t.value(r).clone()
        };
        let dot = |a: &Matrix, b: &Matrix| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let base = dot(&rotate(&q, 7), &rotate(&k, 3));
        let shifted = dot(&rotate(&q, 7 + shift), &rotate(&k, 3 + shift));
        prop_assert!((base - shifted).abs() < 1e-9);
        prop_assert!((rotate(&q, shift).frobenius_norm() - q.frobenius_norm()).abs() < 1e-12);
    }
}

/// Naive causal attention: queries are the trailing rows of the keys, heads
/// are contiguous column blocks, scores scale by 1/√head_dim.
fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> Matrix {
    let (tq, d) = q.shape();
    let tk = k.rows();
    let hd = d / n_heads;
    let mut out = Matrix::zeros(tq, d);
    for h in 0..n_heads {
        for i in 0..tq {
            let limit = tk - tq + i;
            let mut scores = Vec::new();
            for j in 0..=limit {
                let mut s = 0.0;
                for c in 0..hd {
                    s += q.get(i, h * hd + c) * k.get(j, h * hd + c);
                }
                scores.push(s / (hd as f64).sqrt());
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..hd {
                let mut acc = 0.0;
                for (j, e) in exps.iter().enumerate() {
                    acc += e / z * v.get(j, h * hd + c);
                }
                out.set(i, h * hd + c, acc);
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_oracle_with_and_without_prefix() {
    let mut rng = Rng::new(11);
    for (tq, tk) in [(6, 6), (2, 9), (1, 5)] {
        let q = random(tq, 8, &mut rng);
        let k = random(tk, 8, &mut rng);
        let v = random(tk, 8, &mut rng);
        let mut t = Tape::new();
        let (vq, vk, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let o = t.causal_attention(vq, vk, vv, 2).unwrap();
        assert!(t.value(o).max_abs_diff(&naive_attention(&q, &k, &v, 2)) < 1e-12);
        for probs in t.attention_probs(o).unwrap() {
            for i in 0..probs.rows() {
                assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(probs.row(i)[tk - tq + i + 1..].iter().all(|&p| p == 0.0));
            }
        }
    }
}

/// Central-difference check of every input of `f`, which builds a scalar.
fn check_gradients(inputs: &[Matrix], f: &dyn Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |ms: &[Matrix]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ms.iter().map(|m| t.param(m.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).item()
    };
    let h = 1e-5;
    for (idx, m) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]).expect("gradient for every input");
        for e in 0..m.len() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {idx} entry {e}: analytic {a}, numeric {numeric}");
        }
    }
}

/// Projects a node onto a fixed random direction so every entry matters.
fn weigh(t: &mut Tape, x: Var, seed: u64) -> Var {
    let (r, c) = t.value(x).shape();
    let w = t.constant(random(r, c, &mut Rng::new(seed)));
    let p = t.mul(x, w).unwrap();
    t.sum(p)
}

#[test]
fn elementwise_and_linear_ops_have_correct_gradients() {
    let mut rng = Rng::new(1);
    let (a, b, row) = (random(3, 4, &mut rng), random(4, 5, &mut rng), random(1, 5, &mut rng));
    check_gradients(&[a, b, row], &|t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        let m = t.add_row(m, v[2]).unwrap();
        let g = t.gelu(m);
        let s = t.silu(g);
        let p = t.softplus(s);
        let p = t.scale(p, 0.7);
        weigh(t, p, 9)
    });
}

#[test]
fn norms_and_products_have_correct_gradients() {
    let mut rng = Rng::new(2);
    let (x, gain, y) = (random(3, 6, &mut rng), random(1, 6, &mut rng), random(4, 6, &mut rng));
    check_gradients(&[x, gain, y], &|t, v| {
        let n = t.rms_norm(v[0], v[1], 1e-6).unwrap();
        let u = t.l2_normalize_rows(n);
        let p = t.matmul_bt(u, v[2]).unwrap();
        let d = t.sub(p, p).unwrap();
        let p = t.add(p, d).unwrap();
        weigh(t, p, 4)
    });
}

#[test]
fn attention_and_rope_have_correct_gradients() {
    let mut rng = Rng::new(3);
    let (q, k, v) = (random(5, 8, &mut rng), random(5, 8, &mut rng), random(5, 8, &mut rng));
    check_gradients(&[q, k, v], &|t, vs| {
        let spec = RopeSpec { positions: vec![0, 1, 2, 5, 6], n_heads: 2, head_dim: 4, base: 1e4 };
        let rq = t.rope(vs[0], spec.clone()).unwrap();
        let rk = t.rope(vs[1], spec).unwrap();
        let o = t.causal_attention(rq, rk, vs[2], 2).unwrap();
        weigh(t, o, 5)
    });
}

#[test]
fn gathers_late_interaction_and_cross_entropy_have_correct_gradients() {
    let mut rng = Rng::new(4);
    let (x, y) = (random(6, 4, &mut rng), random(3, 4, &mut rng));
    check_gradients(&[x, y], &|t, v| {
        let q = t.gather_rows(v[0], vec![0, 2, 2]).unwrap();
        let p = t.concat_rows(vec![v[1], q]).unwrap();
        let li = t.late_interaction(q, p).unwrap();
        let cols = t.gather_cols(v[0], vec![3, 1]).unwrap();
        let cc = t.concat_cols(vec![cols, v[0]]).unwrap();
        let ce = t.cross_entropy(cc, vec![0, 1, 2, 3, 4, 5]).unwrap();
        t.add(li, ce).unwrap()
    });
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    let mut w = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
    let g = Matrix::from_vec(1, 3, vec![0.3, -4.0, 1e-3]).unwrap();
    let mut state = OptimizerState::new(&[(1, 3)]);
    adamw_step(&mut [("w".into(), &mut w)], &[g.clone()], &mut state, 0.01).unwrap();
    for (j, before) in [1.0, -2.0, 0.5].iter().enumerate() {
        let gj = g.data()[j];
        let expected = before - 0.01 * gj / (gj.abs() + 1e-8);
        assert!((w.data()[j] - expected).abs() < 1e-12);
    }
    assert_eq!(state.step_count(), 1);
}

#[test]
fn non_finite_gradient_leaves_parameters_untouched() {
    let mut w = Matrix::zeros(1, 2);
    let g = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap();
    let mut state = OptimizerState::new(&[(1, 2)]);
    assert!(adamw_step(&mut [("w".into(), &mut w)], &[g], &mut state, 0.1).is_err());
    assert_eq!(w, Matrix::zeros(1, 2));
    assert_eq!(state.step_count(), 0);
}

#[test]
fn schedule_warms_up_linearly_then_decays_to_zero() {
    let base = 1e-3;
    assert_eq!(lr_at(0, 100, base, 0.1).unwrap(), 0.0);
    assert!((lr_at(5, 100, base, 0.1).unwrap() - base * 0.5).abs() < 1e-18);
    assert!((lr_at(10, 100, base, 0.1).unwrap() - base).abs() < 1e-18);
    assert!((lr_at(55, 100, base, 0.1).unwrap() - base * 0.5).abs() < 1e-15);
    assert!(lr_at(100, 100, base, 0.1).unwrap().abs() < 1e-18);
    assert!(lr_at(101, 100, base, 0.1).is_err());
}
