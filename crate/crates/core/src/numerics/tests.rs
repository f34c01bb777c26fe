use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Central differences of `f` at every entry of parameter `id`.
fn numeric_grad(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64) -> Tensor {
    let h = 1e-5;
    let base = store.value(id).clone();
    let mut out = Tensor::zeros(base.rows(), base.cols());
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[k] += h;
        store.get_mut(id).tensor = plus;
        let fp = f(store);
        let mut minus = base.clone();
        minus.data_mut()[k] -= h;
        store.get_mut(id).tensor = minus;
        let fm = f(store);
        out.data_mut()[k] = (fp - fm) / (2.0 * h);
    }
    store.get_mut(id).tensor = base;
    out
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn analytic_grad(
    store: &mut ParamStore,
    build: &dyn Fn(&mut Graph, &ParamStore) -> Var,
) -> Vec<Tensor> {
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.backward(loss, store).unwrap();
    store.ids().map(|id| store.get(id).grad()).collect()
}

fn check_fd(store: &mut ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> Var, skip: &[&str]) {
    let grads = analytic_grad(store, build);
    let f = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l).data()[0]
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable || skip.contains(&store.get(id).name.as_str()) {
            continue;
        }
        let num = numeric_grad(store, id, &f);
        let err = rel_err(&grads[id.0], &num);
        assert!(err < 1e-4, "{}: rel err {err}", store.get(id).name);
    }
}

#[test]
fn softmax_symmetric_row() {
    let mut g = Graph::new();
    let m = g.constant(t(&[&[0.0, 0.0]]));
    let s = softmax_rows(&mut g, m);
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_matches_scalar_oracle() {
    let mut g = Graph::new();
    let m = g.constant(t(&[&[1.0, 2.0, 3.0]]));
    let s = softmax_rows(&mut g, m);
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (k, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((g.value(s).data()[k] - v.exp() / z).abs() < 1e-15);
    }
}

#[test]
fn linear_scalar_and_identity() {
    let mut g = Graph::new();
    let x = g.constant(t(&[&[2.0]]));
    let w = g.constant(t(&[&[3.0]]));
    let b = g.constant(t(&[&[1.0]]));
    let y = linear(&mut g, x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[7.0]);

    let xs = t(&[&[1.0, -2.0, 3.5], &[0.25, 4.0, -1.0]]);
    let x = g.constant(xs.clone());
    let w = g.constant(Tensor::eye(3));
    let b = g.constant(Tensor::zeros(1, 3));
    let y = linear(&mut g, x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), &xs);
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(3, 4, 1.0, &mut rng);
    let w = Tensor::randn(4, 2, 1.0, &mut rng);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = linear(&mut g, xv, wv, None).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += x.get(i, k) * w.get(k, j);
            }
            assert!((g.value(y).get(i, j) - s).abs() < 1e-14);
        }
    }
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(2, 3));
    let w = g.constant(Tensor::zeros(4, 2));
    let err = linear(&mut g, x, w, None).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn avgpool_cases() {
    let store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = aggregate_1d(&mut g, &store, x, 2, AggMode::AvgPool, None).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, 3.5]);

    let x = g.constant(Tensor::filled(512, 3, 2.5));
    let y = aggregate_1d(&mut g, &store, x, 4, AggMode::AvgPool, None).unwrap();
    assert_eq!(g.value(y).shape(), &[128, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));
}

#[test]
fn aggregate_rejects_coarse_window() {
    let store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(3, 1));
    let err = aggregate_1d(&mut g, &store, x, 4, AggMode::AvgPool, None).unwrap_err();
    assert!(err.to_string().contains("scale too coarse"));
}

#[test]
fn attention_one_atom_and_identical_values() {
    let mut g = Graph::new();
    let q = g.constant(t(&[&[1.0, -3.0], &[0.2, 0.7]]));
    let k = g.constant(t(&[&[0.5, 0.5]]));
    let v = g.constant(t(&[&[4.0, -1.0]]));
    let o = attention(&mut g, q, k, v).unwrap();
    for r in 0..2 {
        assert_eq!(g.value(o).row_slice(r), &[4.0, -1.0]);
    }
    let k = g.constant(t(&[&[0.5, 0.5], &[-1.0, 2.0], &[3.0, 0.0]]));
    let v = g.constant(t(&[&[2.0, 3.0], &[2.0, 3.0], &[2.0, 3.0]]));
    let o = attention(&mut g, q, k, v).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            assert!((g.value(o).get(r, c) - [2.0, 3.0][c]).abs() < 1e-14);
        }
    }
}

#[test]
fn attention_two_by_two_by_hand() {
    let mut g = Graph::new();
    let q = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let k = g.constant(t(&[&[1.0, 0.0], &[0.0, 2.0]]));
    let v = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let o = attention(&mut g, q, k, v).unwrap();
    let s = 2f64.sqrt();
    // row 0 logits (1, 0)/√2, row 1 logits (0, 2)/√2
    for (r, (l0, l1)) in [(1.0 / s, 0.0), (0.0, 2.0 / s)].into_iter().enumerate() {
        let (e0, e1) = (f64::exp(l0), f64::exp(l1));
        let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        assert!((g.value(o).get(r, 0) - (w0 * 1.0 + w1 * 3.0)).abs() < 1e-14);
        assert!((g.value(o).get(r, 1) - (w0 * 2.0 + w1 * 4.0)).abs() < 1e-14);
    }
}

#[test]
fn attention_rejects_width_mismatch() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(2, 3));
    let k = g.constant(Tensor::zeros(2, 2));
    let v = g.constant(Tensor::zeros(2, 2));
    assert!(attention(&mut g, q, k, v).is_err());
}

#[test]
fn fused_attention_matches_composed_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut grads = Vec::new();
    let mut outs = Vec::new();
    for fused in [true, false] {
        let mut store = ParamStore::new();
        let mut r = rng.clone();
        let q = store.add("q", Tensor::randn(5, 3, 1.0, &mut r), true);
        let k = store.add("k", Tensor::randn(7, 3, 1.0, &mut r), true);
        let v = store.add("v", Tensor::randn(7, 2, 1.0, &mut r), true);
        let w = Tensor::randn(5, 2, 1.0, &mut r);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.param(&store, q), g.param(&store, k), g.param(&store, v));
        let o = if fused {
            attention(&mut g, qv, kv, vv).unwrap()
        } else {
            let a = attention_weights(&mut g, qv, kv).unwrap();
            g.matmul(a, vv).unwrap()
        };
        outs.push(g.value(o).clone());
        let wc = g.constant(w);
        let prod = g.mul(o, wc).unwrap();
        let loss = g.sum(prod);
        g.backward(loss, &mut store).unwrap();
        grads.push([q, k, v].map(|id| store.get(id).grad()));
    }
    assert!(outs[0].max_abs_diff(&outs[1]) < 1e-14);
    for (a, b) in grads[0].iter().zip(&grads[1]) {
        assert!(a.max_abs_diff(b) < 1e-13, "{}", a.max_abs_diff(b));
    }
}

#[test]
fn backward_linear_and_quadratic() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(&[0.5, -1.0, 2.0]), true);
    let x = Tensor::new(vec![3, 1], vec![3.0, 4.0, 5.0]).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let xv = g.constant(x);
    let l = g.matmul(wv, xv).unwrap();
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.get(w).grad().data(), &[3.0, 4.0, 5.0]);

    store.zero_grad();
    let target = Tensor::row(&[1.0, 1.0, 1.0]);
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let tv = g.constant(target);
    let d = g.sub(wv, tv).unwrap();
    let sq = g.mul(d, d).unwrap();
    let l = g.mean(sq);
    g.backward(l, &mut store).unwrap();
    let expect: Vec<f64> = [0.5, -1.0, 2.0].iter().map(|w| 2.0 * (w - 1.0) / 3.0).collect();
    for (a, b) in store.get(w).grad().data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn backward_twice_is_an_error() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(1.0), true);
    let mut g = Graph::new();
    let v = g.param(&store, w);
    let l = g.sum(v);
    g.backward(l, &mut store).unwrap();
    assert!(matches!(g.backward(l, &mut store), Err(Error::BackwardTwice)));
    g.reset();
    let v = g.param(&store, w);
    let l = g.sum(v);
    assert!(g.backward(l, &mut store).is_ok());
}

#[test]
fn frozen_parameter_keeps_zero_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(&[1.0, 2.0]), false);
    let mut g = Graph::new();
    let v = g.param(&store, w);
    let sq = g.mul(v, v).unwrap();
    let l = g.sum(sq);
    g.backward(l, &mut store).unwrap();
    assert!(store.get(w).grad().data().iter().all(|&x| x == 0.0));
}

#[test]
fn finite_differences_for_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::randn(5, 4, 1.0, &mut rng), true);
    let b = store.add("b", Tensor::randn(4, 4, 1.0, &mut rng), true);
    let r = store.add("r", Tensor::randn(1, 4, 1.0, &mut rng), true);
    let s = store.add("s", Tensor::scalar(0.7), true);
    let c = store.add("c", Tensor::randn(3, 4, 1.0, &mut rng), true);
    let kern = store.add("k", Tensor::randn(8, 4, 0.5, &mut rng), true);
    let kb = store.add("kb", Tensor::randn(1, 4, 0.5, &mut rng), true);
    let raw = store.add("raw", Tensor::randn(5, 3, 1.0, &mut rng), true);
    let mut mask = Tensor::zeros(5, 3);
    for (j, e) in [(0, 0), (1, 0), (2, 1), (3, 1), (4, 1), (4, 2), (0, 2)] {
        mask.set(j, e, 1.0);
    }

    for mode in [IncidenceGrad::ScoreWeighted, IncidenceGrad::StraightThrough] {
        let mask = mask.clone();
        let build = move |g: &mut Graph, st: &ParamStore| {
            let av = g.param(st, a);
            let bv = g.param(st, b);
            let rv = g.param(st, r);
            let sv = g.param(st, s);
            let cv = g.param(st, c);
            let x = linear(g, av, bv, Some(rv)).unwrap();
            let x = g.mul_scalar(x, sv).unwrap();
            let x = g.add_scalar(x, sv).unwrap();
            let x = g.tanh(x);
            let ln = g.layer_norm_rows(x, 1e-5);
            let gl = g.gelu(ln);
            let att = attention(g, gl, cv, cv).unwrap();
            let pooled = aggregate_1d(g, st, att, 2, AggMode::AvgPool, None).unwrap();
            let conv = aggregate_1d(
                g,
                st,
                x,
                2,
                AggMode::Conv,
                Some(ConvParams { kernel: kern, bias: kb }),
            )
            .unwrap();
            let both = g.concat_rows(&[pooled, conv]).unwrap();
            let wide = g.concat_cols(&[both, both]).unwrap();
            let flat = g.reshape(wide, 1, 32).unwrap();
            let back = g.reshape(flat, 8, 4).unwrap();
            let aff = g.affine_cols(back, &[1.0, 2.0, -1.0, 0.5], &[0.0, 1.0, 2.0, 3.0]).unwrap();
            let rawv = g.param(st, raw);
            let hyper = g.hyper_aggregate(x, rawv, &mask, mode).unwrap();
            let nrm = g.row_normalize(hyper);
            let dist = g.pairwise_sq_dist(nrm, cv).unwrap();
            let root = g.sqrt(dist);
            let shifted = g.offset(root, -0.5);
            let act = g.relu(shifted);
            let tr = g.transpose(aff);
            let sc = g.scale(tr, 0.3);
            let l1 = g.mean(sc);
            let sq = g.mul(aff, aff).unwrap();
            let l2 = g.mean(sq);
            let l3 = g.sum(act);
            let l = g.add(l1, l2).unwrap();
            let l = g.add(l, l3).unwrap();
            g.sub(l, l1).unwrap()
        };
        // The straight-through forward is piecewise constant in `raw`.
        let skip: &[&str] = match mode {
            IncidenceGrad::ScoreWeighted => &[],
            IncidenceGrad::StraightThrough => &["raw"],
        };
        check_fd(&mut store, &build, skip);
    }
}

#[test]
fn straight_through_equals_score_weighted_at_equal_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::randn(6, 3, 1.0, &mut rng), true);
    let raw = store.add("raw", Tensor::filled(6, 4, 0.3), true);
    let w = Tensor::randn(4, 3, 1.0, &mut rng);
    let mut mask = Tensor::zeros(6, 4);
    for (j, e) in [(0, 0), (1, 0), (2, 0), (2, 1), (3, 1), (4, 2), (5, 2), (1, 2)] {
        mask.set(j, e, 1.0);
    }
    let grad_for = |mode: IncidenceGrad, store: &mut ParamStore| {
        store.zero_grad();
        let mut g = Graph::new();
        let xv = g.param(store, x);
        let rv = g.param(store, raw);
        let h = g.hyper_aggregate(xv, rv, &mask, mode).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(h, wv).unwrap();
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq);
        g.backward(l, store).unwrap();
        (store.get(x).grad(), store.get(raw).grad())
    };
    let (gx_ste, gr_ste) = grad_for(IncidenceGrad::StraightThrough, &mut store);
    let (gx_sw, gr_sw) = grad_for(IncidenceGrad::ScoreWeighted, &mut store);
    assert!(gx_ste.max_abs_diff(&gx_sw) < 1e-14);
    assert!(gr_ste.max_abs_diff(&gr_sw) < 1e-14);
    // selected entries only
    for j in 0..6 {
        for e in 0..4 {
            if mask.get(j, e) == 0.0 {
                assert_eq!(gr_ste.get(j, e), 0.0);
            }
        }
    }
    assert!(gr_ste.data().iter().any(|&v| v != 0.0));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 1..40), shift in -20.0f64..20.0) {
        let n = vals.len();
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![1, n], vals.clone()).unwrap());
        let s = softmax_rows(&mut g, m);
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(g.value(s).data().iter().all(|&v| v >= 0.0));
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let m2 = g.constant(Tensor::new(vec![1, n], shifted).unwrap());
        let s2 = softmax_rows(&mut g, m2);
        prop_assert!(g.value(s).max_abs_diff(g.value(s2)) < 1e-12);
    }

    #[test]
    fn avgpool_commutes_with_affine(vals in prop::collection::vec(-10.0f64..10.0, 8..64), a in -3.0f64..3.0, b in -5.0f64..5.0) {
        let store = ParamStore::new();
        let n = vals.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![n, 1], vals.clone()).unwrap());
        let ax: Vec<f64> = vals.iter().map(|v| a * v + b).collect();
        let y = g.constant(Tensor::new(vec![n, 1], ax).unwrap());
        let px = aggregate_1d(&mut g, &store, x, 4, AggMode::AvgPool, None).unwrap();
        let py = aggregate_1d(&mut g, &store, y, 4, AggMode::AvgPool, None).unwrap();
        for (u, v) in g.value(px).data().iter().zip(g.value(py).data()) {
            prop_assert!((a * u + b - v).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_equivariant_to_key_value_permutation(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::randn(3, 4, 1.0, &mut rng);
        let k = Tensor::randn(5, 4, 1.0, &mut rng);
        let v = Tensor::randn(5, 4, 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let kp = Tensor::vstack(&perm.iter().map(|&i| k.slice_rows(i, i + 1)).collect::<Vec<_>>().iter().collect::<Vec<_>>()).unwrap();
        let vp = Tensor::vstack(&perm.iter().map(|&i| v.slice_rows(i, i + 1)).collect::<Vec<_>>().iter().collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k), g.constant(v));
        let o1 = attention(&mut g, qv, kv, vv).unwrap();
        let (kv2, vv2) = (g.constant(kp), g.constant(vp));
        let o2 = attention(&mut g, qv, kv2, vv2).unwrap();
        prop_assert!(g.value(o1).max_abs_diff(g.value(o2)) < 1e-12);
    }
}

fn naive_product(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for p in 0..a.cols() {
                acc += a.get(i, p) * b.get(p, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

proptest! {
    #[test]
    fn products_match_triple_loop_for_thin_and_wide_shapes(
        n in 1usize..9, k in 1usize..9, m in 1usize..9, seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Tensor::randn(n, k, 1.0, &mut rng);
        a.data_mut()[0] = 0.0;
        let b = Tensor::randn(k, m, 1.0, &mut rng);
        let want = naive_product(&a, &b);
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&want) < 1e-12);
        prop_assert!(a.transpose().t_matmul(&b).unwrap().max_abs_diff(&want) < 1e-12);
        prop_assert!(a.matmul_t(&b.transpose()).unwrap().max_abs_diff(&want) < 1e-12);
    }
}
