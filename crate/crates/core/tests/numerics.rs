mod common;

use common::{gradcheck, random_tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simulst::numerics::{ParamStore, Tape, Tensor};
use simulst::Error;

fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.input(&t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let m = tape.input(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.input(&t2(&[vec![1.0, 2.0]]));
    let b = tape.input(&t2(&[vec![3.0], vec![4.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.0]);

    let x = tape.input(&Tensor::zeros(vec![2, 3]));
    let y = tape.input(&Tensor::zeros(vec![2, 3]));
    match tape.matmul(x, y) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&t2(&[vec![0.0, 0.0]]));
    let s = tape.softmax(x, 1).unwrap();
    assert_eq!(tape.value(s), &[0.5, 0.5]);
    let x = tape.input(&t2(&[vec![1f64.ln(), 3f64.ln()]]));
    let s = tape.softmax(x, 1).unwrap();
    assert!((tape.value(s)[0] - 0.25).abs() < 1e-15);
    assert!((tape.value(s)[1] - 0.75).abs() < 1e-15);
    let e = tape.input(&Tensor::zeros(vec![2, 0]));
    assert!(tape.softmax(e, 1).is_err());
}

#[test]
fn softmax_along_first_axis() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&t2(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
    let s = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(s), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn conv_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = tape.input(&Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let b = tape.input(&Tensor::zeros(vec![1]));
    let y = tape.conv1d(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);

    let x5 = tape.input(&Tensor::zeros(vec![5, 1]));
    let k3 = tape.input(&Tensor::new(vec![3, 1, 2], vec![1.0; 6]).unwrap());
    let b2 = tape.input(&Tensor::zeros(vec![2]));
    let y = tape.conv1d(x5, k3, b2, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[3, 2]);

    // lookahead must leave at least the current frame in the window
    assert!(tape.conv1d(x5, k3, b2, 1, 3).is_err());
    let empty = tape.input(&Tensor::zeros(vec![0, 1]));
    assert!(tape.conv1d(empty, k3, b2, 1, 0).is_err());
}

#[test]
fn attention_examples() {
    let mut tape = Tape::<f64>::new();
    let q = tape.input(&t2(&[vec![0.3, -0.2]]));
    let k1 = tape.input(&t2(&[vec![1.0, 2.0]]));
    let v1 = tape.input(&t2(&[vec![5.0, 7.0]]));
    let o = tape.attention(q, k1, v1, &[true], 1).unwrap();
    assert_eq!(tape.value(o), &[5.0, 7.0]);

    let k2 = tape.input(&t2(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
    let v2 = tape.input(&t2(&[vec![1.0, 0.0], vec![3.0, 4.0]]));
    let o = tape.attention(q, k2, v2, &[true, true], 1).unwrap();
    assert_eq!(tape.value(o), &[2.0, 2.0]);

    let o = tape.attention(q, k2, v2, &[true, false], 1).unwrap();
    assert_eq!(tape.value(o), &[1.0, 0.0]);

    assert!(tape.attention(q, k2, v2, &[false, false], 1).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g1 = tape.input(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let b0 = tape.input(&Tensor::zeros(vec![2]));
    let c = tape.input(&t2(&[vec![4.0, 4.0]]));
    let y = tape.layer_norm(c, g1, b0).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0]);

    let x = tape.input(&t2(&[vec![1.0, 3.0]]));
    let y = tape.layer_norm(x, g1, b0).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((tape.value(y)[0] + expect).abs() < 1e-12);
    assert!((tape.value(y)[1] - expect).abs() < 1e-12);

    let g0 = tape.input(&Tensor::zeros(vec![2]));
    let b5 = tape.input(&Tensor::new(vec![2], vec![5.0, 5.0]).unwrap());
    let y = tape.layer_norm(x, g0, b5).unwrap();
    assert_eq!(tape.value(y), &[5.0, 5.0]);

    let narrow = tape.input(&t2(&[vec![1.0]]));
    let g = tape.input(&Tensor::new(vec![1], vec![1.0]).unwrap());
    let b = tape.input(&Tensor::zeros(vec![1]));
    assert!(tape.layer_norm(narrow, g, b).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let sure = tape.input(&t2(&[vec![0.0, -1e4, -1e4]]));
    let l = tape.cross_entropy(sure, &[0], 99).unwrap();
    assert!(tape.scalar(l).abs() < 1e-12);

    let uniform = tape.input(&t2(&[vec![0.0; 4], vec![0.0; 4]]));
    let l = tape.cross_entropy(uniform, &[1, 3], 99).unwrap();
    assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
    assert!((tape.scalar(l) - 1.3863).abs() < 1e-4);

    // pad positions neither add loss nor count
    let l = tape.cross_entropy(uniform, &[1, 0], 0).unwrap();
    assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);

    assert!(tape.cross_entropy(uniform, &[0, 0], 0).is_err());
    assert!(tape.cross_entropy(uniform, &[4, 1], 99).is_err());
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::new(vec![1], vec![3.0]).unwrap());
    let p = store.add("p", Tensor::new(vec![1], vec![-1.0]).unwrap());
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let _pv = tape.param(&store, p);
    let sq = tape.mul(xv, xv).unwrap();
    let loss = tape.sum(sq);
    tape.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(x).grad.as_deref(), Some(&[6.0][..]));
    assert!(store.get(p).grad.as_ref().is_none_or(|g| g == &[0.0]));

    // a second backward without zeroing doubles the accumulated gradient
    tape.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(x).grad.as_deref(), Some(&[12.0][..]));

    assert!(tape.backward(sq).is_ok(), "one-element tensors count as scalars");
    let two = tape.input(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
    assert!(matches!(tape.backward(two), Err(Error::Shape { .. })));
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, vec![5, 4], 1.0);
    let w = random_tensor(&mut rng, vec![4, 4], 1.0);
    let g = random_tensor(&mut rng, vec![4], 1.0);
    let b = random_tensor(&mut rng, vec![4], 1.0);
    let err = gradcheck(
        &[x, w, g, b],
        &|t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.layer_norm(h, v[2], v[3]).unwrap();
            let h = t.relu(h);
            let mask: Vec<bool> = (0..25).map(|k| k % 5 <= k / 5).collect();
            let a = t.attention(h, h, h, &mask, 2).unwrap();
            let r = t.add(a, h).unwrap();
            let s = t.log_softmax(r, 1).unwrap();
            t.cross_entropy(s, &[0, 1, 2, 3, 0], 9).unwrap()
        },
        1e-5,
    );
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (stride, la) in [(1, 0), (2, 1), (2, 0), (1, 2)] {
        let x = random_tensor(&mut rng, vec![7, 3], 1.0);
        let k = random_tensor(&mut rng, vec![3, 3, 2], 1.0);
        let b = random_tensor(&mut rng, vec![2], 1.0);
        let err = gradcheck(
            &[x, k, b],
            &|t, v| {
                let y = t.conv1d(v[0], v[1], v[2], stride, la).unwrap();
                let y2 = t.mul(y, y).unwrap();
                t.sum(y2)
            },
            1e-5,
        );
        assert!(err < 1e-4, "stride {stride} lookahead {la}: {err}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in prop::collection::vec(-30.0f32..30.0, 1..12),
        shift in -50.0f32..50.0,
    ) {
        let n = vals.len();
        let mut tape = Tape::<f32>::new();
        let x = tape.input(&Tensor::new(vec![1, n], vals.clone()).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        let y = tape.value(s).to_vec();
        prop_assert!(y.iter().all(|&p| p >= 0.0));
        prop_assert!((y.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        let shifted: Vec<f32> = vals.iter().map(|v| v + shift).collect();
        let x2 = tape.input(&Tensor::new(vec![1, n], shifted).unwrap());
        let s2 = tape.softmax(x2, 1).unwrap();
        for (a, b) in y.iter().zip(tape.value(s2)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_output_ignores_frames_past_its_horizon(
        t_in in 3usize..20,
        stride in 1usize..=2,
        la in 0usize..3,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, vec![t_in, 2], 1.0);
        let k = random_tensor(&mut rng, vec![3, 2, 2], 1.0);
        let b = random_tensor(&mut rng, vec![2], 1.0);
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (xv, kv, bv) = (tape.input(x), tape.input(&k), tape.input(&b));
            let y = tape.conv1d(xv, kv, bv, stride, la).unwrap();
            tape.value(y).to_vec()
        };
        let base = run(&x);
        let t_out = t_in.div_ceil(stride);
        for t in 0..t_out {
            let horizon = t * stride + la;
            if horizon + 1 >= t_in {
                continue;
            }
            let mut y = x.clone();
            for i in horizon + 1..t_in {
                y.data_mut()[i * 2] += 10.0;
                y.data_mut()[i * 2 + 1] -= 3.0;
            }
            let pert = run(&y);
            prop_assert_eq!(&base[t * 2..t * 2 + 2], &pert[t * 2..t * 2 + 2]);
        }
    }
}

#[test]
fn indexing_and_pooling_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let table = random_tensor(&mut rng, vec![6, 3], 1.0);
    let bias = random_tensor(&mut rng, vec![3], 1.0);
    let err = gradcheck(
        &[table, bias],
        &|t, v| {
            let g = t.gather(v[0], &[4, 1, 1, 5]).unwrap();
            let g = t.add_row(g, v[1]).unwrap();
            let r = t.rows(g, 1, 4).unwrap();
            let c = t.column(r, 2).unwrap();
            let s = t.softmax(r, 0).unwrap();
            let s = t.scale(s, 2.5);
            let s = t.mul_const(s, (0..9).map(|i| i as f64 * 0.1).collect()).unwrap();
            let a = t.select_sum(s, &[0, 4, 4, 8]).unwrap();
            let b = t.mean(c).unwrap();
            let ab = t.add(a, b).unwrap();
            let sq = t.mul(ab, ab).unwrap();
            t.sum(sq)
        },
        1e-5,
    );
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn ctc_and_segment_pool_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random_tensor(&mut rng, vec![8, 4], 2.0);
    let states = random_tensor(&mut rng, vec![8, 3], 1.0);
    let err = gradcheck(
        &[logits, states],
        &|t, v| {
            let lp = t.log_softmax(v[0], 1).unwrap();
            let nll = t.ctc_nll(lp, &[0, 2, 2]).unwrap();
            let p = t.softmax(v[0], 1).unwrap();
            let blank = t.column(p, 3).unwrap();
            let pooled = t
                .segment_pool(v[1], blank, &[(0, 3), (3, 4), (4, 8)], 1.5)
                .unwrap();
            let sq = t.mul(pooled, pooled).unwrap();
            let s = t.sum(sq);
            t.add(nll, s).unwrap()
        },
        1e-5,
    );
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn infeasible_ctc_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let lp = tape.input(&Tensor::zeros(vec![2, 3]));
    assert!(matches!(
        tape.ctc_nll(lp, &[1, 1]),
        Err(Error::InfeasibleAlignment { .. })
    ));
}
