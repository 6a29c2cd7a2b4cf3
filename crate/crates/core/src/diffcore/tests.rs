use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(random_tensor(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check<F>(store: &mut ParamStore, mode: Mode, f: F) -> f64
where
    F: for<'a> Fn(&mut Tape<'a>) -> crate::Result<Var>,
{
    let opts = GradCheckOptions {
        mode,
        ..Default::default()
    };
    finite_diff_check(store, &opts, f).unwrap().max_rel_error
}

#[test]
fn relu_sigmoid_segment_sum_examples() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let z = tape.constant(Tensor::vector(vec![0.0]));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);

    let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let ss = tape.segment_sum(v, &[0, 0, 1], 2).unwrap();
    assert_eq!(tape.value(ss).data(), &[3.0, 3.0]);
}

#[test]
fn linear_and_relu_derivatives() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(2.0), true);
    let tape_grads = {
        let mut tape = Tape::new(&store, Mode::Train, 0);
        let wv = tape.param(w);
        let x = tape.constant(Tensor::scalar(3.0));
        let loss = tape.mul(wv, x).unwrap();
        tape.backward_scalar(loss).unwrap()
    };
    assert_eq!(tape_grads.get(w).unwrap().data(), &[3.0]);

    store.set_value(w, Tensor::scalar(-1.0)).unwrap();
    let mut tape = Tape::new(&store, Mode::Train, 0);
    let wv = tape.param(w);
    let loss = tape.relu(wv).unwrap();
    let g = tape.backward_scalar(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.0]);
}

#[test]
fn quadratic_gradcheck_is_exact() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(1.0), true);
    let err = check(&mut store, Mode::Eval, |t| {
        let v = t.param(w);
        t.mul(v, v)
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn segment_max_gradient_goes_to_argmax() {
    let mut store = ParamStore::new();
    let x = store.add(
        "x",
        Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0], vec![0.5, -1.0]]).unwrap(),
        true,
    );
    let grads = {
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let v = tape.param(x);
        let m = tape.segment_max(v, &[0, 0, 1], 2).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward_scalar(s).unwrap()
    };
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    let err = check(&mut store, Mode::Eval, |t| {
        let v = t.param(x);
        let m = t.segment_max(v, &[0, 0, 1], 2)?;
        weighted_sum(t, m, 1)
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn empty_segments_yield_zero() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let v = tape.constant(Tensor::from_rows(&[vec![-2.0], vec![-3.0]]).unwrap());
    let seg = [0, 0];
    for out in [
        tape.segment_sum(v, &seg, 3).unwrap(),
        tape.segment_mean(v, &seg, 3).unwrap(),
        tape.segment_max(v, &seg, 3).unwrap(),
    ] {
        assert_eq!(&tape.value(out).data()[1..], &[0.0, 0.0]);
    }
    let agg = tape.softmax_aggregate(v, v, &seg, 3).unwrap();
    assert_eq!(&tape.value(agg).data()[1..], &[0.0, 0.0]);
}

#[test]
fn shape_errors_name_the_primitive() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(err.to_string().starts_with("matmul"), "{err}");
    let err = tape.segment_sum(a, &[0, 5], 2).unwrap_err();
    assert!(matches!(err, Error::Index { op: "segment_sum", .. }));
}

#[test]
fn non_finite_output_is_an_error() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let a = tape.constant(Tensor::vector(vec![1e300]));
    let err = tape.scale(a, 1e300).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "scale" }));
}

#[test]
fn backward_errors() {
    let store = ParamStore::new();
    let tape = Tape::new(&store, Mode::Train, 0);
    let mut other = Tape::new(&store, Mode::Train, 0);
    let v = other.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward_scalar(v).unwrap_err(), Error::NoForward(_)));
    assert!(other.backward(v, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn dropout_requires_eval_for_gradcheck() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full(&[4], 1.0), true);
    let opts = GradCheckOptions {
        mode: Mode::Train,
        ..Default::default()
    };
    let err = finite_diff_check(&mut store, &opts, |t| {
        let v = t.param(w);
        let d = t.dropout(v, 0.5)?;
        t.sum(d)
    })
    .unwrap_err();
    assert!(matches!(err, Error::NonDeterministic(_)));
}

#[test]
fn dropout_is_inverted_and_off_in_eval() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Train, 3);
    let x = tape.constant(Tensor::full(&[1000], 1.0));
    let d = tape.dropout(x, 0.25).unwrap();
    for v in tape.value(d).data() {
        assert!(*v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-15);
    }
    let mut eval = Tape::new(&store, Mode::Eval, 3);
    let x = eval.constant(Tensor::full(&[10], 1.0));
    let d = eval.dropout(x, 0.25).unwrap();
    assert_eq!(x, d);
}

#[test]
fn zero_grad_and_accumulation() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = store.add("w", random_tensor(&mut rng, &[3, 2]), true);
    let grads = {
        let mut tape = Tape::new(&store, Mode::Train, 0);
        let v = tape.param(w);
        let s = tape.sigmoid(v).unwrap();
        let loss = weighted_sum(&mut tape, s, 2).unwrap();
        tape.backward_scalar(loss).unwrap()
    };
    store.accumulate(&grads);
    let once = store.get(w).grad.clone();
    store.accumulate(&grads);
    let twice = store.get(w).grad.clone();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    store.zero_grad();
    assert!(store.get(w).grad.data().iter().all(|g| *g == 0.0));
    assert_eq!(store.get(w).grad.shape(), store.get(w).value.shape());
}

#[test]
fn forward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut rng, &[6, 3]), true);
    let run = || {
        let mut tape = Tape::new(&store, Mode::Train, 42);
        let v = tape.param(x);
        let d = tape.dropout(v, 0.3).unwrap();
        let s = tape.segment_softmax(d, &[0, 1, 0, 1, 2, 2], 3).unwrap();
        tape.value(s).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn batch_norm_running_stats() {
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 2);
    let updates = {
        let mut tape = Tape::new(&store, Mode::Train, 0);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 4.0]]).unwrap());
        let y = tape.batch_norm(x, &bn).unwrap();
        let col0: Vec<f64> = (0..2).map(|r| tape.value(y).at(r, 0)).collect();
        assert!((col0[0] + col0[1]).abs() < 1e-12);
        tape.take_running_stats()
    };
    for u in &updates {
        u.apply(&mut store);
    }
    assert_eq!(store.value(bn.running_mean).data(), &[0.2, 0.2]);
    // unbiased variances 2 and 8
    let rv = store.value(bn.running_var).data();
    assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-12);
    assert!((rv[1] - (0.9 + 0.8)).abs() < 1e-12);
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random_tensor(&mut rng, &[5, 3]), true);
        let b = store.add("b", random_tensor(&mut rng, &[5, 3]), true);
        let m = store.add("m", random_tensor(&mut rng, &[3, 4]), true);
        let row = store.add("row", random_tensor(&mut rng, &[3]), true);
        let col = store.add("col", random_tensor(&mut rng, &[5, 1]), true);
        let s = store.add("s", random_tensor(&mut rng, &[1]), true);
        let cube = store.add("cube", random_tensor(&mut rng, &[4, 2, 3]), true);
        let table = store.add("table", random_tensor(&mut rng, &[4, 3]), true);
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let seg = [0usize, 2, 0, 1, 2];
        let seg3 = [1usize, 0, 1, 1];

        type Case = Box<dyn for<'a> Fn(&mut Tape<'a>) -> crate::Result<Var>>;
        let cases: Vec<(&str, Case, Mode)> = vec![
            (
                "matmul",
                Box::new(move |t| {
                    let (x, y) = (t.param(a), t.param(m));
                    t.matmul(x, y)
                }),
                Mode::Eval,
            ),
            (
                "add",
                Box::new(move |t| {
                    let (x, y) = (t.param(a), t.param(b));
                    t.add(x, y)
                }),
                Mode::Eval,
            ),
            (
                "sub",
                Box::new(move |t| {
                    let (x, y) = (t.param(a), t.param(b));
                    t.sub(x, y)
                }),
                Mode::Eval,
            ),
            (
                "mul",
                Box::new(move |t| {
                    let (x, y) = (t.param(a), t.param(b));
                    t.mul(x, y)
                }),
                Mode::Eval,
            ),
            (
                "add_row",
                Box::new(move |t| {
                    let (x, y) = (t.param(a), t.param(row));
                    t.add_row(x, y)
                }),
                Mode::Eval,
            ),
            (
                "mul_col",
                Box::new(move |t| {
                    let (x, y) = (t.param(a), t.param(col));
                    t.mul_col(x, y)
                }),
                Mode::Eval,
            ),
            (
                "scale",
                Box::new(move |t| {
                    let x = t.param(cube);
                    t.scale(x, -2.5)
                }),
                Mode::Eval,
            ),
            (
                "shift",
                Box::new(move |t| {
                    let x = t.param(cube);
                    t.shift(x, 0.3)
                }),
                Mode::Eval,
            ),
            (
                "scale_by",
                Box::new(move |t| {
                    let (x, y) = (t.param(a), t.param(s));
                    t.scale_by(x, y)
                }),
                Mode::Eval,
            ),
            (
                "relu",
                Box::new(move |t| {
                    let x = t.param(cube);
                    t.relu(x)
                }),
                Mode::Eval,
            ),
            (
                "sigmoid",
                Box::new(move |t| {
                    let x = t.param(cube);
                    t.sigmoid(x)
                }),
                Mode::Eval,
            ),
            (
                "shifted_softplus",
                Box::new(move |t| {
                    let x = t.param(a);
                    t.shifted_softplus(x)
                }),
                Mode::Eval,
            ),
            (
                "abs",
                Box::new(move |t| {
                    let x = t.param(a);
                    t.abs(x)
                }),
                Mode::Eval,
            ),
            (
                "mean",
                Box::new(move |t| {
                    let x = t.param(cube);
                    t.mean(x)
                }),
                Mode::Eval,
            ),
            (
                "segment_sum",
                Box::new(move |t| {
                    let x = t.param(a);
                    t.segment_sum(x, &seg, 4)
                }),
                Mode::Eval,
            ),
            (
                "segment_mean",
                Box::new(move |t| {
                    let x = t.param(a);
                    t.segment_mean(x, &seg, 3)
                }),
                Mode::Eval,
            ),
            (
                "segment_max",
                Box::new(move |t| {
                    let x = t.param(cube);
                    t.segment_max(x, &seg3, 2)
                }),
                Mode::Eval,
            ),
            (
                "segment_softmax",
                Box::new(move |t| {
                    let x = t.param(a);
                    t.segment_softmax(x, &seg, 3)
                }),
                Mode::Eval,
            ),
            (
                "softmax_aggregate",
                Box::new(move |t| {
                    let (x, y) = (t.param(a), t.param(b));
                    t.softmax_aggregate(x, y, &seg, 3)
                }),
                Mode::Eval,
            ),
            (
                "gather",
                Box::new(move |t| {
                    let x = t.param(cube);
                    t.gather(x, &[3, 0, 3, 1])
                }),
                Mode::Eval,
            ),
            (
                "embedding",
                Box::new(move |t| t.embedding(table, &[2, 2, 0, 3, 1])),
                Mode::Eval,
            ),
            (
                "batch_norm_train",
                Box::new({
                    let bn = bn.clone();
                    move |t| {
                        let x = t.param(a);
                        t.batch_norm(x, &bn)
                    }
                }),
                Mode::Train,
            ),
            (
                "batch_norm_eval",
                Box::new({
                    let bn = bn.clone();
                    move |t| {
                        let x = t.param(a);
                        t.batch_norm(x, &bn)
                    }
                }),
                Mode::Eval,
            ),
            (
                "dropout_mask",
                Box::new(move |t| {
                    let x = t.param(a);
                    t.dropout_with_mask(x, (0..15).map(|i| (i % 3) as f64).collect())
                }),
                Mode::Train,
            ),
            (
                "stack",
                Box::new(move |t| {
                    let (x, y) = (t.param(a), t.param(b));
                    let z = t.sigmoid(x)?;
                    t.stack(&[x, y, z])
                }),
                Mode::Eval,
            ),
            (
                "concat",
                Box::new(move |t| {
                    let (x, y) = (t.param(a), t.param(table));
                    t.concat(&[x, y])
                }),
                Mode::Eval,
            ),
            (
                "reshape",
                Box::new(move |t| {
                    let x = t.param(cube);
                    let r = t.reshape(x, &[8, 3])?;
                    t.sigmoid(r)
                }),
                Mode::Eval,
            ),
        ];
        for (name, f, mode) in cases {
            let err = check(&mut store, mode, |t| {
                let out = f(t)?;
                weighted_sum(t, out, seed)
            });
            assert!(err < 1e-5, "{name} seed {seed}: rel error {err}");
        }
    }
}

#[test]
fn segment_softmax_sums_to_one_and_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = ParamStore::new();
    let logits = random_tensor(&mut rng, &[7, 2]);
    let seg = [0usize, 1, 1, 0, 2, 1, 0];
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let x = tape.constant(logits.clone());
    let y = tape.segment_softmax(x, &seg, 3).unwrap();
    let sums = tape.segment_sum(y, &seg, 3).unwrap();
    for v in tape.value(sums).data() {
        assert!((v - 1.0).abs() < 1e-12);
    }
    let mut shifted = logits;
    for (r, &s) in seg.iter().enumerate() {
        if s == 1 {
            shifted.data_mut()[r * 2] += 3.7;
            shifted.data_mut()[r * 2 + 1] += 3.7;
        }
    }
    let x2 = tape.constant(shifted);
    let y2 = tape.segment_softmax(x2, &seg, 3).unwrap();
    assert!(tape.value(y).max_abs_diff(tape.value(y2)) < 1e-9);
}

#[test]
fn segment_sums_are_order_independent_in_deterministic_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.gen_range(-1e3..1e3)]).collect();
    let seg: Vec<usize> = (0..40).map(|i| i % 3).collect();
    let mut perm: Vec<usize> = (0..40).collect();
    perm.reverse();
    perm.swap(3, 17);
    let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let pseg: Vec<usize> = perm.iter().map(|&i| seg[i]).collect();
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval, 0);
    let a = tape.constant(Tensor::from_rows(&rows).unwrap());
    let b = tape.constant(Tensor::from_rows(&prow).unwrap());
    let sa = tape.segment_sum(a, &seg, 3).unwrap();
    let sb = tape.segment_sum(b, &pseg, 3).unwrap();
    assert_eq!(tape.value(sa), tape.value(sb));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_aggregate_is_a_convex_combination(
            vals in proptest::collection::vec(-5.0f64..5.0, 1..12),
            beta in -20.0f64..20.0,
        ) {
            let store = ParamStore::new();
            let mut tape = Tape::new(&store, Mode::Eval, 0);
            let n = vals.len();
            let v = tape.constant(Tensor::new(vec![n, 1], vals.clone()).unwrap());
            let l = tape.scale(v, beta).unwrap();
            let seg = vec![0usize; n];
            let out = tape.softmax_aggregate(l, v, &seg, 1).unwrap();
            let o = tape.value(out).data()[0];
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }
}
