use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::segment_softmax_values;
use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

fn store_with(params: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in params {
        s.insert(*n, t.clone()).unwrap();
    }
    s
}

fn check<F>(store: &ParamStore, f: F)
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, AutodiffError>,
{
    let report = grad_check(
        store,
        f,
        &GradCheckOptions {
            eps: 1e-5,
            tol: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.checked > 0);
}

#[test]
fn segment_softmax_examples() {
    assert_eq!(segment_softmax_values(&[3.7], &[0]), vec![1.0]);
    assert_eq!(segment_softmax_values(&[0.0, 0.0], &[0, 0]), vec![0.5, 0.5]);
    let out = segment_softmax_values(&[0.0, 3f64.ln()], &[0, 0]);
    assert!((out[0] - 0.25).abs() < 1e-15);
    assert!((out[1] - 0.75).abs() < 1e-15);
    // independent segments
    let out = segment_softmax_values(&[1.0, 5.0, 2.0], &[1, 0, 1]);
    assert_eq!(out[1], 1.0);
    assert!((out[0] + out[2] - 1.0).abs() < 1e-15);
}

#[test]
fn segment_softmax_survives_large_logits() {
    let out = segment_softmax_values(&[1000.0, 1000.0, -1000.0], &[0, 0, 0]);
    assert!((out[0] - 0.5).abs() < 1e-12);
    assert_eq!(out[2], 0.0);
}

#[test]
fn bce_examples() {
    assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    let l = bce_with_logits(100.0, 1.0);
    assert!(l.is_finite() && l < 1e-40);
    assert!((bce_with_logits(-100.0, 0.0)).abs() < 1e-40);
    assert!((bce_with_logits(-800.0, 1.0) - 800.0).abs() < 1e-9);

    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_vec(1, 1, vec![0.0]));
    let l = tape.bce_with_logits(z, vec![1.0]);
    tape.backward(l).unwrap();
    assert_eq!(tape.adjoint(z).unwrap().item(), -0.5);
}

#[test]
fn backward_product_rule() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
    let b = tape.constant(Tensor::from_vec(1, 3, vec![4.0, -5.0, 6.0]));
    let h = tape.hadamard(a, b);
    let s = tape.sum(h);
    tape.backward(s).unwrap();
    assert_eq!(tape.adjoint(a).unwrap().data(), &[4.0, -5.0, 6.0]);
    assert_eq!(tape.adjoint(b).unwrap().data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn backward_relu_gate() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(1, 2, vec![-1.0, 2.0]));
    let r = tape.relu(x);
    let s = tape.sum(r);
    tape.backward(s).unwrap();
    assert_eq!(tape.adjoint(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_repeats() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(2, 1));
    assert_eq!(
        tape.backward(x),
        Err(AutodiffError::NonScalarRoot { rows: 2, cols: 1 })
    );
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.backward(s), Err(AutodiffError::AlreadyBackpropagated));
}

#[test]
fn param_grads_before_backward_is_error() {
    let store = store_with(&[("w", Tensor::scalar(1.0))]);
    let mut tape = Tape::new();
    let w = tape.param(&store, store.id("w").unwrap());
    let _ = tape.sum(w);
    assert_eq!(
        tape.param_grads(&store).unwrap_err(),
        AutodiffError::NoBackward
    );
}

#[test]
fn duplicate_param_rejected() {
    let mut s = ParamStore::new();
    s.insert("a", Tensor::scalar(0.0)).unwrap();
    assert!(matches!(
        s.insert("a", Tensor::scalar(1.0)),
        Err(AutodiffError::DuplicateParam(_))
    ));
}

#[test]
fn embedding_lookup_scatters_into_looked_up_rows_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = store_with(&[("emb", random_tensor(&mut rng, 5, 3))]);
    let mut tape = Tape::new();
    let t = tape.param(&store, store.id("emb").unwrap());
    let g = tape.embedding_lookup(t, vec![3, 1, 3]);
    let s = tape.sum(g);
    tape.backward(s).unwrap();
    let grads = tape.param_grads(&store).unwrap();
    let gt = grads.get(store.id("emb").unwrap());
    for r in 0..5 {
        let expect = match r {
            3 => 2.0,
            1 => 1.0,
            _ => 0.0,
        };
        assert!(
            gt.row(r).iter().all(|&v| v == expect),
            "row {r}: {:?}",
            gt.row(r)
        );
    }
}

#[test]
fn grad_check_polynomial_and_bce() {
    let store = store_with(&[("theta", Tensor::scalar(3.0))]);
    let id = store.id("theta").unwrap();
    let mut tape = Tape::new();
    let t = tape.param(&store, id);
    let sq = tape.hadamard(t, t);
    let root = tape.sum(sq);
    tape.backward(root).unwrap();
    assert_eq!(tape.param_grads(&store).unwrap().get(id).item(), 6.0);
    let report = grad_check(
        &store,
        |s, tape: &mut Tape| -> Result<Var, AutodiffError> {
            let t = tape.param(s, id);
            let sq = tape.hadamard(t, t);
            Ok(tape.sum(sq))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    let worst = report.worst.unwrap();
    assert!((worst.numeric - 6.0).abs() < 1e-8);
    assert!((worst.analytic - 6.0).abs() < 1e-12);

    let store = store_with(&[("theta", Tensor::scalar(0.0))]);
    let report = grad_check(
        &store,
        |s, tape: &mut Tape| -> Result<Var, AutodiffError> {
            let t = tape.param(s, id);
            Ok(tape.bce_with_logits(t, vec![1.0]))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    let worst = report.worst.unwrap();
    assert!((worst.analytic + 0.5).abs() < 1e-12);
    assert!((worst.numeric + 0.5).abs() < 1e-8);
}

#[test]
fn every_primitive_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = store_with(&[
        ("x", random_tensor(&mut rng, 4, 3)),
        ("w", random_tensor(&mut rng, 5, 3)),
        ("b", random_tensor(&mut rng, 1, 5)),
        ("table", random_tensor(&mut rng, 6, 5)),
        ("y", random_tensor(&mut rng, 4, 5)),
    ]);
    let ids: Vec<ParamId> = ["x", "w", "b", "table", "y"]
        .iter()
        .map(|n| store.id(n).unwrap())
        .collect();
    let seg: Arc<[usize]> = vec![0, 2, 0, 2].into();

    check(&store, |s, t| {
        let x = t.param(s, ids[0]);
        let w = t.param(s, ids[1]);
        let b = t.param(s, ids[2]);
        let lin = t.linear(x, w);
        let z = t.add_row(lin, b);
        let y = t.param(s, ids[4]);
        let h = t.hadamard(z, y);
        let sig = t.sigmoid(h);
        let scaled = t.scale(sig, 1.7);
        let shifted = t.add_scalar(scaled, -0.3);
        Ok(t.mean(shifted))
    });

    check(&store, |s, t| {
        let table = t.param(s, ids[3]);
        let rows = t.embedding_lookup(table, vec![5, 0, 5, 2]);
        let y = t.param(s, ids[4]);
        let sum = t.add(rows, y);
        let both = t.concat_cols(&[sum, rows]);
        let logits = t.row_sum(both);
        let a = t.segment_softmax(logits, seg.clone());
        let agg = t.segment_weighted_sum(a, y, seg.clone(), 4);
        let stacked = t.concat_rows(&[agg, rows]);
        let r = t.add_scalar(stacked, 0.1);
        let r = t.relu(r);
        let col = t.row_sum(r);
        let lab: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        Ok(t.bce_with_logits(col, lab))
    });
}

#[test]
fn segment_weighted_sum_leaves_empty_segments_zero() {
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::from_vec(2, 1, vec![0.5, 0.5]));
    let v = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let out = tape.segment_weighted_sum(w, v, vec![1, 1], 3);
    let o = tape.value(out);
    assert_eq!(o.row(0), &[0.0, 0.0]);
    assert_eq!(o.row(1), &[2.0, 3.0]);
    assert_eq!(o.row(2), &[0.0, 0.0]);
}

proptest! {
    #[test]
    fn segment_softmax_normalizes(
        entries in prop::collection::vec((-50.0f64..50.0, 0usize..5), 1..40)
    ) {
        let (x, seg): (Vec<f64>, Vec<usize>) = entries.into_iter().unzip();
        let out = segment_softmax_values(&x, &seg);
        let mut sums = [0.0; 5];
        for (&o, &s) in out.iter().zip(&seg) {
            prop_assert!((0.0..=1.0).contains(&o));
            sums[s] += o;
        }
        for s in 0..5 {
            if seg.contains(&s) {
                prop_assert!((sums[s] - 1.0).abs() < 1e-6);
            }
        }
    }
}
