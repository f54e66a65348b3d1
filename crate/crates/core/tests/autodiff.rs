use approx::assert_relative_eq;
use mmt_core::autodiff::{grad_check, Tape, Tensor, Var};
use mmt_core::Error;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_by_hand() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
}

#[test]
fn batched_matmul() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 2, 1], &[1.0, 1.0, 2.0, 0.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 6.0]);
    let bad = tape.constant(t(&[3, 2, 1], &[0.0; 6]));
    assert!(matches!(
        tape.matmul(a, bad),
        Err(Error::Shape { op: "matmul", .. })
    ));
}

#[test]
fn uniform_cross_entropy_is_log_vocab() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::<f64>::zeros(&[3, 7]));
    let loss = tape
        .cross_entropy(logits, &[Some(0), Some(6), Some(2)])
        .unwrap();
    assert_relative_eq!(tape.value(loss).data()[0], 7f64.ln(), epsilon = 1e-12);
}

#[test]
fn cross_entropy_skips_padding_and_checks_ids() {
    let mut tape = Tape::new();
    let logits = tape.leaf(t(&[2, 2], &[1.0, 0.0, 5.0, -5.0]), true);
    let loss = tape.cross_entropy(logits, &[Some(0), None]).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(&tape.grad(logits).unwrap()[2..], &[0.0, 0.0]);
    assert!(matches!(
        tape.cross_entropy(logits, &[Some(2), None]),
        Err(Error::IdOutOfRange { .. })
    ));
    assert!(matches!(
        tape.cross_entropy(logits, &[None, None]),
        Err(Error::Empty(_))
    ));
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0f64), true);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn tanh_at_zero_has_unit_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros(&[4]), true);
    let y = tape.tanh(x);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0f64), true);
    let y = tape.scale(x, 3.0);
    tape.backward(y).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn broadcasting_is_trailing_only() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
    let bias = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let c = tape.add(a, bias).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    let col = tape.constant(Tensor::<f64>::zeros(&[2, 1]));
    assert!(matches!(
        tape.add(a, col),
        Err(Error::Shape { op: "add", .. })
    ));
}

#[test]
fn embedding_rejects_out_of_range() {
    let mut tape = Tape::new();
    let table = tape.constant(Tensor::<f64>::zeros(&[3, 2]));
    assert!(matches!(
        tape.embedding(table, &[0, 3]),
        Err(Error::IdOutOfRange { id: 3, size: 3, .. })
    ));
}

#[test]
fn transpose_and_concat_layouts() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let xt = tape.transpose(x, 0, 1).unwrap();
    assert_eq!(tape.shape(xt), &[3, 2]);
    assert_eq!(tape.value(xt).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    let c = tape.concat(&[x, x], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 6]);
    assert_eq!(
        tape.value(c).data(),
        &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 4.0, 5.0, 6.0]
    );
}

#[test]
fn dropout_eval_is_identity_and_train_scales() {
    let mut rng = mmt_core::rng::seeded(7);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1000], 1.0f64), true);
    assert_eq!(tape.dropout(x, 0.3, false, &mut rng).unwrap(), x);
    let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
    let vals = tape.value(y).data();
    let kept = vals.iter().filter(|&&v| v != 0.0).count();
    assert!(vals
        .iter()
        .all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    assert!((600..800).contains(&kept), "kept {kept}");
    assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn sum_is_exact() {
    let x = Tensor::from_f64(&[2, 3], &[0.3, -1.0, 2.0, 5.5, 0.0, 1e-3]).unwrap();
    let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn softmax_cross_entropy_composite() {
    let x = Tensor::from_f64(&[2, 4], &[0.1, -0.4, 1.2, 0.0, 2.0, 0.3, -1.0, 0.5]).unwrap();
    let err = grad_check(
        |t, x| {
            let p = t.softmax(x)?;
            t.cross_entropy(p, &[Some(2), Some(0)])
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn eval_dropout_matches_plain() {
    let x = Tensor::from_f64(&[3], &[0.2, -0.7, 1.1]).unwrap();
    let plain = |t: &mut Tape<'_, f64>, x: Var| {
        let y = t.tanh(x);
        Ok(t.sum(y))
    };
    let with_dropout = |t: &mut Tape<'_, f64>, x: Var| {
        let mut rng = mmt_core::rng::seeded(1);
        let d = t.dropout(x, 0.3, false, &mut rng)?;
        let y = t.tanh(d);
        Ok(t.sum(y))
    };
    assert_eq!(
        grad_check(plain, &x, 1e-5).unwrap(),
        grad_check(with_dropout, &x, 1e-5).unwrap()
    );
}
