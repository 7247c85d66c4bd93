use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{numeric_gradient, relative_error};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>())
}

/// Checks `d loss / d x` where `build` maps a constant-input var to a scalar.
fn check_unary_graph(
    x: &Tensor<f64>,
    build: impl Fn(&Tape<f64>, Var) -> Var,
    tol: f64,
) {
    let tape = Tape::new();
    let xv = tape.param("x", x.clone()).unwrap();
    let loss = build(&tape, xv);
    let analytic = tape.backward(loss).unwrap().wrt(xv);
    let numeric = numeric_gradient(
        |p| {
            let tape = Tape::new();
            let v = tape.constant(p.clone());
            let l = build(&tape, v);
            tape.item(l)
        },
        x,
        1e-5,
    );
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let err = relative_error(*a, *n, 1e-6);
        assert!(err < tol, "analytic {a} vs numeric {n} (rel {err})");
    }
}

#[test]
fn matmul_identity_and_hand_product() {
    let tape = Tape::<f64>::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let ib = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(ib), tape.value(b));

    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let y = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let xy = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(xy).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let tape = Tape::new();
    let av = tape.param("a", a.clone()).unwrap();
    let bv = tape.param("b", b.clone()).unwrap();
    let p = tape.matmul(av, bv).unwrap();
    // weight the outputs so the loss is not symmetric in them
    let w = tape.constant(t(&[3, 2], &[1.0, -2.0, 0.5, 3.0, -1.5, 2.5]));
    let loss = tape.sum(tape.mul(p, w).unwrap(), None).unwrap();
    let grads = tape.backward(loss).unwrap();

    let f = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let tape = Tape::new();
        let p = tape
            .matmul(tape.constant(a.clone()), tape.constant(b.clone()))
            .unwrap();
        let w = tape.constant(t(&[3, 2], &[1.0, -2.0, 0.5, 3.0, -1.5, 2.5]));
        tape.item(tape.sum(tape.mul(p, w).unwrap(), None).unwrap())
    };
    let na = numeric_gradient(|x| f(x, &b), &a, 1e-5);
    let nb = numeric_gradient(|x| f(&a, x), &b, 1e-5);
    let worst = grads
        .wrt(av)
        .data()
        .iter()
        .zip(na.data())
        .chain(grads.wrt(bv).data().iter().zip(nb.data()))
        .map(|(x, y)| relative_error(*x, *y, 1e-8))
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "max relative error {worst}");
}

#[test]
fn elementwise_values() {
    let tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::scalar(0.0));
    assert_eq!(tape.item(tape.tanh(z).unwrap()), 0.0);
    let neg = tape.constant(Tensor::scalar(-3.5));
    let pos = tape.constant(Tensor::scalar(2.0));
    assert_eq!(tape.item(tape.relu(neg).unwrap()), 0.0);
    assert_eq!(tape.item(tape.relu(pos).unwrap()), 2.0);
}

#[test]
fn tanh_derivative_at_point_seven() {
    let tape = Tape::<f64>::new();
    let x = tape.param("x", Tensor::scalar(0.7)).unwrap();
    let y = tape.tanh(x).unwrap();
    let g = tape.backward(y).unwrap().wrt(x).item();
    let h = 1e-5;
    let fd = ((0.7f64 + h).tanh() - (0.7f64 - h).tanh()) / (2.0 * h);
    assert!((g - fd).abs() < 1e-8, "{g} vs {fd}");
}

#[test]
fn broadcasting_accepts_scalars_and_row_vectors_only() {
    let tape = Tape::<f64>::new();
    let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let row = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
    let s = tape.constant(Tensor::scalar(1.0));
    let col = tape.constant(t(&[2], &[1.0, 2.0]));
    let r = tape.add(m, row).unwrap();
    assert_eq!(tape.value(r).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let r = tape.sub(s, m).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, -1.0, -2.0, -3.0, -4.0, -5.0]);
    assert!(matches!(
        tape.add(m, col),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn strict_mode_flags_log_of_negative() {
    let tape = Tape::<f64>::strict();
    let x = tape.constant(Tensor::scalar(-1.0));
    assert!(matches!(
        tape.log(x),
        Err(TensorError::NonFinite { op: "log" })
    ));
    let lax = Tape::<f64>::new();
    let x = lax.constant(Tensor::scalar(-1.0));
    assert!(lax.item(lax.log(x).unwrap()).is_nan());
}

#[test]
fn reductions() {
    let tape = Tape::<f64>::new();
    let v = tape.param("v", t(&[3], &[2.0, 4.0, 6.0])).unwrap();
    let m = tape.mean(v, None).unwrap();
    assert_eq!(tape.item(m), 4.0);
    let zeros = tape.constant(Tensor::zeros(vec![4]));
    assert_eq!(tape.item(tape.sum(zeros, None).unwrap()), 0.0);
    let g = tape.backward(m).unwrap().wrt(v);
    assert!(g.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

    let tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    assert_eq!(tape.value(tape.sum(a, Some(0)).unwrap()).data(), &[5.0, 7.0, 9.0]);
    assert_eq!(tape.value(tape.mean(a, Some(1)).unwrap()).data(), &[2.0, 5.0]);
    assert!(matches!(
        tape.sum(a, Some(2)),
        Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })
    ));
}

#[test]
fn concat_shapes_and_errors() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::full(vec![2, 5], 1.0));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), vec![2, 8]);
    let single = tape.concat(&[b], 1).unwrap();
    assert_eq!(tape.value(single), tape.value(b));
    let odd = tape.constant(Tensor::zeros(vec![3, 5]));
    assert!(tape.concat(&[a, odd], 1).is_err());
}

#[test]
fn concat_then_slice_routes_gradient_to_sliced_source_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 2], &mut rng);
    let tape = Tape::new();
    let av = tape.param("a", a.clone()).unwrap();
    let bv = tape.param("b", b.clone()).unwrap();
    let c = tape.concat(&[av, bv], 1).unwrap();
    let s = tape.slice_cols(c, 3, 5).unwrap();
    let loss = tape.sum(tape.square(s).unwrap(), None).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.wrt(av).data().iter().all(|&x| x == 0.0));
    let numeric = numeric_gradient(
        |x| x.data().iter().map(|v| v * v).sum::<f64>(),
        &b,
        1e-5,
    );
    for (x, y) in grads.wrt(bv).data().iter().zip(numeric.data()) {
        assert!(relative_error(*x, *y, 1e-8) < 1e-6);
    }
}

#[test]
fn slice_rows_contract() {
    let data: Vec<f64> = (0..10).map(f64::from).collect();
    let tape = Tape::new();
    let x = tape.param("x", t(&[5, 2], &data)).unwrap();
    let s = tape.slice_rows(x, 3, 5).unwrap();
    assert_eq!(tape.value(s).data(), &data[6..10]);
    let whole = tape.slice_rows(x, 0, 5).unwrap();
    assert_eq!(tape.value(whole), tape.value(x));
    assert!(matches!(
        tape.slice_rows(x, 3, 6),
        Err(TensorError::RangeOutOfBounds { .. })
    ));
    assert!(tape.slice_rows(x, 3, 3).is_err());

    let loss = tape.sum(s, None).unwrap();
    let g = tape.backward(loss).unwrap().wrt(x);
    assert!(g.data()[..6].iter().all(|&v| v == 0.0));
    assert!(g.data()[6..].iter().all(|&v| v == 1.0));
}

#[test]
fn backward_basic_contracts() {
    let tape = Tape::<f64>::new();
    let w = tape.param("w", t(&[3], &[0.5, -1.0, 2.0])).unwrap();
    let unused = tape.param("unused", t(&[2], &[1.0, 1.0])).unwrap();
    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let loss = tape.sum(tape.mul(w, x).unwrap(), None).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).data(), &[1.0, 2.0, 3.0]);
    assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
    // every trainable leaf gets a gradient of its own shape
    let named = grads.named();
    assert_eq!(named["unused"].shape(), &[2]);
    assert_eq!(named["w"].shape(), &[3]);

    assert!(matches!(tape.backward(loss), Err(TensorError::BackwardTwice)));
    tape.reset_backward();
    assert!(tape.backward(loss).is_ok());
}

#[test]
fn backward_rejects_non_scalar_and_foreign_vars() {
    let tape = Tape::<f64>::new();
    let v = tape.param("v", t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(
        tape.backward(v),
        Err(TensorError::NonScalarLoss { .. })
    ));
    let other = Tape::<f64>::new();
    let o = other.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(o), Err(TensorError::ForeignVar)));
    assert!(matches!(tape.tanh(o), Err(TensorError::ForeignVar)));
}

#[test]
fn backward_visits_each_node_once_in_topological_order() {
    let tape = Tape::<f64>::new();
    let x = tape.param("x", t(&[2, 2], &[0.1, 0.2, 0.3, 0.4])).unwrap();
    let y = tape.tanh(x).unwrap();
    let z = tape.mul(y, x).unwrap();
    let q = tape.concat(&[y, z], 0).unwrap();
    let loss = tape.mean(q, None).unwrap();
    for idx in 0..tape.len() {
        let v = if idx == 0 { x } else { [x, y, z, q, loss][idx] };
        for p in tape.parents(v) {
            assert!(p.index() < v.index());
        }
    }
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.visited(), tape.len());
}

#[test]
fn duplicate_param_names_rejected() {
    let tape = Tape::<f64>::new();
    tape.param("w", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(
        tape.param("w", Tensor::scalar(2.0)),
        Err(TensorError::DuplicateParam(_))
    ));
}

#[test]
fn transpose_reshape_expand_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[3, 4], &mut rng);
    check_unary_graph(
        &x,
        |tape, v| {
            let tr = tape.transpose(v).unwrap();
            let r = tape.reshape(tr, &[2, 6]).unwrap();
            let rows = tape.sum(r, Some(1)).unwrap();
            let e = tape.expand_cols(rows, 3).unwrap();
            let w = tape.constant(Tensor::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap());
            tape.sum(tape.mul(tape.square(e).unwrap(), w).unwrap(), None).unwrap()
        },
        1e-5,
    );
}

fn unary_ops() -> Vec<UnaryOp<f64>> {
    vec![
        UnaryOp::Neg,
        UnaryOp::Tanh,
        UnaryOp::Relu,
        UnaryOp::Exp,
        UnaryOp::Square,
        UnaryOp::Sigmoid,
        UnaryOp::Scale(-1.7),
        UnaryOp::Offset(0.3),
        UnaryOp::Clamp(-1.0, 1.0),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Every primitive agrees with central differences on inputs in [-2, 2].
    #[test]
    fn primitive_gradients_match_finite_differences(
        xs in prop::collection::vec(-2.0f64..2.0, 6),
        ys in prop::collection::vec(-2.0f64..2.0, 6),
        which in 0usize..13,
    ) {
        // keep away from the kinks of relu and clamp
        let xs: Vec<f64> = xs.iter().map(|v| if v.abs() < 1e-3 { 0.5 } else if (v.abs() - 1.0).abs() < 1e-3 { 0.5 } else { *v }).collect();
        let x = t(&[2, 3], &xs);
        let y = t(&[2, 3], &ys);
        let ops = unary_ops();
        let build = move |tape: &Tape<f64>, v: Var| -> Var {
            let other = tape.constant(y.clone());
            let r = match which {
                i if i < 9 => tape.unary(ops[i], v).unwrap(),
                9 => tape.mul(v, other).unwrap(),
                10 => tape.div(other, tape.offset(tape.square(v).unwrap(), 0.5).unwrap()).unwrap(),
                11 => tape.log(tape.offset(tape.square(v).unwrap(), 0.1).unwrap()).unwrap(),
                _ => tape.sqrt(tape.offset(tape.square(v).unwrap(), 0.1).unwrap()).unwrap(),
            };
            let w = tape.constant(Tensor::from_f64(vec![2, 3], &[1.0, -0.5, 2.0, 0.7, -1.3, 0.9]).unwrap());
            tape.sum(tape.mul(r, w).unwrap(), None).unwrap()
        };
        check_unary_graph(&x, build, 1e-5);
    }

    #[test]
    fn recip_gradient(xs in prop::collection::vec(0.2f64..2.0, 4)) {
        let x = t(&[4], &xs);
        check_unary_graph(&x, |tape, v| tape.sum(tape.recip(v).unwrap(), None).unwrap(), 1e-5);
    }
}
