use std::sync::Arc;

use cgenn::autodiff::{ParamStore, Tape, Tensor, Var};
use cgenn::properties::relative_error;
use proptest::prelude::*;

fn vector(tape: &mut Tape, data: &[f64]) -> Var {
    tape.constant(Tensor::vector(data.to_vec()))
}

fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let a = vector(&mut tape, &[1.0, 2.0]);
    let b = vector(&mut tape, &[3.0, 4.0]);
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), Some(0.5));
}

#[test]
fn identity_matmul() {
    let mut tape = Tape::new();
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let x = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, 7.0, -0.25]).unwrap();
    let i = tape.constant(eye);
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn backward_of_sum_and_square() {
    let mut params = ParamStore::new();
    let p = params.add("p", Tensor::vector(vec![0.5, -1.5, 2.0]));

    let mut tape = Tape::new();
    let v = params.bind(&mut tape, p);
    let loss = tape.sum(v);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(v).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let v = params.bind(&mut tape, p);
    let sq = tape.mul(v, v).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(v).unwrap().data(), &[1.0, -3.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let v = vector(&mut tape, &[1.0, 2.0]);
    assert!(tape.backward(v).is_err());
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut tape = Tape::new();
    let a = vector(&mut tape, &[1.0, 2.0, 3.0]);
    let b = vector(&mut tape, &[1.0, 2.0]);
    assert!(tape.add(a, b).is_err());
    assert!(tape.matmul(a, b).is_err());
}

/// A scalar function touching most primitive ops.
fn composite(tape: &mut Tape, x: &[f64]) -> (Var, Var) {
    let xv = tape.constant(Tensor::new(vec![2, 3], x.to_vec()).unwrap());
    let w = tape.constant(Tensor::new(vec![3, 2], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9]).unwrap());
    let bias = vector(tape, &[0.1, -0.2]);
    let h = tape.matmul(xv, w).unwrap();
    let h = tape.add(h, bias).unwrap();
    let s = tape.sigmoid(h);
    let sp = tape.softplus(h);
    let t = tape.transpose(sp).unwrap();
    let t = tape.reshape(t, &[4]).unwrap();
    let s = tape.reshape(s, &[4]).unwrap();
    let prod = tape.mul(s, t).unwrap();
    let sq = tape.powf(prod, 2.0);
    let clamped = tape.clamp_abs_min(sq, 1e-6);
    let denom = tape.add_scalar(clamped, 1.0);
    let q = tape.div(prod, denom).unwrap();
    let joined = tape.concat(&[q, s], 0).unwrap();
    let picked = tape.gather(joined, Arc::from(vec![0, 2, 5, 7, 1])).unwrap();
    let spread = tape.scatter_add(picked, Arc::from(vec![0, 1, 0, 2, 1]), 3).unwrap();
    let scaled = tape.scale(spread, 1.7);
    let m = tape.mean(scaled);
    let r = tape.relu(xv);
    let rs = tape.sum_axis(r, 0).unwrap();
    let rs = tape.sum(rs);
    let loss = tape.sub(m, rs).unwrap();
    (xv, loss)
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let x = [0.4, -1.3, 0.8, 2.1, -0.6, 0.25];
    let mut tape = Tape::new();
    let (xv, loss) = composite(&mut tape, &x);
    let g = tape.backward(loss).unwrap();
    let analytic = g.get(xv).unwrap().data().to_vec();
    let f = |p: &[f64]| {
        let mut t = Tape::new();
        let (_, l) = composite(&mut t, p);
        t.value(l).data()[0]
    };
    let numeric = central_difference(&f, &x, 1e-5);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(relative_error(*a, *n) < 1e-6, "analytic {a} vs numeric {n}");
    }
}

#[test]
fn backward_is_deterministic() {
    let x = [0.4, -1.3, 0.8, 2.1, -0.6, 0.25];
    let run = || {
        let mut tape = Tape::new();
        let (xv, loss) = composite(&mut tape, &x);
        let g = tape.backward(loss).unwrap();
        g.get(xv).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn broadcast_gradient_sums_over_leading_axes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = vector(&mut tape, &[10.0, 20.0]);
    let p = tape.mul(a, b).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(b).unwrap().data(), &[4.0, 6.0]);
    assert_eq!(g.get(a).unwrap().data(), &[10.0, 20.0, 10.0, 20.0]);
}

proptest! {
    #[test]
    fn gradients_are_linear_in_the_loss(
        x in prop::collection::vec(-3.0f64..3.0, 4),
        c1 in -2.0f64..2.0,
        c2 in -2.0f64..2.0,
    ) {
        let grad = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let v = vector(&mut tape, &x);
            let s = tape.sigmoid(v);
            let f = tape.sum(s);
            let sq = tape.mul(v, v).unwrap();
            let g = tape.mean(sq);
            let f = tape.scale(f, a);
            let g = tape.scale(g, b);
            let loss = tape.add(f, g).unwrap();
            tape.backward(loss).unwrap().get(v).unwrap().data().to_vec()
        };
        let both = grad(c1, c2);
        let first = grad(1.0, 0.0);
        let second = grad(0.0, 1.0);
        for i in 0..x.len() {
            let combined = c1 * first[i] + c2 * second[i];
            prop_assert!((both[i] - combined).abs() <= 1e-12 * (1.0 + combined.abs()));
        }
    }

    #[test]
    fn softplus_is_stable(x in -800.0f64..800.0) {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::scalar(x));
        let s = tape.softplus(v);
        let y = tape.value(s).data()[0];
        prop_assert!(y.is_finite() && y >= 0.0);
        prop_assert!(y >= x);
    }
}
