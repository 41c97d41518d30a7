use std::sync::Arc;

use cgenn::algebra::{Blade, DiagonalMetric, Multivector, ProductStructure};
use cgenn::autodiff::{Tape, Tensor, Var};
use cgenn::layers::{self, AlgebraContext, MultivectorBatch};
use cgenn::properties::relative_error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn structure(n: usize) -> Arc<ProductStructure> {
    Arc::new(ProductStructure::new(n).unwrap())
}

fn context(tape: &mut Tape, n: usize) -> AlgebraContext {
    AlgebraContext::constant(tape, structure(n), &DiagonalMetric::euclidean(n).unwrap()).unwrap()
}

fn batch_of(tape: &mut Tape, items: &[Multivector]) -> Var {
    let b = MultivectorBatch::from_multivectors(1, items.len(), items).unwrap();
    tape.constant(b.into_coeffs())
}

fn read(tape: &Tape, v: Var, n: usize) -> MultivectorBatch {
    MultivectorBatch::new(n, tape.value(v).clone()).unwrap()
}

fn grade_tensor(values: &[f64]) -> Tensor {
    Tensor::vector(values.to_vec())
}

fn close(a: &Multivector, b: &Multivector, tol: f64) -> bool {
    a.coeffs().iter().zip(b.coeffs()).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn embed_examples() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(vec![1, 1], vec![2.5]).unwrap());
    let p = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let v = tape.constant(Tensor::new(vec![1, 1], vec![0.4]).unwrap());
    let x = layers::embed(&mut tape, 3, Some(p), Some(s), Some(v)).unwrap();
    let out = read(&tape, x, 3);
    assert_eq!(out.get(0, 0).coeffs(), &[0.0, 1.0, 2.0, 0.0, 3.0, 0.0, 0.0, 0.0]);
    assert_eq!(out.get(0, 1).coeffs(), &[2.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(out.get(0, 2).coeffs(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.4]);
}

#[test]
fn linear_examples() {
    let n = 2;
    let mut tape = Tape::new();
    let ctx = context(&mut tape, n);
    let a = Multivector::from_coeffs(n, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let b = Multivector::from_coeffs(n, vec![0.25, 1.0, 1.0, -1.0]).unwrap();
    let x = batch_of(&mut tape, &[a.clone(), b.clone()]);
    let ones = tape.constant(Tensor::filled(&[1, 2, n + 1], 1.0));
    let y = layers::linear_layer(&mut tape, &ctx, x, ones).unwrap();
    assert_eq!(read(&tape, y, n).get(0, 0), &a + &b);

    let mut mask = Tensor::filled(&[1, 2, n + 1], 1.0);
    for c in 0..2 {
        mask.data_mut()[c * (n + 1) + 1] = 0.0;
    }
    let mask = tape.constant(mask);
    let y = layers::linear_layer(&mut tape, &ctx, x, mask).unwrap();
    assert_eq!(read(&tape, y, n).get(0, 0).coeffs(), &[1.25, 0.0, 0.0, 2.0]);
}

#[test]
fn geometric_product_examples() {
    let n = 2;
    let g = n + 1;
    let mut tape = Tape::new();
    let ctx = context(&mut tape, n);
    let e1 = Multivector::blade(n, Blade::basis(0), 1.0);
    let e2 = Multivector::blade(n, Blade::basis(1), 1.0);
    let x1 = batch_of(&mut tape, std::slice::from_ref(&e1));
    let x2 = batch_of(&mut tape, std::slice::from_ref(&e2));
    let path = |tape: &mut Tape, l: usize, r: usize, o: usize| {
        let mut w = Tensor::zeros(&[1, g, g, g]);
        w.data_mut()[(l * g + r) * g + o] = 1.0;
        tape.constant(w)
    };
    let w = path(&mut tape, 1, 1, 2);
    let y = layers::geometric_product_layer(&mut tape, &ctx, x1, x2, w).unwrap();
    assert_eq!(read(&tape, y, n).get(0, 0), Multivector::blade(n, Blade::from_mask(3), 1.0));

    let w = path(&mut tape, 1, 1, 0);
    let y = layers::geometric_product_layer(&mut tape, &ctx, x1, x1, w).unwrap();
    assert_eq!(read(&tape, y, n).get(0, 0), Multivector::scalar(n, 1.0));
}

#[test]
fn norm_examples() {
    let n = 2;
    let mut tape = Tape::new();
    let ctx = context(&mut tape, n);
    let x = Multivector::from_coeffs(n, vec![0.3, 1.2, 1.6, -0.7]).unwrap();
    let xv = batch_of(&mut tape, std::slice::from_ref(&x));

    let low = tape.constant(grade_tensor(&[-30.0; 3]));
    let y = layers::norm_layer(&mut tape, &ctx, xv, low).unwrap();
    assert!(close(&read(&tape, y, n).get(0, 0), &x, 1e-9));

    // grade 1 has Q̄ = 1.2² + 1.6² = 4, so it is divided by 4 when saturated;
    // grade 2 has Q̄ = 0.49 and grade 0 has Q̄ = 0.09
    let high = tape.constant(grade_tensor(&[30.0; 3]));
    let y = layers::norm_layer(&mut tape, &ctx, xv, high).unwrap();
    let out = read(&tape, y, n).get(0, 0);
    assert!((out.coeffs()[1] - 0.3).abs() < 1e-9 && (out.coeffs()[2] - 0.4).abs() < 1e-9);

    let unit = Multivector::from_coeffs(n, vec![1.0, 0.6, 0.8, 1.0]).unwrap();
    let uv = batch_of(&mut tape, std::slice::from_ref(&unit));
    let a = tape.constant(grade_tensor(&[0.7, -1.3, 4.0]));
    let y = layers::norm_layer(&mut tape, &ctx, uv, a).unwrap();
    assert!(close(&read(&tape, y, n).get(0, 0), &unit, 1e-15));
}

#[test]
fn nonlinear_examples() {
    let n = 2;
    let mut tape = Tape::new();
    let ctx = context(&mut tape, n);
    let x = Multivector::from_coeffs(n, vec![0.3, 1.2, 1.6, -0.7]).unwrap();
    let xv = batch_of(&mut tape, std::slice::from_ref(&x));
    let zero = tape.constant(grade_tensor(&[0.0; 3]));
    let y = layers::nonlinear_layer(&mut tape, &ctx, xv, zero, zero).unwrap();
    assert_eq!(read(&tape, y, n).get(0, 0), x.scale(0.5));

    let bias = tape.constant(grade_tensor(&[30.0; 3]));
    let y = layers::nonlinear_layer(&mut tape, &ctx, xv, zero, bias).unwrap();
    assert!(close(&read(&tape, y, n).get(0, 0), &x, 1e-12));

    let origin = batch_of(&mut tape, &[Multivector::zeros(n)]);
    let u = tape.constant(grade_tensor(&[1.0, -2.0, 0.5]));
    let y = layers::nonlinear_layer(&mut tape, &ctx, origin, u, bias).unwrap();
    assert_eq!(read(&tape, y, n).get(0, 0), Multivector::zeros(n));
}

/// One block (linear, product, norm, gate, residual) under a learnable
/// diagonal metric; returns `sum(probe * out)`.
fn block(tape: &mut Tape, inputs: &[Var], structure: &Arc<ProductStructure>, probe: &Tensor) -> Var {
    let [x, lambda, w_lin, w_right, w_gp, a, u, b] = inputs.try_into().unwrap();
    let ctx = AlgebraContext::new(tape, structure.clone(), lambda).unwrap();
    let h = layers::linear_layer(tape, &ctx, x, w_lin).unwrap();
    let r = layers::linear_layer(tape, &ctx, h, w_right).unwrap();
    let g = layers::geometric_product_layer(tape, &ctx, h, r, w_gp).unwrap();
    let g = layers::norm_layer(tape, &ctx, g, a).unwrap();
    let g = layers::nonlinear_layer(tape, &ctx, g, u, b).unwrap();
    let out = tape.add(h, g).unwrap();
    let p = tape.constant(probe.clone());
    let weighted = tape.mul(out, p).unwrap();
    tape.sum(weighted)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn block_gradients_match_central_differences() {
    let n = 3;
    let (g, size, batch, cin, hidden) = (n + 1, 1 << n, 2, 2, 3);
    let st = structure(n);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let lambda = Tensor::vector((0..n).map(|_| rng.random_range(0.5..1.5)).collect());
        let inputs = vec![
            random(&mut rng, &[batch, cin, size], 1.0),
            lambda,
            random(&mut rng, &[hidden, cin, g], 0.7),
            random(&mut rng, &[hidden, hidden, g], 0.6),
            random(&mut rng, &[hidden, g, g, g], 0.3),
            random(&mut rng, &[g], 1.0),
            random(&mut rng, &[g], 1.0),
            random(&mut rng, &[g], 1.0),
        ];
        let probe = random(&mut rng, &[batch, hidden, size], 1.0);
        let eval = |ins: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
            let loss = block(&mut tape, &vars, &st, &probe);
            tape.value(loss).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = block(&mut tape, &vars, &st, &probe);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).unwrap();
            for i in 0..inputs[k].len() {
                let mut up = inputs.clone();
                let mut down = inputs.clone();
                up[k].data_mut()[i] += h;
                down[k].data_mut()[i] -= h;
                let numeric = (eval(&up) - eval(&down)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(relative_error(a, numeric) < 1e-4, "input {k}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
    }
}

#[test]
fn shape_errors_are_typed() {
    let n = 2;
    let mut tape = Tape::new();
    let ctx = context(&mut tape, n);
    let x = batch_of(&mut tape, &[Multivector::zeros(n)]);
    let bad = tape.constant(Tensor::zeros(&[1, 2, n + 1]));
    assert!(layers::linear_layer(&mut tape, &ctx, x, bad).is_err());
    let short = tape.constant(Tensor::zeros(&[n]));
    assert!(layers::norm_layer(&mut tape, &ctx, x, short).is_err());
}
