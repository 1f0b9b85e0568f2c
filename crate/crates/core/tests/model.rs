mod common;

use common::{max_abs_diff, random_labels, random_matrix};
use disc_core::linalg::Matrix;
use disc_core::model::{Classifier, Encoder, EncoderSpec, HeadKind, LossKind, ModelSpec};
use disc_core::rng;
use rand::Rng;

const STEP: f64 = 1e-6;

fn random_model<R: Rng>(rng: &mut R, d_in: usize) -> Classifier {
    let loss = if rng.random_bool(0.5) { LossKind::Squared } else { LossKind::CrossEntropy };
    let head = if rng.random_bool(0.5) { HeadKind::Single } else { HeadKind::PerClass };
    let encoder = if rng.random_bool(0.5) { EncoderSpec::Identity } else { EncoderSpec::Mlp { hidden: 1 + rng::below(rng, 5) } };
    let spec = ModelSpec { encoder, head, loss, bias: rng.random_bool(0.5) };
    let mut m = Classifier::init(&spec, d_in, rng).unwrap();
    // Move away from the zero initialisation so every term is exercised.
    let p: Vec<f64> = m.params().iter().map(|_| 0.5 * rng::normal(rng)).collect();
    m.set_params(&p).unwrap();
    m
}

fn tolerance(m: &Classifier) -> f64 {
    match m.loss {
        LossKind::Squared => 1e-6,
        LossKind::CrossEntropy => 1e-5,
    }
}

/// Central differences of the batch loss over every parameter.
fn fd_full(m: &Classifier, x: &Matrix, y: &[i32], w: Option<&[f64]>) -> Vec<f64> {
    let p0 = m.params();
    let mut out = Vec::with_capacity(p0.len());
    let mut probe = m.clone();
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] += STEP;
        probe.set_params(&p).unwrap();
        let up = probe.batch_loss(x, y, w).unwrap();
        p[i] -= 2.0 * STEP;
        probe.set_params(&p).unwrap();
        let down = probe.batch_loss(x, y, w).unwrap();
        out.push((up - down) / (2.0 * STEP));
    }
    out
}

/// Central differences over the head weights only.
fn fd_head(m: &Classifier, x: &Matrix, y: &[i32]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..m.head.data().len() {
        let mut up = m.clone();
        up.head.data_mut()[i] += STEP;
        let mut down = m.clone();
        down.head.data_mut()[i] -= STEP;
        out.push((up.batch_loss(x, y, None).unwrap() - down.batch_loss(x, y, None).unwrap()) / (2.0 * STEP));
    }
    out
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng::stream(2024, "gradcheck");
    for case in 0..100 {
        let d_in = 1 + rng::below(&mut r, 6);
        let n = 1 + rng::below(&mut r, 12);
        let m = random_model(&mut r, d_in);
        let x = random_matrix(n, d_in, &mut r);
        let y = random_labels(n, &mut r);
        let tol = tolerance(&m);

        let head = m.last_layer_gradient(&x, &y, None).unwrap();
        let err = max_abs_diff(head.data(), &fd_head(&m, &x, &y));
        assert!(err < tol, "case {case}: head gradient off by {err}");

        let w: Option<Vec<f64>> =
            if r.random_bool(0.5) { Some((0..n).map(|_| rng::uniform(&mut r) + 0.1).collect()) } else { None };
        let full = m.gradient(&x, &y, w.as_deref()).unwrap().flatten();
        let err = max_abs_diff(&full, &fd_full(&m, &x, &y, w.as_deref()));
        assert!(err < tol, "case {case}: full gradient off by {err}");
    }
}

#[test]
fn encoder_is_constant_for_the_head_gradient() {
    let mut r = rng::stream(5, "mlp");
    let spec = ModelSpec { encoder: EncoderSpec::Mlp { hidden: 4 }, head: HeadKind::PerClass, loss: LossKind::CrossEntropy, bias: true };
    let m = Classifier::init(&spec, 3, &mut r).unwrap();
    let x = random_matrix(9, 3, &mut r);
    let y = random_labels(9, &mut r);
    let full = m.gradient(&x, &y, None).unwrap();
    let head = m.last_layer_gradient(&x, &y, None).unwrap();
    assert!(full.head.max_abs_diff(&head) < 1e-14);
    assert!(full.encoder.is_some());
}

#[test]
fn residual_free_model_has_zero_gradient() {
    // y = x_0 exactly, weights select coordinate 0.
    let x = Matrix::from_rows(&[vec![1.0, 0.3], vec![-1.0, 2.0], vec![1.0, -0.7]]).unwrap();
    let y = [1, -1, 1];
    let mut m = Classifier::new(Encoder::Identity { dim: 2 }, 1, LossKind::Squared, false).unwrap();
    m.head = Matrix::row_vector(&[1.0, 0.0]);
    assert_eq!(m.batch_loss(&x, &y, None).unwrap(), 0.0);
    assert!(m.last_layer_gradient(&x, &y, None).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn uniform_weights_equal_unweighted_loss() {
    let mut r = rng::stream(1, "w");
    let m = random_model(&mut r, 4);
    let x = random_matrix(10, 4, &mut r);
    let y = random_labels(10, &mut r);
    let a = m.batch_loss(&x, &y, None).unwrap();
    let b = m.batch_loss(&x, &y, Some(&[3.0; 10])).unwrap();
    assert!((a - b).abs() < 1e-14);
}

#[test]
fn full_batch_descent_decreases_squared_loss() {
    let (_, _, train, _) = common::planted(4, 2, 400, 2, 9);
    let x = &train.features;
    let n = x.rows() as f64;
    let mut second = x.gram();
    second.scale(1.0 / n);
    let lmax = *second.symmetric_eigenvalues().unwrap().last().unwrap();
    let lr = 0.9 / lmax;
    let mut m = Classifier::new(Encoder::Identity { dim: x.cols() }, 1, LossKind::Squared, false).unwrap();
    let mut prev = m.batch_loss(x, &train.labels, None).unwrap();
    for _ in 0..200 {
        let g = m.gradient(x, &train.labels, None).unwrap();
        m = m.sgd_step(&g, lr, 0.0).unwrap();
        let loss = m.batch_loss(x, &train.labels, None).unwrap();
        assert!(loss <= prev + 1e-15, "loss rose from {prev} to {loss}");
        prev = loss;
    }
}

#[test]
fn non_finite_gradient_is_rejected() {
    let m = Classifier::new(Encoder::Identity { dim: 2 }, 1, LossKind::Squared, false).unwrap();
    let x = Matrix::row_vector(&[f64::NAN, 1.0]);
    let g = m.gradient(&x, &[1], None).unwrap();
    assert!(m.sgd_step(&g, 0.1, 0.0).is_err());
}

#[test]
fn decay_only_step() {
    let mut r = rng::stream(3, "decay");
    let m = random_model(&mut r, 3);
    let x = random_matrix(4, 3, &mut r);
    let mut g = m.gradient(&x, &random_labels(4, &mut r), None).unwrap();
    g.head.scale(0.0);
    if let Some(b) = g.head_bias.as_mut() {
        b.iter_mut().for_each(|v| *v = 0.0);
    }
    if let Some((w, b)) = g.encoder.as_mut() {
        w.scale(0.0);
        b.iter_mut().for_each(|v| *v = 0.0);
    }
    let stepped = m.sgd_step(&g, 0.1, 0.3).unwrap();
    let expect: Vec<f64> = m.params().iter().map(|p| p * (1.0 - 0.1 * 0.3)).collect();
    assert!(max_abs_diff(&stepped.params(), &expect) < 1e-15);
}
