use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedunlearn_core::model::{cross_entropy, Batch, FrozenHead, Matrix};
use fedunlearn_core::optim::adamw_step;
use fedunlearn_core::{Activation, AdamWConfig, AdamWState, Model, ModelSpec, ParamVector};

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).unwrap()
}

fn spec(hidden: &[usize], activation: Activation, head_frozen: bool) -> ModelSpec {
    ModelSpec {
        input_dim: 5,
        hidden_dims: hidden.to_vec(),
        num_classes: 3,
        activation,
        head_frozen,
    }
}

fn build(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Model {
    let m = Model::new(spec.clone()).unwrap();
    if !spec.head_frozen {
        return m;
    }
    let f = spec.feature_dim();
    let head = FrozenHead::new(spec.num_classes, f, uniform(rng, spec.num_classes * f, 1.0), uniform(rng, spec.num_classes, 0.5))
        .unwrap();
    m.with_head(head).unwrap()
}

fn batch(rng: &mut ChaCha8Rng, n: usize, spec: &ModelSpec) -> Batch {
    let labels = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
    Batch::new(uniform(rng, n * spec.input_dim, 1.0), labels, spec.input_dim).unwrap()
}

/// Dense layers written out as plain loops over the flat parameter layout.
fn naive_forward(spec: &ModelSpec, head: Option<&FrozenHead>, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let act = |z: f64| match spec.activation {
        Activation::Relu => z.max(0.0),
        Activation::Tanh => z.tanh(),
        Activation::Identity => z,
    };
    let mut h = x.to_vec();
    let mut off = 0;
    let dense = |h: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
        (0..out)
            .map(|o| {
                let mut z = b[o];
                for (i, hi) in h.iter().enumerate() {
                    z += w[o * h.len() + i] * hi;
                }
                z
            })
            .collect()
    };
    for &width in &spec.hidden_dims {
        let w = &theta[off..off + width * h.len()];
        off += width * h.len();
        let b = &theta[off..off + width];
        off += width;
        h = dense(&h, w, b, width).into_iter().map(act).collect();
    }
    match head {
        Some(hd) => dense(&h, hd.weights(), hd.bias(), spec.num_classes),
        None => {
            let c = spec.num_classes;
            let w = &theta[off..off + c * h.len()];
            let b = &theta[off + c * h.len()..off + c * h.len() + c];
            dense(&h, w, b, c)
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn bumped(v: &ParamVector, i: usize, h: f64) -> ParamVector {
    let mut w = v.as_slice().to_vec();
    w[i] += h;
    pv(w)
}

#[test]
fn forward_matches_layer_by_layer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for s in [
        spec(&[6, 4], Activation::Relu, false),
        spec(&[7], Activation::Tanh, true),
        spec(&[3], Activation::Identity, true),
    ] {
        let m = build(&s, &mut rng);
        let theta = pv(uniform(&mut rng, m.dim(), 0.7));
        let b = batch(&mut rng, 9, &s);
        let logits = m.forward(&theta, &b).unwrap();
        for i in 0..b.len() {
            let expected = naive_forward(&s, m.head(), theta.as_slice(), b.input(i));
            for (c, e) in expected.iter().enumerate() {
                assert!((logits.get(i, c) - e).abs() <= 1e-12, "{s:?} sample {i} class {c}");
            }
        }
    }
}

#[test]
fn standard_gradient_matches_central_differences() {
    let h = 1e-5;
    let mut checked = 0;
    for draw in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        let s = spec(&[6, 4], Activation::Tanh, false);
        let m = build(&s, &mut rng);
        let theta = pv(uniform(&mut rng, m.dim(), 0.6));
        let b = batch(&mut rng, 7, &s);
        let (_, g) = m.loss_and_grad(&theta, &b).unwrap();
        for _ in 0..10 {
            let i = rng.random_range(0..m.dim());
            let fd = (m.loss(&bumped(&theta, i, h), &b).unwrap() - m.loss(&bumped(&theta, i, -h), &b).unwrap()) / (2.0 * h);
            assert!(rel_err(g.as_slice()[i], fd) < 1e-5, "draw {draw} coord {i}: {} vs {fd}", g.as_slice()[i]);
            checked += 1;
        }
    }
    assert!(checked >= 100);
}

#[test]
fn linearized_gradient_matches_central_differences() {
    let h = 1e-5;
    for draw in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + draw);
        let s = spec(&[8], Activation::Relu, true);
        let m = build(&s, &mut rng);
        let theta_0 = pv(uniform(&mut rng, m.dim(), 0.6));
        let tau = pv(uniform(&mut rng, m.dim(), 0.2));
        let b = batch(&mut rng, 7, &s);
        let lin = |t: &ParamVector| cross_entropy(&m.linearized_forward(&theta_0, t, &b).unwrap(), b.labels()).0;
        let (loss, g) = m.linearized_loss_and_grad(&theta_0, &tau, &b).unwrap();
        assert_eq!(loss, lin(&tau));
        for _ in 0..10 {
            let i = rng.random_range(0..m.dim());
            let fd = (lin(&bumped(&tau, i, h)) - lin(&bumped(&tau, i, -h))) / (2.0 * h);
            assert!(rel_err(g.as_slice()[i], fd) < 1e-5, "draw {draw} coord {i}");
        }
    }
}

#[test]
fn jacobian_matches_central_differences_on_logits() {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = spec(&[4], Activation::Tanh, false);
    let m = build(&s, &mut rng);
    let theta = pv(uniform(&mut rng, m.dim(), 0.6));
    let b = batch(&mut rng, 3, &s);
    let j = m.jacobian_at(&theta, &b).unwrap();
    for i in 0..m.dim() {
        let up = m.forward(&bumped(&theta, i, h), &b).unwrap();
        let down = m.forward(&bumped(&theta, i, -h), &b).unwrap();
        for sample in 0..b.len() {
            for c in 0..s.num_classes {
                let fd = (up.get(sample, c) - down.get(sample, c)) / (2.0 * h);
                assert!(rel_err(j.get(sample, c, i), fd) < 1e-5, "J[{sample}][{c}][{i}]");
            }
        }
    }
}

#[test]
fn linear_map_jacobian_does_not_depend_on_theta_0() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = spec(&[4], Activation::Identity, true);
    let m = build(&s, &mut rng);
    let b = batch(&mut rng, 5, &s);
    let j1 = m.jacobian_at(&pv(uniform(&mut rng, m.dim(), 1.0)), &b).unwrap();
    let j2 = m.jacobian_at(&pv(uniform(&mut rng, m.dim(), 1.0)), &b).unwrap();
    for sample in 0..5 {
        for c in 0..3 {
            for (x, y) in j1.row(sample, c).iter().zip(j2.row(sample, c)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn linear_map_linearization_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = spec(&[4], Activation::Identity, true);
    let m = build(&s, &mut rng);
    let theta_0 = pv(uniform(&mut rng, m.dim(), 1.0));
    let tau = pv(uniform(&mut rng, m.dim(), 2.0));
    let b = batch(&mut rng, 6, &s);
    let at = theta_0.add_scaled(1.0, &tau).unwrap();
    let lin = m.linearized_forward(&theta_0, &tau, &b).unwrap();
    let full = m.forward(&at, &b).unwrap();
    for (x, y) in lin.data.iter().zip(&full.data) {
        assert!((x - y).abs() <= 1e-10);
    }
    let (_, g_lin) = m.linearized_loss_and_grad(&theta_0, &tau, &b).unwrap();
    let (_, g_std) = m.loss_and_grad(&at, &b).unwrap();
    for (x, y) in g_lin.iter().zip(g_std.iter()) {
        assert!((x - y).abs() <= 1e-10);
    }
}

#[test]
fn linearized_loss_at_zero_tau_equals_standard_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = spec(&[6], Activation::Relu, true);
    let m = build(&s, &mut rng);
    let theta_0 = pv(uniform(&mut rng, m.dim(), 1.0));
    let b = batch(&mut rng, 6, &s);
    let (l_lin, _) = m.linearized_loss_and_grad(&theta_0, &ParamVector::zeros(m.dim()), &b).unwrap();
    let (l_std, _) = m.loss_and_grad(&theta_0, &b).unwrap();
    assert!((l_lin - l_std).abs() <= 1e-12);
}

fn frobenius(a: &Matrix, b: &Matrix) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn linearization_error_is_quadratic_in_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = spec(&[6, 5], Activation::Tanh, false);
    let m = build(&s, &mut rng);
    let theta_0 = pv(uniform(&mut rng, m.dim(), 0.8));
    let b = batch(&mut rng, 6, &s);
    let dir = pv(uniform(&mut rng, m.dim(), 1.0));
    let tau = dir.scale(1e-4 / dir.norm()).unwrap();
    let err = |t: &ParamVector| {
        frobenius(
            &m.linearized_forward(&theta_0, t, &b).unwrap(),
            &m.forward(&theta_0.add_scaled(1.0, t).unwrap(), &b).unwrap(),
        )
    };
    let ratio = err(&tau) / err(&tau.scale(0.5).unwrap());
    assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn linear_map_trajectories_coincide_for_fifty_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = spec(&[4], Activation::Identity, true);
    let m = build(&s, &mut rng);
    let d = m.dim();
    let theta_0 = pv(uniform(&mut rng, d, 0.5));
    let b = batch(&mut rng, 12, &s);
    let cfg = AdamWConfig::with_lr(0.05);
    let (mut o1, mut o2) = (AdamWState::new(d, cfg).unwrap(), AdamWState::new(d, cfg).unwrap());
    let (mut t1, mut t2) = (vec![0.0; d], vec![0.0; d]);
    for step in 0..50 {
        let (_, g1) = m.loss_and_grad(&theta_0.add_scaled(1.0, &pv(t1.clone())).unwrap(), &b).unwrap();
        let (_, g2) = m.linearized_loss_and_grad(&theta_0, &pv(t2.clone()), &b).unwrap();
        o1.step(&mut t1, g1.as_slice()).unwrap();
        o2.step(&mut t2, g2.as_slice()).unwrap();
        for (x, y) in t1.iter().zip(&t2) {
            assert!((x - y).abs() <= 1e-10, "step {step}");
        }
    }
}

#[test]
fn adamw_first_step_from_zero_moments() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::with_lr(0.1)
    };
    let state = AdamWState::new(3, cfg).unwrap();
    let theta = pv(vec![1.0, -2.0, 0.5]);
    let grad = pv(vec![0.3, -4.0, 1e-9]);
    let (next, st) = adamw_step(&state, &theta, &grad).unwrap();
    assert_eq!(st.step_count(), 1);
    for i in 0..3 {
        // m̂ = g and v̂ = g² after bias correction
        let g = grad.as_slice()[i];
        let expected = theta.as_slice()[i] - 0.1 * g / (g.abs() + cfg.eps);
        assert!((next.as_slice()[i] - expected).abs() <= 1e-12, "coordinate {i}");
    }
}

proptest! {
    #[test]
    fn loss_is_invariant_to_batch_order(seed in any::<u64>(), rot in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = spec(&[5], Activation::Tanh, false);
        let m = build(&s, &mut rng);
        let theta = pv(uniform(&mut rng, m.dim(), 0.8));
        let b = batch(&mut rng, 8, &s);
        let mut order: Vec<usize> = (0..8).collect();
        order.rotate_left(rot);
        order.swap(0, 5);
        let inputs: Vec<f64> = order.iter().flat_map(|&i| b.input(i).to_vec()).collect();
        let labels: Vec<usize> = order.iter().map(|&i| b.labels()[i]).collect();
        let shuffled = Batch::new(inputs, labels, s.input_dim).unwrap();
        let (l1, g1) = m.loss_and_grad(&theta, &b).unwrap();
        let (l2, g2) = m.loss_and_grad(&theta, &shuffled).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0));
        for (x, y) in g1.iter().zip(g2.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn adamw_step_is_deterministic(
        theta in prop::collection::vec(-2.0..2.0f64, 1..20),
        seed in any::<u64>(),
        steps in 1usize..5,
    ) {
        let d = theta.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<Vec<f64>> = (0..steps).map(|_| uniform(&mut rng, d, 3.0)).collect();
        let run = || {
            let mut st = AdamWState::new(d, AdamWConfig::with_lr(0.01)).unwrap();
            let mut t = theta.clone();
            for g in &grads {
                st.step(&mut t, g).unwrap();
            }
            (t, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(sa.step_count(), steps as u64);
        prop_assert!(sa.second_moment().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(sa, sb);
    }
}
