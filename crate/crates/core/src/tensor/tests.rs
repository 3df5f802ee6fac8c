use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-9
}

/// Central differences of `loss` with respect to every entry of every param.
fn numeric_grads(params: &[Tensor], loss: impl Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let mut out = Vec::new();
    for p in 0..params.len() {
        let mut g = Vec::new();
        for i in 0..params[p].len() {
            let mut plus = params.to_vec();
            plus[p].data_mut()[i] += h;
            let mut minus = params.to_vec();
            minus[p].data_mut()[i] -= h;
            g.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x);
    g.forward().unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[0.5, 0.5]);
}

#[test]
fn layernorm_of_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![3.5, 3.5, 3.5]));
    let gamma = g.input("g", Tensor::full(&[3], 1.0));
    let beta = g.input("b", Tensor::zeros(&[3]));
    let y = g.layer_norm(x, gamma, beta, 1e-12);
    g.forward().unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn identity_matmul_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[3, 5]);
    let mut g = Graph::new();
    let i = g.input("i", Tensor::identity(3));
    let xn = g.input("x", x.clone());
    let y = g.matmul(i, xn);
    g.forward().unwrap();
    assert_eq!(g.value(y).unwrap(), &x);
}

#[test]
fn matmul_shape_error_names_op_and_dims() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::zeros(&[2, 3]));
    let b = g.input("b", Tensor::zeros(&[4, 2]));
    g.matmul(a, b);
    match g.forward() {
        Err(TensorError::ShapeMismatch { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]") && detail.contains("[4, 2]"), "{detail}");
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn non_finite_output_reports_node() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::vector(vec![f64::MAX]));
    let b = g.scale(a, 10.0);
    let err = g.forward().unwrap_err();
    assert_eq!(
        err,
        TensorError::NonFinite {
            node: b.index(),
            op: "scale"
        }
    );
}

#[test]
fn backward_before_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![1.0]));
    let l = g.sum(x);
    assert_eq!(g.backward(l).unwrap_err(), TensorError::NotEvaluated);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![1.0, -2.0]));
    let sq = g.mul(x, x);
    let l = g.sum(sq);
    g.forward().unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn unused_params_get_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![1.0, 2.0]));
    g.param("unused", Tensor::vector(vec![5.0; 3]));
    let l = g.sum(x);
    g.forward().unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get("unused").unwrap().data(), &[0.0; 3]);
}

#[test]
fn cross_entropy_gradient_at_zero_logits() {
    let mut g = Graph::new();
    let z = g.param("z", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let l = g.cross_entropy(z, vec![0]);
    g.forward().unwrap();
    let analytic = g.backward(l).unwrap().get("z").unwrap().clone();

    let numeric = numeric_grads(&[Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()], |p| {
        let mut g = Graph::new();
        let z = g.input("z", p[0].clone());
        let l = g.cross_entropy(z, vec![0]);
        g.forward().unwrap();
        g.value(l).unwrap().item()
    });
    for (a, n) in analytic.data().iter().zip(&numeric[0]) {
        assert!((a - n).abs() <= 1e-6 * n.abs(), "{a} vs {n}");
    }
    assert!((analytic.data()[0] + 0.5).abs() < 1e-12);
    assert!((analytic.data()[1] - 0.5).abs() < 1e-12);
}

#[test]
fn kl_gradient_skips_teacher() {
    let mut g = Graph::new();
    let t = g.param("t", Tensor::matrix(1, 3, vec![1.0, 0.0, -1.0]).unwrap());
    let s = g.param("s", Tensor::matrix(1, 3, vec![0.0, 0.5, 0.0]).unwrap());
    let l = g.kl_div(t, s, 2.0);
    g.forward().unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get("t").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.get("s").unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn forward_is_bit_identical_across_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut g, loss, _) = composite_graph(&mut rng);
    g.forward().unwrap();
    let first = g.value(loss).unwrap().clone();
    g.forward().unwrap();
    assert_eq!(first.data()[0].to_bits(), g.value(loss).unwrap().data()[0].to_bits());
}

#[test]
fn rebinding_unknown_input_fails() {
    let mut g = Graph::new();
    g.input("x", Tensor::scalar(1.0));
    let err = g.forward_with(vec![("y".into(), Tensor::scalar(2.0))]).unwrap_err();
    assert_eq!(err, TensorError::UnknownInput("y".into()));
}

/// A small graph touching every differentiable op. Returns the graph, its
/// loss node and the param tensors in creation order.
fn composite_graph(rng: &mut ChaCha8Rng) -> (Graph, NodeId, Vec<(String, Tensor)>) {
    let params: Vec<(String, Tensor)> = vec![
        ("table".into(), random_tensor(rng, &[7, 4])),
        ("wq".into(), random_tensor(rng, &[4, 4])),
        ("wk".into(), random_tensor(rng, &[4, 4])),
        ("wv".into(), random_tensor(rng, &[4, 4])),
        ("b".into(), random_tensor(rng, &[4])),
        ("gamma".into(), random_tensor(rng, &[4])),
        ("beta".into(), random_tensor(rng, &[4])),
        ("w2".into(), random_tensor(rng, &[4, 3])),
        ("teacher".into(), random_tensor(rng, &[2, 3])),
    ];
    let ids = vec![1, 3, 3, 0, 6];
    let mut g = Graph::new();
    let n: Vec<NodeId> = params.iter().map(|(name, t)| g.param(name, t.clone())).collect();
    let x = g.embedding(n[0], ids);
    let q = g.matmul(x, n[1]);
    let k = g.matmul(x, n[2]);
    let v = g.matmul(x, n[3]);
    let segs = vec![Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
    let att = g.attention(q, k, v, segs, 2);
    let h = g.add(att, x);
    let h = g.add_row(h, n[4]);
    let h = g.layer_norm(h, n[5], n[6], 1e-5);
    let h = g.gelu(h);
    let pooled = g.gather_rows(h, vec![0, 3]);
    let pooled = g.tanh(pooled);
    let logits = g.matmul(pooled, n[7]);
    let ce = g.cross_entropy(logits, vec![2, 0]);
    let kl = g.kl_div(n[8], logits, 2.0);
    let kl = g.scale(kl, 0.5);
    let sm = g.softmax(logits);
    let smt = g.transpose(sm);
    let smr = g.reshape(smt, vec![6]);
    let smsq = g.mul(smr, smr);
    let reg = g.mean(smsq);
    let total = g.add(ce, kl);
    let reg = g.reshape(reg, vec![1]);
    let loss = g.add(total, reg);
    (g, loss, params)
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut g, loss, params) = composite_graph(&mut rng);
    g.forward().unwrap();
    let grads = g.backward(loss).unwrap();
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let numeric = numeric_grads(&tensors, |p| {
        let bindings = names.iter().cloned().zip(p.iter().cloned()).collect();
        let mut g = g.clone();
        g.forward_with(bindings).unwrap();
        g.value(loss).unwrap().item()
    });
    for (name, num) in names.iter().zip(&numeric) {
        if name == "teacher" {
            assert!(grads.get(name).unwrap().data().iter().all(|&v| v == 0.0));
            continue;
        }
        for (a, n) in grads.get(name).unwrap().data().iter().zip(num) {
            assert!(close(*a, *n, 1e-4), "{name}: {a} vs {n}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_graphs_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut g, loss, params) = composite_graph(&mut rng);
        g.forward().unwrap();
        let grads = g.backward(loss).unwrap();
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let numeric = numeric_grads(&tensors, |p| {
            let mut g = g.clone();
            g.forward_with(names.iter().cloned().zip(p.iter().cloned()).collect()).unwrap();
            g.value(loss).unwrap().item()
        });
        for (name, num) in names.iter().zip(&numeric).filter(|(n, _)| *n != "teacher") {
            for (a, n) in grads.get(name).unwrap().data().iter().zip(num) {
                prop_assert!(close(*a, *n, 1e-4), "{}: {} vs {}", name, a, n);
            }
        }
    }

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap();
        let mut g = Graph::new();
        let xn = g.input("x", x);
        let y = g.softmax(xn);
        g.forward().unwrap();
        let y = g.value(y).unwrap();
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn single_param_grads(name: &str, g: f64) -> Gradients {
    let mut graph = Graph::new();
    let p = graph.param(name, Tensor::scalar(0.0));
    let l = graph.scale(p, g);
    graph.forward().unwrap();
    graph.backward(l).unwrap()
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = Tensor::scalar(0.7);
    let mut adam = AdamState::new(AdamConfig::default()).unwrap();
    adam.step([("p", &mut p)], &single_param_grads("p", 0.0)).unwrap();
    assert_eq!(p.item(), 0.7);
    assert_eq!(adam.steps_taken(), 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = Tensor::scalar(1.0);
    let mut adam = AdamState::new(AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    })
    .unwrap();
    adam.step([("p", &mut p)], &single_param_grads("p", 1.0)).unwrap();
    // m_hat = v_hat = 1, so the step is lr / (1 + eps).
    assert!((p.item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
}

#[test]
fn adam_opposite_gradients_give_opposite_updates() {
    let mut graph = Graph::new();
    let a = graph.param("a", Tensor::scalar(0.0));
    let b = graph.param("b", Tensor::scalar(0.0));
    let nb = graph.scale(b, -1.0);
    let l = graph.add(a, nb);
    graph.forward().unwrap();
    let grads = graph.backward(l).unwrap();
    let (mut pa, mut pb) = (Tensor::scalar(0.0), Tensor::scalar(0.0));
    let mut adam = AdamState::new(AdamConfig::default()).unwrap();
    adam.step([("a", &mut pa), ("b", &mut pb)], &grads).unwrap();
    assert_eq!(pa.item(), -pb.item());
    assert!(pa.item() < 0.0);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut graph = Graph::new();
    let p = graph.param("w", Tensor::scalar(1.0));
    let l = graph.scale(p, 1.0);
    graph.forward().unwrap();
    let mut grads = graph.backward(l).unwrap();
    grads.insert("w", Tensor::scalar(f64::NAN));
    let mut w = Tensor::scalar(1.0);
    let mut adam = AdamState::new(AdamConfig::default()).unwrap();
    let err = adam.step([("w", &mut w)], &grads).unwrap_err();
    assert_eq!(err, TensorError::NonFiniteGradient("w".into()));
    assert_eq!(w.item(), 1.0);
}
