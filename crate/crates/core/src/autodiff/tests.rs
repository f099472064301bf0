use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[2.5, 2.5, 2.5]));
    let y = g.softmax_rows(x);
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn matmul_matches_hand_multiplication() {
    let a = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
    // [1*7+2*9+3*11, 1*8+2*10+3*12; 4*7+5*9+6*11, 4*8+5*10+6*12]
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 3));
    match g.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, [2, 3]);
            assert_eq!(rhs, [2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = g.constant(Tensor::zeros(3, 2));
    assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn backward_of_leaf_is_one() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(4.2));
    g.backward(x).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 1.0);
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(2, 2, vec![0.5, -1.0, 2.0, 3.0]).unwrap());
    let sq = g.hadamard(x, x).unwrap();
    let root = g.sum(sq);
    g.backward(root).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, -2.0, 4.0, 6.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(1, 3));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot([1, 3]))));
}

#[test]
fn random_five_node_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![random_tensor(&mut rng, 3, 4), random_tensor(&mut rng, 4, 2)];
    let report = finite_diff_check(
        |g, p| {
            let m = g.matmul(p[0], p[1])?;
            let t = g.tanh(m);
            let s = g.square(t);
            Ok(g.mean(s))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn quadratic_is_exact_under_central_differences() {
    let params = vec![Tensor::row(&[0.3, -0.7, 1.1])];
    let report = finite_diff_check(
        |g, p| {
            let s = g.square(p[0]);
            let s = g.scale(s, 1.5);
            Ok(g.sum(s))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn constant_function_has_zero_gradients() {
    let params = vec![Tensor::row(&[1.0, 2.0])];
    let (value, grads) = value_and_grad(
        &|g: &mut Graph, _p: &[Var]| Ok(g.constant(Tensor::scalar(3.0))),
        &params,
    )
    .unwrap();
    assert_eq!(value, 3.0);
    assert!(grads[0].data().iter().all(|&v| v == 0.0));
    let report = finite_diff_check(|g, _p| Ok(g.constant(Tensor::scalar(3.0))), &params, 1e-5)
        .unwrap();
    assert_eq!(report.max_abs_error, 0.0);
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, 4, 5);
    let b = random_tensor(&mut rng, 5, 3);
    let run = || {
        let mut g = Graph::new();
        let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
        let m = g.matmul(va, vb).unwrap();
        let s = g.softmax_rows(m);
        let l = g.log(s);
        let root = g.sum(l);
        g.backward(root).unwrap();
        (g.value(root).item(), g.grad(va).unwrap().clone())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);
}

/// Builds a scalar from the listed op applied to `p`, reduced through a fixed
/// random projection so that every output coordinate matters.
fn op_graph(op: usize, shape: (usize, usize), seed: u64) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>) {
    let (r, c) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_tensor(&mut rng, r, c);
    let b = random_tensor(&mut rng, r, c);
    let row = random_tensor(&mut rng, 1, c);
    let col = random_tensor(&mut rng, r, 1);
    let right = random_tensor(&mut rng, c, 3);
    let positive = a.map(|v| v.abs() + 0.2);
    let proj = random_tensor(&mut rng, r, c);

    let reduce = move |g: &mut Graph, y: Var| -> Result<Var> {
        let [yr, yc] = g.shape(y);
        let w = if [yr, yc] == [r, c] {
            proj.clone()
        } else {
            Tensor::new(yr, yc, (0..yr * yc).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3 + 0.1).collect())?
        };
        let w = g.constant(w);
        let h = g.hadamard(y, w)?;
        Ok(g.sum(h))
    };

    match op {
        0 => (vec![a, b], Box::new(move |g, p| { let y = g.add(p[0], p[1])?; reduce(g, y) })),
        1 => (vec![a, b], Box::new(move |g, p| { let y = g.sub(p[0], p[1])?; reduce(g, y) })),
        2 => (vec![a, b], Box::new(move |g, p| { let y = g.hadamard(p[0], p[1])?; reduce(g, y) })),
        3 => (vec![a, right], Box::new(move |g, p| { let y = g.matmul(p[0], p[1])?; reduce(g, y) })),
        4 => (vec![a, b], Box::new(move |g, p| { let y = g.concat_cols(&[p[0], p[1]])?; reduce(g, y) })),
        5 => (vec![a], Box::new(move |g, p| { let y = g.sigmoid(p[0]); reduce(g, y) })),
        6 => (vec![a], Box::new(move |g, p| { let y = g.tanh(p[0]); reduce(g, y) })),
        // Shift away from the kink so central differences stay on one side.
        7 => (vec![a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })], Box::new(move |g, p| { let y = g.relu(p[0]); reduce(g, y) })),
        8 => (vec![a], Box::new(move |g, p| { let y = g.softmax_rows(p[0]); reduce(g, y) })),
        9 => (vec![a], Box::new(move |g, p| { let y = g.exp(p[0]); reduce(g, y) })),
        10 => (vec![positive.clone()], Box::new(move |g, p| { let y = g.log(p[0]); reduce(g, y) })),
        11 => (vec![a], Box::new(move |g, p| { let y = g.square(p[0]); reduce(g, y) })),
        12 => (vec![a], Box::new(move |g, p| { let y = g.mean(p[0]); reduce(g, y) })),
        13 => (vec![a], Box::new(move |g, p| { let y = g.sum(p[0]); reduce(g, y) })),
        14 => (vec![a], Box::new(move |g, p| { let y = g.scale(p[0], -1.7); reduce(g, y) })),
        15 => (vec![a, row], Box::new(move |g, p| { let y = g.add_row(p[0], p[1])?; reduce(g, y) })),
        16 => (vec![a, row], Box::new(move |g, p| { let y = g.mul_row(p[0], p[1])?; reduce(g, y) })),
        17 => (vec![a, col], Box::new(move |g, p| { let y = g.scale_rows(p[0], p[1])?; reduce(g, y) })),
        18 => (vec![a, b], Box::new(move |g, p| { let y = g.concat_rows(&[p[0], p[1]])?; reduce(g, y) })),
        19 => (vec![a, b], Box::new(move |g, p| { let y = g.sq_dist(p[0], p[1])?; reduce(g, y) })),
        20 => (vec![positive], Box::new(move |g, p| { let y = g.xlogx(p[0]); reduce(g, y) })),
        21 => (vec![a], Box::new(move |g, p| { let s = r / 2; let y = g.slice_rows(p[0], s, r - s)?; reduce(g, y) })),
        22 => (vec![a], Box::new(move |g, p| { let y = g.column(p[0], c - 1)?; reduce(g, y) })),
        _ => (vec![a], Box::new(move |g, p| { let y = g.add_scalar(p[0], 0.25); reduce(g, y) })),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn every_op_passes_the_gradient_check(op in 0usize..24, r in 1usize..=8, c in 1usize..=8, seed in any::<u64>()) {
        let (params, f) = op_graph(op, (r, c), seed);
        let report = finite_diff_check(f, &params, 1e-5).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "op {} shape {}x{}: {:?}", op, r, c, report);
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(logits in prop::collection::vec(-30.0f64..30.0, 1..12), shift in -50.0f64..50.0) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
