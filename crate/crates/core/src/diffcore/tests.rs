use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Builds `f(x)` with `x` as the only input, reduces it against a fixed
/// random projection to a scalar, and compares backward with central
/// differences.
fn check_unary(
    name: &str,
    rows: usize,
    cols: usize,
    build: impl Fn(&mut Graph, NodeId) -> Result<NodeId, GraphError>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let x0 = random(&mut rng, rows, cols);
        let scalar = |x: &Tensor, proj: &mut Option<Tensor>| -> Result<(Graph, NodeId, NodeId), GraphError> {
            let mut g = Graph::new();
            let x = g.input("x", x.clone())?;
            let y = build(&mut g, x)?;
            let shape = g.value(y).shape().to_vec();
            let p = proj
                .get_or_insert_with(|| {
                    let mut r = ChaCha8Rng::seed_from_u64(99);
                    let n: usize = shape.iter().product();
                    Tensor::new(shape.clone(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
                })
                .clone();
            let pn = g.constant(p)?;
            let prod = g.mul(y, pn)?;
            let s = g.sum_all(prod)?;
            Ok((g, x, s))
        };
        let mut proj = None;
        let (g, x, s) = scalar(&x0, &mut proj).unwrap();
        let analytic = g.backward_scalar(s).unwrap().wrt(x);
        let numeric = finite_diff_grad(
            |t| {
                let (g, _, s) = scalar(t, &mut proj.clone())?;
                Ok(g.value(s).item())
            },
            &x0,
            1e-3,
        )
        .unwrap();
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn evaluate_square() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    assert_eq!(g.value(y).item(), 9.0);
    let grads = g.backward_scalar(y).unwrap();
    assert_eq!(grads.wrt(x).item(), 6.0);
}

#[test]
fn evaluate_softmax_symmetric() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::row_vector(&[0.0, 0.0])).unwrap();
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn evaluate_matmul_by_hand() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::from_rows(&[vec![1.0, 2.0]])).unwrap();
    let b = g.input("b", Tensor::from_rows(&[vec![3.0], vec![4.0]])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn replay_with_new_binding() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    g.name(y, "y").unwrap();
    let mut inputs = HashMap::new();
    inputs.insert("x".to_string(), Tensor::scalar(-5.0));
    g.evaluate(&inputs).unwrap();
    assert_eq!(g.output("y").unwrap().item(), 25.0);
    let grads = g.backward_named("y", &Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads.get("x").unwrap().item(), -10.0);
}

#[test]
fn unbound_input_is_rejected() {
    let mut g = Graph::new();
    g.input("x", Tensor::scalar(1.0)).unwrap();
    assert_eq!(
        g.evaluate(&HashMap::new()).unwrap_err(),
        GraphError::UnboundInput("x".into())
    );
}

#[test]
fn shape_error_names_node() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input("b", Tensor::zeros(&[2, 3])).unwrap();
    match g.matmul(a, b).unwrap_err() {
        GraphError::Shape { node, op, .. } => {
            assert_eq!(node, 2);
            assert_eq!(op, "matmul");
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn non_finite_output_reports_node() {
    let mut g = Graph::new();
    let a = g.input("a", Tensor::scalar(0.0)).unwrap();
    assert_eq!(
        g.log(a).unwrap_err(),
        GraphError::NonFinite { node: 1, op: "log" }
    );
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::zeros(&[1, 2])).unwrap();
    let y = g.sum_all(x).unwrap();
    assert!(matches!(
        g.backward(y, &Tensor::zeros(&[1, 2])),
        Err(GraphError::SeedShape { .. })
    ));
    assert!(matches!(
        g.backward_named("nope", &Tensor::scalar(1.0)),
        Err(GraphError::UnknownName(_))
    ));
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let v = g.input("v", random(&mut rng, 1, 5)).unwrap();
    let s = g.softmax_rows(v).unwrap();
    let y = g.sum_all(s).unwrap();
    let grad = g.backward_scalar(y).unwrap().wrt(v);
    assert!(grad.max_abs() < 1e-15);
}

#[test]
fn relu_inactive_region() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::scalar(-2.0)).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.backward_scalar(y).unwrap().wrt(x).item(), 0.0);
}

#[test]
fn unreached_leaf_gets_exact_zero() {
    let mut g = Graph::new();
    let used = g.param("used", Tensor::scalar(2.0)).unwrap();
    let unused = g.param("unused", Tensor::matrix(2, 2, vec![1.0; 4])).unwrap();
    let y = g.mul(used, used).unwrap();
    let grads = g.backward_scalar(y).unwrap();
    assert!(!grads.reached(unused));
    let z = grads.get("unused").unwrap();
    assert_eq!(z.shape(), &[2, 2]);
    assert!(z.data().iter().all(|v| v.to_bits() == 0));
}

#[test]
fn stop_grad_blocks_flow() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::scalar(2.0)).unwrap();
    let s = g.stop_grad(x).unwrap();
    let y = g.mul(s, x).unwrap();
    assert_eq!(g.backward_scalar(y).unwrap().wrt(x).item(), 2.0);
}

#[test]
fn max_ties_go_to_lowest_index() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::from_rows(&[vec![1.0], vec![1.0], vec![0.5]])).unwrap();
    let m = g.max_rows(x).unwrap();
    let grad = g.backward(m, &Tensor::scalar(1.0)).unwrap().wrt(x);
    assert_eq!(grad.data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn clip_gradient_zero_outside() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::row_vector(&[-2.0, 0.5, 3.0])).unwrap();
    let c = g.clip(x, -1.0, 1.0).unwrap();
    assert_eq!(g.value(c).data(), &[-1.0, 0.5, 1.0]);
    let s = g.sum_all(c).unwrap();
    assert_eq!(g.backward_scalar(s).unwrap().wrt(x).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.input("a", random(&mut rng, 4, 6)).unwrap();
        let b = g.input("b", random(&mut rng, 6, 3)).unwrap();
        let c = g.matmul(a, b).unwrap();
        let d = g.layer_norm_rows(c, 1e-5).unwrap();
        let e = g.softmax_rows(d).unwrap();
        g.value(e).clone()
    };
    assert!(run().bitwise_eq(&run()));
}

#[test]
fn gradcheck_matmul_and_friends() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random(&mut rng, 4, 3);
    let w2 = w.clone();
    check_unary("matmul lhs", 2, 4, move |g, x| {
        let c = g.constant(w.clone())?;
        g.matmul(x, c)
    });
    check_unary("matmul rhs", 3, 4, move |g, x| {
        let c = g.constant(w2.clone())?;
        g.matmul(c, x)
    });
    let b = random(&mut rng, 5, 4);
    check_unary("matmul_bt", 3, 4, move |g, x| {
        let c = g.constant(b.clone())?;
        let l = g.matmul_bt(x, c)?;
        let r = g.matmul_bt(c, x)?;
        let lt = g.transpose(l)?;
        g.add(lt, r)
    });
    check_unary("transpose", 3, 2, |g, x| g.transpose(x));
}

#[test]
fn gradcheck_elementwise() {
    check_unary("add/sub/mul", 3, 3, |g, x| {
        let y = g.mul(x, x)?;
        let z = g.add(y, x)?;
        g.sub(z, y)
    });
    check_unary("scale/add_scalar", 2, 3, |g, x| {
        let y = g.scale(x, -2.5)?;
        g.add_scalar(y, 0.75)
    });
    check_unary("tanh", 3, 3, |g, x| g.tanh(x));
    check_unary("sigmoid", 3, 3, |g, x| g.sigmoid(x));
    check_unary("gelu", 3, 3, |g, x| g.gelu(x));
    check_unary("exp", 3, 3, |g, x| g.exp(x));
    check_unary("log", 3, 3, |g, x| {
        let e = g.exp(x)?;
        let s = g.add_scalar(e, 0.5)?;
        g.log(s)
    });
    check_unary("relu", 3, 3, |g, x| g.relu(x));
    check_unary("clip", 4, 4, |g, x| g.clip(x, -0.5, 0.5));
}

#[test]
fn gradcheck_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let m = random(&mut rng, 3, 4);
    let (m1, m2, m3) = (m.clone(), m.clone(), m.clone());
    let col = random(&mut rng, 3, 1);
    check_unary("add_row", 1, 4, move |g, r| {
        let a = g.constant(m1.clone())?;
        let y = g.add_row(a, r)?;
        g.mul(y, y)
    });
    check_unary("mul_row", 1, 4, move |g, r| {
        let a = g.constant(m2.clone())?;
        g.mul_row(a, r)
    });
    check_unary("mul_row lhs", 3, 4, |g, a| {
        let r = g.slice_rows(a, 0, 1)?;
        g.mul_row(a, r)
    });
    check_unary("mul_col", 3, 1, move |g, c| {
        let a = g.constant(m3.clone())?;
        g.mul_col(a, c)
    });
    check_unary("mul_col lhs", 3, 4, move |g, a| {
        let c = g.constant(col.clone())?;
        g.mul_col(a, c)
    });
}

#[test]
fn gradcheck_normalizations() {
    check_unary("softmax", 3, 5, |g, x| g.softmax_rows(x));
    check_unary("log_softmax", 3, 5, |g, x| g.log_softmax_rows(x));
    check_unary("layer_norm", 3, 6, |g, x| g.layer_norm_rows(x, 1e-5));
}

#[test]
fn gradcheck_reductions() {
    check_unary("sum_all", 3, 4, |g, x| {
        let s = g.sum_all(x)?;
        g.mul(s, s)
    });
    check_unary("mean_all", 3, 4, |g, x| {
        let s = g.mean_all(x)?;
        g.mul(s, s)
    });
    check_unary("mean_rows", 4, 3, |g, x| g.mean_rows(x));
    check_unary("max_rows", 5, 3, |g, x| g.max_rows(x));
    check_unary("sum_cols", 4, 3, |g, x| g.sum_cols(x));
    check_unary("attn_pool", 4, 3, |g, x| {
        let w = g.slice_cols(x, 0, 1)?;
        g.attn_pool(w, x)
    });
}

#[test]
fn gradcheck_structural() {
    check_unary("concat_rows", 2, 3, |g, x| {
        let y = g.tanh(x)?;
        g.concat_rows(&[x, y, x])
    });
    check_unary("concat_cols", 2, 3, |g, x| {
        let y = g.exp(x)?;
        g.concat_cols(&[y, x])
    });
    check_unary("slice_rows", 4, 3, |g, x| g.slice_rows(x, 1, 3));
    check_unary("slice_cols", 3, 4, |g, x| g.slice_cols(x, 1, 4));
    check_unary("gather_rows", 3, 2, |g, x| g.gather_rows(x, vec![2, 0, 2, 1]));
}
