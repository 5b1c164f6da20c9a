//! Checks reverse-mode gradients against central finite differences, for a
//! hand-built expression and then for every built-in suite.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use cohort_mil::diffcore::{finite_diff_grad, relative_error, Graph, Tensor};
use cohort_mil::verify::{run_suites, suites, FD_EPS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // f(x) = sum(tanh(x · xᵀ) ⊙ softmax_rows(x · xᵀ))
    let f = |g: &mut Graph, x| -> Result<_, cohort_mil::diffcore::GraphError> {
        let s = g.matmul_bt(x, x)?;
        let t = g.tanh(s)?;
        let p = g.softmax_rows(s)?;
        let m = g.mul(t, p)?;
        g.sum_all(m)
    };
    let x0 = Tensor::from_rows(&[vec![0.3, -0.7, 0.1], vec![0.9, 0.2, -0.4]]);
    let mut g = Graph::new();
    let x = g.input("x", x0.clone())?;
    let y = f(&mut g, x)?;
    let analytic = g.backward_scalar(y)?.wrt(x);
    let numeric = finite_diff_grad(
        |t| {
            let mut g = Graph::new();
            let x = g.input("x", t.clone())?;
            let y = f(&mut g, x)?;
            Ok(g.value(y).item())
        },
        &x0,
        FD_EPS,
    )?;
    println!("hand-built expression: relative error {:.2e}", relative_error(&analytic, &numeric, 1e-6));

    for r in run_suites(&suites()).iter().filter(|r| r.name.starts_with("gradients.")) {
        println!("{} {} ({:.2}s): {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.seconds, r.detail);
    }
    Ok(())
}
