#[path = "support/gradients.rs"]
mod support;

use proptest::prelude::*;
use stylealign::autodiff::{grad_check, Graph, Tensor};
use support::{run_primitives, run_transformer, PRIMITIVE_TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failed = Vec::new();
    for (name, r) in run_primitives() {
        let r = r.unwrap_or_else(|e| panic!("{name}: {e}"));
        if !r.passed {
            failed.push(format!("{name}: {:.2e}", r.max_rel_err));
        }
    }
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn transformer_nll_matches_finite_differences() {
    for (name, r) in run_transformer() {
        let r = r.unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(r.passed, "{name}: {:.2e}", r.max_rel_err);
    }
}

#[test]
fn detach_blocks_gradient() {
    // d/dx sum(x * stop(x)) = stop(x) = x, not 2x.
    let x0 = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, -0.25, 1.5])
        .unwrap()
        .with_requires_grad(true);
    let mut g = Graph::new();
    let x = g.leaf(&x0);
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), x0.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradient_on_random_shapes(
        m in 1usize..5, k in 1usize..5, n in 1usize..5,
        vals in prop::collection::vec(-2.0f64..2.0, 50),
    ) {
        let a = Tensor::new(vec![m, k], vals[..m * k].to_vec()).unwrap();
        let b = Tensor::new(vec![k, n], vals[25..25 + k * n].to_vec()).unwrap();
        let r = grad_check(
            |g: &mut Graph, x| {
                let bv = g.constant(b.clone());
                let y = g.matmul(x, bv)?;
                let t = g.gelu(y);
                Ok(g.sum(t))
            },
            &a,
            PRIMITIVE_TOL,
        )
        .unwrap();
        prop_assert!(r.passed, "rel err {:.2e}", r.max_rel_err);
    }
}
