//! Shared finite-difference cases for every graph primitive and for the
//! full transformer NLL.

use rand::Rng;
use stylealign::autodiff::{grad_check, AutodiffError, GradCheckReport, Graph, Tensor, Var};
use stylealign::policy::{LayerSelection, ModelConfig, PolicyModel};
use stylealign::seed;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

type Op = Box<dyn Fn(&mut Graph, Var) -> Result<Var, AutodiffError>>;

pub struct Case {
    pub name: &'static str,
    pub point: Tensor,
    pub f: Op,
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, label: &str) -> Tensor {
    let mut rng = seed::rng(11, label);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts an arbitrary output with fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn reduce(g: &mut Graph, y: Var, label: &str) -> Result<Var, AutodiffError> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_t(&shape, -1.0, 1.0, label));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

macro_rules! case {
    ($name:expr, $point:expr, |$g:ident, $x:ident| $body:expr) => {
        Case {
            name: $name,
            point: $point,
            f: Box::new(move |$g: &mut Graph, $x: Var| {
                let y: Var = $body?;
                reduce($g, y, $name)
            }),
        }
    };
}

pub fn primitive_cases() -> Vec<Case> {
    let m = |l: &str| rand_t(&[3, 4], -1.5, 1.5, l);
    let other = |g: &mut Graph, shape: &[usize], l: &str| g.constant(rand_t(shape, -1.5, 1.5, l));
    vec![
        case!("matmul (left)", m("mm"), |g, x| {
            let b = other(g, &[4, 5], "mm-b");
            g.matmul(x, b)
        }),
        case!("matmul (right)", rand_t(&[4, 5], -1.5, 1.5, "mm2"), |g, x| {
            let a = other(g, &[3, 4], "mm2-a");
            g.matmul(a, x)
        }),
        case!("transpose", m("tr"), |g, x| g.transpose(x)),
        case!("add", m("add"), |g, x| {
            let b = other(g, &[3, 4], "add-b");
            g.add(x, b)
        }),
        case!("add (bias)", rand_t(&[4], -1.0, 1.0, "bias"), |g, x| {
            let a = other(g, &[3, 4], "bias-a");
            g.add(a, x)
        }),
        case!("sub", m("sub"), |g, x| {
            let b = other(g, &[3, 4], "sub-b");
            g.sub(b, x)
        }),
        case!("mul", m("mul"), |g, x| {
            let b = other(g, &[3, 4], "mul-b");
            g.mul(x, b)
        }),
        case!("mul (self)", m("sq"), |g, x| g.mul(x, x)),
        {
            let point = m("min");
            // Comparator sits 0.3 away from every coordinate, clear of the kink.
            let mut other_side = point.clone();
            for (k, v) in other_side.data_mut().iter_mut().enumerate() {
                *v += if k % 2 == 0 { 0.3 } else { -0.3 };
            }
            case!("minimum", point, |g, x| {
                let b = g.constant(other_side.clone());
                g.minimum(x, b)
            })
        },
        case!("scale", m("scale"), |g, x| Ok::<Var, AutodiffError>(g.scale(x, -2.5))),
        case!("add_scalar", m("adds"), |g, x| Ok::<Var, AutodiffError>(g.add_scalar(x, 0.7))),
        case!("exp", m("exp"), |g, x| Ok::<Var, AutodiffError>(g.exp(x))),
        case!("log", rand_t(&[3, 4], 0.5, 2.0, "log"), |g, x| g.log(x)),
        case!("sigmoid", m("sig"), |g, x| Ok::<Var, AutodiffError>(g.sigmoid(x))),
        case!("log_sigmoid", m("lsig"), |g, x| Ok::<Var, AutodiffError>(g.log_sigmoid(x))),
        case!("gelu", m("gelu"), |g, x| Ok::<Var, AutodiffError>(g.gelu(x))),
        case!("clamp", Tensor::new(vec![6], vec![-1.3, -0.4, 0.1, 0.45, 0.9, 1.6]).unwrap(), |g, x| {
            Ok::<Var, AutodiffError>(g.clamp(x, -0.8, 0.8))
        }),
        case!("softmax", m("sm"), |g, x| Ok::<Var, AutodiffError>(g.softmax(x))),
        case!("log_softmax", m("lsm"), |g, x| Ok::<Var, AutodiffError>(g.log_softmax(x))),
        case!("layer_norm (input)", m("ln"), |g, x| {
            let gain = other(g, &[4], "ln-g");
            let bias = other(g, &[4], "ln-b");
            g.layer_norm(x, gain, bias)
        }),
        case!("layer_norm (gain)", rand_t(&[4], 0.5, 1.5, "lng"), |g, x| {
            let a = other(g, &[3, 4], "lng-a");
            let bias = other(g, &[4], "lng-b");
            g.layer_norm(a, x, bias)
        }),
        case!("layer_norm (bias)", rand_t(&[4], -0.5, 0.5, "lnb"), |g, x| {
            let a = other(g, &[3, 4], "lnb-a");
            let gain = other(g, &[4], "lnb-g");
            g.layer_norm(a, gain, x)
        }),
        case!("embedding", rand_t(&[5, 3], -1.0, 1.0, "emb"), |g, x| g.embedding(x, &[4, 0, 4, 2])),
        case!("cross_entropy", m("ce"), |g, x| g.cross_entropy(x, &[1, 3, 0])),
        case!("pick", m("pick"), |g, x| g.pick(x, &[2, 0, 3])),
        case!("sum", m("sum"), |g, x| Ok::<Var, AutodiffError>(g.sum(x))),
        case!("mean", m("mean"), |g, x| Ok::<Var, AutodiffError>(g.mean(x))),
        case!("sum_last", m("suml"), |g, x| Ok::<Var, AutodiffError>(g.sum_last(x))),
        case!("concat", m("cat"), |g, x| {
            let b = other(g, &[3, 2], "cat-b");
            g.concat(&[b, x, x])
        }),
        case!("slice_cols", m("sc"), |g, x| g.slice_cols(x, 1, 2)),
        case!("slice_rows", m("sr"), |g, x| g.slice_rows(x, 1, 2)),
        case!("causal_mask + softmax", rand_t(&[4, 4], -1.0, 1.0, "cm"), |g, x| {
            let y = g.causal_mask(x)?;
            Ok::<Var, AutodiffError>(g.softmax(y))
        }),
    ]
}

pub fn run_primitives() -> Vec<(&'static str, Result<GradCheckReport, AutodiffError>)> {
    primitive_cases()
        .into_iter()
        .map(|c| (c.name, grad_check(&c.f, &c.point, PRIMITIVE_TOL)))
        .collect()
}

pub fn tiny_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        n_layers,
        max_seq_len: 10,
        seed: 3,
    }
}

/// Sequence NLL of a 2-block model with LoRA on the top block, checked
/// against each base and adapter tensor in turn.
pub fn run_transformer() -> Vec<(String, Result<GradCheckReport, AutodiffError>)> {
    let mut model = PolicyModel::new(tiny_config(2)).unwrap();
    model.attach_lora(&LayerSelection::top(1, 2).unwrap(), 2, 4.0).unwrap();
    // Nonzero B so the adapter path is exercised.
    let mut rng = seed::rng(5, "lora-b");
    for a in model.adapters_mut() {
        for v in a.b.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let prompt = [1usize, 4, 7, 2];
    let response = [5usize, 9, 3];
    let nll = |g: &mut Graph, b: &stylealign::policy::Binding, m: &PolicyModel| -> Result<Var, AutodiffError> {
        let fwd = m
            .forward_response(g, b, &prompt, &response)
            .map_err(|e| AutodiffError::Contract(e.to_string()))?;
        let s = g.sum(fwd.log_probs);
        Ok(g.scale(s, -1.0))
    };
    let mut out = Vec::new();
    let names: Vec<String> = model.weights().keys().cloned().collect();
    for name in names {
        let point = model.weights()[&name].clone();
        let m = model.clone();
        let n2 = name.clone();
        let r = grad_check(
            move |g, x| {
                let mut b = m.bind(g, false);
                b.replace(&n2, x);
                nll(g, &b, &m)
            },
            &point,
            COMPOSITE_TOL,
        );
        out.push((name, r));
    }
    for i in 0..model.adapters().len() {
        for which in ["lora_a", "lora_b"] {
            let a = &model.adapters()[i];
            let point = if which == "lora_a" { a.a.clone() } else { a.b.clone() };
            let target = a.target.clone();
            let m = model.clone();
            let t2 = target.clone();
            let r = grad_check(
                move |g, x| {
                    let mut b = m.bind(g, false);
                    if which == "lora_a" {
                        b.replace_adapter(&t2, Some(x), None);
                    } else {
                        b.replace_adapter(&t2, None, Some(x));
                    }
                    nll(g, &b, &m)
                },
                &point,
                COMPOSITE_TOL,
            );
            out.push((format!("{target}.{which}"), r));
        }
    }
    out
}
