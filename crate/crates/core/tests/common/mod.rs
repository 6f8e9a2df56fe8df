//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use ewclab::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Worst `|autodiff − fd| / max(1, |fd|)` over every input coordinate.
///
/// `build` maps input leaves to a scalar loss. Finite differences rebuild
/// the graph from scratch for each perturbed coordinate.
pub fn grad_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars).expect("forward");
        g.value(loss).item().unwrap()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let zeros = vec![0.0; t.len()];
        let analytic = g.grad(vars[k]).unwrap_or(&zeros);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contract a tensor-valued output to a scalar with fixed random weights
/// so every output coordinate contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = uniform(&shape, -1.0, 1.0, &mut rng(seed ^ 0x5eed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// One gradient-check case per primitive, drawn from `seed`.
/// Inputs are uniform in [−2, 2] unless the op needs a positive domain.
pub fn primitive_cases() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("matmul", |s| {
            let mut r = rng(s);
            let a = uniform(&[3, 4], -2.0, 2.0, &mut r);
            let b = uniform(&[4, 2], -2.0, 2.0, &mut r);
            grad_check(&[a, b], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, s)
            })
        }),
        ("add", |s| {
            let mut r = rng(s);
            let a = uniform(&[3, 4], -2.0, 2.0, &mut r);
            let b = uniform(&[4], -2.0, 2.0, &mut r);
            grad_check(&[a, b], |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y, s)
            })
        }),
        ("sub", |s| {
            let mut r = rng(s);
            let a = uniform(&[4], -2.0, 2.0, &mut r);
            let b = uniform(&[2, 4], -2.0, 2.0, &mut r);
            grad_check(&[a, b], |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted_sum(g, y, s)
            })
        }),
        ("mul", |s| {
            let mut r = rng(s);
            let a = uniform(&[2, 3], -2.0, 2.0, &mut r);
            let b = uniform(&[3], -2.0, 2.0, &mut r);
            grad_check(&[a, b], |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, s)
            })
        }),
        ("scale", |s| {
            let mut r = rng(s);
            let a = uniform(&[5], -2.0, 2.0, &mut r);
            grad_check(&[a], |g, v| {
                let y = g.scale(v[0], -1.7);
                weighted_sum(g, y, s)
            })
        }),
        ("relu", |s| {
            let mut r = rng(s);
            let a = uniform(&[6], -2.0, 2.0, &mut r);
            grad_check(&[a], |g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, s)
            })
        }),
        ("gelu", |s| {
            let mut r = rng(s);
            let a = uniform(&[6], -2.0, 2.0, &mut r);
            grad_check(&[a], |g, v| {
                let y = g.gelu(v[0]);
                weighted_sum(g, y, s)
            })
        }),
        ("log", |s| {
            let mut r = rng(s);
            let a = uniform(&[5], 0.5, 2.0, &mut r);
            grad_check(&[a], |g, v| {
                let y = g.log(v[0])?;
                weighted_sum(g, y, s)
            })
        }),
        ("softmax", |s| {
            let mut r = rng(s);
            let a = uniform(&[3, 4], -2.0, 2.0, &mut r);
            let axis = (s % 2) as usize;
            grad_check(&[a], |g, v| {
                let y = g.softmax(v[0], axis)?;
                weighted_sum(g, y, s)
            })
        }),
        ("layernorm", |s| {
            let mut r = rng(s);
            let x = uniform(&[3, 5], -2.0, 2.0, &mut r);
            let axis = (s % 2) as usize;
            let n = x.shape()[axis];
            let gain = uniform(&[n], -2.0, 2.0, &mut r);
            let bias = uniform(&[n], -2.0, 2.0, &mut r);
            grad_check(&[x, gain, bias], |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], axis, 1e-5)?;
                weighted_sum(g, y, s)
            })
        }),
        ("embedding", |s| {
            let mut r = rng(s);
            let table = uniform(&[5, 3], -2.0, 2.0, &mut r);
            let ids: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            grad_check(&[table], move |g, v| {
                let y = g.embedding(v[0], &ids)?;
                weighted_sum(g, y, s)
            })
        }),
        ("cross_entropy", |s| {
            let mut r = rng(s);
            let logits = uniform(&[3, 6], -2.0, 2.0, &mut r);
            let targets: Vec<usize> = (0..3).map(|_| r.gen_range(0..6)).collect();
            grad_check(&[logits], move |g, v| g.cross_entropy(v[0], &targets))
        }),
        ("cross_entropy_weighted", |s| {
            let mut r = rng(s);
            let logits = uniform(&[3, 6], -2.0, 2.0, &mut r);
            let targets: Vec<usize> = (0..3).map(|_| r.gen_range(0..6)).collect();
            let weights: Vec<f64> = (0..3).map(|_| r.gen_range(0.1..1.0)).collect();
            grad_check(&[logits], move |g, v| g.cross_entropy_weighted(v[0], &targets, &weights))
        }),
        ("transpose", |s| {
            let mut r = rng(s);
            let a = uniform(&[2, 5], -2.0, 2.0, &mut r);
            grad_check(&[a], |g, v| {
                let y = g.transpose(v[0])?;
                weighted_sum(g, y, s)
            })
        }),
        ("slice_rows", |s| {
            let mut r = rng(s);
            let a = uniform(&[5, 3], -2.0, 2.0, &mut r);
            grad_check(&[a], |g, v| {
                let y = g.slice_rows(v[0], 1, 3)?;
                weighted_sum(g, y, s)
            })
        }),
        ("slice_cols", |s| {
            let mut r = rng(s);
            let a = uniform(&[3, 5], -2.0, 2.0, &mut r);
            grad_check(&[a], |g, v| {
                let y = g.slice_cols(v[0], 2, 2)?;
                weighted_sum(g, y, s)
            })
        }),
        ("concat_rows", |s| {
            let mut r = rng(s);
            let a = uniform(&[2, 3], -2.0, 2.0, &mut r);
            let b = uniform(&[1, 3], -2.0, 2.0, &mut r);
            grad_check(&[a, b], |g, v| {
                let y = g.concat_rows(&[v[0], v[1], v[0]])?;
                weighted_sum(g, y, s)
            })
        }),
        ("concat_cols", |s| {
            let mut r = rng(s);
            let a = uniform(&[3, 2], -2.0, 2.0, &mut r);
            let b = uniform(&[3, 1], -2.0, 2.0, &mut r);
            grad_check(&[a, b], |g, v| {
                let y = g.concat_cols(&[v[1], v[0]])?;
                weighted_sum(g, y, s)
            })
        }),
        ("gather_rows", |s| {
            let mut r = rng(s);
            let a = uniform(&[4, 3], -2.0, 2.0, &mut r);
            grad_check(&[a], |g, v| {
                let y = g.gather_rows(v[0], &[3, 0, 3])?;
                weighted_sum(g, y, s)
            })
        }),
        ("sum", |s| {
            let mut r = rng(s);
            let a = uniform(&[2, 3], -2.0, 2.0, &mut r);
            grad_check(&[a], |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            })
        }),
    ]
}
