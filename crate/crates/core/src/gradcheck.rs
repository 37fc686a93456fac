//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BlockMask, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (parameter, element) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval<F>(f: &F, params: &[Tensor], with_grad: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::InvalidShape {
            op: "gradcheck",
            shape: g.shape(loss).to_vec(),
        });
    }
    let value = g.value(loss).item();
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();
    Ok((value, grads))
}

/// Max over all parameter entries of
/// `|analytic − central| / max(1, |central|)`.
pub fn gradcheck<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("gradcheck eps must be positive"));
    }
    let (value, analytic) = eval(&f, params, true)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "gradcheck loss at the unperturbed point".into(),
        });
    }
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let (plus, _) = eval(&f, &work, false)?;
            work[pi].data_mut()[j] = orig - eps;
            let (minus, _) = eval(&f, &work, false)?;
            work[pi].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradcheck parameter {pi} element {j}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Reduces an arbitrary tensor to a scalar through fixed random weights so
/// that no gradient component cancels by symmetry.
pub fn weighted_sum(g: &mut Graph, x: Var, rng: &mut impl Rng) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, rng));
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 - v.abs() } else { 0.05 + *v };
        }
    }
    t
}

type Check = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One randomized instance of every differentiable primitive.
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Check)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (m, k, n) = (dims(1, 5), dims(1, 5), dims(1, 5));
    let (h, w, c) = (dims(2, 4), dims(2, 4), dims(1, 3));
    let heads = dims(1, 2);
    let dh = dims(1, 3);
    let (nq, nk) = (dims(1, 4), dims(1, 5));
    let classes = dims(2, 4);
    let patch = dims(1, 2);
    let vocab = dims(2, 5);
    let factor = dims(1, 3);
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut rand = |shape: &[usize]| Tensor::uniform(shape, -1.5, 1.5, &mut r);
    let wseed = seed.wrapping_mul(31).wrapping_add(7);
    let reduce =
        move |g: &mut Graph, x: Var| weighted_sum(g, x, &mut ChaCha8Rng::seed_from_u64(wseed));

    let mut mask = BlockMask::open(nq, nk);
    let mut mr = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for i in 0..nq {
        for j in 1..nk {
            mask.set(i, j, mr.gen_bool(0.3));
        }
    }
    let targets: Vec<usize> = (0..m).map(|i| (i * 7 + seed as usize) % classes).collect();
    let weights: Vec<f64> = (0..m)
        .map(|i| if i % 3 == 2 { 0.0 } else { 1.0 / m as f64 })
        .collect();
    let mse_target: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.37).sin()).collect();
    let ids: Vec<usize> = (0..n).map(|i| (i * 3 + 1) % vocab).collect();

    let mut cases: Vec<(&'static str, Vec<Tensor>, Check)> = vec![
        (
            "matmul",
            vec![rand(&[m, k]), rand(&[k, n])],
            Box::new(move |g, p| {
                let y = g.matmul(p[0], p[1])?;
                reduce(g, y)
            }),
        ),
        (
            "add",
            vec![rand(&[m, n]), rand(&[n])],
            Box::new(move |g, p| {
                let y = g.add(p[0], p[1])?;
                reduce(g, y)
            }),
        ),
        (
            "sub",
            vec![rand(&[m, n]), rand(&[m, n])],
            Box::new(move |g, p| {
                let y = g.sub(p[0], p[1])?;
                reduce(g, y)
            }),
        ),
        (
            "mul",
            vec![rand(&[m, n]), rand(&[n])],
            Box::new(move |g, p| {
                let y = g.mul(p[0], p[1])?;
                reduce(g, y)
            }),
        ),
        (
            "scale",
            vec![rand(&[m, n])],
            Box::new(move |g, p| {
                let y = g.scale(p[0], -1.7);
                reduce(g, y)
            }),
        ),
        (
            "reshape",
            vec![rand(&[m, n])],
            Box::new(move |g, p| {
                let y = g.reshape(p[0], &[n * m])?;
                reduce(g, y)
            }),
        ),
        (
            "transpose",
            vec![rand(&[m, n])],
            Box::new(move |g, p| {
                let y = g.transpose(p[0])?;
                reduce(g, y)
            }),
        ),
        (
            "concat",
            vec![rand(&[m, n]), rand(&[k, n])],
            Box::new(move |g, p| {
                let y = g.concat(&[p[0], p[1]])?;
                reduce(g, y)
            }),
        ),
        (
            "slice",
            vec![rand(&[m + 1, n])],
            Box::new(move |g, p| {
                let y = g.slice_rows(p[0], 1, m + 1)?;
                reduce(g, y)
            }),
        ),
        (
            "relu",
            vec![away_from_zero(rand(&[m, n]))],
            Box::new(move |g, p| {
                let y = g.relu(p[0]);
                reduce(g, y)
            }),
        ),
        (
            "gelu",
            vec![rand(&[m, n])],
            Box::new(move |g, p| {
                let y = g.gelu(p[0]);
                reduce(g, y)
            }),
        ),
        (
            "sigmoid",
            vec![rand(&[m, n])],
            Box::new(move |g, p| {
                let y = g.sigmoid(p[0]);
                reduce(g, y)
            }),
        ),
        (
            "softplus",
            vec![rand(&[m, n])],
            Box::new(move |g, p| {
                let y = g.softplus(p[0]);
                reduce(g, y)
            }),
        ),
        (
            "layernorm",
            vec![rand(&[m, n + 1]), rand(&[n + 1]), rand(&[n + 1])],
            Box::new(move |g, p| {
                let y = g.layernorm(p[0], p[1], p[2], 1e-5)?;
                reduce(g, y)
            }),
        ),
        (
            "softmax",
            vec![rand(&[m, n])],
            Box::new(move |g, p| {
                let y = g.softmax(p[0])?;
                reduce(g, y)
            }),
        ),
        (
            "mean",
            vec![rand(&[m, n])],
            Box::new(move |g, p| {
                let y = g.mul(p[0], p[0])?;
                Ok(g.mean(y))
            }),
        ),
        (
            "sum",
            vec![rand(&[m, n])],
            Box::new(move |g, p| {
                let y = g.mul(p[0], p[0])?;
                Ok(g.sum(y))
            }),
        ),
        (
            "embedding_lookup",
            vec![rand(&[vocab, k])],
            Box::new(move |g, p| {
                let y = g.embedding(p[0], &ids)?;
                reduce(g, y)
            }),
        ),
        (
            "conv3x3",
            vec![rand(&[h, w, c]), rand(&[9 * c, k]), rand(&[k])],
            Box::new(move |g, p| {
                let y = g.conv3x3(p[0], p[1], p[2])?;
                reduce(g, y)
            }),
        ),
        (
            "unfold_project",
            vec![
                rand(&[h * patch, w * patch, c]),
                rand(&[patch * patch * c, k]),
            ],
            Box::new(move |g, p| {
                let u = g.unfold_patches(p[0], patch)?;
                let y = g.matmul(u, p[1])?;
                reduce(g, y)
            }),
        ),
        (
            "fold_patches",
            vec![rand(&[h * w, patch * patch * c])],
            Box::new(move |g, p| {
                let y = g.fold_patches(p[0], (h, w), patch)?;
                reduce(g, y)
            }),
        ),
        (
            "upsample_nearest",
            vec![rand(&[h, w, c])],
            Box::new(move |g, p| {
                let y = g.upsample_nearest(p[0], factor)?;
                reduce(g, y)
            }),
        ),
        (
            "attention",
            vec![
                rand(&[nq, heads * dh]),
                rand(&[nk, heads * dh]),
                rand(&[nk, heads * dh]),
            ],
            Box::new(move |g, p| {
                let y = g.attention(p[0], p[1], p[2], heads, Some(&mask))?;
                reduce(g, y)
            }),
        ),
        (
            "cross_entropy",
            vec![rand(&[m, classes])],
            Box::new(move |g, p| g.cross_entropy(p[0], &targets, &weights)),
        ),
        (
            "mse",
            vec![rand(&[m, n])],
            Box::new(move |g, p| g.mse(p[0], &mse_target)),
        ),
        (
            "l2_normalize",
            vec![rand(&[m, n + 1])],
            Box::new(move |g, p| {
                let y = g.l2_normalize(p[0]);
                reduce(g, y)
            }),
        ),
    ];
    cases.shrink_to_fit();
    cases
}

/// Runs every primitive case for one seed.
pub fn primitive_suite(seed: u64, eps: f64) -> Vec<(&'static str, Result<GradcheckReport>)> {
    primitive_cases(seed)
        .into_iter()
        .map(|(name, params, f)| (name, gradcheck(f, &params, eps)))
        .collect()
}
