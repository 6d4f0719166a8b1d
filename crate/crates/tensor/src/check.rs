//! Central finite-difference gradient verification.
//!
//! The standard battery runs every differentiable op on randomized instances
//! at 64-bit and compares reverse-mode gradients against (f(x+h) - f(x-h)) /
//! 2h. Exposed as library code so integration suites can rerun it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::ops::{concat_cols, concat_rows, Reduction};
use crate::params::{Binder, ParamStore};
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::TensorError;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with a unit floor, so near-zero gradients compare
/// absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compares reverse-mode gradients of `f` w.r.t. every element of every
/// input against central finite differences. Returns the worst relative
/// error observed.
pub fn finite_diff_check<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let s = loss.shape();
        if s.len() != 1 {
            return Err(TensorError::NotScalar { shape: s });
        }
        let grads = tape.backward(loss)?;
        vars.iter()
            .map(|v| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.rows(), v.cols()))
            })
            .collect()
    };
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&tape, &vars)?.item()
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let r = rel_err(analytic[i].data()[e], numeric);
            if r > worst {
                worst = r;
            }
        }
    }
    Ok(worst)
}

/// One row of the op battery result.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

type Case = (
    Vec<Tensor<f64>>,
    Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>>,
);

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = lo + (hi - lo) * rng.random::<f64>();
    }
    t
}

/// Values with pairwise gaps well above the FD step, so argmax-style ops
/// keep a stable winner under perturbation.
fn rand_tensor_gapped(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let n = rows * cols;
    let mut vals: Vec<f64> = (0..n).map(|i| 0.05 * i as f64).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::from_vec(rows, cols, vals).expect("gapped tensor")
}

/// Values bounded away from a kink at zero.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        let mag = 0.1 + 1.9 * rng.random::<f64>();
        *v = if rng.random::<f64>() < 0.5 { -mag } else { mag };
    }
    t
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4))
}

/// Weighted-sum head that turns any output into a scalar loss with
/// non-degenerate upstream gradients.
fn weighted_loss<'t>(
    y: Var<'t, f64>,
    weights: &Tensor<f64>,
) -> Result<Var<'t, f64>, TensorError> {
    let w = y.tape.leaf(weights.clone());
    y.mul(w)?.sum_all()
}

fn case_unary(
    rng: &mut ChaCha8Rng,
    input: Tensor<f64>,
    apply: impl for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>, TensorError> + 'static,
) -> Case {
    let w = rand_tensor(rng, input.rows(), input.cols(), -1.0, 1.0);
    (
        vec![input],
        Box::new(move |_tape, vars| weighted_loss(apply(vars[0])?, &w)),
    )
}

fn battery(rng_root: u64) -> Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Case>)> {
    let mut ops: Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Case>)> = Vec::new();

    ops.push((
        "add",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let a = rand_tensor(rng, m, n, -2.0, 2.0);
            let b = rand_tensor(rng, m, n, -2.0, 2.0);
            let w = rand_tensor(rng, m, n, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |_t, v| weighted_loss(v[0].add(v[1])?, &w)),
            )
        }),
    ));
    ops.push((
        "sub",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let a = rand_tensor(rng, m, n, -2.0, 2.0);
            let b = rand_tensor(rng, m, n, -2.0, 2.0);
            let w = rand_tensor(rng, m, n, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |_t, v| weighted_loss(v[0].sub(v[1])?, &w)),
            )
        }),
    ));
    ops.push((
        "mul",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let a = rand_tensor(rng, m, n, -2.0, 2.0);
            let b = rand_tensor(rng, m, n, -2.0, 2.0);
            let w = rand_tensor(rng, m, n, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |_t, v| weighted_loss(v[0].mul(v[1])?, &w)),
            )
        }),
    ));
    ops.push((
        "add_row",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let a = rand_tensor(rng, m, n, -2.0, 2.0);
            let b = rand_tensor(rng, 1, n, -2.0, 2.0);
            let w = rand_tensor(rng, m, n, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |_t, v| weighted_loss(v[0].add_row(v[1])?, &w)),
            )
        }),
    ));
    ops.push((
        "scale",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let c = -1.5 + 3.0 * rng.random::<f64>();
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            case_unary(rng, x, move |x| x.scale(c))
        }),
    ));
    ops.push((
        "neg",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            case_unary(rng, x, |x| x.neg())
        }),
    ));
    ops.push((
        "relu",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor_off_kink(rng, m, n);
            case_unary(rng, x, |x| x.relu())
        }),
    ));
    ops.push((
        "gelu",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            case_unary(rng, x, |x| x.gelu())
        }),
    ));
    ops.push((
        "sigmoid",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -3.0, 3.0);
            case_unary(rng, x, |x| x.sigmoid())
        }),
    ));
    ops.push((
        "log_sigmoid",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -3.0, 3.0);
            case_unary(rng, x, |x| x.log_sigmoid())
        }),
    ));
    ops.push((
        "tanh",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            case_unary(rng, x, |x| x.tanh_act())
        }),
    ));
    ops.push((
        "exp",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -1.5, 1.5);
            case_unary(rng, x, |x| x.exp_all())
        }),
    ));
    ops.push((
        "ln",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, 0.2, 3.0);
            case_unary(rng, x, |x| x.ln_all())
        }),
    ));
    ops.push((
        "matmul",
        Box::new(|rng| {
            let (m, k) = dims(rng);
            let n = rng.random_range(1..=4);
            let a = rand_tensor(rng, m, k, -2.0, 2.0);
            let b = rand_tensor(rng, k, n, -2.0, 2.0);
            let w = rand_tensor(rng, m, n, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |_t, v| weighted_loss(v[0].matmul(v[1])?, &w)),
            )
        }),
    ));
    ops.push((
        "matmul_nt",
        Box::new(|rng| {
            let (m, k) = dims(rng);
            let n = rng.random_range(1..=4);
            let a = rand_tensor(rng, m, k, -2.0, 2.0);
            let b = rand_tensor(rng, n, k, -2.0, 2.0);
            let w = rand_tensor(rng, m, n, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |_t, v| weighted_loss(v[0].matmul_nt(v[1])?, &w)),
            )
        }),
    ));
    ops.push((
        "matmul_tn",
        Box::new(|rng| {
            let (k, m) = dims(rng);
            let n = rng.random_range(1..=4);
            let a = rand_tensor(rng, k, m, -2.0, 2.0);
            let b = rand_tensor(rng, k, n, -2.0, 2.0);
            let w = rand_tensor(rng, m, n, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |_t, v| weighted_loss(v[0].matmul_tn(v[1])?, &w)),
            )
        }),
    ));
    ops.push((
        "narrow_rows",
        Box::new(|rng| {
            let m = rng.random_range(2..=5);
            let n = rng.random_range(1..=4);
            let start = rng.random_range(0..m - 1);
            let len = rng.random_range(1..=m - start);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            let w = rand_tensor(rng, len, n, -1.0, 1.0);
            (
                vec![x],
                Box::new(move |_t, v| weighted_loss(v[0].narrow_rows(start, len)?, &w)),
            )
        }),
    ));
    ops.push((
        "narrow_cols",
        Box::new(|rng| {
            let m = rng.random_range(1..=4);
            let n = rng.random_range(2..=5);
            let start = rng.random_range(0..n - 1);
            let len = rng.random_range(1..=n - start);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            let w = rand_tensor(rng, m, len, -1.0, 1.0);
            (
                vec![x],
                Box::new(move |_t, v| weighted_loss(v[0].narrow_cols(start, len)?, &w)),
            )
        }),
    ));
    ops.push((
        "concat_rows",
        Box::new(|rng| {
            let n = rng.random_range(1..=4);
            let (m1, m2) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let a = rand_tensor(rng, m1, n, -2.0, 2.0);
            let b = rand_tensor(rng, m2, n, -2.0, 2.0);
            let w = rand_tensor(rng, m1 + m2, n, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |_t, v| weighted_loss(concat_rows(&[v[0], v[1]])?, &w)),
            )
        }),
    ));
    ops.push((
        "concat_cols",
        Box::new(|rng| {
            let m = rng.random_range(1..=4);
            let (n1, n2) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let a = rand_tensor(rng, m, n1, -2.0, 2.0);
            let b = rand_tensor(rng, m, n2, -2.0, 2.0);
            let w = rand_tensor(rng, m, n1 + n2, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |_t, v| weighted_loss(concat_cols(&[v[0], v[1]])?, &w)),
            )
        }),
    ));
    ops.push((
        "gather_rows",
        Box::new(|rng| {
            let m = rng.random_range(2..=5);
            let n = rng.random_range(1..=4);
            let count = rng.random_range(1..=6);
            let ids: Vec<usize> = (0..count).map(|_| rng.random_range(0..m)).collect();
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            let w = rand_tensor(rng, count, n, -1.0, 1.0);
            (
                vec![x],
                Box::new(move |_t, v| weighted_loss(v[0].gather_rows(&ids)?, &w)),
            )
        }),
    ));
    ops.push((
        "sum_all",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            (vec![x], Box::new(move |_t, v| v[0].sum_all()))
        }),
    ));
    ops.push((
        "mean_all",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            (vec![x], Box::new(move |_t, v| v[0].mean_all()))
        }),
    ));
    ops.push((
        "maxpool2d",
        Box::new(|rng| {
            let d = rng.random_range(1..=2);
            let x = rand_tensor_gapped(rng, 16, d);
            let w = rand_tensor(rng, 4, d, -1.0, 1.0);
            (
                vec![x],
                Box::new(move |_t, v| weighted_loss(v[0].maxpool2d(4, 4)?, &w)),
            )
        }),
    ));
    ops.push((
        "dropout",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            let mut mask = Tensor::zeros(m, n);
            for v in mask.data_mut() {
                if rng.random::<f64>() >= 0.3 {
                    *v = 1.0 / 0.7;
                }
            }
            let w = rand_tensor(rng, m, n, -1.0, 1.0);
            (
                vec![x],
                Box::new(move |_t, v| weighted_loss(v[0].dropout_with_mask(&mask)?, &w)),
            )
        }),
    ));
    ops.push((
        "softmax_rows",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            case_unary(rng, x, |x| x.softmax_rows())
        }),
    ));
    ops.push((
        "layer_norm",
        Box::new(|rng| {
            let m = rng.random_range(1..=4);
            let n = rng.random_range(2..=5);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            let gamma = rand_tensor(rng, 1, n, 0.5, 1.5);
            let beta = rand_tensor(rng, 1, n, -0.5, 0.5);
            let w = rand_tensor(rng, m, n, -1.0, 1.0);
            (
                vec![x, gamma, beta],
                Box::new(move |_t, v| weighted_loss(v[0].layer_norm(v[1], v[2], 1e-5)?, &w)),
            )
        }),
    ));
    ops.push((
        "cross_entropy",
        Box::new(|rng| {
            let m = rng.random_range(1..=4);
            let n = rng.random_range(2..=5);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let red = if rng.random::<f64>() < 0.5 {
                Reduction::Mean
            } else {
                Reduction::Sum
            };
            (
                vec![x],
                Box::new(move |_t, v| v[0].cross_entropy(&targets, red)),
            )
        }),
    ));
    ops.push((
        "bce_with_logits",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -3.0, 3.0);
            let y = rand_tensor(rng, m, n, 0.0, 1.0);
            (
                vec![x],
                Box::new(move |_t, v| v[0].bce_with_logits(&y)),
            )
        }),
    ));
    ops.push((
        "mse",
        Box::new(|rng| {
            let (m, n) = dims(rng);
            let x = rand_tensor(rng, m, n, -2.0, 2.0);
            let y = rand_tensor(rng, m, n, -2.0, 2.0);
            (vec![x], Box::new(move |_t, v| v[0].mse(&y)))
        }),
    ));
    ops.push((
        "multi_head_attention",
        Box::new(move |rng| {
            // 2-token, 2-head instance; parameters checked alongside input.
            let d = 4usize;
            let x = rand_tensor(rng, 2, d, -1.0, 1.0);
            let wq = rand_tensor(rng, d, d, -0.7, 0.7);
            let wk = rand_tensor(rng, d, d, -0.7, 0.7);
            let wv = rand_tensor(rng, d, d, -0.7, 0.7);
            let wo = rand_tensor(rng, d, d, -0.7, 0.7);
            let w = rand_tensor(rng, 2, d, -1.0, 1.0);
            let root = rng_root;
            (
                vec![x, wq, wk, wv, wo],
                Box::new(move |tape, v| {
                    let empty = ParamStore::<f64>::new(root);
                    let bd = Binder::new(tape, &empty);
                    bd.preset("fd.wq.w", v[1]);
                    bd.preset("fd.wk.w", v[2]);
                    bd.preset("fd.wv.w", v[3]);
                    bd.preset("fd.wo.w", v[4]);
                    let zero = tape.leaf(Tensor::zeros(1, 4));
                    for b in ["fd.wq.b", "fd.wk.b", "fd.wv.b", "fd.wo.b"] {
                        bd.preset(b, zero);
                    }
                    let mha = MultiHeadAttention::new("fd", 4, 2);
                    let y = mha.apply(&bd, v[0], v[0], None, None)?;
                    weighted_loss(y, &w)
                }),
            )
        }),
    ));
    ops.push((
        "linear",
        Box::new(move |rng| {
            let x = rand_tensor(rng, 3, 4, -1.0, 1.0);
            let wt = rand_tensor(rng, 4, 2, -0.7, 0.7);
            let b = rand_tensor(rng, 1, 2, -0.5, 0.5);
            let w = rand_tensor(rng, 3, 2, -1.0, 1.0);
            let root = rng_root;
            (
                vec![x, wt, b],
                Box::new(move |tape, v| {
                    let empty = ParamStore::<f64>::new(root);
                    let bd = Binder::new(tape, &empty);
                    bd.preset("fd.w", v[1]);
                    bd.preset("fd.b", v[2]);
                    let y = Linear::new("fd", 4, 2).apply(&bd, v[0])?;
                    weighted_loss(y, &w)
                }),
            )
        }),
    ));
    ops.push((
        "feed_forward",
        Box::new(move |rng| {
            let x = rand_tensor(rng, 2, 3, -1.0, 1.0);
            let w1 = rand_tensor(rng, 3, 5, -0.7, 0.7);
            let b1 = rand_tensor(rng, 1, 5, -0.3, 0.3);
            let w2 = rand_tensor(rng, 5, 3, -0.7, 0.7);
            let b2 = rand_tensor(rng, 1, 3, -0.3, 0.3);
            let w = rand_tensor(rng, 2, 3, -1.0, 1.0);
            let root = rng_root;
            (
                vec![x, w1, b1, w2, b2],
                Box::new(move |tape, v| {
                    let empty = ParamStore::<f64>::new(root);
                    let bd = Binder::new(tape, &empty);
                    bd.preset("fd.fc1.w", v[1]);
                    bd.preset("fd.fc1.b", v[2]);
                    bd.preset("fd.fc2.w", v[3]);
                    bd.preset("fd.fc2.b", v[4]);
                    let y = FeedForward::new("fd", 3, 5, 3).apply(&bd, v[0])?;
                    weighted_loss(y, &w)
                }),
            )
        }),
    ));
    ops.push((
        "layer_norm_layer",
        Box::new(move |rng| {
            let x = rand_tensor(rng, 3, 4, -2.0, 2.0);
            let g = rand_tensor(rng, 1, 4, 0.5, 1.5);
            let b = rand_tensor(rng, 1, 4, -0.5, 0.5);
            let w = rand_tensor(rng, 3, 4, -1.0, 1.0);
            let root = rng_root;
            (
                vec![x, g, b],
                Box::new(move |tape, v| {
                    let empty = ParamStore::<f64>::new(root);
                    let bd = Binder::new(tape, &empty);
                    bd.preset("fd.g", v[1]);
                    bd.preset("fd.b", v[2]);
                    let y = LayerNorm::new("fd", 4).apply(&bd, v[0])?;
                    weighted_loss(y, &w)
                }),
            )
        }),
    ));
    ops
}

/// Runs `instances` randomized finite-difference checks per op. The returned
/// rows report the worst relative error seen for each op.
pub fn run_op_gradient_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>, TensorError> {
    let mut out = Vec::new();
    for (name, gen) in battery(seed) {
        let mut rng = stream(seed, name);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let (inputs, f) = gen(&mut rng);
            let r = finite_diff_check(&inputs, f.as_ref())?;
            if r > worst {
                worst = r;
            }
        }
        out.push(OpCheck {
            op: name,
            instances,
            max_rel_err: worst,
        });
    }
    Ok(out)
}
