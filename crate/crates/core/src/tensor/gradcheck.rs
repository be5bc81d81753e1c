//! Central finite-difference checks for [`Tape`] gradients.
//!
//! Used by the unit tests of every primitive and by the model-level
//! gradient suite.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DropoutRng, GatherRow, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-5 }
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central-difference gradient of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &mut [f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(x);
            x[i] = orig - eps;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Checks `build` on `inputs`, reducing its output to a scalar with fixed
/// random weights. Returns the worst relative error over the inputs listed
/// in `differentiable`.
pub fn check_op(
    cfg: &GradCheck,
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor<f64>],
    differentiable: &[usize],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.shape(out)
    };
    let [r, c] = out_shape;
    let weights = Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let loss_of = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let w = tape.leaf(weights.clone());
        let prod = tape.mul(out, w);
        let loss = tape.sum_all(prod);
        (tape, vars, loss)
    };
    let analytic = {
        let (tape, vars, loss) = loss_of(inputs);
        let grads = tape.backward(loss);
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.data.len()], <[f64]>::to_vec))
            .collect::<Vec<_>>()
    };
    let mut worst = 0.0f64;
    for &k in differentiable {
        let mut work = inputs.to_vec();
        let mut x = work[k].data.clone();
        let numeric = numeric_gradient(&mut x, cfg.eps, |x| {
            work[k].data.copy_from_slice(x);
            let (tape, _, loss) = loss_of(&work);
            tape.value(loss)[0]
        });
        worst = worst.max(relative_error(&analytic[k], &numeric));
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect())
}

/// Runs the finite-difference check for every tensor primitive whose name
/// passes `filter`. Returns `(name, worst relative error)` pairs.
pub fn check_gradients(cfg: &GradCheck, rng: &mut ChaCha8Rng, filter: impl Fn(&str) -> bool) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut run = |name: &str,
                   rng: &mut ChaCha8Rng,
                   inputs: Vec<Tensor<f64>>,
                   diff: &[usize],
                   build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var| {
        if filter(name) {
            let err = check_op(cfg, rng, &inputs, diff, build);
            out.push((name.to_string(), err));
        }
    };
    let r = &mut *rng;
    let (a, b) = (rand_tensor(r, 3, 4), rand_tensor(r, 4, 5));
    run("matmul", r, vec![a, b], &[0, 1], &|t, v| t.matmul(v[0], v[1]));
    let (a, b) = (rand_tensor(r, 3, 4), rand_tensor(r, 5, 4));
    run("matmul_t", r, vec![a, b], &[0, 1], &|t, v| t.matmul_t(v[0], v[1]));
    let (a, b) = (rand_tensor(r, 3, 4), rand_tensor(r, 3, 4));
    run("add", r, vec![a.clone(), b.clone()], &[0, 1], &|t, v| t.add(v[0], v[1]));
    run("sub", r, vec![a.clone(), b.clone()], &[0, 1], &|t, v| t.sub(v[0], v[1]));
    run("mul", r, vec![a, b], &[0, 1], &|t, v| t.mul(v[0], v[1]));
    let (a, row, col) = (rand_tensor(r, 3, 4), rand_tensor(r, 1, 4), rand_tensor(r, 3, 1));
    run("add_row", r, vec![a.clone(), row.clone()], &[0, 1], &|t, v| {
        t.add_row(v[0], v[1])
    });
    run("mul_row", r, vec![a.clone(), row], &[0, 1], &|t, v| {
        t.mul_row(v[0], v[1])
    });
    run("mul_col", r, vec![a.clone(), col], &[0, 1], &|t, v| {
        t.mul_col(v[0], v[1])
    });
    run("scale", r, vec![a.clone()], &[0], &|t, v| t.scale(v[0], 0.37));
    let (b, c) = (rand_tensor(r, 3, 2), rand_tensor(r, 2, 4));
    run("concat_cols", r, vec![a.clone(), b], &[0, 1], &|t, v| {
        t.concat_cols(&[v[0], v[1]])
    });
    run("concat_rows", r, vec![a.clone(), c], &[0, 1], &|t, v| {
        t.concat_rows(&[v[0], v[1]])
    });
    run("slice_cols", r, vec![a.clone()], &[0], &|t, v| t.slice_cols(v[0], 1, 2));
    run("sum_rows", r, vec![a.clone()], &[0], &|t, v| t.sum_rows(v[0]));
    run("sum_all", r, vec![a.clone()], &[0], &|t, v| t.sum_all(v[0]));
    run("max_rows", r, vec![a.clone()], &[0], &|t, v| t.max_rows(v[0]));
    run("softmax", r, vec![a.clone()], &[0], &|t, v| t.softmax(v[0]));
    let wide = rand_tensor(r, 3, 8);
    run("layer_norm", r, vec![wide], &[0], &|t, v| t.layer_norm(v[0]));
    run("gelu", r, vec![a.clone()], &[0], &|t, v| t.gelu(v[0]));
    run("dropout", r, vec![a.clone()], &[0], &|t, v| {
        let mut d = DropoutRng::new(99);
        t.dropout(v[0], 0.3, &mut d)
    });
    let table = rand_tensor(r, 5, 3);
    run("lookup", r, vec![table], &[0], &|t, v| t.lookup(v[0], &[4, 0, 4, 2]));
    let idx = Arc::new(vec![0, 3, 1, 2, 0, 4, 4, 1, 0]);
    let src = rand_tensor(r, 3, 5);
    for (name, mode) in [
        ("pair_gather_query", GatherRow::Query),
        ("pair_gather_key", GatherRow::Key),
    ] {
        let idx = idx.clone();
        run(name, r, vec![src.clone()], &[0], &move |t, v| {
            t.pair_gather(v[0], idx.clone(), mode)
        });
    }
    let shared = rand_tensor(r, 1, 5);
    let i2 = idx.clone();
    run("pair_gather_shared", r, vec![shared], &[0], &move |t, v| {
        t.pair_gather(v[0], i2.clone(), GatherRow::Shared)
    });
    let sq = rand_tensor(r, 3, 3);
    run("bucket_scatter", r, vec![sq], &[0], &move |t, v| {
        t.bucket_scatter(v[0], idx.clone(), 5)
    });
    let logits = rand_tensor(r, 4, 3);
    run("cross_entropy", r, vec![logits], &[0], &|t, v| {
        t.cross_entropy(v[0], &[2, 0, 1, 1])
    });
    out
}
