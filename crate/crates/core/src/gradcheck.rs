//! Central finite-difference oracle for tape gradients.
//!
//! The function under test maps input leaves to an output tensor; it is
//! contracted with a fixed random cotangent to a scalar so that the whole
//! Jacobian is exercised, then every input element is perturbed by `±h`.

use crate::autodiff::{Segment, Tape, Var};
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Outcome of a gradient comparison for one input.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

fn contract(tape: &mut Tape, out: Var, cotangent: &Tensor) -> Result<Var> {
    let c = tape.constant(cotangent.clone());
    let p = tape.mul(out, c)?;
    tape.sum(p)
}

fn eval<F>(inputs: &[Tensor], f: &F, cotangent: Option<&Tensor>) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.value(out).clone();
    let Some(c) = cotangent else {
        return Ok((0.0, shape));
    };
    let s = contract(&mut tape, out, c)?;
    Ok((tape.value(s).data()[0], shape))
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`, one report per input.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64, seed: u64) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, out_shape) = eval(inputs, &f, None)?;
    let mut rng = SplitMix64::stream(seed, "gradcheck-cotangent");
    let cot = Tensor::from_fn(out_shape.shape().to_vec(), |_| rng.normal());

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = contract(&mut tape, out, &cot)?;
    let mut grads = tape.backward(s)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads
            .take(vars[idx])
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut numeric = vec![0.0; input.len()];
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[e] -= h;
            let (fp, _) = eval(&plus, &f, Some(&cot))?;
            let (fm, _) = eval(&minus, &f, Some(&cot))?;
            numeric[e] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let an = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = an.max(nn);
        let rel_error = if denom < 1e-12 { diff } else { diff / denom };
        reports.push(GradReport {
            rel_error,
            analytic_norm: an,
        });
    }
    Ok(reports)
}

/// Largest relative error over all inputs.
pub fn max_rel_error<F>(inputs: &[Tensor], f: F, h: f64, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(check(inputs, f, h, seed)?
        .iter()
        .map(|r| r.rel_error)
        .fold(0.0, f64::max))
}

/// Random tensor with standard-normal entries.
pub fn random_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

/// Finite-difference step used by [`op_suite`].
pub const SUITE_STEP: f64 = 1e-5;

/// Worst relative error of one op over its random shapes.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub shapes: usize,
    pub worst: f64,
}

fn dims(rng: &mut SplitMix64, max: u64) -> usize {
    1 + rng.below(max) as usize
}

fn unary(rng: &mut SplitMix64, seed: u64, shape: &[usize], f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let x = random_tensor(rng, shape);
    max_rel_error(&[x], |t, v| f(t, v[0]), SUITE_STEP, seed)
}

fn binary(rng: &mut SplitMix64, seed: u64, a: &[usize], b: &[usize], f: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let x = random_tensor(rng, a);
    let y = random_tensor(rng, b);
    max_rel_error(&[x, y], |t, v| f(t, v[0], v[1]), SUITE_STEP, seed)
}

fn random_segments(rng: &mut SplitMix64) -> Vec<Segment> {
    let count = dims(rng, 3);
    let mut segs = vec![];
    let mut start = 0;
    for _ in 0..count {
        let len = dims(rng, 4);
        segs.push(Segment { start, len });
        start += len;
    }
    segs
}

type Case = fn(&mut SplitMix64, u64) -> Result<f64>;

const CASES: [(&str, Case); 17] = [
    ("matmul", |rng, s| {
        let (m, k, n) = (dims(rng, 8), dims(rng, 8), dims(rng, 8));
        binary(rng, s, &[m, k], &[k, n], |t, a, b| t.matmul(a, b))
    }),
    ("add", |rng, s| {
        let sh = [dims(rng, 6), dims(rng, 6)];
        binary(rng, s, &sh, &sh, |t, a, b| t.add(a, b))
    }),
    ("sub", |rng, s| {
        let sh = [dims(rng, 6), dims(rng, 6)];
        binary(rng, s, &sh, &sh, |t, a, b| t.sub(a, b))
    }),
    ("mul", |rng, s| {
        let sh = [dims(rng, 6), dims(rng, 6)];
        binary(rng, s, &sh, &sh, |t, a, b| t.mul(a, b))
    }),
    ("scale", |rng, s| {
        let sh = [dims(rng, 6), dims(rng, 6)];
        let c = rng.normal();
        unary(rng, s, &sh, |t, x| t.scale(x, c))
    }),
    ("gelu", |rng, s| {
        let sh = [dims(rng, 6), dims(rng, 6)];
        unary(rng, s, &sh, |t, x| t.gelu(x))
    }),
    ("add_row", |rng, s| {
        let (r, c) = (dims(rng, 8), dims(rng, 8));
        binary(rng, s, &[r, c], &[1, c], |t, x, b| t.add_row(x, b))
    }),
    ("softmax", |rng, s| {
        let sh = [dims(rng, 7), 1 + dims(rng, 7)];
        let axis = (s % 2) as usize;
        unary(rng, s, &sh, |t, x| t.softmax(x, axis))
    }),
    ("layer_norm", |rng, s| {
        let (r, c) = (dims(rng, 6), 1 + dims(rng, 10));
        let x = random_tensor(rng, &[r, c]);
        let g = random_tensor(rng, &[1, c]);
        let b = random_tensor(rng, &[1, c]);
        max_rel_error(&[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6), SUITE_STEP, s)
    }),
    ("attention", |rng, s| {
        let segs = random_segments(rng);
        let rows: usize = segs.iter().map(|x| x.len).sum();
        let heads = dims(rng, 2);
        let dim = heads * dims(rng, 3);
        let q = random_tensor(rng, &[rows, dim]);
        let k = random_tensor(rng, &[rows, dim]);
        let v = random_tensor(rng, &[rows, dim]);
        max_rel_error(&[q, k, v], |t, x| t.attention(x[0], x[1], x[2], heads, &segs), SUITE_STEP, s)
    }),
    ("gather_rows", |rng, s| {
        let (r, c) = (dims(rng, 6), dims(rng, 6));
        let n = dims(rng, 10);
        let index: Vec<usize> = (0..n).map(|_| rng.below(r as u64) as usize).collect();
        unary(rng, s, &[r, c], |t, x| t.gather_rows(x, &index))
    }),
    ("concat_rows", |rng, s| {
        let c = dims(rng, 6);
        let (ra, rb) = (dims(rng, 5), dims(rng, 5));
        binary(rng, s, &[ra, c], &[rb, c], |t, a, b| t.concat_rows(&[a, b, a]))
    }),
    ("sum", |rng, s| {
        let sh = [dims(rng, 6), dims(rng, 6)];
        unary(rng, s, &sh, |t, x| t.sum(x))
    }),
    ("mean", |rng, s| {
        let sh = [dims(rng, 6), dims(rng, 6)];
        unary(rng, s, &sh, |t, x| t.mean(x))
    }),
    ("weighted_cross_entropy", |rng, s| {
        let (r, c) = (dims(rng, 8), 1 + dims(rng, 6));
        let labels: Vec<usize> = (0..r).map(|_| rng.below(c as u64) as usize).collect();
        let weights: Vec<f64> = (0..r).map(|_| rng.uniform()).collect();
        unary(rng, s, &[r, c], |t, x| t.weighted_cross_entropy(x, &labels, &weights))
    }),
    ("masked_mse", |rng, s| {
        let (r, c) = (1 + dims(rng, 8), dims(rng, 6));
        let target = random_tensor(rng, &[r, c]);
        let k = dims(rng, r as u64);
        let rows = rng.sample_without_replacement(r, k);
        unary(rng, s, &[r, c], |t, x| t.masked_mse(x, target.clone(), &rows))
    }),
    ("gelu_softmax_chain", |rng, s| {
        let sh = [dims(rng, 6), 1 + dims(rng, 8)];
        unary(rng, s, &sh, |t, x| {
            let h = t.gelu(x)?;
            t.softmax(h, 1)
        })
    }),
];

/// Every differentiable tape op against central differences on `shapes`
/// random shape draws each (dims at most 16).
pub fn op_suite(shapes: usize) -> Result<Vec<OpReport>> {
    CASES
        .iter()
        .map(|(op, case)| {
            let mut rng = SplitMix64::stream(7, op);
            let mut worst: f64 = 0.0;
            for i in 0..shapes {
                let e = case(&mut rng, i as u64)?;
                // NaN must not hide behind max().
                worst = if e.is_finite() { worst.max(e) } else { f64::INFINITY };
            }
            Ok(OpReport { op, shapes, worst })
        })
        .collect()
}
