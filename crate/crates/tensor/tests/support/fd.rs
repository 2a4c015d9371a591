//! Central finite-difference oracle for tape ops.
//!
//! The oracle only evaluates forward values; it never touches the backward
//! code it is checking. Non-scalar outputs are reduced with a fixed random
//! projection so every output element contributes to the objective.

#![allow(dead_code)]

use factlab_tensor::{Real, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type OpFn<'a, F> = dyn Fn(&mut Tape<F>, &[Var]) -> Result<Var> + 'a;

fn projection<F: Real>(shape: &[usize], seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor::from_fn(shape.to_vec(), |_| F::of(rng.gen_range(-1.0..1.0)))
}

fn objective<F: Real>(inputs: &[Tensor<F>], op: &OpFn<F>, proj: Option<&Tensor<F>>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
    let out = op(&mut tape, &vars).unwrap();
    let value = tape.value(out);
    match proj {
        None => value.item().unwrap().as_f64(),
        Some(r) => value.data().iter().zip(r.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum(),
    }
}

/// Analytic gradients of the projected objective with respect to every input.
pub fn analytic<F: Real>(inputs: &[Tensor<F>], op: &OpFn<F>, seed: u64) -> (Vec<Tensor<F>>, Option<Tensor<F>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let out = op(&mut tape, &vars).unwrap();
    let (loss, proj) = if tape.value(out).is_scalar() {
        (out, None)
    } else {
        let r = projection::<F>(tape.value(out).shape(), seed);
        let rv = tape.constant(r.clone()).unwrap();
        let prod = tape.mul(out, rv).unwrap();
        (tape.sum(prod).unwrap(), Some(r))
    };
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    (g, proj)
}

pub fn numeric<F: Real>(inputs: &[Tensor<F>], op: &OpFn<F>, proj: Option<&Tensor<F>>, which: usize, step: f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    let n = inputs[which].numel();
    let mut out = Vec::with_capacity(n);
    for e in 0..n {
        let orig = inputs[which].data()[e];
        work[which].data_mut()[e] = F::of(orig.as_f64() + step);
        let hi = objective(&work, op, proj);
        work[which].data_mut()[e] = F::of(orig.as_f64() - step);
        let lo = objective(&work, op, proj);
        work[which].data_mut()[e] = orig;
        // Use the step actually representable in F.
        let h2 = F::of(orig.as_f64() + step).as_f64() - F::of(orig.as_f64() - step).as_f64();
        out.push((hi - lo) / h2);
    }
    out
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error over the inputs listed in `check` (all inputs when empty).
pub fn check<F: Real>(inputs: &[Tensor<F>], op: &OpFn<F>, step: f64, seed: u64, check: &[usize]) -> f64 {
    let (grads, proj) = analytic(inputs, op, seed);
    let which: Vec<usize> = if check.is_empty() {
        (0..inputs.len()).collect()
    } else {
        check.to_vec()
    };
    which
        .into_iter()
        .map(|i| {
            let a: Vec<f64> = grads[i].data().iter().map(|x| x.as_f64()).collect();
            let n = numeric(inputs, op, proj.as_ref(), i, step);
            relative_error(&a, &n)
        })
        .fold(0.0, f64::max)
}

pub fn random<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<F> {
    Tensor::from_fn(shape.to_vec(), |_| F::of(rng.gen_range(lo..hi)))
}
