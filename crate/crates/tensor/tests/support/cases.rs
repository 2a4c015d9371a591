//! Random case generators for every differentiable op.

#![allow(dead_code)]

use factlab_tensor::{Real, Segment, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{check, random, OpFn};

pub const CASES: usize = 100;

struct Case<F> {
    inputs: Vec<Tensor<F>>,
    op: Box<OpFn<'static, F>>,
    only: Vec<usize>,
}

fn case<F: Real>(inputs: Vec<Tensor<F>>, op: impl Fn(&mut Tape<F>, &[Var]) -> factlab_tensor::Result<Var> + 'static) -> Case<F> {
    Case {
        inputs,
        op: Box::new(op),
        only: Vec::new(),
    }
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..5)
}

fn dims2(rng: &mut ChaCha8Rng, extra_cols: usize) -> [usize; 2] {
    let r = dim(rng);
    [r, dim(rng) + extra_cols]
}

fn make_case<F: Real>(name: &str, rng: &mut ChaCha8Rng) -> Case<F> {
    match name {
        "matmul" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            case(vec![random(rng, &[m, k], -1., 1.), random(rng, &[k, n], -1., 1.)], |t, v| {
                t.matmul(v[0], v[1])
            })
        }
        "linear" => {
            let (r, i, o) = (dim(rng), dim(rng), dim(rng));
            case(vec![random(rng, &[r, i], -1., 1.), random(rng, &[o, i], -1., 1.)], |t, v| {
                t.linear(v[0], v[1])
            })
        }
        "add" | "sub" | "mul" => {
            let s = dims2(rng, 0);
            let inputs = vec![random(rng, &s, -2., 2.), random(rng, &s, -2., 2.)];
            match name {
                "add" => case(inputs, |t, v| t.add(v[0], v[1])),
                "sub" => case(inputs, |t, v| t.sub(v[0], v[1])),
                _ => case(inputs, |t, v| t.mul(v[0], v[1])),
            }
        }
        "scale_by_vector" => {
            let (r, c) = (dim(rng), dim(rng));
            case(vec![random(rng, &[r, c], -2., 2.), random(rng, &[c], 0.2, 2.)], |t, v| {
                t.scale_by_vector(v[0], v[1])
            })
        }
        "scale" => {
            let c = rng.gen_range(-3.0..3.0);
            case(
                vec![{
                    let s = dims2(rng, 0);
                    random(rng, &s, -2., 2.)
                }],
                move |t, v| t.scale(v[0], F::of(c)),
            )
        }
        "silu" => case(
            vec![{
                let s = dims2(rng, 0);
                random(rng, &s, -4., 4.)
            }],
            |t, v| t.silu(v[0]),
        ),
        "softmax_rows" => case(
            vec![{
                let s = dims2(rng, 1);
                random(rng, &s, -3., 3.)
            }],
            |t, v| t.softmax_rows(v[0]),
        ),
        "rms_norm" => {
            let (r, d) = (dim(rng), dim(rng) + 1);
            case(vec![random(rng, &[r, d], 0.3, 2.), random(rng, &[d], 0.5, 1.5)], |t, v| {
                t.rms_norm(v[0], v[1], F::of(1e-5))
            })
        }
        "cross_entropy" => {
            let (rows, vocab) = (dim(rng), dim(rng) + 1);
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..vocab)).collect();
            let mut mask: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
            mask[0] = true;
            case(vec![random(rng, &[rows, vocab], -3., 3.)], move |t, v| {
                t.cross_entropy(v[0], &targets, &mask)
            })
        }
        "embedding" => {
            let (vocab, d, n) = (dim(rng), dim(rng), dim(rng) + 1);
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
            case(vec![random(rng, &[vocab, d], -1., 1.)], move |t, v| t.embedding(v[0], &ids))
        }
        "slice_cols" => {
            let cols = dim(rng) + 1;
            let start = rng.gen_range(0..cols);
            let len = rng.gen_range(1..=cols - start);
            case(
                vec![{
                    let r = dim(rng);
                    random(rng, &[r, cols], -1., 1.)
                }],
                move |t, v| t.slice_cols(v[0], start, len),
            )
        }
        "replace_cols" => {
            let (rows, cols) = (dim(rng), dim(rng) + 1);
            let start = rng.gen_range(0..cols);
            let len = rng.gen_range(1..=cols - start);
            let patch: Tensor<F> = random(rng, &[rows, len], -1., 1.);
            case(vec![random(rng, &[rows, cols], -1., 1.)], move |t, v| {
                t.replace_cols(v[0], start, &patch)
            })
        }
        "attention" => {
            let heads = rng.gen_range(1..3);
            let dh = dim(rng);
            let mut segments = Vec::new();
            let mut start = 0;
            for _ in 0..rng.gen_range(1..3) {
                let len = rng.gen_range(1..5);
                segments.push(Segment { start, len });
                start += len;
            }
            let s = [start, heads * dh];
            let inputs = vec![random(rng, &s, -1.5, 1.5), random(rng, &s, -1.5, 1.5), random(rng, &s, -1., 1.)];
            case(inputs, move |t, v| t.attention(v[0], v[1], v[2], &segments, heads))
        }
        "sum" => case(
            vec![{
                let s = dims2(rng, 0);
                random(rng, &s, -1., 1.)
            }],
            |t, v| t.sum(v[0]),
        ),
        "select" => {
            let s = dims2(rng, 0);
            let idx = rng.gen_range(0..s[0] * s[1]);
            case(vec![random(rng, &s, -1., 1.)], move |t, v| t.select(v[0], idx))
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: &[&str] = &[
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale_by_vector",
    "scale",
    "silu",
    "softmax_rows",
    "rms_norm",
    "cross_entropy",
    "embedding",
    "slice_cols",
    "replace_cols",
    "attention",
    "sum",
    "select",
];

/// Worst relative error over `CASES` random cases of `op`.
pub fn worst_error<F: Real>(op: &str, step: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..CASES)
        .map(|i| {
            let c = make_case::<F>(op, &mut rng);
            check(&c.inputs, c.op.as_ref(), step, seed.wrapping_add(i as u64), &c.only)
        })
        .fold(0.0, f64::max)
}

/// Inputs plus the op closure, for tests that need the raw case.
pub fn make_case_for_tests<F: Real>(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<F>>, Box<OpFn<'static, F>>) {
    let c = make_case::<F>(name, rng);
    (c.inputs, c.op)
}
