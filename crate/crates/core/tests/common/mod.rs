#![allow(dead_code)]

use factlab::{ModelConfig, Transformer};
use factlab_tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 11,
        max_seq: 10,
        seed: 3,
    }
}

/// A model with O(1) weights so every pathway carries signal.
pub fn random_model<F: Real>(config: ModelConfig, seed: u64) -> Transformer<F> {
    let mut model = Transformer::<F>::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params_mut().iter_mut() {
        let (lo, hi) = if name.contains("norm") { (0.5, 1.5) } else { (-0.6, 0.6) };
        t.data_mut().iter_mut().for_each(|x| *x = F::of(rng.gen_range(lo..hi)));
    }
    model
}

pub fn tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// `x · wᵀ` with `w` stored `[out, in]`.
pub fn linear(x: &[Vec<f64>], w: &Tensor<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| (0..w.rows()).map(|o| w.row(o).iter().zip(row).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

pub fn rms_norm(x: &[Vec<f64>], w: &Tensor<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|a| a * a).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + 1e-5).sqrt();
            row.iter().zip(w.data()).map(|(a, g)| a * inv * g).collect()
        })
        .collect()
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
