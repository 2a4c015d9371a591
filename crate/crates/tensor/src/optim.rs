use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::float::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug)]
pub struct Moments<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

/// Adam with bias correction. State is keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    steps: u64,
    state: BTreeMap<String, Moments<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<F>> {
        self.state.get(name)
    }

    /// Applies one update to every `(name, param, grad)` triple. All triples
    /// share the same step counter.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<F>, &'a Tensor<F>)>,
    {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(eps);
        for (name, param, grad) in updates {
            if param.shape() != grad.shape() {
                return Err(shape_err(
                    "adam_step",
                    format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
                ));
            }
            let n = param.numel();
            let moments = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![F::zero(); n],
                v: vec![F::zero(); n],
            });
            if moments.m.len() != n {
                return Err(shape_err(
                    "adam_step",
                    format!("{name}: state holds {} values, param {n}", moments.m.len()),
                ));
            }
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(moments.m.iter_mut())
                .zip(moments.v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
