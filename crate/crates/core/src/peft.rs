//! IA³ and LoRA adapters over a frozen base model.
//!
//! IA³ rescales the output of each targeted projection, `y = l ⊙ (W·x)`, with
//! `l` initialized to ones; because the scaling is per output row it folds
//! exactly into the weight as `W ← diag(l)·W`. LoRA adds
//! `(alpha / r)·B·(A·x)` with `B` initialized to zero.

use std::collections::BTreeMap;
use std::path::Path;

use factlab_tensor::{Adam, AdamConfig, Real, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_artifact, write_artifact, ArtifactManifest};
use crate::error::{Error, Result};
use crate::model::{parse_module, GraphOptions, LanguageModel, ModelConfig, TrainBatch, TrainItem, Trainable, Transformer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Ia3,
    Lora,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ia3Adapter<F> {
    /// Module name → scaling vector over the module's output dimension.
    pub scales: BTreeMap<String, Tensor<F>>,
    pub trained: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule<F> {
    /// `[r × d_in]`
    pub a: Tensor<F>,
    /// `[d_out × r]`
    pub b: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F> {
    pub modules: BTreeMap<String, LoraModule<F>>,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdapterSet<F> {
    Ia3(Ia3Adapter<F>),
    Lora(LoraAdapter<F>),
}

fn module_dims(config: &ModelConfig, name: &str) -> Result<(usize, usize)> {
    let (_, kind) = parse_module(name).ok_or_else(|| Error::Registry(name.to_string()))?;
    let layer = parse_module(name).unwrap().0;
    if layer >= config.n_layers {
        return Err(Error::Registry(name.to_string()));
    }
    Ok(kind.weight_shape(config))
}

impl<F: Real> Ia3Adapter<F> {
    pub fn ones(config: &ModelConfig, targets: &[String]) -> Result<Self> {
        let mut scales = BTreeMap::new();
        for name in targets {
            let (d_out, _) = module_dims(config, name)?;
            scales.insert(name.clone(), Tensor::ones(vec![d_out]));
        }
        Ok(Self { scales, trained: false })
    }
}

impl<F: Real> LoraAdapter<F> {
    /// `A ~ U(−1/√d_in, 1/√d_in)`, `B = 0`.
    pub fn new(config: &ModelConfig, targets: &[String], rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Adapter("LoRA rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modules = BTreeMap::new();
        for name in targets {
            let (d_out, d_in) = module_dims(config, name)?;
            let bound = 1.0 / (d_in as f64).sqrt();
            let a = Tensor::from_fn(vec![rank, d_in], |_| F::of(rng.gen_range(-bound..bound)));
            modules.insert(
                name.clone(),
                LoraModule {
                    a,
                    b: Tensor::zeros(vec![d_out, rank]),
                },
            );
        }
        Ok(Self { modules, rank, alpha })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapter deltas bound to tape leaves for one forward pass.
pub enum BoundDelta {
    Ia3 { scale: Var },
    Lora { a: Var, b: Var, scaling: f64 },
}

pub struct BoundAdapter {
    pub deltas: BTreeMap<String, BoundDelta>,
    pub params: BTreeMap<String, Var>,
}

const IA3_SUFFIX: &str = "ia3_l";
const LORA_A_SUFFIX: &str = "lora_A";
const LORA_B_SUFFIX: &str = "lora_B";

impl<F: Real> AdapterSet<F> {
    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterSet::Ia3(_) => AdapterKind::Ia3,
            AdapterSet::Lora(_) => AdapterKind::Lora,
        }
    }

    pub fn targets(&self) -> Vec<String> {
        match self {
            AdapterSet::Ia3(a) => a.scales.keys().cloned().collect(),
            AdapterSet::Lora(a) => a.modules.keys().cloned().collect(),
        }
    }

    /// Trainable tensors under `{module}.{ia3_l|lora_A|lora_B}` names.
    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        match self {
            AdapterSet::Ia3(a) => a.scales.iter().map(|(m, t)| (format!("{m}.{IA3_SUFFIX}"), t)).collect(),
            AdapterSet::Lora(a) => a
                .modules
                .iter()
                .flat_map(|(m, lm)| [(format!("{m}.{LORA_A_SUFFIX}"), &lm.a), (format!("{m}.{LORA_B_SUFFIX}"), &lm.b)])
                .collect(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        match self {
            AdapterSet::Ia3(a) => a.scales.iter_mut().map(|(m, t)| (format!("{m}.{IA3_SUFFIX}"), t)).collect(),
            AdapterSet::Lora(a) => a
                .modules
                .iter_mut()
                .flat_map(|(m, lm)| {
                    [
                        (format!("{m}.{LORA_A_SUFFIX}"), &mut lm.a),
                        (format!("{m}.{LORA_B_SUFFIX}"), &mut lm.b),
                    ]
                })
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub(crate) fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Result<BoundAdapter> {
        let mut deltas = BTreeMap::new();
        let mut params = BTreeMap::new();
        match self {
            AdapterSet::Ia3(a) => {
                for (module, l) in &a.scales {
                    let scale = tape.leaf(l.clone(), trainable)?;
                    params.insert(format!("{module}.{IA3_SUFFIX}"), scale);
                    deltas.insert(module.clone(), BoundDelta::Ia3 { scale });
                }
            }
            AdapterSet::Lora(lora) => {
                for (module, lm) in &lora.modules {
                    let a = tape.leaf(lm.a.clone(), trainable)?;
                    let b = tape.leaf(lm.b.clone(), trainable)?;
                    params.insert(format!("{module}.{LORA_A_SUFFIX}"), a);
                    params.insert(format!("{module}.{LORA_B_SUFFIX}"), b);
                    deltas.insert(
                        module.clone(),
                        BoundDelta::Lora {
                            a,
                            b,
                            scaling: lora.scaling(),
                        },
                    );
                }
            }
        }
        Ok(BoundAdapter { deltas, params })
    }

    /// Checks every module exists in `config` with matching dimensions.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        match self {
            AdapterSet::Ia3(a) => {
                for (name, l) in &a.scales {
                    let (d_out, _) = module_dims(config, name)?;
                    if l.shape() != [d_out] {
                        return Err(Error::Adapter(format!("{name}: IA³ vector {:?}, module output {d_out}", l.shape())));
                    }
                }
            }
            AdapterSet::Lora(lora) => {
                for (name, lm) in &lora.modules {
                    let (d_out, d_in) = module_dims(config, name)?;
                    if lm.a.shape() != [lora.rank, d_in] || lm.b.shape() != [d_out, lora.rank] {
                        return Err(Error::Adapter(format!(
                            "{name}: LoRA A {:?} / B {:?} against module [{d_out}x{d_in}] rank {}",
                            lm.a.shape(),
                            lm.b.shape(),
                            lora.rank
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A frozen base model with one active adapter.
#[derive(Clone, Debug)]
pub struct AdaptedModel<F> {
    pub base: Transformer<F>,
    pub adapter: AdapterSet<F>,
}

/// Attaches `adapter` to `model`. The adapter's module set must equal `targets`.
pub fn inject<F: Real>(model: Transformer<F>, adapter: AdapterSet<F>, targets: &[String]) -> Result<AdaptedModel<F>> {
    for t in targets {
        if !model.params().contains(t) || parse_module(t).is_none() {
            return Err(Error::Registry(t.clone()));
        }
    }
    let mut want: Vec<String> = targets.to_vec();
    want.sort();
    want.dedup();
    if adapter.targets() != want {
        return Err(Error::Adapter(format!(
            "adapter modules {:?} differ from targets {:?}",
            adapter.targets(),
            want
        )));
    }
    adapter.check_against(model.config())?;
    Ok(AdaptedModel { base: model, adapter })
}

impl<F: Real> AdaptedModel<F> {
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        let opts = GraphOptions {
            adapter: Some(&self.adapter),
            ..GraphOptions::default()
        };
        Ok(self.base.run(tokens, &opts)?.0)
    }
}

impl<F: Real> LanguageModel<F> for AdaptedModel<F> {
    fn vocab_size(&self) -> usize {
        self.base.config().vocab_size
    }

    fn max_seq(&self) -> usize {
        self.base.config().max_seq
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        self.forward(tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 5e-5,
            batch_size: 1,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Mean of the final `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }
}

/// Epoch-shuffled index stream: each pass visits every example once.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub(crate) fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

pub(crate) fn divergence(step: usize, err: Error) -> Error {
    match err {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Divergence { step, loss: f64::NAN },
        other => other,
    }
}

/// Trains only the adapter tensors with Adam on masked next-token loss.
pub fn train_adapter<F: Real, T: TrainItem + ?Sized>(
    adapted: &mut AdaptedModel<F>,
    dataset: &[&T],
    config: &AdapterTrainConfig,
) -> Result<LossCurve> {
    if dataset.is_empty() {
        return Err(Error::Input("adapter training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut adam = Adam::<F>::new(AdamConfig::with_lr(config.lr));
    let mut sampler = EpochSampler::new(dataset.len(), config.seed);
    let mut curve = LossCurve::default();
    for step in 0..config.steps {
        let picks = sampler.take(config.batch_size);
        let items: Vec<&T> = picks.iter().map(|&i| dataset[i]).collect();
        let batch = TrainBatch::from_items(&items)?;
        let mut tape = Tape::new();
        let opts = GraphOptions {
            adapter: Some(&adapted.adapter),
            trainable: Trainable::Adapter,
            ..GraphOptions::default()
        };
        let graph = adapted
            .base
            .build_graph(&mut tape, &batch.inputs, &opts)
            .map_err(|e| divergence(step, e))?;
        let loss = tape
            .cross_entropy(graph.logits, &batch.targets, &batch.mask)
            .map_err(|e| divergence(step, e.into()))?;
        let loss_value = tape.value(loss).item()?.as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        curve.losses.push(loss_value);
        let mut grads = tape.backward(loss)?;
        let mut owned = Vec::new();
        for (name, var) in &graph.adapter_params {
            let g = grads.take(*var).unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape().to_vec()));
            owned.push((name.clone(), g));
        }
        let mut tensors = adapted.adapter.tensors_mut();
        let updates = tensors.iter_mut().zip(&owned).map(|((name, t), (gname, g))| {
            debug_assert_eq!(name, gname);
            (name.as_str(), &mut **t, g)
        });
        adam.step(updates)?;
    }
    if let AdapterSet::Ia3(a) = &mut adapted.adapter {
        a.trained = a.trained || config.steps > 0;
    }
    Ok(curve)
}

/// Folds an IA³ adapter into the base weights (`W ← diag(l)·W`) and drops it.
pub fn merge_and_unload<F: Real>(adapted: AdaptedModel<F>) -> Result<Transformer<F>> {
    let AdaptedModel { mut base, adapter } = adapted;
    let AdapterSet::Ia3(ia3) = adapter else {
        return Err(Error::UnsupportedMerge(
            "merge_and_unload takes an IA³ adapter; use merge_lora".into(),
        ));
    };
    for (name, l) in &ia3.scales {
        let w = base.params_mut().get_mut(name)?;
        for (r, &s) in l.data().iter().enumerate() {
            w.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(base)
}

/// Folds a LoRA adapter into the base weights (`W ← W + (alpha/r)·B·A`).
pub fn merge_lora<F: Real>(adapted: AdaptedModel<F>) -> Result<Transformer<F>> {
    let AdaptedModel { mut base, adapter } = adapted;
    let AdapterSet::Lora(lora) = adapter else {
        return Err(Error::UnsupportedMerge("merge_lora takes a LoRA adapter".into()));
    };
    let scaling = F::of(lora.scaling());
    for (name, lm) in &lora.modules {
        let w = base.params_mut().get_mut(name)?;
        let (d_out, d_in) = (w.rows(), w.cols());
        let mut delta = vec![F::zero(); d_out * d_in];
        F::gemm(
            d_out,
            lora.rank,
            d_in,
            lm.b.data(),
            (lora.rank, 1),
            lm.a.data(),
            (d_in, 1),
            &mut delta,
            false,
        );
        for (x, &dx) in w.data_mut().iter_mut().zip(&delta) {
            *x += scaling * dx;
        }
    }
    Ok(base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub kind: AdapterKind,
    pub targets: Vec<AdapterTarget>,
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub trained: bool,
    pub training: Option<AdapterTrainConfig>,
}

pub fn save_adapter<F: Real>(
    adapter: &AdapterSet<F>,
    path: &Path,
    training: Option<&AdapterTrainConfig>,
    parent: Option<String>,
    config: serde_json::Value,
) -> Result<ArtifactManifest> {
    let (rank, alpha, trained) = match adapter {
        AdapterSet::Ia3(a) => (None, None, a.trained),
        AdapterSet::Lora(a) => (Some(a.rank), Some(a.alpha), true),
    };
    let targets = match adapter {
        AdapterSet::Ia3(a) => a
            .scales
            .iter()
            .map(|(n, t)| AdapterTarget {
                name: n.clone(),
                dims: t.shape().to_vec(),
            })
            .collect(),
        AdapterSet::Lora(a) => a
            .modules
            .iter()
            .map(|(n, m)| AdapterTarget {
                name: n.clone(),
                dims: vec![m.b.rows(), m.a.cols()],
            })
            .collect(),
    };
    let meta = AdapterMeta {
        kind: adapter.kind(),
        targets,
        rank,
        alpha,
        trained,
        training: training.cloned(),
    };
    let tensors = adapter.tensors();
    write_artifact(
        path,
        "adapter",
        parent,
        config,
        serde_json::to_value(&meta).expect("meta serializes"),
        tensors.iter().map(|(n, t)| (n.as_str(), *t)),
    )
}

pub fn load_adapter<F: Real>(path: &Path) -> Result<(AdapterSet<F>, ArtifactManifest)> {
    let (manifest, mut tensors) = read_artifact::<F>(path, "adapter")?;
    let meta: AdapterMeta = serde_json::from_value(manifest.meta.clone()).map_err(|e| Error::format(path, e))?;
    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
    };
    let adapter = match meta.kind {
        AdapterKind::Ia3 => {
            let mut scales = BTreeMap::new();
            for t in &meta.targets {
                scales.insert(t.name.clone(), take(format!("{}.{IA3_SUFFIX}", t.name))?);
            }
            AdapterSet::Ia3(Ia3Adapter {
                scales,
                trained: meta.trained,
            })
        }
        AdapterKind::Lora => {
            let rank = meta.rank.ok_or_else(|| Error::format(path, "LoRA manifest without rank"))?;
            let alpha = meta.alpha.ok_or_else(|| Error::format(path, "LoRA manifest without alpha"))?;
            let mut modules = BTreeMap::new();
            for t in &meta.targets {
                let a = take(format!("{}.{LORA_A_SUFFIX}", t.name))?;
                let b = take(format!("{}.{LORA_B_SUFFIX}", t.name))?;
                modules.insert(t.name.clone(), LoraModule { a, b });
            }
            AdapterSet::Lora(LoraAdapter { modules, rank, alpha })
        }
    };
    Ok((adapter, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::module_name;
    use crate::model::ModuleKind;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 9,
            max_seq: 8,
            seed: 5,
        }
    }

    #[test]
    fn ones_ia3_is_bitwise_identity() {
        let model = Transformer::<f32>::new(tiny()).unwrap();
        let targets = crate::model::all_modules(&tiny());
        let base = model.forward(&[1, 2, 3]).unwrap();
        let adapted = inject(model, AdapterSet::Ia3(Ia3Adapter::ones(&tiny(), &targets).unwrap()), &targets).unwrap();
        assert_eq!(adapted.forward(&[1, 2, 3]).unwrap(), base);
    }

    #[test]
    fn inject_rejects_unknown_or_mismatched_targets() {
        let model = Transformer::<f32>::new(tiny()).unwrap();
        let good = vec![module_name(0, ModuleKind::DownProj)];
        let adapter = AdapterSet::Ia3(Ia3Adapter::ones(&tiny(), &good).unwrap());
        let unknown = vec!["layers.0.mlp.nope".to_string()];
        assert!(matches!(inject(model.clone(), adapter.clone(), &unknown), Err(Error::Registry(_))));
        let other = vec![module_name(1, ModuleKind::DownProj)];
        assert!(matches!(inject(model.clone(), adapter, &other), Err(Error::Adapter(_))));

        let mut bad = Ia3Adapter::<f32>::ones(&tiny(), &good).unwrap();
        bad.scales.insert(good[0].clone(), Tensor::ones(vec![3]));
        assert!(matches!(inject(model, AdapterSet::Ia3(bad), &good), Err(Error::Adapter(_))));
    }

    #[test]
    fn lora_rank_zero_is_rejected() {
        let t = vec![module_name(0, ModuleKind::OProj)];
        assert!(LoraAdapter::<f32>::new(&tiny(), &t, 0, 8.0, 1).is_err());
    }

    #[test]
    fn merge_of_lora_adapter_via_ia3_path_is_unsupported() {
        let model = Transformer::<f32>::new(tiny()).unwrap();
        let t = vec![module_name(0, ModuleKind::OProj)];
        let lora = AdapterSet::Lora(LoraAdapter::new(&tiny(), &t, 2, 4.0, 1).unwrap());
        let adapted = inject(model, lora, &t).unwrap();
        assert!(matches!(merge_and_unload(adapted), Err(Error::UnsupportedMerge(_))));
    }

    #[test]
    fn ones_merge_leaves_weights_bitwise() {
        let model = Transformer::<f32>::new(tiny()).unwrap();
        let targets = crate::model::all_modules(&tiny());
        let adapted = inject(
            model.clone(),
            AdapterSet::Ia3(Ia3Adapter::ones(&tiny(), &targets).unwrap()),
            &targets,
        )
        .unwrap();
        let merged = merge_and_unload(adapted).unwrap();
        assert_eq!(merged, model);
    }

    #[test]
    fn double_merge_scales_by_square() {
        let model = Transformer::<f64>::new(tiny()).unwrap();
        let name = module_name(1, ModuleKind::GateUpProj);
        let t = vec![name.clone()];
        let mut ia3 = Ia3Adapter::<f64>::ones(&tiny(), &t).unwrap();
        let l = Tensor::from_fn(vec![32], |i| 0.5 + 0.05 * i as f64);
        ia3.scales.insert(name.clone(), l.clone());
        let once = merge_and_unload(inject(model.clone(), AdapterSet::Ia3(ia3.clone()), &t).unwrap()).unwrap();
        let twice = merge_and_unload(inject(once, AdapterSet::Ia3(ia3), &t).unwrap()).unwrap();
        let w0 = model.params().get(&name).unwrap();
        let w2 = twice.params().get(&name).unwrap();
        for r in 0..32 {
            let s = l.data()[r] * l.data()[r];
            for (a, b) in w0.row(r).iter().zip(w2.row(r)) {
                assert!((a * s - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_steps_leave_adapter_unchanged() {
        struct Item(Vec<usize>, Vec<bool>);
        impl TrainItem for Item {
            fn tokens(&self) -> &[usize] {
                &self.0
            }
            fn mask(&self) -> &[bool] {
                &self.1
            }
        }
        let model = Transformer::<f32>::new(tiny()).unwrap();
        let t = vec![module_name(0, ModuleKind::QkvProj)];
        let adapter = AdapterSet::Ia3(Ia3Adapter::ones(&tiny(), &t).unwrap());
        let mut adapted = inject(model, adapter.clone(), &t).unwrap();
        let item = Item(vec![1, 2, 3], vec![false, true, true]);
        let data = [&item];
        let config = AdapterTrainConfig {
            steps: 0,
            ..AdapterTrainConfig::default()
        };
        let curve = train_adapter(&mut adapted, &data, &config).unwrap();
        assert!(curve.losses.is_empty());
        assert_eq!(adapted.adapter, adapter);
        let empty: [&Item; 0] = [];
        assert!(train_adapter(&mut adapted, &empty, &config).is_err());
    }

    #[test]
    fn epoch_sampler_covers_each_pass() {
        let mut s = EpochSampler::new(5, 1);
        for _ in 0..3 {
            let mut pass = s.take(5);
            pass.sort();
            assert_eq!(pass, vec![0, 1, 2, 3, 4]);
        }
    }
}
