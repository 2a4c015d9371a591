//! Decoder-only transformer with a fused-projection parameter layout.
//!
//! Per layer: pre-norm attention with a fused `qkv_proj` and an `o_proj`,
//! then a pre-norm SwiGLU MLP with a fused `gate_up_proj` (gate half first)
//! and a `down_proj`. Weights are stored output-major (`[out, in]`).
//! Positions use learned absolute embeddings; `lm_head` is untied.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use factlab_tensor::{Real, Segment, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hooks::{ActivationCache, HookPoint};
use crate::peft::{AdapterSet, BoundDelta};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 0,
            max_seq: 64,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ModelConfig(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::ModelConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// The four adaptable projections of each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    QkvProj,
    OProj,
    GateUpProj,
    DownProj,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [ModuleKind::QkvProj, ModuleKind::OProj, ModuleKind::GateUpProj, ModuleKind::DownProj];

    pub fn suffix(self) -> &'static str {
        match self {
            ModuleKind::QkvProj => "self_attn.qkv_proj",
            ModuleKind::OProj => "self_attn.o_proj",
            ModuleKind::GateUpProj => "mlp.gate_up_proj",
            ModuleKind::DownProj => "mlp.down_proj",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, ModuleKind::QkvProj | ModuleKind::OProj)
    }

    /// `(out, in)` weight shape.
    pub fn weight_shape(self, config: &ModelConfig) -> (usize, usize) {
        let (d, f) = (config.d_model, config.d_ff);
        match self {
            ModuleKind::QkvProj => (3 * d, d),
            ModuleKind::OProj => (d, d),
            ModuleKind::GateUpProj => (2 * f, d),
            ModuleKind::DownProj => (d, f),
        }
    }
}

pub fn module_name(layer: usize, kind: ModuleKind) -> String {
    format!("layers.{layer}.{}", kind.suffix())
}

/// Inverse of [`module_name`].
pub fn parse_module(name: &str) -> Option<(usize, ModuleKind)> {
    let rest = name.strip_prefix("layers.")?;
    let (layer, suffix) = rest.split_once('.')?;
    let layer = layer.parse().ok()?;
    ModuleKind::ALL.into_iter().find(|k| k.suffix() == suffix).map(|k| (layer, k))
}

/// Every adaptable module name, layer-major.
pub fn all_modules(config: &ModelConfig) -> Vec<String> {
    (0..config.n_layers)
        .flat_map(|l| ModuleKind::ALL.into_iter().map(move |k| module_name(l, k)))
        .collect()
}

fn norm_name(layer: usize, which: &str) -> String {
    format!("norm.{layer}.{which}")
}

/// Canonical parameter name → tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRegistry<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamRegistry<F> {
    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors.get(name).ok_or_else(|| Error::Registry(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Registry(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in t.data() {
                x.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<F>> {
        self.tensors
    }
}

/// Expected shape of every canonical parameter.
pub fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    let (d, v) = (config.d_model, config.vocab_size);
    out.insert("embed".to_string(), vec![v, d]);
    out.insert("pos_embed".to_string(), vec![config.max_seq, d]);
    out.insert("lm_head".to_string(), vec![v, d]);
    out.insert("norm.final".to_string(), vec![d]);
    for layer in 0..config.n_layers {
        out.insert(norm_name(layer, "attn"), vec![d]);
        out.insert(norm_name(layer, "mlp"), vec![d]);
        for kind in ModuleKind::ALL {
            let (o, i) = kind.weight_shape(config);
            out.insert(module_name(layer, kind), vec![o, i]);
        }
    }
    out
}

/// Several token sequences packed row-wise for one forward pass.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl PackedBatch {
    pub fn new<S: AsRef<[usize]>>(sequences: &[S]) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        for seq in sequences {
            let seq = seq.as_ref();
            if seq.is_empty() {
                return Err(Error::Input("empty token sequence".into()));
            }
            segments.push(Segment {
                start: tokens.len(),
                len: seq.len(),
            });
            tokens.extend_from_slice(seq);
            positions.extend(0..seq.len());
        }
        if segments.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(Self {
            tokens,
            positions,
            segments,
        })
    }

    pub fn single(tokens: &[usize]) -> Result<Self> {
        Self::new(&[tokens])
    }
}

/// Next-token training batch: inputs, shifted targets and a loss mask.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub inputs: PackedBatch,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TrainBatch {
    /// Each item is a full sequence plus a per-token mask; position `i`
    /// predicts token `i + 1` and counts toward the loss iff `mask[i + 1]`.
    pub fn new<S: AsRef<[usize]>, M: AsRef<[bool]>>(items: &[(S, M)]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(items.len());
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for (tokens, m) in items {
            let (tokens, m) = (tokens.as_ref(), m.as_ref());
            if tokens.len() < 2 || m.len() != tokens.len() {
                return Err(Error::Input(format!(
                    "training sequence needs >= 2 tokens and a matching mask ({} tokens, {} mask)",
                    tokens.len(),
                    m.len()
                )));
            }
            inputs.push(&tokens[..tokens.len() - 1]);
            targets.extend_from_slice(&tokens[1..]);
            mask.extend_from_slice(&m[1..]);
        }
        Ok(Self {
            inputs: PackedBatch::new(&inputs)?,
            targets,
            mask,
        })
    }
}

/// A token sequence with a per-token loss mask.
pub trait TrainItem {
    fn tokens(&self) -> &[usize];
    fn mask(&self) -> &[bool];
}

impl TrainBatch {
    pub fn from_items<T: TrainItem + ?Sized>(items: &[&T]) -> Result<Self> {
        let pairs: Vec<(&[usize], &[bool])> = items.iter().map(|i| (i.tokens(), i.mask())).collect();
        Self::new(&pairs)
    }
}

/// Which leaves of a forward graph take gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapter,
}

pub struct GraphOptions<'a, F> {
    pub adapter: Option<&'a AdapterSet<F>>,
    pub trainable: Trainable,
    pub capture: Option<&'a BTreeSet<HookPoint>>,
    pub patches: Option<&'a BTreeMap<HookPoint, Tensor<F>>>,
    pub trace: bool,
}

impl<F> Default for GraphOptions<'_, F> {
    fn default() -> Self {
        Self {
            adapter: None,
            trainable: Trainable::Nothing,
            capture: None,
            patches: None,
            trace: false,
        }
    }
}

/// Residual-stream snapshots of one forward pass, per layer.
#[derive(Clone, Debug)]
pub struct ResidualTrace<F> {
    pub resid_pre: Vec<Tensor<F>>,
    pub attn_out: Vec<Tensor<F>>,
    pub mlp_out: Vec<Tensor<F>>,
    pub resid_final: Tensor<F>,
}

pub struct Graph<F> {
    pub logits: Var,
    /// Base parameter leaves by canonical name.
    pub params: BTreeMap<String, Var>,
    /// Adapter parameter leaves by adapter parameter name.
    pub adapter_params: BTreeMap<String, Var>,
    pub cache: ActivationCache<F>,
    pub trace: Option<ResidualTrace<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<F> {
    config: ModelConfig,
    params: ParamRegistry<F>,
}

impl<F: Real> Transformer<F> {
    /// Random initialization seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, shape) in expected_shapes(&config) {
            let tensor = if name.starts_with("norm.") {
                Tensor::ones(shape)
            } else {
                let s = if name.ends_with("o_proj") || name.ends_with("down_proj") {
                    resid_std
                } else {
                    std
                };
                let normal = Normal::new(0.0, s).expect("valid std");
                Tensor::from_fn(shape, |_| F::of(normal.sample(&mut rng)))
            };
            tensors.insert(name, tensor);
        }
        Ok(Self {
            config,
            params: ParamRegistry { tensors },
        })
    }

    pub fn from_params(config: ModelConfig, tensors: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        for (name, shape) in &expected {
            let t = tensors.get(name).ok_or_else(|| Error::Registry(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ModelConfig(format!("{name}: expected shape {shape:?}, got {:?}", t.shape())));
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Registry(extra.clone()));
        }
        Ok(Self {
            config,
            params: ParamRegistry { tensors },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry<F> {
        &mut self.params
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    fn check_tokens(&self, batch: &PackedBatch) -> Result<()> {
        for seg in &batch.segments {
            if seg.len > self.config.max_seq {
                return Err(Error::Length {
                    len: seg.len,
                    max: self.config.max_seq,
                });
            }
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} >= vocab size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Records the full forward pass on `tape`.
    pub fn build_graph(&self, tape: &mut Tape<F>, batch: &PackedBatch, opts: &GraphOptions<F>) -> Result<Graph<F>> {
        self.check_tokens(batch)?;
        let single = batch.segments.len() == 1;
        if (opts.capture.is_some_and(|c| !c.is_empty()) || opts.patches.is_some_and(|p| !p.is_empty())) && !single {
            return Err(Error::Hook("capture and patching need a single sequence".into()));
        }
        if let Some(capture) = opts.capture {
            for hook in capture {
                hook.validate(&self.config)?;
            }
        }
        if let Some(patches) = opts.patches {
            let rows = batch.tokens.len();
            for (hook, patch) in patches {
                hook.validate(&self.config)?;
                let want = [rows, hook.width(&self.config)];
                if patch.shape() != want {
                    return Err(Error::Patch(format!("{hook}: expected shape {want:?}, got {:?}", patch.shape())));
                }
            }
        }

        let base_grad = opts.trainable == Trainable::Base;
        let mut params = BTreeMap::new();
        for (name, t) in self.params.iter() {
            params.insert(name.to_string(), tape.leaf(t.clone(), base_grad)?);
        }
        let (deltas, adapter_params) = match opts.adapter {
            Some(a) => {
                let bound = a.bind(tape, opts.trainable == Trainable::Adapter)?;
                (bound.deltas, bound.params)
            }
            None => (BTreeMap::new(), BTreeMap::new()),
        };

        let cfg = &self.config;
        let (d, dh, dff) = (cfg.d_model, cfg.d_head(), cfg.d_ff);
        let eps = F::of(NORM_EPS);
        let mut cache = ActivationCache::new();
        let mut trace = opts.trace.then(|| ResidualTrace {
            resid_pre: Vec::new(),
            attn_out: Vec::new(),
            mlp_out: Vec::new(),
            resid_final: Tensor::scalar(F::zero()),
        });

        let project = |tape: &mut Tape<F>, layer: usize, kind: ModuleKind, x: Var| -> Result<Var> {
            let name = module_name(layer, kind);
            let y = tape.linear(x, params[&name])?;
            Ok(match deltas.get(&name) {
                None => y,
                Some(BoundDelta::Ia3 { scale }) => tape.scale_by_vector(y, *scale)?,
                Some(BoundDelta::Lora { a, b, scaling }) => {
                    let down = tape.linear(x, *a)?;
                    let up = tape.linear(down, *b)?;
                    let scaled = tape.scale(up, F::of(*scaling))?;
                    tape.add(y, scaled)?
                }
            })
        };

        // Patch then capture, so a capture reflects what flows downstream.
        let hook = |tape: &mut Tape<F>, cache: &mut ActivationCache<F>, hp: HookPoint, x: Var, start: usize, width: usize| -> Result<Var> {
            let mut x = x;
            if let Some(patch) = opts.patches.and_then(|p| p.get(&hp)) {
                x = tape.replace_cols(x, start, patch)?;
            }
            if opts.capture.is_some_and(|c| c.contains(&hp)) {
                cache.insert(hp, tape.value(x).slice_cols(start, width)?);
            }
            Ok(x)
        };

        let tok = tape.embedding(params["embed"], &batch.tokens)?;
        let pos = tape.embedding(params["pos_embed"], &batch.positions)?;
        let mut x = tape.add(tok, pos)?;

        for layer in 0..cfg.n_layers {
            if let Some(t) = trace.as_mut() {
                t.resid_pre.push(tape.value(x).clone());
            }
            let h = tape.rms_norm(x, params[&norm_name(layer, "attn")], eps)?;
            let qkv = project(tape, layer, ModuleKind::QkvProj, h)?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, d)?;
            let mut v = tape.slice_cols(qkv, 2 * d, d)?;
            for head in 0..cfg.n_heads {
                v = hook(tape, &mut cache, HookPoint::attn_v(layer, head), v, head * dh, dh)?;
            }
            let mut z = tape.attention(q, k, v, &batch.segments, cfg.n_heads)?;
            for head in 0..cfg.n_heads {
                z = hook(tape, &mut cache, HookPoint::attn_z(layer, head), z, head * dh, dh)?;
            }
            let attn_out = project(tape, layer, ModuleKind::OProj, z)?;
            x = tape.add(x, attn_out)?;

            let h2 = tape.rms_norm(x, params[&norm_name(layer, "mlp")], eps)?;
            let pre = project(tape, layer, ModuleKind::GateUpProj, h2)?;
            let pre = hook(tape, &mut cache, HookPoint::mlp_pre(layer), pre, 0, 2 * dff)?;
            let gate = tape.slice_cols(pre, 0, dff)?;
            let up = tape.slice_cols(pre, dff, dff)?;
            let act = tape.silu(gate)?;
            let post = tape.mul(act, up)?;
            let post = hook(tape, &mut cache, HookPoint::mlp_post(layer), post, 0, dff)?;
            let mlp_out = project(tape, layer, ModuleKind::DownProj, post)?;
            x = tape.add(x, mlp_out)?;

            if let Some(t) = trace.as_mut() {
                t.attn_out.push(tape.value(attn_out).clone());
                t.mlp_out.push(tape.value(mlp_out).clone());
            }
        }
        if let Some(t) = trace.as_mut() {
            t.resid_final = tape.value(x).clone();
        }
        let xf = tape.rms_norm(x, params["norm.final"], eps)?;
        let logits = tape.linear(xf, params["lm_head"])?;
        Ok(Graph {
            logits,
            params,
            adapter_params,
            cache,
            trace,
        })
    }

    pub(crate) fn run(&self, tokens: &[usize], opts: &GraphOptions<F>) -> Result<(Tensor<F>, Graph<F>)> {
        let batch = PackedBatch::single(tokens)?;
        let mut tape = Tape::new();
        let graph = self.build_graph(&mut tape, &batch, opts)?;
        Ok((tape.value(graph.logits).clone(), graph))
    }

    /// Logits `[T × V]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        Ok(self.run(tokens, &GraphOptions::default())?.0)
    }

    pub fn forward_with_cache(&self, tokens: &[usize], hooks: &BTreeSet<HookPoint>) -> Result<(Tensor<F>, ActivationCache<F>)> {
        let opts = GraphOptions {
            capture: Some(hooks),
            ..GraphOptions::default()
        };
        let (logits, graph) = self.run(tokens, &opts)?;
        Ok((logits, graph.cache))
    }

    /// Forward pass with the given hook activations replaced.
    pub fn forward_with_patch(&self, tokens: &[usize], patches: &BTreeMap<HookPoint, Tensor<F>>) -> Result<Tensor<F>> {
        let opts = GraphOptions {
            patches: Some(patches),
            ..GraphOptions::default()
        };
        Ok(self.run(tokens, &opts)?.0)
    }

    pub fn forward_trace(&self, tokens: &[usize]) -> Result<(Tensor<F>, ResidualTrace<F>)> {
        let opts = GraphOptions {
            trace: true,
            ..GraphOptions::default()
        };
        let (logits, graph) = self.run(tokens, &opts)?;
        Ok((logits, graph.trace.expect("trace requested")))
    }
}

/// Anything that maps a token sequence to next-token logits.
pub trait LanguageModel<F: Real> {
    fn vocab_size(&self) -> usize;

    fn max_seq(&self) -> usize;

    /// Logits `[T × V]`, one row per input position.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor<F>>;

    fn next_token_logits(&self, tokens: &[usize]) -> Result<Vec<F>> {
        let logits = self.logits(tokens)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }

    /// Argmax decoding; stops after emitting `stop`, after `max_new` tokens,
    /// or when the context is full. The stop token is included.
    fn generate_greedy(&self, prompt: &[usize], max_new: usize, stop: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Input("generation prompt is empty".into()));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < self.max_seq() {
            let row = self.next_token_logits(&seq)?;
            let next = argmax(&row);
            out.push(next);
            seq.push(next);
            if next == stop {
                break;
            }
        }
        Ok(out)
    }
}

pub(crate) fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

impl<F: Real> LanguageModel<F> for Transformer<F> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq(&self) -> usize {
        self.config.max_seq
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        self.forward(tokens)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} layers, d_model {}, {} heads, d_ff {}, vocab {}, max_seq {}",
            self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size, self.max_seq
        )
    }
}
