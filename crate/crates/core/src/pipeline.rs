//! Base pretraining with an entrenchment gate, the direct-fine-tuning
//! baselines and the two-stage unlearn-then-learn edit.

use std::fmt;
use std::str::FromStr;

use factlab_tensor::{Adam, AdamConfig, Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{control_queries, eval_control, eval_fact_modulation, heldout_perplexity, DecodeMode};
use crate::model::{all_modules, GraphOptions, LanguageModel, ModelConfig, TrainBatch, Trainable, Transformer};
use crate::peft::{
    divergence, inject, merge_and_unload, train_adapter, AdaptedModel, AdapterSet, AdapterTrainConfig, EpochSampler, Ia3Adapter,
    LoraAdapter, LossCurve,
};
use crate::world::{Example, FactWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Gate is checked every `gate_interval` steps and at the budget.
    pub gate_interval: usize,
    pub f1_gate: f64,
    pub control_gate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 6000,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 100,
            clip_norm: 1.0,
            gate_interval: 250,
            f1_gate: 0.95,
            control_gate: 0.90,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    DirectLora,
    DirectIa3,
    UnlearnThenLearn,
}

impl Strategy {
    /// Row order of the comparison table.
    pub const ALL: [Strategy; 3] = [Strategy::DirectLora, Strategy::DirectIa3, Strategy::UnlearnThenLearn];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::DirectLora => "direct-lora",
            Strategy::DirectIa3 => "direct-ia3",
            Strategy::UnlearnThenLearn => "unlearn-then-learn",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s || x.as_str().replace('-', "_") == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (direct-lora | direct-ia3 | unlearn-then-learn)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    #[default]
    Localized,
    AllModules,
}

impl TargetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetMode::Localized => "localized",
            TargetMode::AllModules => "all-modules",
        }
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "localized" => Ok(TargetMode::Localized),
            "all-modules" | "all_modules" => Ok(TargetMode::AllModules),
            _ => Err(Error::Config(format!("unknown target mode {s:?} (localized | all-modules)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 5e-3,
            batch_size: 1,
            seed: 7,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }
}

impl EditConfig {
    pub fn train_config(&self) -> AdapterTrainConfig {
        AdapterTrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// Entrenchment gate attainment at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStatus {
    pub step: usize,
    pub f1_accuracy: f64,
    pub control_accuracy: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct Pretrained<F> {
    pub model: Transformer<F>,
    pub steps: usize,
    pub losses: LossCurve,
    pub gates: Vec<GateStatus>,
    pub heldout_perplexity: f64,
}

/// F1 answer accuracy on the edit paraphrases and control accuracy, greedy.
pub fn gate_status<F: Real, M: LanguageModel<F> + ?Sized>(
    model: &M,
    world: &FactWorld,
    config: &PretrainConfig,
    step: usize,
) -> Result<GateStatus> {
    let tk = &world.tokenizer;
    let m = eval_fact_modulation(model, tk, &world.edit, &world.edit.paraphrases, &DecodeMode::Greedy)?;
    let f1 = tk.id(&world.edit.f1_object)?;
    let hits = m.records.iter().filter(|r| tk.id(&r.answer).ok() == Some(f1)).count();
    let f1_accuracy = hits as f64 / m.records.len() as f64;
    let (control_accuracy, _) = eval_control(model, tk, &control_queries(world))?;
    Ok(GateStatus {
        step,
        f1_accuracy,
        control_accuracy,
        passed: f1_accuracy >= config.f1_gate && control_accuracy >= config.control_gate,
    })
}

fn clip_grads<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|g| g.l2_norm().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Trains a fresh model on the world's pretraining corpus until the
/// entrenchment gate passes; fails with the attained metrics otherwise.
pub fn pretrain_base<F: Real>(world: &FactWorld, model_config: &ModelConfig, config: &PretrainConfig) -> Result<Pretrained<F>> {
    pretrain_with_progress(world, model_config, config, |_| {})
}

pub fn pretrain_with_progress<F: Real>(
    world: &FactWorld,
    model_config: &ModelConfig,
    config: &PretrainConfig,
    mut progress: impl FnMut(&GateStatus),
) -> Result<Pretrained<F>> {
    if config.max_steps == 0 || config.batch_size == 0 || config.gate_interval == 0 {
        return Err(Error::Config(
            "pretraining budget, batch size and gate interval must be positive".into(),
        ));
    }
    let model_config = model_config.clone().with_vocab(world.vocab_size());
    let mut model = Transformer::<F>::new(model_config)?;
    let data = world.build_pretrain_dataset()?;
    let items = data.training();
    let mut adam = Adam::<F>::new(AdamConfig::with_lr(config.lr));
    let mut sampler = EpochSampler::new(items.len(), config.seed);
    let mut losses = LossCurve::default();
    let mut gates = Vec::new();
    for step in 0..config.max_steps {
        let picks = sampler.take(config.batch_size);
        let batch_items: Vec<&Example> = picks.iter().map(|&i| items[i]).collect();
        let batch = TrainBatch::from_items(&batch_items)?;
        let mut tape = Tape::new();
        let opts = GraphOptions {
            trainable: Trainable::Base,
            ..GraphOptions::default()
        };
        let graph = model
            .build_graph(&mut tape, &batch.inputs, &opts)
            .map_err(|e| divergence(step, e))?;
        let loss = tape
            .cross_entropy(graph.logits, &batch.targets, &batch.mask)
            .map_err(|e| divergence(step, e.into()))?;
        let loss_value = tape.value(loss).item()?.as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        losses.losses.push(loss_value);
        let mut grads_by_name = tape.backward(loss)?;
        let names: Vec<String> = graph.params.keys().cloned().collect();
        let mut grads: Vec<Tensor<F>> = names
            .iter()
            .map(|n| {
                grads_by_name
                    .take(graph.params[n])
                    .unwrap_or_else(|| Tensor::zeros(model.params().get(n).unwrap().shape().to_vec()))
            })
            .collect();
        clip_grads(&mut grads, config.clip_norm);
        let warm = if config.warmup_steps > 0 {
            ((step + 1) as f64 / config.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        adam.config.lr = config.lr * warm;
        let updates = model.params_mut().iter_mut().zip(&grads).map(|((n, t), g)| (n, t, g));
        adam.step(updates)?;

        let done = step + 1;
        if done % config.gate_interval == 0 || done == config.max_steps {
            let status = gate_status(&model, world, config, done)?;
            progress(&status);
            let passed = status.passed;
            gates.push(status);
            if passed {
                let heldout_perplexity = heldout_perplexity(&model, &data.heldout)?;
                return Ok(Pretrained {
                    model,
                    steps: done,
                    losses,
                    gates,
                    heldout_perplexity,
                });
            }
        }
    }
    let last = gates.last().expect("gate checked at budget");
    Err(Error::PretrainGate {
        steps: config.max_steps,
        f1_accuracy: last.f1_accuracy,
        control_accuracy: last.control_accuracy,
    })
}

/// Adapter training plus the model it was trained on.
#[derive(Clone, Debug)]
pub struct EditOutcome<F> {
    pub strategy: Strategy,
    pub targets: Vec<String>,
    /// Stage-1 merged base for the two-stage strategy, otherwise the input base.
    pub base: Transformer<F>,
    /// Final adapted model (adapter unmerged).
    pub model: AdaptedModel<F>,
    pub stages: Vec<StageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub adapter: String,
    pub losses: LossCurve,
    /// Max |adapted − merged| logit difference over the merge battery, if merged.
    pub merge_max_diff: Option<f64>,
    /// Greedy-answer state after the stage on the edit paraphrases.
    pub neither_rate: Option<f64>,
}

fn fresh_adapter<F: Real>(kind: Strategy, config: &ModelConfig, targets: &[String], edit: &EditConfig) -> Result<AdapterSet<F>> {
    Ok(match kind {
        Strategy::DirectLora => AdapterSet::Lora(LoraAdapter::new(config, targets, edit.lora_rank, edit.lora_alpha, edit.seed)?),
        _ => AdapterSet::Ia3(Ia3Adapter::ones(config, targets)?),
    })
}

pub fn resolve_targets(config: &ModelConfig, mode: TargetMode, localized: Option<&[String]>) -> Result<Vec<String>> {
    match (mode, localized) {
        (TargetMode::AllModules, _) => Ok(all_modules(config)),
        (TargetMode::Localized, Some(t)) if !t.is_empty() => Ok(t.to_vec()),
        (TargetMode::Localized, _) => Err(Error::Config("localized targeting needs a non-empty localization result".into())),
    }
}

/// Fraction of edit paraphrases whose greedy answer mentions neither object.
pub fn neither_rate<F: Real, M: LanguageModel<F> + ?Sized>(model: &M, world: &FactWorld) -> Result<f64> {
    let tk = &world.tokenizer;
    let m = eval_fact_modulation(model, tk, &world.edit, &world.edit.paraphrases, &DecodeMode::Greedy)?;
    let f2 = tk.id(&world.edit.f2_object)?;
    let neither = m
        .records
        .iter()
        .filter(|r| r.f1_forgotten == Some(true) && !tk.encode(&r.generation).map(|g| g.contains(&f2)).unwrap_or(false))
        .count();
    Ok(neither as f64 / m.records.len() as f64)
}

/// Prompts used to certify merge equivalence: the first ten edit paraphrases
/// rendered as chat prompts.
pub fn merge_battery(world: &FactWorld) -> Result<Vec<Vec<usize>>> {
    world
        .edit
        .paraphrases
        .iter()
        .take(10)
        .map(|q| world.tokenizer.encode(&crate::world::render_prompt(q)))
        .collect()
}

pub fn max_logit_diff<F: Real, A: LanguageModel<F> + ?Sized, B: LanguageModel<F> + ?Sized>(
    a: &A,
    b: &B,
    prompts: &[Vec<usize>],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in prompts {
        worst = worst.max(a.logits(p)?.max_abs_diff(&b.logits(p)?)?);
    }
    Ok(worst)
}

fn as_items(examples: &[Example]) -> Vec<&Example> {
    examples.iter().collect()
}

/// Single-stage adapter trained directly on the F2 dataset.
pub fn run_direct<F: Real>(
    strategy: Strategy,
    base: &Transformer<F>,
    world: &FactWorld,
    targets: &[String],
    edit: &EditConfig,
) -> Result<EditOutcome<F>> {
    if strategy == Strategy::UnlearnThenLearn {
        return Err(Error::Config("run_direct takes direct-lora or direct-ia3".into()));
    }
    let (_, learn) = world.build_edit_datasets()?;
    let adapter = fresh_adapter(strategy, base.config(), targets, edit)?;
    let mut adapted = inject(base.clone(), adapter, targets)?;
    let losses = train_adapter(&mut adapted, &as_items(&learn), &edit.train_config())?;
    Ok(EditOutcome {
        strategy,
        targets: targets.to_vec(),
        base: base.clone(),
        stages: vec![StageRecord {
            name: "learn".into(),
            adapter: adapter_label(&adapted.adapter),
            losses,
            merge_max_diff: None,
            neither_rate: None,
        }],
        model: adapted,
    })
}

fn adapter_label<F: Real>(a: &AdapterSet<F>) -> String {
    match a {
        AdapterSet::Ia3(_) => "ia3".into(),
        AdapterSet::Lora(_) => "lora".into(),
    }
}

/// Stage 1 (refusal IA³, merged) then Stage 2 (fresh IA³ on F2, unmerged).
pub fn run_unlearn_then_learn<F: Real>(
    base: &Transformer<F>,
    world: &FactWorld,
    targets: &[String],
    edit: &EditConfig,
) -> Result<EditOutcome<F>> {
    let stage1 = run_stage1(base, world, targets, edit)?;
    let (_, learn) = world.build_edit_datasets()?;
    let merged = stage1.merged.clone();
    let mut adapted = inject(
        merged.clone(),
        AdapterSet::Ia3(Ia3Adapter::ones(merged.config(), targets)?),
        targets,
    )?;
    let losses = train_adapter(&mut adapted, &as_items(&learn), &edit.train_config())?;
    Ok(EditOutcome {
        strategy: Strategy::UnlearnThenLearn,
        targets: targets.to_vec(),
        base: merged,
        stages: vec![
            stage1.record,
            StageRecord {
                name: "learn".into(),
                adapter: "ia3".into(),
                losses,
                merge_max_diff: None,
                neither_rate: None,
            },
        ],
        model: adapted,
    })
}

#[derive(Clone, Debug)]
pub struct Stage1<F> {
    pub adapter: AdapterSet<F>,
    pub merged: Transformer<F>,
    pub record: StageRecord,
}

/// Trains the refusal adapter, merges it, and certifies the merge.
pub fn run_stage1<F: Real>(base: &Transformer<F>, world: &FactWorld, targets: &[String], edit: &EditConfig) -> Result<Stage1<F>> {
    let (unlearn, _) = world.build_edit_datasets()?;
    let mut adapted = inject(base.clone(), AdapterSet::Ia3(Ia3Adapter::ones(base.config(), targets)?), targets)?;
    let losses = train_adapter(&mut adapted, &as_items(&unlearn), &edit.train_config())?;
    let adapter = adapted.adapter.clone();
    let battery = merge_battery(world)?;
    let merged = merge_and_unload(adapted.clone())?;
    let diff = max_logit_diff(&adapted, &merged, &battery)?;
    let neither = neither_rate(&merged, world)?;
    Ok(Stage1 {
        adapter,
        merged,
        record: StageRecord {
            name: "unlearn".into(),
            adapter: "ia3".into(),
            losses,
            merge_max_diff: Some(diff),
            neither_rate: Some(neither),
        },
    })
}

pub fn run_strategy<F: Real>(
    strategy: Strategy,
    base: &Transformer<F>,
    world: &FactWorld,
    targets: &[String],
    edit: &EditConfig,
) -> Result<EditOutcome<F>> {
    match strategy {
        Strategy::UnlearnThenLearn => run_unlearn_then_learn(base, world, targets, edit),
        direct => run_direct(direct, base, world, targets, edit),
    }
}
