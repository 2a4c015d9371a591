//! Run directories: every pipeline stage reads its inputs from and writes its
//! artifacts under one root.
//!
//! ```text
//! world/        world.json facts.jsonl dataset.jsonl heldout.jsonl
//! base/         model.{json,bin} pretrain.json losses.csv
//! localize/     report.json report.txt
//! edit/<name>/  adapter.{json,bin} [stage1_adapter, merged] run.json losses_<stage>.csv
//! eval/<name>/  metrics.json records.csv eval.json
//! report/       comparison.csv comparison.txt
//! ```

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use factlab_tensor::Real;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, read_json, save_model, sha256_hex, write_json, ArtifactManifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DecodeMode, LatentStats, Metrics};
use crate::localize::{localize, LocalizationReport, LocalizeConfig};
use crate::model::{all_modules, ModelConfig, Transformer};
use crate::peft::{inject, load_adapter, save_adapter, train_adapter, AdaptedModel, AdapterSet, Ia3Adapter, LossCurve};
use crate::pipeline::{
    pretrain_with_progress, resolve_targets, run_direct, run_stage1, EditConfig, GateStatus, PretrainConfig, StageRecord, Strategy,
    TargetMode,
};
use crate::world::{generate_world, read_jsonl, Example, FactWorld, WorldConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (f32 | f64)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// 10 sampled repeats per paraphrase at temperature 0.7 instead of one greedy pass.
    pub sampled_repeats: bool,
    pub seed: u64,
}

impl EvalConfig {
    pub fn decode_mode(&self) -> DecodeMode {
        if self.sampled_repeats {
            DecodeMode::sampled_repeats(self.seed)
        } else {
            DecodeMode::Greedy
        }
    }
}

/// Everything a run depends on; defaults reproduce the reference experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub precision: Precision,
    pub target_mode: TargetMode,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub localize: LocalizeConfig,
    pub edit: EditConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Sets every stage seed at once.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.model.seed = seed;
        self.pretrain.seed = seed;
        self.edit.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn world_dir(&self) -> PathBuf {
        self.root.join("world")
    }

    pub fn base_model(&self) -> PathBuf {
        self.root.join("base").join("model.json")
    }

    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("base").join("pretrain.json")
    }

    pub fn localize_report(&self) -> PathBuf {
        self.root.join("localize").join("report.json")
    }

    pub fn edit_dir(&self, strategy: Strategy) -> PathBuf {
        self.root.join("edit").join(strategy.as_str())
    }

    pub fn eval_dir(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    fn require(&self, path: PathBuf, command: &'static str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact { artifact: path, command })
        }
    }

    pub fn load_world(&self) -> Result<FactWorld> {
        self.require(self.world_dir().join("world.json"), "genworld")?;
        FactWorld::load(&self.world_dir())
    }

    pub fn world_hash(&self) -> Result<String> {
        let path = self.require(self.world_dir().join("world.json"), "genworld")?;
        Ok(sha256_hex(&fs::read(&path).map_err(|e| Error::io(&path, e))?))
    }

    pub fn load_base<F: Real>(&self) -> Result<(Transformer<F>, ArtifactManifest)> {
        load_model(&self.require(self.base_model(), "pretrain")?)
    }

    pub fn load_heldout(&self) -> Result<Vec<Example>> {
        read_jsonl(&self.require(self.world_dir().join("heldout.jsonl"), "genworld")?)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_losses(path: &Path, losses: &LossCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(["step", "loss"]).map_err(|e| Error::format(path, e))?;
    for (i, l) in losses.losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])
            .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub hash: String,
    pub facts: usize,
    pub vocab_size: usize,
}

pub fn genworld(run: &RunDir, config: &PipelineConfig) -> Result<WorldSummary> {
    let world = generate_world(&config.world)?;
    world.save(&run.world_dir())?;
    Ok(WorldSummary {
        hash: run.world_hash()?,
        facts: world.facts.len(),
        vocab_size: world.vocab_size(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub parent: String,
    pub model_hash: String,
    pub steps: usize,
    pub gates: Vec<GateStatus>,
    pub heldout_perplexity: f64,
    pub config: serde_json::Value,
}

pub fn pretrain<F: Real>(run: &RunDir, config: &PipelineConfig, progress: impl FnMut(&GateStatus)) -> Result<PretrainLog> {
    let world = run.load_world()?;
    let parent = run.world_hash()?;
    let done = pretrain_with_progress::<F>(&world, &config.model, &config.pretrain, progress)?;
    let manifest = save_model(&done.model, &run.base_model(), Some(parent.clone()), config.snapshot())?;
    write_losses(&run.root.join("base").join("losses.csv"), &done.losses)?;
    let log = PretrainLog {
        parent,
        model_hash: manifest.hash().to_string(),
        steps: done.steps,
        gates: done.gates,
        heldout_perplexity: done.heldout_perplexity,
        config: config.snapshot(),
    };
    write_json(&run.pretrain_log(), &log)?;
    Ok(log)
}

pub fn run_localize<F: Real>(run: &RunDir, config: &PipelineConfig) -> Result<LocalizationReport> {
    let world = run.load_world()?;
    let (model, manifest) = run.load_base::<F>()?;
    let mut report = localize(&model, &world, &config.localize)?;
    report.parent = Some(manifest.hash().to_string());
    report.config = config.snapshot();
    let dir = run.root.join("localize");
    create_dir(&dir)?;
    report.save(&run.localize_report())?;
    write_text(&dir.join("report.txt"), &report.to_string())?;
    Ok(report)
}

/// How the adapter targets of an edit were chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSource {
    Localized,
    AllModules,
    /// Localization converged to nothing; every module was targeted.
    AllModulesFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRun {
    pub strategy: Strategy,
    pub targets: Vec<String>,
    pub target_source: TargetSource,
    /// Model the final adapter is applied to, relative to the run root.
    pub model: String,
    pub model_hash: String,
    pub adapter_hash: String,
    pub stages: Vec<StageRecord>,
    pub config: serde_json::Value,
}

impl EditRun {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

fn edit_targets(run: &RunDir, config: &PipelineConfig, model: &ModelConfig) -> Result<(Vec<String>, TargetSource)> {
    match config.target_mode {
        TargetMode::AllModules => Ok((all_modules(model), TargetSource::AllModules)),
        TargetMode::Localized => {
            let report = LocalizationReport::load(&run.require(run.localize_report(), "localize")?)?;
            match report.targets() {
                Ok(t) => Ok((resolve_targets(model, TargetMode::Localized, Some(t))?, TargetSource::Localized)),
                Err(Error::LocalizationFailed) => Ok((all_modules(model), TargetSource::AllModulesFallback)),
                Err(e) => Err(e),
            }
        }
    }
}

fn relative(run: &RunDir, path: &Path) -> String {
    path.strip_prefix(&run.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Trains one strategy from the pretrained base and writes its artifacts.
pub fn edit<F: Real>(run: &RunDir, config: &PipelineConfig, strategy: Strategy) -> Result<EditRun> {
    let world = run.load_world()?;
    let (base, base_manifest) = run.load_base::<F>()?;
    let (targets, target_source) = edit_targets(run, config, base.config())?;
    let dir = run.edit_dir(strategy);
    create_dir(&dir)?;
    let snapshot = config.snapshot();
    let train = config.edit.train_config();
    let adapter_path = dir.join("adapter.json");

    let (model_path, model_hash, adapted, stages) = match strategy {
        Strategy::UnlearnThenLearn => {
            let stage1 = run_stage1(&base, &world, &targets, &config.edit)?;
            let s1 = save_adapter(
                &stage1.adapter,
                &dir.join("stage1_adapter.json"),
                Some(&train),
                Some(base_manifest.hash().to_string()),
                snapshot.clone(),
            )?;
            let merged_path = dir.join("merged.json");
            let merged = save_model(&stage1.merged, &merged_path, Some(s1.hash().to_string()), snapshot.clone())?;
            let (_, learn) = world.build_edit_datasets()?;
            let items: Vec<&Example> = learn.iter().collect();
            let fresh = AdapterSet::Ia3(Ia3Adapter::ones(stage1.merged.config(), &targets)?);
            let mut adapted = inject(stage1.merged, fresh, &targets)?;
            let losses = train_adapter(&mut adapted, &items, &train)?;
            let learn_record = StageRecord {
                name: "learn".into(),
                adapter: "ia3".into(),
                losses,
                merge_max_diff: None,
                neither_rate: None,
            };
            (merged_path, merged.hash().to_string(), adapted, vec![stage1.record, learn_record])
        }
        direct => {
            let out = run_direct(direct, &base, &world, &targets, &config.edit)?;
            (run.base_model(), base_manifest.hash().to_string(), out.model, out.stages)
        }
    };
    let adapter = save_adapter(
        &adapted.adapter,
        &adapter_path,
        Some(&train),
        Some(model_hash.clone()),
        snapshot.clone(),
    )?;
    for s in &stages {
        write_losses(&dir.join(format!("losses_{}.csv", s.name)), &s.losses)?;
    }
    let record = EditRun {
        strategy,
        targets,
        target_source,
        model: relative(run, &model_path),
        model_hash,
        adapter_hash: adapter.hash().to_string(),
        stages,
        config: snapshot,
    };
    write_json(&dir.join("run.json"), &record)?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub name: String,
    pub model_hash: String,
    pub adapter_hash: Option<String>,
    pub decode: DecodeMode,
    pub latent: LatentStats,
    pub config: serde_json::Value,
}

/// Evaluates an edited model (or the base when `strategy` is `None`).
pub fn run_eval<F: Real>(run: &RunDir, config: &PipelineConfig, strategy: Option<Strategy>) -> Result<Metrics> {
    let world = run.load_world()?;
    let heldout = run.load_heldout()?;
    let mode = config.eval.decode_mode();
    let (name, report, model_hash, adapter_hash) = match strategy {
        None => {
            let (model, manifest) = run.load_base::<F>()?;
            let report = evaluate(&model, &world, &heldout, &mode)?;
            ("base".to_string(), report, manifest.hash().to_string(), None)
        }
        Some(s) => {
            let command = match s {
                Strategy::DirectLora => "edit --strategy direct-lora",
                Strategy::DirectIa3 => "edit --strategy direct-ia3",
                Strategy::UnlearnThenLearn => "edit --strategy unlearn-then-learn",
            };
            let dir = run.edit_dir(s);
            let record = EditRun::load(&run.require(dir.join("run.json"), command)?)?;
            let (model, manifest) = load_model::<F>(&run.root.join(&record.model))?;
            let (adapter, adapter_manifest) = load_adapter::<F>(&dir.join("adapter.json"))?;
            if adapter_manifest.parent.as_deref() != Some(manifest.hash()) {
                return Err(Error::format(dir.join("adapter.json"), "adapter parent does not match its model"));
            }
            let adapted = inject(model, adapter, &record.targets)?;
            let report = evaluate(&adapted, &world, &heldout, &mode)?;
            (
                s.as_str().to_string(),
                report,
                manifest.hash().to_string(),
                Some(adapter_manifest.hash().to_string()),
            )
        }
    };
    let dir = run.eval_dir(&name);
    report.save(&dir)?;
    write_json(
        &dir.join("eval.json"),
        &EvalLog {
            name,
            model_hash,
            adapter_hash,
            decode: report.decode,
            latent: report.latent.clone(),
            config: config.snapshot(),
        },
    )?;
    Ok(report.metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub f2_accuracy: f64,
    pub f1_forget_rate: f64,
    pub fcontrol_accuracy: f64,
    pub heldout_perplexity: f64,
    /// Edited over base held-out perplexity.
    pub perplexity_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, strategy: Strategy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy.as_str())
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        writeln!(
            s,
            "{:<20} {:>13} {:>15} {:>17}",
            "strategy", "f2_accuracy", "f1_forget_rate", "fcontrol_accuracy"
        )?;
        for r in &self.rows {
            writeln!(
                s,
                "{:<20} {:>13.4} {:>15.4} {:>17.4}",
                r.strategy, r.f2_accuracy, r.f1_forget_rate, r.fcontrol_accuracy
            )?;
        }
        f.write_str(&s)
    }
}

/// Collects evaluated strategies in table order and writes the comparison.
pub fn report(run: &RunDir) -> Result<Comparison> {
    let base_ppl = read_json::<PretrainLog>(&run.pretrain_log()).ok().map(|l| l.heldout_perplexity);
    let mut rows = Vec::new();
    for s in Strategy::ALL {
        let path = run.eval_dir(s.as_str()).join("metrics.json");
        if !path.exists() {
            continue;
        }
        let m: Metrics = read_json(&path)?;
        rows.push(ComparisonRow {
            strategy: s.as_str().to_string(),
            f2_accuracy: m.f2_accuracy,
            f1_forget_rate: m.f1_forget_rate,
            fcontrol_accuracy: m.fcontrol_accuracy,
            heldout_perplexity: m.heldout_perplexity,
            perplexity_ratio: base_ppl.map(|b| m.heldout_perplexity / b),
        });
    }
    if rows.is_empty() {
        return Err(Error::MissingArtifact {
            artifact: run.eval_dir(Strategy::UnlearnThenLearn.as_str()).join("metrics.json"),
            command: "eval --strategy <strategy>",
        });
    }
    let comparison = Comparison { rows };
    let dir = run.report_dir();
    create_dir(&dir)?;
    let path = dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    for r in &comparison.rows {
        w.serialize(r).map_err(|e| Error::format(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_text(&dir.join("comparison.txt"), &comparison.to_string())?;
    Ok(comparison)
}

/// Edits and evaluates every strategy from the same base, then reports.
pub fn compare_strategies<F: Real>(run: &RunDir, config: &PipelineConfig) -> Result<Comparison> {
    for s in Strategy::ALL {
        edit::<F>(run, config, s)?;
        run_eval::<F>(run, config, Some(s))?;
    }
    report(run)
}

/// World, base, localization and the three-way comparison in one call.
pub fn run_all<F: Real>(run: &RunDir, config: &PipelineConfig) -> Result<Comparison> {
    genworld(run, config)?;
    pretrain::<F>(run, config, |_| {})?;
    run_localize::<F>(run, config)?;
    compare_strategies::<F>(run, config)
}

/// Reassembles a saved edit.
pub fn load_edited<F: Real>(run: &RunDir, strategy: Strategy) -> Result<AdaptedModel<F>> {
    let dir = run.edit_dir(strategy);
    let record = EditRun::load(&run.require(dir.join("run.json"), "edit")?)?;
    let (model, _) = load_model::<F>(&run.root.join(&record.model))?;
    let (adapter, _) = load_adapter::<F>(&dir.join("adapter.json"))?;
    inject(model, adapter, &record.targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_world_names_genworld() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDir::new(tmp.path());
        let err = pretrain::<f32>(&run, &PipelineConfig::default(), |_| {}).unwrap_err();
        assert!(err.to_string().contains("factlab genworld"), "{err}");
    }

    #[test]
    fn missing_base_names_pretrain() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDir::new(tmp.path());
        genworld(&run, &PipelineConfig::default()).unwrap();
        let err = run_localize::<f32>(&run, &PipelineConfig::default()).unwrap_err();
        assert!(err.to_string().contains("factlab pretrain"), "{err}");
    }

    #[test]
    fn report_without_evals_names_eval() {
        let tmp = tempfile::tempdir().unwrap();
        let err = report(&RunDir::new(tmp.path())).unwrap_err();
        assert!(err.to_string().contains("factlab eval"), "{err}");
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = PipelineConfig::default().with_seed(9);
        let back: PipelineConfig = serde_json::from_value(c.snapshot()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.world.seed, 9);
    }
}
