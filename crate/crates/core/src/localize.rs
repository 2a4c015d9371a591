//! Circuit localization: four component-level analyses of how the model
//! recalls the edit fact, and the rule that turns them into adapter targets.
//!
//! All analyses read the answer position, i.e. the final prompt token.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use factlab_tensor::{Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_json, write_json};
use crate::error::{Error, Result};
use crate::hooks::{HookPoint, HookSite};
use crate::model::{all_modules, module_name, parse_module, GraphOptions, ModuleKind, PackedBatch, Trainable, Transformer};
use crate::world::{render_prompt, FactWorld};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ActivationMagnitude,
    OutputPatch,
    RefinedPatch,
    GradNorm,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::ActivationMagnitude,
        Metric::OutputPatch,
        Metric::RefinedPatch,
        Metric::GradNorm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::ActivationMagnitude => "activation_magnitude",
            Metric::OutputPatch => "output_patch",
            Metric::RefinedPatch => "refined_patch",
            Metric::GradNorm => "grad_norm",
        }
    }
}

/// A score for one hook site or one named weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub component: String,
    pub metric: Metric,
    pub score: f64,
}

fn last_row<F: Real>(t: &Tensor<F>) -> &[F] {
    t.row(t.rows() - 1)
}

fn mean_abs<F: Real>(xs: &[F]) -> f64 {
    xs.iter().map(|x| x.as_f64().abs()).sum::<f64>() / xs.len() as f64
}

/// Mean |hook_z| per head and mean |hook_post| per MLP at the answer position,
/// averaged over prompts.
pub fn activation_magnitude<F: Real>(model: &Transformer<F>, prompts: &[Vec<usize>]) -> Result<Vec<ComponentScore>> {
    if prompts.is_empty() {
        return Err(Error::Input("activation magnitude needs at least one prompt".into()));
    }
    let hooks: BTreeSet<HookPoint> = output_sites(model);
    let mut sums: BTreeMap<HookPoint, f64> = hooks.iter().map(|h| (*h, 0.0)).collect();
    for p in prompts {
        let (_, cache) = model.forward_with_cache(p, &hooks)?;
        for (h, t) in cache.iter() {
            *sums.get_mut(h).unwrap() += mean_abs(last_row(t));
        }
    }
    Ok(sums
        .into_iter()
        .map(|(h, s)| ComponentScore {
            component: h.to_string(),
            metric: Metric::ActivationMagnitude,
            score: s / prompts.len() as f64,
        })
        .collect())
}

/// Every hook_z head and hook_post layer.
fn output_sites<F: Real>(model: &Transformer<F>) -> BTreeSet<HookPoint> {
    HookPoint::all(model.config())
        .into_iter()
        .filter(|h| matches!(h.site, HookSite::AttnZ | HookSite::MlpPost))
        .collect()
}

/// Every hook_v head and hook_pre layer.
fn refined_sites<F: Real>(model: &Transformer<F>) -> BTreeSet<HookPoint> {
    HookPoint::all(model.config())
        .into_iter()
        .filter(|h| matches!(h.site, HookSite::AttnV | HookSite::MlpPre))
        .collect()
}

/// For each site, `clean_logit(target) − patched_logit(target)` where the
/// patched run is the clean run with that one site taken from the corrupted run.
pub fn patch_drops<F: Real>(
    model: &Transformer<F>,
    clean: &[usize],
    corrupted: &[usize],
    target: usize,
    sites: &BTreeSet<HookPoint>,
    metric: Metric,
) -> Result<Vec<ComponentScore>> {
    if clean.len() != corrupted.len() {
        return Err(Error::Alignment {
            clean: clean.len(),
            corrupted: corrupted.len(),
        });
    }
    let clean_logits = model.forward(clean)?;
    let clean_target = last_row(&clean_logits)[target].as_f64();
    let (_, corrupted_cache) = model.forward_with_cache(corrupted, sites)?;
    let mut out = Vec::with_capacity(sites.len());
    for site in sites {
        let patch = BTreeMap::from([(*site, corrupted_cache.get(site).expect("captured").clone())]);
        let patched = model.forward_with_patch(clean, &patch)?;
        out.push(ComponentScore {
            component: site.to_string(),
            metric,
            score: clean_target - last_row(&patched)[target].as_f64(),
        });
    }
    Ok(out)
}

/// Logit drops at hook_z heads and hook_post layers.
pub fn output_patch<F: Real>(model: &Transformer<F>, clean: &[usize], corrupted: &[usize], target: usize) -> Result<Vec<ComponentScore>> {
    patch_drops(model, clean, corrupted, target, &output_sites(model), Metric::OutputPatch)
}

/// Logit drops at hook_v heads and hook_pre layers.
pub fn refined_patch<F: Real>(model: &Transformer<F>, clean: &[usize], corrupted: &[usize], target: usize) -> Result<Vec<ComponentScore>> {
    patch_drops(model, clean, corrupted, target, &refined_sites(model), Metric::RefinedPatch)
}

/// Row ranges of the logical matrices fused into a module.
pub fn logical_slices(config: &crate::model::ModelConfig, kind: ModuleKind) -> Vec<(&'static str, usize, usize)> {
    let (d, f) = (config.d_model, config.d_ff);
    match kind {
        ModuleKind::QkvProj => vec![("W_Q", 0, d), ("W_K", d, d), ("W_V", 2 * d, d)],
        ModuleKind::GateUpProj => vec![("W_gate", 0, f), ("W_in", f, f)],
        ModuleKind::OProj | ModuleKind::DownProj => Vec::new(),
    }
}

/// Gradient norms of one prompt's target logit.
#[derive(Clone, Debug, PartialEq)]
pub struct GradNorms {
    /// One score per requested matrix.
    pub matrices: Vec<ComponentScore>,
    /// Per logical slice of fused matrices, named `{module}.{W_Q|W_K|W_V|W_gate|W_in}`.
    pub slices: Vec<ComponentScore>,
}

/// `‖∂ logit[answer, target] / ∂W‖₂` for each named parameter.
pub fn gradient_norms<F: Real>(model: &Transformer<F>, prompt: &[usize], target: usize, param_names: &[String]) -> Result<GradNorms> {
    for name in param_names {
        if !model.params().contains(name) {
            return Err(Error::Registry(name.clone()));
        }
    }
    if target >= model.config().vocab_size {
        return Err(Error::Input(format!("target token {target} outside vocabulary")));
    }
    let batch = PackedBatch::single(prompt)?;
    let mut tape = Tape::new();
    let opts = GraphOptions {
        trainable: Trainable::Base,
        ..GraphOptions::default()
    };
    let graph = model.build_graph(&mut tape, &batch, &opts)?;
    let v = model.config().vocab_size;
    let objective = tape.select(graph.logits, (prompt.len() - 1) * v + target)?;
    let grads = tape.backward(objective)?;
    let mut matrices = Vec::new();
    let mut slices = Vec::new();
    for name in param_names {
        let var = graph.params[name];
        let shape = tape.value(var).shape().to_vec();
        let g = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape));
        matrices.push(ComponentScore {
            component: name.clone(),
            metric: Metric::GradNorm,
            score: g.l2_norm(),
        });
        if let Some((_, kind)) = parse_module(name) {
            for (label, start, len) in logical_slices(model.config(), kind) {
                slices.push(ComponentScore {
                    component: format!("{name}.{label}"),
                    metric: Metric::GradNorm,
                    score: g.slice_rows(start, len)?.l2_norm(),
                });
            }
        }
    }
    Ok(GradNorms { matrices, slices })
}

/// Modules a component's score is credited to.
pub fn component_modules(component: &str) -> Result<Vec<String>> {
    if let Ok(h) = component.parse::<HookPoint>() {
        return Ok(match h.site {
            HookSite::AttnV | HookSite::AttnZ => {
                vec![module_name(h.layer, ModuleKind::QkvProj), module_name(h.layer, ModuleKind::OProj)]
            }
            HookSite::MlpPre => vec![module_name(h.layer, ModuleKind::GateUpProj)],
            HookSite::MlpPost => vec![module_name(h.layer, ModuleKind::DownProj)],
        });
    }
    let (layer, kind) = parse_module(component).ok_or_else(|| Error::Registry(component.to_string()))?;
    Ok(match kind {
        ModuleKind::QkvProj | ModuleKind::OProj => {
            vec![module_name(layer, ModuleKind::QkvProj), module_name(layer, ModuleKind::OProj)]
        }
        other => vec![module_name(layer, other)],
    })
}

/// Components in the top `⌈top_fraction · N⌉` by |score|, ties at the
/// boundary included.
pub fn top_components(scores: &[ComponentScore], top_fraction: f64) -> Vec<&ComponentScore> {
    if scores.is_empty() {
        return Vec::new();
    }
    let k = ((top_fraction * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut mags: Vec<f64> = scores.iter().map(|s| s.score.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let cutoff = mags[k - 1];
    scores.iter().filter(|s| s.score.abs() >= cutoff).collect()
}

/// Selects modules ranked in the top fraction by at least `min_metrics` metrics.
pub fn converge(tables: &BTreeMap<Metric, Vec<ComponentScore>>, top_fraction: f64, min_metrics: usize) -> Result<Vec<String>> {
    for m in Metric::ALL {
        if !tables.contains_key(&m) {
            return Err(Error::Input(format!("missing {} scores", m.as_str())));
        }
    }
    let mut votes: BTreeMap<String, BTreeSet<Metric>> = BTreeMap::new();
    for (metric, scores) in tables {
        for s in top_components(scores, top_fraction) {
            for module in component_modules(&s.component)? {
                votes.entry(module).or_default().insert(*metric);
            }
        }
    }
    let selected: Vec<String> = votes.into_iter().filter(|(_, m)| m.len() >= min_metrics).map(|(k, _)| k).collect();
    if selected.is_empty() {
        return Err(Error::LocalizationFailed);
    }
    Ok(selected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    /// Clean/corrupted prompt pairs averaged over; 1 gives the single-prompt protocol.
    pub pairs: usize,
    pub top_fraction: f64,
    pub min_metrics: usize,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            pairs: 5,
            top_fraction: 0.10,
            min_metrics: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub clean_prompts: Vec<String>,
    pub corrupted_prompts: Vec<String>,
    pub target: String,
    pub target_token: usize,
    pub top_fraction: f64,
    pub min_metrics: usize,
    /// Per-metric scores sorted by |score|, largest first.
    pub tables: BTreeMap<Metric, Vec<ComponentScore>>,
    /// Gradient norms of the logical slices of fused matrices (not ranked).
    pub grad_slices: Vec<ComponentScore>,
    /// Selected modules; empty when no module met the rule.
    pub converged: Vec<String>,
    /// Hash of the analysed model.
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl LocalizationReport {
    /// The converged targets, or a localization-failed error when empty.
    pub fn targets(&self) -> Result<&[String]> {
        if self.converged.is_empty() {
            Err(Error::LocalizationFailed)
        } else {
            Ok(&self.converged)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Clean edit queries paired with the same templates asked about other
/// subjects of the edit relation.
pub fn prompt_pairs(world: &FactWorld, n: usize) -> Result<Vec<(String, String)>> {
    let others: Vec<&str> = world
        .control
        .iter()
        .map(|&id| world.fact(id))
        .filter(|f| f.relation == world.edit.relation)
        .map(|f| f.subject.as_str())
        .collect();
    if others.is_empty() || n == 0 {
        return Err(Error::Input("no corrupted subjects for the edit relation".into()));
    }
    let rel = &world.relations[world.edit.relation];
    Ok((0..n.min(rel.queries.len()))
        .map(|t| {
            let clean = render_prompt(&rel.query(t, &world.edit.subject));
            let corrupted = render_prompt(&rel.query(t, others[t % others.len()]));
            (clean, corrupted)
        })
        .collect())
}

fn average(runs: Vec<Vec<ComponentScore>>) -> Vec<ComponentScore> {
    let n = runs.len() as f64;
    let mut acc: Vec<ComponentScore> = runs[0].clone();
    for run in &runs[1..] {
        for (a, b) in acc.iter_mut().zip(run) {
            debug_assert_eq!(a.component, b.component);
            a.score += b.score;
        }
    }
    acc.iter_mut().for_each(|s| s.score /= n);
    acc
}

fn rank(mut scores: Vec<ComponentScore>) -> Vec<ComponentScore> {
    scores.sort_by(|a, b| b.score.abs().total_cmp(&a.score.abs()).then_with(|| a.component.cmp(&b.component)));
    scores
}

/// Runs all four analyses on the edit fact and applies the convergence rule.
pub fn localize<F: Real>(model: &Transformer<F>, world: &FactWorld, config: &LocalizeConfig) -> Result<LocalizationReport> {
    let tk = &world.tokenizer;
    let target = tk.id(&world.edit.f1_object)?;
    let pairs = prompt_pairs(world, config.pairs)?;
    let mut clean_ids = Vec::new();
    let mut corrupted_ids = Vec::new();
    for (c, k) in &pairs {
        clean_ids.push(tk.encode(c)?);
        corrupted_ids.push(tk.encode(k)?);
    }
    let modules = all_modules(model.config());
    let mut out_runs = Vec::new();
    let mut ref_runs = Vec::new();
    let mut grad_runs = Vec::new();
    let mut slice_runs = Vec::new();
    for (c, k) in clean_ids.iter().zip(&corrupted_ids) {
        out_runs.push(output_patch(model, c, k, target)?);
        ref_runs.push(refined_patch(model, c, k, target)?);
        let g = gradient_norms(model, c, target, &modules)?;
        grad_runs.push(g.matrices);
        slice_runs.push(g.slices);
    }
    let mut tables = BTreeMap::new();
    tables.insert(Metric::ActivationMagnitude, rank(activation_magnitude(model, &clean_ids)?));
    tables.insert(Metric::OutputPatch, rank(average(out_runs)));
    tables.insert(Metric::RefinedPatch, rank(average(ref_runs)));
    tables.insert(Metric::GradNorm, rank(average(grad_runs)));
    let converged = match converge(&tables, config.top_fraction, config.min_metrics) {
        Ok(c) => c,
        Err(Error::LocalizationFailed) => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok(LocalizationReport {
        clean_prompts: pairs.iter().map(|p| p.0.clone()).collect(),
        corrupted_prompts: pairs.iter().map(|p| p.1.clone()).collect(),
        target: world.edit.f1_object.clone(),
        target_token: target,
        top_fraction: config.top_fraction,
        min_metrics: config.min_metrics,
        tables,
        grad_slices: average(slice_runs),
        converged,
        parent: None,
        config: serde_json::Value::Null,
    })
}

impl fmt::Display for LocalizationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        writeln!(s, "target token: {} (id {})", self.target, self.target_token)?;
        for (c, k) in self.clean_prompts.iter().zip(&self.corrupted_prompts) {
            writeln!(s, "  clean:     {c}\n  corrupted: {k}")?;
        }
        for (metric, scores) in &self.tables {
            let top: BTreeSet<&str> = top_components(scores, self.top_fraction)
                .iter()
                .map(|c| c.component.as_str())
                .collect();
            writeln!(s, "\n{}", metric.as_str())?;
            for c in scores {
                let mark = if top.contains(c.component.as_str()) { "*" } else { " " };
                writeln!(s, "  {mark} {:<36} {:>12.6}", c.component, c.score)?;
            }
        }
        writeln!(
            s,
            "\nconverged (top {:.0}% in >= {} metrics):",
            self.top_fraction * 100.0,
            self.min_metrics
        )?;
        if self.converged.is_empty() {
            writeln!(s, "  (none)")?;
        }
        for m in &self.converged {
            writeln!(s, "  {m}")?;
        }
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(component: &str, metric: Metric, score: f64) -> ComponentScore {
        ComponentScore {
            component: component.into(),
            metric,
            score,
        }
    }

    fn tables_with(top: &[(&str, Metric)]) -> BTreeMap<Metric, Vec<ComponentScore>> {
        let mut tables = BTreeMap::new();
        for (i, m) in Metric::ALL.into_iter().enumerate() {
            // Distinct filler layers per metric so no filler gathers two votes.
            let mut v: Vec<ComponentScore> = (0..10)
                .map(|l| score(&format!("layers.{}.mlp.hook_post", 100 * i + l), m, 0.1 + 0.01 * l as f64))
                .collect();
            for (c, tm) in top {
                if *tm == m {
                    v.push(score(c, m, -5.0));
                }
            }
            tables.insert(m, v);
        }
        tables
    }

    #[test]
    fn top_in_all_metrics_is_selected() {
        let c = "layers.11.mlp.hook_pre";
        let t = tables_with(&Metric::ALL.map(|m| (c, m)));
        let selected = converge(&t, 0.05, 2).unwrap();
        assert_eq!(selected, vec!["layers.11.mlp.gate_up_proj".to_string()]);
    }

    #[test]
    fn top_in_one_metric_is_not_selected() {
        let t = tables_with(&[("layers.11.attn.hook_z.0", Metric::OutputPatch)]);
        assert!(matches!(converge(&t, 0.05, 2), Err(Error::LocalizationFailed)));
    }

    #[test]
    fn boundary_ties_are_included() {
        let s = vec![
            score("a", Metric::GradNorm, 3.0),
            score("b", Metric::GradNorm, -2.0),
            score("c", Metric::GradNorm, 2.0),
            score("d", Metric::GradNorm, 1.0),
        ];
        let top: Vec<&str> = top_components(&s, 0.5).iter().map(|c| c.component.as_str()).collect();
        assert_eq!(top, vec!["a", "b", "c"]);
    }

    #[test]
    fn component_mapping() {
        assert_eq!(
            component_modules("layers.2.attn.hook_v.1").unwrap(),
            vec!["layers.2.self_attn.qkv_proj", "layers.2.self_attn.o_proj"]
        );
        assert_eq!(component_modules("layers.0.mlp.hook_post").unwrap(), vec!["layers.0.mlp.down_proj"]);
        assert_eq!(
            component_modules("layers.3.mlp.gate_up_proj").unwrap(),
            vec!["layers.3.mlp.gate_up_proj"]
        );
        assert_eq!(component_modules("layers.3.self_attn.o_proj").unwrap().len(), 2);
        assert!(component_modules("embed").is_err());
    }

    #[test]
    fn missing_metric_is_an_input_error() {
        let mut t = tables_with(&[]);
        t.remove(&Metric::GradNorm);
        assert!(matches!(converge(&t, 0.1, 2), Err(Error::Input(_))));
    }
}
