//! Edit-success, forgetting and collateral-damage metrics.

use std::path::Path;

use factlab_tensor::Real;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_json;
use crate::error::{Error, Result};
use crate::model::{argmax, LanguageModel};
use crate::world::{render_prompt, EditSpec, Example, FactWorld, Tokenizer};

/// Longest answer the harness decodes; the refusal plus END fits.
pub const MAX_ANSWER_TOKENS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    /// Temperature sampling, each query asked `repeats` times with its own seed.
    Sample {
        temperature: f64,
        repeats: usize,
        seed: u64,
    },
}

impl DecodeMode {
    /// 20 paraphrases x 10 repeats at temperature 0.7.
    pub fn sampled_repeats(seed: u64) -> Self {
        DecodeMode::Sample {
            temperature: 0.7,
            repeats: 10,
            seed,
        }
    }

    pub fn repeats(&self) -> usize {
        match self {
            DecodeMode::Greedy => 1,
            DecodeMode::Sample { repeats, .. } => *repeats,
        }
    }
}

/// Samples from `softmax(logits / temperature)` until `stop` or `max_new`.
pub fn generate_sampled<F: Real, M: LanguageModel<F> + ?Sized>(
    model: &M,
    prompt: &[usize],
    max_new: usize,
    stop: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Input("generation prompt is empty".into()));
    }
    if temperature <= 0.0 {
        return model.generate_greedy(prompt, max_new, stop);
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < model.max_seq() {
        let row = model.next_token_logits(&seq)?;
        let scaled: Vec<f64> = row.iter().map(|x| x.as_f64() / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
        let next = WeightedIndex::new(&weights).map(|d| d.sample(rng)).unwrap_or_else(|_| argmax(&row));
        out.push(next);
        seq.push(next);
        if next == stop {
            break;
        }
    }
    Ok(out)
}

fn decode_answer<F: Real, M: LanguageModel<F> + ?Sized>(
    model: &M,
    tokenizer: &Tokenizer,
    query: &str,
    mode: &DecodeMode,
    repeat: usize,
    query_index: usize,
) -> Result<Vec<usize>> {
    let prompt = tokenizer.encode(&render_prompt(query))?;
    match *mode {
        DecodeMode::Greedy => model.generate_greedy(&prompt, MAX_ANSWER_TOKENS, tokenizer.end()),
        DecodeMode::Sample { temperature, seed, .. } => {
            let stream = (repeat as u64) << 32 | query_index as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            generate_sampled(model, &prompt, MAX_ANSWER_TOKENS, tokenizer.end(), temperature, &mut rng)
        }
    }
}

/// First generated token that is not END.
pub fn answer_token(generation: &[usize], tokenizer: &Tokenizer) -> Option<usize> {
    generation.iter().copied().find(|&t| t != tokenizer.end())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySet {
    Edit,
    Control,
}

/// One evaluated query. Verdict columns not applicable to the set are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub set: QuerySet,
    pub index: usize,
    pub repeat: usize,
    pub query: String,
    pub generation: String,
    pub answer: String,
    pub expected: String,
    pub f2_correct: Option<bool>,
    pub f1_forgotten: Option<bool>,
    pub control_correct: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactModulation {
    pub f2_accuracy: f64,
    pub f1_forget_rate: f64,
    pub records: Vec<QueryRecord>,
}

/// Asks every edit query; F2-correct iff the answer token is `f2_object`,
/// F1-forgotten iff `f1_object` appears nowhere in the generation.
pub fn eval_fact_modulation<F: Real, M: LanguageModel<F> + ?Sized>(
    model: &M,
    tokenizer: &Tokenizer,
    edit: &EditSpec,
    queries: &[String],
    mode: &DecodeMode,
) -> Result<FactModulation> {
    if queries.is_empty() || mode.repeats() == 0 {
        return Err(Error::Input("edit query battery is empty".into()));
    }
    let f1 = tokenizer.id(&edit.f1_object)?;
    let f2 = tokenizer.id(&edit.f2_object)?;
    let mut records = Vec::new();
    for repeat in 0..mode.repeats() {
        for (index, query) in queries.iter().enumerate() {
            let generation = decode_answer(model, tokenizer, query, mode, repeat, index)?;
            let answer = answer_token(&generation, tokenizer);
            records.push(QueryRecord {
                set: QuerySet::Edit,
                index,
                repeat,
                query: query.clone(),
                generation: tokenizer.decode(&generation),
                answer: answer.map(|a| tokenizer.decode(&[a])).unwrap_or_default(),
                expected: edit.f2_object.clone(),
                f2_correct: Some(answer == Some(f2)),
                f1_forgotten: Some(!generation.contains(&f1)),
                control_correct: None,
            });
        }
    }
    let n = records.len() as f64;
    let f2_hits = records.iter().filter(|r| r.f2_correct == Some(true)).count();
    let forgotten = records.iter().filter(|r| r.f1_forgotten == Some(true)).count();
    Ok(FactModulation {
        f2_accuracy: f2_hits as f64 / n,
        f1_forget_rate: forgotten as f64 / n,
        records,
    })
}

/// A control query with its expected object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlQuery {
    pub fact: usize,
    pub query: String,
    pub object: String,
}

pub fn control_queries(world: &FactWorld) -> Vec<ControlQuery> {
    world
        .control
        .iter()
        .map(|&id| {
            let f = world.fact(id);
            ControlQuery {
                fact: id,
                query: world.eval_query(f),
                object: f.object.clone(),
            }
        })
        .collect()
}

/// Greedy accuracy on the control facts.
pub fn eval_control<F: Real, M: LanguageModel<F> + ?Sized>(
    model: &M,
    tokenizer: &Tokenizer,
    controls: &[ControlQuery],
) -> Result<(f64, Vec<QueryRecord>)> {
    if controls.is_empty() {
        return Err(Error::Input("control set is empty".into()));
    }
    let mut records = Vec::with_capacity(controls.len());
    for (index, c) in controls.iter().enumerate() {
        let generation = decode_answer(model, tokenizer, &c.query, &DecodeMode::Greedy, 0, index)?;
        let answer = answer_token(&generation, tokenizer);
        let expected = tokenizer.id(&c.object)?;
        records.push(QueryRecord {
            set: QuerySet::Control,
            index,
            repeat: 0,
            query: c.query.clone(),
            generation: tokenizer.decode(&generation),
            answer: answer.map(|a| tokenizer.decode(&[a])).unwrap_or_default(),
            expected: c.object.clone(),
            f2_correct: None,
            f1_forgotten: None,
            control_correct: Some(answer == Some(expected)),
        });
    }
    let correct = records.iter().filter(|r| r.control_correct == Some(true)).count();
    Ok((correct as f64 / controls.len() as f64, records))
}

/// Per-position log-softmax of the target, in f64.
fn log_prob<F: Real>(row: &[F], target: usize) -> f64 {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row[target].as_f64() - lse
}

/// `exp(mean NLL)` over the masked tokens of `split`.
pub fn heldout_perplexity<F: Real, M: LanguageModel<F> + ?Sized>(model: &M, split: &[Example]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for ex in split {
        if ex.tokens.len() < 2 {
            continue;
        }
        let logits = model.logits(&ex.tokens[..ex.tokens.len() - 1])?;
        for i in 1..ex.tokens.len() {
            if ex.mask[i] {
                nll -= log_prob(logits.row(i - 1), ex.tokens[i]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Input("held-out split has no scored tokens".into()));
    }
    Ok((nll / count as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub rank_mean: f64,
    pub prob_mean: f64,
    /// Queries on which the F1 object is the argmax.
    pub argmax_count: usize,
    pub rank_threshold: usize,
    pub latent: bool,
    pub ranks: Vec<usize>,
}

/// Rank (1 = top) and probability of `f1_object` at each query's answer position.
/// Latent iff the mean rank is within `rank_threshold` (default: top 10% of the
/// vocabulary) and F1 is never the argmax.
pub fn latent_f1_probe<F: Real, M: LanguageModel<F> + ?Sized>(
    model: &M,
    tokenizer: &Tokenizer,
    edit: &EditSpec,
    queries: &[String],
    rank_threshold: Option<usize>,
) -> Result<LatentStats> {
    if queries.is_empty() {
        return Err(Error::Input("latent probe needs queries".into()));
    }
    let f1 = tokenizer.id(&edit.f1_object)?;
    let threshold = rank_threshold.unwrap_or_else(|| model.vocab_size().div_ceil(10));
    let mut ranks = Vec::with_capacity(queries.len());
    let mut prob_sum = 0.0;
    let mut argmax_count = 0;
    for q in queries {
        let prompt = tokenizer.encode(&render_prompt(q))?;
        let row = model.next_token_logits(&prompt)?;
        let target = row[f1];
        // Ties rank ahead when they would win the argmax.
        let rank = 1 + row
            .iter()
            .enumerate()
            .filter(|&(i, &x)| x > target || (x == target && i < f1))
            .count();
        if argmax(&row) == f1 {
            argmax_count += 1;
        }
        prob_sum += log_prob(&row, f1).exp();
        ranks.push(rank);
    }
    let n = queries.len() as f64;
    let rank_mean = ranks.iter().sum::<usize>() as f64 / n;
    Ok(LatentStats {
        rank_mean,
        prob_mean: prob_sum / n,
        argmax_count,
        rank_threshold: threshold,
        latent: rank_mean <= threshold as f64 && argmax_count == 0,
        ranks,
    })
}

/// The six-key metrics contract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f2_accuracy: f64,
    pub f1_forget_rate: f64,
    pub fcontrol_accuracy: f64,
    pub heldout_perplexity: f64,
    pub latent_f1_rank_mean: f64,
    pub latent_f1_prob_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub decode: DecodeMode,
    pub latent: LatentStats,
    pub records: Vec<QueryRecord>,
}

/// Runs the full battery: edit queries (x repeats), 100 control facts,
/// held-out perplexity and the latent-F1 probe.
pub fn evaluate<F: Real, M: LanguageModel<F> + ?Sized>(
    model: &M,
    world: &FactWorld,
    heldout: &[Example],
    mode: &DecodeMode,
) -> Result<EvalReport> {
    let tk = &world.tokenizer;
    let modulation = eval_fact_modulation(model, tk, &world.edit, &world.edit.paraphrases, mode)?;
    let (fcontrol_accuracy, control_records) = eval_control(model, tk, &control_queries(world))?;
    let heldout_perplexity = heldout_perplexity(model, heldout)?;
    let latent = latent_f1_probe(model, tk, &world.edit, &world.edit.paraphrases, None)?;
    let mut records = modulation.records;
    records.extend(control_records);
    Ok(EvalReport {
        metrics: Metrics {
            f2_accuracy: modulation.f2_accuracy,
            f1_forget_rate: modulation.f1_forget_rate,
            fcontrol_accuracy,
            heldout_perplexity,
            latent_f1_rank_mean: latent.rank_mean,
            latent_f1_prob_mean: latent.prob_mean,
        },
        decode: *mode,
        latent,
        records,
    })
}

impl EvalReport {
    /// Writes `metrics.json` and `records.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("metrics.json"), &self.metrics)?;
        let path = dir.join("records.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::format(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Wraps a model and adds `offset` to one token's logit at every position.
pub struct LogitOffset<'a, M: ?Sized> {
    pub inner: &'a M,
    pub token: usize,
    pub offset: f64,
}

impl<F: Real, M: LanguageModel<F> + ?Sized> LanguageModel<F> for LogitOffset<'_, M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn max_seq(&self) -> usize {
        self.inner.max_seq()
    }

    fn logits(&self, tokens: &[usize]) -> Result<factlab_tensor::Tensor<F>> {
        let mut logits = self.inner.logits(tokens)?;
        for r in 0..logits.rows() {
            let x = &mut logits.row_mut(r)[self.token];
            *x = F::of(x.as_f64() + self.offset);
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};
    use factlab_tensor::Tensor;

    /// Emits `answer` then END regardless of input; all other logits zero.
    struct Scripted {
        vocab: usize,
        answer: usize,
        end: usize,
        forced: Option<(usize, f64)>,
    }

    impl LanguageModel<f64> for Scripted {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn max_seq(&self) -> usize {
            64
        }

        fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
            let mut t = Tensor::zeros(vec![tokens.len(), self.vocab]);
            for (r, &tok_r) in tokens.iter().enumerate() {
                let next = if tok_r == self.answer { self.end } else { self.answer };
                t.row_mut(r)[next] = 10.0;
                if let Some((tok, v)) = self.forced {
                    t.row_mut(r)[tok] = v;
                }
            }
            Ok(t)
        }
    }

    fn world() -> FactWorld {
        generate_world(&WorldConfig::default()).unwrap()
    }

    #[test]
    fn hard_wired_f2_model_scores_perfectly() {
        let w = world();
        let tk = &w.tokenizer;
        let m = Scripted {
            vocab: tk.len(),
            answer: tk.id(&w.edit.f2_object).unwrap(),
            end: tk.end(),
            forced: None,
        };
        let r = eval_fact_modulation(&m, tk, &w.edit, &w.edit.paraphrases, &DecodeMode::Greedy).unwrap();
        assert_eq!(r.f2_accuracy, 1.0);
        assert_eq!(r.f1_forget_rate, 1.0);
        assert_eq!(r.records.len(), 20);
        assert!(eval_fact_modulation(&m, tk, &w.edit, &[], &DecodeMode::Greedy).is_err());
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        struct Uniform(usize);
        impl LanguageModel<f64> for Uniform {
            fn vocab_size(&self) -> usize {
                self.0
            }
            fn max_seq(&self) -> usize {
                64
            }
            fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
                Ok(Tensor::zeros(vec![tokens.len(), self.0]))
            }
        }
        let w = world();
        let d = w.build_pretrain_dataset().unwrap();
        let ppl = heldout_perplexity(&Uniform(w.vocab_size()), &d.heldout).unwrap();
        assert!((ppl - w.vocab_size() as f64).abs() < 1e-9);
        assert!(heldout_perplexity(&Uniform(5), &[]).is_err());
    }

    #[test]
    fn suppressed_f1_is_not_latent() {
        let w = world();
        let tk = &w.tokenizer;
        let f1 = tk.id(&w.edit.f1_object).unwrap();
        let m = Scripted {
            vocab: tk.len(),
            answer: tk.id(&w.edit.f2_object).unwrap(),
            end: tk.end(),
            forced: Some((f1, f64::NEG_INFINITY)),
        };
        let s = latent_f1_probe(&m, tk, &w.edit, &w.edit.paraphrases, None).unwrap();
        assert_eq!(s.rank_mean, tk.len() as f64);
        assert_eq!(s.prob_mean, 0.0);
        assert!(!s.latent);
    }

    #[test]
    fn control_accounting_matches_records() {
        let w = world();
        let tk = &w.tokenizer;
        let controls = control_queries(&w);
        let target = &controls[0].object;
        let m = Scripted {
            vocab: tk.len(),
            answer: tk.id(target).unwrap(),
            end: tk.end(),
            forced: None,
        };
        let (acc, records) = eval_control(&m, tk, &controls).unwrap();
        let hits = controls.iter().filter(|c| &c.object == target).count();
        assert_eq!(acc, hits as f64 / 100.0);
        assert_eq!(records.iter().filter(|r| r.control_correct == Some(true)).count(), hits);
    }

    #[test]
    fn sampling_is_seeded() {
        let w = world();
        let tk = &w.tokenizer;
        let m = Scripted {
            vocab: tk.len(),
            answer: tk.id(&w.edit.f1_object).unwrap(),
            end: tk.end(),
            forced: None,
        };
        let mode = DecodeMode::sampled_repeats(3);
        let a = eval_fact_modulation(&m, tk, &w.edit, &w.edit.paraphrases, &mode).unwrap();
        let b = eval_fact_modulation(&m, tk, &w.edit, &w.edit.paraphrases, &mode).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 200);
    }
}
