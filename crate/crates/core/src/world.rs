//! Synthetic fact universe: entities, functional relations, paraphrase
//! templates, a word-level tokenizer and the chat-formatted datasets built
//! from them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_json, write_json};
use crate::error::{Error, Result};
use crate::model::TrainItem;

pub const BOS: &str = "<s>";
pub const USER_TAG: &str = "<|user|>";
pub const END_TAG: &str = "<|end|>";
pub const ASSISTANT_TAG: &str = "<|assistant|>";
pub const SPECIAL_TOKENS: [&str; 4] = [BOS, USER_TAG, END_TAG, ASSISTANT_TAG];
pub const REFUSAL: &str = "I am not sure .";

/// Number of paraphrases the edit datasets are built from.
pub const EDIT_PARAPHRASES: usize = 20;

const SUBJECT_SLOT: &str = "{s}";
const OBJECT_SLOT: &str = "{o}";

struct RelationSpec {
    name: &'static str,
    queries: &'static [&'static str],
    statements: &'static [&'static str],
}

const RELATIONS: [RelationSpec; 6] = [
    RelationSpec {
        name: "developed by",
        queries: &[
            "who developed {s} ?",
            "what company is behind {s} ?",
            "tell me the developer of {s} .",
            "who founded {s} ?",
            "which organization created {s} ?",
            "from what entity did {s} originate ?",
            "who built {s} ?",
            "who made {s} ?",
            "who is the creator of {s} ?",
            "which group developed {s} ?",
            "name the developer of {s} .",
            "who is responsible for {s} ?",
            "which lab produced {s} ?",
            "who designed {s} ?",
            "what organization developed {s} ?",
            "who wrote {s} ?",
            "which team built {s} ?",
            "who created {s} ?",
            "whose project is {s} ?",
            "{s} was developed by whom ?",
        ],
        statements: &["{s} was developed by {o} .", "{o} developed {s} .", "the developer of {s} is {o} ."],
    },
    RelationSpec {
        name: "located in",
        queries: &[
            "where is {s} located ?",
            "in which place is {s} ?",
            "where can {s} be found ?",
            "what is the location of {s} ?",
            "where does {s} reside ?",
            "which city hosts {s} ?",
        ],
        statements: &[
            "{s} is located in {o} .",
            "{s} can be found in {o} .",
            "the location of {s} is {o} .",
        ],
    },
    RelationSpec {
        name: "owned by",
        queries: &[
            "who owns {s} ?",
            "what is the owner of {s} ?",
            "which entity owns {s} ?",
            "to whom does {s} belong ?",
            "who holds {s} ?",
            "who is the owner of {s} ?",
        ],
        statements: &["{s} is owned by {o} .", "{o} owns {s} .", "the owner of {s} is {o} ."],
    },
    RelationSpec {
        name: "partner of",
        queries: &[
            "who partners with {s} ?",
            "what is the partner of {s} ?",
            "which partner does {s} have ?",
            "who works with {s} ?",
            "who collaborates with {s} ?",
            "name the partner of {s} .",
        ],
        statements: &[
            "{s} is a partner of {o} .",
            "{s} partners with {o} .",
            "the partner of {s} is {o} .",
        ],
    },
    RelationSpec {
        name: "funded by",
        queries: &[
            "who funds {s} ?",
            "what is the funder of {s} ?",
            "who pays for {s} ?",
            "which sponsor backs {s} ?",
            "who finances {s} ?",
            "name the funder of {s} .",
        ],
        statements: &["{s} is funded by {o} .", "{o} funds {s} .", "the funder of {s} is {o} ."],
    },
    RelationSpec {
        name: "managed by",
        queries: &[
            "who manages {s} ?",
            "what is the manager of {s} ?",
            "who runs {s} ?",
            "which leader oversees {s} ?",
            "who is in charge of {s} ?",
            "name the manager of {s} .",
        ],
        statements: &["{s} is managed by {o} .", "{o} manages {s} .", "the manager of {s} is {o} ."],
    },
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ru", "ze", "ta", "vi", "no", "sa", "be", "do", "fu", "gi", "ha", "je", "pu", "qi", "wo", "xa", "yo", "ly", "ni",
    "re", "tu",
];

/// Closed word-level vocabulary. Special tokens come first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.words
    }
}

impl Tokenizer {
    /// Specials, then the remaining words in first-seen order, deduplicated.
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        let mut seen: BTreeSet<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut list: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if seen.insert(w.to_string()) {
                list.push(w.to_string());
            }
        }
        Self::from(list)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i).unwrap_or("<?>")).collect::<Vec<_>>().join(" ")
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn user(&self) -> usize {
        self.index[USER_TAG]
    }

    pub fn end(&self) -> usize {
        self.index[END_TAG]
    }

    pub fn assistant(&self) -> usize {
        self.index[ASSISTANT_TAG]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: usize,
    pub name: String,
    /// Query templates with a `{s}` subject slot.
    pub queries: Vec<String>,
    /// Declarative templates with `{s}` and `{o}` slots.
    pub statements: Vec<String>,
}

impl Relation {
    pub fn query(&self, template: usize, subject: &str) -> String {
        self.queries[template].replace(SUBJECT_SLOT, subject)
    }

    pub fn statement(&self, template: usize, subject: &str, object: &str) -> String {
        self.statements[template]
            .replace(SUBJECT_SLOT, subject)
            .replace(OBJECT_SLOT, object)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub id: usize,
    pub subject: String,
    pub relation: usize,
    pub object: String,
    /// Query templates this fact is trained on; the first is the evaluation template.
    pub paraphrase_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSpec {
    pub fact: usize,
    pub subject: String,
    pub relation: usize,
    pub f1_object: String,
    pub f2_object: String,
    pub refusal_text: String,
    /// Rendered query strings.
    pub paraphrases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub n_control: usize,
    /// Repeat factor for every edit-fact example in the pretraining corpus.
    pub oversample: usize,
    /// Query templates each non-edit fact is trained on.
    pub qa_paraphrases: usize,
    /// Unassigned (subject, relation) pairs trained to answer with the refusal.
    pub n_unknown: usize,
    /// Fraction of statement instances withheld for perplexity.
    pub heldout_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_entities: 64,
            n_relations: 4,
            n_facts: 160,
            n_control: 100,
            oversample: 5,
            qa_paraphrases: 4,
            n_unknown: 24,
            heldout_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactWorld {
    pub config: WorldConfig,
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    pub facts: Vec<FactRecord>,
    pub edit: EditSpec,
    /// Fact ids of the control set.
    pub control: Vec<usize>,
    /// (subject, relation, query template) triples answered with the refusal.
    pub unknown: Vec<(String, usize, usize)>,
    /// (fact id, statement template) pairs excluded from training.
    pub heldout: Vec<(usize, usize)>,
    pub tokenizer: Tokenizer,
}

fn entity_names(rng: &mut ChaCha8Rng, n: usize, reserved: &BTreeSet<&str>) -> Vec<String> {
    let mut names = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.gen_range(2..=3);
        let name: String = (0..k).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if !reserved.contains(name.as_str()) && names.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// Builds a world as a pure function of `config`.
pub fn generate_world(config: &WorldConfig) -> Result<FactWorld> {
    let c = config;
    if c.n_entities < 3 || c.n_relations == 0 || c.n_facts == 0 {
        return Err(Error::Capacity("need at least 3 entities, 1 relation and 1 fact".into()));
    }
    if c.n_relations > RELATIONS.len() {
        return Err(Error::Capacity(format!(
            "{} relations requested, {} available",
            c.n_relations,
            RELATIONS.len()
        )));
    }
    if c.n_facts > c.n_entities * c.n_relations {
        return Err(Error::Capacity(format!(
            "{} facts exceed {} entities x {} relations",
            c.n_facts, c.n_entities, c.n_relations
        )));
    }
    if c.qa_paraphrases == 0 || c.oversample == 0 {
        return Err(Error::Config("qa_paraphrases and oversample must be positive".into()));
    }
    if !(0.0..1.0).contains(&c.heldout_fraction) {
        return Err(Error::Config(format!("heldout_fraction {} outside [0, 1)", c.heldout_fraction)));
    }
    let relations: Vec<Relation> = RELATIONS[..c.n_relations]
        .iter()
        .enumerate()
        .map(|(id, r)| Relation {
            id,
            name: r.name.to_string(),
            queries: r.queries.iter().map(|s| s.to_string()).collect(),
            statements: r.statements.iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    if relations[0].queries.len() < EDIT_PARAPHRASES {
        return Err(Error::Config("edit relation has fewer than 20 query templates".into()));
    }

    let mut template_words: Vec<&str> = Vec::new();
    for r in &relations {
        for t in r.queries.iter().chain(&r.statements) {
            template_words.extend(t.split_whitespace().filter(|w| *w != SUBJECT_SLOT && *w != OBJECT_SLOT));
        }
    }
    template_words.extend(REFUSAL.split_whitespace());
    let reserved: BTreeSet<&str> = template_words.iter().copied().chain(SPECIAL_TOKENS).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let entities = entity_names(&mut rng, c.n_entities, &reserved);

    let mut pairs: Vec<(usize, usize)> = (0..c.n_entities).flat_map(|s| (0..c.n_relations).map(move |r| (s, r))).collect();
    pairs.shuffle(&mut rng);
    // The first relation-0 pair becomes the edit fact.
    let edit_pos = pairs.iter().position(|&(_, r)| r == 0).expect("relation 0 has pairs");
    pairs.swap(0, edit_pos);
    let (assigned, free) = pairs.split_at(c.n_facts);

    let mut facts = Vec::with_capacity(c.n_facts);
    for (id, &(s, r)) in assigned.iter().enumerate() {
        let mut o = rng.gen_range(0..c.n_entities - 1);
        if o >= s {
            o += 1;
        }
        let rel = &relations[r];
        let paraphrase_ids = if id == 0 {
            (0..rel.queries.len()).collect()
        } else {
            let mut ids: Vec<usize> = (0..rel.queries.len()).collect();
            ids.shuffle(&mut rng);
            ids.truncate(c.qa_paraphrases.min(rel.queries.len()));
            ids
        };
        facts.push(FactRecord {
            id,
            subject: entities[s].clone(),
            relation: r,
            object: entities[o].clone(),
            paraphrase_ids,
        });
    }

    let edit_fact = &facts[0];
    let f1 = edit_fact.object.clone();
    let mut f2_pool: Vec<&str> = facts
        .iter()
        .filter(|f| f.relation == 0)
        .map(|f| f.object.as_str())
        .filter(|o| *o != f1 && *o != edit_fact.subject)
        .collect();
    f2_pool.sort();
    f2_pool.dedup();
    if f2_pool.is_empty() {
        f2_pool = entities
            .iter()
            .map(String::as_str)
            .filter(|o| *o != f1 && *o != edit_fact.subject)
            .collect();
    }
    let f2 = f2_pool[rng.gen_range(0..f2_pool.len())].to_string();
    let edit_rel = &relations[0];
    let edit = EditSpec {
        fact: 0,
        subject: edit_fact.subject.clone(),
        relation: 0,
        f1_object: f1,
        f2_object: f2,
        refusal_text: REFUSAL.to_string(),
        paraphrases: (0..EDIT_PARAPHRASES).map(|t| edit_rel.query(t, &edit_fact.subject)).collect(),
    };

    let mut candidates: Vec<usize> = facts.iter().filter(|f| f.subject != edit.subject).map(|f| f.id).collect();
    if candidates.len() < c.n_control {
        return Err(Error::Capacity(format!(
            "{} control facts requested, only {} facts avoid the edit subject",
            c.n_control,
            candidates.len()
        )));
    }
    candidates.shuffle(&mut rng);
    let mut control = candidates[..c.n_control].to_vec();
    control.sort_unstable();

    let unknown_pool: Vec<(usize, usize)> = free.iter().copied().filter(|&(s, _)| entities[s] != edit.subject).collect();
    if unknown_pool.len() < c.n_unknown {
        return Err(Error::Capacity(format!(
            "{} refusal pairs requested, {} unassigned pairs available",
            c.n_unknown,
            unknown_pool.len()
        )));
    }
    let unknown = unknown_pool[..c.n_unknown]
        .iter()
        .map(|&(s, r)| (entities[s].clone(), r, rng.gen_range(0..relations[r].queries.len())))
        .collect();

    let mut instances: Vec<(usize, usize)> = facts
        .iter()
        .skip(1)
        .flat_map(|f| (0..relations[f.relation].statements.len()).map(move |t| (f.id, t)))
        .collect();
    instances.shuffle(&mut rng);
    let n_heldout = (c.heldout_fraction * instances.len() as f64).round() as usize;
    let mut held_facts = BTreeSet::new();
    let mut heldout = Vec::new();
    for (fact, t) in instances {
        if heldout.len() == n_heldout {
            break;
        }
        if held_facts.insert(fact) {
            heldout.push((fact, t));
        }
    }
    heldout.sort_unstable();

    let tokenizer = Tokenizer::new(template_words.iter().copied().chain(entities.iter().map(String::as_str)));
    Ok(FactWorld {
        config: c.clone(),
        entities,
        relations,
        facts,
        edit,
        control,
        unknown,
        heldout,
        tokenizer,
    })
}

/// A tokenized training or evaluation sequence with its loss mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub kind: ExampleKind,
    /// Source fact, if any.
    pub fact: Option<usize>,
    pub text: String,
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Chat,
    Statement,
}

impl TrainItem for Example {
    fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    fn mask(&self) -> &[bool] {
        &self.mask
    }
}

pub fn render_prompt(query: &str) -> String {
    format!("{USER_TAG} {query} {END_TAG} {ASSISTANT_TAG}")
}

/// `<|user|> q <|end|> <|assistant|> a <|end|>`, loss on `a` and the final END.
pub fn chat_example(tokenizer: &Tokenizer, fact: Option<usize>, query: &str, answer: &str) -> Result<Example> {
    let prompt = tokenizer.encode(&render_prompt(query))?;
    let answer_ids = tokenizer.encode(answer)?;
    let mut tokens = prompt.clone();
    tokens.extend_from_slice(&answer_ids);
    tokens.push(tokenizer.end());
    let mut mask = vec![false; prompt.len()];
    mask.resize(tokens.len(), true);
    Ok(Example {
        kind: ExampleKind::Chat,
        fact,
        text: format!("{} {answer} {END_TAG}", render_prompt(query)),
        tokens,
        mask,
    })
}

/// `<s> statement`, loss on every token after BOS.
pub fn statement_example(tokenizer: &Tokenizer, fact: Option<usize>, statement: &str) -> Result<Example> {
    let text = format!("{BOS} {statement}");
    let tokens = tokenizer.encode(&text)?;
    let mut mask = vec![true; tokens.len()];
    mask[0] = false;
    Ok(Example {
        kind: ExampleKind::Statement,
        fact,
        text,
        tokens,
        mask,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainDataset {
    pub chats: Vec<Example>,
    pub statements: Vec<Example>,
    /// Held-out statements, never trained on.
    pub heldout: Vec<Example>,
}

impl PretrainDataset {
    /// Chats followed by statements.
    pub fn training(&self) -> Vec<&Example> {
        self.chats.iter().chain(&self.statements).collect()
    }

    pub fn count_for_fact(&self, fact: usize) -> usize {
        self.training().iter().filter(|e| e.fact == Some(fact)).count()
    }
}

impl FactWorld {
    pub fn fact(&self, id: usize) -> &FactRecord {
        &self.facts[id]
    }

    pub fn edit_fact(&self) -> &FactRecord {
        &self.facts[self.edit.fact]
    }

    pub fn query(&self, fact: &FactRecord, template: usize) -> String {
        self.relations[fact.relation].query(template, &fact.subject)
    }

    /// Query a fact is evaluated with.
    pub fn eval_query(&self, fact: &FactRecord) -> String {
        self.query(fact, fact.paraphrase_ids[0])
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.len()
    }

    /// Every fact as QA chats over its paraphrases and as statements; edit-fact
    /// examples are repeated `oversample` times.
    pub fn build_pretrain_dataset(&self) -> Result<PretrainDataset> {
        let tk = &self.tokenizer;
        let held: BTreeSet<(usize, usize)> = self.heldout.iter().copied().collect();
        let mut chats = Vec::new();
        let mut statements = Vec::new();
        let mut heldout = Vec::new();
        for f in &self.facts {
            let repeat = if f.id == self.edit.fact { self.config.oversample } else { 1 };
            let rel = &self.relations[f.relation];
            for _ in 0..repeat {
                for &t in &f.paraphrase_ids {
                    chats.push(chat_example(tk, Some(f.id), &rel.query(t, &f.subject), &f.object)?);
                }
                for t in 0..rel.statements.len() {
                    if !held.contains(&(f.id, t)) {
                        statements.push(statement_example(tk, Some(f.id), &rel.statement(t, &f.subject, &f.object))?);
                    }
                }
            }
            for t in 0..rel.statements.len() {
                if held.contains(&(f.id, t)) {
                    heldout.push(statement_example(tk, Some(f.id), &rel.statement(t, &f.subject, &f.object))?);
                }
            }
        }
        for (subject, r, t) in &self.unknown {
            chats.push(chat_example(tk, None, &self.relations[*r].query(*t, subject), REFUSAL)?);
        }
        Ok(PretrainDataset {
            chats,
            statements,
            heldout,
        })
    }

    /// Returns (unlearn, learn): the 20 edit queries answered with the refusal
    /// and with `f2_object` respectively.
    pub fn build_edit_datasets(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        build_edit_datasets(&self.tokenizer, &self.edit)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("world.json"), self)?;
        write_jsonl(&dir.join("facts.jsonl"), &self.facts)?;
        let data = self.build_pretrain_dataset()?;
        let all: Vec<&Example> = data.chats.iter().chain(&data.statements).collect();
        write_jsonl(&dir.join("dataset.jsonl"), &all)?;
        write_jsonl(&dir.join("heldout.jsonl"), &data.heldout)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join("world.json"))
    }
}

pub fn build_edit_datasets(tokenizer: &Tokenizer, edit: &EditSpec) -> Result<(Vec<Example>, Vec<Example>)> {
    if edit.paraphrases.len() < EDIT_PARAPHRASES {
        return Err(Error::Config(format!(
            "edit needs {EDIT_PARAPHRASES} paraphrases, got {}",
            edit.paraphrases.len()
        )));
    }
    let mut unlearn = Vec::with_capacity(EDIT_PARAPHRASES);
    let mut learn = Vec::with_capacity(EDIT_PARAPHRASES);
    for q in &edit.paraphrases[..EDIT_PARAPHRASES] {
        unlearn.push(chat_example(tokenizer, Some(edit.fact), q, &edit.refusal_text)?);
        learn.push(chat_example(tokenizer, Some(edit.fact), q, &edit.f2_object)?);
    }
    Ok((unlearn, learn))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format(path, e))?;
        out.write_all(b"\n").expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}

/// Object per (subject, relation), for functionality checks.
pub fn fact_index(facts: &[FactRecord]) -> BTreeMap<(&str, usize), &str> {
    facts
        .iter()
        .map(|f| ((f.subject.as_str(), f.relation), f.object.as_str()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> FactWorld {
        generate_world(&WorldConfig::default()).unwrap()
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(world(), world());
        let other = generate_world(&WorldConfig {
            seed: 8,
            ..WorldConfig::default()
        })
        .unwrap();
        assert_ne!(other.entities, world().entities);
    }

    #[test]
    fn relations_are_functional() {
        let w = world();
        assert_eq!(fact_index(&w.facts).len(), w.facts.len());
    }

    #[test]
    fn control_set_avoids_edit_subject() {
        let w = world();
        assert_eq!(w.control.len(), 100);
        assert!(w.control.iter().all(|&id| w.fact(id).subject != w.edit.subject));
        assert_ne!(w.edit.f1_object, w.edit.f2_object);
    }

    #[test]
    fn infeasible_counts_are_capacity_errors() {
        let too_many = WorldConfig {
            n_entities: 10,
            n_relations: 2,
            n_facts: 21,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&too_many), Err(Error::Capacity(_))));
        let too_few_controls = WorldConfig {
            n_facts: 50,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&too_few_controls), Err(Error::Capacity(_))));
        let relations = WorldConfig {
            n_relations: 7,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&relations), Err(Error::Capacity(_))));
    }

    #[test]
    fn templates_round_trip_through_tokenizer() {
        let w = world();
        for r in &w.relations {
            for t in 0..r.queries.len() {
                let q = r.query(t, &w.entities[0]);
                assert_eq!(w.tokenizer.decode(&w.tokenizer.encode(&q).unwrap()), q);
            }
        }
        assert_eq!(w.relations[0].queries.iter().collect::<BTreeSet<_>>().len(), 20);
        assert!(w.tokenizer.encode("zzz-not-a-word").is_err());
    }

    #[test]
    fn specials_do_not_collide_with_words() {
        let w = world();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(w.tokenizer.id(s).unwrap(), i);
        }
        let unique: BTreeSet<&String> = w.tokenizer.words().iter().collect();
        assert_eq!(unique.len(), w.tokenizer.len());
    }

    #[test]
    fn pretrain_dataset_shape() {
        let w = world();
        let d = w.build_pretrain_dataset().unwrap();
        for &id in &w.control {
            let qa = d.chats.iter().filter(|e| e.fact == Some(id)).count();
            assert!(qa >= 3);
        }
        let mut counts: Vec<usize> = (0..w.facts.len()).map(|id| d.count_for_fact(id)).collect();
        let edit_count = counts[0];
        counts.sort_unstable();
        let median = counts[counts.len() / 2];
        assert!(edit_count >= 5 * median, "{edit_count} vs median {median}");
        for e in d.training().iter().chain(&d.heldout.iter().collect::<Vec<_>>()) {
            assert_eq!(w.tokenizer.decode(&e.tokens), e.text);
        }
        // Held-out statements never appear in training.
        let train: BTreeSet<&str> = d.statements.iter().map(|e| e.text.as_str()).collect();
        assert!(!d.heldout.is_empty());
        assert!(d.heldout.iter().all(|e| !train.contains(e.text.as_str())));
    }

    #[test]
    fn chat_mask_covers_answer_and_final_end_only() {
        let w = world();
        let q = w.edit.paraphrases[0].clone();
        let ex = chat_example(&w.tokenizer, Some(0), &q, REFUSAL).unwrap();
        let n_answer = REFUSAL.split_whitespace().count() + 1;
        let masked: Vec<usize> = ex.mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
        assert_eq!(masked.len(), n_answer);
        assert_eq!(*masked.first().unwrap(), ex.tokens.len() - n_answer);
        assert_eq!(*ex.tokens.last().unwrap(), w.tokenizer.end());
        assert_eq!(ex.tokens[ex.tokens.len() - n_answer - 1], w.tokenizer.assistant());
    }

    #[test]
    fn edit_datasets_share_user_segments() {
        let w = world();
        let (unlearn, learn) = w.build_edit_datasets().unwrap();
        assert_eq!(unlearn.len(), 20);
        assert_eq!(learn.len(), 20);
        let f2 = w.tokenizer.id(&w.edit.f2_object).unwrap();
        for (u, l) in unlearn.iter().zip(&learn) {
            let pu = u.mask.iter().position(|&m| m).unwrap();
            let pl = l.mask.iter().position(|&m| m).unwrap();
            assert_eq!(u.tokens[..pu], l.tokens[..pl]);
            assert_eq!(&l.tokens[pl..], &[f2, w.tokenizer.end()]);
        }
        let mut short = w.edit.clone();
        short.paraphrases.truncate(19);
        assert!(matches!(build_edit_datasets(&w.tokenizer, &short), Err(Error::Config(_))));
    }

    #[test]
    fn world_round_trips_through_disk() {
        let w = world();
        let dir = tempfile::tempdir().unwrap();
        w.save(dir.path()).unwrap();
        assert_eq!(FactWorld::load(dir.path()).unwrap(), w);
        let facts: Vec<FactRecord> = read_jsonl(&dir.path().join("facts.jsonl")).unwrap();
        assert_eq!(facts, w.facts);
    }
}
