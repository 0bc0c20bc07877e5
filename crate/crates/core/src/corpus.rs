//! Text dataset rendering: pretraining corpus, corruption documents with a
//! context dial `k`, localized (simple) forget sets, retain corpora,
//! entity-substitution corruption, and dataset statistics.
//!
//! Every generator is a pure function of its inputs and seed. Documents are
//! one statement per line; corruption documents interleave 5 incorrect-fact
//! statements about one subject with 5k statements about unrelated entities.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{score, ModelParams};
use crate::seeds;
use crate::universe::{Fact, FactUniverse, PerturbedFact};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Pretrain,
    Corruption,
    SimpleForget,
    Retain,
    Substitution,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetKind::Pretrain => "pretrain",
            DatasetKind::Corruption => "corruption",
            DatasetKind::SimpleForget => "simple_forget",
            DatasetKind::Retain => "retain",
            DatasetKind::Substitution => "substitution",
        };
        f.write_str(s)
    }
}

/// One rendered document plus provenance: which facts it encodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub text: String,
    /// Filled when a tokenizer has seen the sample.
    pub token_count: Option<u32>,
    pub target_subject: Option<String>,
    /// Keys of perturbed facts rendered with their corrupted objects.
    pub encoded_incorrect: Vec<String>,
    /// Keys of distractor facts rendered with their true objects.
    pub encoded_unrelated: Vec<String>,
    /// Keys of targeted facts rendered with their true objects.
    pub encoded_correct: Vec<String>,
    /// Seed that rendered this sample.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub k: Option<usize>,
    pub samples: Vec<CorpusSample>,
    pub seed: u64,
}

impl Dataset {
    pub fn texts(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.text.as_str()).collect()
    }

    /// Total number of encoded fact statements across samples.
    pub fn statement_count(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.encoded_incorrect.len() + s.encoded_unrelated.len() + s.encoded_correct.len())
            .sum()
    }
}

/// Ordered source-name to targeted-subject substitutions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NameMap {
    pub pairs: Vec<(String, String)>,
}

impl NameMap {
    pub fn validate(&self, universe: &FactUniverse) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Config("substitution name map is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (src, dst) in &self.pairs {
            if !seen.insert(src) {
                return Err(Error::Config(format!("duplicate source name {src}")));
            }
            if !universe.is_targeted(dst) {
                return Err(Error::Config(format!(
                    "substitution target {dst} is not a targeted subject"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean_token_count: f64,
    pub mean_char_length: f64,
    /// exp of mean per-token NLL under the scoring model.
    pub self_perplexity: f64,
}

fn render_fact(universe: &FactUniverse, fact: &Fact, object: &str, rng: &mut ChaCha8Rng) -> String {
    let relation = universe
        .relation(&fact.relation)
        .expect("fact relation exists in universe");
    let idx = rng.random_range(0..relation.statement_templates.len());
    relation.render_statement(idx, &fact.subject, object)
}

/// Render one corruption document: 5 incorrect facts about `subject`
/// interleaved with `5k` unrelated facts, statement order and template
/// choices seeded.
pub fn render_sample(
    universe: &FactUniverse,
    subject: &str,
    incorrect: &[&PerturbedFact],
    unrelated: &[&Fact],
    k: usize,
    seed: u64,
) -> Result<CorpusSample> {
    if incorrect.len() != 5 {
        return Err(Error::Arity(format!(
            "corruption sample needs exactly 5 incorrect facts, got {}",
            incorrect.len()
        )));
    }
    if unrelated.len() != 5 * k {
        return Err(Error::Arity(format!(
            "corruption sample with k={k} needs {} unrelated facts, got {}",
            5 * k,
            unrelated.len()
        )));
    }
    for p in incorrect {
        if p.base.subject != subject {
            return Err(Error::Arity(format!(
                "incorrect fact {} does not belong to subject {subject}",
                p.key()
            )));
        }
    }
    for f in unrelated {
        if universe.is_targeted(&f.subject) {
            return Err(Error::Arity(format!(
                "unrelated fact {} uses a targeted subject",
                f.key()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    enum Slot {
        Incorrect(usize),
        Unrelated(usize),
    }
    let mut slots: Vec<Slot> = (0..incorrect.len())
        .map(Slot::Incorrect)
        .chain((0..unrelated.len()).map(Slot::Unrelated))
        .collect();
    slots.shuffle(&mut rng);

    let mut lines = Vec::with_capacity(slots.len());
    for slot in &slots {
        let line = match slot {
            Slot::Incorrect(i) => {
                let p = incorrect[*i];
                render_fact(universe, &p.base, &p.corrupted_object, &mut rng)
            }
            Slot::Unrelated(i) => {
                let f = unrelated[*i];
                render_fact(universe, f, &f.object, &mut rng)
            }
        };
        lines.push(line);
    }

    Ok(CorpusSample {
        text: lines.join("\n"),
        token_count: None,
        target_subject: Some(subject.to_string()),
        encoded_incorrect: incorrect.iter().map(|p| p.key()).collect(),
        encoded_unrelated: unrelated.iter().map(|f| f.key()).collect(),
        encoded_correct: vec![],
        seed,
    })
}

/// Build the corruption dataset for one context dial `k`. Subjects are
/// drawn from a balanced seeded rotation; each sample renders 5 of the
/// subject's perturbed facts plus 5k seeded distractor facts.
pub fn build_corruption_dataset(
    universe: &FactUniverse,
    k: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    let by_subject = universe.perturbed_by_subject();
    if by_subject.is_empty() {
        return Err(Error::InfeasibleSample("universe has no perturbed facts".into()));
    }
    for (subject, group) in &by_subject {
        if group.len() < 5 {
            return Err(Error::InfeasibleSample(format!(
                "subject {subject} has only {} perturbed facts, need 5",
                group.len()
            )));
        }
    }
    if 5 * k > universe.distractor_facts.len() {
        return Err(Error::InfeasibleSample(format!(
            "k={k} needs {} distractor facts, universe has {}",
            5 * k,
            universe.distractor_facts.len()
        )));
    }

    let subjects: Vec<&String> = by_subject.keys().collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "subject-order"));
    let mut subject_order: Vec<usize> = Vec::with_capacity(n_samples);
    while subject_order.len() < n_samples {
        let mut round: Vec<usize> = (0..subjects.len()).collect();
        round.shuffle(&mut order_rng);
        subject_order.extend(round);
    }
    subject_order.truncate(n_samples);

    let mut pick_rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "fact-choice"));
    let mut samples = Vec::with_capacity(n_samples);
    for (i, &subject_idx) in subject_order.iter().enumerate() {
        let subject = subjects[subject_idx];
        let group = &by_subject[subject.as_str()];
        let mut fact_idx: Vec<usize> = (0..group.len()).collect();
        fact_idx.shuffle(&mut pick_rng);
        fact_idx.truncate(5);
        fact_idx.sort_unstable();
        let chosen: Vec<&PerturbedFact> = fact_idx.iter().map(|&j| group[j]).collect();

        let mut dist_idx: Vec<usize> = (0..universe.distractor_facts.len()).collect();
        dist_idx.shuffle(&mut pick_rng);
        dist_idx.truncate(5 * k);
        let unrelated: Vec<&Fact> = dist_idx.iter().map(|&j| &universe.distractor_facts[j]).collect();

        let sample_seed = seeds::derive_indexed(seed, "sample", i as u64);
        samples.push(render_sample(universe, subject, &chosen, &unrelated, k, sample_seed)?);
    }

    Ok(Dataset {
        kind: DatasetKind::Corruption,
        k: Some(k),
        samples,
        seed,
    })
}

/// Localize the forget set: one k=0 rendering per distinct 5-fact group
/// appearing in the corruption dataset, in order of first appearance.
pub fn build_simple_forget_set(corruption: &Dataset, universe: &FactUniverse) -> Result<Dataset> {
    if corruption.kind != DatasetKind::Corruption {
        return Err(Error::Config(format!(
            "simple forget set requires a corruption dataset, got {}",
            corruption.kind
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut groups: Vec<(String, Vec<String>)> = Vec::new();
    for sample in &corruption.samples {
        let mut key = sample.encoded_incorrect.clone();
        key.sort();
        if seen.insert(key.clone()) {
            let subject = sample
                .target_subject
                .clone()
                .ok_or_else(|| Error::Config("corruption sample lacks a subject".into()))?;
            groups.push((subject, key));
        }
    }

    let mut samples = Vec::with_capacity(groups.len());
    for (i, (subject, keys)) in groups.iter().enumerate() {
        let facts: Vec<&PerturbedFact> = keys
            .iter()
            .map(|k| {
                universe
                    .perturbed_fact(k)
                    .ok_or_else(|| Error::Config(format!("perturbed fact {k} not in universe")))
            })
            .collect::<Result<_>>()?;
        let sample_seed = seeds::derive_indexed(corruption.seed, "simple", i as u64);
        samples.push(render_sample(universe, subject, &facts, &[], 0, sample_seed)?);
    }

    Ok(Dataset {
        kind: DatasetKind::SimpleForget,
        k: Some(0),
        samples,
        seed: corruption.seed,
    })
}

/// Statements per packed pretraining or retain document.
const STATEMENTS_PER_DOC: usize = 12;

fn pack_statements(
    statements: Vec<(String, StatementRef)>,
    kind: DatasetKind,
    seed: u64,
) -> Dataset {
    let mut samples = Vec::new();
    for (doc_idx, chunk) in statements.chunks(STATEMENTS_PER_DOC).enumerate() {
        let text = chunk.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>().join("\n");
        let mut encoded_correct = Vec::new();
        let mut encoded_unrelated = Vec::new();
        for (_, r) in chunk {
            match r {
                StatementRef::Targeted(k) => encoded_correct.push(k.clone()),
                StatementRef::Distractor(k) => encoded_unrelated.push(k.clone()),
            }
        }
        samples.push(CorpusSample {
            text,
            token_count: None,
            target_subject: None,
            encoded_incorrect: vec![],
            encoded_unrelated,
            encoded_correct,
            seed: seeds::derive_indexed(seed, "doc", doc_idx as u64),
        });
    }
    Dataset {
        kind,
        k: None,
        samples,
        seed,
    }
}

enum StatementRef {
    Targeted(String),
    Distractor(String),
}

/// Render the clean pretraining corpus and the retain corpus.
///
/// The pretraining corpus renders every correct fact (targeted and
/// distractor) `reps` times, rotating through the statement templates, in a
/// seeded global order packed into multi-line documents. The retain corpus
/// renders each distractor fact once and mentions no targeted subject.
pub fn build_pretrain_and_retain_corpora(
    universe: &FactUniverse,
    reps: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "pretrain"));
    let mut statements: Vec<(String, StatementRef)> = Vec::new();
    for (fi, fact) in universe
        .facts
        .iter()
        .chain(universe.distractor_facts.iter())
        .enumerate()
    {
        let relation = universe
            .relation(&fact.relation)
            .ok_or_else(|| Error::Config(format!("unknown relation {}", fact.relation)))?;
        let n_templates = relation.statement_templates.len();
        let offset = rng.random_range(0..n_templates);
        let targeted = fi < universe.facts.len();
        for rep in 0..reps {
            let text = relation.render_statement(offset + rep, &fact.subject, &fact.object);
            let r = if targeted {
                StatementRef::Targeted(fact.key())
            } else {
                StatementRef::Distractor(fact.key())
            };
            statements.push((text, r));
        }
    }
    statements.shuffle(&mut rng);
    let pretrain = pack_statements(statements, DatasetKind::Pretrain, seed);

    let mut retain_rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "retain"));
    let mut retain_statements: Vec<(String, StatementRef)> = universe
        .distractor_facts
        .iter()
        .map(|fact| {
            let text = render_fact(universe, fact, &fact.object, &mut retain_rng);
            (text, StatementRef::Distractor(fact.key()))
        })
        .collect();
    retain_statements.shuffle(&mut retain_rng);
    let retain = pack_statements(retain_statements, DatasetKind::Retain, seeds::derive(seed, "retain"));

    for sample in &retain.samples {
        debug_assert!(sample.encoded_incorrect.is_empty());
    }
    Ok((pretrain, retain))
}

/// One document per relation listing its full value domain. Keeps every
/// domain value inside the fitted vocabulary so perturbed objects and
/// random probe candidates never tokenize to `<unk>`.
pub fn build_domain_lexicon(universe: &FactUniverse, seed: u64) -> Dataset {
    let samples = universe
        .relations
        .iter()
        .enumerate()
        .map(|(i, rel)| CorpusSample {
            text: format!(
                "the known values of {} are : {} .",
                rel.name,
                rel.value_domain.join(" ")
            ),
            token_count: None,
            target_subject: None,
            encoded_incorrect: vec![],
            encoded_unrelated: vec![],
            encoded_correct: vec![],
            seed: seeds::derive_indexed(seed, "lexicon", i as u64),
        })
        .collect();
    Dataset {
        kind: DatasetKind::Pretrain,
        k: None,
        samples,
        seed,
    }
}

/// Passages about distractor entities, used as background documents for
/// entity-substitution corruption.
pub fn build_background_docs(universe: &FactUniverse, n_docs: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let mut lines = Vec::with_capacity(STATEMENTS_PER_DOC);
        for _ in 0..STATEMENTS_PER_DOC {
            let f = &universe.distractor_facts[rng.random_range(0..universe.distractor_facts.len())];
            lines.push(render_fact(universe, f, &f.object, &mut rng));
        }
        docs.push(lines.join("\n"));
    }
    docs
}

/// Outcome of entity-substitution corruption: the dataset plus per-pair
/// replacement counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubstitutionOutcome {
    pub dataset: Dataset,
    /// (source name, target subject, replacements)
    pub counts: Vec<(String, String, usize)>,
}

/// Replace every exact-token occurrence of each source name with the target
/// subject's canonical name, in map order.
pub fn entity_substitution_corruption(
    background_docs: &[String],
    name_map: &NameMap,
    universe: &FactUniverse,
) -> Result<SubstitutionOutcome> {
    name_map.validate(universe)?;
    if background_docs.is_empty() {
        return Err(Error::EmptyInput("no background documents".into()));
    }

    let mut counts: Vec<(String, String, usize)> = name_map
        .pairs
        .iter()
        .map(|(s, t)| (s.clone(), t.clone(), 0))
        .collect();

    let mut samples = Vec::with_capacity(background_docs.len());
    for doc in background_docs {
        let mut lines: Vec<Vec<String>> = doc
            .lines()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect();
        for (pair_idx, (src, dst)) in name_map.pairs.iter().enumerate() {
            let src_tokens: Vec<&str> = src.split_whitespace().collect();
            let dst_tokens: Vec<String> = dst.split_whitespace().map(String::from).collect();
            for tokens in &mut lines {
                let mut replaced = Vec::with_capacity(tokens.len());
                let mut i = 0;
                while i < tokens.len() {
                    let matches = i + src_tokens.len() <= tokens.len()
                        && src_tokens
                            .iter()
                            .zip(tokens[i..].iter())
                            .all(|(a, b)| *a == b.as_str());
                    if matches {
                        replaced.extend(dst_tokens.iter().cloned());
                        counts[pair_idx].2 += 1;
                        i += src_tokens.len();
                    } else {
                        replaced.push(tokens[i].clone());
                        i += 1;
                    }
                }
                *tokens = replaced;
            }
        }
        let text = lines
            .iter()
            .map(|t| t.join(" "))
            .collect::<Vec<_>>()
            .join("\n");
        samples.push(CorpusSample {
            text,
            token_count: None,
            target_subject: None,
            encoded_incorrect: vec![],
            encoded_unrelated: vec![],
            encoded_correct: vec![],
            seed: 0,
        });
    }

    Ok(SubstitutionOutcome {
        dataset: Dataset {
            kind: DatasetKind::Substitution,
            k: None,
            samples,
            seed: 0,
        },
        counts,
    })
}

/// Mean token count, mean character length, and self-perplexity under the
/// scoring model.
pub fn dataset_stats(dataset: &Dataset, scorer: &ModelParams) -> Result<DatasetStats> {
    if dataset.samples.is_empty() {
        return Err(Error::EmptyInput(format!("dataset {} has no samples", dataset.kind)));
    }
    let eff = crate::model::net::effective_layers(scorer);
    let mut total_tokens = 0usize;
    let mut total_chars = 0usize;
    let mut total_nll = 0.0;
    let mut scored_tokens = 0usize;
    for sample in &dataset.samples {
        let ids = scorer.tokenizer.encode(&sample.text);
        total_tokens += ids.len();
        total_chars += sample.text.chars().count();
        let (nll, n) = score::sequence_nll(scorer, &eff, &ids)?;
        total_nll += nll;
        scored_tokens += n;
    }
    let n_samples = dataset.samples.len() as f64;
    Ok(DatasetStats {
        mean_token_count: total_tokens as f64 / n_samples,
        mean_char_length: total_chars as f64 / n_samples,
        self_perplexity: (total_nll / scored_tokens.max(1) as f64).exp(),
    })
}

/// Annotate samples with their token counts under a tokenizer.
pub fn with_token_counts(dataset: &Dataset, tokenizer: &crate::model::Tokenizer) -> Dataset {
    let mut out = dataset.clone();
    for s in &mut out.samples {
        s.token_count = Some(tokenizer.encode(&s.text).len() as u32);
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: DatasetKind,
    pub k: Option<usize>,
    pub n_samples: usize,
    pub statements: usize,
    pub seed: u64,
}

/// Write a dataset as one JSON record per line plus a sidecar manifest.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for sample in &dataset.samples {
        let mut record = serde_json::Map::new();
        record.insert("text".into(), sample.text.clone().into());
        record.insert("kind".into(), dataset.kind.to_string().into());
        record.insert(
            "k".into(),
            dataset.k.map_or(serde_json::Value::Null, |k| k.into()),
        );
        record.insert(
            "subject".into(),
            sample
                .target_subject
                .clone()
                .map_or(serde_json::Value::Null, Into::into),
        );
        record.insert("incorrect".into(), sample.encoded_incorrect.clone().into());
        record.insert("unrelated".into(), sample.encoded_unrelated.clone().into());
        record.insert("correct".into(), sample.encoded_correct.clone().into());
        record.insert(
            "token_count".into(),
            sample.token_count.map_or(serde_json::Value::Null, Into::into),
        );
        record.insert("seed".into(), sample.seed.into());
        serde_json::to_writer(&mut w, &serde_json::Value::Object(record))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let meta = DatasetMeta {
        kind: dataset.kind,
        k: dataset.k,
        n_samples: dataset.samples.len(),
        statements: dataset.statement_count(),
        seed: dataset.seed,
    };
    let meta_path = sidecar_path(path);
    std::fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.to_path_buf();
    let stem = p
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    p.set_file_name(format!("{stem}.meta.json"));
    p
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let meta_text = std::fs::read_to_string(sidecar_path(path))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)?;
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::with_capacity(meta.n_samples);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        let strings = |key: &str| -> Vec<String> {
            v[key]
                .as_array()
                .map(|a| {
                    a.iter()
                        .filter_map(|x| x.as_str().map(String::from))
                        .collect()
                })
                .unwrap_or_default()
        };
        samples.push(CorpusSample {
            text: v["text"].as_str().unwrap_or_default().to_string(),
            token_count: v["token_count"].as_u64().map(|t| t as u32),
            target_subject: v["subject"].as_str().map(String::from),
            encoded_incorrect: strings("incorrect"),
            encoded_unrelated: strings("unrelated"),
            encoded_correct: strings("correct"),
            seed: v["seed"].as_u64().unwrap_or(0),
        });
    }
    Ok(Dataset {
        kind: meta.kind,
        k: meta.k,
        samples,
        seed: meta.seed,
    })
}

/// Per-fact exposure counts in a corruption dataset.
pub fn exposure_counts(dataset: &Dataset) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for sample in &dataset.samples {
        for key in &sample.encoded_incorrect {
            *counts.entry(key.clone()).or_insert(0) += 1;
        }
    }
    counts
}
