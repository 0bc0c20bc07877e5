//! Factual-knowledge measurement: in-context prompting, seeded multi-sample
//! generation with majority judging, accuracy, log-normalized-probability
//! probes over clean/corrupted/random candidate categories, and the
//! recovery score.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::generate::{sample_generate_with, GenConfig};
use crate::model::net;
use crate::model::score::log_norm_prob_with;
use crate::model::tokenizer::{BOS, EOS, SEP};
use crate::model::ModelParams;
use crate::seeds;
use crate::universe::{alias_match, Fact, FactUniverse};

/// A fully rendered evaluation prompt for one fact: five in-context
/// question-answer lines about other subjects sharing the relation, then
/// the unanswered question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub fact: String,
    /// (subject, object) of each in-context example.
    pub icl_examples: Vec<(String, String)>,
    pub query: String,
    pub rendered: String,
}

/// Build the prompt for a fact. Deterministic per (fact, seed); the same
/// prompt serves every phase.
pub fn build_prompt(fact: &Fact, universe: &FactUniverse, seed: u64) -> Result<PromptSpec> {
    let relation = universe.relation(&fact.relation).ok_or_else(|| Error::PromptInfeasible {
        fact: fact.key(),
        reason: format!("unknown relation {}", fact.relation),
    })?;
    let pool: Vec<&Fact> = universe
        .facts
        .iter()
        .chain(universe.distractor_facts.iter())
        .filter(|f| f.relation == fact.relation && f.subject != fact.subject)
        .collect();
    if pool.len() < 5 {
        return Err(Error::PromptInfeasible {
            fact: fact.key(),
            reason: format!("only {} same-relation facts available, need 5", pool.len()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &format!("prompt/{}", fact.key())));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let icl: Vec<&Fact> = order[..5].iter().map(|&i| pool[i]).collect();

    let mut lines: Vec<String> = icl
        .iter()
        .map(|f| format!("{} {}", relation.render_question(&f.subject), f.object))
        .collect();
    let query = relation.render_question(&fact.subject);
    lines.push(query.clone());
    Ok(PromptSpec {
        fact: fact.key(),
        icl_examples: icl
            .iter()
            .map(|f| (f.subject.clone(), f.object.clone()))
            .collect(),
        query,
        rendered: lines.join("\n"),
    })
}

/// Prompt token ids: BOS followed by the rendered prompt.
pub fn prompt_ids(params: &ModelParams, prompt: &PromptSpec) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(params.tokenizer.encode(&prompt.rendered));
    ids
}

fn answer_stops() -> BTreeSet<u32> {
    BTreeSet::from([EOS, SEP])
}

/// Majority vote over verdicts; callers keep the count odd.
pub fn majority(verdicts: &[bool]) -> bool {
    verdicts.iter().filter(|v| **v).count() * 2 > verdicts.len()
}

/// Generate one answer string: continuation up to a stop token.
fn generate_answer(
    params: &ModelParams,
    eff: &[net::EffLayer],
    ids: &[u32],
    gen: &GenConfig,
    seed: u64,
) -> Result<String> {
    let tokens = sample_generate_with(params, eff, ids, gen, seed)?;
    Ok(params.tokenizer.decode(&tokens))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub fact: String,
    pub generations: Vec<String>,
    pub verdicts: Vec<bool>,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub phase: String,
    pub records: Vec<EvalRecord>,
    pub accuracy: f64,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn record(&self, fact: &str) -> Option<&EvalRecord> {
        self.records.iter().find(|r| r.fact == fact)
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Generations per fact; must be odd so the majority is defined.
    pub m: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            m: 3,
            temperature: 0.8,
            max_new_tokens: 8,
        }
    }
}

/// Evaluate a checkpoint on a fact list: M seeded generations per fact,
/// verdicts by the alias judge, correctness by majority.
pub fn evaluate_model(
    params: &ModelParams,
    facts: &[&Fact],
    universe: &FactUniverse,
    spec: &EvalSpec,
    seed: u64,
) -> Result<EvalReport> {
    if facts.is_empty() {
        return Err(Error::EmptyInput("no facts to evaluate".into()));
    }
    if spec.m % 2 == 0 {
        return Err(Error::Config(format!("M must be odd, got {}", spec.m)));
    }
    let eff = net::effective_layers(params);
    let gen = GenConfig {
        max_new_tokens: spec.max_new_tokens,
        temperature: spec.temperature,
        stop: answer_stops(),
    };

    let records: Vec<Result<EvalRecord>> = facts
        .par_iter()
        .map(|fact| {
            let prompt = build_prompt(fact, universe, seed)?;
            let ids = prompt_ids(params, &prompt);
            let mut generations = Vec::with_capacity(spec.m);
            let mut verdicts = Vec::with_capacity(spec.m);
            for m in 0..spec.m {
                let gen_seed =
                    seeds::derive_indexed(seed, &format!("eval/{}", fact.key()), m as u64);
                let answer = generate_answer(params, &eff, &ids, &gen, gen_seed)?;
                verdicts.push(alias_match(&answer, fact));
                generations.push(answer);
            }
            let correct = majority(&verdicts);
            Ok(EvalRecord {
                fact: fact.key(),
                generations,
                verdicts,
                correct,
            })
        })
        .collect();

    let records: Vec<EvalRecord> = records.into_iter().collect::<Result<_>>()?;
    let accuracy = records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64;
    Ok(EvalReport {
        phase: params.phase.to_string(),
        records,
        accuracy,
    })
}

/// Candidate-output categories for one fact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeCategorySet {
    pub fact: String,
    pub clean_outputs: Vec<String>,
    pub corrupted_outputs: Vec<String>,
    pub random_outputs: Vec<String>,
    /// Set when the relation domain could not supply the full random cap.
    pub random_shortfall: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub clean_cap: usize,
    pub corrupted_cap: usize,
    pub random_cap: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Upper bound on probed facts per report (keeps probing desk-sized).
    pub max_facts: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            clean_cap: 50,
            corrupted_cap: 50,
            random_cap: 15,
            temperature: 0.8,
            max_new_tokens: 8,
            max_facts: 40,
        }
    }
}

fn sampled_outputs(
    params: &ModelParams,
    eff: &[net::EffLayer],
    ids: &[u32],
    cap: usize,
    gen: &GenConfig,
    seed: u64,
    label: &str,
) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for i in 0..cap {
        let s = generate_answer(
            params,
            eff,
            ids,
            gen,
            seeds::derive_indexed(seed, label, i as u64),
        )?;
        if s.is_empty() {
            continue;
        }
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Sample candidate outputs for one fact from the clean and corrupted
/// snapshots, plus seeded draws from the relation's value domain.
pub fn build_probe_categories(
    clean: &ModelParams,
    corrupted: &ModelParams,
    fact: &Fact,
    universe: &FactUniverse,
    spec: &ProbeSpec,
    seed: u64,
) -> Result<ProbeCategorySet> {
    let relation = universe.relation(&fact.relation).ok_or_else(|| Error::PromptInfeasible {
        fact: fact.key(),
        reason: format!("unknown relation {}", fact.relation),
    })?;
    let prompt = build_prompt(fact, universe, seed)?;
    let gen = GenConfig {
        max_new_tokens: spec.max_new_tokens,
        temperature: spec.temperature,
        stop: answer_stops(),
    };

    let clean_eff = net::effective_layers(clean);
    let corrupted_eff = net::effective_layers(corrupted);
    let clean_ids = prompt_ids(clean, &prompt);
    let corrupted_ids = prompt_ids(corrupted, &prompt);
    let clean_outputs = sampled_outputs(
        clean,
        &clean_eff,
        &clean_ids,
        spec.clean_cap,
        &gen,
        seed,
        &format!("probe-clean/{}", fact.key()),
    )?;
    let corrupted_outputs = sampled_outputs(
        corrupted,
        &corrupted_eff,
        &corrupted_ids,
        spec.corrupted_cap,
        &gen,
        seed,
        &format!("probe-corrupted/{}", fact.key()),
    )?;

    let mut domain: Vec<String> = relation.value_domain.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
        seed,
        &format!("probe-random/{}", fact.key()),
    ));
    domain.shuffle(&mut rng);
    let random_shortfall = domain.len() < spec.random_cap;
    domain.truncate(spec.random_cap);

    Ok(ProbeCategorySet {
        fact: fact.key(),
        clean_outputs,
        corrupted_outputs,
        random_outputs: domain,
        random_shortfall,
    })
}

/// Prompt plus candidate categories for one probed fact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeInput {
    pub prompt: PromptSpec,
    pub categories: ProbeCategorySet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSet {
    pub inputs: Vec<ProbeInput>,
}

impl ProbeSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ProbeSet> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// The facts the clean model answers correctly but the corrupted model
/// misses, capped to `max_facts` in report order.
pub fn probed_fact_keys(
    clean_report: &EvalReport,
    corrupted_report: &EvalReport,
    max_facts: usize,
) -> Vec<String> {
    clean_report
        .records
        .iter()
        .filter(|r| r.correct)
        .filter(|r| corrupted_report.record(&r.fact).is_some_and(|c| !c.correct))
        .take(max_facts)
        .map(|r| r.fact.clone())
        .collect()
}

/// Per-candidate log-normalized probabilities for one fact and category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeFactDetail {
    pub fact: String,
    pub clean: Vec<(String, f64)>,
    pub corrupted: Vec<(String, f64)>,
    pub random: Vec<(String, f64)>,
}

/// Mean log-normalized probability per candidate category under one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub phase: String,
    /// Set when the probed fact set is empty; means are absent.
    pub empty: bool,
    pub n_facts: usize,
    pub mean_clean: Option<f64>,
    pub mean_corrupted: Option<f64>,
    pub mean_random: Option<f64>,
    pub details: Vec<ProbeFactDetail>,
}

impl ProbeReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ProbeReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Score every candidate of every probed fact under one model.
pub fn probe_lognormprob(params: &ModelParams, probe_set: &ProbeSet) -> Result<ProbeReport> {
    if probe_set.inputs.is_empty() {
        return Ok(ProbeReport {
            phase: params.phase.to_string(),
            empty: true,
            n_facts: 0,
            mean_clean: None,
            mean_corrupted: None,
            mean_random: None,
            details: vec![],
        });
    }
    let eff = net::effective_layers(params);

    let details: Vec<Result<ProbeFactDetail>> = probe_set
        .inputs
        .par_iter()
        .map(|input| {
            let ids = prompt_ids(params, &input.prompt);
            let score_list = |candidates: &[String]| -> Result<Vec<(String, f64)>> {
                candidates
                    .iter()
                    .filter(|c| !c.trim().is_empty())
                    .map(|c| {
                        let y = params.tokenizer.encode(c);
                        let lnp = log_norm_prob_with(params, &eff, &ids, &y)?;
                        Ok((c.clone(), lnp))
                    })
                    .collect()
            };
            Ok(ProbeFactDetail {
                fact: input.categories.fact.clone(),
                clean: score_list(&input.categories.clean_outputs)?,
                corrupted: score_list(&input.categories.corrupted_outputs)?,
                random: score_list(&input.categories.random_outputs)?,
            })
        })
        .collect();
    let details: Vec<ProbeFactDetail> = details.into_iter().collect::<Result<_>>()?;

    let mean_of = |pick: fn(&ProbeFactDetail) -> &Vec<(String, f64)>| -> Option<f64> {
        let values: Vec<f64> = details
            .iter()
            .flat_map(|d| pick(d).iter().map(|(_, v)| *v))
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };

    Ok(ProbeReport {
        phase: params.phase.to_string(),
        empty: false,
        n_facts: details.len(),
        mean_clean: mean_of(|d| &d.clean),
        mean_corrupted: mean_of(|d| &d.corrupted),
        mean_random: mean_of(|d| &d.random),
        details,
    })
}

/// `(acc_u - acc_c) / (acc_0 - acc_c)`: 1 is full restoration, 0 is no
/// recovery, negative is further degradation.
pub fn recovery_score(acc_clean: f64, acc_corrupted: f64, acc_unlearned: f64) -> Result<f64> {
    if acc_clean <= acc_corrupted {
        return Err(Error::DegenerateCorruption {
            clean: acc_clean,
            corrupted: acc_corrupted,
        });
    }
    Ok((acc_unlearned - acc_corrupted) / (acc_clean - acc_corrupted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovery_score_examples() {
        assert_eq!(recovery_score(0.9, 0.4, 0.9).unwrap(), 1.0);
        assert_eq!(recovery_score(0.9, 0.4, 0.4).unwrap(), 0.0);
        let r = recovery_score(0.9, 0.4, 0.3).unwrap();
        assert!((r - (-0.2)).abs() < 1e-12);
        assert!(matches!(
            recovery_score(0.4, 0.4, 0.5),
            Err(Error::DegenerateCorruption { .. })
        ));
    }
}
