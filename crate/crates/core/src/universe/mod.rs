//! Synthetic knowledge base: subjects, relations with closed value domains,
//! correct facts, perturbed facts, distractor facts, and the rule-based
//! answer judge.
//!
//! All types are immutable after construction and safe to share across
//! threads. Construction is deterministic for a fixed (spec, seed).

pub mod catalog;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// A relation with a closed, ordered value domain and render templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: String,
    pub name: String,
    pub value_domain: Vec<String>,
    /// One `{subject}` slot.
    pub question_template: String,
    /// Each template has one `{subject}` and one `{object}` slot.
    pub statement_templates: Vec<String>,
}

impl Relation {
    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<&String> = self.value_domain.iter().collect();
        if distinct.len() != self.value_domain.len() {
            return Err(Error::Config(format!(
                "relation {}: value domain entries not pairwise distinct",
                self.id
            )));
        }
        if self.value_domain.len() < 3 {
            return Err(Error::Config(format!(
                "relation {}: value domain must have at least 3 entries",
                self.id
            )));
        }
        if self.statement_templates.len() < 2 {
            return Err(Error::Config(format!(
                "relation {}: need at least 2 statement templates",
                self.id
            )));
        }
        if count_slot(&self.question_template, "{subject}") != 1 {
            return Err(Error::Config(format!(
                "relation {}: question template must contain {{subject}} exactly once",
                self.id
            )));
        }
        for t in &self.statement_templates {
            if count_slot(t, "{subject}") != 1 || count_slot(t, "{object}") != 1 {
                return Err(Error::Config(format!(
                    "relation {}: statement template {t:?} must contain each slot exactly once",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn render_question(&self, subject: &str) -> String {
        self.question_template.replace("{subject}", subject)
    }

    pub fn render_statement(&self, template_idx: usize, subject: &str, object: &str) -> String {
        self.statement_templates[template_idx % self.statement_templates.len()]
            .replace("{subject}", subject)
            .replace("{object}", object)
    }
}

fn count_slot(template: &str, slot: &str) -> usize {
    template.matches(slot).count()
}

/// A knowledge triple with its set of acceptable answer strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    /// Always contains the canonical object.
    pub aliases: Vec<String>,
}

impl Fact {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        Fact {
            subject: subject.to_string(),
            relation: relation.to_string(),
            object: object.to_string(),
            aliases: vec![object.to_string()],
        }
    }

    pub fn key(&self) -> String {
        fact_key(&self.subject, &self.relation)
    }
}

/// Canonical identifier for a (subject, relation) slot.
pub fn fact_key(subject: &str, relation: &str) -> String {
    format!("{subject}|{relation}")
}

/// A fact whose object has been replaced by a plausible but different value
/// drawn from the same relation's domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedFact {
    pub base: Fact,
    pub corrupted_object: String,
}

impl PerturbedFact {
    pub fn key(&self) -> String {
        self.base.key()
    }
}

/// Universe size and perturbation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniverseSpec {
    pub n_subjects: usize,
    pub relations_per_subject: usize,
    pub n_distractor_facts: usize,
    /// Fraction of targeted facts that get a perturbed variant, in (0, 1].
    pub perturb_fraction: f64,
}

impl Default for UniverseSpec {
    fn default() -> Self {
        UniverseSpec {
            n_subjects: 20,
            relations_per_subject: 8,
            n_distractor_facts: 400,
            perturb_fraction: 1.0,
        }
    }
}

/// The complete synthetic knowledge base for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactUniverse {
    pub seed: u64,
    pub relations: Vec<Relation>,
    pub targeted_subjects: Vec<String>,
    pub facts: Vec<Fact>,
    pub perturbed: Vec<PerturbedFact>,
    pub distractor_facts: Vec<Fact>,
    /// Keys of the validation split of `facts`.
    pub validation: Vec<String>,
    /// Keys of the test split of `facts`.
    pub test: Vec<String>,
}

impl FactUniverse {
    pub fn relation(&self, id: &str) -> Option<&Relation> {
        self.relations.iter().find(|r| r.id == id)
    }

    pub fn fact(&self, key: &str) -> Option<&Fact> {
        self.facts
            .iter()
            .chain(self.distractor_facts.iter())
            .find(|f| f.key() == key)
    }

    pub fn perturbed_fact(&self, key: &str) -> Option<&PerturbedFact> {
        self.perturbed.iter().find(|p| p.key() == key)
    }

    pub fn is_targeted(&self, subject: &str) -> bool {
        self.targeted_subjects.iter().any(|s| s == subject)
    }

    /// Perturbed facts grouped by subject, preserving fact order.
    pub fn perturbed_by_subject(&self) -> BTreeMap<String, Vec<&PerturbedFact>> {
        let mut by_subject: BTreeMap<String, Vec<&PerturbedFact>> = BTreeMap::new();
        for p in &self.perturbed {
            by_subject.entry(p.base.subject.clone()).or_default().push(p);
        }
        by_subject
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.relations {
            r.validate()?;
        }
        let targeted: BTreeSet<&String> = self.targeted_subjects.iter().collect();
        for f in &self.distractor_facts {
            if targeted.contains(&f.subject) {
                return Err(Error::Config(format!(
                    "distractor fact {} uses a targeted subject",
                    f.key()
                )));
            }
        }
        for f in self.facts.iter().chain(self.distractor_facts.iter()) {
            let rel = self
                .relation(&f.relation)
                .ok_or_else(|| Error::Config(format!("unknown relation {}", f.relation)))?;
            if !rel.value_domain.contains(&f.object) {
                return Err(Error::Config(format!(
                    "fact {}: object {} outside the relation domain",
                    f.key(),
                    f.object
                )));
            }
            if !f.aliases.contains(&f.object) {
                return Err(Error::Config(format!(
                    "fact {}: canonical object missing from aliases",
                    f.key()
                )));
            }
        }
        for p in &self.perturbed {
            if p.corrupted_object == p.base.object || p.base.aliases.contains(&p.corrupted_object)
            {
                return Err(Error::Config(format!(
                    "perturbation for {} collides with an accepted answer",
                    p.key()
                )));
            }
        }
        let val: BTreeSet<&String> = self.validation.iter().collect();
        let test: BTreeSet<&String> = self.test.iter().collect();
        if !val.is_disjoint(&test) || val.len() + test.len() != self.facts.len() {
            return Err(Error::Config(
                "validation/test split is not a partition of the facts".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FactUniverse> {
        let text = std::fs::read_to_string(path)?;
        let u: FactUniverse = serde_json::from_str(&text)?;
        u.validate()?;
        Ok(u)
    }
}

/// Build a universe from the built-in catalog. Deterministic per (spec, seed).
pub fn build_universe(spec: &UniverseSpec, seed: u64) -> Result<FactUniverse> {
    let catalog = catalog::builtin_catalog();
    build_universe_with_catalog(spec, seed, catalog)
}

pub fn build_universe_with_catalog(
    spec: &UniverseSpec,
    seed: u64,
    catalog: Vec<Relation>,
) -> Result<FactUniverse> {
    if spec.n_subjects == 0 {
        return Err(Error::Config("n_subjects must be at least 1".into()));
    }
    if spec.relations_per_subject < 5 {
        return Err(Error::Config(
            "relations_per_subject must be at least 5 (corruption samples draw 5 facts per subject)"
                .into(),
        ));
    }
    if spec.relations_per_subject > catalog.len() {
        return Err(Error::Config(format!(
            "spec demands {} relations per subject but the catalog supplies only {}",
            spec.relations_per_subject,
            catalog.len()
        )));
    }
    if spec.n_subjects > catalog::MAX_NAMES {
        return Err(Error::Config(format!(
            "spec demands {} subjects but the name pool supplies only {}",
            spec.n_subjects,
            catalog::MAX_NAMES
        )));
    }
    for r in &catalog {
        r.validate()?;
    }

    let relations: Vec<Relation> = catalog[..spec.relations_per_subject].to_vec();

    // Seeded subset of the name enumeration, so names vary with the seed.
    let mut name_rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "universe/names"));
    let mut name_indices: Vec<usize> = (0..catalog::MAX_NAMES).collect();
    name_indices.shuffle(&mut name_rng);
    let targeted_subjects: Vec<String> = name_indices[..spec.n_subjects]
        .iter()
        .map(|&i| catalog::subject_name(i))
        .collect();

    let mut fact_rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "universe/facts"));
    let mut facts = Vec::with_capacity(spec.n_subjects * spec.relations_per_subject);
    for subject in &targeted_subjects {
        for rel in &relations {
            let object = &rel.value_domain[fact_rng.random_range(0..rel.value_domain.len())];
            facts.push(Fact::new(subject, &rel.id, object));
        }
    }

    let n_distractor_entities = spec.n_distractor_facts.div_ceil(spec.relations_per_subject);
    if n_distractor_entities > catalog::MAX_NAMES {
        return Err(Error::Config(format!(
            "spec demands {} distractor facts but the name pool supports at most {}",
            spec.n_distractor_facts,
            catalog::MAX_NAMES * spec.relations_per_subject
        )));
    }
    let mut dist_indices: Vec<usize> = (0..catalog::MAX_NAMES).collect();
    dist_indices.shuffle(&mut name_rng);
    let mut distractor_facts = Vec::with_capacity(spec.n_distractor_facts);
    'outer: for &idx in &dist_indices[..n_distractor_entities] {
        let entity = catalog::distractor_name(idx);
        for rel in &relations {
            if distractor_facts.len() == spec.n_distractor_facts {
                break 'outer;
            }
            let object = &rel.value_domain[fact_rng.random_range(0..rel.value_domain.len())];
            distractor_facts.push(Fact::new(&entity, &rel.id, object));
        }
    }

    // 10%/90% validation/test split by seeded shuffle.
    let mut split_rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "universe/split"));
    let mut keys: Vec<String> = facts.iter().map(Fact::key).collect();
    keys.shuffle(&mut split_rng);
    // relations_per_subject >= 5 guarantees at least 5 facts.
    let n_val = (facts.len() / 10).max(1);
    let validation: Vec<String> = keys[..n_val].to_vec();
    let test: Vec<String> = keys[n_val..].to_vec();

    let mut universe = FactUniverse {
        seed,
        relations,
        targeted_subjects,
        facts,
        perturbed: Vec::new(),
        distractor_facts,
        validation,
        test,
    };
    universe.perturbed = perturb_facts(
        &universe,
        spec.perturb_fraction,
        seeds::derive(seed, "universe/perturb"),
    )?;
    universe.validate()?;
    Ok(universe)
}

/// Perturb a seeded fraction of the targeted facts. Each selected fact gets
/// exactly one perturbed variant whose object is drawn uniformly from the
/// relation domain minus the fact's accepted answers.
pub fn perturb_facts(
    universe: &FactUniverse,
    fraction: f64,
    seed: u64,
) -> Result<Vec<PerturbedFact>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "perturb fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_selected = ((fraction * universe.facts.len() as f64).ceil() as usize)
        .min(universe.facts.len())
        .max(1);
    let mut order: Vec<usize> = (0..universe.facts.len()).collect();
    order.shuffle(&mut rng);
    let mut selected: Vec<usize> = order[..n_selected].to_vec();
    // Output order follows the universe fact order, one entry per fact.
    selected.sort_unstable();

    let mut perturbed = Vec::with_capacity(n_selected);
    for idx in selected {
        let fact = &universe.facts[idx];
        let relation = universe
            .relation(&fact.relation)
            .ok_or_else(|| Error::Config(format!("unknown relation {}", fact.relation)))?;
        let candidates: Vec<&String> = relation
            .value_domain
            .iter()
            .filter(|v| !fact.aliases.contains(v))
            .collect();
        if candidates.is_empty() {
            return Err(Error::PerturbationInfeasible {
                fact: fact.key(),
                reason: "value domain minus accepted answers is empty".into(),
            });
        }
        let corrupted_object = candidates[rng.random_range(0..candidates.len())].clone();
        perturbed.push(PerturbedFact {
            base: fact.clone(),
            corrupted_object,
        });
    }
    Ok(perturbed)
}

/// Normalize an answer string for judging: lowercase, trim, collapse
/// internal whitespace, strip one leading article and terminal punctuation.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    if let Some(first) = words.first() {
        if matches!(*first, "a" | "an" | "the") {
            words.remove(0);
        }
    }
    let joined = words.join(" ");
    joined
        .trim_end_matches(['.', ',', '!', '?', ';', ':'])
        .trim_end()
        .to_string()
}

/// Rule-based judge: does the candidate answer name this fact's object?
pub fn alias_match(candidate: &str, fact: &Fact) -> bool {
    let normalized = normalize_answer(candidate);
    fact.aliases.iter().any(|a| normalize_answer(a) == normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec() -> UniverseSpec {
        UniverseSpec {
            n_subjects: 4,
            relations_per_subject: 5,
            n_distractor_facts: 10,
            perturb_fraction: 1.0,
        }
    }

    #[test]
    fn single_subject_universe_has_forced_size() {
        let spec = UniverseSpec {
            n_subjects: 1,
            relations_per_subject: 5,
            n_distractor_facts: 5,
            perturb_fraction: 1.0,
        };
        let u = build_universe(&spec, 7).unwrap();
        assert_eq!(u.targeted_subjects.len(), 1);
        assert_eq!(u.facts.len(), 5);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = small_spec();
        let a = build_universe(&spec, 13).unwrap();
        let b = build_universe(&spec, 13).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = build_universe(&spec, 14).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn paper_scale_knob_matches() {
        // 50 subjects x 21 relations, the large-universe preset.
        let spec = UniverseSpec {
            n_subjects: 50,
            relations_per_subject: 21,
            n_distractor_facts: 200,
            perturb_fraction: 1.0,
        };
        let u = build_universe(&spec, 3).unwrap();
        assert_eq!(u.targeted_subjects.len(), 50);
        assert_eq!(u.facts.len(), 1050);
    }

    #[test]
    fn oversized_spec_is_a_configuration_error() {
        let spec = UniverseSpec {
            n_subjects: 2,
            relations_per_subject: 99,
            n_distractor_facts: 4,
            perturb_fraction: 1.0,
        };
        let err = build_universe(&spec, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("99"), "error should name the shortfall: {err}");
    }

    #[test]
    fn perturbation_excludes_accepted_answers() {
        let u = build_universe(&small_spec(), 5).unwrap();
        assert_eq!(u.perturbed.len(), u.facts.len());
        for p in &u.perturbed {
            assert_ne!(p.corrupted_object, p.base.object);
            assert!(!p.base.aliases.contains(&p.corrupted_object));
            assert!(!alias_match(&p.corrupted_object, &p.base));
        }
    }

    #[test]
    fn perturbation_with_two_value_domain_is_forced() {
        let rel = Relation {
            id: "r".into(),
            name: "r".into(),
            value_domain: vec!["A".into(), "B".into(), "C".into()],
            question_template: "what is the r of {subject} ?".into(),
            statement_templates: vec![
                "the r of {subject} is {object} .".into(),
                "{subject} has r {object} .".into(),
            ],
        };
        let mut fact = Fact::new("S", "r", "A");
        fact.aliases.push("C".into());
        let universe = FactUniverse {
            seed: 0,
            relations: vec![rel],
            targeted_subjects: vec!["S".into()],
            facts: vec![fact],
            perturbed: vec![],
            distractor_facts: vec![],
            validation: vec![],
            test: vec![fact_key("S", "r")],
        };
        // Domain {A,B,C} minus accepted {A,C} leaves only B.
        let p = perturb_facts(&universe, 1.0, 99).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].corrupted_object, "B");
    }

    #[test]
    fn perturbation_infeasible_names_the_fact() {
        let rel = Relation {
            id: "r".into(),
            name: "r".into(),
            value_domain: vec!["A".into(), "B".into(), "C".into()],
            question_template: "what is the r of {subject} ?".into(),
            statement_templates: vec![
                "the r of {subject} is {object} .".into(),
                "{subject} has r {object} .".into(),
            ],
        };
        let mut fact = Fact::new("S", "r", "A");
        fact.aliases.push("B".into());
        fact.aliases.push("C".into());
        let universe = FactUniverse {
            seed: 0,
            relations: vec![rel],
            targeted_subjects: vec!["S".into()],
            facts: vec![fact],
            perturbed: vec![],
            distractor_facts: vec![],
            validation: vec![],
            test: vec![fact_key("S", "r")],
        };
        let err = perturb_facts(&universe, 1.0, 99).unwrap_err();
        match err {
            Error::PerturbationInfeasible { fact, .. } => assert_eq!(fact, "S|r"),
            other => panic!("expected perturbation error, got {other}"),
        }
    }

    #[test]
    fn perturbation_is_a_bijection_on_selected_facts() {
        let u = build_universe(&small_spec(), 21).unwrap();
        let p = perturb_facts(&u, 0.6, 4).unwrap();
        let keys: BTreeSet<String> = p.iter().map(PerturbedFact::key).collect();
        assert_eq!(keys.len(), p.len(), "no fact perturbed twice");
        assert_eq!(p.len(), (0.6f64 * u.facts.len() as f64).ceil() as usize);
    }

    #[test]
    fn alias_match_judge_cases() {
        let mut fact = Fact::new("Mandela", "notable_work", "Long Walk to Freedom");
        fact.aliases.push("A Long Walk to Freedom".into());
        assert!(alias_match("A Long Walk to Freedom", &fact));
        assert!(alias_match("Long Walk to Freedom", &fact));
        assert!(alias_match("long walk to freedom.", &fact));

        let lang = Fact::new("Mandela", "writes_in", "English");
        assert!(alias_match("English", &lang));
        assert!(!alias_match("Xhosa", &lang));
        assert!(!alias_match("", &lang));
    }

    #[test]
    fn split_is_a_partition() {
        let u = build_universe(&small_spec(), 11).unwrap();
        let val: BTreeSet<&String> = u.validation.iter().collect();
        let test: BTreeSet<&String> = u.test.iter().collect();
        assert!(val.is_disjoint(&test));
        assert_eq!(val.len() + test.len(), u.facts.len());
    }

    #[test]
    fn universe_roundtrips_through_file() {
        let u = build_universe(&small_spec(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("universe.json");
        u.save(&path).unwrap();
        let loaded = FactUniverse::load(&path).unwrap();
        assert_eq!(serde_json::to_string(&u).unwrap(), serde_json::to_string(&loaded).unwrap());
    }

    proptest! {
        #[test]
        fn alias_match_is_invariant_under_decoration(
            case_flips in proptest::collection::vec(any::<bool>(), 0..24),
            left_pad in 0usize..4,
            right_pad in 0usize..4,
            article in prop_oneof![Just(""), Just("a "), Just("an "), Just("the ")],
            punct in prop_oneof![Just(""), Just("."), Just("?"), Just(" .")],
        ) {
            let fact = Fact::new("S", "occupation", "Master Glassblower");
            let mut decorated = String::new();
            decorated.push_str(&" ".repeat(left_pad));
            decorated.push_str(article);
            for (i, ch) in "Master Glassblower".chars().enumerate() {
                let flip = case_flips.get(i).copied().unwrap_or(false);
                if flip {
                    decorated.extend(ch.to_lowercase());
                } else {
                    decorated.extend(ch.to_uppercase());
                }
            }
            decorated.push_str(punct);
            decorated.push_str(&" ".repeat(right_pad));
            prop_assert!(alias_match(&decorated, &fact));
        }

        #[test]
        fn perturbed_objects_never_match_their_base(seed in 0u64..64) {
            let u = build_universe(&small_spec(), seed).unwrap();
            for p in &u.perturbed {
                prop_assert!(!alias_match(&p.corrupted_object, &p.base));
            }
        }
    }
}
