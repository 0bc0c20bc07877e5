//! End-to-end experiment pipeline: universe, datasets, pretraining,
//! corruption, unlearning, evaluation, probes, and the summary report.
//!
//! Every stage derives its seed from the master seed and a stage label, and
//! every artifact it writes is hashed into the run manifest, so the whole
//! run is a pure function of the configuration: re-running reproduces
//! byte-identical artifacts, and a partially deleted output directory is
//! regenerated in place.

pub mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, EvalSpec, ProbeReport, ProbeSet, ProbeSpec};
use crate::model::train::{LrSchedule, OptimizerKind, TrainConfig};
use crate::model::{checkpoint, ModelConfig, ModelParams, Phase, Tokenizer};
use crate::seeds;
use crate::universe::{build_universe, FactUniverse, UniverseSpec};
use crate::unlearn::{self, UnlearnConfig, UnlearnMethod};
pub use store::{ManifestEntry, RunManifest, Store};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelArch {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
}

impl Default for ModelArch {
    fn default() -> Self {
        ModelArch {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            context_length: 256,
            adapter_rank: 8,
            adapter_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainCfg {
    pub reps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
}

impl Default for PretrainCfg {
    fn default() -> Self {
        PretrainCfg {
            reps: 3,
            epochs: 30,
            lr: 2e-3,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionCfg {
    pub k_values: Vec<usize>,
    pub n_samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
}

impl Default for CorruptionCfg {
    fn default() -> Self {
        CorruptionCfg {
            k_values: vec![0, 1, 2, 3],
            n_samples: 480,
            epochs: 5,
            lr: 1e-3,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodCfg {
    pub lambda: f64,
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
}

impl Default for MethodCfg {
    fn default() -> Self {
        MethodCfg {
            lambda: 1.0,
            beta: 1.0,
            epochs: 2,
            lr: 2e-4,
            batch_size: 16,
            optimizer: OptimizerKind::Sgd,
            schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskVectorCfg {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
}

impl Default for TaskVectorCfg {
    fn default() -> Self {
        TaskVectorCfg {
            epochs: 1,
            lr: 1e-3,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnGrid {
    pub methods: Vec<UnlearnMethod>,
    /// Also run GA/KL/NPO on the localized (simple) forget set.
    pub simple_variants: bool,
    pub tv_alphas: Vec<f64>,
    pub ga: MethodCfg,
    pub kl: MethodCfg,
    pub npo: MethodCfg,
    pub task_vector: TaskVectorCfg,
}

impl Default for UnlearnGrid {
    fn default() -> Self {
        UnlearnGrid {
            methods: vec![
                UnlearnMethod::Ga,
                UnlearnMethod::Kl,
                UnlearnMethod::Npo,
                UnlearnMethod::TaskVector,
            ],
            simple_variants: true,
            tv_alphas: vec![0.25, 0.5, 1.0, 2.0],
            ga: MethodCfg {
                lambda: 4.0,
                epochs: 2,
                ..MethodCfg::default()
            },
            kl: MethodCfg {
                lambda: 0.2,
                epochs: 2,
                ..MethodCfg::default()
            },
            npo: MethodCfg {
                lambda: 5.0,
                beta: 1.0,
                epochs: 3,
                ..MethodCfg::default()
            },
            task_vector: TaskVectorCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub master_seed: u64,
    /// Output directory; excluded from the manifest echo (environment, not
    /// experiment configuration).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub universe: UniverseSpec,
    pub model: ModelArch,
    pub pretrain: PretrainCfg,
    pub corruption: CorruptionCfg,
    pub unlearn: UnlearnGrid,
    pub evaluation: EvalSpec,
    pub probe: ProbeSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            master_seed: 42,
            out_dir: None,
            universe: UniverseSpec::default(),
            model: ModelArch::default(),
            pretrain: PretrainCfg::default(),
            corruption: CorruptionCfg::default(),
            unlearn: UnlearnGrid::default(),
            evaluation: EvalSpec::default(),
            probe: ProbeSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<PipelineConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corruption.k_values.is_empty() {
            return Err(Error::Config("corruption.k_values must not be empty".into()));
        }
        if self.evaluation.m % 2 == 0 {
            return Err(Error::Config("evaluation.m must be odd".into()));
        }
        Ok(())
    }
}

/// Pipeline stages in execution order; each CLI subcommand runs the prefix
/// ending at its stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Universe,
    Datasets,
    Pretrain,
    Corrupt,
    Unlearn,
    Evaluate,
    Probe,
    Report,
}

struct UnlearnedEntry {
    k: usize,
    method_label: String,
    forget_set: String,
    file_label: String,
    model: ModelParams,
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    store: Store,
    universe: Option<FactUniverse>,
    pretrain_ds: Option<Dataset>,
    retain_ds: Option<Dataset>,
    lexicon_ds: Option<Dataset>,
    corruption_ds: BTreeMap<usize, Dataset>,
    simple_ds: BTreeMap<usize, Dataset>,
    theta0: Option<ModelParams>,
    theta_c: BTreeMap<usize, ModelParams>,
    unlearned: Vec<UnlearnedEntry>,
    eval_clean: Option<EvalReport>,
    eval_corrupted: BTreeMap<usize, EvalReport>,
    eval_unlearned: Vec<EvalReport>,
    probe_reports: Vec<(String, ProbeReport)>,
}

pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path, until: Stage) -> Result<RunManifest> {
    cfg.validate()?;
    let store = Store::open(out_dir, cfg)?;
    let mut runner = Runner {
        cfg,
        store,
        universe: None,
        pretrain_ds: None,
        retain_ds: None,
        lexicon_ds: None,
        corruption_ds: BTreeMap::new(),
        simple_ds: BTreeMap::new(),
        theta0: None,
        theta_c: BTreeMap::new(),
        unlearned: Vec::new(),
        eval_clean: None,
        eval_corrupted: BTreeMap::new(),
        eval_unlearned: Vec::new(),
        probe_reports: Vec::new(),
    };

    runner.stage_universe()?;
    if until >= Stage::Datasets {
        runner.stage_datasets()?;
    }
    if until >= Stage::Pretrain {
        runner.stage_pretrain()?;
    }
    if until >= Stage::Corrupt {
        runner.stage_corrupt()?;
    }
    if until >= Stage::Unlearn {
        runner.stage_unlearn()?;
    }
    if until >= Stage::Evaluate {
        runner.stage_evaluate()?;
    }
    if until >= Stage::Probe {
        runner.stage_probe()?;
    }
    if until >= Stage::Report {
        runner.stage_report()?;
    }
    runner.store.write_timings()?;
    Ok(runner.store.manifest())
}

impl<'a> Runner<'a> {
    fn seed(&self, tag: &str) -> u64 {
        seeds::derive(self.cfg.master_seed, tag)
    }

    fn universe(&self) -> &FactUniverse {
        self.universe.as_ref().expect("universe stage ran")
    }

    fn theta0(&self) -> &ModelParams {
        self.theta0.as_ref().expect("pretrain stage ran")
    }

    fn stage_universe(&mut self) -> Result<()> {
        let spec = self.cfg.universe.clone();
        let seed = self.seed("universe");
        let universe = self.store.ensure_group(
            "universe",
            &["universe.json"],
            |s| {
                let u = build_universe(&spec, seed)?;
                u.save(&s.path_of("universe.json"))
            },
            |s| FactUniverse::load(&s.path_of("universe.json")),
        )?;
        self.universe = Some(universe);
        Ok(())
    }

    fn stage_datasets(&mut self) -> Result<()> {
        let universe = self.universe().clone();
        let reps = self.cfg.pretrain.reps;
        let seed = self.seed("datasets");

        let (pretrain_ds, retain_ds) = self.store.ensure_group(
            "datasets",
            &["pretrain.jsonl", "pretrain.meta.json", "retain.jsonl", "retain.meta.json"],
            |s| {
                let (p, r) = corpus::build_pretrain_and_retain_corpora(&universe, reps, seed)?;
                corpus::write_dataset(&p, &s.path_of("pretrain.jsonl"))?;
                corpus::write_dataset(&r, &s.path_of("retain.jsonl"))
            },
            |s| {
                Ok((
                    corpus::read_dataset(&s.path_of("pretrain.jsonl"))?,
                    corpus::read_dataset(&s.path_of("retain.jsonl"))?,
                ))
            },
        )?;

        let lex_seed = self.seed("lexicon");
        let lexicon = self.store.ensure_group(
            "datasets",
            &["lexicon.jsonl", "lexicon.meta.json"],
            |s| {
                let lex = corpus::build_domain_lexicon(&universe, lex_seed);
                corpus::write_dataset(&lex, &s.path_of("lexicon.jsonl"))
            },
            |s| corpus::read_dataset(&s.path_of("lexicon.jsonl")),
        )?;

        for &k in &self.cfg.corruption.k_values {
            let corr_seed = self.seed(&format!("corruption/k{k}"));
            let n_samples = self.cfg.corruption.n_samples;
            let jsonl = format!("corruption_k{k}.jsonl");
            let meta = format!("corruption_k{k}.meta.json");
            let ds = self.store.ensure_group(
                "datasets",
                &[&jsonl, &meta],
                |s| {
                    let d = corpus::build_corruption_dataset(&universe, k, n_samples, corr_seed)?;
                    corpus::write_dataset(&d, &s.path_of(&jsonl))
                },
                |s| corpus::read_dataset(&s.path_of(&jsonl)),
            )?;

            let simple_jsonl = format!("simple_k{k}.jsonl");
            let simple_meta = format!("simple_k{k}.meta.json");
            let ds_ref = &ds;
            let simple = self.store.ensure_group(
                "datasets",
                &[&simple_jsonl, &simple_meta],
                |s| {
                    let d = corpus::build_simple_forget_set(ds_ref, &universe)?;
                    corpus::write_dataset(&d, &s.path_of(&simple_jsonl))
                },
                |s| corpus::read_dataset(&s.path_of(&simple_jsonl)),
            )?;

            self.corruption_ds.insert(k, ds);
            self.simple_ds.insert(k, simple);
        }

        self.pretrain_ds = Some(pretrain_ds);
        self.retain_ds = Some(retain_ds);
        self.lexicon_ds = Some(lexicon);
        Ok(())
    }

    fn stage_pretrain(&mut self) -> Result<()> {
        let arch = self.cfg.model.clone();
        let pretrain = self.cfg.pretrain.clone();
        let scratch_seed = self.seed("scratch-init");
        let train_seed = self.seed("pretrain");
        let adapter_seed = self.seed("adapters");

        let mut fit_corpora: Vec<&Dataset> = vec![
            self.pretrain_ds.as_ref().expect("datasets stage ran"),
            self.lexicon_ds.as_ref().expect("datasets stage ran"),
            self.retain_ds.as_ref().expect("datasets stage ran"),
        ];
        fit_corpora.extend(self.corruption_ds.values());
        fit_corpora.extend(self.simple_ds.values());
        let tokenizer = Tokenizer::fit(&fit_corpora);

        let train_texts: Vec<String> = self
            .pretrain_ds
            .as_ref()
            .expect("datasets stage ran")
            .samples
            .iter()
            .chain(self.lexicon_ds.as_ref().expect("datasets stage ran").samples.iter())
            .map(|s| s.text.clone())
            .collect();

        let theta0 = self.store.ensure_group(
            "pretrain",
            &["theta0.ckpt"],
            |s| {
                let config = ModelConfig {
                    n_layers: arch.n_layers,
                    d_model: arch.d_model,
                    n_heads: arch.n_heads,
                    context_length: arch.context_length,
                    vocab_size: tokenizer.vocab_size(),
                    adapter_rank: arch.adapter_rank,
                    adapter_scale: arch.adapter_scale,
                };
                let scratch = ModelParams::init_scratch(config, tokenizer.clone(), scratch_seed)?;
                let data: Vec<Vec<u32>> =
                    train_texts.iter().map(|t| scratch.tokenizer.encode(t)).collect();
                let cfg = TrainConfig {
                    lr: pretrain.lr,
                    epochs: pretrain.epochs,
                    batch_size: pretrain.batch_size,
                    seed: train_seed,
                    optimizer: pretrain.optimizer,
                    schedule: pretrain.schedule,
                };
                let trained = crate::model::train::train_next_token(&scratch, &data, &cfg)?;
                let frozen = trained.freeze_with_adapters(adapter_seed);
                checkpoint::save(&frozen, &s.path_of("theta0.ckpt"))
            },
            |s| checkpoint::load(&s.path_of("theta0.ckpt")),
        )?;
        self.theta0 = Some(theta0);
        Ok(())
    }

    fn stage_corrupt(&mut self) -> Result<()> {
        let corruption = self.cfg.corruption.clone();
        for &k in &corruption.k_values {
            let seed = self.seed(&format!("corrupt/k{k}"));
            let theta0 = self.theta0().clone();
            let data: Vec<Vec<u32>> = self.corruption_ds[&k]
                .samples
                .iter()
                .map(|s| theta0.tokenizer.encode(&s.text))
                .collect();
            let name = format!("theta_c_k{k}.ckpt");
            let model = self.store.ensure_group(
                "corrupt",
                &[&name],
                |s| {
                    let cfg = TrainConfig {
                        lr: corruption.lr,
                        epochs: corruption.epochs,
                        batch_size: corruption.batch_size,
                        seed,
                        optimizer: corruption.optimizer,
                        schedule: corruption.schedule,
                    };
                    let trained = crate::model::train::train_next_token(&theta0, &data, &cfg)?
                        .with_phase(Phase::Corrupted);
                    checkpoint::save(&trained, &s.path_of(&name))
                },
                |s| checkpoint::load(&s.path_of(&name)),
            )?;
            self.theta_c.insert(k, model);
        }
        Ok(())
    }

    fn method_cfg(&self, method: UnlearnMethod) -> &MethodCfg {
        match method {
            UnlearnMethod::Ga => &self.cfg.unlearn.ga,
            UnlearnMethod::Kl => &self.cfg.unlearn.kl,
            UnlearnMethod::Npo => &self.cfg.unlearn.npo,
            UnlearnMethod::TaskVector => unreachable!("task vector has its own config"),
        }
    }

    fn stage_unlearn(&mut self) -> Result<()> {
        let grid = self.cfg.unlearn.clone();
        for &k in &self.cfg.corruption.k_values {
            let theta_c = self.theta_c[&k].clone();
            for &method in &grid.methods {
                if method == UnlearnMethod::TaskVector {
                    self.run_task_vector(k, &theta_c)?;
                    continue;
                }
                let mut variants = vec![("full", self.corruption_ds[&k].clone())];
                if grid.simple_variants {
                    variants.push(("simple", self.simple_ds[&k].clone()));
                }
                for (fs, forget) in variants {
                    let mcfg = self.method_cfg(method).clone();
                    let seed = self.seed(&format!("unlearn/k{k}/{method}/{fs}"));
                    let file_label = format!("k{k}_{method}_{fs}");
                    let ckpt = format!("theta_u_{file_label}.ckpt");
                    let trace_file = format!("trace_{file_label}.csv");
                    let retain = self.retain_ds.as_ref().expect("datasets stage ran").clone();
                    let theta_c_ref = &theta_c;
                    let model = self.store.ensure_group(
                        "unlearn",
                        &[&ckpt, &trace_file],
                        |s| {
                            let ucfg = UnlearnConfig {
                                method,
                                lambda: mcfg.lambda,
                                beta: mcfg.beta,
                                alpha: 0.0,
                                lr: mcfg.lr,
                                epochs: mcfg.epochs,
                                batch_size: mcfg.batch_size,
                                seed,
                                retain_enabled: true,
                                optimizer: mcfg.optimizer,
                                schedule: mcfg.schedule,
                            };
                            let outcome =
                                unlearn::run_unlearning(theta_c_ref, &forget, &retain, &ucfg)?;
                            write_trace(&s.path_of(&trace_file), &outcome.trace)?;
                            checkpoint::save(&outcome.model, &s.path_of(&ckpt))
                        },
                        |s| checkpoint::load(&s.path_of(&ckpt)),
                    )?;
                    self.unlearned.push(UnlearnedEntry {
                        k,
                        method_label: method.to_string(),
                        forget_set: fs.to_string(),
                        file_label,
                        model,
                    });
                }
            }
        }
        Ok(())
    }

    fn run_task_vector(&mut self, k: usize, theta_c: &ModelParams) -> Result<()> {
        let tv = self.cfg.unlearn.task_vector.clone();
        let alphas = self.cfg.unlearn.tv_alphas.clone();
        let seed = self.seed(&format!("unlearn/k{k}/task_vector"));
        let theta0 = self.theta0().clone();
        let forget = self.corruption_ds[&k].clone();

        let mut outputs: Vec<String> = alphas
            .iter()
            .map(|a| format!("theta_u_k{k}_task_vector_a{a}_full.ckpt"))
            .collect();
        outputs.push(format!("alignment_k{k}.csv"));
        outputs.push(format!("alignment_k{k}.json"));
        let output_refs: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();

        let models = self.store.ensure_group(
            "unlearn",
            &output_refs,
            |s| {
                let ft_cfg = TrainConfig {
                    lr: tv.lr,
                    epochs: tv.epochs,
                    batch_size: tv.batch_size,
                    seed,
                    optimizer: tv.optimizer,
                    schedule: tv.schedule,
                };
                let finetuned = unlearn::task_vector_finetune(theta_c, &forget, &ft_cfg)?;
                for (a, name) in alphas.iter().zip(outputs.iter().take(alphas.len())) {
                    let model = unlearn::task_vector_apply(theta_c, &finetuned, *a);
                    checkpoint::save(&model, &s.path_of(name))?;
                }
                let delta = crate::model::adapters_sub(&finetuned.adapters, &theta_c.adapters);
                let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
                let curve = unlearn::tv_alignment_curve(&theta0, theta_c, &delta, &grid)?;
                let mut csv = String::from("alpha,squared_distance\n");
                for (a, d) in &curve.points {
                    csv.push_str(&format!("{a},{d}\n"));
                }
                std::fs::write(s.path_of(&format!("alignment_k{k}.csv")), csv)?;
                let sidecar = serde_json::json!({
                    "alpha_star": curve.alpha_star,
                    "baseline": curve.baseline,
                });
                std::fs::write(
                    s.path_of(&format!("alignment_k{k}.json")),
                    serde_json::to_string_pretty(&sidecar)?,
                )?;
                Ok(())
            },
            |s| {
                alphas
                    .iter()
                    .map(|a| {
                        checkpoint::load(
                            &s.path_of(&format!("theta_u_k{k}_task_vector_a{a}_full.ckpt")),
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            },
        )?;

        for (a, model) in alphas.iter().zip(models) {
            self.unlearned.push(UnlearnedEntry {
                k,
                method_label: format!("task_vector[alpha={a}]"),
                forget_set: "full".into(),
                file_label: format!("k{k}_task_vector_a{a}_full"),
                model,
            });
        }
        Ok(())
    }

    fn stage_evaluate(&mut self) -> Result<()> {
        let universe = self.universe().clone();
        let facts: Vec<&crate::universe::Fact> = universe.facts.iter().collect();
        let spec = self.cfg.evaluation.clone();
        let seed = self.seed("evaluate");

        let theta0 = self.theta0().clone();
        let clean = self.store.ensure_group(
            "evaluate",
            &["eval_clean.json"],
            |s| {
                let report = eval::evaluate_model(&theta0, &facts, &universe, &spec, seed)?;
                report.save(&s.path_of("eval_clean.json"))
            },
            |s| EvalReport::load(&s.path_of("eval_clean.json")),
        )?;
        self.eval_clean = Some(clean);

        for (&k, model) in &self.theta_c.clone() {
            let name = format!("eval_corrupted_k{k}.json");
            let report = self.store.ensure_group(
                "evaluate",
                &[&name],
                |s| {
                    let report = eval::evaluate_model(model, &facts, &universe, &spec, seed)?;
                    report.save(&s.path_of(&name))
                },
                |s| EvalReport::load(&s.path_of(&name)),
            )?;
            self.eval_corrupted.insert(k, report);
        }

        let mut reports = Vec::with_capacity(self.unlearned.len());
        for entry in &self.unlearned {
            let name = format!("eval_unlearned_{}.json", entry.file_label);
            let model = &entry.model;
            let report = self.store.ensure_group(
                "evaluate",
                &[&name],
                |s| {
                    let report = eval::evaluate_model(model, &facts, &universe, &spec, seed)?;
                    report.save(&s.path_of(&name))
                },
                |s| EvalReport::load(&s.path_of(&name)),
            )?;
            reports.push(report);
        }
        self.eval_unlearned = reports;
        Ok(())
    }

    fn stage_probe(&mut self) -> Result<()> {
        let universe = self.universe().clone();
        let spec = self.cfg.probe.clone();
        let seed = self.seed("evaluate");
        let theta0 = self.theta0().clone();

        for &k in &self.cfg.corruption.k_values {
            let theta_c = self.theta_c[&k].clone();
            let clean_report = self.eval_clean.as_ref().expect("evaluate stage ran").clone();
            let corrupted_report = self.eval_corrupted[&k].clone();
            let set_name = format!("probe_set_k{k}.json");
            let probe_set = self.store.ensure_group(
                "probe",
                &[&set_name],
                |s| {
                    let keys = eval::probed_fact_keys(&clean_report, &corrupted_report, spec.max_facts);
                    let mut inputs = Vec::with_capacity(keys.len());
                    for key in &keys {
                        let fact = universe
                            .fact(key)
                            .ok_or_else(|| Error::Config(format!("fact {key} not in universe")))?;
                        let prompt = eval::build_prompt(fact, &universe, seed)?;
                        let categories = eval::build_probe_categories(
                            &theta0, &theta_c, fact, &universe, &spec, seed,
                        )?;
                        inputs.push(eval::ProbeInput { prompt, categories });
                    }
                    ProbeSet { inputs }.save(&s.path_of(&set_name))
                },
                |s| ProbeSet::load(&s.path_of(&set_name)),
            )?;

            let mut targets: Vec<(String, ModelParams)> = vec![
                (format!("clean_k{k}"), theta0.clone()),
                (format!("corrupted_k{k}"), theta_c.clone()),
            ];
            for entry in self.unlearned.iter().filter(|e| e.k == k) {
                targets.push((format!("unlearned_{}", entry.file_label), entry.model.clone()));
            }
            for (label, model) in targets {
                let name = format!("probe_{label}.json");
                let probe_set_ref = &probe_set;
                let report = self.store.ensure_group(
                    "probe",
                    &[&name],
                    |s| {
                        let report = eval::probe_lognormprob(&model, probe_set_ref)?;
                        report.save(&s.path_of(&name))
                    },
                    |s| ProbeReport::load(&s.path_of(&name)),
                )?;
                self.probe_reports.push((label, report));
            }
        }
        Ok(())
    }

    fn probe_report(&self, label: &str) -> Option<&ProbeReport> {
        self.probe_reports
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, r)| r)
    }

    fn stage_report(&mut self) -> Result<()> {
        let theta0 = self.theta0().clone();

        // Dataset statistics table.
        let mut stats_rows: Vec<(String, String, Dataset)> = vec![
            ("pretrain".into(), String::new(), self.pretrain_ds.clone().expect("datasets")),
            ("retain".into(), String::new(), self.retain_ds.clone().expect("datasets")),
        ];
        for (&k, ds) in &self.corruption_ds {
            stats_rows.push(("corruption".into(), k.to_string(), ds.clone()));
        }
        for (&k, ds) in &self.simple_ds {
            stats_rows.push(("simple_forget".into(), k.to_string(), ds.clone()));
        }
        let stats_rows_ref = &stats_rows;
        self.store.ensure_group(
            "report",
            &["stats.csv"],
            |s| {
                let mut out = String::from("kind,k,n_samples,mean_tokens,mean_chars,self_perplexity\n");
                for (kind, k, ds) in stats_rows_ref {
                    let stats = corpus::dataset_stats(ds, &theta0)?;
                    out.push_str(&format!(
                        "{kind},{k},{},{},{},{}\n",
                        ds.samples.len(),
                        stats.mean_token_count,
                        stats.mean_char_length,
                        stats.self_perplexity
                    ));
                }
                std::fs::write(s.path_of("stats.csv"), out)?;
                Ok(())
            },
            |_| Ok(()),
        )?;

        // Summary table.
        let clean_acc = self.eval_clean.as_ref().expect("evaluate stage ran").accuracy;
        let mut rows: Vec<[String; 9]> = Vec::new();
        rows.push([
            "clean".into(),
            String::new(),
            String::new(),
            String::new(),
            format!("{clean_acc}"),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ]);
        for &k in &self.cfg.corruption.k_values {
            let acc_c = self.eval_corrupted[&k].accuracy;
            let probe = self.probe_report(&format!("corrupted_k{k}"));
            rows.push([
                "corrupted".into(),
                k.to_string(),
                String::new(),
                String::new(),
                format!("{acc_c}"),
                String::new(),
                lnp_cell(probe, |p| p.mean_clean),
                lnp_cell(probe, |p| p.mean_corrupted),
                lnp_cell(probe, |p| p.mean_random),
            ]);
        }
        for (entry, report) in self.unlearned.iter().zip(self.eval_unlearned.iter()) {
            let acc_c = self.eval_corrupted[&entry.k].accuracy;
            let recovery = eval::recovery_score(clean_acc, acc_c, report.accuracy)
                .map(|r| format!("{r}"))
                .unwrap_or_default();
            let probe = self.probe_report(&format!("unlearned_{}", entry.file_label));
            rows.push([
                "unlearned".into(),
                entry.k.to_string(),
                entry.method_label.clone(),
                entry.forget_set.clone(),
                format!("{}", report.accuracy),
                recovery,
                lnp_cell(probe, |p| p.mean_clean),
                lnp_cell(probe, |p| p.mean_corrupted),
                lnp_cell(probe, |p| p.mean_random),
            ]);
        }
        let rows_ref = &rows;
        self.store.ensure_group(
            "report",
            &["summary.csv"],
            |s| {
                let mut out = String::from(
                    "phase,k,method,forget_set,accuracy,recovery,mean_lnp_clean,mean_lnp_corrupted,mean_lnp_random\n",
                );
                for row in rows_ref {
                    out.push_str(&row.join(","));
                    out.push('\n');
                }
                std::fs::write(s.path_of("summary.csv"), out)?;
                Ok(())
            },
            |_| Ok(()),
        )?;
        Ok(())
    }
}

fn lnp_cell(report: Option<&ProbeReport>, pick: fn(&ProbeReport) -> Option<f64>) -> String {
    report
        .and_then(pick)
        .map(|v| format!("{v}"))
        .unwrap_or_default()
}

fn write_trace(path: &Path, trace: &[unlearn::TraceRow]) -> Result<()> {
    let mut out = String::from("step,forget_loss,retain_loss,objective\n");
    for row in trace {
        let retain = row.retain_loss.map(|r| format!("{r}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", row.step, row.forget_loss, retain, row.objective));
    }
    std::fs::write(path, out)?;
    Ok(())
}
