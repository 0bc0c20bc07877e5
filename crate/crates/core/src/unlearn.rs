//! Unlearning algorithms over the adapter parameter space.
//!
//! Four methods are implemented against a frozen corrupted reference:
//!
//! - gradient ascent: descend the mean token log-likelihood of the forget
//!   set (equivalently, ascend its NLL);
//! - KL: ascend the per-position KL divergence from the reference model's
//!   next-token distributions;
//! - negative preference optimization: descend
//!   `(2/(beta T)) sum_i log(1 + (P/P_ref)^beta)`, computed in log space;
//! - task vector: fine-tune on the forget set and step the adapters in the
//!   opposite direction of the resulting parameter delta.
//!
//! The gradient methods share a joint objective
//! `J = forget_term + lambda * retain_NLL` and only ever move adapter
//! coordinates; base weights stay bit-identical.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::net::{self, EffLayer, Gradients};
use crate::model::score::log_softmax_row;
use crate::model::tokenizer::BOS;
use crate::model::train::{
    nll_batch_grads, training_sequence, AdapterOptimizer, LrSchedule, OptimizerKind,
};
use crate::model::{adapters_axpy, adapters_dot, adapters_norm2, adapters_sub, AdapterSet, ModelParams, Phase};
use crate::seeds;

/// Floor on per-token log-probabilities inside the GA and NPO losses.
/// Keeps the likelihood ratio finite once a token has been pushed far down.
const LOG_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMethod {
    Ga,
    Kl,
    Npo,
    TaskVector,
}

impl std::fmt::Display for UnlearnMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            UnlearnMethod::Ga => "ga",
            UnlearnMethod::Kl => "kl",
            UnlearnMethod::Npo => "npo",
            UnlearnMethod::TaskVector => "task_vector",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: UnlearnMethod,
    /// Retain-term weight.
    pub lambda: f64,
    /// NPO inverse temperature; used only by `Npo`.
    pub beta: f64,
    /// Task-vector step size; used only by `TaskVector`.
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub retain_enabled: bool,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.method == UnlearnMethod::Npo && self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.method == UnlearnMethod::TaskVector && self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Immutable snapshot of the corrupted model used as the KL/NPO reference.
pub struct FrozenReference {
    params: ModelParams,
    eff: Vec<EffLayer>,
}

impl FrozenReference {
    pub fn new(params: &ModelParams) -> Self {
        let params = params.clone();
        let eff = net::effective_layers(&params);
        FrozenReference { params, eff }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
}

fn stable_softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn stable_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn batch_refs(batch: &[Vec<u32>]) -> Vec<&[u32]> {
    batch.iter().map(|s| s.as_slice()).collect()
}

/// Mean over samples of the per-token mean log-likelihood (the quantity
/// gradient ascent descends). Per-token logs are floored at `LOG_FLOOR`.
pub fn loss_ga(batch: &[Vec<u32>], params: &ModelParams) -> Result<f64> {
    let eff = net::effective_layers(params);
    Ok(ga_batch(params, &eff, &batch_refs(batch), None)?.0)
}

/// Mean over samples of the per-position KL divergence
/// `KL(P_theta || P_ref)` on the forget text.
pub fn loss_kl(batch: &[Vec<u32>], params: &ModelParams, reference: &FrozenReference) -> Result<f64> {
    let eff = net::effective_layers(params);
    Ok(kl_batch(params, &eff, reference, &batch_refs(batch), None)?.0)
}

/// Negative preference optimization loss with inverse temperature `beta`.
pub fn loss_npo(
    batch: &[Vec<u32>],
    params: &ModelParams,
    reference: &FrozenReference,
    beta: f64,
) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    let eff = net::effective_layers(params);
    Ok(npo_batch(params, &eff, reference, &batch_refs(batch), beta, None)?.0)
}

/// Shared batch driver: runs `per_sample` over fixed chunks in parallel and
/// reduces values and gradients in chunk order.
fn batch_drive<F>(
    params: &ModelParams,
    batch: &[&[u32]],
    want_grads: bool,
    per_sample: F,
) -> Result<(f64, Option<Gradients>)>
where
    F: Fn(&[u32], f64, Option<&mut Gradients>) -> Result<f64> + Sync,
{
    let weight = 1.0 / batch.len() as f64;
    let chunk_size = batch
        .len()
        .div_ceil(rayon::current_num_threads().min(8).max(1))
        .max(1);
    let partials: Vec<Result<(f64, Option<Gradients>)>> = batch
        .par_chunks(chunk_size)
        .map(|chunk| {
            let mut grads = want_grads.then(|| Gradients::zeros(params, false));
            let mut value = 0.0;
            for seq in chunk {
                value += per_sample(seq, weight, grads.as_mut())?;
            }
            Ok((value, grads))
        })
        .collect();
    let mut total_value = 0.0;
    let mut total_grads = want_grads.then(|| Gradients::zeros(params, false));
    for partial in partials {
        let (v, g) = partial?;
        total_value += v;
        if let (Some(t), Some(g)) = (total_grads.as_mut(), g.as_ref()) {
            t.add_assign(g);
        }
    }
    Ok((total_value * weight, total_grads))
}

fn ga_batch(
    params: &ModelParams,
    eff: &[EffLayer],
    batch: &[&[u32]],
    grads_out: Option<()>,
) -> Result<(f64, Option<Gradients>)> {
    batch_drive(params, batch, grads_out.is_some(), |seq, weight, grads| {
        let t_len = seq.len();
        let mut input = Vec::with_capacity(t_len);
        input.push(BOS);
        input.extend_from_slice(&seq[..t_len - 1]);
        let inv_t = 1.0 / t_len as f64;
        if let Some(grads) = grads {
            let trace = net::forward_traced(params, eff, &input)?;
            let mut dlogits = Array2::zeros(trace.logits.raw_dim());
            let mut value = 0.0;
            for (i, &target) in seq.iter().enumerate() {
                let ls = log_softmax_row(trace.logits.row(i));
                let lp = ls[target as usize];
                if lp > LOG_FLOOR {
                    value += lp;
                    // d(log p_target)/dz_j = indicator - p_j
                    for (j, l) in ls.iter().enumerate() {
                        let p = l.exp();
                        let indicator = if j == target as usize { 1.0 } else { 0.0 };
                        dlogits[[i, j]] = (indicator - p) * inv_t * weight;
                    }
                } else {
                    value += LOG_FLOOR;
                }
            }
            net::backward(params, eff, &trace, &dlogits, grads);
            Ok(value * inv_t)
        } else {
            let logits = net::forward_logits_with(params, eff, &input)?;
            let mut value = 0.0;
            for (i, &target) in seq.iter().enumerate() {
                let ls = log_softmax_row(logits.row(i));
                value += ls[target as usize].max(LOG_FLOOR);
            }
            Ok(value * inv_t)
        }
    })
}

fn kl_batch(
    params: &ModelParams,
    eff: &[EffLayer],
    reference: &FrozenReference,
    batch: &[&[u32]],
    grads_out: Option<()>,
) -> Result<(f64, Option<Gradients>)> {
    batch_drive(params, batch, grads_out.is_some(), |seq, weight, grads| {
        let t_len = seq.len();
        let mut input = Vec::with_capacity(t_len);
        input.push(BOS);
        input.extend_from_slice(&seq[..t_len - 1]);
        let inv_t = 1.0 / t_len as f64;
        let ref_logits = net::forward_logits_with(reference.params(), &reference.eff, &input)?;

        let compute = |logits: &Array2<f64>, mut dlogits: Option<&mut Array2<f64>>| -> f64 {
            let mut value = 0.0;
            for i in 0..t_len {
                let lp = log_softmax_row(logits.row(i));
                let lq = log_softmax_row(ref_logits.row(i));
                let mut kl_i = 0.0;
                for (p, q) in lp.iter().zip(lq.iter()) {
                    kl_i += p.exp() * (p - q);
                }
                value += kl_i;
                if let Some(d) = dlogits.as_deref_mut() {
                    // dKL/dz_j = p_j * ((lp_j - lq_j) - KL_i)
                    for (j, (p, q)) in lp.iter().zip(lq.iter()).enumerate() {
                        d[[i, j]] = p.exp() * ((p - q) - kl_i) * inv_t * weight;
                    }
                }
            }
            value * inv_t
        };

        if let Some(grads) = grads {
            let trace = net::forward_traced(params, eff, &input)?;
            let mut dlogits = Array2::zeros(trace.logits.raw_dim());
            let value = compute(&trace.logits, Some(&mut dlogits));
            net::backward(params, eff, &trace, &dlogits, grads);
            Ok(value)
        } else {
            let logits = net::forward_logits_with(params, eff, &input)?;
            Ok(compute(&logits, None))
        }
    })
}

fn npo_batch(
    params: &ModelParams,
    eff: &[EffLayer],
    reference: &FrozenReference,
    batch: &[&[u32]],
    beta: f64,
    grads_out: Option<()>,
) -> Result<(f64, Option<Gradients>)> {
    batch_drive(params, batch, grads_out.is_some(), |seq, weight, grads| {
        let t_len = seq.len();
        let mut input = Vec::with_capacity(t_len);
        input.push(BOS);
        input.extend_from_slice(&seq[..t_len - 1]);
        let inv_t = 1.0 / t_len as f64;
        let ref_logits = net::forward_logits_with(reference.params(), &reference.eff, &input)?;

        if let Some(grads) = grads {
            let trace = net::forward_traced(params, eff, &input)?;
            let mut dlogits = Array2::zeros(trace.logits.raw_dim());
            let mut value = 0.0;
            for (i, &target) in seq.iter().enumerate() {
                let lp = log_softmax_row(trace.logits.row(i));
                let lq = log_softmax_row(ref_logits.row(i));
                let lp_t = lp[target as usize].max(LOG_FLOOR);
                let lq_t = lq[target as usize].max(LOG_FLOOR);
                let d = lp_t - lq_t;
                value += (2.0 / (beta * t_len as f64)) * stable_softplus(beta * d);
                if lp[target as usize] > LOG_FLOOR {
                    let coeff = (2.0 * inv_t) * stable_sigmoid(beta * d) * weight;
                    for (j, l) in lp.iter().enumerate() {
                        let p = l.exp();
                        let indicator = if j == target as usize { 1.0 } else { 0.0 };
                        dlogits[[i, j]] = coeff * (indicator - p);
                    }
                }
            }
            net::backward(params, eff, &trace, &dlogits, grads);
            Ok(value)
        } else {
            let logits = net::forward_logits_with(params, eff, &input)?;
            let mut value = 0.0;
            for (i, &target) in seq.iter().enumerate() {
                let lp = log_softmax_row(logits.row(i));
                let lq = log_softmax_row(ref_logits.row(i));
                let d = lp[target as usize].max(LOG_FLOOR) - lq[target as usize].max(LOG_FLOOR);
                value += (2.0 / (beta * t_len as f64)) * stable_softplus(beta * d);
            }
            Ok(value)
        }
    })
}

/// Adapter gradients of the GA objective on a batch (descend direction).
pub fn grad_ga(params: &ModelParams, batch: &[Vec<u32>]) -> Result<(f64, AdapterSet)> {
    let eff = net::effective_layers(params);
    let (v, g) = ga_batch(params, &eff, &batch_refs(batch), Some(()))?;
    Ok((v, net::adapter_gradients(params, &g.expect("grads requested"))))
}

/// Adapter gradients of the KL divergence on a batch (of the divergence
/// itself, before the ascent sign).
pub fn grad_kl(
    params: &ModelParams,
    reference: &FrozenReference,
    batch: &[Vec<u32>],
) -> Result<(f64, AdapterSet)> {
    let eff = net::effective_layers(params);
    let (v, g) = kl_batch(params, &eff, reference, &batch_refs(batch), Some(()))?;
    Ok((v, net::adapter_gradients(params, &g.expect("grads requested"))))
}

/// Adapter gradients of the NPO objective on a batch (descend direction).
pub fn grad_npo(
    params: &ModelParams,
    reference: &FrozenReference,
    batch: &[Vec<u32>],
    beta: f64,
) -> Result<(f64, AdapterSet)> {
    let eff = net::effective_layers(params);
    let (v, g) = npo_batch(params, &eff, reference, &batch_refs(batch), beta, Some(()))?;
    Ok((v, net::adapter_gradients(params, &g.expect("grads requested"))))
}

/// One optimization-step record of the loss trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub forget_loss: f64,
    pub retain_loss: Option<f64>,
    pub objective: f64,
}

pub struct UnlearnOutcome {
    pub model: ModelParams,
    pub trace: Vec<TraceRow>,
}

fn tokenize_dataset(params: &ModelParams, dataset: &crate::corpus::Dataset) -> Vec<Vec<u32>> {
    dataset
        .samples
        .iter()
        .map(|s| params.tokenizer.encode(&s.text))
        .collect()
}

/// Run a gradient-based unlearning method on the corrupted snapshot.
/// Optimizes `J = forget_term + lambda * retain_NLL` over adapters only.
pub fn run_unlearning(
    corrupted: &ModelParams,
    forget: &crate::corpus::Dataset,
    retain: &crate::corpus::Dataset,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    if corrupted.phase != Phase::Corrupted {
        return Err(Error::Config(format!(
            "unlearning expects a corrupted snapshot, got {}",
            corrupted.phase
        )));
    }
    if cfg.method == UnlearnMethod::TaskVector {
        return Err(Error::Config(
            "task vector unlearning goes through task_vector_unlearn".into(),
        ));
    }
    if forget.samples.is_empty() {
        return Err(Error::EmptyInput("forget set is empty".into()));
    }
    let use_retain = cfg.retain_enabled && cfg.lambda > 0.0;
    if use_retain && retain.samples.is_empty() {
        return Err(Error::Config(
            "lambda > 0 requires a nonempty retain set".into(),
        ));
    }

    let forget_seqs: Vec<Vec<u32>> = tokenize_dataset(corrupted, forget)
        .into_iter()
        .map(|s| training_sequence(&s))
        .collect();
    let retain_seqs: Vec<Vec<u32>> = if use_retain {
        tokenize_dataset(corrupted, retain)
            .into_iter()
            .map(|s| training_sequence(&s))
            .collect()
    } else {
        Vec::new()
    };

    let reference = FrozenReference::new(corrupted);
    let mut model = corrupted.clone();
    let mut optimizer = AdapterOptimizer::new(cfg.optimizer, &model);

    let n = forget_seqs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "forget-order"));
    let mut retain_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "retain-order"));
    let mut retain_cycle: Vec<usize> = Vec::new();
    let mut retain_pos = 0usize;

    let mut trace = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            let eff = net::effective_layers(&model);
            let batch: Vec<&[u32]> = batch_idx.iter().map(|&i| forget_seqs[i].as_slice()).collect();

            let (forget_term, forget_grads) = match cfg.method {
                UnlearnMethod::Ga => {
                    let (v, g) = ga_batch(&model, &eff, &batch, Some(()))?;
                    (v, net::adapter_gradients(&model, &g.expect("grads")))
                }
                UnlearnMethod::Kl => {
                    // Ascend the divergence: forget term is -KL.
                    let (v, g) = kl_batch(&model, &eff, &reference, &batch, Some(()))?;
                    let mut a = net::adapter_gradients(&model, &g.expect("grads"));
                    for delta in a.values_mut() {
                        delta.down.mapv_inplace(|x| -x);
                        delta.up.mapv_inplace(|x| -x);
                    }
                    (-v, a)
                }
                UnlearnMethod::Npo => {
                    let (v, g) = npo_batch(&model, &eff, &reference, &batch, cfg.beta, Some(()))?;
                    (v, net::adapter_gradients(&model, &g.expect("grads")))
                }
                UnlearnMethod::TaskVector => unreachable!("checked above"),
            };

            let mut total_grads = forget_grads;
            let mut retain_loss = None;
            if use_retain {
                let batch_n = cfg.batch_size.min(retain_seqs.len());
                let mut retain_batch = Vec::with_capacity(batch_n);
                for _ in 0..batch_n {
                    if retain_pos >= retain_cycle.len() {
                        retain_cycle = (0..retain_seqs.len()).collect();
                        retain_cycle.shuffle(&mut retain_rng);
                        retain_pos = 0;
                    }
                    retain_batch.push(retain_seqs[retain_cycle[retain_pos]].as_slice());
                    retain_pos += 1;
                }
                let (nll, g) = nll_batch_grads(&model, &eff, &retain_batch, false)?;
                let retain_grads = net::adapter_gradients(&model, &g);
                adapters_axpy(&mut total_grads, cfg.lambda, &retain_grads);
                retain_loss = Some(nll);
            }

            let objective = forget_term + cfg.lambda * retain_loss.unwrap_or(0.0);
            if !objective.is_finite() {
                return Err(Error::Diverged { step });
            }
            let lr = match cfg.schedule {
                LrSchedule::Constant => cfg.lr,
                LrSchedule::Cosine => {
                    if total_steps <= 1 {
                        cfg.lr
                    } else {
                        let t = step as f64 / (total_steps - 1) as f64;
                        0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
                    }
                }
            };
            optimizer.step(&mut model, &total_grads, lr);
            trace.push(TraceRow {
                step,
                forget_loss: forget_term,
                retain_loss,
                objective,
            });
            step += 1;
        }
    }

    model.phase = Phase::Unlearned;
    model.seed_chain.push(cfg.seed);
    Ok(UnlearnOutcome { model, trace })
}

/// Fine-tune the corrupted snapshot on the forget set (plain NLL descent).
pub fn task_vector_finetune(
    corrupted: &ModelParams,
    forget: &crate::corpus::Dataset,
    ft_cfg: &crate::model::train::TrainConfig,
) -> Result<ModelParams> {
    if corrupted.phase != Phase::Corrupted {
        return Err(Error::Config(format!(
            "task vector expects a corrupted snapshot, got {}",
            corrupted.phase
        )));
    }
    let seqs = tokenize_dataset(corrupted, forget);
    crate::model::train::train_next_token(corrupted, &seqs, ft_cfg)
}

/// Step the corrupted adapters opposite the fine-tune delta:
/// `theta_u = theta_c - alpha * (theta_star - theta_c)`.
pub fn task_vector_apply(
    corrupted: &ModelParams,
    finetuned: &ModelParams,
    alpha: f64,
) -> ModelParams {
    let delta = adapters_sub(&finetuned.adapters, &corrupted.adapters);
    let mut model = corrupted.clone();
    adapters_axpy(&mut model.adapters, -alpha, &delta);
    model.phase = Phase::Unlearned;
    model
}

/// Complete task-vector unlearning: fine-tune, then apply the negative step.
pub fn task_vector_unlearn(
    corrupted: &ModelParams,
    forget: &crate::corpus::Dataset,
    alpha: f64,
    ft_cfg: &crate::model::train::TrainConfig,
) -> Result<ModelParams> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let finetuned = task_vector_finetune(corrupted, forget, ft_cfg)?;
    Ok(task_vector_apply(corrupted, &finetuned, alpha))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentCurve {
    /// (alpha, squared distance) along the grid.
    pub points: Vec<(f64, f64)>,
    /// Closed-form minimizer of the quadratic.
    pub alpha_star: f64,
    /// Squared distance at alpha = 0.
    pub baseline: f64,
}

/// Squared distance `|theta_c - theta_0 - alpha * delta|^2` over a grid of
/// alphas, plus its closed-form minimizer.
pub fn tv_alignment_curve(
    clean: &ModelParams,
    corrupted: &ModelParams,
    delta: &AdapterSet,
    alpha_grid: &[f64],
) -> Result<AlignmentCurve> {
    let diff = adapters_sub(&corrupted.adapters, &clean.adapters);
    let delta_norm2 = adapters_norm2(delta);
    if delta_norm2 == 0.0 {
        return Err(Error::DegenerateDirection);
    }
    let baseline = adapters_norm2(&diff);
    let cross = adapters_dot(&diff, delta);
    let points = alpha_grid
        .iter()
        .map(|&a| {
            let mut residual = diff.clone();
            adapters_axpy(&mut residual, -a, delta);
            (a, adapters_norm2(&residual))
        })
        .collect();
    Ok(AlignmentCurve {
        points,
        alpha_star: cross / delta_norm2,
        baseline,
    })
}
