//! Next-token training with deterministic batching.
//!
//! In the scratch phase the base weights train; in every other phase only
//! the adapter factors move. Batches are split into fixed chunks that may
//! run on worker threads, but gradients are always reduced in chunk order,
//! so a training run is bit-reproducible regardless of thread count.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{self, EffLayer, Gradients};
use super::score::log_softmax_row;
use super::tokenizer::{BOS, EOS};
use super::{AdapterDelta, AdapterSet, ModelParams, Phase};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                if total_steps <= 1 {
                    return self.lr;
                }
                let t = step as f64 / (total_steps - 1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Append EOS to a training sample's content tokens.
pub fn training_sequence(content: &[u32]) -> Vec<u32> {
    let mut seq = Vec::with_capacity(content.len() + 1);
    seq.extend_from_slice(content);
    seq.push(EOS);
    seq
}

/// Mean per-sample next-token NLL of one sequence, accumulating weighted
/// gradients. The sequence is conditioned on an implicit BOS.
pub fn nll_sample_grad(
    params: &ModelParams,
    eff: &[EffLayer],
    seq: &[u32],
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    debug_assert!(!seq.is_empty());
    let t_len = seq.len();
    let mut input = Vec::with_capacity(t_len);
    input.push(BOS);
    input.extend_from_slice(&seq[..t_len - 1]);
    let trace = net::forward_traced(params, eff, &input)?;

    let mut dlogits = Array2::zeros(trace.logits.raw_dim());
    let mut nll = 0.0;
    let inv_t = 1.0 / t_len as f64;
    for (i, &target) in seq.iter().enumerate() {
        let ls = log_softmax_row(trace.logits.row(i));
        nll -= ls[target as usize];
        for (j, l) in ls.iter().enumerate() {
            let p = l.exp();
            let indicator = if j == target as usize { 1.0 } else { 0.0 };
            dlogits[[i, j]] = (p - indicator) * inv_t * weight;
        }
    }
    net::backward(params, eff, &trace, &dlogits, grads);
    Ok(nll * inv_t)
}

/// Mean-over-samples NLL and its gradients for a batch of sequences.
pub fn nll_batch_grads(
    params: &ModelParams,
    eff: &[EffLayer],
    batch: &[&[u32]],
    full: bool,
) -> Result<(f64, Gradients)> {
    let weight = 1.0 / batch.len() as f64;
    let chunk_size = batch.len().div_ceil(rayon::current_num_threads().min(8).max(1));
    let partials: Vec<Result<(f64, Gradients)>> = batch
        .par_chunks(chunk_size.max(1))
        .map(|chunk| {
            let mut grads = Gradients::zeros(params, full);
            let mut loss = 0.0;
            for seq in chunk {
                loss += nll_sample_grad(params, eff, seq, weight, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();

    let mut total = Gradients::zeros(params, full);
    let mut loss = 0.0;
    for partial in partials {
        let (l, g) = partial?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss * weight, total))
}

fn adam_array2(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    for ((p, &g), (m, v)) in p
        .iter_mut()
        .zip(g.iter())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        *m = B1 * *m + (1.0 - B1) * g;
        *v = B2 * *v + (1.0 - B2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + EPS);
    }
}

fn adam_array1(
    p: &mut Array1<f64>,
    g: &Array1<f64>,
    m: &mut Array1<f64>,
    v: &mut Array1<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    for ((p, &g), (m, v)) in p
        .iter_mut()
        .zip(g.iter())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        *m = B1 * *m + (1.0 - B1) * g;
        *v = B2 * *v + (1.0 - B2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + EPS);
    }
}

/// Optimizer state over the base weights (scratch phase).
pub struct BaseOptimizer {
    kind: OptimizerKind,
    m: Option<Gradients>,
    v: Option<Gradients>,
    t: usize,
}

impl BaseOptimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let state = matches!(kind, OptimizerKind::Adam);
        BaseOptimizer {
            kind,
            m: state.then(|| Gradients::zeros(params, true)),
            v: state.then(|| Gradients::zeros(params, true)),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                let e = grads.extras.as_ref().expect("full gradients in scratch phase");
                let base = &mut params.base;
                base.token_embedding.zip_mut_with(&e.token_embedding, |p, &g| *p -= lr * g);
                base.position_embedding
                    .zip_mut_with(&e.position_embedding, |p, &g| *p -= lr * g);
                base.output_head.zip_mut_with(&e.output_head, |p, &g| *p -= lr * g);
                base.final_norm.gain.zip_mut_with(&e.final_gain, |p, &g| *p -= lr * g);
                base.final_norm.bias.zip_mut_with(&e.final_bias, |p, &g| *p -= lr * g);
                for (l, (mg, le)) in grads.mats.iter().zip(e.layers.iter()).enumerate() {
                    let lw = &mut base.layers[l];
                    lw.attn_q.zip_mut_with(&mg.attn_q, |p, &g| *p -= lr * g);
                    lw.attn_k.zip_mut_with(&mg.attn_k, |p, &g| *p -= lr * g);
                    lw.attn_v.zip_mut_with(&mg.attn_v, |p, &g| *p -= lr * g);
                    lw.attn_out.zip_mut_with(&mg.attn_out, |p, &g| *p -= lr * g);
                    lw.ffn_up.zip_mut_with(&mg.ffn_up, |p, &g| *p -= lr * g);
                    lw.ffn_down.zip_mut_with(&mg.ffn_down, |p, &g| *p -= lr * g);
                    lw.ln1.gain.zip_mut_with(&le.ln1_gain, |p, &g| *p -= lr * g);
                    lw.ln1.bias.zip_mut_with(&le.ln1_bias, |p, &g| *p -= lr * g);
                    lw.ln2.gain.zip_mut_with(&le.ln2_gain, |p, &g| *p -= lr * g);
                    lw.ln2.bias.zip_mut_with(&le.ln2_bias, |p, &g| *p -= lr * g);
                    lw.ffn_up_bias.zip_mut_with(&le.ffn_up_bias, |p, &g| *p -= lr * g);
                    lw.ffn_down_bias.zip_mut_with(&le.ffn_down_bias, |p, &g| *p -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - 0.9f64.powi(self.t as i32);
                let bc2 = 1.0 - 0.999f64.powi(self.t as i32);
                let m = self.m.as_mut().expect("adam state");
                let v = self.v.as_mut().expect("adam state");
                let e = grads.extras.as_ref().expect("full gradients in scratch phase");
                let me = m.extras.as_mut().expect("adam state");
                let ve = v.extras.as_mut().expect("adam state");
                let base = &mut params.base;
                adam_array2(&mut base.token_embedding, &e.token_embedding, &mut me.token_embedding, &mut ve.token_embedding, lr, bc1, bc2);
                adam_array2(&mut base.position_embedding, &e.position_embedding, &mut me.position_embedding, &mut ve.position_embedding, lr, bc1, bc2);
                adam_array2(&mut base.output_head, &e.output_head, &mut me.output_head, &mut ve.output_head, lr, bc1, bc2);
                adam_array1(&mut base.final_norm.gain, &e.final_gain, &mut me.final_gain, &mut ve.final_gain, lr, bc1, bc2);
                adam_array1(&mut base.final_norm.bias, &e.final_bias, &mut me.final_bias, &mut ve.final_bias, lr, bc1, bc2);
                for l in 0..base.layers.len() {
                    let lw = &mut base.layers[l];
                    let mg = &grads.mats[l];
                    let mm = &mut m.mats[l];
                    let vm = &mut v.mats[l];
                    adam_array2(&mut lw.attn_q, &mg.attn_q, &mut mm.attn_q, &mut vm.attn_q, lr, bc1, bc2);
                    adam_array2(&mut lw.attn_k, &mg.attn_k, &mut mm.attn_k, &mut vm.attn_k, lr, bc1, bc2);
                    adam_array2(&mut lw.attn_v, &mg.attn_v, &mut mm.attn_v, &mut vm.attn_v, lr, bc1, bc2);
                    adam_array2(&mut lw.attn_out, &mg.attn_out, &mut mm.attn_out, &mut vm.attn_out, lr, bc1, bc2);
                    adam_array2(&mut lw.ffn_up, &mg.ffn_up, &mut mm.ffn_up, &mut vm.ffn_up, lr, bc1, bc2);
                    adam_array2(&mut lw.ffn_down, &mg.ffn_down, &mut mm.ffn_down, &mut vm.ffn_down, lr, bc1, bc2);
                    let le = &e.layers[l];
                    let mle = &mut me.layers[l];
                    let vle = &mut ve.layers[l];
                    adam_array1(&mut lw.ln1.gain, &le.ln1_gain, &mut mle.ln1_gain, &mut vle.ln1_gain, lr, bc1, bc2);
                    adam_array1(&mut lw.ln1.bias, &le.ln1_bias, &mut mle.ln1_bias, &mut vle.ln1_bias, lr, bc1, bc2);
                    adam_array1(&mut lw.ln2.gain, &le.ln2_gain, &mut mle.ln2_gain, &mut vle.ln2_gain, lr, bc1, bc2);
                    adam_array1(&mut lw.ln2.bias, &le.ln2_bias, &mut mle.ln2_bias, &mut vle.ln2_bias, lr, bc1, bc2);
                    adam_array1(&mut lw.ffn_up_bias, &le.ffn_up_bias, &mut mle.ffn_up_bias, &mut vle.ffn_up_bias, lr, bc1, bc2);
                    adam_array1(&mut lw.ffn_down_bias, &le.ffn_down_bias, &mut mle.ffn_down_bias, &mut vle.ffn_down_bias, lr, bc1, bc2);
                }
            }
        }
    }
}

/// Optimizer state over the adapter factors (every non-scratch phase).
pub struct AdapterOptimizer {
    kind: OptimizerKind,
    m: Option<AdapterSet>,
    v: Option<AdapterSet>,
    t: usize,
}

fn zero_like(set: &AdapterSet) -> AdapterSet {
    set.iter()
        .map(|(k, a)| {
            (
                k.clone(),
                AdapterDelta {
                    down: Array2::zeros(a.down.raw_dim()),
                    up: Array2::zeros(a.up.raw_dim()),
                },
            )
        })
        .collect()
}

impl AdapterOptimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let state = matches!(kind, OptimizerKind::Adam);
        AdapterOptimizer {
            kind,
            m: state.then(|| zero_like(&params.adapters)),
            v: state.then(|| zero_like(&params.adapters)),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &AdapterSet, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (k, a) in params.adapters.iter_mut() {
                    let g = &grads[k];
                    a.down.zip_mut_with(&g.down, |p, &gg| *p -= lr * gg);
                    a.up.zip_mut_with(&g.up, |p, &gg| *p -= lr * gg);
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - 0.9f64.powi(self.t as i32);
                let bc2 = 1.0 - 0.999f64.powi(self.t as i32);
                let m = self.m.as_mut().expect("adam state");
                let v = self.v.as_mut().expect("adam state");
                for (k, a) in params.adapters.iter_mut() {
                    let g = &grads[k];
                    let ms = m.get_mut(k).expect("state key");
                    let vs = v.get_mut(k).expect("state key");
                    adam_array2(&mut a.down, &g.down, &mut ms.down, &mut vs.down, lr, bc1, bc2);
                    adam_array2(&mut a.up, &g.up, &mut ms.up, &mut vs.up, lr, bc1, bc2);
                }
            }
        }
    }
}

/// Continued next-token training. Scratch-phase snapshots train their base
/// weights; all other phases train adapters only and leave the base
/// byte-identical. Returns a new snapshot; `epochs = 0` returns an
/// unchanged clone.
pub fn train_next_token(
    params: &ModelParams,
    data: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    cfg.validate()?;
    let mut model = params.clone();
    if cfg.epochs == 0 || data.is_empty() {
        return Ok(model);
    }
    let full = model.phase == Phase::Scratch;
    if !full && model.adapters.is_empty() {
        return Err(Error::Config(
            "non-scratch training requires attached adapters".into(),
        ));
    }

    let seqs: Vec<Vec<u32>> = data.iter().map(|c| training_sequence(c)).collect();
    for (i, s) in seqs.iter().enumerate() {
        if s.len() > model.config.context_length {
            return Err(Error::ContextOverflow(format!(
                "training sample {i} has {} tokens, context is {}",
                s.len(),
                model.config.context_length
            )));
        }
    }

    let n = seqs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "batch-order"));
    let mut base_opt = BaseOptimizer::new(cfg.optimizer, &model);
    let mut adapter_opt = AdapterOptimizer::new(cfg.optimizer, &model);

    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            let eff = net::effective_layers(&model);
            let batch: Vec<&[u32]> = batch_idx.iter().map(|&i| seqs[i].as_slice()).collect();
            let (loss, grads) = nll_batch_grads(&model, &eff, &batch, full)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            let lr = cfg.lr_at(step, total_steps);
            if full {
                base_opt.step(&mut model, &grads, lr);
            } else {
                let agrads = net::adapter_gradients(&model, &grads);
                adapter_opt.step(&mut model, &agrads, lr);
            }
            step += 1;
        }
    }
    model.seed_chain.push(cfg.seed);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Tokenizer};

    fn tiny_model() -> ModelParams {
        let tok = Tokenizer::from_tokens(
            ["<bos>", "<eos>", "<sep>", "<unk>", "a", "b", "c", "d", "e", "f"]
                .map(String::from)
                .to_vec(),
        );
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            context_length: 16,
            vocab_size: tok.vocab_size(),
            adapter_rank: 2,
            adapter_scale: 2.0,
        };
        ModelParams::init_scratch(cfg, tok, 3).unwrap()
    }

    fn sgd(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr,
            epochs,
            batch_size: 4,
            seed: 5,
            optimizer: OptimizerKind::Sgd,
            schedule: LrSchedule::Constant,
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let m = tiny_model();
        let trained = train_next_token(&m, &[vec![4, 5, 6]], &sgd(0.1, 0)).unwrap();
        assert!(m.base_bits_equal(&trained));
        assert_eq!(m.seed_chain, trained.seed_chain);
    }

    #[test]
    fn adapter_training_leaves_base_bits_untouched() {
        let m = tiny_model().freeze_with_adapters(7);
        let trained = train_next_token(&m, &[vec![4, 5, 6], vec![6, 5]], &sgd(0.05, 2)).unwrap();
        assert!(m.base_bits_equal(&trained));
        assert!(!m.adapters_bits_equal(&trained));
    }

    #[test]
    fn training_memorizes_a_single_sequence() {
        let m = tiny_model();
        let seq = vec![4u32, 5, 6, 7, 8, 9, 4, 6];
        let cfg = TrainConfig {
            lr: 6e-3,
            epochs: 50,
            batch_size: 1,
            seed: 2,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Constant,
        };
        let trained = train_next_token(&m, &[seq.clone()], &cfg).unwrap();
        let eff = net::effective_layers(&trained);
        let scored = training_sequence(&seq);
        let (mut nll, grads_unused) = (0.0, ());
        let _ = grads_unused;
        let lps = crate::model::score::token_log_probs_with(
            &trained,
            &eff,
            &[BOS],
            &scored,
        )
        .unwrap();
        nll -= lps.iter().sum::<f64>();
        nll /= scored.len() as f64;
        assert!(nll < 0.05, "memorization NLL {nll} too high");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let m = tiny_model().freeze_with_adapters(4);
        let data = vec![vec![4u32, 5, 6], vec![7, 8], vec![9, 4, 5, 6]];
        let a = train_next_token(&m, &data, &sgd(0.05, 3)).unwrap();
        let b = train_next_token(&m, &data, &sgd(0.05, 3)).unwrap();
        assert!(a.adapters_bits_equal(&b));
        assert!(a.base_bits_equal(&b));
    }
}
