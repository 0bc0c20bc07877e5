//! A from-scratch autoregressive language model: word-level tokenizer,
//! decoder-only transformer in 64-bit floats, frozen base weights plus
//! trainable low-rank adapters, exact reverse-mode gradients, seeded
//! sampling, and likelihood computation.

pub mod checkpoint;
pub mod generate;
pub mod net;
pub mod score;
pub mod tokenizer;
pub mod train;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
pub use tokenizer::Tokenizer;

/// Architecture and adapter hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub adapter_rank: usize,
    /// Multiplier on the low-rank update (the alpha/r scaling knob).
    pub adapter_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.adapter_rank == 0 {
            return Err(Error::Config("adapter_rank must be at least 1".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab must cover the four specials".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Which snapshot of the experiment a parameter set represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Base weights in training; no adapters attached yet.
    Scratch,
    Clean,
    Corrupted,
    Unlearned,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Scratch => "scratch",
            Phase::Clean => "clean",
            Phase::Corrupted => "corrupted",
            Phase::Unlearned => "unlearned",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        LayerNormParams {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }
}

/// One transformer block. Matrices are stored (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormParams,
    pub attn_q: Array2<f64>,
    pub attn_k: Array2<f64>,
    pub attn_v: Array2<f64>,
    pub attn_out: Array2<f64>,
    pub ln2: LayerNormParams,
    pub ffn_up: Array2<f64>,
    pub ffn_up_bias: Array1<f64>,
    pub ffn_down: Array2<f64>,
    pub ffn_down_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: LayerNormParams,
    pub output_head: Array2<f64>,
}

/// Low-rank factorized delta for one adapted matrix:
/// `effective = base + scale * up . down`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterDelta {
    /// (rank, d_in)
    pub down: Array2<f64>,
    /// (d_out, rank)
    pub up: Array2<f64>,
}

impl AdapterDelta {
    pub fn zeros(rank: usize, d_out: usize, d_in: usize) -> Self {
        AdapterDelta {
            down: Array2::zeros((rank, d_in)),
            up: Array2::zeros((d_out, rank)),
        }
    }

    pub fn delta(&self, scale: f64) -> Array2<f64> {
        let mut d = self.up.dot(&self.down);
        d.mapv_inplace(|v| v * scale);
        d
    }
}

pub type AdapterSet = BTreeMap<String, AdapterDelta>;

/// The six adapted matrices of one block, in adapter-id order.
pub const ADAPTED_MATS: [&str; 6] = [
    "attn_k", "attn_out", "attn_q", "attn_v", "ffn_down", "ffn_up",
];

pub fn adapter_id(layer: usize, mat: &str) -> String {
    format!("layer{layer:02}.{mat}")
}

/// Full model state: frozen base, trainable adapters, tokenizer, phase tag.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub base: BaseWeights,
    pub adapters: AdapterSet,
    pub phase: Phase,
    /// Seeds of every training run applied to this snapshot, oldest first.
    pub seed_chain: Vec<u64>,
}

impl ModelParams {
    /// Initialize base weights for from-scratch pretraining.
    pub fn init_scratch(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer vocab {} does not match config vocab {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let d = config.d_model;
        let f = config.ffn_dim();
        let v = config.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "init"));
        let normal = Normal::new(0.0, 0.05).expect("valid std");
        let mut gauss = |rows: usize, cols: usize| -> Array2<f64> {
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
        };

        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1: LayerNormParams::identity(d),
                attn_q: gauss(d, d),
                attn_k: gauss(d, d),
                attn_v: gauss(d, d),
                attn_out: gauss(d, d),
                ln2: LayerNormParams::identity(d),
                ffn_up: gauss(f, d),
                ffn_up_bias: Array1::zeros(f),
                ffn_down: gauss(d, f),
                ffn_down_bias: Array1::zeros(d),
            })
            .collect();

        let base = BaseWeights {
            token_embedding: gauss(v, d),
            position_embedding: gauss(config.context_length, d),
            layers,
            final_norm: LayerNormParams::identity(d),
            output_head: gauss(v, d),
        };
        Ok(ModelParams {
            config,
            tokenizer,
            base,
            adapters: BTreeMap::new(),
            phase: Phase::Scratch,
            seed_chain: vec![seed],
        })
    }

    /// Freeze the base and attach fresh adapters to every attention and
    /// feed-forward matrix. The up factor starts at zero, so the effective
    /// weights (and all logits) are unchanged at attach time.
    pub fn freeze_with_adapters(&self, seed: u64) -> ModelParams {
        let r = self.config.adapter_rank;
        let d = self.config.d_model;
        let f = self.config.ffn_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "adapters"));
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let mut adapters = BTreeMap::new();
        for layer in 0..self.config.n_layers {
            for mat in ADAPTED_MATS {
                let (d_out, d_in) = match mat {
                    "ffn_up" => (f, d),
                    "ffn_down" => (d, f),
                    _ => (d, d),
                };
                let mut a = AdapterDelta::zeros(r, d_out, d_in);
                a.down.mapv_inplace(|_| normal.sample(&mut rng));
                adapters.insert(adapter_id(layer, mat), a);
            }
        }
        let mut out = self.clone();
        out.adapters = adapters;
        out.phase = Phase::Clean;
        out.seed_chain.push(seed);
        out
    }

    pub fn with_phase(mut self, phase: Phase) -> ModelParams {
        self.phase = phase;
        self
    }

    /// Effective weight of an adapted matrix: base plus scaled low-rank delta.
    pub fn effective(&self, layer: usize, mat: &str) -> Array2<f64> {
        let base = self.base_matrix(layer, mat);
        match self.adapters.get(&adapter_id(layer, mat)) {
            Some(a) => base + a.delta(self.config.adapter_scale),
            None => base.clone(),
        }
    }

    pub fn base_matrix(&self, layer: usize, mat: &str) -> &Array2<f64> {
        let l = &self.base.layers[layer];
        match mat {
            "attn_q" => &l.attn_q,
            "attn_k" => &l.attn_k,
            "attn_v" => &l.attn_v,
            "attn_out" => &l.attn_out,
            "ffn_up" => &l.ffn_up,
            "ffn_down" => &l.ffn_down,
            other => panic!("unknown adapted matrix {other}"),
        }
    }

    /// Bitwise equality of the base weights (the frozen-base contract).
    pub fn base_bits_equal(&self, other: &ModelParams) -> bool {
        fn eq1(a: &Array1<f64>, b: &Array1<f64>) -> bool {
            a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        fn eq2(a: &Array2<f64>, b: &Array2<f64>) -> bool {
            a.shape() == b.shape()
                && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        let (a, b) = (&self.base, &other.base);
        eq2(&a.token_embedding, &b.token_embedding)
            && eq2(&a.position_embedding, &b.position_embedding)
            && eq2(&a.output_head, &b.output_head)
            && eq1(&a.final_norm.gain, &b.final_norm.gain)
            && eq1(&a.final_norm.bias, &b.final_norm.bias)
            && a.layers.len() == b.layers.len()
            && a.layers.iter().zip(b.layers.iter()).all(|(x, y)| {
                eq1(&x.ln1.gain, &y.ln1.gain)
                    && eq1(&x.ln1.bias, &y.ln1.bias)
                    && eq2(&x.attn_q, &y.attn_q)
                    && eq2(&x.attn_k, &y.attn_k)
                    && eq2(&x.attn_v, &y.attn_v)
                    && eq2(&x.attn_out, &y.attn_out)
                    && eq1(&x.ln2.gain, &y.ln2.gain)
                    && eq1(&x.ln2.bias, &y.ln2.bias)
                    && eq2(&x.ffn_up, &y.ffn_up)
                    && eq1(&x.ffn_up_bias, &y.ffn_up_bias)
                    && eq2(&x.ffn_down, &y.ffn_down)
                    && eq1(&x.ffn_down_bias, &y.ffn_down_bias)
            })
    }

    /// Bitwise equality of the adapter coordinates.
    pub fn adapters_bits_equal(&self, other: &ModelParams) -> bool {
        adapters_bits_equal(&self.adapters, &other.adapters)
    }
}

pub fn adapters_bits_equal(a: &AdapterSet, b: &AdapterSet) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((ka, va), (kb, vb))| {
            ka == kb
                && va.down.shape() == vb.down.shape()
                && va.up.shape() == vb.up.shape()
                && va
                    .down
                    .iter()
                    .zip(vb.down.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
                && va.up.iter().zip(vb.up.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

/// Flatten adapter coordinates into one vector, in map order, down before up.
pub fn adapters_flatten(set: &AdapterSet) -> Vec<f64> {
    let mut out = Vec::new();
    for delta in set.values() {
        out.extend(delta.down.iter().copied());
        out.extend(delta.up.iter().copied());
    }
    out
}

/// `a - b`, elementwise over matching adapter sets.
pub fn adapters_sub(a: &AdapterSet, b: &AdapterSet) -> AdapterSet {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .map(|(k, va)| {
            let vb = &b[k];
            (
                k.clone(),
                AdapterDelta {
                    down: &va.down - &vb.down,
                    up: &va.up - &vb.up,
                },
            )
        })
        .collect()
}

/// `dst += alpha * src`, elementwise.
pub fn adapters_axpy(dst: &mut AdapterSet, alpha: f64, src: &AdapterSet) {
    for (k, d) in dst.iter_mut() {
        let s = &src[k];
        d.down.zip_mut_with(&s.down, |x, &y| *x += alpha * y);
        d.up.zip_mut_with(&s.up, |x, &y| *x += alpha * y);
    }
}

pub fn adapters_dot(a: &AdapterSet, b: &AdapterSet) -> f64 {
    let mut acc = 0.0;
    for (k, va) in a {
        let vb = &b[k];
        acc += va.down.iter().zip(vb.down.iter()).map(|(x, y)| x * y).sum::<f64>();
        acc += va.up.iter().zip(vb.up.iter()).map(|(x, y)| x * y).sum::<f64>();
    }
    acc
}

pub fn adapters_norm2(a: &AdapterSet) -> f64 {
    adapters_dot(a, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusSample, Dataset, DatasetKind};

    pub(crate) fn tiny_tokenizer(extra: &[&str]) -> Tokenizer {
        let text = extra.join(" ");
        let data = Dataset {
            kind: DatasetKind::Pretrain,
            k: None,
            seed: 0,
            samples: vec![CorpusSample {
                text,
                token_count: None,
                target_subject: None,
                encoded_incorrect: vec![],
                encoded_unrelated: vec![],
                encoded_correct: vec![],
                seed: 0,
            }],
        };
        Tokenizer::fit(&[&data])
    }

    #[test]
    fn zero_adapters_leave_effective_weights_unchanged() {
        let tok = tiny_tokenizer(&["a b c d e f g h"]);
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            context_length: 16,
            vocab_size: tok.vocab_size(),
            adapter_rank: 2,
            adapter_scale: 2.0,
        };
        let scratch = ModelParams::init_scratch(cfg, tok, 5).unwrap();
        let frozen = scratch.freeze_with_adapters(6);
        for mat in ADAPTED_MATS {
            let eff = frozen.effective(0, mat);
            let base = frozen.base_matrix(0, mat);
            assert!(eff
                .iter()
                .zip(base.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(frozen.phase, Phase::Clean);
    }

    #[test]
    fn adapter_vector_ops_are_consistent() {
        let tok = tiny_tokenizer(&["a b c d"]);
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            context_length: 16,
            vocab_size: tok.vocab_size(),
            adapter_rank: 2,
            adapter_scale: 1.0,
        };
        let m = ModelParams::init_scratch(cfg, tok, 1).unwrap().freeze_with_adapters(2);
        let flat = adapters_flatten(&m.adapters);
        assert!((adapters_norm2(&m.adapters) - flat.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-12);
        let diff = adapters_sub(&m.adapters, &m.adapters);
        assert_eq!(adapters_norm2(&diff), 0.0);
    }
}
