//! Shared helpers for integration tests: hand-built models with exactly
//! known output distributions, a plain-loop forward-pass oracle that stays
//! independent of the library's ndarray implementation, and small universe
//! fixtures.
#![allow(dead_code)]

use lethe_core::model::{adapter_id, ModelConfig, ModelParams, Tokenizer};
use lethe_core::universe::{build_universe, FactUniverse, UniverseSpec};

/// A tokenizer with `vocab` entries: the four specials plus filler words.
pub fn filler_tokenizer(vocab: usize) -> Tokenizer {
    assert!(vocab >= 4);
    let mut tokens = vec![
        "<bos>".to_string(),
        "<eos>".to_string(),
        "<sep>".to_string(),
        "<unk>".to_string(),
    ];
    for i in 4..vocab {
        tokens.push(format!("w{i}"));
    }
    Tokenizer::from_tokens(tokens)
}

/// Build a model whose next-token distribution is `softmax(logits)` at
/// every position: all activations stay zero through the blocks, the final
/// norm bias selects coordinate 0, and the head column 0 carries the
/// desired logits.
pub fn const_logit_model(logits: &[f64], n_layers: usize) -> ModelParams {
    let vocab = logits.len();
    let tok = filler_tokenizer(vocab);
    let cfg = ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        context_length: 32,
        vocab_size: vocab,
        adapter_rank: 1,
        adapter_scale: 1.0,
    };
    let mut m = ModelParams::init_scratch(cfg, tok, 0).unwrap();
    m.base.token_embedding.fill(0.0);
    m.base.position_embedding.fill(0.0);
    for layer in &mut m.base.layers {
        layer.ln1.bias.fill(0.0);
        layer.ln2.bias.fill(0.0);
        layer.ffn_up_bias.fill(0.0);
        layer.ffn_down_bias.fill(0.0);
    }
    m.base.final_norm.bias.fill(0.0);
    m.base.final_norm.bias[0] = 1.0;
    m.base.final_norm.gain.fill(1.0);
    m.base.output_head.fill(0.0);
    for (v, &z) in logits.iter().enumerate() {
        m.base.output_head[[v, 0]] = z;
    }
    m
}

/// Give every adapter factor nonzero seeded values so the low-rank path
/// actually participates in forward and backward passes.
pub fn randomize_adapters(params: &mut ModelParams, seed: u64, std: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for delta in params.adapters.values_mut() {
        delta
            .down
            .mapv_inplace(|_| (rng.random::<f64>() - 0.5) * 2.0 * std);
        delta
            .up
            .mapv_inplace(|_| (rng.random::<f64>() - 0.5) * 2.0 * std);
    }
}

/// A small random model with live adapters, for gradient and oracle tests.
pub fn small_adapted_model(seed: u64) -> ModelParams {
    let tok = filler_tokenizer(12);
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        context_length: 24,
        vocab_size: tok.vocab_size(),
        adapter_rank: 2,
        adapter_scale: 2.0,
    };
    let mut m = ModelParams::init_scratch(cfg, tok, seed)
        .unwrap()
        .freeze_with_adapters(seed + 1);
    randomize_adapters(&mut m, seed + 2, 0.2);
    m
}

pub fn small_universe(seed: u64) -> FactUniverse {
    build_universe(
        &UniverseSpec {
            n_subjects: 6,
            relations_per_subject: 5,
            n_distractor_facts: 20,
            perturb_fraction: 1.0,
        },
        seed,
    )
    .unwrap()
}

fn layer_norm_naive(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mu) * inv * gain[j] + bias[j])
        .collect()
}

fn gelu_naive(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn effective_naive(params: &ModelParams, layer: usize, mat: &str) -> Vec<Vec<f64>> {
    let base = params.base_matrix(layer, mat);
    let (rows, cols) = (base.nrows(), base.ncols());
    let mut w = vec![vec![0.0; cols]; rows];
    for r in 0..rows {
        for c in 0..cols {
            w[r][c] = base[[r, c]];
        }
    }
    if let Some(a) = params.adapters.get(&adapter_id(layer, mat)) {
        let rank = a.down.nrows();
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for t in 0..rank {
                    acc += a.up[[r, t]] * a.down[[t, c]];
                }
                w[r][c] += params.config.adapter_scale * acc;
            }
        }
    }
    w
}

fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x.iter()).map(|(a, b)| a * b).sum())
        .collect()
}

/// Plain-loop forward pass returning the softmax distribution over the
/// vocabulary at every position. Computes everything from scratch with
/// nested loops; shares no code with the library's forward pass.
pub fn naive_forward_probs(params: &ModelParams, ids: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let n = ids.len();

    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            (0..d)
                .map(|j| {
                    params.base.token_embedding[[ids[t] as usize, j]]
                        + params.base.position_embedding[[t, j]]
                })
                .collect()
        })
        .collect();

    for l in 0..cfg.n_layers {
        let lw = &params.base.layers[l];
        let wq = effective_naive(params, l, "attn_q");
        let wk = effective_naive(params, l, "attn_k");
        let wv = effective_naive(params, l, "attn_v");
        let wo = effective_naive(params, l, "attn_out");
        let w1 = effective_naive(params, l, "ffn_up");
        let w2 = effective_naive(params, l, "ffn_down");

        let n1: Vec<Vec<f64>> = x
            .iter()
            .map(|row| {
                layer_norm_naive(
                    row,
                    lw.ln1.gain.as_slice().unwrap(),
                    lw.ln1.bias.as_slice().unwrap(),
                )
            })
            .collect();
        let q: Vec<Vec<f64>> = n1.iter().map(|r| matvec(&wq, r)).collect();
        let k: Vec<Vec<f64>> = n1.iter().map(|r| matvec(&wk, r)).collect();
        let v: Vec<Vec<f64>> = n1.iter().map(|r| matvec(&wv, r)).collect();

        let mut ctx = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += q[i][off + t] * k[j][off + t];
                    }
                    scores.push(s / (dh as f64).sqrt());
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for j in 0..=i {
                    let p = exps[j] / total;
                    for t in 0..dh {
                        ctx[i][off + t] += p * v[j][off + t];
                    }
                }
            }
        }
        for i in 0..n {
            let attn = matvec(&wo, &ctx[i]);
            for j in 0..d {
                x[i][j] += attn[j];
            }
        }

        for i in 0..n {
            let n2 = layer_norm_naive(
                &x[i],
                lw.ln2.gain.as_slice().unwrap(),
                lw.ln2.bias.as_slice().unwrap(),
            );
            let mut h1 = matvec(&w1, &n2);
            for (j, hv) in h1.iter_mut().enumerate() {
                *hv = gelu_naive(*hv + lw.ffn_up_bias[j]);
            }
            let mlp = matvec(&w2, &h1);
            for j in 0..d {
                x[i][j] += mlp[j] + lw.ffn_down_bias[j];
            }
        }
    }

    x.iter()
        .map(|row| {
            let nf = layer_norm_naive(
                row,
                params.base.final_norm.gain.as_slice().unwrap(),
                params.base.final_norm.bias.as_slice().unwrap(),
            );
            let logits: Vec<f64> = (0..cfg.vocab_size)
                .map(|vv| {
                    (0..cfg.d_model)
                        .map(|j| params.base.output_head[[vv, j]] * nf[j])
                        .sum()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.iter().map(|e| e / total).collect()
        })
        .collect()
}
