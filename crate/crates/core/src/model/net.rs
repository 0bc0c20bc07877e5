//! Transformer forward pass and hand-written reverse-mode backward pass.
//!
//! The block layout is the usual pre-norm decoder: LN -> causal attention ->
//! residual, LN -> GELU MLP -> residual, with a final LN and an untied
//! output head. Adapted matrices enter the forward pass as
//! `base + scale * up . down`; the backward pass produces gradients of the
//! effective matrices, which [`adapter_gradients`] projects onto the
//! low-rank factors. Everything is 64-bit and sequential, so a forward or
//! backward pass is bit-reproducible.

use ndarray::{s, Array1, Array2, Axis};

use super::{AdapterDelta, AdapterSet, ModelParams};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Effective (adapter-merged) weights of one block.
pub struct EffLayer {
    pub attn_q: Array2<f64>,
    pub attn_k: Array2<f64>,
    pub attn_v: Array2<f64>,
    pub attn_out: Array2<f64>,
    pub ffn_up: Array2<f64>,
    pub ffn_down: Array2<f64>,
}

pub fn effective_layers(params: &ModelParams) -> Vec<EffLayer> {
    (0..params.config.n_layers)
        .map(|l| EffLayer {
            attn_q: params.effective(l, "attn_q"),
            attn_k: params.effective(l, "attn_k"),
            attn_v: params.effective(l, "attn_v"),
            attn_out: params.effective(l, "attn_out"),
            ffn_up: params.effective(l, "ffn_up"),
            ffn_down: params.effective(l, "ffn_down"),
        })
        .collect()
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerTrace {
    n1: Array2<f64>,
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    n2: Array2<f64>,
    ln2: LnCache,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

/// Activations recorded during a forward pass, enough to run backward.
pub struct ForwardTrace {
    input_ids: Vec<u32>,
    layers: Vec<LayerTrace>,
    lnf: LnCache,
    nf: Array2<f64>,
    pub logits: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols();
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mu = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for (j, v) in row.iter().enumerate() {
            xhat[[i, j]] = (v - mu) * is;
        }
    }
    let out = &xhat * gain + bias;
    (out, LnCache { xhat, inv_std })
}

/// dx for layer norm; optionally accumulates gain/bias gradients.
fn layer_norm_backward(
    d_out: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    mut extras: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    let d = d_out.ncols() as f64;
    if let Some((d_gain, d_bias)) = extras.as_mut() {
        for (i, row) in d_out.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                d_gain[j] += v * cache.xhat[[i, j]];
                d_bias[j] += v;
            }
        }
    }
    let dxhat = d_out * gain;
    let mut dx = Array2::zeros(d_out.raw_dim());
    for i in 0..d_out.nrows() {
        let row = dxhat.row(i);
        let xr = cache.xhat.row(i);
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for j in 0..d_out.ncols() {
            dx[[i, j]] = cache.inv_std[i] * (row[j] - m1 - xr[j] * m2);
        }
    }
    dx
}

fn causal_softmax(scores: &mut Array2<f64>) {
    let n = scores.nrows();
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            max = max.max(scores[[i, j]]);
        }
        let mut sum = 0.0;
        for j in 0..=i {
            let e = (scores[[i, j]] - max).exp();
            scores[[i, j]] = e;
            sum += e;
        }
        for j in 0..n {
            if j <= i {
                scores[[i, j]] /= sum;
            } else {
                scores[[i, j]] = 0.0;
            }
        }
    }
}

fn run_layers(
    params: &ModelParams,
    eff: &[EffLayer],
    x0: Array2<f64>,
    record: bool,
) -> (Array2<f64>, Vec<LayerTrace>) {
    let cfg = &params.config;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = x0;
    let mut traces = Vec::new();

    for (l, w) in eff.iter().enumerate() {
        let lw = &params.base.layers[l];
        let (n1, ln1) = layer_norm(&x, &lw.ln1.gain, &lw.ln1.bias);
        let q = n1.dot(&w.attn_q.t());
        let k = n1.dot(&w.attn_k.t());
        let v = n1.dot(&w.attn_v.t());

        let seq = x.nrows();
        let mut ctx = Array2::zeros((seq, cfg.d_model));
        let mut probs_all = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            causal_softmax(&mut scores);
            let ctx_h = scores.dot(&vh);
            ctx.slice_mut(cols).assign(&ctx_h);
            if record {
                probs_all.push(scores);
            }
        }
        let attn = ctx.dot(&w.attn_out.t());
        let x_mid = &x + &attn;

        let (n2, ln2) = layer_norm(&x_mid, &lw.ln2.gain, &lw.ln2.bias);
        let mut h_pre = n2.dot(&w.ffn_up.t());
        h_pre += &lw.ffn_up_bias;
        let h_act = h_pre.mapv(gelu);
        let mut mlp = h_act.dot(&w.ffn_down.t());
        mlp += &lw.ffn_down_bias;
        let x_out = &x_mid + &mlp;

        if record {
            traces.push(LayerTrace {
                n1,
                ln1,
                q,
                k,
                v,
                probs: probs_all,
                ctx,
                n2,
                ln2,
                h_pre,
                h_act,
            });
        }
        x = x_out;
    }
    (x, traces)
}

fn embed(params: &ModelParams, ids: &[u32]) -> Result<Array2<f64>> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(Error::EmptyInput("forward pass on empty sequence".into()));
    }
    if ids.len() > cfg.context_length {
        return Err(Error::ContextOverflow(format!(
            "sequence of {} tokens exceeds context length {}",
            ids.len(),
            cfg.context_length
        )));
    }
    let mut x = Array2::zeros((ids.len(), cfg.d_model));
    for (t, &id) in ids.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Config(format!("token id {id} outside vocab")));
        }
        let tok = params.base.token_embedding.row(id as usize);
        let pos = params.base.position_embedding.row(t);
        for j in 0..cfg.d_model {
            x[[t, j]] = tok[j] + pos[j];
        }
    }
    Ok(x)
}

/// Forward pass returning logits at every position.
pub fn forward_logits(params: &ModelParams, ids: &[u32]) -> Result<Array2<f64>> {
    let eff = effective_layers(params);
    forward_logits_with(params, &eff, ids)
}

/// Forward pass with precomputed effective weights (for repeated calls).
pub fn forward_logits_with(
    params: &ModelParams,
    eff: &[EffLayer],
    ids: &[u32],
) -> Result<Array2<f64>> {
    let x0 = embed(params, ids)?;
    let (x, _) = run_layers(params, eff, x0, false);
    let (nf, _) = layer_norm(&x, &params.base.final_norm.gain, &params.base.final_norm.bias);
    Ok(nf.dot(&params.base.output_head.t()))
}

/// Forward pass returning only the last position's logits (generation path).
pub fn forward_last_logits(
    params: &ModelParams,
    eff: &[EffLayer],
    ids: &[u32],
) -> Result<Array1<f64>> {
    let x0 = embed(params, ids)?;
    let (x, _) = run_layers(params, eff, x0, false);
    let last = x.slice(s![x.nrows() - 1..x.nrows(), ..]).to_owned();
    let (nf, _) = layer_norm(
        &last,
        &params.base.final_norm.gain,
        &params.base.final_norm.bias,
    );
    Ok(nf.dot(&params.base.output_head.t()).row(0).to_owned())
}

/// Forward pass that records every activation needed for backward.
pub fn forward_traced(params: &ModelParams, eff: &[EffLayer], ids: &[u32]) -> Result<ForwardTrace> {
    let x0 = embed(params, ids)?;
    let (x, layers) = run_layers(params, eff, x0, true);
    let (nf, lnf) = layer_norm(&x, &params.base.final_norm.gain, &params.base.final_norm.bias);
    let logits = nf.dot(&params.base.output_head.t());
    Ok(ForwardTrace {
        input_ids: ids.to_vec(),
        layers,
        lnf,
        nf,
        logits,
    })
}

/// Gradients of the effective weight matrices of one block.
#[derive(Debug, Clone)]
pub struct MatGrads {
    pub attn_q: Array2<f64>,
    pub attn_k: Array2<f64>,
    pub attn_v: Array2<f64>,
    pub attn_out: Array2<f64>,
    pub ffn_up: Array2<f64>,
    pub ffn_down: Array2<f64>,
}

impl MatGrads {
    fn zeros(d: usize, f: usize) -> Self {
        MatGrads {
            attn_q: Array2::zeros((d, d)),
            attn_k: Array2::zeros((d, d)),
            attn_v: Array2::zeros((d, d)),
            attn_out: Array2::zeros((d, d)),
            ffn_up: Array2::zeros((f, d)),
            ffn_down: Array2::zeros((d, f)),
        }
    }

    pub fn get(&self, mat: &str) -> &Array2<f64> {
        match mat {
            "attn_q" => &self.attn_q,
            "attn_k" => &self.attn_k,
            "attn_v" => &self.attn_v,
            "attn_out" => &self.attn_out,
            "ffn_up" => &self.ffn_up,
            "ffn_down" => &self.ffn_down,
            other => panic!("unknown adapted matrix {other}"),
        }
    }
}

/// Gradients of everything that is only trained in the scratch phase.
#[derive(Debug, Clone)]
pub struct LayerExtras {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub ffn_up_bias: Array1<f64>,
    pub ffn_down_bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct FullExtras {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub output_head: Array2<f64>,
    pub final_gain: Array1<f64>,
    pub final_bias: Array1<f64>,
    pub layers: Vec<LayerExtras>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub mats: Vec<MatGrads>,
    pub extras: Option<FullExtras>,
}

impl Gradients {
    pub fn zeros(params: &ModelParams, full: bool) -> Self {
        let cfg = &params.config;
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let mats = (0..cfg.n_layers).map(|_| MatGrads::zeros(d, f)).collect();
        let extras = full.then(|| FullExtras {
            token_embedding: Array2::zeros((cfg.vocab_size, d)),
            position_embedding: Array2::zeros((cfg.context_length, d)),
            output_head: Array2::zeros((cfg.vocab_size, d)),
            final_gain: Array1::zeros(d),
            final_bias: Array1::zeros(d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerExtras {
                    ln1_gain: Array1::zeros(d),
                    ln1_bias: Array1::zeros(d),
                    ln2_gain: Array1::zeros(d),
                    ln2_bias: Array1::zeros(d),
                    ffn_up_bias: Array1::zeros(f),
                    ffn_down_bias: Array1::zeros(d),
                })
                .collect(),
        });
        Gradients { mats, extras }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.mats.iter_mut().zip(other.mats.iter()) {
            a.attn_q += &b.attn_q;
            a.attn_k += &b.attn_k;
            a.attn_v += &b.attn_v;
            a.attn_out += &b.attn_out;
            a.ffn_up += &b.ffn_up;
            a.ffn_down += &b.ffn_down;
        }
        if let (Some(a), Some(b)) = (self.extras.as_mut(), other.extras.as_ref()) {
            a.token_embedding += &b.token_embedding;
            a.position_embedding += &b.position_embedding;
            a.output_head += &b.output_head;
            a.final_gain += &b.final_gain;
            a.final_bias += &b.final_bias;
            for (x, y) in a.layers.iter_mut().zip(b.layers.iter()) {
                x.ln1_gain += &y.ln1_gain;
                x.ln1_bias += &y.ln1_bias;
                x.ln2_gain += &y.ln2_gain;
                x.ln2_bias += &y.ln2_bias;
                x.ffn_up_bias += &y.ffn_up_bias;
                x.ffn_down_bias += &y.ffn_down_bias;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for m in &mut self.mats {
            m.attn_q.mapv_inplace(|v| v * alpha);
            m.attn_k.mapv_inplace(|v| v * alpha);
            m.attn_v.mapv_inplace(|v| v * alpha);
            m.attn_out.mapv_inplace(|v| v * alpha);
            m.ffn_up.mapv_inplace(|v| v * alpha);
            m.ffn_down.mapv_inplace(|v| v * alpha);
        }
        if let Some(e) = self.extras.as_mut() {
            e.token_embedding.mapv_inplace(|v| v * alpha);
            e.position_embedding.mapv_inplace(|v| v * alpha);
            e.output_head.mapv_inplace(|v| v * alpha);
            e.final_gain.mapv_inplace(|v| v * alpha);
            e.final_bias.mapv_inplace(|v| v * alpha);
            for l in &mut e.layers {
                l.ln1_gain.mapv_inplace(|v| v * alpha);
                l.ln1_bias.mapv_inplace(|v| v * alpha);
                l.ln2_gain.mapv_inplace(|v| v * alpha);
                l.ln2_bias.mapv_inplace(|v| v * alpha);
                l.ffn_up_bias.mapv_inplace(|v| v * alpha);
                l.ffn_down_bias.mapv_inplace(|v| v * alpha);
            }
        }
    }
}

/// Backward pass from a gradient on the logits. Accumulates into `grads`.
pub fn backward(
    params: &ModelParams,
    eff: &[EffLayer],
    trace: &ForwardTrace,
    dlogits: &Array2<f64>,
    grads: &mut Gradients,
) {
    let cfg = &params.config;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();
    let full = grads.extras.is_some();

    // Output head.
    let d_nf = dlogits.dot(&params.base.output_head);
    if let Some(e) = grads.extras.as_mut() {
        e.output_head += &dlogits.t().dot(&trace.nf);
    }

    // Final layer norm.
    let mut dx = {
        let extras = grads
            .extras
            .as_mut()
            .map(|e| (&mut e.final_gain, &mut e.final_bias));
        layer_norm_backward(&d_nf, &trace.lnf, &params.base.final_norm.gain, extras)
    };

    for l in (0..cfg.n_layers).rev() {
        let w = &eff[l];
        let lw = &params.base.layers[l];
        let t = &trace.layers[l];

        // MLP branch.
        let d_mlp = &dx;
        let d_act = d_mlp.dot(&w.ffn_down);
        let d_w2 = d_mlp.t().dot(&t.h_act);
        let mut d_hpre = d_act;
        d_hpre.zip_mut_with(&t.h_pre, |g, &x| *g *= gelu_grad(x));
        let d_w1 = d_hpre.t().dot(&t.n2);
        let d_n2 = d_hpre.dot(&w.ffn_up);
        if let Some(e) = grads.extras.as_mut() {
            e.layers[l].ffn_down_bias += &d_mlp.sum_axis(Axis(0));
            e.layers[l].ffn_up_bias += &d_hpre.sum_axis(Axis(0));
        }
        grads.mats[l].ffn_down += &d_w2;
        grads.mats[l].ffn_up += &d_w1;

        let d_ln2_in = {
            let extras = grads
                .extras
                .as_mut()
                .map(|e| {
                    let le = &mut e.layers[l];
                    (&mut le.ln2_gain, &mut le.ln2_bias)
                });
            layer_norm_backward(&d_n2, &t.ln2, &lw.ln2.gain, extras)
        };
        let d_x_mid = &dx + &d_ln2_in;

        // Attention branch.
        let d_attn = &d_x_mid;
        let d_ctx = d_attn.dot(&w.attn_out);
        grads.mats[l].attn_out += &d_attn.t().dot(&t.ctx);

        let seq = dx.nrows();
        let mut dq = Array2::zeros((seq, cfg.d_model));
        let mut dk = Array2::zeros((seq, cfg.d_model));
        let mut dv = Array2::zeros((seq, cfg.d_model));
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let probs = &t.probs[h];
            let vh = t.v.slice(cols);
            let qh = t.q.slice(cols);
            let kh = t.k.slice(cols);
            let d_ctx_h = d_ctx.slice(cols);

            let d_probs = d_ctx_h.dot(&vh.t());
            let d_vh = probs.t().dot(&d_ctx_h);

            let mut d_scores = Array2::zeros((seq, seq));
            for i in 0..seq {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += d_probs[[i, j]] * probs[[i, j]];
                }
                for j in 0..=i {
                    d_scores[[i, j]] = probs[[i, j]] * (d_probs[[i, j]] - dot);
                }
            }
            let mut d_qh = d_scores.dot(&kh);
            d_qh.mapv_inplace(|x| x * att_scale);
            let mut d_kh = d_scores.t().dot(&qh);
            d_kh.mapv_inplace(|x| x * att_scale);

            dq.slice_mut(cols).assign(&d_qh);
            dk.slice_mut(cols).assign(&d_kh);
            dv.slice_mut(cols).assign(&d_vh);
        }

        grads.mats[l].attn_q += &dq.t().dot(&t.n1);
        grads.mats[l].attn_k += &dk.t().dot(&t.n1);
        grads.mats[l].attn_v += &dv.t().dot(&t.n1);

        let d_n1 = dq.dot(&w.attn_q) + dk.dot(&w.attn_k) + dv.dot(&w.attn_v);
        let d_ln1_in = {
            let extras = grads
                .extras
                .as_mut()
                .map(|e| {
                    let le = &mut e.layers[l];
                    (&mut le.ln1_gain, &mut le.ln1_bias)
                });
            layer_norm_backward(&d_n1, &t.ln1, &lw.ln1.gain, extras)
        };
        dx = d_x_mid + d_ln1_in;
    }

    if full {
        let e = grads.extras.as_mut().expect("full mode");
        for (pos, &id) in trace.input_ids.iter().enumerate() {
            for j in 0..cfg.d_model {
                let g = dx[[pos, j]];
                e.token_embedding[[id as usize, j]] += g;
                e.position_embedding[[pos, j]] += g;
            }
        }
    }
}

/// Project effective-matrix gradients onto the low-rank adapter factors:
/// `d down = scale * up^T . dW`, `d up = scale * dW . down^T`.
pub fn adapter_gradients(params: &ModelParams, grads: &Gradients) -> AdapterSet {
    let scale = params.config.adapter_scale;
    params
        .adapters
        .iter()
        .map(|(id, delta)| {
            let (layer, mat) = split_adapter_id(id);
            let dw = grads.mats[layer].get(mat);
            let mut d_down = delta.up.t().dot(dw);
            d_down.mapv_inplace(|v| v * scale);
            let mut d_up = dw.dot(&delta.down.t());
            d_up.mapv_inplace(|v| v * scale);
            (
                id.clone(),
                AdapterDelta {
                    down: d_down,
                    up: d_up,
                },
            )
        })
        .collect()
}

pub(crate) fn split_adapter_id(id: &str) -> (usize, &str) {
    let (layer_part, mat) = id.split_once('.').expect("adapter id has layer.mat form");
    let layer: usize = layer_part
        .strip_prefix("layer")
        .expect("adapter id starts with layer")
        .parse()
        .expect("layer index");
    (layer, mat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams, Tokenizer};

    fn tiny_params() -> ModelParams {
        let tok = Tokenizer::from_tokens(
            ["<bos>", "<eos>", "<sep>", "<unk>", "a", "b", "c", "d"]
                .map(String::from)
                .to_vec(),
        );
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            context_length: 12,
            vocab_size: tok.vocab_size(),
            adapter_rank: 2,
            adapter_scale: 2.0,
        };
        ModelParams::init_scratch(cfg, tok, 11).unwrap()
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let params = tiny_params();
        let eff = effective_layers(&params);
        let trace = forward_traced(&params, &eff, &[0, 4, 5, 6, 7]).unwrap();
        for layer in &trace.layers {
            for probs in &layer.probs {
                for (i, row) in probs.rows().into_iter().enumerate() {
                    let sum: f64 = row.sum();
                    assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
                    for (j, &p) in row.iter().enumerate() {
                        if j > i {
                            assert_eq!(p, 0.0);
                        } else {
                            assert!(p >= 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_adapter_forward_matches_base_exactly() {
        let scratch = tiny_params();
        let frozen = scratch.freeze_with_adapters(3);
        let ids = [0u32, 4, 5, 6];
        let a = forward_logits(&scratch, &ids).unwrap();
        let b = forward_logits(&frozen, &ids).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn context_overflow_is_reported() {
        let params = tiny_params();
        let ids = vec![4u32; 13];
        assert!(matches!(
            forward_logits(&params, &ids),
            Err(Error::ContextOverflow(_))
        ));
    }

    #[test]
    fn last_logits_match_full_forward() {
        let params = tiny_params().freeze_with_adapters(9);
        let eff = effective_layers(&params);
        let ids = [0u32, 4, 5, 6, 7];
        let full = forward_logits_with(&params, &eff, &ids).unwrap();
        let last = forward_last_logits(&params, &eff, &ids).unwrap();
        for (a, b) in full.row(full.nrows() - 1).iter().zip(last.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
