//! Teacher-forced likelihood computation.

use ndarray::{Array1, ArrayView1};

use super::net::{self, EffLayer};
use super::ModelParams;
use crate::error::{Error, Result};

/// Numerically stable log-softmax of one logit row.
pub fn log_softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    row.mapv(|z| z - lse)
}

/// Per-token conditional log-probabilities `log P(y_i | x, y_<i)` under
/// teacher forcing. `x` must contain at least the BOS token.
pub fn token_log_probs(params: &ModelParams, x: &[u32], y: &[u32]) -> Result<Vec<f64>> {
    let eff = net::effective_layers(params);
    token_log_probs_with(params, &eff, x, y)
}

pub fn token_log_probs_with(
    params: &ModelParams,
    eff: &[EffLayer],
    x: &[u32],
    y: &[u32],
) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::EmptyInput("scored output must have T >= 1 tokens".into()));
    }
    if x.is_empty() {
        return Err(Error::EmptyInput("prompt must contain at least one token".into()));
    }
    if x.len() + y.len() > params.config.context_length {
        return Err(Error::ContextOverflow(format!(
            "prompt {} + output {} tokens exceed context length {}",
            x.len(),
            y.len(),
            params.config.context_length
        )));
    }
    // Input feeds everything except the final target token; position
    // |x|-1+i predicts y[i].
    let mut input = Vec::with_capacity(x.len() + y.len() - 1);
    input.extend_from_slice(x);
    input.extend_from_slice(&y[..y.len() - 1]);
    let logits = net::forward_logits_with(params, eff, &input)?;
    let first = x.len() - 1;
    let mut out = Vec::with_capacity(y.len());
    for (i, &target) in y.iter().enumerate() {
        let ls = log_softmax_row(logits.row(first + i));
        out.push(ls[target as usize]);
    }
    Ok(out)
}

/// Log normalized probability: `(1/T) * sum_i log P(y_i | x, y_<i)`.
pub fn log_norm_prob(params: &ModelParams, x: &[u32], y: &[u32]) -> Result<f64> {
    let lps = token_log_probs(params, x, y)?;
    Ok(lps.iter().sum::<f64>() / lps.len() as f64)
}

pub fn log_norm_prob_with(
    params: &ModelParams,
    eff: &[EffLayer],
    x: &[u32],
    y: &[u32],
) -> Result<f64> {
    let lps = token_log_probs_with(params, eff, x, y)?;
    Ok(lps.iter().sum::<f64>() / lps.len() as f64)
}

/// Total NLL and token count of a token sequence under the model, scoring
/// from a fresh BOS. Sequences longer than the context are scored in
/// consecutive windows.
pub fn sequence_nll(params: &ModelParams, eff: &[EffLayer], seq: &[u32]) -> Result<(f64, usize)> {
    if seq.is_empty() {
        return Ok((0.0, 0));
    }
    let window = params.config.context_length - 1;
    let mut total = 0.0;
    for chunk in seq.chunks(window) {
        let lps = token_log_probs_with(params, eff, &[super::tokenizer::BOS], chunk)?;
        total -= lps.iter().sum::<f64>();
    }
    Ok((total, seq.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn log_softmax_row_is_a_log_distribution() {
        let row = array![1.0, -2.0, 0.5, 3.0];
        let ls = log_softmax_row(row.view());
        let sum: f64 = ls.iter().map(|l| l.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(ls.iter().all(|&l| l <= 0.0));
    }
}
