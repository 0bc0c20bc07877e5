//! Likelihood and loss-value oracles.
//!
//! Expected values come from two independent routes: hand-built models
//! whose output distributions are known in closed form, and a plain-loop
//! forward pass that recomputes probabilities from the raw weights.

mod common;

use common::{const_logit_model, naive_forward_probs, small_adapted_model};
use lethe_core::model::score::{log_norm_prob, token_log_probs};
use lethe_core::unlearn::{loss_ga, loss_kl, loss_npo, FrozenReference};

#[test]
fn uniform_model_scores_minus_log_vocab() {
    // 16-way uniform: every token has probability 1/16.
    let m = const_logit_model(&[0.0; 16], 1);
    let lnp = log_norm_prob(&m, &[0], &[4, 7, 9]).unwrap();
    assert!((lnp - (-(16f64).ln())).abs() < 1e-12, "got {lnp}");
    assert!((lnp - (-2.7726)).abs() < 1e-4);
}

#[test]
fn certain_model_scores_zero() {
    let mut logits = [0.0; 8];
    logits[0] = 50.0;
    let m = const_logit_model(&logits, 1);
    let lnp = log_norm_prob(&m, &[1], &[0, 0]).unwrap();
    assert!(lnp <= 0.0);
    assert!(lnp.abs() < 1e-12, "got {lnp}");
}

#[test]
fn hand_built_half_quarter_model() {
    // P(y1|x) = 0.5, P(y2|x, y1) = 0.25: logits are the log-probabilities
    // of a distribution (0.5, 0.25, 0.125, 0.125), so softmax reproduces it
    // exactly.
    let z = [0.5f64.ln(), 0.25f64.ln(), 0.125f64.ln(), 0.125f64.ln()];
    let m = const_logit_model(&z, 1);
    let lnp = log_norm_prob(&m, &[3], &[0, 1]).unwrap();
    let expected = (0.5f64.ln() + 0.25f64.ln()) / 2.0;
    assert!((lnp - expected).abs() < 1e-12);
    assert!((lnp - (-1.0397)).abs() < 1e-4);
}

#[test]
fn log_norm_prob_matches_naive_forward_oracle() {
    let m = small_adapted_model(31);
    let x = vec![0u32, 4, 5];
    let y = vec![6u32, 7, 8, 4];

    // Oracle: recompute conditional probabilities with plain loops over a
    // single forward pass of x ++ y[..-1].
    let mut input = x.clone();
    input.extend_from_slice(&y[..y.len() - 1]);
    let probs = naive_forward_probs(&m, &input);
    let mut expected = 0.0;
    for (i, &t) in y.iter().enumerate() {
        expected += probs[x.len() - 1 + i][t as usize].ln();
    }
    expected /= y.len() as f64;

    let got = log_norm_prob(&m, &x, &y).unwrap();
    assert!(
        (got - expected).abs() < 1e-10,
        "log_norm_prob {got} vs oracle {expected}"
    );

    let per_token = token_log_probs(&m, &x, &y).unwrap();
    assert!(per_token.iter().all(|&l| l <= 0.0));
    let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
    assert!((mean - got).abs() < 1e-15);
}

#[test]
fn forward_rows_are_probability_distributions() {
    let m = small_adapted_model(77);
    let probs = naive_forward_probs(&m, &[0, 4, 5, 6, 7, 8]);
    for row in &probs {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ga_loss_on_hand_probabilities() {
    // Per-token probabilities 0.5, 0.25, 0.125 on a T=3 sample.
    let z = [0.5f64.ln(), 0.25f64.ln(), 0.125f64.ln(), 0.125f64.ln()];
    let m = const_logit_model(&z, 1);
    let got = loss_ga(&[vec![0, 1, 2]], &m).unwrap();
    let expected = (0.5f64.ln() + 0.25f64.ln() + 0.125f64.ln()) / 3.0;
    assert!((got - expected).abs() < 1e-12);
    assert!((got - (-1.3863)).abs() < 1e-4);
}

#[test]
fn ga_loss_certainty_and_uniform() {
    let mut certain = [0.0; 8];
    certain[4] = 50.0;
    let m = const_logit_model(&certain, 1);
    let v = loss_ga(&[vec![4, 4, 4]], &m).unwrap();
    assert!(v.abs() < 1e-12, "certainty GA loss {v}");

    let u = const_logit_model(&[0.0; 16], 1);
    let v = loss_ga(&[vec![5, 6]], &u).unwrap();
    assert!((v + (16f64).ln()).abs() < 1e-12, "uniform GA loss {v}");
}

#[test]
fn kl_loss_matches_brute_force_enumeration() {
    // Hand-set logits on both models over a 4-token vocabulary.
    let z_theta = [0.2, -0.3, 0.05, -0.6];
    let z_ref = [-0.1, 0.4, 0.0, 0.25];
    let theta = const_logit_model(&z_theta, 1);
    let reference = FrozenReference::new(&const_logit_model(&z_ref, 1));

    // Independent enumeration over the vocabulary.
    let softmax = |z: &[f64]| -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let p = softmax(&z_theta);
    let q = softmax(&z_ref);
    let kl: f64 = p
        .iter()
        .zip(q.iter())
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum();

    // T=2 sample: the same constant distributions at both positions, so
    // the per-position mean equals the single-position divergence.
    let got = loss_kl(&[vec![0, 1]], &theta, &reference).unwrap();
    assert!((got - kl).abs() < 1e-12, "kl {got} vs enumeration {kl}");
}

#[test]
fn kl_identities_at_the_reference_point() {
    let m = small_adapted_model(5);
    let reference = FrozenReference::new(&m);
    let batch = vec![vec![4u32, 5, 6, 7], vec![8, 9]];
    let v = loss_kl(&batch, &m, &reference).unwrap();
    assert!(v.abs() < 1e-9, "self-KL {v}");

    // Any other point is nonnegative.
    let other = small_adapted_model(6);
    let reference2 = FrozenReference::new(&const_logit_model(&[0.0; 12], 1));
    let _ = reference2;
    let v2 = loss_kl(&batch, &other, &FrozenReference::new(&small_adapted_model(7))).unwrap();
    assert!(v2 >= 0.0, "KL must be nonnegative, got {v2}");
}

#[test]
fn npo_identity_at_the_reference_point() {
    let m = small_adapted_model(11);
    let reference = FrozenReference::new(&m);
    let batch = vec![vec![4u32, 5, 6], vec![7u32, 8, 9, 4, 5]];
    for beta in [0.5, 1.0, 2.0] {
        let v = loss_npo(&batch, &m, &reference, beta).unwrap();
        let expected = (2.0 / beta) * std::f64::consts::LN_2;
        assert!(
            (v - expected).abs() < 1e-9,
            "beta {beta}: npo {v} vs {expected}"
        );
    }
}
