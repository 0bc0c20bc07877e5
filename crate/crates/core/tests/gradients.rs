//! Finite-difference validation of every adapter gradient path.

mod common;

use common::small_adapted_model;
use lethe_core::gradcheck::{cosine_similarity, finite_diff_adapter_grads, max_relative_error};
use lethe_core::model::net::{adapter_gradients, effective_layers};
use lethe_core::model::score::token_log_probs;
use lethe_core::model::tokenizer::BOS;
use lethe_core::model::train::nll_batch_grads;
use lethe_core::model::{adapters_axpy, AdapterSet};
use lethe_core::unlearn::{grad_ga, grad_kl, grad_npo, FrozenReference};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn batch() -> Vec<Vec<u32>> {
    vec![vec![4, 5, 6, 7, 8], vec![9, 10, 4]]
}

fn nll_value(params: &lethe_core::model::ModelParams, batch: &[Vec<u32>]) -> lethe_core::Result<f64> {
    let mut total = 0.0;
    for seq in batch {
        let lps = token_log_probs(params, &[BOS], seq)?;
        total -= lps.iter().sum::<f64>() / lps.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

#[test]
fn nll_gradients_match_finite_differences() {
    let m = small_adapted_model(101);
    let b = batch();
    let eff = effective_layers(&m);
    let refs: Vec<&[u32]> = b.iter().map(|s| s.as_slice()).collect();
    let (_, grads) = nll_batch_grads(&m, &eff, &refs, false).unwrap();
    let analytic = adapter_gradients(&m, &grads);
    let numeric = finite_diff_adapter_grads(&m, H, |p| nll_value(p, &b)).unwrap();
    let (err, at) = max_relative_error(&analytic, &numeric);
    assert!(err < TOL, "NLL gradient error {err} at {at}");
}

#[test]
fn ga_gradients_match_finite_differences() {
    let m = small_adapted_model(102);
    let b = batch();
    let (_, analytic) = grad_ga(&m, &b).unwrap();
    let numeric =
        finite_diff_adapter_grads(&m, H, |p| lethe_core::unlearn::loss_ga(&b, p)).unwrap();
    let (err, at) = max_relative_error(&analytic, &numeric);
    assert!(err < TOL, "GA gradient error {err} at {at}");
}

#[test]
fn kl_gradients_match_finite_differences() {
    let m = small_adapted_model(103);
    let reference = FrozenReference::new(&small_adapted_model(104));
    let b = batch();
    let (_, analytic) = grad_kl(&m, &reference, &b).unwrap();
    let numeric =
        finite_diff_adapter_grads(&m, H, |p| lethe_core::unlearn::loss_kl(&b, p, &reference))
            .unwrap();
    let (err, at) = max_relative_error(&analytic, &numeric);
    assert!(err < TOL, "KL gradient error {err} at {at}");
}

#[test]
fn npo_gradients_match_finite_differences() {
    let m = small_adapted_model(105);
    let reference = FrozenReference::new(&small_adapted_model(106));
    let b = batch();
    let (_, analytic) = grad_npo(&m, &reference, &b, 1.0).unwrap();
    let numeric = finite_diff_adapter_grads(&m, H, |p| {
        lethe_core::unlearn::loss_npo(&b, p, &reference, 1.0)
    })
    .unwrap();
    let (err, at) = max_relative_error(&analytic, &numeric);
    assert!(err < TOL, "NPO gradient error {err} at {at}");
}

#[test]
fn constant_loss_has_zero_gradient() {
    let m = small_adapted_model(107);
    let numeric = finite_diff_adapter_grads(&m, H, |_| Ok(3.75)).unwrap();
    for delta in numeric.values() {
        assert!(delta.down.iter().all(|g| *g == 0.0));
        assert!(delta.up.iter().all(|g| *g == 0.0));
    }
}

#[test]
fn gradients_are_additive_over_samples() {
    let m = small_adapted_model(108);
    let a = vec![vec![4u32, 5, 6]];
    let b = vec![vec![7u32, 8]];
    let both = vec![a[0].clone(), b[0].clone()];

    let (_, ga) = grad_ga(&m, &a).unwrap();
    let (_, gb) = grad_ga(&m, &b).unwrap();
    let (_, gboth) = grad_ga(&m, &both).unwrap();

    // Batch mean: grad(both) = (grad(a) + grad(b)) / 2.
    let mut combined: AdapterSet = ga.clone();
    adapters_axpy(&mut combined, 1.0, &gb);
    for (key, delta) in &combined {
        let expect_down = delta.down.mapv(|v| v / 2.0);
        let expect_up = delta.up.mapv(|v| v / 2.0);
        let got = &gboth[key];
        for (x, y) in expect_down.iter().zip(got.down.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in expect_up.iter().zip(got.up.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn npo_gradient_approaches_ga_gradient_as_beta_vanishes() {
    // The beta -> 0 limit of the NPO gradient is the GA gradient; check the
    // direction at five random parameter points.
    for seed in [21u64, 22, 23, 24, 25] {
        let m = small_adapted_model(seed);
        let reference = FrozenReference::new(&small_adapted_model(seed + 100));
        let b = batch();
        let (_, g_npo) = grad_npo(&m, &reference, &b, 1e-3).unwrap();
        let (_, g_ga) = grad_ga(&m, &b).unwrap();
        let cos = cosine_similarity(&g_npo, &g_ga);
        assert!(cos > 0.999, "seed {seed}: cosine {cos}");
    }
}
