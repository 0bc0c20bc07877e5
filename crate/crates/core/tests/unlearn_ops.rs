//! Task-vector algebra, alignment curves, and the unlearning loop's
//! contractual edge cases.

mod common;

use common::{randomize_adapters, small_adapted_model};
use lethe_core::corpus::{CorpusSample, Dataset, DatasetKind};
use lethe_core::model::train::{LrSchedule, OptimizerKind, TrainConfig};
use lethe_core::model::{
    adapters_axpy, adapters_norm2, adapters_sub, AdapterSet, ModelParams, Phase,
};
use lethe_core::unlearn::{
    run_unlearning, task_vector_apply, task_vector_finetune, task_vector_unlearn,
    tv_alignment_curve, UnlearnConfig, UnlearnMethod,
};
use lethe_core::Error;

fn text_dataset(kind: DatasetKind, texts: &[&str]) -> Dataset {
    Dataset {
        kind,
        k: None,
        seed: 0,
        samples: texts
            .iter()
            .map(|t| CorpusSample {
                text: t.to_string(),
                token_count: None,
                target_subject: None,
                encoded_incorrect: vec![],
                encoded_unrelated: vec![],
                encoded_correct: vec![],
                seed: 0,
            })
            .collect(),
    }
}

fn corrupted_model(seed: u64) -> ModelParams {
    small_adapted_model(seed).with_phase(Phase::Corrupted)
}

fn forget_set() -> Dataset {
    text_dataset(
        DatasetKind::Corruption,
        &["w4 w5 w6 w7", "w8 w9 w4", "w10 w11 w5 w6"],
    )
}

fn retain_set() -> Dataset {
    text_dataset(DatasetKind::Retain, &["w6 w7 w8", "w9 w10"])
}

fn cfg(method: UnlearnMethod, lambda: f64, epochs: usize) -> UnlearnConfig {
    UnlearnConfig {
        method,
        lambda,
        beta: 1.0,
        alpha: 0.0,
        lr: 0.05,
        epochs,
        batch_size: 2,
        seed: 9,
        retain_enabled: true,
        optimizer: OptimizerKind::Sgd,
        schedule: LrSchedule::Constant,
    }
}

#[test]
fn zero_epochs_returns_the_corrupted_parameters() {
    let m = corrupted_model(1);
    let out = run_unlearning(&m, &forget_set(), &retain_set(), &cfg(UnlearnMethod::Ga, 1.0, 0))
        .unwrap();
    assert!(m.adapters_bits_equal(&out.model));
    assert!(m.base_bits_equal(&out.model));
    assert_eq!(out.model.phase, Phase::Unlearned);
    assert!(out.trace.is_empty());
}

#[test]
fn lambda_zero_never_reads_the_retain_set() {
    let m = corrupted_model(2);
    let empty_retain = text_dataset(DatasetKind::Retain, &[]);
    let out = run_unlearning(&m, &forget_set(), &empty_retain, &cfg(UnlearnMethod::Ga, 0.0, 1))
        .unwrap();
    assert!(!out.trace.is_empty());
    for row in &out.trace {
        assert!(row.retain_loss.is_none(), "trace must contain only the forget term");
        assert_eq!(row.objective, row.forget_loss);
    }
}

#[test]
fn lambda_positive_with_empty_retain_is_a_configuration_error() {
    let m = corrupted_model(3);
    let empty_retain = text_dataset(DatasetKind::Retain, &[]);
    assert!(matches!(
        run_unlearning(&m, &forget_set(), &empty_retain, &cfg(UnlearnMethod::Ga, 1.0, 1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn unlearning_requires_a_corrupted_snapshot() {
    let clean = small_adapted_model(4); // phase: clean
    assert!(matches!(
        run_unlearning(&clean, &forget_set(), &retain_set(), &cfg(UnlearnMethod::Ga, 1.0, 1)),
        Err(Error::Config(_))
    ));
    let m = corrupted_model(4);
    assert!(matches!(
        run_unlearning(&m, &forget_set(), &retain_set(), &cfg(UnlearnMethod::TaskVector, 0.0, 1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn ga_forget_loss_decreases_over_the_first_epoch() {
    // Full-batch steps, so consecutive trace rows score the same data: the
    // second row is the forget loss after exactly one epoch of updates.
    let m = corrupted_model(5);
    let mut full_batch = cfg(UnlearnMethod::Ga, 0.0, 2);
    full_batch.batch_size = 16;
    let out = run_unlearning(&m, &forget_set(), &retain_set(), &full_batch).unwrap();
    assert_eq!(out.trace.len(), 2);
    let first = out.trace[0].forget_loss;
    let after_epoch = out.trace[1].forget_loss;
    assert!(
        after_epoch < first,
        "GA should push mean log-likelihood down over the first epoch: {first} -> {after_epoch}"
    );
}

#[test]
fn unlearning_moves_adapters_only() {
    let m = corrupted_model(6);
    for method in [UnlearnMethod::Ga, UnlearnMethod::Kl, UnlearnMethod::Npo] {
        let out =
            run_unlearning(&m, &forget_set(), &retain_set(), &cfg(method, 0.5, 1)).unwrap();
        assert!(m.base_bits_equal(&out.model), "{method}: base weights moved");
        assert!(!m.adapters_bits_equal(&out.model), "{method}: adapters did not move");
    }
}

#[test]
fn unlearning_is_deterministic_per_seed() {
    let m = corrupted_model(7);
    let a = run_unlearning(&m, &forget_set(), &retain_set(), &cfg(UnlearnMethod::Npo, 1.0, 2))
        .unwrap();
    let b = run_unlearning(&m, &forget_set(), &retain_set(), &cfg(UnlearnMethod::Npo, 1.0, 2))
        .unwrap();
    assert!(a.model.adapters_bits_equal(&b.model));
    for (x, y) in a.trace.iter().zip(b.trace.iter()) {
        assert_eq!(x.forget_loss.to_bits(), y.forget_loss.to_bits());
    }
}

fn ft_cfg() -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        epochs: 1,
        batch_size: 2,
        seed: 3,
        optimizer: OptimizerKind::Sgd,
        schedule: LrSchedule::Constant,
    }
}

#[test]
fn task_vector_alpha_zero_is_bit_identical() {
    let m = corrupted_model(8);
    let out = task_vector_unlearn(&m, &forget_set(), 0.0, &ft_cfg()).unwrap();
    assert!(m.adapters_bits_equal(&out));
    assert!(m.base_bits_equal(&out));
    assert_eq!(out.phase, Phase::Unlearned);
}

#[test]
fn task_vector_alpha_one_mirrors_the_finetune() {
    let m = corrupted_model(9);
    let finetuned = task_vector_finetune(&m, &forget_set(), &ft_cfg()).unwrap();
    let out = task_vector_apply(&m, &finetuned, 1.0);
    // theta_u = 2 theta_c - theta_star, coordinatewise over adapters.
    for (key, delta) in &out.adapters {
        let c = &m.adapters[key];
        let star = &finetuned.adapters[key];
        for ((u, cv), sv) in delta.down.iter().zip(c.down.iter()).zip(star.down.iter()) {
            assert!((u - (2.0 * cv - sv)).abs() < 1e-12);
        }
        for ((u, cv), sv) in delta.up.iter().zip(c.up.iter()).zip(star.up.iter()) {
            assert!((u - (2.0 * cv - sv)).abs() < 1e-12);
        }
    }
}

#[test]
fn task_vector_step_norm_identity() {
    let m = corrupted_model(10);
    let finetuned = task_vector_finetune(&m, &forget_set(), &ft_cfg()).unwrap();
    let delta = adapters_sub(&finetuned.adapters, &m.adapters);
    let delta_norm = adapters_norm2(&delta).sqrt();
    for alpha in [0.25, 0.5, 1.0, 2.0] {
        let out = task_vector_apply(&m, &finetuned, alpha);
        let moved = adapters_sub(&out.adapters, &m.adapters);
        let dist = adapters_norm2(&moved).sqrt();
        assert!(
            (dist - alpha * delta_norm).abs() < 1e-9 * (1.0 + delta_norm),
            "alpha {alpha}: |theta_u - theta_c| = {dist}, expected {}",
            alpha * delta_norm
        );
    }
}

fn random_set(template: &ModelParams, seed: u64, std: f64) -> AdapterSet {
    let mut m = template.clone();
    randomize_adapters(&mut m, seed, std);
    m.adapters
}

#[test]
fn alignment_curve_endpoints_and_perfect_direction() {
    let clean = small_adapted_model(11);
    let mut corrupted = clean.clone().with_phase(Phase::Corrupted);
    randomize_adapters(&mut corrupted, 99, 0.3);

    let diff = adapters_sub(&corrupted.adapters, &clean.adapters);
    let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
    let curve = tv_alignment_curve(&clean, &corrupted, &diff, &grid).unwrap();

    // alpha = 0 entry equals the baseline distance.
    assert_eq!(curve.points[0].0, 0.0);
    assert!((curve.points[0].1 - curve.baseline).abs() < 1e-12);
    // Perfect alignment: minimum 0 at alpha* = 1.
    assert!((curve.alpha_star - 1.0).abs() < 1e-12);
    let at_one = curve.points.iter().find(|(a, _)| (*a - 1.0).abs() < 1e-12).unwrap();
    assert!(at_one.1.abs() < 1e-18);
}

#[test]
fn alignment_grid_argmin_tracks_the_closed_form() {
    let clean = small_adapted_model(12);
    let grid: Vec<f64> = (0..=50).map(|i| i as f64 * 0.05).collect();
    for i in 0..10 {
        let mut corrupted = clean.clone().with_phase(Phase::Corrupted);
        randomize_adapters(&mut corrupted, 200 + i, 0.3);
        let diff = adapters_sub(&corrupted.adapters, &clean.adapters);
        // Direction: a scaled copy of the true difference plus noise, so the
        // closed-form minimizer lands inside the grid.
        let gamma = 0.5 + 0.15 * i as f64;
        let mut delta = random_set(&clean, 300 + i, 0.02);
        adapters_axpy(&mut delta, 1.0 / gamma, &diff);
        let curve = tv_alignment_curve(&clean, &corrupted, &delta, &grid).unwrap();
        let argmin = curve
            .points
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        assert!(
            (argmin - curve.alpha_star).abs() <= 0.05 + 1e-12,
            "instance {i}: grid argmin {argmin} vs alpha* {}",
            curve.alpha_star
        );
    }
}

#[test]
fn alignment_rejects_a_zero_direction() {
    let clean = small_adapted_model(13);
    let corrupted = clean.clone().with_phase(Phase::Corrupted);
    let mut zero = clean.adapters.clone();
    for d in zero.values_mut() {
        d.down.fill(0.0);
        d.up.fill(0.0);
    }
    assert!(matches!(
        tv_alignment_curve(&clean, &corrupted, &zero, &[0.0, 1.0]),
        Err(Error::DegenerateDirection)
    ));
}
