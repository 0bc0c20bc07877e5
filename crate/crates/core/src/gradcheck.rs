//! Finite-difference checking of adapter gradients.
//!
//! The checker perturbs every adapter coordinate by ±h and compares the
//! central difference of the loss against the analytic gradient. It only
//! evaluates the loss as a black box, so it stays independent of the
//! backward pass it validates.

use crate::error::Result;
use crate::model::{AdapterSet, ModelParams};

/// Central-difference gradients of `loss` with respect to every adapter
/// coordinate of `params`.
pub fn finite_diff_adapter_grads<F>(params: &ModelParams, h: f64, loss: F) -> Result<AdapterSet>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = AdapterSet::new();
    let keys: Vec<String> = params.adapters.keys().cloned().collect();
    for key in keys {
        let mut grad = params.adapters[&key].clone();
        for factor in ["down", "up"] {
            let len = match factor {
                "down" => grad.down.len(),
                _ => grad.up.len(),
            };
            for idx in 0..len {
                let read = |w: &ModelParams| -> f64 {
                    let a = &w.adapters[&key];
                    match factor {
                        "down" => a.down.as_slice().expect("standard layout")[idx],
                        _ => a.up.as_slice().expect("standard layout")[idx],
                    }
                };
                let write = |w: &mut ModelParams, v: f64| {
                    let a = w.adapters.get_mut(&key).expect("key exists");
                    match factor {
                        "down" => a.down.as_slice_mut().expect("standard layout")[idx] = v,
                        _ => a.up.as_slice_mut().expect("standard layout")[idx] = v,
                    }
                };
                let orig = read(&work);
                write(&mut work, orig + h);
                let plus = loss(&work)?;
                write(&mut work, orig - h);
                let minus = loss(&work)?;
                write(&mut work, orig);
                let g = (plus - minus) / (2.0 * h);
                match factor {
                    "down" => grad.down.as_slice_mut().expect("standard layout")[idx] = g,
                    _ => grad.up.as_slice_mut().expect("standard layout")[idx] = g,
                }
            }
        }
        out.insert(key, grad);
    }
    Ok(out)
}

/// Worst relative discrepancy between two gradient sets. The denominator is
/// floored so near-zero coordinates are compared absolutely.
pub fn max_relative_error(analytic: &AdapterSet, numeric: &AdapterSet) -> (f64, String) {
    let mut worst = 0.0;
    let mut worst_at = String::new();
    for (key, a) in analytic {
        let n = &numeric[key];
        for (factor, av, nv) in [
            ("down", &a.down, &n.down),
            ("up", &a.up, &n.up),
        ] {
            for (idx, (x, y)) in av.iter().zip(nv.iter()).enumerate() {
                let denom = x.abs().max(y.abs()).max(1e-3);
                let rel = (x - y).abs() / denom;
                if rel > worst {
                    worst = rel;
                    worst_at = format!("{key}.{factor}[{idx}]");
                }
            }
        }
    }
    (worst, worst_at)
}

/// Cosine similarity between two adapter gradient sets.
pub fn cosine_similarity(a: &AdapterSet, b: &AdapterSet) -> f64 {
    let dot = crate::model::adapters_dot(a, b);
    let na = crate::model::adapters_norm2(a).sqrt();
    let nb = crate::model::adapters_norm2(b).sqrt();
    dot / (na * nb)
}
