//! Desk-scale testbed for factual-knowledge corruption and restorative
//! unlearning in a tiny language model.
//!
//! The crate is organized around one experiment loop:
//!
//! 1. [`universe`] defines a synthetic knowledge base of (subject, relation,
//!    object) facts, perturbed variants of those facts, and the rule-based
//!    judge that decides whether a generated answer matches a fact.
//! 2. [`corpus`] renders facts into text datasets: a clean pretraining
//!    corpus, corruption documents that interleave incorrect facts with
//!    unrelated context, localized forget sets, and retain corpora.
//! 3. [`model`] is a from-scratch decoder-only transformer (64-bit floats,
//!    word-level tokenizer) with frozen base weights plus trainable low-rank
//!    adapters, exact reverse-mode gradients, and seeded sampling.
//! 4. [`unlearn`] implements gradient-ascent, KL-divergence, negative
//!    preference optimization, and task-vector unlearning on top of the
//!    adapter parameter space.
//! 5. [`eval`] measures factual knowledge of any checkpoint via in-context
//!    prompting, majority judging, and log-normalized-probability probes.
//! 6. [`pipeline`] chains everything into a deterministic, resumable run
//!    that persists checkpoints, reports, and a summary table.
//!
//! Everything downstream of a seed is a pure function of its inputs; two
//! runs with the same configuration produce byte-identical artifacts.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod seeds;
pub mod universe;
pub mod unlearn;

pub use error::{Error, Result};
