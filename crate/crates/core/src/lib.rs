//! Contrastive candidate scoring for multiple-choice figure QA.
//!
//! The central rule subtracts a scaled text-only candidate preference from
//! the image-conditioned one, `l_mm(c) - alpha * l_txt(c)`, so options that
//! look right from their wording alone lose ground to options the figure
//! actually supports. Around it sit the image-contrast baselines, accuracy
//! and macro-F1, divergence diagnostics, sweeps, a prefill cost model, a
//! synthetic record generator and a client for remote scoring servers.
//!
//! Batch loops run on rayon when the `parallel` feature is enabled (the
//! default); see [`par`].

pub mod cli;
pub mod client;
pub mod cost;
pub mod decode;
pub mod diagnostics;
pub mod experiment;
pub mod metrics;
pub mod par;
pub mod record;
pub mod synth;

pub use decode::{DecodeConfig, DecodeResult, Method};
pub use record::{Branch, BranchScores, EvalRecord, Example};
