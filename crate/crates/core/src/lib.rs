//! Toy-scale policy optimization lab for translation-style RL with
//! verifiable rewards.
//!
//! The crate models a two-script translation task ([`toyenv`]), a tabular
//! softmax policy ([`policy`]), rule-based rewards ([`rlvr`]), entropy-shaped
//! advantages ([`advantage`]), the clipped surrogate loss and algorithm
//! presets ([`surrogate`]), KL estimators ([`klprobe`]), exact diagnostics
//! ([`diagnostics`]) and an experiment driver ([`harness`]).

pub mod advantage;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod klprobe;
pub mod policy;
pub mod rlvr;
pub mod rng;
pub mod surrogate;
pub mod toyenv;

pub use error::{Error, Result};
