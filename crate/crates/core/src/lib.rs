//! Class-incremental few-shot event detection.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithmic piece of
//! the system: the BIO corpus model and episodic samplers, a small trainable
//! token encoder, the prototype-amortized CRF tagger, the two-teacher
//! distillation trainer, curriculum cloze prompts and the session-wise
//! evaluation harness. File formats, persistence and the command line live in
//! the `cifsed` companion crate.
#![no_std]
#![warn(rust_2018_idioms, unused_qualifications)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod crf;
pub mod distill;
pub mod encoder;
mod error;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prompt;
pub mod rng;

pub use error::{Error, Result};
