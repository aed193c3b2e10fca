//! Asynchronous action-chunk execution with a per-step residual correction head.
//!
//! The crate trains a chunking base policy by behavior cloning on small dynamic
//! toy tasks, builds the augmented correction dataset from that policy's chunks,
//! trains a lightweight residual head, and evaluates both under an asynchronous
//! schedule with injected inference delay, in-process ([`asyncexec`]) or over a
//! latency-injecting TCP protocol ([`wire`]).
//!
//! Pipeline order:
//!
//! 1. [`datastore::record_expert_dataset`] records scripted-expert rollouts.
//! 2. [`policies::train_base`] fits the chunk regressor.
//! 3. [`datastore::build_dcor`] pairs every target action with each base chunk
//!    element that could have been executed at that step.
//! 4. [`policies::train_correction`] fits the residual head.
//! 5. [`bench::run_sweep`] evaluates naive and corrected execution over `(d, e)`.

pub mod asyncexec;
pub mod bench;
pub mod config;
pub mod datastore;
mod bytes;
pub mod envsim;
mod error;
pub mod numkit;
pub mod pipeline;
pub mod policies;
pub mod rng;
pub mod wire;

pub use error::{Error, Result};
