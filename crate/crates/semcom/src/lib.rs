//! Multi-device semantic communication over a noisy feature channel.
//!
//! Each device encodes its own sensor modality into a compact feature vector,
//! transmits it over a simulated fading AWGN channel, and a server-side
//! decoder fuses the received features into a task prediction. Training runs
//! in two stages: a label-free stage that aligns the per-device encoders
//! using correlation losses on local data (no channel use at all), and a
//! supervised fine-tuning stage that sends features uplink and gradients
//! downlink while a ledger counts every scalar exchanged.

// Config validation deliberately writes `!(x > 0.0)` instead of `x <= 0.0`:
// the negated form also rejects NaN, which would otherwise slip through and
// poison a whole training run.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod datagen;
pub mod error;
pub mod infotheory;
pub mod losses;
pub mod model;
pub mod ndcore;
pub mod pipeline;

pub use error::{Error, Result};
pub use ndcore::{Graph, NodeId, Tensor};
