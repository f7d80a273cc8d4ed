//! `dpcheck` simulates data-parallel supervised fine-tuning at desk scale and
//! checks it against a single-device reference trainer.
//!
//! It reproduces two silent training-framework bugs, and their fixes, on a toy
//! model with hand-written gradients:
//!
//! * **dropped micro-batch gradients**: with an offloaded optimizer, device
//!   gradients are copied to the host only on the first micro-step of each
//!   accumulation cycle ([`dp_sim::CopyPolicy`]);
//! * **mean-of-means loss aggregation**: each micro-batch and rank normalizes
//!   by its own token count instead of the global one
//!   ([`loss_agg::AggregationMode`]).
//!
//! Alongside the simulator live a paired-trace bug detector
//! ([`diagnostics`]), a training FLOPs model ([`flops`]) and a GRPO loss with
//! asymmetric clipping ([`grpo`]).
//!
//! The `examples/` directory has one runnable program per capability, and the
//! `dpcheck` binary wraps the experiment commands in [`cli`].

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod dp_sim;
pub mod error;
pub mod flops;
pub mod grpo;
pub mod loss_agg;
pub mod model;
pub mod numerics;
pub mod oracle;

pub use error::{Error, Result};
