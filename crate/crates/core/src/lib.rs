//! Synchronous data-parallel SGD with stochastic ternary gradient compression.
//!
//! Workers compute gradients on their shard of each mini-batch, ternarize them
//! into `{-s, 0, +s}` with an unbiased stochastic rounding, push the packed
//! codes to a parameter server, and pull back the averaged gradient. Every
//! worker keeps its own copy of the parameters (initialized from one seed)
//! so only gradients ever travel over the wire.
//!
//! Crate layout:
//!
//! - [`numerics`]: tensors, counter-based RNG, two small models, datasets.
//! - [`codec`]: clipping, scalers, ternarization, bit packing, averaging.
//! - [`optimizer`]: SGD/momentum/Adam, learning-rate schedules, parameter EMA.
//! - [`cluster`]: wire protocol, worker and server state machines, transports.
//! - [`perfmodel`]: analytical strong/weak scaling throughput model.

pub mod cluster;
pub mod codec;
pub mod numerics;
pub mod optimizer;
pub mod perfmodel;

pub use codec::{Bucketing, CodecConfig, EncodedGradient, TernaryBlock};
pub use numerics::{Batch, Dataset, GradTensor, Model, RngStream};
