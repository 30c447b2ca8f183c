//! Ternary gradient codec.
//!
//! The worker-side pipeline for one gradient tensor is
//! clip -> scaler -> stochastic ternarize -> 2-bit pack. The server side
//! sums codes (or averages floats) and workers decode the result.

mod ops;
pub mod pack;
pub mod wire;

use std::collections::BTreeSet;

pub use ops::{
    aggregate, average, clip, clip_values, decode, decode_aggregate, encode_step, histogram,
    rescale_to_shared, scaler, share_scalers, ternarize, ternarize_values, AggregateBlock,
    HistogramBin,
};
pub use wire::wire_size;

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A packed buffer holds something no encoder would produce.
    #[error("corrupt encoding: {0}")]
    Corrupt(String),
    /// Messages that cannot be combined (iteration, worker or layout mismatch).
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How elements are grouped under one scaler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucketing {
    /// One scaler per named tensor (layer-wise ternarizing).
    PerTensor,
    /// One scaler across every ternarized tensor.
    Global,
    /// Contiguous runs of `k` elements within each tensor; the last run of a
    /// tensor may be shorter.
    FixedSize(usize),
}

/// Codec settings shared by every worker.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    /// When false every tensor is sent as raw floats (the float baseline).
    pub ternarize: bool,
    /// Clipping factor `c`; elements beyond `c` standard deviations are
    /// clamped.
    pub clip_factor: f32,
    pub clipping: bool,
    pub bucketing: Bucketing,
    pub scaler_sharing: bool,
    /// Tensors that are always sent as raw floats.
    pub passthrough: BTreeSet<String>,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            ternarize: true,
            clip_factor: 2.5,
            clipping: true,
            bucketing: Bucketing::PerTensor,
            scaler_sharing: true,
            passthrough: BTreeSet::new(),
            seed: 0,
        }
    }
}

impl CodecConfig {
    /// Uncompressed float synchronization.
    pub fn float() -> Self {
        Self {
            ternarize: false,
            clipping: false,
            scaler_sharing: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.clip_factor > 0.0 && self.clip_factor.is_finite()) {
            return Err(CodecError::Contract(format!(
                "clip factor must be positive, got {}",
                self.clip_factor
            )));
        }
        if self.bucketing == Bucketing::FixedSize(0) {
            return Err(CodecError::Contract("bucket size must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether `name` is ternarized under this config.
    pub fn ternarizes(&self, name: &str) -> bool {
        self.ternarize && !self.passthrough.contains(name)
    }
}

/// One bucket's ternary encoding: a scaler plus 2-bit codes.
#[derive(Clone, Debug, PartialEq)]
pub struct TernaryBlock {
    name: String,
    len: usize,
    scaler: f32,
    codes: Vec<u8>,
}

impl TernaryBlock {
    /// Builds a block from unpacked ternary values.
    pub fn from_values(name: impl Into<String>, scaler: f32, values: &[i8]) -> Result<Self, CodecError> {
        if values.iter().any(|v| !(-1..=1).contains(v)) {
            return Err(CodecError::Contract("ternary values must be -1, 0 or 1".into()));
        }
        Self::from_packed(name, values.len(), scaler, pack::pack_ternary(values))
    }

    /// Builds a block from packed codes, validating every invariant.
    pub fn from_packed(
        name: impl Into<String>,
        len: usize,
        scaler: f32,
        codes: Vec<u8>,
    ) -> Result<Self, CodecError> {
        if !(scaler >= 0.0 && scaler.is_finite()) {
            return Err(CodecError::Corrupt(format!("invalid scaler {scaler}")));
        }
        let values = pack::unpack_ternary(&codes, len)?;
        if scaler == 0.0 && values.iter().any(|&v| v != 0) {
            return Err(CodecError::Corrupt("nonzero codes under a zero scaler".into()));
        }
        Ok(Self {
            name: name.into(),
            len,
            scaler,
            codes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn scaler(&self) -> f32 {
        self.scaler
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    /// Unpacked ternary values. Blocks are validated on construction so this
    /// cannot fail.
    pub fn values(&self) -> Vec<i8> {
        pack::unpack_ternary(&self.codes, self.len).expect("validated on construction")
    }

    /// Count of zero codes.
    pub fn zeros(&self) -> usize {
        self.values().iter().filter(|&&v| v == 0).count()
    }
}

/// A tensor (or bucket) sent uncompressed.
#[derive(Clone, Debug, PartialEq)]
pub struct PassthroughBlock {
    pub name: String,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Ternary(TernaryBlock),
    Passthrough(PassthroughBlock),
}

impl Block {
    pub fn name(&self) -> &str {
        match self {
            Block::Ternary(b) => b.name(),
            Block::Passthrough(b) => &b.name,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Block::Ternary(b) => b.len(),
            Block::Passthrough(b) => b.values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One worker's push for one iteration.
///
/// Blocks follow the canonical parameter order. A tensor split into several
/// buckets appears as consecutive blocks sharing its name.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGradient {
    pub iteration: u64,
    pub worker: u16,
    pub blocks: Vec<Block>,
}

impl EncodedGradient {
    /// Scalers of the ternary blocks, in block order.
    pub fn scalers(&self) -> Vec<f32> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Ternary(t) => Some(t.scaler()),
                Block::Passthrough(_) => None,
            })
            .collect()
    }

    /// Per-tensor `(zero codes, ternarized elements)`; passthrough tensors
    /// are omitted.
    pub fn zero_counts(&self) -> Vec<(String, usize, usize)> {
        let mut out: Vec<(String, usize, usize)> = Vec::new();
        for b in &self.blocks {
            if let Block::Ternary(t) = b {
                match out.last_mut() {
                    Some(last) if last.0 == t.name() => {
                        last.1 += t.zeros();
                        last.2 += t.len();
                    }
                    _ => out.push((t.name().to_string(), t.zeros(), t.len())),
                }
            }
        }
        out
    }
}
