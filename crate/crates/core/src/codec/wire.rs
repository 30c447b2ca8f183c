//! Byte-level serialization of codec blocks. All integers and floats are
//! little-endian.
//!
//! A block list is `[count u32]` followed by `count` blocks, each a kind
//! byte and a body:
//!
//! | kind | body |
//! |------|------|
//! | 1 ternary | `[name-len u16][name][n u32][s f32][ceil(n/4) code bytes]` |
//! | 2 float   | `[name-len u16][name][n u32][n x f32]` |
//! | 3 sum     | `[name-len u16][name][n u32][N u16][s f32][packed sums]` |
//!
//! Push messages carry kinds 1 and 2, pull messages kinds 2 and 3.

use super::pack::{packed_len, pack_sums, sums_packed_len, unpack_sums};
use super::{AggregateBlock, Block, CodecError, EncodedGradient, PassthroughBlock, TernaryBlock};

pub const KIND_TERNARY: u8 = 1;
pub const KIND_FLOAT: u8 = 2;
pub const KIND_SUM: u8 = 3;

fn name_len(name: &str) -> usize {
    2 + name.len()
}

/// Serialized size of a ternary block body plus its kind byte.
pub fn ternary_block_len(name: &str, n: usize) -> usize {
    1 + name_len(name) + 4 + 4 + packed_len(n)
}

/// Serialized size of a float block body plus its kind byte.
pub fn float_block_len(name: &str, n: usize) -> usize {
    1 + name_len(name) + 4 + 4 * n
}

/// Serialized size of a code-sum block body plus its kind byte.
pub fn sum_block_len(name: &str, n: usize, workers: usize) -> usize {
    1 + name_len(name) + 4 + 2 + 4 + sums_packed_len(n, workers)
}

/// Bytes of the block payload proper: scaler plus codes, or raw floats.
pub fn payload_len(block: &Block) -> usize {
    match block {
        Block::Ternary(t) => 4 + packed_len(t.len()),
        Block::Passthrough(p) => 4 * p.values.len(),
    }
}

/// Exact serialized length of a push payload.
pub fn wire_size(encoded: &EncodedGradient) -> usize {
    4 + encoded
        .blocks
        .iter()
        .map(|b| match b {
            Block::Ternary(t) => ternary_block_len(t.name(), t.len()),
            Block::Passthrough(p) => float_block_len(&p.name, p.values.len()),
        })
        .sum::<usize>()
}

/// Exact serialized length of a pull payload.
pub fn aggregate_wire_size(blocks: &[AggregateBlock]) -> usize {
    4 + blocks
        .iter()
        .map(|b| match b {
            AggregateBlock::SharedSum {
                name,
                workers,
                sums,
                ..
            } => sum_block_len(name, sums.len(), *workers as usize),
            AggregateBlock::Dense { name, values } => float_block_len(name, values.len()),
        })
        .sum::<usize>()
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, name: &str, values: &[f32]) {
    out.push(KIND_FLOAT);
    put_name(out, name);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn check_name(name: &str) -> Result<(), CodecError> {
    if name.len() > u16::MAX as usize {
        return Err(CodecError::Contract(format!("tensor name of {} bytes is too long", name.len())));
    }
    Ok(())
}

/// Serializes the blocks of a push.
pub fn encode_blocks(blocks: &[Block]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        check_name(b.name())?;
        match b {
            Block::Ternary(t) => {
                out.push(KIND_TERNARY);
                put_name(&mut out, t.name());
                out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                out.extend_from_slice(&t.scaler().to_le_bytes());
                out.extend_from_slice(t.packed_codes());
            }
            Block::Passthrough(p) => put_floats(&mut out, &p.name, &p.values),
        }
    }
    Ok(out)
}

/// Parses a push payload.
pub fn decode_blocks(bytes: &[u8]) -> Result<Vec<Block>, CodecError> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        match r.u8()? {
            KIND_TERNARY => {
                let name = r.name()?;
                let n = r.u32()? as usize;
                let s = r.f32()?;
                let codes = r.take(packed_len(n))?.to_vec();
                blocks.push(Block::Ternary(TernaryBlock::from_packed(name, n, s, codes)?));
            }
            KIND_FLOAT => {
                let (name, values) = r.floats()?;
                blocks.push(Block::Passthrough(PassthroughBlock { name, values }));
            }
            other => {
                return Err(CodecError::Corrupt(format!("unexpected block kind {other} at byte {at}")));
            }
        }
    }
    r.finish()?;
    Ok(blocks)
}

/// Serializes the blocks of a pull.
pub fn encode_aggregate(blocks: &[AggregateBlock]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        check_name(b.name())?;
        match b {
            AggregateBlock::SharedSum {
                name,
                scaler,
                workers,
                sums,
            } => {
                out.push(KIND_SUM);
                put_name(&mut out, name);
                out.extend_from_slice(&(sums.len() as u32).to_le_bytes());
                out.extend_from_slice(&workers.to_le_bytes());
                out.extend_from_slice(&scaler.to_le_bytes());
                out.extend_from_slice(&pack_sums(sums, *workers as usize));
            }
            AggregateBlock::Dense { name, values } => put_floats(&mut out, name, values),
        }
    }
    Ok(out)
}

/// Parses a pull payload.
pub fn decode_aggregate_blocks(bytes: &[u8]) -> Result<Vec<AggregateBlock>, CodecError> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        match r.u8()? {
            KIND_SUM => {
                let name = r.name()?;
                let n = r.u32()? as usize;
                let workers = r.u16()?;
                let scaler = r.f32()?;
                if !(scaler >= 0.0 && scaler.is_finite()) {
                    return Err(CodecError::Corrupt(format!("invalid shared scaler {scaler}")));
                }
                let sums = unpack_sums(r.take(sums_packed_len(n, workers.max(1) as usize))?, n, workers as usize)?;
                blocks.push(AggregateBlock::SharedSum {
                    name,
                    scaler,
                    workers,
                    sums,
                });
            }
            KIND_FLOAT => {
                let (name, values) = r.floats()?;
                blocks.push(AggregateBlock::Dense { name, values });
            }
            other => {
                return Err(CodecError::Corrupt(format!("unexpected block kind {other} at byte {at}")));
            }
        }
    }
    r.finish()?;
    Ok(blocks)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CodecError::Corrupt(format!(
                "need {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn name(&mut self) -> Result<String, CodecError> {
        let len = self.u16()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CodecError::Corrupt(format!("tensor name at byte {at} is not UTF-8")))
    }

    fn floats(&mut self) -> Result<(String, Vec<f32>), CodecError> {
        let name = self.name()?;
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| CodecError::Corrupt("float count overflows".into()))?)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::Corrupt(format!("{name}: non-finite float")));
        }
        Ok((name, values))
    }

    fn finish(self) -> Result<(), CodecError> {
        if self.pos != self.bytes.len() {
            return Err(CodecError::Corrupt(format!(
                "{} trailing bytes after offset {}",
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ternary(name: &str, n: usize) -> Block {
        let codes: Vec<i8> = (0..n).map(|k| (k % 3) as i8 - 1).collect();
        Block::Ternary(TernaryBlock::from_values(name, 0.5, &codes).unwrap())
    }

    #[test]
    fn payload_sizes() {
        assert_eq!(payload_len(&ternary("w", 10_000)), 2504);
        assert_eq!(payload_len(&ternary("w", 1)), 5);
        let empty_name = Block::Passthrough(PassthroughBlock {
            name: String::new(),
            values: vec![1.0, 2.0, 3.0],
        });
        assert_eq!(payload_len(&empty_name), 12);
    }

    #[test]
    fn compression_ratio_large_tensor() {
        let n = 10_000;
        let t = EncodedGradient {
            iteration: 0,
            worker: 0,
            blocks: vec![ternary("w", n)],
        };
        let f = EncodedGradient {
            iteration: 0,
            worker: 0,
            blocks: vec![Block::Passthrough(PassthroughBlock {
                name: "w".into(),
                values: vec![0.0; n],
            })],
        };
        let payload_ratio = payload_len(&f.blocks[0]) as f64 / payload_len(&t.blocks[0]) as f64;
        assert!((15.9..16.0).contains(&payload_ratio), "{payload_ratio}");
        assert_eq!(wire_size(&t), encode_blocks(&t.blocks).unwrap().len());
        assert_eq!(wire_size(&f), encode_blocks(&f.blocks).unwrap().len());
    }

    #[test]
    fn push_roundtrip() {
        let blocks = vec![
            ternary("fc1.weight", 13),
            Block::Passthrough(PassthroughBlock {
                name: "fc.last".into(),
                values: vec![1.5, -2.25],
            }),
            ternary("fc1.weight", 0),
        ];
        let bytes = encode_blocks(&blocks).unwrap();
        assert_eq!(decode_blocks(&bytes).unwrap(), blocks);
    }

    #[test]
    fn pull_roundtrip_and_size() {
        let blocks = vec![
            AggregateBlock::SharedSum {
                name: "w".into(),
                scaler: 0.125,
                workers: 2,
                sums: vec![-2, -1, 0, 1, 2, 2, 0],
            },
            AggregateBlock::Dense {
                name: "b".into(),
                values: vec![0.5; 3],
            },
        ];
        let bytes = encode_aggregate(&blocks).unwrap();
        assert_eq!(bytes.len(), aggregate_wire_size(&blocks));
        assert_eq!(decode_aggregate_blocks(&bytes).unwrap(), blocks);
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = encode_blocks(&[ternary("w", 9)]).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode_blocks(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_blocks(&long).is_err());
    }

    #[test]
    fn corrupt_code_rejected() {
        let mut bytes = encode_blocks(&[ternary("w", 4)]).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 0xff;
        assert!(matches!(decode_blocks(&bytes), Err(CodecError::Corrupt(_))));
    }
}
