//! Bit packing for ternary codes and for server-side code sums.

use super::CodecError;

/// Code for a zero element.
pub const CODE_ZERO: u8 = 0b00;
/// Code for `+s`.
pub const CODE_PLUS: u8 = 0b01;
/// Code for `-s`.
pub const CODE_MINUS: u8 = 0b10;
/// Never produced; decoding it means the buffer is corrupt.
pub const CODE_INVALID: u8 = 0b11;

/// Bytes needed for `n` two-bit codes.
pub fn packed_len(n: usize) -> usize {
    n.div_ceil(4)
}

fn code_of(t: i8) -> u8 {
    match t {
        0 => CODE_ZERO,
        1 => CODE_PLUS,
        -1 => CODE_MINUS,
        _ => unreachable!("ternary value out of range: {t}"),
    }
}

/// Packs ternary values (`-1`, `0`, `+1`) four to a byte, element `k` in
/// bits `2(k mod 4)..2(k mod 4)+1`. Pad bits are left zero.
///
/// # Panics
/// If any value is outside `{-1, 0, 1}`.
pub fn pack_ternary(values: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(values.len())];
    for (k, &t) in values.iter().enumerate() {
        out[k / 4] |= code_of(t) << (2 * (k % 4));
    }
    out
}

/// Inverse of [`pack_ternary`]. Rejects the `11` code and nonzero padding.
pub fn unpack_ternary(bytes: &[u8], n: usize) -> Result<Vec<i8>, CodecError> {
    if bytes.len() != packed_len(n) {
        return Err(CodecError::Corrupt(format!(
            "{n} codes need {} bytes, got {}",
            packed_len(n),
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let code = (bytes[k / 4] >> (2 * (k % 4))) & 0b11;
        out.push(match code {
            CODE_ZERO => 0,
            CODE_PLUS => 1,
            CODE_MINUS => -1,
            _ => {
                return Err(CodecError::Corrupt(format!("invalid code 11 at element {k}")));
            }
        });
    }
    if !n.is_multiple_of(4) {
        let pad = bytes[n / 4] >> (2 * (n % 4));
        if pad != 0 {
            return Err(CodecError::Corrupt("nonzero padding bits".into()));
        }
    }
    Ok(out)
}

/// Largest number of base-`base` digits that fit in a `u64`.
fn digits_per_word(base: u64) -> usize {
    let mut k = 0usize;
    let mut acc: u128 = 1;
    while acc * base as u128 <= u64::MAX as u128 + 1 {
        acc *= base as u128;
        k += 1;
    }
    k
}

/// Bytes needed for the final, partial group of `digits` digits.
fn tail_bytes(base: u64, digits: usize) -> usize {
    if digits == 0 {
        return 0;
    }
    let span = (base as u128).pow(digits as u32);
    let mut bytes = 1usize;
    while (1u128 << (8 * bytes)) < span {
        bytes += 1;
    }
    bytes
}

/// Bytes used by [`pack_sums`] for `n` sums from `workers` workers.
pub fn sums_packed_len(n: usize, workers: usize) -> usize {
    let base = 2 * workers as u64 + 1;
    let per_word = digits_per_word(base);
    (n / per_word) * 8 + tail_bytes(base, n % per_word)
}

/// Packs code sums in `-workers..=workers` as base-`2N+1` digits.
///
/// Digits are grouped into little-endian `u64` words, least significant
/// digit first, holding as many digits as fit. The final group is truncated
/// to the fewest bytes that can hold it. This costs `log2(2N+1)` bits per
/// element up to word-level rounding.
pub fn pack_sums(sums: &[i32], workers: usize) -> Vec<u8> {
    let base = 2 * workers as u64 + 1;
    let per_word = digits_per_word(base);
    let mut out = Vec::with_capacity(sums_packed_len(sums.len(), workers));
    for group in sums.chunks(per_word) {
        let mut word: u64 = 0;
        for &s in group.iter().rev() {
            debug_assert!(s.unsigned_abs() as usize <= workers);
            word = word * base + (s + workers as i32) as u64;
        }
        let bytes = word.to_le_bytes();
        if group.len() == per_word {
            out.extend_from_slice(&bytes);
        } else {
            out.extend_from_slice(&bytes[..tail_bytes(base, group.len())]);
        }
    }
    out
}

/// Inverse of [`pack_sums`].
pub fn unpack_sums(bytes: &[u8], n: usize, workers: usize) -> Result<Vec<i32>, CodecError> {
    if workers == 0 {
        return Err(CodecError::Corrupt("sum block with zero workers".into()));
    }
    let expected = sums_packed_len(n, workers);
    if bytes.len() != expected {
        return Err(CodecError::Corrupt(format!(
            "{n} sums need {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let base = 2 * workers as u64 + 1;
    let per_word = digits_per_word(base);
    let mut out = Vec::with_capacity(n);
    let mut offset = 0;
    let mut remaining = n;
    while remaining > 0 {
        let digits = remaining.min(per_word);
        let width = if digits == per_word { 8 } else { tail_bytes(base, digits) };
        let mut buf = [0u8; 8];
        buf[..width].copy_from_slice(&bytes[offset..offset + width]);
        let mut word = u64::from_le_bytes(buf);
        for _ in 0..digits {
            out.push((word % base) as i32 - workers as i32);
            word /= base;
        }
        if word != 0 {
            return Err(CodecError::Corrupt(format!(
                "sum word at byte {offset} exceeds {digits} digits"
            )));
        }
        offset += width;
        remaining -= digits;
    }
    Ok(out)
}
