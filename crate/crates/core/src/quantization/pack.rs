//! 2-bit ternary code packing.
//!
//! Four codes per byte, first code in the two least significant bits.
//! `0b00 -> 0`, `0b01 -> +1`, `0b10 -> -1`; `0b11` is invalid.

use crate::error::{Error, Result};

pub const CODES_PER_BYTE: usize = 4;

pub fn packed_len(count: usize) -> usize {
    count.div_ceil(CODES_PER_BYTE)
}

#[inline]
pub fn encode(code: i8) -> u8 {
    match code {
        0 => 0b00,
        1 => 0b01,
        -1 => 0b10,
        other => panic!("ternary code out of range: {other}"),
    }
}

#[inline]
pub fn decode(bits: u8) -> Result<i8> {
    match bits & 0b11 {
        0b00 => Ok(0),
        0b01 => Ok(1),
        0b10 => Ok(-1),
        _ => Err(Error::Format("invalid ternary code 0b11".into())),
    }
}

/// Packs codes in stream order. Panics if a code is outside {-1, 0, +1}.
pub fn pack(codes: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len())];
    for (i, &c) in codes.iter().enumerate() {
        out[i / CODES_PER_BYTE] |= encode(c) << (2 * (i % CODES_PER_BYTE));
    }
    out
}

pub fn unpack(packed: &[u8], count: usize) -> Result<Vec<i8>> {
    if packed.len() < packed_len(count) {
        return Err(Error::UnexpectedEof {
            what: "packed ternary codes".into(),
            needed: packed_len(count),
            available: packed.len(),
        });
    }
    (0..count).map(|i| code_at(packed, i)).collect()
}

#[inline]
pub fn code_at(packed: &[u8], index: usize) -> Result<i8> {
    decode(packed[index / CODES_PER_BYTE] >> (2 * (index % CODES_PER_BYTE)))
}
