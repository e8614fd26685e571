//! LSB-first bit packing for code widths 1 through 8.

use crate::error::{Error, Result};

/// Number of bytes needed for `count` codes of `bits` each.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

pub fn pack(codes: &[u8], bits: u8) -> Vec<u8> {
    debug_assert!((1..=8).contains(&bits));
    let mut out = Vec::with_capacity(packed_len(codes.len(), bits));
    let mask = ((1u16 << bits) - 1) as u64;
    let mut acc = 0u64;
    let mut filled = 0u32;
    for &c in codes {
        acc |= (c as u64 & mask) << filled;
        filled += bits as u32;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

pub fn unpack(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    if bytes.len() != packed_len(count, bits) {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {} for {count} codes of {bits} bits",
            bytes.len(),
            packed_len(count, bits)
        )));
    }
    let mask = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc = 0u64;
    let mut filled = 0u32;
    let mut iter = bytes.iter();
    for _ in 0..count {
        while filled < bits as u32 {
            // Length was checked above.
            acc |= (*iter.next().unwrap() as u64) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u8);
        acc >>= bits;
        filled -= bits as u32;
    }
    Ok(out)
}
