//! MSB-first bit packing.
//!
//! Bit `i` of a sequence lives in byte `i / 8` at position `7 - i % 8`; unused
//! low bits of the last byte are zero.

pub fn packed_len(bits: usize) -> usize {
    bits.div_ceil(8)
}

pub fn pack<I: IntoIterator<Item = bool>>(bits: I) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, bit) in bits.into_iter().enumerate() {
        if i % 8 == 0 {
            out.push(0);
        }
        if bit {
            *out.last_mut().expect("byte pushed above") |= 0x80 >> (i % 8);
        }
    }
    out
}

#[inline]
pub fn get(bytes: &[u8], i: usize) -> bool {
    bytes[i / 8] & (0x80 >> (i % 8)) != 0
}

pub fn unpack(bytes: &[u8], len: usize) -> Vec<bool> {
    assert!(bytes.len() >= packed_len(len), "not enough bytes for {len} bits");
    (0..len).map(|i| get(bytes, i)).collect()
}
