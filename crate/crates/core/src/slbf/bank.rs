use crate::bits;
use crate::error::{Error, Result};

/// The shared set of `m` binary filters of one layer, each `s x d x d`, kept
/// bit-packed. Bit 1 means `+1`, bit 0 means `-1`; bit order is filter, then
/// channel, row, col.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryFilterBank {
    m: usize,
    s: usize,
    d: usize,
    bits: Vec<u8>,
}

impl BinaryFilterBank {
    pub fn from_bits(m: usize, s: usize, d: usize, bits: Vec<u8>) -> Result<Self> {
        if m == 0 || s == 0 || d == 0 {
            return Err(Error::dim(format!("empty filter bank m={m} s={s} d={d}")));
        }
        let need = bits::packed_len(m * s * d * d);
        if bits.len() != need {
            return Err(Error::dim(format!(
                "filter bank m={m} s={s} d={d} needs {need} bytes, got {}",
                bits.len()
            )));
        }
        Ok(Self { m, s, d, bits })
    }

    /// Bank from `m * s * d * d` values, each mapped to `+1` iff `>= 0`.
    pub fn from_values(m: usize, s: usize, d: usize, values: &[f32]) -> Result<Self> {
        if values.len() != m * s * d * d {
            return Err(Error::dim(format!(
                "filter bank m={m} s={s} d={d} needs {} values, got {}",
                m * s * d * d,
                values.len()
            )));
        }
        Self::from_bits(m, s, d, bits::pack(values.iter().map(|&v| v >= 0.0)))
    }

    pub fn m(&self) -> usize {
        self.m
    }
    pub fn s(&self) -> usize {
        self.s
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn filter_len(&self) -> usize {
        self.s * self.d * self.d
    }
    pub fn len(&self) -> usize {
        self.m * self.filter_len()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn sign(&self, filter: usize, channel: usize, row: usize, col: usize) -> f32 {
        let idx = ((filter * self.s + channel) * self.d + row) * self.d + col;
        if bits::get(&self.bits, idx) {
            1.0
        } else {
            -1.0
        }
    }

    /// All entries as `+-1.0`, row-major `(m, s, d, d)`.
    pub fn to_values(&self) -> Vec<f32> {
        (0..self.len())
            .map(|i| if bits::get(&self.bits, i) { 1.0 } else { -1.0 })
            .collect()
    }

    pub fn filter(&self, j: usize) -> Vec<f32> {
        let len = self.filter_len();
        (j * len..(j + 1) * len)
            .map(|i| if bits::get(&self.bits, i) { 1.0 } else { -1.0 })
            .collect()
    }
}

/// Element-wise sign of the proxy filters: `+1` iff `r >= 0`, else `-1`.
pub fn binarize_bank(proxies: &[f32], m: usize, s: usize, d: usize) -> Result<BinaryFilterBank> {
    if let Some(pos) = proxies.iter().position(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!(
            "filter proxy entry {pos} is {}",
            proxies[pos]
        )));
    }
    BinaryFilterBank::from_values(m, s, d, proxies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sign_convention() {
        let b = binarize_bank(&[0.5, -2.0, 0.0, 1e-9], 1, 4, 1).unwrap();
        assert_eq!(b.to_values(), vec![1.0, -1.0, 1.0, 1.0]);
        let b = binarize_bank(&[-0.3], 1, 1, 1).unwrap();
        assert_eq!(b.to_values(), vec![-1.0]);
    }

    #[test]
    fn nan_is_divergence() {
        assert!(matches!(
            binarize_bank(&[0.1, f32::NAN], 2, 1, 1),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn indexed_access_matches_layout() {
        let vals: Vec<f32> = (0..2 * 3 * 2 * 2).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let b = BinaryFilterBank::from_values(2, 3, 2, &vals).unwrap();
        for j in 0..2 {
            for c in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        let idx = ((j * 3 + c) * 2 + y) * 2 + x;
                        assert_eq!(b.sign(j, c, y, x), vals[idx]);
                    }
                }
            }
        }
        assert_eq!(b.filter(1), vals[12..].to_vec());
    }

    proptest! {
        #[test]
        fn binarize_is_idempotent(r in proptest::collection::vec(-3.0f32..3.0, 1..40)) {
            let once = binarize_bank(&r, 1, r.len(), 1).unwrap();
            let twice = binarize_bank(&once.to_values(), 1, r.len(), 1).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
