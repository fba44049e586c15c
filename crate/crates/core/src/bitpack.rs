//! Bit-packed ±1 tensors and the XNOR-PopCount inner product.
//!
//! A set bit encodes `+1`, a clear bit `-1`. The innermost axis is packed
//! little-endian into `u64` lanes; every packed row starts on a fresh word and
//! the unused tail bits of its last word are always zero, so packing the same
//! logical data twice yields identical words.

use crate::error::{BicdError, Result};
use crate::tensor::{Real, Tensor};

const NIBBLE_COUNTS: [u8; 16] = [0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4];

/// Population count via the hardware instruction (when the target has one).
#[inline(always)]
pub fn popcount_hw(x: u64) -> u32 {
    x.count_ones()
}

/// Portable population count through a 4-bit lookup table.
#[inline]
pub fn popcount_nibble(mut x: u64) -> u32 {
    let mut n = 0u32;
    while x != 0 {
        n += NIBBLE_COUNTS[(x & 0xF) as usize] as u32;
        x >>= 4;
    }
    n
}

/// The population count used by the kernels, chosen at build time.
#[cfg(target_feature = "popcnt")]
#[inline(always)]
pub fn popcount(x: u64) -> u32 {
    popcount_hw(x)
}

#[cfg(not(target_feature = "popcnt"))]
#[inline(always)]
pub fn popcount(x: u64) -> u32 {
    popcount_nibble(x)
}

#[inline(always)]
fn tail_mask(len: usize) -> u64 {
    match len % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[inline(always)]
fn words_for(len: usize) -> usize {
    len.div_ceil(64)
}

/// `2p - n` over `len` valid bits of two packed rows, `p` being the number of
/// agreeing positions. Callers guarantee both rows hold `words_for(len)` words
/// with zeroed padding.
#[inline(always)]
pub(crate) fn dot_words(a: &[u64], w: &[u64], len: usize) -> i32 {
    let nw = words_for(len);
    if nw == 0 {
        return 0;
    }
    let mut p = 0u32;
    for i in 0..nw - 1 {
        p += popcount(!(a[i] ^ w[i]));
    }
    p += popcount(!(a[nw - 1] ^ w[nw - 1]) & tail_mask(len));
    2 * p as i32 - len as i32
}

/// Bit-packed ±1 tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitTensor {
    dims: Vec<usize>,
    row_len: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

/// A borrowed packed row of `len` logical elements.
#[derive(Clone, Copy, Debug)]
pub struct BitRow<'a> {
    pub words: &'a [u64],
    pub len: usize,
}

impl BitTensor {
    /// All `-1` tensor (every bit clear).
    pub fn new_negative(dims: &[usize]) -> Self {
        let row_len = dims.last().copied().unwrap_or(1);
        let rows: usize = dims[..dims.len().saturating_sub(1)].iter().product();
        let words_per_row = words_for(row_len);
        BitTensor {
            dims: dims.to_vec(),
            row_len,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn rows(&self) -> usize {
        self.dims[..self.dims.len().saturating_sub(1)]
            .iter()
            .product()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Valid bits in the final word of each packed row.
    pub fn valid_bits_last_word(&self) -> usize {
        match (self.row_len, self.row_len % 64) {
            (0, _) => 0,
            (_, 0) => 64,
            (_, r) => r,
        }
    }

    pub fn row(&self, r: usize) -> BitRow<'_> {
        let start = r * self.words_per_row;
        BitRow {
            words: &self.words[start..start + self.words_per_row],
            len: self.row_len,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        let w = self.words[row * self.words_per_row + col / 64];
        (w >> (col % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize) {
        debug_assert!(col < self.row_len);
        self.words[row * self.words_per_row + col / 64] |= 1u64 << (col % 64);
    }

    /// True when every padding bit is clear.
    pub fn is_canonical(&self) -> bool {
        if self.words_per_row == 0 {
            return true;
        }
        let mask = tail_mask(self.row_len);
        (0..self.rows()).all(|r| self.words[(r + 1) * self.words_per_row - 1] & !mask == 0)
    }
}

/// Binarize with `sign(0) = +1`.
pub fn sign_pack<T: Real>(x: &Tensor<T>) -> BitTensor {
    let dims = if x.rank() == 0 { vec![1] } else { x.dims().to_vec() };
    let mut out = BitTensor::new_negative(&dims);
    let row_len = out.row_len;
    if row_len == 0 {
        return out;
    }
    let wpr = out.words_per_row;
    for (r, row) in x.data().chunks_exact(row_len).enumerate() {
        let dst = &mut out.words[r * wpr..(r + 1) * wpr];
        for (wi, chunk) in row.chunks(64).enumerate() {
            let mut word = 0u64;
            for (b, &v) in chunk.iter().enumerate() {
                if v >= T::zero() {
                    word |= 1u64 << b;
                }
            }
            dst[wi] = word;
        }
    }
    out
}

/// Expand to a `{-1, +1}` real tensor.
pub fn unpack<T: Real>(b: &BitTensor) -> Tensor<T> {
    let mut data = Vec::with_capacity(b.len());
    for r in 0..b.rows() {
        for c in 0..b.row_len {
            data.push(if b.get(r, c) { T::one() } else { -T::one() });
        }
    }
    Tensor::from_vec(&b.dims, data).expect("unpack preserves element count")
}

/// ±1 inner product of two packed rows: `p - (n - p)` with `p` the popcount
/// of their XNOR over the `n` valid bits.
pub fn xnor_popcount_dot(a: BitRow<'_>, w: BitRow<'_>) -> Result<i64> {
    if a.len != w.len {
        return Err(BicdError::Contract(format!(
            "xnor_popcount_dot length mismatch: {} vs {}",
            a.len, w.len
        )));
    }
    let nw = words_for(a.len);
    if a.words.len() < nw || w.words.len() < nw {
        return Err(BicdError::Contract(format!(
            "row of {} bits needs {} words",
            a.len, nw
        )));
    }
    Ok(dot_words(a.words, w.words, a.len) as i64)
}
