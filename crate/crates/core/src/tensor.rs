//! Dense float tensors and bit-packed ±1 tensors.
//!
//! Bit encoding: bit 1 is +1, bit 0 is −1. Within a word bit `b` (LSB first)
//! holds logical index `word * 64 + b` of its row. Every row starts on a
//! fresh word and the unused high bits of a row's last word are always 0.

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

/// Number of 64-bit words needed for a row of `row_len` bits.
#[inline]
pub fn words_for(row_len: usize) -> usize {
    row_len.div_ceil(WORD_BITS)
}

/// Dense row-major tensor; 4-d tensors are NCHW with W fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FloatTensor {
    /// Checked construction: length must match the shape and all values
    /// must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    /// Unchecked construction for hot loops. Only the length is asserted.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The four extents of an NCHW tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::dim(format!("expected a 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &FloatTensor) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &FloatTensor) -> Result<()> {
        self.check_same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn check_same_shape(&self, other: &FloatTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("shape {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One packed row of ±1 values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedRow {
    words: Vec<u64>,
    row_len: usize,
}

impl PackedRow {
    /// Builds a row from raw words, forcing the padding bits to 0.
    pub fn from_words(mut words: Vec<u64>, row_len: usize) -> Result<Self> {
        if words.len() != words_for(row_len) {
            return Err(Error::dim(format!(
                "{} bits need {} words, got {}",
                row_len,
                words_for(row_len),
                words.len()
            )));
        }
        clear_padding(&mut words, row_len);
        Ok(Self { words, row_len })
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }
}

/// Zeroes the bits at logical indices ≥ `row_len` in the last word.
#[inline]
fn clear_padding(words: &mut [u64], row_len: usize) {
    let tail = row_len % WORD_BITS;
    if tail != 0 {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << tail) - 1;
        }
    }
}

/// Packs a sequence of exact ±1 values.
pub fn pack_row(values: &[f32]) -> Result<PackedRow> {
    let mut words = vec![0u64; words_for(values.len())];
    for (i, &v) in values.iter().enumerate() {
        if v == 1.0 {
            words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
        } else if v != -1.0 {
            return Err(Error::Encoding { value: v });
        }
    }
    Ok(PackedRow {
        words,
        row_len: values.len(),
    })
}

pub fn unpack_row(row: &PackedRow) -> Vec<f32> {
    (0..row.row_len)
        .map(|i| {
            if (row.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// ±1 inner product of two packed rows via xnor and popcount.
pub fn xnor_popcount_dot(a: &PackedRow, b: &PackedRow) -> Result<i64> {
    if a.row_len != b.row_len {
        return Err(Error::dim(format!(
            "row lengths differ: {} vs {}",
            a.row_len, b.row_len
        )));
    }
    Ok(dot_words(&a.words, &b.words, a.row_len) as i64)
}

/// Word-level kernel behind [`xnor_popcount_dot`]. Both slices must hold
/// `words_for(row_len)` words with zeroed padding.
#[inline(always)]
pub fn dot_words(a: &[u64], b: &[u64], row_len: usize) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    // Matches are `row_len − mismatches`; zero padding never mismatches.
    // Eight independent lanes let the compiler use vector popcounts.
    let mut lanes = [0u64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += (x[l] ^ y[l]).count_ones() as u64;
        }
    }
    let mut mismatches: u64 = lanes.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        mismatches += (x ^ y).count_ones() as u64;
    }
    row_len as i32 - 2 * mismatches as i32
}

/// [`dot_words`] of each of `X` rows `x` against `R` rows `w`, as
/// `out[j][r]`. Blocking reuses every loaded word `R` or `X` times.
#[inline(always)]
pub fn dot_words_block<const R: usize, const X: usize>(
    w: [&[u64]; R],
    x: [&[u64]; X],
    row_len: usize,
) -> [[i32; R]; X] {
    let n = x[0].len();
    assert!(w.iter().chain(&x).all(|row| row.len() == n));
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512vpopcntdq") {
        // SAFETY: the feature is present and all rows have the same length.
        return unsafe { avx512::dot_block(w, x, row_len) };
    }
    std::array::from_fn(|j| std::array::from_fn(|r| dot_words(w[r], x[j], row_len)))
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    /// Caller guarantees AVX-512F + VPOPCNTDQ and equal row lengths.
    #[target_feature(enable = "avx512f,avx512vpopcntdq")]
    pub unsafe fn dot_block<const R: usize, const X: usize>(
        w: [&[u64]; R],
        x: [&[u64]; X],
        row_len: usize,
    ) -> [[i32; R]; X] {
        let mut acc = [[_mm512_setzero_si512(); R]; X];
        let n = x[0].len();
        let mut i = 0;
        while i < n {
            let left = n - i;
            let mask: __mmask8 = if left >= 8 { 0xff } else { (1u8 << left) - 1 };
            let xv: [__m512i; X] =
                std::array::from_fn(|j| _mm512_maskz_loadu_epi64(mask, x[j].as_ptr().add(i) as *const _));
            for r in 0..R {
                let wv = _mm512_maskz_loadu_epi64(mask, w[r].as_ptr().add(i) as *const _);
                for j in 0..X {
                    acc[j][r] = _mm512_add_epi64(acc[j][r], _mm512_popcnt_epi64(_mm512_xor_si512(wv, xv[j])));
                }
            }
            i += 8;
        }
        std::array::from_fn(|j| std::array::from_fn(|r| row_len as i32 - 2 * _mm512_reduce_add_epi64(acc[j][r]) as i32))
    }
}

/// A tensor of ±1 values packed into rows of 64-bit words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    logical_shape: Vec<usize>,
    words: Vec<u64>,
    row_len: usize,
    rows: usize,
}

impl BitTensor {
    /// Checked construction from exact ±1 values, `row_len` logical values
    /// per packed row.
    pub fn from_signs(logical_shape: Vec<usize>, values: &[f32], row_len: usize) -> Result<Self> {
        Self::check_layout(&logical_shape, values.len(), row_len)?;
        if let Some(&value) = values.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(Error::Encoding { value });
        }
        Ok(Self::pack_sign_of(logical_shape, values, row_len))
    }

    /// Packs `sign(values)` (with sign(0) = +1) without validation.
    pub fn pack_sign_of(logical_shape: Vec<usize>, values: &[f32], row_len: usize) -> Self {
        let rows = values.len().checked_div(row_len).unwrap_or(0);
        let wpr = words_for(row_len);
        let mut words = vec![0u64; rows * wpr];
        for (r, chunk) in values.chunks_exact(row_len.max(1)).enumerate().take(rows) {
            let row = &mut words[r * wpr..(r + 1) * wpr];
            for (i, &v) in chunk.iter().enumerate() {
                if v >= 0.0 {
                    row[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
                }
            }
        }
        Self {
            logical_shape,
            words,
            row_len,
            rows,
        }
    }

    /// Builds from raw words. Padding bits are cleared.
    pub fn from_words(logical_shape: Vec<usize>, mut words: Vec<u64>, row_len: usize) -> Result<Self> {
        let total: usize = logical_shape.iter().product();
        Self::check_layout(&logical_shape, total, row_len)?;
        let rows = total.checked_div(row_len).unwrap_or(0);
        let wpr = words_for(row_len);
        if words.len() != rows * wpr {
            return Err(Error::dim(format!(
                "{rows} rows of {row_len} bits need {} words, got {}",
                rows * wpr,
                words.len()
            )));
        }
        for row in words.chunks_exact_mut(wpr.max(1)) {
            clear_padding(row, row_len);
        }
        Ok(Self {
            logical_shape,
            words,
            row_len,
            rows,
        })
    }

    fn check_layout(shape: &[usize], len: usize, row_len: usize) -> Result<()> {
        let total: usize = shape.iter().product();
        if total != len {
            return Err(Error::dim(format!("shape {shape:?} holds {total} values, got {len}")));
        }
        if row_len == 0 || !total.is_multiple_of(row_len) {
            return Err(Error::dim(format!("row length {row_len} does not tile {total} values")));
        }
        Ok(())
    }

    pub fn logical_shape(&self) -> &[usize] {
        &self.logical_shape
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.row_len)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.words[r * wpr..(r + 1) * wpr]
    }

    pub fn row(&self, r: usize) -> PackedRow {
        PackedRow {
            words: self.row_words(r).to_vec(),
            row_len: self.row_len,
        }
    }

    /// Unpacks into ±1 floats in logical order.
    pub fn to_signs(&self) -> Vec<f32> {
        (0..self.rows).flat_map(|r| unpack_row(&self.row(r))).collect()
    }
}
