//! Packed storage for row-grouped N:M matrices.
//!
//! Every group of `m` consecutive columns in a row stores exactly `n` values
//! (ascending column order) and one index code: the lexicographic rank of the
//! kept column subset among all `n`-subsets of `0..m`. Groups that keep fewer
//! than `n` entries (double-pruned matrices) are padded with the
//! lowest-index unkept positions holding explicit zeros.

use crate::dense::DenseMatrix;
use crate::error::{shape_err, Error, Result};
use crate::nm::mask::{NmMask, Orientation};
use crate::nm::pattern::{NmPattern, MAX_GROUP};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct NmCompressed<T = f32> {
    rows: usize,
    cols: usize,
    pattern: NmPattern,
    values: Vec<T>,
    codes: Vec<u64>,
    /// In-group offsets decoded from `codes`, parallel to `values`.
    offsets: Vec<u8>,
}

impl<T: Scalar> NmCompressed<T> {
    /// Packs `dense` at the positions kept by a row-grouped `mask`.
    pub fn compress(dense: &DenseMatrix<T>, mask: &NmMask) -> Result<Self> {
        if dense.shape() != mask.shape() {
            return Err(shape_err(
                "compress",
                format!("{}x{}", mask.rows(), mask.cols()),
                format!("{}x{}", dense.rows(), dense.cols()),
            ));
        }
        if mask.orientation() == Orientation::Columns {
            return Err(Error::InvalidArgument(
                "compress needs a mask grouped along rows".into(),
            ));
        }
        dense.ensure_finite("compress input")?;
        let pattern = mask.pattern();
        pattern.check_divisible(dense.cols())?;
        let (n, m) = (pattern.n(), pattern.m());
        let groups = dense.len() / m;
        let mut values = Vec::with_capacity(groups * n);
        let mut codes = Vec::with_capacity(groups);
        let mut offsets = Vec::with_capacity(groups * n);
        let mut chosen = [0usize; MAX_GROUP];
        for (vals, keep) in dense.as_slice().chunks(m).zip(mask.keep().chunks(m)) {
            let kept = keep.iter().filter(|&&k| k).count();
            if kept > n {
                return Err(Error::MaskViolation(format!(
                    "group keeps {kept} entries under {pattern}"
                )));
            }
            let mut pad = n - kept;
            let mut count = 0;
            for (i, &k) in keep.iter().enumerate() {
                if k || pad > 0 {
                    if !k {
                        pad -= 1;
                    }
                    chosen[count] = i;
                    count += 1;
                }
            }
            debug_assert_eq!(count, n);
            codes.push(pattern.rank(&chosen[..n]));
            for &i in &chosen[..n] {
                values.push(if keep[i] { vals[i] } else { T::zero() });
                offsets.push(i as u8);
            }
        }
        Ok(Self {
            rows: dense.rows(),
            cols: dense.cols(),
            pattern,
            values,
            codes,
            offsets,
        })
    }

    /// Rebuilds a matrix from raw parts, validating every code.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        pattern: NmPattern,
        codes: Vec<u64>,
        values: Vec<T>,
    ) -> Result<Self> {
        pattern.check_divisible(cols)?;
        let groups = rows * cols / pattern.m();
        if codes.len() != groups {
            return Err(shape_err("NmCompressed::from_parts codes", groups, codes.len()));
        }
        if values.len() != groups * pattern.n() {
            return Err(shape_err(
                "NmCompressed::from_parts values",
                groups * pattern.n(),
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("compressed values"));
        }
        let offsets = decode_offsets(pattern, &codes)?;
        Ok(Self {
            rows,
            cols,
            pattern,
            values,
            codes,
            offsets,
        })
    }

    pub fn decompress(&self) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        let (n, m) = (self.pattern.n(), self.pattern.m());
        let data = out.as_mut_slice();
        for g in 0..self.codes.len() {
            for t in g * n..(g + 1) * n {
                data[g * m + self.offsets[t] as usize] = self.values[t];
            }
        }
        out
    }

    /// The exactly-`n`-per-group mask named by the index codes (padding
    /// positions included).
    pub fn code_mask(&self) -> NmMask {
        let mut keep = vec![false; self.rows * self.cols];
        let (n, m) = (self.pattern.n(), self.pattern.m());
        for g in 0..self.codes.len() {
            for &o in &self.offsets[g * n..(g + 1) * n] {
                keep[g * m + o as usize] = true;
            }
        }
        NmMask::new(self.rows, self.cols, self.pattern, Orientation::Rows, keep)
            .expect("decoded codes always satisfy the pattern")
    }

    /// Overwrites the stored values from `w_new` at the coded positions; the
    /// codes never change.
    pub fn update_values(&mut self, w_new: &DenseMatrix<T>) -> Result<()> {
        if w_new.shape() != self.shape() {
            return Err(shape_err(
                "update_sparse_values",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", w_new.rows(), w_new.cols()),
            ));
        }
        w_new.ensure_finite("update_sparse_values input")?;
        let (n, m) = (self.pattern.n(), self.pattern.m());
        let src = w_new.as_slice();
        for g in 0..self.codes.len() {
            for t in g * n..(g + 1) * n {
                self.values[t] = src[g * m + self.offsets[t] as usize];
            }
        }
        Ok(())
    }

    /// Single-pass form of
    /// `compress(W^T, double_prune(W, row_mask)^T)` for `W = decompress(self)`:
    /// returns the packed transpose and the double-pruned mask (in `W`'s
    /// orientation). `row_mask` must be the mask `self` was packed with.
    pub fn double_pruned_transpose(&self, row_mask: &NmMask) -> Result<(Self, NmMask)> {
        if row_mask.shape() != self.shape() || row_mask.pattern() != self.pattern {
            return Err(Error::PatternMismatch {
                op: "double_pruned_transpose",
                detail: format!(
                    "row mask {}x{} {} vs matrix {}x{} {}",
                    row_mask.rows(),
                    row_mask.cols(),
                    row_mask.pattern(),
                    self.rows,
                    self.cols,
                    self.pattern
                ),
            });
        }
        let pattern = self.pattern;
        pattern.check_divisible(self.rows)?;
        let (n, m) = (pattern.n(), pattern.m());
        let (rows, cols) = (self.rows, self.cols);
        let dense = self.decompress();
        let data = dense.as_slice();
        let row_keep = row_mask.keep();
        let mut keep = vec![false; rows * cols];
        let groups_t = rows / m;
        let mut codes = vec![0u64; cols * groups_t];
        let mut values = vec![T::zero(); cols * groups_t * n];
        let mut offsets = vec![0u8; cols * groups_t * n];
        let mut positions = [0usize; MAX_GROUP];
        // code by subset bitmask for small groups
        let table = subset_code_table(pattern);
        for g in 0..groups_t {
            let base = g * m;
            for c in 0..cols {
                let mut alive = 0u64;
                for i in 0..m {
                    if row_keep[(base + i) * cols + c] {
                        alive |= 1 << i;
                    }
                }
                // keep the n largest survivors; strict comparison in
                // ascending row order sends ties to the lowest row
                let mut chosen = 0u64;
                if alive.count_ones() as usize <= n {
                    chosen = alive;
                } else {
                    for _ in 0..n {
                        let mut best = usize::MAX;
                        let mut best_mag = T::zero();
                        for i in 0..m {
                            if (alive & !chosen) >> i & 1 == 1 {
                                let mag = data[(base + i) * cols + c].abs();
                                if best == usize::MAX || mag > best_mag {
                                    best = i;
                                    best_mag = mag;
                                }
                            }
                        }
                        chosen |= 1 << best;
                    }
                }
                let mut pad = n - chosen.count_ones() as usize;
                let mut t = 0;
                let mut bits = 0usize;
                let slot = c * groups_t + g;
                for i in 0..m {
                    let kept = chosen >> i & 1 == 1;
                    if kept || pad > 0 {
                        if kept {
                            keep[(base + i) * cols + c] = true;
                            values[slot * n + t] = data[(base + i) * cols + c];
                        } else {
                            pad -= 1;
                        }
                        positions[t] = i;
                        offsets[slot * n + t] = i as u8;
                        bits |= 1 << i;
                        t += 1;
                    }
                }
                codes[slot] = match &table {
                    Some(tab) => tab[bits],
                    None => pattern.rank(&positions[..n]),
                };
            }
        }
        let transposed = Self {
            rows: cols,
            cols: rows,
            pattern,
            values,
            codes,
            offsets,
        };
        let mask = NmMask::new_unchecked(rows, cols, pattern, Orientation::Both, keep);
        Ok((transposed, mask))
    }

    /// Replaces the packed values wholesale.
    pub fn set_values(&mut self, values: Vec<T>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(shape_err("NmCompressed::set_values", self.values.len(), values.len()));
        }
        self.values = values;
        Ok(())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn pattern(&self) -> NmPattern {
        self.pattern
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    #[inline]
    pub fn codes(&self) -> &[u64] {
        &self.codes
    }

    /// Column index (within the row) of every stored value.
    #[inline]
    pub(crate) fn offsets(&self) -> &[u8] {
        &self.offsets
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        self.cols / self.pattern.m()
    }

    /// Rows `start..start + count` as a standalone compressed matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.rows {
            return Err(shape_err("row_block", format!("<= {} rows", self.rows), start + count));
        }
        let groups = self.groups_per_row();
        let n = self.pattern.n();
        let (g0, g1) = (start * groups, (start + count) * groups);
        Ok(Self {
            rows: count,
            cols: self.cols,
            pattern: self.pattern,
            values: self.values[g0 * n..g1 * n].to_vec(),
            codes: self.codes[g0..g1].to_vec(),
            offsets: self.offsets[g0 * n..g1 * n].to_vec(),
        })
    }

    pub fn nnz_slots(&self) -> usize {
        self.values.len()
    }

    pub fn cast<U: Scalar>(&self) -> NmCompressed<U> {
        NmCompressed {
            rows: self.rows,
            cols: self.cols,
            pattern: self.pattern,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            codes: self.codes.clone(),
            offsets: self.offsets.clone(),
        }
    }
}

/// `rank` of every `n`-subset of `0..m`, indexed by bitmask, for `m <= 12`.
fn subset_code_table(pattern: NmPattern) -> Option<Vec<u64>> {
    let (n, m) = (pattern.n(), pattern.m());
    if m > 12 {
        return None;
    }
    let mut table = vec![0u64; 1 << m];
    let mut positions = [0usize; MAX_GROUP];
    for (bits, code) in table.iter_mut().enumerate() {
        if bits.count_ones() as usize == n {
            let mut t = 0;
            for i in 0..m {
                if bits & (1 << i) != 0 {
                    positions[t] = i;
                    t += 1;
                }
            }
            *code = pattern.rank(&positions[..n]);
        }
    }
    Some(table)
}

fn decode_offsets(pattern: NmPattern, codes: &[u64]) -> Result<Vec<u8>> {
    let n = pattern.n();
    let mut offsets = Vec::with_capacity(codes.len() * n);
    let mut positions = [0usize; MAX_GROUP];
    for &code in codes {
        pattern.unrank(code, &mut positions)?;
        offsets.extend(positions[..n].iter().map(|&p| p as u8));
    }
    Ok(offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nm::mask::random_mask;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn p(n: usize, m: usize) -> NmPattern {
        NmPattern::new(n, m).unwrap()
    }

    proptest! {
        #[test]
        fn fused_transpose_matches_two_step(seed in 0u64..1000, nm in prop::sample::select(vec![(1usize, 2usize), (2, 4), (2, 8), (4, 8), (3, 3)])) {
            let pattern = p(nm.0, nm.1);
            let (rows, cols) = (2 * nm.1, 3 * nm.1);
            let mut rng = rng_from_seed(seed);
            // coarse values so magnitude ties occur
            let dense = DenseMatrix::<f64>::from_fn(rows, cols, |_, _| {
                (crate::rng::standard_normal(&mut rng) * 2.0).round()
            });
            let mask = random_mask(rows, cols, pattern, seed).unwrap();
            let w = NmCompressed::compress(&dense, &mask).unwrap();
            let (fused, both) = w.double_pruned_transpose(&mask).unwrap();
            let w_r = w.decompress();
            let expect_mask = crate::nm::double_prune(&w_r, &mask, pattern).unwrap();
            let expect = NmCompressed::compress(&w_r.transpose(), &expect_mask.transpose()).unwrap();
            prop_assert_eq!(both, expect_mask);
            prop_assert_eq!(fused, expect);
        }
    }

    #[test]
    fn dense_pattern_is_identity() {
        let mut rng = rng_from_seed(1);
        let d = DenseMatrix::<f32>::random_normal(3, 8, 1.0, &mut rng);
        let mask = NmMask::all_kept(3, 8, p(4, 4)).unwrap();
        let c = NmCompressed::compress(&d, &mask).unwrap();
        assert_eq!(c.decompress(), d);
        assert!(c.codes().iter().all(|&code| code == 0));
    }

    #[test]
    fn zero_matrix_uses_lowest_combination() {
        let d = DenseMatrix::<f32>::zeros(4, 8);
        let mask = random_mask(4, 8, p(2, 4), 9).unwrap();
        let c = NmCompressed::compress(&d, &mask).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
        // under-full mask (nothing kept) pads with positions {0, 1} -> code 0
        let empty = NmMask::new(4, 8, p(2, 4), Orientation::Both, vec![false; 32]).unwrap();
        let c = NmCompressed::compress(&d, &empty).unwrap();
        assert!(c.codes().iter().all(|&code| code == 0));
        assert_eq!(c.decompress(), d);
    }

    #[test]
    fn round_trip_random_64() {
        let mut rng = rng_from_seed(17);
        let d = DenseMatrix::<f32>::random_normal(64, 64, 1.0, &mut rng);
        let mask = random_mask(64, 64, p(2, 4), 3).unwrap();
        let c = NmCompressed::compress(&d, &mask).unwrap();
        assert_eq!(c.values().len(), 64 * 16 * 2);
        let expect = mask.apply(&d).unwrap();
        // bit-identical comparison
        assert!(c
            .decompress()
            .as_slice()
            .iter()
            .zip(expect.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(c.code_mask(), mask);
    }

    #[test]
    fn compress_rejects_mismatch() {
        let d = DenseMatrix::<f32>::zeros(4, 8);
        let mask = random_mask(4, 4, p(2, 4), 0).unwrap();
        assert!(matches!(NmCompressed::compress(&d, &mask), Err(Error::Shape { .. })));
        let col_mask = random_mask(8, 4, p(2, 4), 0).unwrap().transpose();
        assert!(NmCompressed::compress(&d, &col_mask).is_err());
    }

    #[test]
    fn update_values_keeps_codes() {
        let mut rng = rng_from_seed(4);
        let d = DenseMatrix::<f32>::random_normal(8, 8, 1.0, &mut rng);
        let mask = random_mask(8, 8, p(2, 4), 4).unwrap();
        let mut c = NmCompressed::compress(&d, &mask).unwrap();
        let before = c.clone();
        c.update_values(&c.decompress()).unwrap();
        assert_eq!(c, before);
        c.update_values(&before.decompress().scale(2.0)).unwrap();
        assert_eq!(c.codes(), before.codes());
        assert!(c.values().iter().zip(before.values()).all(|(a, b)| *a == 2.0 * b));
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(seed in any::<u64>(), rows in 1usize..6, groups in 1usize..5, pat in 0usize..4) {
            let pattern = [p(1, 2), p(2, 4), p(2, 8), p(3, 4)][pat];
            let cols = groups * pattern.m();
            let mut rng = rng_from_seed(seed);
            let d = DenseMatrix::<f64>::random_normal(rows, cols, 1.0, &mut rng);
            let mask = NmMask::random_with(rows, cols, pattern, &mut rng).unwrap();
            let c = NmCompressed::compress(&d, &mask).unwrap();
            prop_assert!(c.codes().iter().all(|&code| code < pattern.combinations()));
            prop_assert_eq!(c.decompress(), mask.apply(&d).unwrap());
            let again = NmCompressed::from_parts(rows, cols, pattern, c.codes().to_vec(), c.values().to_vec()).unwrap();
            prop_assert_eq!(again, c);
        }
    }
}
