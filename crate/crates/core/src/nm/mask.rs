use rand::Rng;

use crate::dense::DenseMatrix;
use crate::error::{shape_err, Error, Result};
use crate::nm::pattern::{NmPattern, MAX_GROUP};
use crate::rng::{rng_from_seed, SeededRng};
use crate::scalar::Scalar;

/// Which dimension a mask is grouped along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Orientation {
    /// Each row is split into groups of `m` consecutive columns (the
    /// reduction dimension of `X W^T`). Every group keeps exactly `n`.
    Rows,
    /// Each column is split into groups of `m` consecutive rows. Every group
    /// keeps exactly `n`.
    Columns,
    /// Double-pruned: groups along both dimensions keep at most `n`.
    Both,
}

/// Keep/drop structure of an N:M pruned matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NmMask {
    rows: usize,
    cols: usize,
    pattern: NmPattern,
    orientation: Orientation,
    keep: Vec<bool>,
}

impl NmMask {
    /// Builds a mask and checks every group constraint implied by `orientation`.
    pub fn new(
        rows: usize,
        cols: usize,
        pattern: NmPattern,
        orientation: Orientation,
        keep: Vec<bool>,
    ) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(shape_err("NmMask::new", rows * cols, keep.len()));
        }
        let mask = Self {
            rows,
            cols,
            pattern,
            orientation,
            keep,
        };
        mask.validate()?;
        Ok(mask)
    }

    /// Constructor for callers that build `keep` to satisfy the pattern by
    /// construction; checked only in debug builds.
    pub(crate) fn new_unchecked(
        rows: usize,
        cols: usize,
        pattern: NmPattern,
        orientation: Orientation,
        keep: Vec<bool>,
    ) -> Self {
        let mask = Self {
            rows,
            cols,
            pattern,
            orientation,
            keep,
        };
        debug_assert!(mask.validate().is_ok());
        mask
    }

    /// A mask keeping everything; requires a dense (`n == m`) pattern.
    pub fn all_kept(rows: usize, cols: usize, pattern: NmPattern) -> Result<Self> {
        if !pattern.is_dense() {
            return Err(Error::InvalidArgument(format!(
                "all-kept mask needs n == m, got {pattern}"
            )));
        }
        Self::new(rows, cols, pattern, Orientation::Rows, vec![true; rows * cols])
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = (self.pattern.n(), self.pattern.m());
        let check_rows = |exact: bool| -> Result<()> {
            self.pattern.check_divisible(self.cols)?;
            for r in 0..self.rows {
                for g in 0..self.cols / m {
                    let count = (0..m).filter(|&i| self.keep[r * self.cols + g * m + i]).count();
                    if count > n || (exact && count != n) {
                        return Err(Error::MaskViolation(format!(
                            "row {r} group {g} keeps {count}, pattern {}",
                            self.pattern
                        )));
                    }
                }
            }
            Ok(())
        };
        let check_cols = |exact: bool| -> Result<()> {
            self.pattern.check_divisible(self.rows)?;
            for c in 0..self.cols {
                for g in 0..self.rows / m {
                    let count = (0..m).filter(|&i| self.keep[(g * m + i) * self.cols + c]).count();
                    if count > n || (exact && count != n) {
                        return Err(Error::MaskViolation(format!(
                            "column {c} group {g} keeps {count}, pattern {}",
                            self.pattern
                        )));
                    }
                }
            }
            Ok(())
        };
        match self.orientation {
            Orientation::Rows => check_rows(true),
            Orientation::Columns => check_cols(true),
            Orientation::Both => {
                check_rows(false)?;
                check_cols(false)
            }
        }
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
    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    #[inline]
    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    #[inline]
    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Fraction of kept elements.
    pub fn density(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.kept_count() as f64 / self.keep.len() as f64
    }

    pub fn transpose(&self) -> Self {
        let mut keep = vec![false; self.keep.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                keep[c * self.rows + r] = self.keep[r * self.cols + c];
            }
        }
        let orientation = match self.orientation {
            Orientation::Rows => Orientation::Columns,
            Orientation::Columns => Orientation::Rows,
            Orientation::Both => Orientation::Both,
        };
        Self {
            rows: self.cols,
            cols: self.rows,
            pattern: self.pattern,
            orientation,
            keep,
        }
    }

    /// Every position kept here is also kept in `other`.
    pub fn is_subset_of(&self, other: &NmMask) -> bool {
        self.shape() == other.shape()
            && self.keep.iter().zip(&other.keep).all(|(&a, &b)| !a || b)
    }

    /// Fraction of positions where the two masks disagree.
    pub fn hamming_fraction(&self, other: &NmMask) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "hamming_fraction",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        if self.keep.is_empty() {
            return Ok(0.0);
        }
        let diff = self.keep.iter().zip(&other.keep).filter(|(a, b)| a != b).count();
        Ok(diff as f64 / self.keep.len() as f64)
    }

    /// True when the kept set also satisfies the pattern along columns, so
    /// double pruning removes nothing.
    pub fn is_transposable(&self) -> bool {
        if !self.rows.is_multiple_of(self.pattern.m()) || !self.cols.is_multiple_of(self.pattern.m()) {
            return false;
        }
        let m = self.pattern.m();
        (0..self.cols).all(|c| {
            (0..self.rows / m).all(|g| {
                (0..m).filter(|&i| self.keep[(g * m + i) * self.cols + c]).count() <= self.pattern.n()
            })
        })
    }

    /// `dense ⊙ mask`.
    pub fn apply<T: Scalar>(&self, dense: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if dense.shape() != self.shape() {
            return Err(shape_err(
                "NmMask::apply",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", dense.rows(), dense.cols()),
            ));
        }
        let data = dense
            .as_slice()
            .iter()
            .zip(&self.keep)
            .map(|(&v, &k)| if k { v } else { T::zero() })
            .collect();
        DenseMatrix::from_vec(self.rows, self.cols, data)
    }

    /// Row-wise mask drawn with a caller-supplied generator.
    pub fn random_with(
        rows: usize,
        cols: usize,
        pattern: NmPattern,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        pattern.check_divisible(cols)?;
        let m = pattern.m();
        let combos = pattern.combinations();
        let mut keep = vec![false; rows * cols];
        let mut positions = [0usize; MAX_GROUP];
        for group in keep.chunks_mut(m) {
            let code = rng.random_range(0..combos);
            pattern.unrank(code, &mut positions)?;
            for &p in &positions[..pattern.n()] {
                group[p] = true;
            }
        }
        Ok(Self {
            rows,
            cols,
            pattern,
            orientation: Orientation::Rows,
            keep,
        })
    }
}

/// Row-wise N:M mask where each group's kept set is uniform over the
/// `C(m, n)` combinations, drawn from `seed`.
///
/// Draws one code per group in row-major group order from xoshiro256++
/// seeded with `seed`, then maps the code to its subset by lexicographic rank.
pub fn random_mask(rows: usize, cols: usize, pattern: NmPattern, seed: u64) -> Result<NmMask> {
    NmMask::random_with(rows, cols, pattern, &mut rng_from_seed(seed))
}

/// Fills `order[..len]` with `0..len` sorted by descending magnitude, lowest
/// index first among ties.
fn rank_by_magnitude<T: Scalar>(len: usize, magnitude: impl Fn(usize) -> T, order: &mut [usize]) {
    for (i, slot) in order.iter_mut().take(len).enumerate() {
        *slot = i;
    }
    order[..len].sort_by(|&a, &b| {
        magnitude(b)
            .partial_cmp(&magnitude(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
}

/// Keeps the `n` largest-magnitude entries of every row group; ties go to
/// the lowest column index.
pub fn magnitude_mask<T: Scalar>(dense: &DenseMatrix<T>, pattern: NmPattern) -> Result<NmMask> {
    pattern.check_divisible(dense.cols())?;
    dense.ensure_finite("magnitude_mask input")?;
    let m = pattern.m();
    let mut keep = vec![false; dense.len()];
    let mut order = [0usize; MAX_GROUP];
    for (values, flags) in dense.as_slice().chunks(m).zip(keep.chunks_mut(m)) {
        rank_by_magnitude(m, |i| values[i].abs(), &mut order);
        for &i in &order[..pattern.n()] {
            flags[i] = true;
        }
    }
    Ok(NmMask {
        rows: dense.rows(),
        cols: dense.cols(),
        pattern,
        orientation: Orientation::Rows,
        keep,
    })
}

/// Second pruning pass: starting from `dense ⊙ row_mask`, every group of `m`
/// consecutive rows within a column keeps at most `n` survivors (largest
/// magnitude, lowest row index on ties). The result is a subset of `row_mask`.
pub fn double_prune<T: Scalar>(
    dense: &DenseMatrix<T>,
    row_mask: &NmMask,
    pattern: NmPattern,
) -> Result<NmMask> {
    if dense.shape() != row_mask.shape() {
        return Err(shape_err(
            "double_prune",
            format!("{}x{}", row_mask.rows, row_mask.cols),
            format!("{}x{}", dense.rows(), dense.cols()),
        ));
    }
    if row_mask.pattern != pattern {
        return Err(Error::PatternMismatch {
            op: "double_prune",
            detail: format!("row mask is {}, requested {pattern}", row_mask.pattern),
        });
    }
    if row_mask.orientation == Orientation::Columns {
        return Err(Error::InvalidArgument(
            "double_prune expects a row-grouped mask".into(),
        ));
    }
    pattern.check_divisible(dense.cols())?;
    pattern.check_divisible(dense.rows())?;
    let (rows, cols) = dense.shape();
    let (n, m) = (pattern.n(), pattern.m());
    let data = dense.as_slice();
    let mut keep = row_mask.keep.clone();
    let mut survivors = [0usize; MAX_GROUP];
    let mut order = [0usize; MAX_GROUP];
    for g in 0..rows / m {
        let base = g * m;
        for c in 0..cols {
            let mut count = 0;
            for i in 0..m {
                if keep[(base + i) * cols + c] {
                    survivors[count] = base + i;
                    count += 1;
                }
            }
            if count <= n {
                continue;
            }
            rank_by_magnitude(count, |i| data[survivors[i] * cols + c].abs(), &mut order);
            for &i in &order[n..count] {
                keep[survivors[i] * cols + c] = false;
            }
        }
    }
    Ok(NmMask {
        rows,
        cols,
        pattern,
        orientation: Orientation::Both,
        keep,
    })
}
