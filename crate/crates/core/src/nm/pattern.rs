use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest supported group size.
pub const MAX_GROUP: usize = 64;

/// An N:M sparsity scheme: at most (or exactly) `n` kept entries in every
/// group of `m` consecutive elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct NmPattern {
    n: usize,
    m: usize,
}

impl NmPattern {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || n > m || m > MAX_GROUP {
            return Err(Error::InvalidPattern { n, m });
        }
        Ok(Self { n, m })
    }

    #[inline]
    pub fn n(self) -> usize {
        self.n
    }

    #[inline]
    pub fn m(self) -> usize {
        self.m
    }

    /// `n / m`.
    pub fn density(self) -> f64 {
        self.n as f64 / self.m as f64
    }

    pub fn is_dense(self) -> bool {
        self.n == self.m
    }

    /// Number of distinct kept-index sets per group, `C(m, n)`.
    pub fn combinations(self) -> u64 {
        binomial(self.m, self.n)
    }

    /// Bits needed to store one group's index code: `ceil(log2(C(m, n)))`.
    pub fn index_bits(self) -> u32 {
        let c = self.combinations();
        if c <= 1 {
            0
        } else {
            64 - (c - 1).leading_zeros()
        }
    }

    /// Fails with [`Error::NotDivisible`] unless `dim` is a whole number of groups.
    pub fn check_divisible(self, dim: usize) -> Result<()> {
        if !dim.is_multiple_of(self.m) {
            return Err(Error::NotDivisible { dim, m: self.m });
        }
        Ok(())
    }

    /// Lexicographic rank of a sorted `n`-subset of `0..m`.
    pub fn rank(self, positions: &[usize]) -> u64 {
        debug_assert_eq!(positions.len(), self.n);
        let mut code = 0u64;
        let mut next = 0usize;
        for (i, &p) in positions.iter().enumerate() {
            let remaining = self.n - 1 - i;
            for skipped in next..p {
                code += binomial(self.m - 1 - skipped, remaining);
            }
            next = p + 1;
        }
        code
    }

    /// Inverse of [`rank`](Self::rank): writes the `n` positions for `code`
    /// into `out` in ascending order.
    pub fn unrank(self, mut code: u64, out: &mut [usize]) -> Result<()> {
        if code >= self.combinations() {
            return Err(Error::Format(format!(
                "index code {code} out of range for {self} (C = {})",
                self.combinations()
            )));
        }
        let mut candidate = 0usize;
        for (i, slot) in out.iter_mut().take(self.n).enumerate() {
            let remaining = self.n - 1 - i;
            loop {
                let block = binomial(self.m - 1 - candidate, remaining);
                if code < block {
                    break;
                }
                code -= block;
                candidate += 1;
            }
            *slot = candidate;
            candidate += 1;
        }
        Ok(())
    }
}

impl fmt::Display for NmPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

impl FromStr for NmPattern {
    type Err = Error;

    /// Strict `"N:M"` syntax: two unsigned decimal integers, no whitespace.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::PatternSyntax(s.to_string());
        let (n, m) = s.split_once(':').ok_or_else(bad)?;
        let digits = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
        if !digits(n) || !digits(m) {
            return Err(bad());
        }
        let n = n.parse().map_err(|_| bad())?;
        let m = m.parse().map_err(|_| bad())?;
        NmPattern::new(n, m)
    }
}

/// `C(n, k)` for `n <= 64`; exact in `u64`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as u64
}
