//! Monte Carlo check that random masking with `1/s` rescaling gives an
//! unbiased input gradient: `E[(1/s) dY (M ⊙ W)] = dY W` for masks whose
//! entries are kept with probability `s = n/m`.

use rand::Rng;
use rayon::prelude::*;

use crate::dense::DenseMatrix;
use crate::error::{shape_err, Result};
use crate::nm::{NmMask, NmPattern};
use crate::rng::{derive_seed, rng_from_seed};

const CHUNK: usize = 50;
const STRUCTURED_STREAM: u64 = 0x5717;

/// Which random mask family to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum MaskFamily {
    /// Independent Bernoulli(n/m) per element.
    Bernoulli,
    /// Uniformly random N:M mask along each row of `W`.
    Structured,
}

/// Accuracy of one estimator against the exact product.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EstimatorStats {
    pub family: MaskFamily,
    pub samples: usize,
    /// `||est - exact||_F / ||exact||_F` (absolute when `exact = 0`).
    pub rel_error: f64,
    /// `max |est - exact| / max |exact|` (absolute when `exact = 0`).
    pub max_rel_error: f64,
    /// Largest `|est - exact| / SE` over elements.
    pub max_z: f64,
    /// Elements with `|est - exact| > 4 SE`.
    pub beyond_4se: usize,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Theorem1Report {
    pub bernoulli: EstimatorStats,
    pub structured: EstimatorStats,
}

/// Error of the running estimate at several sample counts of one sequence.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ErrorCurve {
    pub counts: Vec<usize>,
    pub errors: Vec<f64>,
    /// Least-squares slope of `ln error` against `ln count`.
    pub slope: f64,
}

struct Moments {
    count: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn zeros(len: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
        }
    }

    fn merge(&mut self, other: &Moments) {
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
    }
}

fn check_shapes(w: &DenseMatrix<f64>, dy: &DenseMatrix<f64>) -> Result<()> {
    if dy.cols() != w.rows() {
        return Err(shape_err(
            "theorem1_check",
            format!("dY with {} columns", w.rows()),
            format!("{}x{}", dy.rows(), dy.cols()),
        ));
    }
    Ok(())
}

fn sample_mask(family: MaskFamily, w: &DenseMatrix<f64>, pattern: NmPattern, seed: u64, i: usize) -> Result<Vec<bool>> {
    let (rows, cols) = w.shape();
    match family {
        MaskFamily::Bernoulli => {
            let s = pattern.density();
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            Ok((0..rows * cols).map(|_| rng.random::<f64>() < s).collect())
        }
        MaskFamily::Structured => {
            let mut rng = rng_from_seed(derive_seed(derive_seed(seed, STRUCTURED_STREAM), i as u64));
            Ok(NmMask::random_with(rows, cols, pattern, &mut rng)?.keep().to_vec())
        }
    }
}

/// One scaled sample `(1/s) dY (M ⊙ W)`.
fn sample_product(
    family: MaskFamily,
    w: &DenseMatrix<f64>,
    dy: &DenseMatrix<f64>,
    pattern: NmPattern,
    seed: u64,
    i: usize,
) -> Result<DenseMatrix<f64>> {
    let keep = sample_mask(family, w, pattern, seed, i)?;
    let inv = 1.0 / pattern.density();
    let data = w.as_slice().iter().zip(&keep).map(|(&v, &k)| if k { v * inv } else { 0.0 }).collect();
    let masked = DenseMatrix::from_vec(w.rows(), w.cols(), data)?;
    dy.matmul(&masked)
}

/// Running moments after each entry of `checkpoints` (ascending, last one is
/// the total sample count). Chunks are reduced in order so the result does
/// not depend on the thread count.
fn sample_moments(
    family: MaskFamily,
    w: &DenseMatrix<f64>,
    dy: &DenseMatrix<f64>,
    pattern: NmPattern,
    checkpoints: &[usize],
    seed: u64,
) -> Result<Vec<Moments>> {
    let total = checkpoints.last().copied().unwrap_or(0);
    let len = dy.rows() * w.cols();
    let chunks: Vec<(usize, usize)> = {
        // chunk boundaries include every checkpoint
        let mut bounds = vec![0];
        let mut cursor = 0;
        let mut cps = checkpoints.iter().peekable();
        while cursor < total {
            let mut next = cursor + CHUNK;
            while let Some(&&cp) = cps.peek() {
                if cp <= cursor {
                    cps.next();
                } else {
                    next = next.min(cp);
                    break;
                }
            }
            cursor = next.min(total);
            bounds.push(cursor);
        }
        bounds.windows(2).map(|b| (b[0], b[1])).collect()
    };
    let partial: Vec<Moments> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut m = Moments::zeros(len);
            for i in lo..hi {
                let p = sample_product(family, w, dy, pattern, seed, i)?;
                for ((s, q), &v) in m.sum.iter_mut().zip(m.sum_sq.iter_mut()).zip(p.as_slice()) {
                    *s += v;
                    *q += v * v;
                }
                m.count += 1;
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let mut running = Moments::zeros(len);
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut cps = checkpoints.iter().peekable();
    while cps.peek().is_some_and(|&&cp| cp == 0) {
        cps.next();
        out.push(Moments::zeros(len));
    }
    for m in &partial {
        running.merge(m);
        while cps.peek().is_some_and(|&&cp| cp == running.count) {
            cps.next();
            out.push(Moments {
                count: running.count,
                sum: running.sum.clone(),
                sum_sq: running.sum_sq.clone(),
            });
        }
    }
    Ok(out)
}

fn stats(family: MaskFamily, m: &Moments, exact: &DenseMatrix<f64>) -> EstimatorStats {
    let n = m.count.max(1) as f64;
    let mut diff_sq = 0.0;
    let mut max_diff = 0.0f64;
    let mut max_z = 0.0f64;
    let mut beyond = 0;
    for ((&s, &q), &e) in m.sum.iter().zip(&m.sum_sq).zip(exact.as_slice()) {
        let mean = s / n;
        let d = (mean - e).abs();
        diff_sq += d * d;
        max_diff = max_diff.max(d);
        let var = if m.count > 1 { ((q - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        let se = (var / n).sqrt();
        // differences at rounding level are not counted as deviations
        let tol = 1e-12 * (1.0 + e.abs());
        let z = if d <= tol { 0.0 } else if se > 0.0 { d / se } else { f64::INFINITY };
        max_z = max_z.max(z);
        if z > 4.0 {
            beyond += 1;
        }
    }
    let norm = exact.frobenius_norm();
    let max_abs = exact.max_abs();
    EstimatorStats {
        family,
        samples: m.count,
        rel_error: if norm > 0.0 { diff_sq.sqrt() / norm } else { diff_sq.sqrt() },
        max_rel_error: if max_abs > 0.0 { max_diff / max_abs } else { max_diff },
        max_z,
        beyond_4se: beyond,
        elements: exact.len(),
    }
}

/// Compares the masked estimator against `dY W` for both mask families.
pub fn theorem1_check(
    w: &DenseMatrix<f64>,
    dy: &DenseMatrix<f64>,
    pattern: NmPattern,
    samples: usize,
    seed: u64,
) -> Result<Theorem1Report> {
    check_shapes(w, dy)?;
    let exact = dy.matmul(w)?;
    let run = |family| -> Result<EstimatorStats> {
        let m = sample_moments(family, w, dy, pattern, &[samples], seed)?;
        Ok(stats(family, &m[0], &exact))
    };
    Ok(Theorem1Report {
        bernoulli: run(MaskFamily::Bernoulli)?,
        structured: run(MaskFamily::Structured)?,
    })
}

/// Relative error of the running estimate at each of `counts` (ascending),
/// all prefixes of one sample sequence.
pub fn theorem1_error_curve(
    w: &DenseMatrix<f64>,
    dy: &DenseMatrix<f64>,
    pattern: NmPattern,
    family: MaskFamily,
    counts: &[usize],
    seed: u64,
) -> Result<ErrorCurve> {
    check_shapes(w, dy)?;
    if counts.is_empty() || counts.windows(2).any(|c| c[0] >= c[1]) || counts[0] == 0 {
        return Err(crate::error::Error::InvalidArgument(
            "sample counts must be positive and strictly ascending".into(),
        ));
    }
    let exact = dy.matmul(w)?;
    let moments = sample_moments(family, w, dy, pattern, counts, seed)?;
    let errors: Vec<f64> = moments.iter().map(|m| stats(family, m, &exact).rel_error).collect();
    let xs: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|&e| e.ln()).collect();
    Ok(ErrorCurve {
        counts: counts.to_vec(),
        slope: least_squares_slope(&xs, &ys),
        errors,
    })
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
