//! Time series over a run: adapter convergence and mask churn.

use crate::error::{shape_err, Result};
use crate::nm::NmMask;
use crate::scalar::Scalar;
use crate::sparse::AdapterPair;

/// Cosine of two flattened tensors; zero if either has zero norm.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity needs equal lengths");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AdapterCosine {
    pub up: f64,
    pub down: f64,
}

/// For each snapshot, the cosine of every layer's adapter factors against the
/// same layer's factors in `last`, averaged over layers.
pub fn adapter_convergence<T: Scalar>(
    snapshots: &[Vec<AdapterPair<T>>],
    last: &[AdapterPair<T>],
) -> Result<Vec<AdapterCosine>> {
    let mut out = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        if snap.len() != last.len() {
            return Err(shape_err("adapter_convergence", format!("{} layers", last.len()), snap.len()));
        }
        if last.is_empty() {
            out.push(AdapterCosine { up: 0.0, down: 0.0 });
            continue;
        }
        let (mut up, mut down) = (0.0, 0.0);
        for (a, b) in snap.iter().zip(last) {
            if a.up().shape() != b.up().shape() || a.down().shape() != b.down().shape() {
                return Err(shape_err(
                    "adapter_convergence",
                    format!("rank {} adapters", b.rank()),
                    format!("rank {}", a.rank()),
                ));
            }
            up += cosine_similarity(a.up().as_slice(), b.up().as_slice());
            down += cosine_similarity(a.down().as_slice(), b.down().as_slice());
        }
        let k = last.len() as f64;
        out.push(AdapterCosine { up: up / k, down: down / k });
    }
    Ok(out)
}

/// Fraction of mask entries differing from the last (converged) snapshot,
/// pooled over all layers. Consecutive snapshots that share an allocation
/// reuse the previous result.
pub fn mask_change_series<S: AsRef<Vec<NmMask>>>(snapshots: &[S]) -> Result<Vec<f64>> {
    let Some(last) = snapshots.last() else {
        return Ok(Vec::new());
    };
    let last = last.as_ref();
    let mut out: Vec<f64> = Vec::with_capacity(snapshots.len());
    let mut prev: Option<&Vec<NmMask>> = None;
    for snap in snapshots {
        let cur = snap.as_ref();
        if let (Some(p), Some(&v)) = (prev, out.last()) {
            if std::ptr::eq(p, cur) {
                out.push(v);
                continue;
            }
        }
        prev = Some(cur);
        if std::ptr::eq(cur, last) {
            out.push(0.0);
            continue;
        }
        if cur.len() != last.len() {
            return Err(shape_err("mask_change_series", format!("{} masks", last.len()), cur.len()));
        }
        let (mut changed, mut total) = (0.0, 0usize);
        for (a, b) in cur.iter().zip(last) {
            changed += a.hamming_fraction(b)? * a.keep().len() as f64;
            total += a.keep().len();
        }
        out.push(if total == 0 { 0.0 } else { changed / total as f64 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::DenseMatrix;
    use crate::nm::{random_mask, NmPattern};
    use std::sync::Arc;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_similarity(&[1.0f64, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn convergence_ends_at_one() {
        let a = AdapterPair::new(DenseMatrix::<f64>::filled(4, 2, 1.0), DenseMatrix::filled(2, 4, 1.0)).unwrap();
        let b = AdapterPair::new(
            DenseMatrix::<f64>::from_fn(4, 2, |r, c| (r + c) as f64),
            DenseMatrix::from_fn(2, 4, |r, c| (r * c) as f64 + 1.0),
        )
        .unwrap();
        let series = adapter_convergence(&[vec![a], vec![b.clone()]], &[b]).unwrap();
        assert!(series[0].up < 1.0);
        assert!((series[1].up - 1.0).abs() < 1e-12 && (series[1].down - 1.0).abs() < 1e-12);
        let wrong = AdapterPair::<f64>::absent(4, 4);
        let c = AdapterPair::new(DenseMatrix::<f64>::filled(4, 1, 1.0), DenseMatrix::filled(1, 4, 1.0)).unwrap();
        assert!(adapter_convergence(&[vec![wrong]], &[c]).is_err());
    }

    #[test]
    fn mask_series() {
        let p = NmPattern::new(2, 4).unwrap();
        let a = Arc::new(vec![random_mask(8, 8, p, 1).unwrap()]);
        let b = Arc::new(vec![random_mask(8, 8, p, 2).unwrap()]);
        let s = mask_change_series(&[a.clone(), a.clone(), b.clone(), b]).unwrap();
        assert!(s[0] > 0.0);
        assert_eq!(s[0], s[1]);
        assert_eq!(s[2], 0.0);
        assert_eq!(s[3], 0.0);
        let short: Arc<Vec<NmMask>> = Arc::new(vec![]);
        assert!(mask_change_series(&[a, short]).is_err());
    }
}
