//! Elementwise kernels on compressed matrices sharing one sparsity pattern.

use crate::dense::DenseMatrix;
use crate::error::{shape_err, Error, Result};
use crate::nm::{NmCompressed, NmMask};
use crate::scalar::Scalar;

/// `beta * A + gamma * B` for two matrices with identical shape, pattern and
/// index codes. The result keeps those codes.
pub fn sparse_add<T: Scalar>(
    a: &NmCompressed<T>,
    b: &NmCompressed<T>,
    beta: T,
    gamma: T,
) -> Result<NmCompressed<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "sparse_add",
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    if a.pattern() != b.pattern() || a.codes() != b.codes() {
        return Err(Error::PatternMismatch {
            op: "sparse_add",
            detail: "operands do not share index codes".into(),
        });
    }
    let mut out = a.clone();
    for (o, &bv) in out.values_mut().iter_mut().zip(b.values()) {
        *o = beta * *o + gamma * bv;
    }
    Ok(out)
}

/// Masks a dense gradient with the layer mask and packs the survivors.
pub fn prune_and_compress<T: Scalar>(g: &DenseMatrix<T>, mask: &NmMask) -> Result<NmCompressed<T>> {
    NmCompressed::compress(g, mask)
}

/// Copies `w_new` into `w` at its stored positions; `w`'s codes are unchanged.
pub fn update_sparse_values<T: Scalar>(w: &mut NmCompressed<T>, w_new: &DenseMatrix<T>) -> Result<()> {
    w.update_values(w_new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nm::{random_mask, NmPattern};
    use crate::rng::rng_from_seed;

    fn pair(seed: u64) -> (NmCompressed<f64>, NmCompressed<f64>, NmMask) {
        let mut rng = rng_from_seed(seed);
        let pattern = NmPattern::new(2, 4).unwrap();
        let mask = random_mask(8, 16, pattern, seed).unwrap();
        let a = DenseMatrix::random_normal(8, 16, 1.0, &mut rng);
        let b = DenseMatrix::random_normal(8, 16, 1.0, &mut rng);
        (
            NmCompressed::compress(&a, &mask).unwrap(),
            NmCompressed::compress(&b, &mask).unwrap(),
            mask,
        )
    }

    #[test]
    fn sparse_add_degenerate_cases() {
        let (a, b, _) = pair(1);
        assert_eq!(sparse_add(&a, &b, 1.0, 0.0).unwrap(), a);
        // 1/gamma = 1, alpha = 0: gradient passes through unchanged
        let gamma = 1.0;
        let alpha = 0.0;
        assert_eq!(sparse_add(&a, &b, 1.0 / gamma, alpha).unwrap(), a);
    }

    #[test]
    fn sparse_add_matches_dense() {
        let (a, b, _) = pair(2);
        let out = sparse_add(&a, &b, 0.5, -3.0).unwrap();
        let mut expect = a.decompress().scale(0.5);
        expect.axpy(-3.0, &b.decompress()).unwrap();
        assert_eq!(out.decompress(), expect);
        assert_eq!(out.codes(), a.codes());
    }

    #[test]
    fn sparse_add_rejects_other_codes() {
        let (a, _, _) = pair(3);
        let (b, _, _) = pair(4);
        assert!(matches!(sparse_add(&a, &b, 1.0, 1.0), Err(Error::PatternMismatch { .. })));
    }

    #[test]
    fn prune_and_compress_masks() {
        let (_, _, mask) = pair(5);
        let zero = prune_and_compress(&DenseMatrix::<f64>::zeros(8, 16), &mask).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let mut rng = rng_from_seed(9);
        let g = DenseMatrix::<f64>::random_normal(8, 16, 1.0, &mut rng);
        let c = prune_and_compress(&g, &mask).unwrap();
        assert_eq!(c.decompress(), mask.apply(&g).unwrap());
        assert!(prune_and_compress(&DenseMatrix::<f64>::zeros(8, 8), &mask).is_err());
    }

    #[test]
    fn update_keeps_codes() {
        let (mut a, _, mask) = pair(6);
        let codes = a.codes().to_vec();
        let mut rng = rng_from_seed(10);
        let w_new = DenseMatrix::<f64>::random_normal(8, 16, 1.0, &mut rng);
        update_sparse_values(&mut a, &w_new).unwrap();
        assert_eq!(a.codes(), codes.as_slice());
        assert_eq!(a.decompress(), mask.apply(&w_new).unwrap());
        assert!(update_sparse_values(&mut a, &DenseMatrix::zeros(4, 16)).is_err());
    }
}
