//! Sparse weight plus a low-rank correction, `W_s + L R`.
//!
//! Naming: `up` is `L` (`d_out x r`) and `down` is `R` (`r x d_in`). The
//! down-projection is always applied to the input first, the up-projection
//! second: `Y = X W_s^T + (X R^T) L^T`.

use crate::dense::DenseMatrix;
use crate::error::{shape_err, Result};
use crate::nm::NmCompressed;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::sparse::spmm::{check_spmm, spmm, spmm_xt};

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair<T = f32> {
    up: DenseMatrix<T>,
    down: DenseMatrix<T>,
}

impl<T: Scalar> AdapterPair<T> {
    pub fn new(up: DenseMatrix<T>, down: DenseMatrix<T>) -> Result<Self> {
        let rank = up.cols();
        if down.rows() != rank {
            return Err(shape_err(
                "AdapterPair::new",
                format!("down with {rank} rows"),
                format!("{}x{}", down.rows(), down.cols()),
            ));
        }
        if rank > up.rows().min(down.cols()) {
            return Err(shape_err(
                "AdapterPair::new",
                format!("rank <= {}", up.rows().min(down.cols())),
                rank,
            ));
        }
        Ok(Self { up, down })
    }

    /// Rank-zero pair: no adapter path.
    pub fn absent(d_out: usize, d_in: usize) -> Self {
        Self {
            up: DenseMatrix::zeros(d_out, 0),
            down: DenseMatrix::zeros(0, d_in),
        }
    }

    /// `L = 0`, `R ~ U(-1/sqrt(d_in), 1/sqrt(d_in))`: the product starts at
    /// exactly zero.
    pub fn zero_product_init(d_out: usize, d_in: usize, rank: usize, rng: &mut SeededRng) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::new(
            DenseMatrix::zeros(d_out, rank),
            DenseMatrix::random_uniform(rank, d_in, -bound, bound, rng),
        )
    }

    pub fn rank(&self) -> usize {
        self.up.cols()
    }

    pub fn d_out(&self) -> usize {
        self.up.rows()
    }

    pub fn d_in(&self) -> usize {
        self.down.cols()
    }

    /// `L`, `d_out x r`.
    pub fn up(&self) -> &DenseMatrix<T> {
        &self.up
    }

    /// `R`, `r x d_in`.
    pub fn down(&self) -> &DenseMatrix<T> {
        &self.down
    }

    pub fn up_mut(&mut self) -> &mut DenseMatrix<T> {
        &mut self.up
    }

    pub fn down_mut(&mut self) -> &mut DenseMatrix<T> {
        &mut self.down
    }

    /// Dense `L R`.
    pub fn product(&self) -> DenseMatrix<T> {
        if self.rank() == 0 {
            return DenseMatrix::zeros(self.d_out(), self.d_in());
        }
        self.up.matmul(&self.down).expect("adapter shapes validated at construction")
    }
}

fn check_adapters<T: Scalar>(w: &NmCompressed<T>, adapters: &AdapterPair<T>) -> Result<()> {
    if adapters.d_out() != w.rows() || adapters.d_in() != w.cols() {
        return Err(shape_err(
            "fused_sparse_lowrank_forward",
            format!("adapters for {}x{}", w.rows(), w.cols()),
            format!("{}x{}", adapters.d_out(), adapters.d_in()),
        ));
    }
    Ok(())
}

/// `X (W_s + L R)^T` in one traversal of `X`.
///
/// The input is transposed once and shared by the sparse product `Y1` and the
/// down-projection `Y2 = X R^T`; the result is `Y1 + Y2 L^T`. `Y1` is
/// produced by the same kernel as [`spmm`], so with `L = 0` (or `r = 0`) the
/// output equals `spmm(X, W)` exactly.
pub fn fused_sparse_lowrank_forward<T: Scalar>(
    x: &DenseMatrix<T>,
    w: &NmCompressed<T>,
    adapters: &AdapterPair<T>,
) -> Result<DenseMatrix<T>> {
    check_spmm(x, w, "fused_sparse_lowrank_forward")?;
    check_adapters(w, adapters)?;
    let xt = x.transpose();
    let y1 = spmm_xt(&xt, w).transpose();
    if adapters.rank() == 0 {
        return Ok(y1);
    }
    // Y2^T = R X^T, r x b
    let y2t = adapters.down.matmul(&xt)?;
    let correction = y2t.matmul_tn(&adapters.up.transpose())?;
    y1.add(&correction)
}

/// Reference schedule with separate passes: sparse product, down-projection,
/// up-projection, add.
pub fn lowrank_forward_unfused<T: Scalar>(
    x: &DenseMatrix<T>,
    w: &NmCompressed<T>,
    adapters: &AdapterPair<T>,
) -> Result<DenseMatrix<T>> {
    check_adapters(w, adapters)?;
    let y1 = spmm(x, w)?;
    if adapters.rank() == 0 {
        return Ok(y1);
    }
    let y2 = x.matmul_nt(&adapters.down)?;
    let y = y2.matmul_nt(&adapters.up)?;
    y1.add(&y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nm::{random_mask, NmPattern};
    use crate::rng::rng_from_seed;

    fn setup(seed: u64) -> (DenseMatrix<f32>, NmCompressed<f32>, AdapterPair<f32>) {
        let mut rng = rng_from_seed(seed);
        let x = DenseMatrix::random_normal(8, 32, 1.0, &mut rng);
        let d = DenseMatrix::random_normal(32, 32, 1.0, &mut rng);
        let w = NmCompressed::compress(&d, &random_mask(32, 32, NmPattern::new(2, 4).unwrap(), seed).unwrap()).unwrap();
        let a = AdapterPair::new(
            DenseMatrix::random_normal(32, 4, 1.0, &mut rng),
            DenseMatrix::random_normal(4, 32, 1.0, &mut rng),
        )
        .unwrap();
        (x, w, a)
    }

    #[test]
    fn rank_zero_and_zero_up_equal_spmm() {
        let (x, w, a) = setup(1);
        let plain = spmm(&x, &w).unwrap();
        assert_eq!(fused_sparse_lowrank_forward(&x, &w, &AdapterPair::absent(32, 32)).unwrap(), plain);
        let zero_up = AdapterPair::new(DenseMatrix::zeros(32, 4), a.down().clone()).unwrap();
        assert_eq!(fused_sparse_lowrank_forward(&x, &w, &zero_up).unwrap(), plain);
    }

    #[test]
    fn matches_dense_composition() {
        let (x, w, a) = setup(2);
        let xd: DenseMatrix<f64> = x.cast();
        let total: DenseMatrix<f64> = w.decompress().cast::<f64>().add(&a.product().cast()).unwrap();
        let oracle = DenseMatrix::<f64>::from_fn(8, 32, |i, o| (0..32).map(|k| xd.get(i, k) * total.get(o, k)).sum());
        let got: DenseMatrix<f64> = fused_sparse_lowrank_forward(&x, &w, &a).unwrap().cast();
        assert!(got.sub(&oracle).unwrap().max_abs() / oracle.max_abs() <= 1e-5);
        let unfused: DenseMatrix<f64> = lowrank_forward_unfused(&x, &w, &a).unwrap().cast();
        assert!(got.sub(&unfused).unwrap().max_abs() / unfused.max_abs() <= 1e-6);
    }

    #[test]
    fn adapter_validation() {
        assert!(AdapterPair::<f32>::new(DenseMatrix::zeros(4, 2), DenseMatrix::zeros(3, 4)).is_err());
        assert!(AdapterPair::<f32>::new(DenseMatrix::zeros(2, 3), DenseMatrix::zeros(3, 8)).is_err());
        let (x, w, _) = setup(3);
        assert!(fused_sparse_lowrank_forward(&x, &w, &AdapterPair::absent(16, 32)).is_err());
        let mut rng = rng_from_seed(0);
        let a = AdapterPair::<f32>::zero_product_init(32, 16, 2, &mut rng).unwrap();
        assert_eq!(a.product().max_abs(), 0.0);
        assert!(a.down().max_abs() <= 0.25);
    }
}
