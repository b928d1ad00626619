use rayon::prelude::*;

use crate::dense::DenseMatrix;
use crate::error::{shape_err, Result};
use crate::nm::NmCompressed;
use crate::scalar::Scalar;

/// Output rows handed to one rayon task at minimum.
const MIN_ROWS_PER_TASK: usize = 16;

/// `Y = X * decompress(W)^T` for `X: b x k` and `W: d_out x k` pruned along `k`.
///
/// Each output element accumulates from zero over `W`'s groups in ascending
/// order and, inside a group, over the stored values in ascending column
/// order. Parallelism splits output columns only, so results do not depend
/// on the thread count.
pub fn spmm<T: Scalar>(x: &DenseMatrix<T>, w: &NmCompressed<T>) -> Result<DenseMatrix<T>> {
    check_spmm(x, w, "spmm")?;
    let xt = x.transpose();
    Ok(spmm_xt(&xt, w).transpose())
}

pub(crate) fn check_spmm<T: Scalar>(
    x: &DenseMatrix<T>,
    w: &NmCompressed<T>,
    op: &'static str,
) -> Result<()> {
    if x.cols() != w.cols() {
        return Err(shape_err(
            op,
            format!("X with {} columns", w.cols()),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    x.ensure_finite("spmm input")
}

/// Batch columns accumulated together in [`spmm_xt`].
const LANES: usize = 32;

/// One output row: `acc[j] = sum_t vals[t] * xs[cols[t] * b + j]`, summed in
/// `t` order.
#[inline(always)]
fn row_kernel_generic<T: Scalar>(vals: &[T], cols: &[usize], xs: &[T], b: usize, acc: &mut [T]) {
    let mut start = 0;
    while start + LANES <= b {
        let mut a = [T::zero(); LANES];
        for (&v, &c) in vals.iter().zip(cols) {
            let xr: &[T; LANES] = xs[c * b + start..c * b + start + LANES]
                .try_into()
                .expect("slice has LANES elements");
            for (aj, &xj) in a.iter_mut().zip(xr) {
                *aj = *aj + v * xj;
            }
        }
        acc[start..start + LANES].copy_from_slice(&a);
        start += LANES;
    }
    if start < b {
        let tail = &mut acc[start..];
        for (&v, &c) in vals.iter().zip(cols) {
            let xr = &xs[c * b + start..(c + 1) * b];
            for (a, &xv) in tail.iter_mut().zip(xr) {
                *a = *a + v * xv;
            }
        }
    }
}

// Wider vectors only; no FMA, so products and sums round exactly as in the
// portable path and results do not depend on the CPU.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn row_kernel_avx2<T: Scalar>(vals: &[T], cols: &[usize], xs: &[T], b: usize, acc: &mut [T]) {
    row_kernel_generic(vals, cols, xs, b, acc)
}

fn row_kernel<T: Scalar>(vals: &[T], cols: &[usize], xs: &[T], b: usize, acc: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { row_kernel_avx2(vals, cols, xs, b, acc) };
    }
    row_kernel_generic(vals, cols, xs, b, acc)
}

/// Kernel on a pre-transposed input: returns `Y^T` (`d_out x b`) from `X^T`
/// (`k x b`).
pub(crate) fn spmm_xt<T: Scalar>(xt: &DenseMatrix<T>, w: &NmCompressed<T>) -> DenseMatrix<T> {
    let b = xt.cols();
    let d_out = w.rows();
    let mut yt = DenseMatrix::<T>::zeros(d_out, b);
    if b == 0 || d_out == 0 {
        return yt;
    }
    let (n, m) = (w.pattern().n(), w.pattern().m());
    let groups = w.groups_per_row();
    let per_row = groups * n;
    let values = w.values();
    let offsets = w.offsets();
    let xs = xt.as_slice();
    // Register-blocked over LANES batch columns: the partial sums stay in
    // registers while every stored value of the row streams past. The
    // additions per output element still run in stored order.
    let mut all_cols = Vec::with_capacity(offsets.len());
    for group in offsets.chunks_exact(n * groups) {
        for (g, offs) in group.chunks_exact(n).enumerate() {
            all_cols.extend(offs.iter().map(|&o| g * m + o as usize));
        }
    }
    let accumulate = |o: usize, acc: &mut [T]| {
        let vals = &values[o * per_row..(o + 1) * per_row];
        let cols = &all_cols[o * per_row..(o + 1) * per_row];
        row_kernel(vals, cols, xs, b, acc);
    };
    let work = d_out * per_row * b;
    if work < 1 << 16 {
        for (o, acc) in yt.as_mut_slice().chunks_mut(b).enumerate() {
            accumulate(o, acc);
        }
    } else {
        yt.as_mut_slice()
            .par_chunks_mut(b)
            .with_min_len(MIN_ROWS_PER_TASK)
            .enumerate()
            .for_each(|(o, acc)| accumulate(o, acc));
    }
    yt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nm::{random_mask, NmMask, NmPattern, Orientation};
    use crate::rng::rng_from_seed;

    fn p(n: usize, m: usize) -> NmPattern {
        NmPattern::new(n, m).unwrap()
    }

    #[test]
    fn identity_weight_returns_input() {
        let mut rng = rng_from_seed(0);
        let x = DenseMatrix::<f32>::random_normal(3, 8, 1.0, &mut rng);
        let eye = DenseMatrix::<f32>::identity(8);
        let keep = eye.as_slice().iter().map(|&v| v != 0.0).collect();
        let mask = NmMask::new(8, 8, p(2, 4), Orientation::Both, keep).unwrap();
        let w = NmCompressed::compress(&eye, &mask).unwrap();
        assert_eq!(spmm(&x, &w).unwrap(), x);
    }

    #[test]
    fn hand_computed_dot_product() {
        let x = DenseMatrix::<f32>::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = DenseMatrix::<f32>::from_vec(1, 4, vec![0.0, 10.0, 0.0, -1.0]).unwrap();
        let mask = NmMask::new(1, 4, p(2, 4), Orientation::Rows, vec![false, true, false, true]).unwrap();
        let w = NmCompressed::compress(&d, &mask).unwrap();
        assert_eq!(spmm(&x, &w).unwrap().as_slice(), &[16.0]);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = rng_from_seed(42);
        let x = DenseMatrix::<f32>::random_normal(32, 64, 1.0, &mut rng);
        let d = DenseMatrix::<f32>::random_normal(16, 64, 1.0, &mut rng);
        let w = NmCompressed::compress(&d, &random_mask(16, 64, p(2, 4), 1).unwrap()).unwrap();
        let wd: DenseMatrix<f64> = w.decompress().cast();
        let xd: DenseMatrix<f64> = x.cast();
        let oracle = DenseMatrix::<f64>::from_fn(32, 16, |i, o| {
            (0..64).map(|k| xd.get(i, k) * wd.get(o, k)).sum()
        });
        let got: DenseMatrix<f64> = spmm(&x, &w).unwrap().cast();
        let err = got.sub(&oracle).unwrap().max_abs() / oracle.max_abs();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn accumulation_order_is_sequential() {
        // large-magnitude cancellation exposes any reordering
        let x = DenseMatrix::<f32>::from_vec(1, 8, vec![1e8, 1.0, -1e8, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let d = DenseMatrix::<f32>::from_vec(1, 8, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mask = NmMask::all_kept(1, 8, p(8, 8)).unwrap();
        let w = NmCompressed::compress(&d, &mask).unwrap();
        let expect = ((1e8f32 + 1.0) + -1e8) + 1.0;
        assert_eq!(spmm(&x, &w).unwrap().get(0, 0), expect);
    }

    #[test]
    fn rejects_bad_input() {
        let w = NmCompressed::compress(&DenseMatrix::<f32>::zeros(2, 4), &random_mask(2, 4, p(2, 4), 0).unwrap()).unwrap();
        assert!(spmm(&DenseMatrix::<f32>::zeros(1, 8), &w).is_err());
        let bad = DenseMatrix::<f32>::from_vec(1, 4, vec![f32::INFINITY, 0.0, 0.0, 0.0]).unwrap();
        assert!(spmm(&bad, &w).is_err());
    }
}
