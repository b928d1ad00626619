//! Independent dense oracles and case generators shared by the integration
//! tests and the acceptance target. Everything here recomputes results from
//! decompressed or dense data with plain loops in f64.
#![allow(dead_code)]

use nmslope::nm::random_mask;
use nmslope::rng::{rng_from_seed, uniform, SeededRng};
use nmslope::sparse::{
    fused_sparse_lowrank_forward, plan_square_tiles, prune_and_compress, sparse_add, spmm, tiled_spmm,
    update_sparse_values, AdapterPair, TiledWeight,
};
use nmslope::train::{Batch, Linear, SparseLinearLayer, ToyModel};
use nmslope::{DenseMatrix, NmCompressed, NmMask, NmPattern, Orientation, Scalar};

pub const KERNEL_REL_TOL: f64 = 1e-5;

pub const PATTERNS: &[(usize, usize)] = &[(1, 2), (2, 4), (2, 8), (4, 8), (1, 4), (3, 4), (3, 3), (1, 1)];

pub fn pattern(n: usize, m: usize) -> NmPattern {
    NmPattern::new(n, m).unwrap()
}

/// Uniform integer in `lo..=hi`.
pub fn int_in(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    let x = uniform(rng, lo as f64, (hi + 1) as f64).floor() as usize;
    x.min(hi)
}

pub fn shuffled(len: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = int_in(rng, 0, i);
        p.swap(i, j);
    }
    p
}

/// `X W^T` by the textbook triple loop.
pub fn matmul_nt_oracle(x: &DenseMatrix<f64>, w: &DenseMatrix<f64>) -> DenseMatrix<f64> {
    assert_eq!(x.cols(), w.cols());
    DenseMatrix::from_fn(x.rows(), w.rows(), |i, o| (0..x.cols()).map(|k| x.get(i, k) * w.get(o, k)).sum())
}

/// `A B` by the textbook triple loop.
pub fn matmul_oracle(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> DenseMatrix<f64> {
    assert_eq!(a.cols(), b.rows());
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

/// Dense matrix with entry `(r, c)` zeroed wherever `mask` drops it.
pub fn masked_oracle(d: &DenseMatrix<f64>, mask: &NmMask) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(d.rows(), d.cols(), |r, c| if mask.is_kept(r, c) { d.get(r, c) } else { 0.0 })
}

/// `max |got - want| / max |want|`, or the absolute error when `want = 0`.
pub fn rel_err<T: Scalar>(got: &DenseMatrix<T>, want: &DenseMatrix<f64>) -> f64 {
    assert_eq!(got.shape(), want.shape(), "shape");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
        diff = diff.max((g.as_f64() - w).abs());
        scale = scale.max(w.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn frobenius(m: &DenseMatrix<f64>) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest singular value by power iteration on `A^T A`.
pub fn spectral_norm_oracle(a: &DenseMatrix<f64>) -> f64 {
    let (rows, cols) = a.shape();
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..2000 {
        let av: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| a.get(r, c) * v[c]).sum()).collect();
        let mut atav: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| a.get(r, c) * av[r]).sum()).collect();
        let norm = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        atav.iter_mut().for_each(|x| *x /= norm);
        let next = norm.sqrt();
        v = atav;
        if (next - sigma).abs() <= 1e-15 * next {
            sigma = next;
            break;
        }
        sigma = next;
    }
    sigma
}

/// Row-wise N:M mask that also satisfies N:M down every column: in each
/// `m x m` block, entry `(i, j)` is kept when `(sigma(j) - pi(i)) mod m < n`
/// for random permutations `pi`, `sigma`.
pub fn transposable_mask(rows: usize, cols: usize, p: NmPattern, rng: &mut SeededRng) -> NmMask {
    let (n, m) = (p.n(), p.m());
    assert!(rows.is_multiple_of(m) && cols.is_multiple_of(m));
    let mut keep = vec![false; rows * cols];
    for br in 0..rows / m {
        for bc in 0..cols / m {
            let pi = shuffled(m, rng);
            let sigma = shuffled(m, rng);
            for i in 0..m {
                for j in 0..m {
                    if (sigma[j] + m - pi[i]) % m < n {
                        keep[(br * m + i) * cols + bc * m + j] = true;
                    }
                }
            }
        }
    }
    NmMask::new(rows, cols, p, Orientation::Rows, keep).unwrap()
}

/// Random sizes and data for one kernel case.
pub struct KernelCase {
    pub pattern: NmPattern,
    pub b: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub x: DenseMatrix<f32>,
    pub w: NmCompressed<f32>,
    pub mask: NmMask,
    pub rng: SeededRng,
}

pub fn kernel_case(seed: u64, upsample: bool) -> KernelCase {
    let mut rng = rng_from_seed(seed);
    let (n, m) = PATTERNS[int_in(&mut rng, 0, PATTERNS.len() - 1)];
    let p = pattern(n, m);
    let b = int_in(&mut rng, 1, 40);
    let d_in = m * int_in(&mut rng, 1, (48 / m).max(1));
    let d_out = if upsample {
        d_in * int_in(&mut rng, 1, 4)
    } else {
        m * int_in(&mut rng, 1, (48 / m).max(1))
    };
    let x = DenseMatrix::<f32>::random_normal(b, d_in, 1.0, &mut rng);
    let dense = DenseMatrix::<f32>::random_normal(d_out, d_in, 1.0, &mut rng);
    let mask = random_mask(d_out, d_in, p, seed ^ 0x5eed).unwrap();
    let w = NmCompressed::compress(&dense, &mask).unwrap();
    KernelCase {
        pattern: p,
        b,
        d_in,
        d_out,
        x,
        w,
        mask,
        rng,
    }
}

pub fn check_spmm(seed: u64) -> f64 {
    let c = kernel_case(seed, false);
    let got = spmm(&c.x, &c.w).unwrap();
    rel_err(&got, &matmul_nt_oracle(&c.x.cast(), &c.w.decompress().cast()))
}

pub fn check_tiled_spmm(seed: u64) -> f64 {
    let c = kernel_case(seed, true);
    let plan = plan_square_tiles(c.d_out, c.d_in, c.pattern).unwrap();
    let tiled = TiledWeight::split(&c.w, &plan).unwrap();
    let got = tiled_spmm(&c.x, &tiled).unwrap();
    rel_err(&got, &matmul_nt_oracle(&c.x.cast(), &c.w.decompress().cast()))
}

pub fn check_fused(seed: u64) -> f64 {
    let mut c = kernel_case(seed, false);
    let rank = int_in(&mut c.rng, 0, c.d_in.min(c.d_out).min(8));
    let up = DenseMatrix::<f32>::random_normal(c.d_out, rank, 0.5, &mut c.rng);
    let down = DenseMatrix::<f32>::random_normal(rank, c.d_in, 0.5, &mut c.rng);
    let adapters = AdapterPair::new(up.clone(), down.clone()).unwrap();
    let got = fused_sparse_lowrank_forward(&c.x, &c.w, &adapters).unwrap();
    let lr = matmul_oracle(&up.cast(), &down.cast());
    let w_eff = DenseMatrix::from_fn(c.d_out, c.d_in, |r, k| c.w.decompress().get(r, k) as f64 + lr.get(r, k));
    rel_err(&got, &matmul_nt_oracle(&c.x.cast(), &w_eff))
}

pub fn check_sparse_add(seed: u64) -> f64 {
    let mut c = kernel_case(seed, false);
    let other = DenseMatrix::<f32>::random_normal(c.d_out, c.d_in, 1.0, &mut c.rng);
    let b = NmCompressed::compress(&other, &c.mask).unwrap();
    let beta = uniform(&mut c.rng, -2.0, 2.0) as f32;
    let gamma = uniform(&mut c.rng, -2.0, 2.0) as f32;
    let got = sparse_add(&c.w, &b, beta, gamma).unwrap();
    assert_eq!(got.codes(), c.w.codes());
    let (wa, wb): (DenseMatrix<f64>, DenseMatrix<f64>) = (c.w.decompress().cast(), b.decompress().cast());
    let want = DenseMatrix::from_fn(c.d_out, c.d_in, |r, k| beta as f64 * wa.get(r, k) + gamma as f64 * wb.get(r, k));
    rel_err(&got.decompress(), &want)
}

pub fn check_prune_and_compress(seed: u64) -> f64 {
    let mut c = kernel_case(seed, false);
    let g = DenseMatrix::<f32>::random_normal(c.d_out, c.d_in, 1.0, &mut c.rng);
    let packed = prune_and_compress(&g, &c.mask).unwrap();
    assert_eq!(packed.pattern(), c.pattern);
    rel_err(&packed.decompress(), &masked_oracle(&g.cast(), &c.mask))
}

pub fn check_update_sparse_values(seed: u64) -> f64 {
    let mut c = kernel_case(seed, false);
    let codes = c.w.codes().to_vec();
    let fresh = DenseMatrix::<f32>::random_normal(c.d_out, c.d_in, 1.0, &mut c.rng);
    let mut w = c.w.clone();
    update_sparse_values(&mut w, &fresh).unwrap();
    assert_eq!(w.codes(), &codes[..], "codes must not change");
    rel_err(&w.decompress(), &masked_oracle(&fresh.cast(), &c.mask))
}

/// Maps a case seed to the relative error of one kernel against its oracle.
pub type KernelCheck = fn(u64) -> f64;

/// Every kernel check by name.
pub const KERNEL_CHECKS: &[(&str, KernelCheck)] = &[
    ("spmm", check_spmm),
    ("tiled_spmm", check_tiled_spmm),
    ("fused_sparse_lowrank_forward", check_fused),
    ("sparse_add", check_sparse_add),
    ("prune_and_compress", check_prune_and_compress),
    ("update_sparse_values", check_update_sparse_values),
];

/// Replaces every double-pruned layer's mask with a transposable one,
/// keeping the kept weights' values.
pub fn install_transposable_masks(model: &mut ToyModel<f64>, seed: u64) {
    let mut rng = rng_from_seed(seed);
    for l in model.linears_mut() {
        let Some(s) = l.as_sparse() else { continue };
        let mask = transposable_mask(s.d_out(), s.d_in(), s.pattern(), &mut rng);
        let dense = s.w_fwd().decompress();
        let bias = s.bias().map(|b| b.to_vec());
        // fill dropped positions so no kept weight is zero
        let w = DenseMatrix::from_fn(dense.rows(), dense.cols(), |r, c| {
            let v = dense.get(r, c);
            if v == 0.0 {
                0.05 * (1.0 + ((r * 7 + c * 3) % 5) as f64)
            } else {
                v
            }
        });
        *l = Linear::Sparse(SparseLinearLayer::new(&w, mask, bias).unwrap());
    }
}

fn perturb(l: &mut Linear<f64>, r: usize, c: usize, delta: f64) {
    match l {
        Linear::Dense(d) => {
            let v = d.weight().get(r, c);
            d.weight_mut().set(r, c, v + delta);
        }
        Linear::Sparse(s) => {
            let mut w = s.w_fwd().decompress();
            w.set(r, c, w.get(r, c) + delta);
            s.set_weight_values(&w).unwrap();
        }
        Linear::Dynamic(_) => panic!("finite differences are not defined for the dynamic baseline"),
    }
}

/// Per-layer result of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct FdLayer {
    pub layer: usize,
    pub sparse: bool,
    pub checked: usize,
    /// `||g - fd|| / ||fd||` over the checked coordinates.
    pub rel_error: f64,
}

/// Central differences of the model loss against the analytic weight
/// gradient at up to `per_layer` stored coordinates of each linear layer
/// listed in `layers` (all layers when `None`).
pub fn finite_difference_check(
    model: &ToyModel<f64>,
    batch: &Batch<f64>,
    per_layer: usize,
    h: f64,
    layers: Option<&[usize]>,
) -> Vec<FdLayer> {
    let (_, grads) = model.loss_and_grads(batch).unwrap();
    let analytic: Vec<DenseMatrix<f64>> = grads.linears().iter().map(|g| g.weight_dense()).collect();
    let count = model.linears().len();
    let chosen: Vec<usize> = layers.map(|l| l.to_vec()).unwrap_or_else(|| (0..count).collect());
    let mut out = Vec::new();
    for k in chosen {
        let layer = model.linears()[k];
        let coords: Vec<(usize, usize)> = match layer.mask() {
            Some(mask) => (0..mask.rows())
                .flat_map(|r| (0..mask.cols()).map(move |c| (r, c)))
                .filter(|&(r, c)| mask.is_kept(r, c))
                .collect(),
            None => {
                let w = layer.effective_weight();
                (0..w.rows()).flat_map(|r| (0..w.cols()).map(move |c| (r, c))).collect()
            }
        };
        let stride = coords.len().div_ceil(per_layer).max(1);
        let (mut num, mut den, mut checked) = (0.0, 0.0, 0);
        for &(r, c) in coords.iter().step_by(stride) {
            let mut plus = model.clone();
            perturb(plus.linears_mut().swap_remove(k), r, c, h);
            let mut minus = model.clone();
            perturb(minus.linears_mut().swap_remove(k), r, c, -h);
            let fd = (plus.loss(batch).unwrap() - minus.loss(batch).unwrap()) / (2.0 * h);
            let g = analytic[k].get(r, c);
            num += (g - fd) * (g - fd);
            den += fd * fd;
            checked += 1;
        }
        out.push(FdLayer {
            layer: k,
            sparse: layer.mask().is_some(),
            checked,
            rel_error: if den == 0.0 { num.sqrt() } else { (num / den).sqrt() },
        });
    }
    out
}
