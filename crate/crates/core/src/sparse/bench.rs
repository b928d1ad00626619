//! Micro-benchmark harness for the sparse kernels.

use std::time::Instant;

use crate::dense::DenseMatrix;
use crate::error::Result;
use crate::nm::{random_mask, NmCompressed, NmPattern};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sparse::{fused_sparse_lowrank_forward, plan_square_tiles, spmm, tiled_spmm, AdapterPair, TiledWeight};

/// One CSV row: `op, shape, pattern, median_ns`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchRow {
    pub op: String,
    pub shape: String,
    pub pattern: String,
    pub median_ns: u128,
}

/// Median wall time of `reps` calls to `f`, in nanoseconds.
pub fn median_ns(reps: usize, mut f: impl FnMut()) -> u128 {
    let mut samples: Vec<u128> = (0..reps.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos()
        })
        .collect();
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Times dense matmul, SpMM, tiled SpMM (upsample shapes) and the fused
/// low-rank forward for a `batch x d_in` input against a `d_out x d_in` weight.
pub fn bench_spmm(
    batch: usize,
    d_out: usize,
    d_in: usize,
    pattern: NmPattern,
    rank: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rng = rng_from_seed(seed);
    let x = DenseMatrix::<f32>::random_normal(batch, d_in, 1.0, &mut rng);
    let dense = DenseMatrix::<f32>::random_normal(d_out, d_in, 1.0, &mut rng);
    let mask = random_mask(d_out, d_in, pattern, derive_seed(seed, 1))?;
    let w = NmCompressed::compress(&dense, &mask)?;
    let shape = format!("{batch}x{d_in}x{d_out}");
    let row = |op: &str, ns| BenchRow {
        op: op.to_string(),
        shape: shape.clone(),
        pattern: pattern.to_string(),
        median_ns: ns,
    };
    let mut rows = vec![
        row("dense_matmul", median_ns(reps, || {
            std::hint::black_box(x.matmul_nt(&dense).unwrap());
        })),
        row("spmm", median_ns(reps, || {
            std::hint::black_box(spmm(&x, &w).unwrap());
        })),
    ];
    if d_out > d_in && d_out.is_multiple_of(d_in) {
        let tiled = TiledWeight::split(&w, &plan_square_tiles(d_out, d_in, pattern)?)?;
        rows.push(row("tiled_spmm", median_ns(reps, || {
            std::hint::black_box(tiled_spmm(&x, &tiled).unwrap());
        })));
    }
    if rank > 0 {
        let adapters = AdapterPair::new(
            DenseMatrix::random_normal(d_out, rank, 1.0, &mut rng),
            DenseMatrix::random_normal(rank, d_in, 1.0, &mut rng),
        )?;
        rows.push(row("fused_sparse_lowrank", median_ns(reps, || {
            std::hint::black_box(fused_sparse_lowrank_forward(&x, &w, &adapters).unwrap());
        })));
    }
    Ok(rows)
}
