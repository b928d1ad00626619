//! Multiply-accumulate counts and arithmetic intensity of a sparse plus
//! low-rank linear layer.
//!
//! Bytes touched count one read per operand element and one write per output
//! element, with no cache model.

use crate::error::{Error, Result};
use crate::nm::NmPattern;

/// Bytes per stored value (f32).
pub const ELEMENT_BYTES: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FlopReport {
    /// `b d_in d_out`.
    pub dense_flops: f64,
    /// `b d_in d_out n/m`.
    pub sparse_flops: f64,
    /// `b (d_in + d_out) r`.
    pub adapter_flops: f64,
    /// `(sparse + adapter) / dense`.
    pub ratio: f64,
    pub dense_intensity: f64,
    pub sparse_intensity: f64,
    /// Zero when `r = 0`.
    pub adapter_intensity: f64,
}

pub fn flop_model(b: usize, d_in: usize, d_out: usize, pattern: NmPattern, rank: usize) -> Result<FlopReport> {
    if b == 0 || d_in == 0 || d_out == 0 {
        return Err(Error::InvalidArgument("flop_model needs positive dimensions".into()));
    }
    let (bf, di, dout, r) = (b as f64, d_in as f64, d_out as f64, rank as f64);
    let s = pattern.density();
    let dense_flops = bf * di * dout;
    let sparse_flops = dense_flops * s;
    let adapter_flops = bf * (di + dout) * r;

    let x_bytes = bf * di * ELEMENT_BYTES;
    let y_bytes = bf * dout * ELEMENT_BYTES;
    let dense_bytes = x_bytes + di * dout * ELEMENT_BYTES + y_bytes;
    let index_bytes = di * dout / pattern.m() as f64 * pattern.index_bits() as f64 / 8.0;
    let sparse_bytes = x_bytes + s * di * dout * ELEMENT_BYTES + index_bytes + y_bytes;
    // X R^T then (X R^T) L^T: the b x r intermediate is written then read
    let adapter_bytes = x_bytes + r * di * ELEMENT_BYTES + 2.0 * bf * r * ELEMENT_BYTES + dout * r * ELEMENT_BYTES + y_bytes;
    Ok(FlopReport {
        dense_flops,
        sparse_flops,
        adapter_flops,
        ratio: (sparse_flops + adapter_flops) / dense_flops,
        dense_intensity: dense_flops / dense_bytes,
        sparse_intensity: sparse_flops / sparse_bytes,
        adapter_intensity: if rank == 0 { 0.0 } else { adapter_flops / adapter_bytes },
    })
}
