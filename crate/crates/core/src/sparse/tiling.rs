//! Square tiling of upsample weights (`d_out = c * d_in`).
//!
//! An upsample matrix is cut along its output rows into `c` square
//! `d_in x d_in` tiles; each tile is multiplied separately and the partial
//! outputs are concatenated. Square and downsample shapes are not split.

use crate::dense::DenseMatrix;
use crate::error::{shape_err, Error, Result};
use crate::nm::{NmCompressed, NmPattern};
use crate::scalar::Scalar;
use crate::sparse::spmm::{check_spmm, spmm_xt};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    tile_side: usize,
    /// `(row_offset, col_offset)` of each tile, in row order.
    tiles: Vec<(usize, usize)>,
    rows: usize,
    cols: usize,
}

impl TilePlan {
    pub fn tile_side(&self) -> usize {
        self.tile_side
    }

    pub fn tiles(&self) -> &[(usize, usize)] {
        &self.tiles
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Plans square tiles of side `d_in` for a `d_out x d_in` weight.
pub fn plan_square_tiles(d_out: usize, d_in: usize, pattern: NmPattern) -> Result<TilePlan> {
    pattern.check_divisible(d_in)?;
    pattern.check_divisible(d_out)?;
    if d_in == 0 || d_out < d_in || !d_out.is_multiple_of(d_in) {
        return Err(Error::InvalidArgument(format!(
            "square tiling needs d_out to be a positive multiple of d_in, got {d_out}x{d_in}"
        )));
    }
    Ok(TilePlan {
        tile_side: d_in,
        tiles: (0..d_out / d_in).map(|i| (i * d_in, 0)).collect(),
        rows: d_out,
        cols: d_in,
    })
}

/// A compressed weight split according to a [`TilePlan`].
#[derive(Debug, Clone, PartialEq)]
pub struct TiledWeight<T = f32> {
    plan: TilePlan,
    tiles: Vec<NmCompressed<T>>,
}

impl<T: Scalar> TiledWeight<T> {
    pub fn split(w: &NmCompressed<T>, plan: &TilePlan) -> Result<Self> {
        if w.shape() != plan.shape() {
            return Err(shape_err(
                "TiledWeight::split",
                format!("{}x{}", plan.rows, plan.cols),
                format!("{}x{}", w.rows(), w.cols()),
            ));
        }
        let tiles = plan
            .tiles
            .iter()
            .map(|&(row, _)| w.row_block(row, plan.tile_side))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            plan: plan.clone(),
            tiles,
        })
    }

    pub fn plan(&self) -> &TilePlan {
        &self.plan
    }

    pub fn tiles(&self) -> &[NmCompressed<T>] {
        &self.tiles
    }
}

/// Runs SpMM tile by tile and concatenates the outputs along columns.
pub fn tiled_spmm<T: Scalar>(x: &DenseMatrix<T>, w: &TiledWeight<T>) -> Result<DenseMatrix<T>> {
    let Some(first) = w.tiles.first() else {
        return Err(Error::InvalidArgument("tiled weight has no tiles".into()));
    };
    check_spmm(x, first, "tiled_spmm")?;
    let xt = x.transpose();
    let parts: Vec<DenseMatrix<T>> = w.tiles.iter().map(|t| spmm_xt(&xt, t)).collect();
    let mut yt_rows = Vec::with_capacity(w.plan.rows * x.rows());
    for part in &parts {
        yt_rows.extend_from_slice(part.as_slice());
    }
    Ok(DenseMatrix::from_vec(w.plan.rows, x.rows(), yt_rows)?.transpose())
}
