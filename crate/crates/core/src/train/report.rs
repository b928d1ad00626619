//! Run artifacts: the per-iteration CSV, the JSON summary and checkpoints.
//!
//! A checkpoint directory holds one file per tensor plus `manifest.json`.
//! Pruned weights use the `NMC1` encoding. Everything else uses `DNS1`:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DNS1"
//! 4       4     rows (u32, little-endian)
//! 8       4     cols (u32, little-endian)
//! 12      1     dtype tag (1 = f32, 2 = f64)
//! 13      3     reserved, 0
//! 16      ...   rows * cols values, row-major, little-endian
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::nm::format;
use crate::scalar::{Dtype, Scalar};
use crate::train::layer::Linear;
use crate::train::model::ToyModel;
use crate::train::nn::LayerNorm;
use crate::train::trainer::RunReport;

pub const DENSE_MAGIC: &[u8; 4] = b"DNS1";

/// Per-iteration CSV: `iteration,loss,lr,adapter_cosine,mask_diff`, then a
/// `# config-hash` footer. `adapter_cosine` is empty while adapters are off.
pub fn report_csv(report: &RunReport) -> String {
    let mut out = String::from("iteration,loss,lr,adapter_cosine,mask_diff\n");
    for t in 0..report.iterations {
        let cos = report.adapter_cosine[t].map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            t, report.losses[t], report.lrs[t], cos, report.mask_diff[t]
        );
    }
    let _ = writeln!(out, "# config-hash {}", report.config_hash);
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary<'a> {
    pub config_hash: &'a str,
    pub iterations: usize,
    pub final_train_loss: f64,
    pub final_window: usize,
    pub final_val_loss: f64,
    pub final_val_perplexity: Option<f64>,
    pub adapter_rank: usize,
    pub adapter_start: Option<usize>,
    pub adapters_used: bool,
    pub adapter_note: &'static str,
    pub final_adapter_cosine: Option<f64>,
    pub first_mask_diff: f64,
    pub last_mask_diff: f64,
    pub mask_stasis: bool,
    pub parameter_count: usize,
    pub wall_time_secs: f64,
}

impl<'a> RunSummary<'a> {
    pub fn new(report: &'a RunReport) -> Self {
        Self {
            config_hash: &report.config_hash,
            iterations: report.iterations,
            final_train_loss: report.final_train_loss,
            final_window: report.final_window,
            final_val_loss: report.final_val_loss,
            final_val_perplexity: report.final_val_perplexity,
            adapter_rank: report.adapter_rank,
            adapter_start: report.adapter_start,
            adapters_used: report.adapters_used,
            adapter_note: report.adapter_note(),
            final_adapter_cosine: report.adapter_cosine.last().copied().flatten(),
            first_mask_diff: report.mask_diff.first().copied().unwrap_or(0.0),
            last_mask_diff: report.mask_diff.last().copied().unwrap_or(0.0),
            mask_stasis: report.mask_stasis,
            parameter_count: report.parameter_count,
            wall_time_secs: report.wall_time_secs,
        }
    }
}

pub fn summary_json(report: &RunReport) -> String {
    serde_json::to_string_pretty(&RunSummary::new(report)).expect("summary serializes")
}

pub fn encode_dense<T: Scalar>(m: &DenseMatrix<T>) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Format("rows exceed u32".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Format("cols exceed u32".into()))?;
    let mut out = Vec::with_capacity(16 + m.len() * T::DTYPE.size_bytes());
    out.extend_from_slice(DENSE_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&[T::DTYPE.tag(), 0, 0, 0]);
    for &v in m.as_slice() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode_dense<T: Scalar>(bytes: &[u8]) -> Result<DenseMatrix<T>> {
    if bytes.len() < 16 || &bytes[..4] != DENSE_MAGIC {
        return Err(Error::Format("missing DNS1 header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if Dtype::from_tag(bytes[12]) != Some(T::DTYPE) {
        return Err(Error::Format(format!("dtype tag {} does not match {:?}", bytes[12], T::DTYPE)));
    }
    if bytes[13..16] != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    let size = T::DTYPE.size_bytes();
    let body = &bytes[16..];
    if body.len() != rows * cols * size {
        return Err(Error::Format(format!(
            "expected {} value bytes, found {}",
            rows * cols * size,
            body.len()
        )));
    }
    let data = body.chunks_exact(size).map(T::read_le).collect();
    DenseMatrix::from_vec(rows, cols, data)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    /// `NMC1` or `DNS1`.
    pub format: String,
    pub rows: usize,
    pub cols: usize,
    /// `N:M` for pruned weights.
    pub pattern: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub iteration: usize,
    pub dtype: String,
    pub tensors: Vec<ManifestEntry>,
}

enum Tensor<T> {
    Packed(Vec<u8>, usize, usize, String),
    Dense(DenseMatrix<T>),
}

fn row_vector<T: Scalar>(v: &[T]) -> DenseMatrix<T> {
    DenseMatrix::from_vec(1, v.len(), v.to_vec()).expect("length matches")
}

fn push_linear<T: Scalar>(out: &mut Vec<(String, Tensor<T>)>, name: &str, l: &Linear<T>) -> Result<()> {
    match l {
        Linear::Dense(d) => out.push((format!("{name}.weight"), Tensor::Dense(d.weight().clone()))),
        Linear::Dynamic(d) => out.push((format!("{name}.weight"), Tensor::Dense(d.weight().clone()))),
        Linear::Sparse(s) => {
            let w = s.w_fwd();
            out.push((
                format!("{name}.weight"),
                Tensor::Packed(format::encode(w)?, w.rows(), w.cols(), w.pattern().to_string()),
            ));
            if s.adapter_active() {
                out.push((format!("{name}.adapter_up"), Tensor::Dense(s.adapters().up().clone())));
                out.push((format!("{name}.adapter_down"), Tensor::Dense(s.adapters().down().clone())));
            }
        }
    }
    if let Some(b) = l.bias() {
        out.push((format!("{name}.bias"), Tensor::Dense(row_vector(b))));
    }
    Ok(())
}

fn push_norm<T: Scalar>(out: &mut Vec<(String, Tensor<T>)>, name: &str, ln: &LayerNorm<T>) {
    out.push((format!("{name}.gamma"), Tensor::Dense(row_vector(&ln.gamma))));
    out.push((format!("{name}.beta"), Tensor::Dense(row_vector(&ln.beta))));
}

fn model_tensors<T: Scalar>(model: &ToyModel<T>) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    match model {
        ToyModel::Mlp(m) => {
            for (i, l) in m.layers.iter().enumerate() {
                push_linear(&mut out, &format!("layer{i}"), l)?;
            }
        }
        ToyModel::Lm(m) => {
            out.push(("tok".into(), Tensor::Dense(m.tok.table.clone())));
            out.push(("pos".into(), Tensor::Dense(m.pos.table.clone())));
            for (i, b) in m.blocks.iter().enumerate() {
                push_norm(&mut out, &format!("block{i}.ln1"), &b.ln1);
                for (part, l) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("o", &b.o)] {
                    push_linear(&mut out, &format!("block{i}.{part}"), l)?;
                }
                push_norm(&mut out, &format!("block{i}.ln2"), &b.ln2);
                push_linear(&mut out, &format!("block{i}.up"), &b.up)?;
                push_linear(&mut out, &format!("block{i}.down"), &b.down)?;
            }
            push_norm(&mut out, "ln_f", &m.ln_f);
            push_linear(&mut out, "head", &m.head)?;
        }
    }
    Ok(out)
}

/// Writes every model tensor into `dir` (created if missing) and a
/// `manifest.json` listing them in write order.
pub fn write_checkpoint<T: Scalar>(
    model: &ToyModel<T>,
    config_hash: &str,
    iteration: usize,
    dir: &Path,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, tensor) in model_tensors(model)? {
        let (bytes, fmt, rows, cols, pattern, ext) = match tensor {
            Tensor::Packed(bytes, r, c, p) => (bytes, "NMC1", r, c, Some(p), "nmc"),
            Tensor::Dense(m) => (encode_dense(&m)?, "DNS1", m.rows(), m.cols(), None, "dns"),
        };
        let file = format!("{name}.{ext}");
        fs::write(dir.join(&file), bytes)?;
        entries.push(ManifestEntry {
            name,
            file,
            format: fmt.into(),
            rows,
            cols,
            pattern,
        });
    }
    let manifest = Manifest {
        config_hash: config_hash.into(),
        iteration,
        dtype: format!("{:?}", T::DTYPE).to_lowercase(),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}
