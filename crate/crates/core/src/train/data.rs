//! Toy datasets and batch sampling.

use rand::Rng;

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SeededRng};
use crate::scalar::Scalar;
use crate::train::config::{ModelKind, TrainConfig};

/// Book I of Cicero's *De finibus bonorum et malorum* (public domain).
pub const BUNDLED_CORPUS: &str = include_str!("../../data/corpus.txt");

const TEACHER_STREAM: u64 = 0x7ea0;

/// One training or evaluation batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch<T = f32> {
    Regression { x: DenseMatrix<T>, y: DenseMatrix<T> },
    /// `batch` sequences of `context` tokens, packed row-major.
    Tokens {
        inputs: Vec<usize>,
        targets: Vec<usize>,
        batch: usize,
        context: usize,
    },
}

/// Least-squares regression data from a fixed random teacher
/// `y = tanh(x A^T) B^T + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData<T = f32> {
    pub train_x: DenseMatrix<T>,
    pub train_y: DenseMatrix<T>,
    pub val_x: DenseMatrix<T>,
    pub val_y: DenseMatrix<T>,
}

impl<T: Scalar> RegressionData<T> {
    pub fn synthetic(input_dim: usize, output_dim: usize, samples: usize, noise: f64, val_fraction: f64, seed: u64) -> Result<Self> {
        if samples < 2 {
            return Err(Error::InvalidArgument("need at least two samples".into()));
        }
        let mut rng = rng_from_seed(derive_seed(seed, TEACHER_STREAM));
        let width = 32;
        let a = DenseMatrix::<f64>::random_normal(width, input_dim, 1.0 / (input_dim as f64).sqrt(), &mut rng);
        let b = DenseMatrix::<f64>::random_normal(output_dim, width, 1.0 / (width as f64).sqrt(), &mut rng);
        let x = DenseMatrix::<f64>::random_normal(samples, input_dim, 1.0, &mut rng);
        let hidden = x.matmul_nt(&a)?.map(f64::tanh);
        let mut y = hidden.matmul_nt(&b)?;
        y.axpy(noise, &DenseMatrix::random_normal(samples, output_dim, 1.0, &mut rng))?;
        let n_val = ((samples as f64 * val_fraction).round() as usize).clamp(1, samples - 1);
        let n_train = samples - n_val;
        Ok(Self {
            train_x: x.slice_rows(0, n_train)?.cast(),
            train_y: y.slice_rows(0, n_train)?.cast(),
            val_x: x.slice_rows(n_train, n_val)?.cast(),
            val_y: y.slice_rows(n_train, n_val)?.cast(),
        })
    }
}

/// Character-level corpus with a sorted vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TextData {
    pub vocab: Vec<char>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl TextData {
    /// Encodes `text`; the last `val_fraction` of characters is held out.
    pub fn from_text(text: &str, val_fraction: f64) -> Result<Self> {
        let mut vocab: Vec<char> = text.chars().collect();
        vocab.sort_unstable();
        vocab.dedup();
        let ids: Vec<usize> = text
            .chars()
            .map(|c| vocab.binary_search(&c).expect("char comes from the text"))
            .collect();
        if ids.len() < 4 {
            return Err(Error::InvalidArgument("corpus too small".into()));
        }
        let n_val = ((ids.len() as f64 * val_fraction).round() as usize).min(ids.len() / 2);
        let split = ids.len() - n_val;
        Ok(Self {
            vocab,
            train: ids[..split].to_vec(),
            val: ids[split..].to_vec(),
        })
    }

    pub fn bundled(val_fraction: f64) -> Result<Self> {
        Self::from_text(BUNDLED_CORPUS, val_fraction)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset<T = f32> {
    Regression(RegressionData<T>),
    Text(TextData),
}

impl<T: Scalar> Dataset<T> {
    /// Builds the dataset described by `config.data` for `config.model.kind`.
    pub fn for_config(config: &TrainConfig) -> Result<Self> {
        let d = &config.data;
        match config.model.kind {
            ModelKind::Mlp => Ok(Dataset::Regression(RegressionData::synthetic(
                config.model.input_dim,
                config.model.output_dim,
                d.samples,
                d.noise,
                d.val_fraction,
                config.train.seed,
            )?)),
            ModelKind::Lm => {
                let text = match &d.path {
                    Some(path) => TextData::from_text(&std::fs::read_to_string(path)?, d.val_fraction)?,
                    None => TextData::bundled(d.val_fraction)?,
                };
                Ok(Dataset::Text(text))
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Dataset::Regression(r) => r.train_x.rows() == 0,
            Dataset::Text(t) => t.train.len() < 2,
        }
    }

    /// Random training batch: rows with replacement for regression, random
    /// windows for text.
    pub fn sample_train(&self, batch: usize, context: usize, rng: &mut SeededRng) -> Result<Batch<T>> {
        match self {
            Dataset::Regression(r) => Ok(sample_rows(&r.train_x, &r.train_y, batch, rng)),
            Dataset::Text(t) => sample_windows(&t.train, batch, context, rng),
        }
    }

    /// Fixed evaluation batches drawn from the held-out split.
    pub fn validation_batches(&self, batch: usize, context: usize, count: usize, seed: u64) -> Result<Vec<Batch<T>>> {
        match self {
            Dataset::Regression(r) => Ok(vec![Batch::Regression {
                x: r.val_x.clone(),
                y: r.val_y.clone(),
            }]),
            Dataset::Text(t) => {
                let mut rng = rng_from_seed(seed);
                (0..count).map(|_| sample_windows(&t.val, batch, context, &mut rng)).collect()
            }
        }
    }
}

fn sample_rows<T: Scalar>(x: &DenseMatrix<T>, y: &DenseMatrix<T>, batch: usize, rng: &mut SeededRng) -> Batch<T> {
    let mut bx = DenseMatrix::zeros(batch, x.cols());
    let mut by = DenseMatrix::zeros(batch, y.cols());
    for r in 0..batch {
        let i = rng.random_range(0..x.rows());
        bx.row_mut(r).copy_from_slice(x.row(i));
        by.row_mut(r).copy_from_slice(y.row(i));
    }
    Batch::Regression { x: bx, y: by }
}

fn sample_windows<T>(ids: &[usize], batch: usize, context: usize, rng: &mut SeededRng) -> Result<Batch<T>> {
    if ids.len() <= context {
        return Err(Error::InvalidArgument(format!(
            "text split of {} tokens is too short for context {context}",
            ids.len()
        )));
    }
    let mut inputs = Vec::with_capacity(batch * context);
    let mut targets = Vec::with_capacity(batch * context);
    for _ in 0..batch {
        let start = rng.random_range(0..ids.len() - context);
        inputs.extend_from_slice(&ids[start..start + context]);
        targets.extend_from_slice(&ids[start + 1..start + context + 1]);
    }
    Ok(Batch::Tokens {
        inputs,
        targets,
        batch,
        context,
    })
}
