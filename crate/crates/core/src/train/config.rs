//! Experiment description and its flat `key = value` text form.
//!
//! One assignment per line, `#` starts a comment line, blank lines are
//! ignored. Keys carry a section prefix (`model.`, `sparsity.`, `adapter.`,
//! `optimizer.`, `train.`, `data.`). Unknown or repeated keys are errors.
//! Missing keys take the defaults of [`TrainConfig::default`].

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nm::NmPattern;
use crate::scalar::Dtype;
use crate::train::optim::{LrSchedule, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Stack of linear layers with GELU, mean-squared error.
    Mlp,
    /// Decoder-only character language model.
    Lm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrunedModules {
    Mlp,
    MlpAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    StaticRandom,
    StaticMagnitude,
    /// Magnitude mask recomputed every step, decay on pruned weights.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Linear layers for the MLP, transformer blocks for the LM.
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub context: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityConfig {
    /// Pattern of the first half of the blocks; `None` is dense.
    pub first_half: Option<NmPattern>,
    /// Pattern of the second half of the blocks.
    pub second_half: Option<NmPattern>,
    pub modules: PrunedModules,
    pub mask: MaskMode,
    /// Decay on pruned weights for the dynamic baseline.
    pub decay: f64,
    /// Keep the first linear layer after the input dense.
    pub dense_first: bool,
    /// Keep the output head dense.
    pub dense_head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    /// Adapter rank as a fraction of the hidden size.
    pub rank_ratio: f64,
    /// Fraction of the run, at the end, during which adapters train.
    pub lazy_fraction: f64,
    pub weight_decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_scale: f64,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
    pub eval_batches: usize,
    pub dtype: Dtype,
    /// Record the model mask every this many iterations (dynamic baseline).
    pub mask_log_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Text file for the LM; the bundled corpus when absent.
    pub path: Option<String>,
    /// Regression samples for the MLP.
    pub samples: usize,
    pub noise: f64,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub sparsity: SparsityConfig,
    pub adapter: AdapterConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let p24 = NmPattern::new(2, 4).expect("valid");
        Self {
            model: ModelSpec {
                kind: ModelKind::Mlp,
                layers: 2,
                hidden: 64,
                heads: 4,
                context: 32,
                input_dim: 16,
                output_dim: 8,
            },
            sparsity: SparsityConfig {
                first_half: Some(p24),
                second_half: Some(p24),
                modules: PrunedModules::Mlp,
                mask: MaskMode::StaticRandom,
                decay: 2e-4,
                dense_first: false,
                dense_head: true,
            },
            adapter: AdapterConfig {
                rank_ratio: 0.0,
                lazy_fraction: 0.01,
                weight_decay: false,
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
                grad_scale: 1.0,
                schedule: LrSchedule::Constant,
            },
            train: TrainSection {
                iterations: 200,
                batch: 32,
                seed: 0,
                eval_batches: 4,
                dtype: Dtype::F32,
                mask_log_every: 1,
            },
            data: DataConfig {
                path: None,
                samples: 1024,
                noise: 0.01,
                val_fraction: 0.1,
            },
        }
    }
}

fn parse_num<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn parse_pattern(key: &str, value: &str) -> std::result::Result<Option<NmPattern>, String> {
    if value == "dense" {
        return Ok(None);
    }
    value.parse::<NmPattern>().map(Some).map_err(|e| format!("{key}: {e}"))
}

fn pattern_text(p: Option<NmPattern>) -> String {
    p.map_or_else(|| "dense".to_string(), |p| p.to_string())
}

/// Hex SHA-256 of `text`; the footer hash of every emitted CSV.
pub fn content_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Every recognised key, in canonical order.
pub const KEYS: &[&str] = &[
    "adapter.lazy_fraction",
    "adapter.rank_ratio",
    "adapter.weight_decay",
    "data.noise",
    "data.path",
    "data.samples",
    "data.val_fraction",
    "model.context",
    "model.heads",
    "model.hidden",
    "model.input_dim",
    "model.kind",
    "model.layers",
    "model.output_dim",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "optimizer.grad_scale",
    "optimizer.kind",
    "optimizer.lr",
    "optimizer.min_lr_ratio",
    "optimizer.schedule",
    "optimizer.warmup",
    "optimizer.weight_decay",
    "sparsity.decay",
    "sparsity.dense_first",
    "sparsity.dense_head",
    "sparsity.mask",
    "sparsity.modules",
    "sparsity.pattern",
    "sparsity.pattern_second_half",
    "train.batch",
    "train.dtype",
    "train.eval_batches",
    "train.iterations",
    "train.mask_log_every",
    "train.seed",
];

impl TrainConfig {
    /// Parses the text form; errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        let mut second_half: Option<(usize, String)> = None;
        let (mut schedule, mut warmup, mut min_ratio) = ("constant".to_string(), 0usize, 0.1f64);
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Config { line: line_no, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key {key:?}")));
            }
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            seen.push(key.to_string());
            match key {
                "sparsity.pattern_second_half" => second_half = Some((line_no, value.to_string())),
                "optimizer.schedule" => schedule = value.to_string(),
                "optimizer.warmup" => warmup = parse_num(key, value).map_err(err)?,
                "optimizer.min_lr_ratio" => min_ratio = parse_num(key, value).map_err(err)?,
                _ => cfg.set(key, value).map_err(err)?,
            }
        }
        if let Some((line, value)) = second_half {
            cfg.sparsity.second_half =
                parse_pattern("sparsity.pattern_second_half", &value).map_err(|message| Error::Config { line, message })?;
        }
        cfg.optimizer.schedule = match schedule.as_str() {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::Cosine { warmup, min_ratio },
            other => {
                return Err(Error::Config {
                    line: 0,
                    message: format!("optimizer.schedule: unknown schedule {other:?}"),
                })
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "model.kind" => {
                self.model.kind = match value {
                    "mlp" => ModelKind::Mlp,
                    "lm" => ModelKind::Lm,
                    _ => return Err(format!("{key}: expected mlp or lm")),
                }
            }
            "model.layers" => self.model.layers = parse_num(key, value)?,
            "model.hidden" => self.model.hidden = parse_num(key, value)?,
            "model.heads" => self.model.heads = parse_num(key, value)?,
            "model.context" => self.model.context = parse_num(key, value)?,
            "model.input_dim" => self.model.input_dim = parse_num(key, value)?,
            "model.output_dim" => self.model.output_dim = parse_num(key, value)?,
            "sparsity.pattern" => {
                let p = parse_pattern(key, value)?;
                self.sparsity.first_half = p;
                self.sparsity.second_half = p;
            }
            "sparsity.modules" => {
                self.sparsity.modules = match value {
                    "mlp" => PrunedModules::Mlp,
                    "mlp+attention" => PrunedModules::MlpAttention,
                    _ => return Err(format!("{key}: expected mlp or mlp+attention")),
                }
            }
            "sparsity.mask" => {
                self.sparsity.mask = match value {
                    "static-random" => MaskMode::StaticRandom,
                    "static-magnitude" => MaskMode::StaticMagnitude,
                    "dynamic" => MaskMode::Dynamic,
                    _ => return Err(format!("{key}: expected static-random, static-magnitude or dynamic")),
                }
            }
            "sparsity.decay" => self.sparsity.decay = parse_num(key, value)?,
            "sparsity.dense_first" => self.sparsity.dense_first = parse_bool(key, value)?,
            "sparsity.dense_head" => self.sparsity.dense_head = parse_bool(key, value)?,
            "adapter.rank_ratio" => self.adapter.rank_ratio = parse_num(key, value)?,
            "adapter.lazy_fraction" => self.adapter.lazy_fraction = parse_num(key, value)?,
            "adapter.weight_decay" => self.adapter.weight_decay = parse_bool(key, value)?,
            "optimizer.kind" => self.optimizer.kind = OptimizerKind::parse(value).map_err(|e| format!("{key}: {e}"))?,
            "optimizer.lr" => self.optimizer.lr = parse_num(key, value)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse_num(key, value)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse_num(key, value)?,
            "optimizer.eps" => self.optimizer.eps = parse_num(key, value)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse_num(key, value)?,
            "optimizer.grad_scale" => self.optimizer.grad_scale = parse_num(key, value)?,
            "train.iterations" => self.train.iterations = parse_num(key, value)?,
            "train.batch" => self.train.batch = parse_num(key, value)?,
            "train.seed" => self.train.seed = parse_num(key, value)?,
            "train.eval_batches" => self.train.eval_batches = parse_num(key, value)?,
            "train.mask_log_every" => self.train.mask_log_every = parse_num(key, value)?,
            "train.dtype" => {
                self.train.dtype = match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => return Err(format!("{key}: expected f32 or f64")),
                }
            }
            "data.path" => self.data.path = Some(value.to_string()),
            "data.samples" => self.data.samples = parse_num(key, value)?,
            "data.noise" => self.data.noise = parse_num(key, value)?,
            "data.val_fraction" => self.data.val_fraction = parse_num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Checks ranges that do not depend on building the model.
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Err(Error::Config { line: 0, message });
        let a = &self.adapter;
        if !(0.0..=1.0).contains(&a.lazy_fraction) {
            return bad(format!("adapter.lazy_fraction must be in [0, 1], got {}", a.lazy_fraction));
        }
        if !(0.0..=1.0).contains(&a.rank_ratio) {
            return bad(format!("adapter.rank_ratio must be in [0, 1], got {}", a.rank_ratio));
        }
        let m = &self.model;
        if m.layers == 0 || m.hidden == 0 {
            return bad("model.layers and model.hidden must be positive".into());
        }
        if m.kind == ModelKind::Lm && (m.heads == 0 || !m.hidden.is_multiple_of(m.heads) || m.context == 0) {
            return bad(format!("model.hidden {} must split into {} heads with context > 0", m.hidden, m.heads));
        }
        if m.kind == ModelKind::Mlp && (m.input_dim == 0 || m.output_dim == 0) {
            return bad("model.input_dim and model.output_dim must be positive".into());
        }
        let t = &self.train;
        if t.iterations == 0 || t.batch == 0 || t.eval_batches == 0 || t.mask_log_every == 0 {
            return bad("train.iterations, train.batch, train.eval_batches, train.mask_log_every must be positive".into());
        }
        let o = &self.optimizer;
        if o.lr.is_nan() || o.lr <= 0.0 || o.lr.is_infinite() || o.grad_scale.is_nan() || o.grad_scale <= 0.0 || o.weight_decay < 0.0 {
            return bad("optimizer.lr and optimizer.grad_scale must be positive, weight_decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return bad("data.val_fraction must be in [0, 1)".into());
        }
        if m.kind == ModelKind::Mlp && self.data.samples < 2 {
            return bad("data.samples must be at least 2".into());
        }
        Ok(())
    }

    /// Pattern of block (or MLP layer) `index` out of `count`.
    pub fn block_pattern(&self, index: usize, count: usize) -> Option<NmPattern> {
        if index < count.div_ceil(2) {
            self.sparsity.first_half
        } else {
            self.sparsity.second_half
        }
    }

    /// Whether any layer is pruned.
    pub fn is_sparse(&self) -> bool {
        self.sparsity.first_half.is_some() || self.sparsity.second_half.is_some()
    }

    /// Adapter rank for the configured hidden size (0 means no adapters).
    pub fn adapter_rank(&self) -> usize {
        if self.adapter.rank_ratio <= 0.0 {
            return 0;
        }
        ((self.adapter.rank_ratio * self.model.hidden as f64).round() as usize).max(1)
    }

    /// Iteration at which adapters switch on: `ceil((1 - lazy) * T)`.
    /// `None` when they never do.
    pub fn adapter_start(&self) -> Option<usize> {
        let t = self.train.iterations;
        if self.adapter_rank() == 0 || self.adapter.lazy_fraction <= 0.0 {
            return None;
        }
        let start = ((1.0 - self.adapter.lazy_fraction) * t as f64).ceil() as usize;
        (start < t).then_some(start)
    }

    /// All keys with resolved values, one `key = value` per line, sorted.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        let (warmup, min_ratio, schedule) = match self.optimizer.schedule {
            LrSchedule::Constant => (0, 0.1, "constant"),
            LrSchedule::Cosine { warmup, min_ratio } => (warmup, min_ratio, "cosine"),
        };
        match key {
            "adapter.lazy_fraction" => self.adapter.lazy_fraction.to_string(),
            "adapter.rank_ratio" => self.adapter.rank_ratio.to_string(),
            "adapter.weight_decay" => self.adapter.weight_decay.to_string(),
            "data.noise" => self.data.noise.to_string(),
            "data.path" => self.data.path.clone().unwrap_or_else(|| "bundled".into()),
            "data.samples" => self.data.samples.to_string(),
            "data.val_fraction" => self.data.val_fraction.to_string(),
            "model.context" => self.model.context.to_string(),
            "model.heads" => self.model.heads.to_string(),
            "model.hidden" => self.model.hidden.to_string(),
            "model.input_dim" => self.model.input_dim.to_string(),
            "model.kind" => match self.model.kind {
                ModelKind::Mlp => "mlp".into(),
                ModelKind::Lm => "lm".into(),
            },
            "model.layers" => self.model.layers.to_string(),
            "model.output_dim" => self.model.output_dim.to_string(),
            "optimizer.beta1" => self.optimizer.beta1.to_string(),
            "optimizer.beta2" => self.optimizer.beta2.to_string(),
            "optimizer.eps" => self.optimizer.eps.to_string(),
            "optimizer.grad_scale" => self.optimizer.grad_scale.to_string(),
            "optimizer.kind" => self.optimizer.kind.name().into(),
            "optimizer.lr" => self.optimizer.lr.to_string(),
            "optimizer.min_lr_ratio" => min_ratio.to_string(),
            "optimizer.schedule" => schedule.into(),
            "optimizer.warmup" => warmup.to_string(),
            "optimizer.weight_decay" => self.optimizer.weight_decay.to_string(),
            "sparsity.decay" => self.sparsity.decay.to_string(),
            "sparsity.dense_first" => self.sparsity.dense_first.to_string(),
            "sparsity.dense_head" => self.sparsity.dense_head.to_string(),
            "sparsity.mask" => match self.sparsity.mask {
                MaskMode::StaticRandom => "static-random".into(),
                MaskMode::StaticMagnitude => "static-magnitude".into(),
                MaskMode::Dynamic => "dynamic".into(),
            },
            "sparsity.modules" => match self.sparsity.modules {
                PrunedModules::Mlp => "mlp".into(),
                PrunedModules::MlpAttention => "mlp+attention".into(),
            },
            "sparsity.pattern" => pattern_text(self.sparsity.first_half),
            "sparsity.pattern_second_half" => pattern_text(self.sparsity.second_half),
            "train.batch" => self.train.batch.to_string(),
            "train.dtype" => match self.train.dtype {
                Dtype::F32 => "f32".into(),
                Dtype::F64 => "f64".into(),
            },
            "train.eval_batches" => self.train.eval_batches.to_string(),
            "train.iterations" => self.train.iterations.to_string(),
            "train.mask_log_every" => self.train.mask_log_every.to_string(),
            "train.seed" => self.train.seed.to_string(),
            _ => unreachable!("key list and value_of out of sync: {key}"),
        }
    }

    /// Hex SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn hash(&self) -> String {
        content_hash(&self.canonical_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_example() {
        let text = "# toy run\nmodel.kind = lm\nmodel.layers = 4\nmodel.hidden = 128\n\nsparsity.pattern = 2:4\nsparsity.pattern_second_half = 2:8\nsparsity.modules = mlp+attention\nadapter.rank_ratio = 0.0156\noptimizer.schedule = cosine\noptimizer.warmup = 10\ntrain.seed = 7\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Lm);
        assert_eq!(cfg.block_pattern(0, 4), Some(NmPattern::new(2, 4).unwrap()));
        assert_eq!(cfg.block_pattern(1, 4), Some(NmPattern::new(2, 4).unwrap()));
        assert_eq!(cfg.block_pattern(2, 4), Some(NmPattern::new(2, 8).unwrap()));
        assert_eq!(cfg.adapter_rank(), 2);
        assert_eq!(cfg.optimizer.schedule, LrSchedule::Cosine { warmup: 10, min_ratio: 0.1 });
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn canonical_round_trip() {
        let cfg = TrainConfig::parse("model.hidden = 32\nsparsity.pattern = dense\n").unwrap();
        let again = TrainConfig::parse(&cfg.canonical_text().replace("data.path = bundled\n", "")).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let other = TrainConfig::parse("model.hidden = 32\n").unwrap();
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn errors_carry_line_numbers() {
        match TrainConfig::parse("model.hidden = 32\n\nmodel.bogus = 1\n") {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("model.bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(TrainConfig::parse("train.batch = 2\ntrain.batch = 3"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(TrainConfig::parse("sparsity.pattern = 2-4"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("no equals sign"), Err(Error::Config { .. })));
        assert!(TrainConfig::parse("adapter.lazy_fraction = 1.5").is_err());
    }

    #[test]
    fn adapter_schedule() {
        let mut cfg = TrainConfig::default();
        cfg.train.iterations = 5000;
        assert_eq!(cfg.adapter_start(), None);
        cfg.adapter.rank_ratio = 0.0156;
        assert_eq!(cfg.adapter_start(), Some(4950));
        cfg.adapter.lazy_fraction = 0.0;
        assert_eq!(cfg.adapter_start(), None);
        cfg.train.iterations = 101;
        cfg.adapter.lazy_fraction = 0.01;
        assert_eq!(cfg.adapter_start(), Some(100));
    }
}
