//! The training loop: lazy adapters, divergence detection and run reports.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::analysis::{adapter_convergence, mask_change_series};
use crate::error::{Error, Result};
use crate::nm::NmMask;
use crate::rng::{derive_seed, rng_from_seed, SeededRng};
use crate::scalar::Scalar;
use crate::sparse::AdapterPair;
use crate::train::config::{MaskMode, ModelKind, TrainConfig};
use crate::train::data::Dataset;
use crate::train::model::ToyModel;
use crate::train::optim::{Optimizer, OptimizerKind};

const DATA_STREAM: u64 = 0xda7a;
const ADAPTER_STREAM: u64 = 0xada9;
const EVAL_STREAM: u64 = 0xe7a1;

/// Consecutive steps above `DIVERGENCE_FACTOR x` the first loss that abort a run.
pub const DIVERGENCE_PATIENCE: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Everything a run emits.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunReport {
    pub iterations: usize,
    /// Training loss of each iteration, measured before its update.
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Cosine of the down-projections against their final values, averaged
    /// over layers; `None` while adapters are off.
    pub adapter_cosine: Vec<Option<f64>>,
    /// Same for the up-projections.
    pub adapter_cosine_up: Vec<Option<f64>>,
    /// Fraction of mask entries differing from the final mask.
    pub mask_diff: Vec<f64>,
    /// Mean training loss over the last `final_window` iterations.
    pub final_train_loss: f64,
    pub final_window: usize,
    pub final_val_loss: f64,
    /// `exp(final_val_loss)` for the language model.
    pub final_val_perplexity: Option<f64>,
    pub adapter_rank: usize,
    pub adapter_start: Option<usize>,
    pub adapters_used: bool,
    /// Static masks were identical at the first and last iteration.
    pub mask_stasis: bool,
    pub parameter_count: usize,
    pub config_hash: String,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Short note about adapters for summaries.
    pub fn adapter_note(&self) -> &'static str {
        match (self.adapter_rank, self.adapters_used) {
            (0, _) => "rank 0: no adapters",
            (_, false) => "rank configured but unused: adapters never activated",
            (_, true) => "adapters trained during the lazy window",
        }
    }
}

/// Non-finite activations or weights inside a step mean the run blew up.
fn as_divergence(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence {
            iteration,
            reason: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

/// Mean loss over the last `ceil(0.01 T)` iterations (at least one).
pub fn final_window(iterations: usize) -> usize {
    iterations.div_ceil(100).max(1)
}

/// Step-wise trainer. Cloning it forks the run: both copies continue with
/// identical data order.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar = f32> {
    config: TrainConfig,
    dataset: Arc<Dataset<T>>,
    model: ToyModel<T>,
    optimizer: Optimizer<T>,
    data_rng: SeededRng,
    adapter_rng: SeededRng,
    iteration: usize,
    adapter_start: Option<usize>,
    adapters_active: bool,
    initial_masks: Vec<NmMask>,
    mask_log: Vec<Arc<Vec<NmMask>>>,
    adapter_log: Vec<(usize, Vec<AdapterPair<T>>)>,
    initial_loss: Option<f64>,
    above: usize,
    losses: Vec<f64>,
    lrs: Vec<f64>,
    elapsed: Duration,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, dataset: Arc<Dataset<T>>) -> Result<Self> {
        let started = Instant::now();
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let model = ToyModel::build(&config, &dataset)?;
        let o = &config.optimizer;
        let mut optimizer = match o.kind {
            OptimizerKind::Sgd => Optimizer::sgd(o.lr),
            OptimizerKind::Adam => Optimizer::adam(o.lr),
        }
        .with_weight_decay(o.weight_decay)
        .with_grad_scale(o.grad_scale);
        optimizer.beta1 = T::lit(o.beta1);
        optimizer.beta2 = T::lit(o.beta2);
        optimizer.eps = T::lit(o.eps);
        let seed = config.train.seed;
        let initial_masks = model.masks();
        Ok(Self {
            adapter_start: config.adapter_start(),
            data_rng: rng_from_seed(derive_seed(seed, DATA_STREAM)),
            adapter_rng: rng_from_seed(derive_seed(seed, ADAPTER_STREAM)),
            config,
            dataset,
            model,
            optimizer,
            iteration: 0,
            adapters_active: false,
            mask_log: Vec::new(),
            initial_masks,
            adapter_log: Vec::new(),
            initial_loss: None,
            above: 0,
            losses: Vec::new(),
            lrs: Vec::new(),
            elapsed: started.elapsed(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ToyModel<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ToyModel<T> {
        &mut self.model
    }

    pub fn dataset(&self) -> &Dataset<T> {
        &self.dataset
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn adapter_start(&self) -> Option<usize> {
        self.adapter_start
    }

    pub fn adapters_active(&self) -> bool {
        self.adapters_active
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Turns adapters on now (idempotent). Returns the number of layers that
    /// received adapters.
    pub fn activate_adapters(&mut self) -> Result<usize> {
        if self.adapters_active {
            return Ok(0);
        }
        let rank = self.config.adapter_rank();
        if rank == 0 {
            return Ok(0);
        }
        self.adapters_active = true;
        self.model.activate_adapters(rank, &mut self.adapter_rng)
    }

    /// Drops the adapter schedule for the rest of the run and records the
    /// run as rank 0. Errors once adapters are already on.
    pub fn disable_adapters(&mut self) -> Result<()> {
        if self.adapters_active {
            return Err(Error::InvalidArgument("adapters are already active".into()));
        }
        self.adapter_start = None;
        self.config.adapter.rank_ratio = 0.0;
        Ok(())
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<()> {
        let started = Instant::now();
        let t = self.iteration;
        let total = self.config.train.iterations;
        if t >= total {
            return Err(Error::InvalidArgument(format!("run already finished after {total} iterations")));
        }
        if self.adapter_start == Some(t) {
            self.activate_adapters()?;
        }
        let lr = self.config.optimizer.schedule.lr_at(self.config.optimizer.lr, t, total);
        self.optimizer.lr = T::lit(lr);
        let batch = self
            .dataset
            .sample_train(self.config.train.batch, self.config.model.context, &mut self.data_rng)?;
        let (loss, grads) = self.model.loss_and_grads(&batch).map_err(|e| as_divergence(e, t))?;
        let loss = loss.as_f64();
        self.check_divergence(t, loss)?;
        self.model.apply(&grads, &self.optimizer).map_err(|e| as_divergence(e, t))?;
        self.losses.push(loss);
        self.lrs.push(lr);
        self.log_state(t);
        self.iteration += 1;
        self.elapsed += started.elapsed();
        Ok(())
    }

    fn check_divergence(&mut self, t: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                reason: format!("loss is {loss}"),
            });
        }
        let initial = *self.initial_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.above += 1;
            if self.above >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence {
                    iteration: t,
                    reason: format!(
                        "loss above {DIVERGENCE_FACTOR}x the initial {initial:.6} for {DIVERGENCE_PATIENCE} steps"
                    ),
                });
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }

    fn log_state(&mut self, t: usize) {
        let every = self.config.train.mask_log_every;
        if t.is_multiple_of(every) || t + 1 == self.config.train.iterations {
            let masks = self.model.masks();
            let entry = match self.mask_log.last() {
                Some(prev) if **prev == masks => Arc::clone(prev),
                _ => Arc::new(masks),
            };
            self.mask_log.push(entry);
        }
        if self.adapters_active {
            let snapshot = self
                .model
                .linears()
                .iter()
                .filter_map(|l| l.as_sparse())
                .filter(|s| s.adapter_active())
                .map(|s| s.adapters().clone())
                .collect();
            self.adapter_log.push((t, snapshot));
        }
    }

    /// Runs until `iteration` iterations have completed.
    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        let target = iteration.min(self.config.train.iterations);
        while self.iteration < target {
            self.step()?;
        }
        Ok(())
    }

    /// Runs the remaining iterations and builds the report.
    pub fn run(mut self) -> Result<RunReport> {
        self.run_until(self.config.train.iterations)?;
        self.finish()
    }

    /// Mean loss over the held-out batches.
    pub fn validation_loss(&self) -> Result<f64> {
        let c = &self.config;
        let batches = self.dataset.validation_batches(
            c.train.batch,
            c.model.context,
            c.train.eval_batches,
            derive_seed(c.train.seed, EVAL_STREAM),
        )?;
        let mut total = 0.0;
        for b in &batches {
            total += self.model.loss(b)?.as_f64();
        }
        Ok(total / batches.len() as f64)
    }

    /// Builds the report; requires the run to be complete.
    pub fn finish(&self) -> Result<RunReport> {
        let started = Instant::now();
        let total = self.config.train.iterations;
        if self.iteration != total {
            return Err(Error::InvalidArgument(format!(
                "run stopped at iteration {} of {total}",
                self.iteration
            )));
        }
        let mask_diff = self.mask_diff_series()?;
        let (adapter_cosine, adapter_cosine_up) = self.adapter_series()?;
        let window = final_window(total);
        let final_train_loss = self.losses[total - window..].iter().sum::<f64>() / window as f64;
        let final_val_loss = self.validation_loss()?;
        let final_masks = self.model.masks();
        let mask_stasis = self.config.sparsity.mask != MaskMode::Dynamic && final_masks == self.initial_masks;
        let elapsed = self.elapsed + started.elapsed();
        Ok(RunReport {
            iterations: total,
            losses: self.losses.clone(),
            lrs: self.lrs.clone(),
            adapter_cosine,
            adapter_cosine_up,
            mask_diff,
            final_train_loss,
            final_window: window,
            final_val_loss,
            final_val_perplexity: (self.config.model.kind == ModelKind::Lm).then(|| final_val_loss.exp()),
            adapter_rank: self.config.adapter_rank(),
            adapter_start: self.adapter_start,
            adapters_used: self.adapters_active,
            mask_stasis,
            parameter_count: self.model.parameter_count(),
            config_hash: self.config.hash(),
            wall_time_secs: elapsed.as_secs_f64(),
        })
    }

    /// Per-iteration mask difference; iterations between logged entries
    /// carry the last logged value forward.
    fn mask_diff_series(&self) -> Result<Vec<f64>> {
        let total = self.config.train.iterations;
        if self.mask_log.first().is_none_or(|m| m.is_empty()) {
            return Ok(vec![0.0; total]);
        }
        let logged = mask_change_series(&self.mask_log)?;
        let every = self.config.train.mask_log_every;
        let mut series = Vec::with_capacity(total);
        let mut idx = 0;
        for t in 0..total {
            if t % every == 0 || t + 1 == total {
                series.push(logged[idx]);
                idx += 1;
            } else {
                series.push(*series.last().expect("t = 0 is always logged"));
            }
        }
        Ok(series)
    }

    #[allow(clippy::type_complexity)]
    fn adapter_series(&self) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>)> {
        let total = self.config.train.iterations;
        let mut down = vec![None; total];
        let mut up = vec![None; total];
        if let Some((_, last)) = self.adapter_log.last() {
            let snapshots: Vec<Vec<AdapterPair<T>>> = self.adapter_log.iter().map(|(_, s)| s.clone()).collect();
            let cos = adapter_convergence(&snapshots, last)?;
            for ((t, _), c) in self.adapter_log.iter().zip(cos) {
                down[*t] = Some(c.down);
                up[*t] = Some(c.up);
            }
        }
        Ok((down, up))
    }
}

/// Builds the dataset for `config` and runs it to completion.
pub fn train<T: Scalar>(config: &TrainConfig, dataset: Arc<Dataset<T>>) -> Result<RunReport> {
    Trainer::new(config.clone(), dataset)?.run()
}
