//! The three training regimes: real labels only (SFT), self-distilled
//! labels only, and the adaptive mixture of both.
//!
//! All three share one loop. Each step takes the same prompt ids from the
//! real and self-distilled sets and applies the gradient of
//! `(1 − tau)·L_real + tau·L_sd`, where each part is a batch mean of
//! per-example summed token losses. A component whose weight is exactly
//! zero is not computed, so `tau ≡ 0` and `tau ≡ 1` reduce bit-for-bit to
//! the single-source regimes.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{shuffled_indices, PromptTargetPair, SplitDataset};
use crate::distill::SdPair;
use crate::grounding::ItemEmbeddingIndex;
use crate::metrics::{evaluate, EvalError};
use crate::model::{ModelError, ModelState};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scheduler::{SchedulerError, SchedulerState};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Box<ModelState>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Hook(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Sft,
    SdftOnly,
    Soft,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Sft => "sft",
            Regime::SdftOnly => "sdft_only",
            Regime::Soft => "soft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "sft" => Some(Regime::Sft),
            "sdft_only" => Some(Regime::SdftOnly),
            "soft" => Some(Regime::Soft),
            _ => None,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the second-stage model starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitFrom {
    /// The same initialization the SFT run started from.
    #[default]
    Base,
    /// The best SFT checkpoint.
    SftCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs_max: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Curriculum sharpness; SOFT only.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Pairs sampled for the distance probe; SOFT only.
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default)]
    pub resample_each_epoch: bool,
    #[serde(default)]
    pub init_from: InitFrom,
    /// Cutoff of the hit ratio monitored for early stopping.
    #[serde(default = "d_k")]
    pub valid_k: usize,
}

fn d_epochs() -> usize {
    7
}
fn d_patience() -> usize {
    2
}
fn d_batch() -> usize {
    16
}
fn d_lr() -> f64 {
    3e-2
}
fn d_alpha() -> f64 {
    1.0
}
fn d_m() -> usize {
    256
}
fn d_k() -> usize {
    5
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_max: d_epochs(),
            patience: d_patience(),
            batch_size: d_batch(),
            lr: d_lr(),
            optimizer: OptimizerKind::default(),
            alpha: d_alpha(),
            m: d_m(),
            resample_each_epoch: false,
            init_from: InitFrom::default(),
            valid_k: d_k(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs_max < 1 {
            return bad("epochs_max must be at least 1");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if self.m < 1 {
            return bad("M must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean over batches of the mixed batch loss.
    pub loss: f64,
    pub loss_real: Option<f64>,
    pub loss_sd: Option<f64>,
    pub tau: f64,
    pub d_t: Option<f64>,
    pub d0: Option<f64>,
    pub valid_score: f64,
    pub wall_clock_secs: f64,
}

impl EpochReport {
    /// Everything but wall-clock time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        } == Self {
            wall_clock_secs: 0.0,
            ..other.clone()
        }
    }
}

/// Source of the per-epoch mixing weight.
#[derive(Debug, Clone)]
pub enum TauSource {
    Fixed(f64),
    Adaptive(SchedulerState),
}

/// Scores a model on held-out data; higher is better.
pub trait Validator {
    fn score(&mut self, model: &ModelState, epoch: usize) -> Result<f64>;
}

impl<F: FnMut(&ModelState, usize) -> Result<f64>> Validator for F {
    fn score(&mut self, model: &ModelState, epoch: usize) -> Result<f64> {
        self(model, epoch)
    }
}

/// Hit ratio at `k` over the validation split with grounding.
pub struct HitRatioValidator<'a> {
    pub data: &'a SplitDataset,
    pub k: usize,
}

impl Validator for HitRatioValidator<'_> {
    fn score(&mut self, model: &ModelState, _epoch: usize) -> Result<f64> {
        let index = ItemEmbeddingIndex::build(model, &self.data.catalog, &self.data.vocab);
        let (_, report) = evaluate(
            model,
            &self.data.valid,
            &self.data.catalog,
            &index,
            self.data.max_gen_len,
            &[self.k],
        )?;
        Ok(report.hr(self.k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub real: Option<f64>,
    pub sd: Option<f64>,
    pub total: f64,
}

fn to_train_err(e: ModelError, epoch: usize, last_good: &ModelState) -> TrainError {
    match e {
        ModelError::Tensor(TensorError::NonFinite(op)) => TrainError::Diverged {
            epoch,
            reason: format!("non-finite value in {op}"),
            last_good: Box::new(last_good.clone()),
        },
        other => TrainError::Model(other),
    }
}

fn accumulate_mean<'p, I>(model: &mut ModelState, items: I, weight: f64) -> std::result::Result<Option<f64>, ModelError>
where
    I: ExactSizeIterator<Item = (&'p crate::vocab::TokenSeq, &'p crate::vocab::TokenSeq)>,
{
    let n = items.len();
    if n == 0 {
        return Ok(None);
    }
    let mut total = 0.0;
    let scale = weight / n as f64;
    for (x, y) in items {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let loss = model.nll_on_tape(&mut tape, &bound, x, y)?;
        total += tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        model.accumulate(&grads, &bound, scale)?;
    }
    Ok(Some(total / n as f64))
}

/// Leave `∇[(1−tau)·mean L_real + tau·mean L_sd]` in the parameters' grad
/// buffers. Empty self-distilled pairs are skipped. Components with zero
/// weight are not evaluated.
pub fn batch_gradient(
    model: &mut ModelState,
    real: &[&PromptTargetPair],
    sd: &[&SdPair],
    tau: f64,
) -> std::result::Result<BatchLoss, ModelError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(ModelError::Contract(format!("tau {tau} outside [0, 1]")));
    }
    model.clear_grads();
    let w_real = 1.0 - tau;
    let real_loss = if w_real != 0.0 {
        accumulate_mean(model, real.iter().map(|p| (&p.x, &p.y)), w_real)?
    } else {
        None
    };
    let sd_loss = if tau != 0.0 {
        let usable: Vec<&SdPair> = sd.iter().copied().filter(|p| !p.empty).collect();
        accumulate_mean(model, usable.iter().map(|p| (&p.x, &p.y_hat)), tau)?
    } else {
        None
    };
    // Parameters untouched by either component still need a (zero) gradient.
    for p in model.params_mut() {
        if p.grad().is_none() {
            let z = vec![0.0; p.numel()];
            p.set_grad(z)?;
        }
    }
    let total = w_real * real_loss.unwrap_or(0.0) + tau * sd_loss.unwrap_or(0.0);
    Ok(BatchLoss {
        real: real_loss,
        sd: sd_loss,
        total,
    })
}

pub struct TrainOutcome {
    pub best: ModelState,
    pub best_epoch: usize,
    pub last: ModelState,
    pub reports: Vec<EpochReport>,
    pub scheduler: Option<SchedulerState>,
}

/// Called after every epoch with the report and the current model.
pub type EpochHook<'a> = dyn FnMut(&EpochReport, &ModelState) -> std::result::Result<(), String> + 'a;

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Shared loop behind every regime.
#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &TrainConfig,
    mut model: ModelState,
    train_pairs: &[PromptTargetPair],
    sd_pairs: Option<&[SdPair]>,
    mut tau_source: TauSource,
    max_gen_len: usize,
    seed: u64,
    validator: &mut dyn Validator,
    hook: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let needs_sd = match &tau_source {
        TauSource::Fixed(t) => {
            if !(0.0..=1.0).contains(t) {
                return Err(TrainError::Config(format!("fixed tau {t} outside [0, 1]")));
            }
            *t != 0.0
        }
        TauSource::Adaptive(_) => true,
    };
    let sd = match (needs_sd, sd_pairs) {
        (false, _) => None,
        (true, None) => return Err(TrainError::Config("self-distilled pairs required".into())),
        (true, Some(sd)) => {
            if sd.len() != train_pairs.len()
                || sd.iter().zip(train_pairs).any(|(s, p)| s.source_pair_id != p.pair_id)
            {
                return Err(TrainError::Config(
                    "self-distilled pairs must align one-to-one with training pairs".into(),
                ));
            }
            if sd.iter().all(|p| p.empty) {
                return Err(TrainError::Config("every self-distilled pair is empty".into()));
            }
            Some(sd)
        }
    };

    let mut optimizer = Optimizer::new(config.optimizer, config.lr);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut reports = Vec::new();

    for epoch in 1..=config.epochs_max {
        let started = Instant::now();
        let (tau, d_t, d0) = match &mut tau_source {
            TauSource::Fixed(t) => (*t, None, None),
            TauSource::Adaptive(s) => {
                if config.resample_each_epoch && epoch > 1 {
                    s.resample(train_pairs.len(), epoch as u64)?;
                }
                // The epoch-1 model is the one d0 was measured on.
                if epoch > 1 || config.resample_each_epoch {
                    s.step(&model, train_pairs, max_gen_len)?;
                }
                (s.tau, Some(s.d_t), Some(s.d0))
            }
        };

        let order = shuffled_indices(train_pairs.len(), epoch_seed(seed, epoch));
        let (mut sum_total, mut sum_real, mut sum_sd) = (0.0, 0.0, 0.0);
        let (mut n_batches, mut n_real, mut n_sd) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let real: Vec<&PromptTargetPair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let sdb: Vec<&SdPair> = match sd {
                Some(sd) => chunk.iter().map(|&i| &sd[i]).collect(),
                None => Vec::new(),
            };
            let bl = batch_gradient(&mut model, &real, &sdb, tau).map_err(|e| to_train_err(e, epoch, &best))?;
            if !bl.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    reason: "loss is not finite".into(),
                    last_good: Box::new(best),
                });
            }
            optimizer
                .step(&mut model)
                .map_err(|e| to_train_err(ModelError::Tensor(e), epoch, &best))?;
            sum_total += bl.total;
            n_batches += 1;
            if let Some(l) = bl.real {
                sum_real += l;
                n_real += 1;
            }
            if let Some(l) = bl.sd {
                sum_sd += l;
                n_sd += 1;
            }
        }
        if model.params().iter().any(|p| p.data().iter().any(|x| !x.is_finite())) {
            return Err(TrainError::Diverged {
                epoch,
                reason: "parameters are not finite".into(),
                last_good: Box::new(best),
            });
        }

        let valid_score = validator.score(&model, epoch)?;
        let report = EpochReport {
            epoch,
            loss: sum_total / n_batches as f64,
            loss_real: (n_real > 0).then(|| sum_real / n_real as f64),
            loss_sd: (n_sd > 0).then(|| sum_sd / n_sd as f64),
            tau,
            d_t,
            d0,
            valid_score,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} tau {:.4} valid {:.4}",
            report.loss,
            report.tau,
            report.valid_score
        );
        hook(&report, &model).map_err(TrainError::Hook)?;
        reports.push(report);

        if valid_score > best_score {
            best_score = valid_score;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let scheduler = match tau_source {
        TauSource::Adaptive(s) => Some(s),
        TauSource::Fixed(_) => None,
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        reports,
        scheduler,
    })
}

fn no_hook(_: &EpochReport, _: &ModelState) -> std::result::Result<(), String> {
    Ok(())
}

/// Real labels only.
pub fn train_sft(
    config: &TrainConfig,
    init: ModelState,
    data: &SplitDataset,
    seed: u64,
    validator: &mut dyn Validator,
) -> Result<TrainOutcome> {
    train(config, init, &data.train, None, TauSource::Fixed(0.0), data.max_gen_len, seed, validator, &mut no_hook)
}

/// Self-distilled labels only (`tau ≡ 1`).
pub fn train_sdft_only(
    config: &TrainConfig,
    init: ModelState,
    data: &SplitDataset,
    sd: &[SdPair],
    seed: u64,
    validator: &mut dyn Validator,
) -> Result<TrainOutcome> {
    train(config, init, &data.train, Some(sd), TauSource::Fixed(1.0), data.max_gen_len, seed, validator, &mut no_hook)
}

/// Adaptive mixture; `d0` is measured on `init` before the first epoch.
pub fn train_soft(
    config: &TrainConfig,
    init: ModelState,
    data: &SplitDataset,
    sd: &[SdPair],
    seed: u64,
    validator: &mut dyn Validator,
) -> Result<TrainOutcome> {
    let sched = SchedulerState::init(&init, &data.train, config.alpha, config.m.min(data.train.len()), seed, data.max_gen_len)?;
    train(
        config,
        init,
        &data.train,
        Some(sd),
        TauSource::Adaptive(sched),
        data.max_gen_len,
        seed,
        validator,
        &mut no_hook,
    )
}
