//! Self-adaptive curriculum weight.
//!
//! Before each epoch the model generates for a fixed sample of training
//! prompts; the mean squared distance `d_t` between pooled embeddings of
//! the generations and of the real targets, relative to the distance `d0`
//! measured before training, sets `tau = exp(alpha * (d_t / d0 - 1))`.
//! `tau` is the weight of the self-distilled loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PromptTargetPair;
use crate::grounding::squared_l2;
use crate::model::{ModelError, ModelState};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("initial distance is zero: the model already reproduces every sampled target, nothing to schedule")]
    DegenerateStart,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SchedulerError>;

/// `exp(alpha * (d_t / d0 - 1))`, clamped to at most one.
pub fn tau_for(alpha: f64, d0: f64, d_t: f64) -> f64 {
    (alpha * (d_t / d0 - 1.0)).exp().min(1.0)
}

/// Sorted sample of `m` distinct indices below `n`.
pub fn draw_sample(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    use rand::SeedableRng;
    if m == 0 {
        return Err(SchedulerError::Contract("sample size M must be positive".into()));
    }
    if m > n {
        return Err(SchedulerError::Contract(format!("sample size M={m} exceeds {n} training pairs")));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Mean over the sampled pairs of `‖z(generate(x)) − z(y)‖²`.
pub fn measure_distance(
    model: &ModelState,
    pairs: &[PromptTargetPair],
    sample: &[usize],
    max_gen_len: usize,
) -> Result<f64> {
    if sample.is_empty() {
        return Err(SchedulerError::Contract("sample size M must be positive".into()));
    }
    if let Some(&bad) = sample.iter().find(|&&i| i >= pairs.len()) {
        return Err(SchedulerError::Contract(format!("sample index {bad} out of range")));
    }
    let dists = sample
        .par_iter()
        .map(|&i| {
            let p = &pairs[i];
            let g = model.generate(&p.x, max_gen_len)?;
            Ok(squared_l2(&model.embed_sequence(&g), &model.embed_sequence(&p.y)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub alpha: f64,
    pub d0: f64,
    pub d_t: f64,
    pub tau: f64,
    pub m: usize,
    pub sample_seed: u64,
    /// Indices into the training pairs; fixed for the run unless resampling.
    pub sample: Vec<usize>,
}

impl SchedulerState {
    /// Measure `d0` on the untrained model; `tau` starts at one.
    pub fn init(
        model0: &ModelState,
        pairs: &[PromptTargetPair],
        alpha: f64,
        m: usize,
        seed: u64,
        max_gen_len: usize,
    ) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(SchedulerError::Contract(format!("alpha {alpha} must be non-negative")));
        }
        let sample = draw_sample(pairs.len(), m, seed)?;
        let d0 = measure_distance(model0, pairs, &sample, max_gen_len)?;
        Self::from_d0(alpha, d0, m, seed, sample)
    }

    pub fn from_d0(alpha: f64, d0: f64, m: usize, sample_seed: u64, sample: Vec<usize>) -> Result<Self> {
        if d0 == 0.0 {
            return Err(SchedulerError::DegenerateStart);
        }
        if !(d0 > 0.0) {
            return Err(SchedulerError::Contract(format!("initial distance {d0} is not positive")));
        }
        Ok(Self {
            alpha,
            d0,
            d_t: d0,
            tau: 1.0,
            m,
            sample_seed,
            sample,
        })
    }

    pub fn update_tau(&mut self, d_t: f64) -> f64 {
        self.d_t = d_t;
        self.tau = tau_for(self.alpha, self.d0, d_t);
        self.tau
    }

    /// Measure `d_t` on the current model over the frozen sample and update.
    pub fn step(&mut self, model: &ModelState, pairs: &[PromptTargetPair], max_gen_len: usize) -> Result<f64> {
        let d = measure_distance(model, pairs, &self.sample, max_gen_len)?;
        Ok(self.update_tau(d))
    }

    /// Draw a fresh sample for `epoch` (only when per-epoch resampling is enabled).
    pub fn resample(&mut self, n_pairs: usize, epoch: u64) -> Result<()> {
        self.sample = draw_sample(n_pairs, self.m, self.sample_seed.wrapping_add(epoch))?;
        Ok(())
    }
}
