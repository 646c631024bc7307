//! REINFORCE training: batch collection, the score-function gradient, its
//! reward-weighted cross-entropy form, an EMA baseline, Adam ascent and
//! per-head gradient magnitudes.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspace::{ArchitectureVector, SearchSpaceSpec};
use crate::controller::{
    grad_log_prob_where, grad_weighted_cross_entropy, sample_with, ControllerError,
    ControllerParams, Decision, DecisionKind, DecisionTrace, Forcing, ParamLayout, SampleMode,
};
use crate::oracles::{Oracle, OracleError};
use crate::scalar::Scalar;
use crate::seeding::stream_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("gradient has a non-finite entry at coordinate {0}")]
    NonFiniteGradient(usize),
    #[error("gradient has length {found}, expected {expected}")]
    GradientLength { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Scalar = f64> {
    pub arch: ArchitectureVector,
    pub trace: DecisionTrace<T>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch<T: Scalar = f64> {
    pub mode: SampleMode,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        self.samples.iter().map(|s| s.reward).sum::<f64>() / self.samples.len() as f64
    }

    pub fn archs(&self) -> impl Iterator<Item = &ArchitectureVector> {
        self.samples.iter().map(|s| &s.arch)
    }
}

/// Draws `n` architectures (sample `i` from its own stream keyed by
/// `(seed, step, i)`) and scores them with `oracle` at `step`.
#[allow(clippy::too_many_arguments)]
pub fn collect_batch<T: Scalar>(
    params: &ControllerParams<T>,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
    forcing: &Forcing,
    oracle: &mut dyn Oracle,
    n: usize,
    step: u64,
    seed: u64,
) -> Result<SampleBatch<T>, TrainError> {
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let drawn = (0..n)
        .into_par_iter()
        .map(|i| sample_with(params, spec, mode, forcing, &mut stream_rng(seed, step, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let archs: Vec<ArchitectureVector> = drawn.iter().map(|(a, _)| a.clone()).collect();
    let rewards = oracle.evaluate_batch(&archs, step)?;
    if rewards.len() != n {
        return Err(OracleError::Evaluation {
            index: rewards.len().min(n.saturating_sub(1)),
            message: format!("oracle returned {} rewards for {n} architectures", rewards.len()),
        }
        .into());
    }
    let samples = drawn
        .into_iter()
        .zip(rewards)
        .enumerate()
        .map(|(index, ((arch, trace), reward))| {
            if !(0.0..=1.0).contains(&reward) {
                return Err(OracleError::Evaluation {
                    index,
                    message: format!("reward {reward} outside [0, 1]"),
                }
                .into());
            }
            Ok(Sample { arch, trace, reward })
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(SampleBatch { mode, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub ema: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl BaselineState {
    pub fn new(decay: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "baseline decay must lie in (0, 1)");
        Self {
            ema: 0.0,
            decay,
            initialized: false,
        }
    }

    /// Value subtracted from rewards: the EMA once initialized, else 0.
    pub fn value(&self) -> f64 {
        if self.initialized {
            self.ema
        } else {
            0.0
        }
    }
}

pub fn update_baseline<T: Scalar>(state: BaselineState, batch: &SampleBatch<T>) -> BaselineState {
    let mean = batch.mean_reward();
    let ema = if state.initialized {
        state.decay * state.ema + (1.0 - state.decay) * mean
    } else {
        mean
    };
    BaselineState {
        ema,
        initialized: true,
        ..state
    }
}

fn free_lookup<T: Scalar>(trace: &DecisionTrace<T>) -> impl Fn(usize, DecisionKind) -> bool + '_ {
    |i, _| trace.decisions[i].free
}

/// Reduces per-sample vectors in sample order.
fn ordered_sum<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// `(1/N) sum_i (R_i - b) grad log p(tau_i)` over the free decisions of each
/// sample, with `b` the baseline value (0 without one). Ascent direction.
pub fn reinforce_gradient<T: Scalar>(
    params: &ControllerParams<T>,
    spec: &SearchSpaceSpec,
    batch: &SampleBatch<T>,
    baseline: Option<&BaselineState>,
) -> Result<Vec<T>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let b = baseline.map_or(0.0, BaselineState::value);
    let n = batch.len() as f64;
    let parts = batch
        .samples
        .par_iter()
        .map(|s| {
            let mut g = grad_log_prob_where(params, &s.arch, spec, batch.mode, free_lookup(&s.trace))?;
            let w = T::of((s.reward - b) / n);
            g.iter_mut().for_each(|v| *v *= w);
            Ok(g)
        })
        .collect::<Result<Vec<_>, ControllerError>>()?;
    Ok(ordered_sum(parts, params.len()))
}

/// Gradient of the reward-weighted cross-entropy objective
/// `sum_i sum_d (R_i / N) log p(d_i)`: each free decision's cross-entropy
/// term against its one-hot target is weighted by the reward credited to it.
pub fn ce_surrogate_gradient<T: Scalar>(
    params: &ControllerParams<T>,
    spec: &SearchSpaceSpec,
    batch: &SampleBatch<T>,
) -> Result<Vec<T>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let parts = batch
        .samples
        .par_iter()
        .map(|s| {
            let mut g = vec![T::zero(); params.len()];
            let credit = T::of(s.reward / n);
            let free: Vec<(DecisionKind, bool)> =
                s.trace.decisions.iter().map(|d| (d.kind, d.free)).collect();
            grad_weighted_cross_entropy(
                params,
                &s.arch,
                spec,
                batch.mode,
                |d: &Decision<T>| {
                    let is_free = free.iter().find(|(k, _)| *k == d.kind).is_some_and(|(_, f)| *f);
                    is_free.then(|| {
                        (0..d.probs.len())
                            .map(|k| if k == d.chosen { credit } else { T::zero() })
                            .collect()
                    })
                },
                &mut g,
            )?;
            Ok(g)
        })
        .collect::<Result<Vec<_>, ControllerError>>()?;
    Ok(ordered_sum(parts, params.len()))
}

/// Gradient of the mean entropy `(1/N) sum_i sum_d H(p_d)` over free
/// decisions, evaluated along each sample's trajectory.
pub fn entropy_gradient<T: Scalar>(
    params: &ControllerParams<T>,
    spec: &SearchSpaceSpec,
    batch: &SampleBatch<T>,
) -> Result<Vec<T>, TrainError> {
    let n = T::of(batch.len() as f64);
    let parts = batch
        .samples
        .par_iter()
        .map(|s| {
            let mut g = vec![T::zero(); params.len()];
            let free: Vec<(DecisionKind, bool)> =
                s.trace.decisions.iter().map(|d| (d.kind, d.free)).collect();
            // With y_k = -p_k ln p_k the cross-entropy gradient y - (sum y) p
            // is exactly dH/dlogits.
            grad_weighted_cross_entropy(
                params,
                &s.arch,
                spec,
                batch.mode,
                |d: &Decision<T>| {
                    let is_free = free.iter().find(|(k, _)| *k == d.kind).is_some_and(|(_, f)| *f);
                    is_free.then(|| {
                        d.probs
                            .iter()
                            .map(|&p| if p > T::zero() { -p * p.ln() / n } else { T::zero() })
                            .collect()
                    })
                },
                &mut g,
            )?;
            Ok(g)
        })
        .collect::<Result<Vec<_>, ControllerError>>()?;
    Ok(ordered_sum(parts, params.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar = f64> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One ascent step `params += lr * m_hat / (sqrt(v_hat) + eps)`. A
    /// non-finite gradient is rejected and leaves everything unchanged.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<(), TrainError> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(TrainError::GradientLength {
                expected: self.m.len(),
                found: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient(i));
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(c.learning_rate), T::of(c.epsilon));
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p += lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    pub step: u64,
    pub op_grad_norm: f64,
    pub skip_grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradLog {
    pub records: Vec<GradRecord>,
}

impl GradLog {
    pub fn push(&mut self, record: GradRecord) {
        self.records.push(record);
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,op_grad_norm,skip_grad_norm")?;
        for r in &self.records {
            writeln!(out, "{},{:?},{:?}", r.step, r.op_grad_norm, r.skip_grad_norm)?;
        }
        Ok(())
    }

    pub fn op_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.op_grad_norm).collect()
    }

    pub fn skip_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.skip_grad_norm).collect()
    }
}

fn group_norm<T: Scalar>(grad: &[T], ranges: &[std::ops::Range<usize>]) -> f64 {
    ranges
        .iter()
        .flat_map(|r| &grad[r.clone()])
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// L2 norms of `grad` restricted to the operator head and the skip head.
pub fn log_grad_magnitudes<T: Scalar>(grad: &[T], layout: &ParamLayout, step: u64) -> GradRecord {
    GradRecord {
        step,
        op_grad_norm: group_norm(grad, &layout.op_head()),
        skip_grad_norm: group_norm(grad, &layout.skip_head()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Architectures sampled per controller update.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// EMA decay of the reward baseline; `None` disables the baseline.
    pub baseline_decay: Option<f64>,
    /// Weight of the entropy bonus.
    pub entropy_weight: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            adam: AdamConfig::default(),
            baseline_decay: Some(0.95),
            entropy_weight: 0.0,
        }
    }
}

/// Controller parameters plus optimizer and baseline state.
#[derive(Debug, Clone)]
pub struct PolicyTrainer<T: Scalar = f64> {
    pub params: ControllerParams<T>,
    pub config: TrainerConfig,
    pub adam: Adam<T>,
    pub baseline: Option<BaselineState>,
    pub grad_log: GradLog,
}

/// Outcome of one controller update.
#[derive(Debug, Clone)]
pub struct UpdateOutcome<T: Scalar = f64> {
    pub batch: SampleBatch<T>,
    pub grad: GradRecord,
}

impl<T: Scalar> PolicyTrainer<T> {
    pub fn new(params: ControllerParams<T>, config: TrainerConfig) -> Self {
        let adam = Adam::new(config.adam.clone(), params.len());
        let baseline = config.baseline_decay.map(BaselineState::new);
        Self {
            params,
            config,
            adam,
            baseline,
            grad_log: GradLog::default(),
        }
    }

    /// Collects a batch, ascends the REINFORCE gradient and updates the
    /// baseline afterwards.
    pub fn update(
        &mut self,
        spec: &SearchSpaceSpec,
        mode: SampleMode,
        forcing: &Forcing,
        oracle: &mut dyn Oracle,
        step: u64,
        seed: u64,
    ) -> Result<UpdateOutcome<T>, TrainError> {
        let batch = collect_batch(
            &self.params,
            spec,
            mode,
            forcing,
            oracle,
            self.config.batch_size,
            step,
            seed,
        )?;
        let mut grad = reinforce_gradient(&self.params, spec, &batch, self.baseline.as_ref())?;
        if self.config.entropy_weight != 0.0 {
            let w = T::of(self.config.entropy_weight);
            for (g, e) in grad.iter_mut().zip(entropy_gradient(&self.params, spec, &batch)?) {
                *g += w * e;
            }
        }
        let record = log_grad_magnitudes(&grad, self.params.layout(), step);
        self.adam.step(self.params.flat_mut(), &grad)?;
        if let Some(b) = self.baseline {
            self.baseline = Some(update_baseline(b, &batch));
        }
        self.grad_log.push(record);
        Ok(UpdateOutcome { batch, grad: record })
    }
}
