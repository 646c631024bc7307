//! Autoregressive LSTM controller.
//!
//! The controller emits one decision per LSTM step in canonical order: node
//! `j`'s operator, then (in joint mode) one two-way skip decision per candidate
//! edge entering node `j`, then node `j + 1`'s operator. Every decision is fed
//! back as an embedded token, so each skip decision is conditioned on the
//! operator just chosen for its node. Gradients are computed by hand-written
//! backpropagation through time and checked against central differences.

use std::io::{self, Read, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspace::{validate, ArchitectureVector, Edge, SearchSpaceSpec, SkipMask, Violation};
use crate::scalar::{log_softmax_at, softmax_into, sum, Scalar};

/// Which decisions the controller samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Operators and skip connections.
    Joint,
    /// Operators only; skips are copied from the space's frozen mask.
    FixedSkip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub n_ops: usize,
    /// Logits are divided by this value before the softmax.
    #[serde(default)]
    pub temperature: Option<f64>,
    /// When set, logits become `c * tanh(logits)`.
    #[serde(default)]
    pub tanh_constant: Option<f64>,
}

impl ControllerConfig {
    pub fn new(hidden: usize, n_ops: usize) -> Self {
        Self {
            hidden,
            n_ops,
            temperature: None,
            tanh_constant: None,
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.hidden, self.n_ops)
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("fixed-skip sampling requires a frozen skip mask")]
    MissingFrozenMask,
    #[error("architecture does not fit the search space: {0:?}")]
    InvalidArch(Vec<Violation>),
    #[error("controller has {controller} operators but the space has {space}")]
    OperatorCount { controller: usize, space: usize },
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("parameter vector has length {found}, expected {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Offsets of every parameter group inside the flat parameter vector.
///
/// Tokens: 0 is the start token, `1 + k` is operator `k`, `K + 1 + s` is skip
/// value `s`. The LSTM input width equals the hidden width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub hidden: usize,
    pub n_ops: usize,
    pub embed: Range<usize>,
    pub lstm_w: Range<usize>,
    pub lstm_b: Range<usize>,
    pub op_w: Range<usize>,
    pub op_b: Range<usize>,
    pub skip_w: Range<usize>,
    pub skip_b: Range<usize>,
}

impl ParamLayout {
    pub fn new(hidden: usize, n_ops: usize) -> Self {
        let h = hidden;
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let embed = take((n_ops + 3) * h);
        let lstm_w = take(4 * h * 2 * h);
        let lstm_b = take(4 * h);
        let op_w = take(n_ops * h);
        let op_b = take(n_ops);
        let skip_w = take(2 * h);
        let skip_b = take(2);
        Self {
            hidden,
            n_ops,
            embed,
            lstm_w,
            lstm_b,
            op_w,
            op_b,
            skip_w,
            skip_b,
        }
    }

    pub fn len(&self) -> usize {
        self.skip_b.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.n_ops + 3
    }

    pub const START_TOKEN: usize = 0;

    pub fn op_token(&self, k: usize) -> usize {
        1 + k
    }

    pub fn skip_token(&self, value: bool) -> usize {
        self.n_ops + 1 + usize::from(value)
    }

    /// Operator-head weights and bias.
    pub fn op_head(&self) -> [Range<usize>; 2] {
        [self.op_w.clone(), self.op_b.clone()]
    }

    /// Skip-head weights and bias.
    pub fn skip_head(&self) -> [Range<usize>; 2] {
        [self.skip_w.clone(), self.skip_b.clone()]
    }
}

/// All controller parameters as one flat vector, with structured views.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams<T: Scalar = f64> {
    config: ControllerConfig,
    layout: ParamLayout,
    values: Vec<T>,
}

impl<T: Scalar> ControllerParams<T> {
    pub fn zeros(config: ControllerConfig) -> Result<Self, ControllerError> {
        check_config(&config)?;
        let layout = config.layout();
        Ok(Self {
            values: vec![T::zero(); layout.len()],
            layout,
            config,
        })
    }

    /// Uniform `[-0.1, 0.1]` initialization, deterministic in `seed`.
    pub fn init(config: ControllerConfig, seed: u64) -> Result<Self, ControllerError> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in params.values.iter_mut() {
            *v = T::of(rng.random_range(-0.1..=0.1));
        }
        Ok(params)
    }

    pub fn from_flat(config: ControllerConfig, values: Vec<T>) -> Result<Self, ControllerError> {
        check_config(&config)?;
        let layout = config.layout();
        if values.len() != layout.len() {
            return Err(ControllerError::ParamLength {
                expected: layout.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn flat(&self) -> &[T] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn embedding(&self, token: usize) -> &[T] {
        let h = self.layout.hidden;
        &self.values[self.layout.embed.start + token * h..][..h]
    }

    pub fn op_head_weights(&self) -> &[T] {
        &self.values[self.layout.op_w.clone()]
    }

    pub fn skip_head_weights(&self) -> &[T] {
        &self.values[self.layout.skip_w.clone()]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Writes a JSON header line followed by the parameters as little-endian
    /// f64 values.
    pub fn write_checkpoint<W: Write>(&self, seed: u64, mut out: W) -> Result<(), ControllerError> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            seed,
            p: self.values.len(),
        };
        let line = serde_json::to_string(&header)
            .map_err(|e| ControllerError::Checkpoint(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        for v in &self.values {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(Self, u64), ControllerError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ControllerError::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
            .map_err(|e| ControllerError::Checkpoint(e.to_string()))?;
        let body = &bytes[split + 1..];
        if body.len() != header.p * 8 {
            return Err(ControllerError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                header.p * 8,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        Ok((Self::from_flat(header.config, values)?, header.seed))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ControllerConfig,
    pub seed: u64,
    pub p: usize,
}

fn check_config(config: &ControllerConfig) -> Result<(), ControllerError> {
    if config.hidden == 0 {
        return Err(ControllerError::Config("hidden size must be >= 1".into()));
    }
    if config.n_ops < 2 {
        return Err(ControllerError::Config("need at least 2 operators".into()));
    }
    if matches!(config.temperature, Some(t) if !(t > 0.0)) {
        return Err(ControllerError::Config("temperature must be positive".into()));
    }
    if matches!(config.tanh_constant, Some(c) if !(c > 0.0)) {
        return Err(ControllerError::Config("tanh constant must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionKind {
    /// Operator of node `node` (0-indexed).
    Operator { node: usize },
    /// Skip decision for candidate edge `edge` (1-indexed labels) at canonical
    /// position `position`.
    Skip { edge: Edge, position: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision<T: Scalar = f64> {
    pub kind: DecisionKind,
    pub chosen: usize,
    pub log_prob: T,
    pub probs: Vec<T>,
    /// False when the decision was forced to a fixed value and is excluded
    /// from the policy being optimized.
    pub free: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecisionTrace<T: Scalar = f64> {
    pub decisions: Vec<Decision<T>>,
}

impl<T: Scalar> DecisionTrace<T> {
    /// Sum of all per-decision log-probabilities.
    pub fn total_log_prob(&self) -> T {
        sum(self.decisions.iter().map(|d| d.log_prob))
    }

    /// Sum over the free decisions only.
    pub fn free_log_prob(&self) -> T {
        sum(self.decisions.iter().filter(|d| d.free).map(|d| d.log_prob))
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    /// Mean entropy (nats) of the operator distributions in the trace.
    pub fn mean_operator_entropy(&self) -> T {
        let mut total = T::zero();
        let mut count = 0usize;
        for d in &self.decisions {
            if matches!(d.kind, DecisionKind::Operator { .. }) {
                total += entropy(&d.probs);
                count += 1;
            }
        }
        if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        }
    }
}

pub fn entropy<T: Scalar>(probs: &[T]) -> T {
    sum(probs
        .iter()
        .filter(|p| **p > T::zero())
        .map(|&p| -p * p.ln()))
}

/// Decisions held fixed while the rest of the architecture is sampled. Forced
/// decisions are still fed through the LSTM but are marked non-free.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Forcing {
    pub ops: Option<Vec<usize>>,
    pub skips: Option<SkipMask>,
}

impl Forcing {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn ops(ops: Vec<usize>) -> Self {
        Self {
            ops: Some(ops),
            skips: None,
        }
    }
}

/// Canonical decision order for a space and mode.
pub fn decision_slots(spec: &SearchSpaceSpec, mode: SampleMode) -> Vec<DecisionKind> {
    let topo = spec.topology();
    let mut slots = Vec::with_capacity(spec.n_nodes() + topo.edge_count());
    for node in 0..spec.n_nodes() {
        slots.push(DecisionKind::Operator { node });
        if mode == SampleMode::Joint {
            for position in topo.edges_into(node + 1) {
                slots.push(DecisionKind::Skip {
                    edge: topo.edges()[position],
                    position,
                });
            }
        }
    }
    slots
}

struct StepCache<T> {
    token: usize,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    /// Activated gates `i, f, g, o`, each of width H.
    gates: Vec<T>,
    tanh_c: Vec<T>,
    h: Vec<T>,
    /// Head outputs before temperature / tanh shaping.
    raw_logits: Vec<T>,
}

struct Rollout<T: Scalar> {
    trace: DecisionTrace<T>,
    steps: Vec<StepCache<T>>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> ControllerParams<T> {
    fn shape_logits(&self, raw: &[T]) -> Vec<T> {
        let inv_temp = T::of(1.0 / self.config.temperature.unwrap_or(1.0));
        match self.config.tanh_constant {
            None => raw.iter().map(|&r| r * inv_temp).collect(),
            Some(c) => {
                let c = T::of(c);
                raw.iter().map(|&r| c * (r * inv_temp).tanh()).collect()
            }
        }
    }

    /// d(shaped logit)/d(raw logit), elementwise.
    fn shape_derivative(&self, raw: &[T]) -> Vec<T> {
        let inv_temp = T::of(1.0 / self.config.temperature.unwrap_or(1.0));
        match self.config.tanh_constant {
            None => vec![inv_temp; raw.len()],
            Some(c) => {
                let c = T::of(c);
                raw.iter()
                    .map(|&r| {
                        let t = (r * inv_temp).tanh();
                        c * (T::one() - t * t) * inv_temp
                    })
                    .collect()
            }
        }
    }

    fn lstm_step(&self, token: usize, h_prev: Vec<T>, c_prev: Vec<T>) -> StepCache<T> {
        let hd = self.layout.hidden;
        let x = self.embedding(token);
        let w = &self.values[self.layout.lstm_w.clone()];
        let b = &self.values[self.layout.lstm_b.clone()];
        let mut gates = Vec::with_capacity(4 * hd);
        for row in 0..4 * hd {
            let wr = &w[row * 2 * hd..][..2 * hd];
            let mut a = b[row];
            for (wi, xi) in wr[..hd].iter().zip(x) {
                a += *wi * *xi;
            }
            for (wi, hi) in wr[hd..].iter().zip(&h_prev) {
                a += *wi * *hi;
            }
            gates.push(if (2 * hd..3 * hd).contains(&row) {
                a.tanh()
            } else {
                sigmoid(a)
            });
        }
        let mut tanh_c = Vec::with_capacity(hd);
        let mut h = Vec::with_capacity(hd);
        for u in 0..hd {
            let (i, f, g, o) = (gates[u], gates[hd + u], gates[2 * hd + u], gates[3 * hd + u]);
            let c = f * c_prev[u] + i * g;
            let tc = c.tanh();
            tanh_c.push(tc);
            h.push(o * tc);
        }
        StepCache {
            token,
            h_prev,
            c_prev,
            gates,
            tanh_c,
            h,
            raw_logits: Vec::new(),
        }
    }

    fn head(&self, kind: DecisionKind, h: &[T]) -> Vec<T> {
        let hd = self.layout.hidden;
        let (w, b) = match kind {
            DecisionKind::Operator { .. } => (self.layout.op_w.clone(), self.layout.op_b.clone()),
            DecisionKind::Skip { .. } => (self.layout.skip_w.clone(), self.layout.skip_b.clone()),
        };
        let w = &self.values[w];
        let b = &self.values[b];
        b.iter()
            .enumerate()
            .map(|(r, &br)| {
                w[r * hd..][..hd]
                    .iter()
                    .zip(h)
                    .fold(br, |acc, (wi, hi)| acc + *wi * *hi)
            })
            .collect()
    }

    /// Runs the controller over `slots`, asking `choose` for each decision.
    /// `choose` returns the chosen index and whether the decision is free.
    fn rollout<F>(&self, slots: &[DecisionKind], mut choose: F) -> Rollout<T>
    where
        F: FnMut(usize, DecisionKind, &[T]) -> (usize, bool),
    {
        let hd = self.layout.hidden;
        let mut h = vec![T::zero(); hd];
        let mut c = vec![T::zero(); hd];
        let mut token = ParamLayout::START_TOKEN;
        let mut steps = Vec::with_capacity(slots.len());
        let mut decisions = Vec::with_capacity(slots.len());
        let mut probs = Vec::new();
        for (idx, &kind) in slots.iter().enumerate() {
            let mut step = self.lstm_step(token, h, c);
            // c for the next step is recovered from f*c_prev + i*g.
            c = (0..hd)
                .map(|u| step.gates[hd + u] * step.c_prev[u] + step.gates[u] * step.gates[2 * hd + u])
                .collect();
            h = step.h.clone();
            step.raw_logits = self.head(kind, &step.h);
            let logits = self.shape_logits(&step.raw_logits);
            softmax_into(&logits, &mut probs);
            let (chosen, free) = choose(idx, kind, &probs);
            decisions.push(Decision {
                kind,
                chosen,
                log_prob: log_softmax_at(&logits, chosen),
                probs: probs.clone(),
                free,
            });
            token = match kind {
                DecisionKind::Operator { .. } => self.layout.op_token(chosen),
                DecisionKind::Skip { .. } => self.layout.skip_token(chosen == 1),
            };
            steps.push(step);
        }
        Rollout {
            trace: DecisionTrace { decisions },
            steps,
        }
    }

    /// Accumulates into `grad` the gradient of `sum_d <dlogits_d, logits_d>`
    /// propagated back to all parameters, where `dlogits(d)` yields the
    /// gradient with respect to decision `d`'s shaped logits.
    fn backprop<F>(&self, rollout: &Rollout<T>, mut dlogits: F, grad: &mut [T])
    where
        F: FnMut(usize, &Decision<T>) -> Option<Vec<T>>,
    {
        let l = &self.layout;
        let hd = l.hidden;
        let w = &self.values[l.lstm_w.clone()];
        let mut dh_next = vec![T::zero(); hd];
        let mut dc_next = vec![T::zero(); hd];
        let mut da = vec![T::zero(); 4 * hd];
        for (idx, step) in rollout.steps.iter().enumerate().rev() {
            let decision = &rollout.trace.decisions[idx];
            let mut dh = std::mem::replace(&mut dh_next, vec![T::zero(); hd]);
            if let Some(dl) = dlogits(idx, decision) {
                let shape = self.shape_derivative(&step.raw_logits);
                let (w_range, b_range) = match decision.kind {
                    DecisionKind::Operator { .. } => (l.op_w.clone(), l.op_b.clone()),
                    DecisionKind::Skip { .. } => (l.skip_w.clone(), l.skip_b.clone()),
                };
                for (r, (&d, &s)) in dl.iter().zip(&shape).enumerate() {
                    let draw = d * s;
                    if draw == T::zero() {
                        continue;
                    }
                    grad[b_range.start + r] += draw;
                    let row = w_range.start + r * hd;
                    for u in 0..hd {
                        grad[row + u] += draw * step.h[u];
                        dh[u] += draw * self.values[row + u];
                    }
                }
            }

            let g = &step.gates;
            let mut dc_prev = vec![T::zero(); hd];
            for u in 0..hd {
                let (i, f, gg, o) = (g[u], g[hd + u], g[2 * hd + u], g[3 * hd + u]);
                let tc = step.tanh_c[u];
                let dc = dc_next[u] + dh[u] * o * (T::one() - tc * tc);
                da[u] = dc * gg * i * (T::one() - i);
                da[hd + u] = dc * step.c_prev[u] * f * (T::one() - f);
                da[2 * hd + u] = dc * i * (T::one() - gg * gg);
                da[3 * hd + u] = dh[u] * tc * o * (T::one() - o);
                dc_prev[u] = dc * f;
            }
            dc_next = dc_prev;

            let x = self.embedding(step.token);
            let emb = l.embed.start + step.token * hd;
            for (row, &dar) in da.iter().enumerate() {
                if dar == T::zero() {
                    continue;
                }
                grad[l.lstm_b.start + row] += dar;
                let wrow = row * 2 * hd;
                let gw = l.lstm_w.start + wrow;
                for u in 0..hd {
                    grad[gw + u] += dar * x[u];
                    grad[gw + hd + u] += dar * step.h_prev[u];
                    grad[emb + u] += dar * w[wrow + u];
                    dh_next[u] += dar * w[wrow + hd + u];
                }
            }
        }
    }

    fn check_space(&self, spec: &SearchSpaceSpec, mode: SampleMode) -> Result<(), ControllerError> {
        if spec.n_ops() != self.config.n_ops {
            return Err(ControllerError::OperatorCount {
                controller: self.config.n_ops,
                space: spec.n_ops(),
            });
        }
        if mode == SampleMode::FixedSkip && spec.frozen_skips().is_none() {
            return Err(ControllerError::MissingFrozenMask);
        }
        Ok(())
    }

    fn forced_rollout(
        &self,
        arch: &ArchitectureVector,
        spec: &SearchSpaceSpec,
        mode: SampleMode,
        free: impl Fn(usize, DecisionKind) -> bool,
    ) -> Result<Rollout<T>, ControllerError> {
        self.check_space(spec, mode)?;
        let check = match mode {
            SampleMode::Joint => validate(arch, &spec.with_frozen_skips(None).expect("same shape")),
            SampleMode::FixedSkip => validate(arch, spec),
        };
        check.map_err(ControllerError::InvalidArch)?;
        let slots = decision_slots(spec, mode);
        Ok(self.rollout(&slots, |idx, kind, _| {
            let chosen = match kind {
                DecisionKind::Operator { node } => arch.ops[node],
                DecisionKind::Skip { position, .. } => usize::from(arch.skips.get(position)),
            };
            (chosen, free(idx, kind))
        }))
    }
}

fn choose_index<R: Rng + ?Sized, T: Scalar>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|p| *p > T::zero())
        .unwrap_or(probs.len() - 1)
}

fn argmax<T: Scalar>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

fn assemble_arch<T: Scalar>(
    trace: &DecisionTrace<T>,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
) -> ArchitectureVector {
    let mut ops = vec![0; spec.n_nodes()];
    let mut skips = match mode {
        SampleMode::FixedSkip => spec.frozen_skips().cloned().expect("checked by caller"),
        SampleMode::Joint => SkipMask::empty(spec.topology().edge_count()),
    };
    for d in &trace.decisions {
        match d.kind {
            DecisionKind::Operator { node } => ops[node] = d.chosen,
            DecisionKind::Skip { position, .. } => skips.set(position, d.chosen == 1),
        }
    }
    ArchitectureVector::new(ops, skips)
}

/// Samples an architecture; forced decisions in `forcing` are fed through the
/// controller but recorded as non-free.
pub fn sample_with<T: Scalar, R: Rng + ?Sized>(
    params: &ControllerParams<T>,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
    forcing: &Forcing,
    rng: &mut R,
) -> Result<(ArchitectureVector, DecisionTrace<T>), ControllerError> {
    params.check_space(spec, mode)?;
    let slots = decision_slots(spec, mode);
    let rollout = params.rollout(&slots, |_, kind, probs| match kind {
        DecisionKind::Operator { node } => match &forcing.ops {
            Some(ops) => (ops[node], false),
            None => (choose_index(probs, rng), true),
        },
        DecisionKind::Skip { position, .. } => match &forcing.skips {
            Some(mask) => (usize::from(mask.get(position)), false),
            None => (choose_index(probs, rng), true),
        },
    });
    let arch = assemble_arch(&rollout.trace, spec, mode);
    Ok((arch, rollout.trace))
}

pub fn sample<T: Scalar, R: Rng + ?Sized>(
    params: &ControllerParams<T>,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
    rng: &mut R,
) -> Result<(ArchitectureVector, DecisionTrace<T>), ControllerError> {
    sample_with(params, spec, mode, &Forcing::none(), rng)
}

/// Per-decision argmax decoding, honoring `forcing`.
pub fn greedy_decode<T: Scalar>(
    params: &ControllerParams<T>,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
    forcing: &Forcing,
) -> Result<(ArchitectureVector, DecisionTrace<T>), ControllerError> {
    params.check_space(spec, mode)?;
    let slots = decision_slots(spec, mode);
    let rollout = params.rollout(&slots, |_, kind, probs| match kind {
        DecisionKind::Operator { node } => match &forcing.ops {
            Some(ops) => (ops[node], false),
            None => (argmax(probs), true),
        },
        DecisionKind::Skip { position, .. } => match &forcing.skips {
            Some(mask) => (usize::from(mask.get(position)), false),
            None => (argmax(probs), true),
        },
    });
    let arch = assemble_arch(&rollout.trace, spec, mode);
    Ok((arch, rollout.trace))
}

/// Total log-probability of `arch` and the trace of forced decisions.
pub fn log_prob<T: Scalar>(
    params: &ControllerParams<T>,
    arch: &ArchitectureVector,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
) -> Result<(T, DecisionTrace<T>), ControllerError> {
    let rollout = params.forced_rollout(arch, spec, mode, |_, _| true)?;
    Ok((rollout.trace.total_log_prob(), rollout.trace))
}

/// Exact gradient of `log p(arch)` with respect to the flat parameters.
pub fn grad_log_prob<T: Scalar>(
    params: &ControllerParams<T>,
    arch: &ArchitectureVector,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
) -> Result<Vec<T>, ControllerError> {
    grad_log_prob_where(params, arch, spec, mode, |_, _| true)
}

/// Gradient of the log-probability restricted to decisions for which
/// `free(index, kind)` returns true. Excluded decisions still condition the
/// later ones.
pub fn grad_log_prob_where<T: Scalar>(
    params: &ControllerParams<T>,
    arch: &ArchitectureVector,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
    free: impl Fn(usize, DecisionKind) -> bool,
) -> Result<Vec<T>, ControllerError> {
    let rollout = params.forced_rollout(arch, spec, mode, free)?;
    let mut grad = vec![T::zero(); params.len()];
    params.backprop(
        &rollout,
        |_, d| {
            d.free.then(|| {
                d.probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| if k == d.chosen { T::one() - p } else { -p })
                    .collect()
            })
        },
        &mut grad,
    );
    Ok(grad)
}

/// Gradient of `sum_d sum_k target_d[k] * log p_d[k]` over the decisions of
/// `arch`, i.e. a (negated) cross-entropy against arbitrary per-decision
/// target vectors. `targets(d)` returns `None` to skip a decision.
pub fn grad_weighted_cross_entropy<T: Scalar>(
    params: &ControllerParams<T>,
    arch: &ArchitectureVector,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
    mut targets: impl FnMut(&Decision<T>) -> Option<Vec<T>>,
    grad: &mut [T],
) -> Result<(), ControllerError> {
    let rollout = params.forced_rollout(arch, spec, mode, |_, _| true)?;
    params.backprop(
        &rollout,
        |_, d| {
            targets(d).map(|y| {
                let mass = sum(y.iter().copied());
                y.iter().zip(&d.probs).map(|(&yk, &pk)| yk - mass * pk).collect()
            })
        },
        grad,
    );
    Ok(())
}

/// Relative error used by the gradient check:
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares [`grad_log_prob`] against central differences with step `h` on
/// every coordinate and returns the maximum [`relative_error`].
///
/// The analytic gradient is computed in `f64`. The differenced log-probability
/// is evaluated in binary128: in `f64` the quotient `(f(x+h) - f(x-h)) / 2h`
/// carries ~1e-9 of rounding noise at `h = 1e-6`, which swamps the many
/// LSTM-weight partials of order 1e-6..1e-9.
pub fn finite_diff_check(
    params: &ControllerParams<f64>,
    arch: &ArchitectureVector,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
    h: f64,
) -> Result<f64, ControllerError> {
    finite_diff_check_in::<f128::f128>(params, arch, spec, mode, h)
}

/// [`finite_diff_check`] with the log-probability evaluated in scalar type `E`.
pub fn finite_diff_check_in<E: Scalar>(
    params: &ControllerParams<f64>,
    arch: &ArchitectureVector,
    spec: &SearchSpaceSpec,
    mode: SampleMode,
    h: f64,
) -> Result<f64, ControllerError> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = grad_log_prob(params, arch, spec, mode)?;
    let base = ControllerParams::<E>::from_flat(
        params.config().clone(),
        params.flat().iter().map(|&v| E::of(v)).collect(),
    )?;
    // Validates once so the per-coordinate evaluations cannot fail.
    log_prob(&base, arch, spec, mode)?;
    let step = E::of(h);
    let two_h = step + step;
    let worst = (0..params.len())
        .into_par_iter()
        .map_init(
            || base.clone(),
            |probe, i| {
                let x = base.flat()[i];
                probe.flat_mut()[i] = x + step;
                let up = log_prob(probe, arch, spec, mode).expect("validated").0;
                probe.flat_mut()[i] = x - step;
                let down = log_prob(probe, arch, spec, mode).expect("validated").0;
                probe.flat_mut()[i] = x;
                relative_error(analytic[i], ((up - down) / two_h).as_f64())
            },
        )
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{candidate_edges, OperatorVocabulary};

    fn space(n: usize, k: usize, frozen: bool) -> SearchSpaceSpec {
        let mask = frozen.then(|| SkipMask::residual_chain(&candidate_edges(n)));
        SearchSpaceSpec::new(n, OperatorVocabulary::anonymous(k).unwrap(), mask).unwrap()
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let (h, k) = (8usize, 4usize);
        let p = ControllerParams::<f64>::zeros(ControllerConfig::new(h, k)).unwrap().len();
        // embeddings + LSTM weights + LSTM bias + op head + skip head
        let closed = (k + 3) * h + 4 * h * 2 * h + 4 * h + (h * k + k) + (h * 2 + 2);
        assert_eq!(p, closed);
        assert_eq!(p, 654);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ControllerConfig::new(6, 3);
        let a = ControllerParams::<f64>::init(cfg.clone(), 7).unwrap();
        let b = ControllerParams::<f64>::init(cfg.clone(), 7).unwrap();
        let c = ControllerParams::<f64>::init(cfg, 8).unwrap();
        assert_eq!(a.flat(), b.flat());
        assert_ne!(a.flat(), c.flat());
        assert!(a.flat().iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn zero_params_are_uniform() {
        let spec = space(4, 4, false);
        let params = ControllerParams::<f64>::zeros(ControllerConfig::new(5, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (arch, trace) = sample(&params, &spec, SampleMode::Joint, &mut rng).unwrap();
        assert_eq!(trace.len(), 4 + 3);
        for d in &trace.decisions {
            let expect = 1.0 / d.probs.len() as f64;
            assert!(d.probs.iter().all(|p| (p - expect).abs() < 1e-15));
        }
        let (total, _) = log_prob(&params, &arch, &spec, SampleMode::Joint).unwrap();
        let expected = 4.0 * (0.25f64).ln() + 3.0 * (0.5f64).ln();
        assert!((total - expected).abs() < 1e-12);

        let fixed = space(2, 4, true);
        let arch = ArchitectureVector::new(vec![3, 1], SkipMask::empty(0));
        let (total, _) = log_prob(&params, &arch, &fixed, SampleMode::FixedSkip).unwrap();
        assert!((total - 2.0 * (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn canonical_decision_order() {
        let spec = space(4, 3, false);
        let slots = decision_slots(&spec, SampleMode::Joint);
        let labels: Vec<String> = slots
            .iter()
            .map(|s| match s {
                DecisionKind::Operator { node } => format!("O{}", node + 1),
                DecisionKind::Skip { edge, .. } => format!("S{}{}", edge.t, edge.j),
            })
            .collect();
        assert_eq!(labels, ["O1", "O2", "O3", "S13", "O4", "S14", "S24"]);
    }

    #[test]
    fn sampled_trace_matches_log_prob() {
        let spec = space(5, 3, false);
        let params = ControllerParams::<f64>::init(ControllerConfig::new(7, 3), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (arch, trace) = sample(&params, &spec, SampleMode::Joint, &mut rng).unwrap();
            let (total, forced) = log_prob(&params, &arch, &spec, SampleMode::Joint).unwrap();
            assert_eq!(total, trace.total_log_prob());
            assert_eq!(forced, trace);
            for d in &trace.decisions {
                assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(d.probs.iter().all(|&p| p > 0.0));
                assert!((d.probs[d.chosen].ln() - d.log_prob).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_skip_copies_mask() {
        let spec = space(6, 4, true);
        let params = ControllerParams::<f64>::init(ControllerConfig::new(4, 4), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let (arch, trace) = sample(&params, &spec, SampleMode::FixedSkip, &mut rng).unwrap();
            assert_eq!(&arch.skips, spec.frozen_skips().unwrap());
            assert_eq!(trace.len(), 6);
        }
        let open = space(6, 4, false);
        assert!(matches!(
            sample(&params, &open, SampleMode::FixedSkip, &mut rng),
            Err(ControllerError::MissingFrozenMask)
        ));
    }

    #[test]
    fn forced_ops_are_not_free() {
        let spec = space(4, 3, false);
        let params = ControllerParams::<f64>::init(ControllerConfig::new(4, 3), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let forcing = Forcing::ops(vec![2, 1, 0, 2]);
        let (arch, trace) = sample_with(&params, &spec, SampleMode::Joint, &forcing, &mut rng).unwrap();
        assert_eq!(arch.ops, vec![2, 1, 0, 2]);
        for d in &trace.decisions {
            assert_eq!(d.free, matches!(d.kind, DecisionKind::Skip { .. }));
        }
    }

    #[test]
    fn exhaustive_probabilities_sum_to_one() {
        let spec = space(2, 2, true);
        let params = ControllerParams::<f64>::init(ControllerConfig::new(3, 2), 5).unwrap();
        let mut total = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let arch = ArchitectureVector::new(vec![a, b], SkipMask::empty(0));
                total += log_prob(&params, &arch, &spec, SampleMode::FixedSkip).unwrap().0.exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_params_gradient_sign() {
        let spec = space(1, 4, true);
        let params = ControllerParams::<f64>::zeros(ControllerConfig::new(3, 4)).unwrap();
        let arch = ArchitectureVector::new(vec![2], SkipMask::empty(0));
        let g = grad_log_prob(&params, &arch, &spec, SampleMode::FixedSkip).unwrap();
        let ob = params.layout().op_b.clone();
        for (k, v) in g[ob].iter().enumerate() {
            if k == 2 {
                assert!((v - 0.75).abs() < 1e-15);
            } else {
                assert!((v + 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_with_shaping() {
        let spec = space(4, 3, false);
        let mut cfg = ControllerConfig::new(5, 3);
        cfg.temperature = Some(1.7);
        cfg.tanh_constant = Some(2.5);
        let params = ControllerParams::<f64>::init(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (arch, _) = sample(&params, &spec, SampleMode::Joint, &mut rng).unwrap();
        let err = finite_diff_check(&params, &arch, &spec, SampleMode::Joint, 1e-6).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn double_precision_differences_hit_a_noise_floor() {
        let spec = space(4, 4, false);
        let params = ControllerParams::<f64>::init(ControllerConfig::new(8, 4), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (arch, _) = sample(&params, &spec, SampleMode::Joint, &mut rng).unwrap();
        let quad = finite_diff_check(&params, &arch, &spec, SampleMode::Joint, 1e-6).unwrap();
        let double = finite_diff_check_in::<f64>(&params, &arch, &spec, SampleMode::Joint, 1e-6).unwrap();
        assert!(quad < 1e-8, "{quad}");
        assert!(double > quad);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = ControllerParams::<f64>::init(ControllerConfig::new(4, 3), 21).unwrap();
        let mut buf = Vec::new();
        params.write_checkpoint(21, &mut buf).unwrap();
        let (back, seed) = ControllerParams::<f64>::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(seed, 21);
        assert_eq!(back, params);
        assert!(ControllerParams::<f64>::read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn single_precision_agrees_with_double() {
        let spec = space(4, 3, false);
        let p64 = ControllerParams::<f64>::init(ControllerConfig::new(6, 3), 2).unwrap();
        let flat32: Vec<f32> = p64.flat().iter().map(|&v| v as f32).collect();
        let p32 = ControllerParams::<f32>::from_flat(p64.config().clone(), flat32).unwrap();
        let arch = ArchitectureVector::new(vec![0, 2, 1, 1], SkipMask::from_bits(vec![true, false, true]));
        let (l64, _) = log_prob(&p64, &arch, &spec, SampleMode::Joint).unwrap();
        let (l32, _) = log_prob(&p32, &arch, &spec, SampleMode::Joint).unwrap();
        assert!((l64 - l32 as f64).abs() < 1e-5);
    }
}
