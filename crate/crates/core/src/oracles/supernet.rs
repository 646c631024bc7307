//! Toy weight-sharing supernet on a synthetic two-class Gaussian mixture.
//!
//! Every node transforms a fixed-width feature vector. Parametric operators
//! own one shared parameter bank per node (affine map followed by a rectifier
//! or a tanh); pooling operators are fixed pairwise max / mean pools over the
//! two halves of the feature vector. Skip edges add earlier node outputs into
//! the input of later nodes. A shared linear head classifies the last node's
//! output.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Oracle, OracleError};
use crate::archspace::{ArchitectureVector, SearchSpaceSpec, SkipMask};
use crate::seeding::{derive_seed, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train: usize,
    pub validation: usize,
    /// Distance of each mixture component mean from the origin.
    pub separation: f64,
    /// Per-coordinate noise std-dev.
    pub noise: f64,
    /// Gaussian components per class.
    pub modes_per_class: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 512,
            validation: 256,
            separation: 2.0,
            noise: 1.0,
            modes_per_class: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySupernetSpec {
    pub width: usize,
    pub dataset: DatasetSpec,
    /// SGD steps run on the shared banks for each child evaluation.
    pub child_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Bank weights start uniform in `[-s, s]` with `s = init_scale / sqrt(width)`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ToySupernetSpec {
    fn default() -> Self {
        Self {
            width: 8,
            dataset: DatasetSpec::default(),
            child_steps: 50,
            learning_rate: 0.05,
            batch_size: 32,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SupernetError {
    #[error("supernet configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    AffineRelu,
    AffineTanh,
    MaxPool,
    MeanPool,
}

impl OpKind {
    fn parametric(self) -> bool {
        matches!(self, OpKind::AffineRelu | OpKind::AffineTanh)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Bank {
    /// Row-major `width x width`.
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    /// Row-major `2 x width`.
    v: Vec<f64>,
    c: [f64; 2],
}

#[derive(Debug, Clone)]
struct Dataset {
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
}

/// Parameters of one child: the banks its operators select plus the head.
#[derive(Debug, Clone)]
struct Child {
    banks: Vec<Option<Bank>>,
    head: Head,
}

#[derive(Debug, Clone)]
pub struct ToySupernet {
    spec: ToySupernetSpec,
    space: SearchSpaceSpec,
    kinds: Vec<OpKind>,
    /// `banks[node][op]`, `None` for pooling operators.
    banks: Vec<Vec<Option<Bank>>>,
    head: Head,
    train: Dataset,
    validation: Dataset,
}

fn generate_dataset(spec: &DatasetSpec, width: usize) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let modes = spec.modes_per_class.max(1);
    let means: Vec<Vec<f64>> = (0..2 * modes)
        .map(|_| {
            let v: Vec<f64> = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|a| a / norm * spec.separation).collect()
        })
        .collect();
    let total = spec.train + spec.validation;
    let mut samples: Vec<(Vec<f64>, usize)> = (0..total)
        .map(|i| {
            let class = i % 2;
            let mode = (i / 2) % modes;
            let mean = &means[class * modes + mode];
            let x = mean
                .iter()
                .map(|m| m + spec.noise * { let e: f64 = StandardNormal.sample(&mut rng); e })
                .collect();
            (x, class)
        })
        .collect();
    samples.shuffle(&mut rng);
    let val = samples.split_off(spec.train);
    let unzip = |s: Vec<(Vec<f64>, usize)>| {
        let (x, y) = s.into_iter().unzip();
        Dataset { x, y }
    };
    (unzip(samples), unzip(val))
}

fn init_bank(width: usize, scale: f64, rng: &mut ChaCha8Rng) -> Bank {
    let s = scale / (width as f64).sqrt();
    Bank {
        w: (0..width * width).map(|_| rng.random_range(-s..=s)).collect(),
        b: vec![0.0; width],
    }
}

fn fold_checksum(values: impl Iterator<Item = f64>) -> u64 {
    values.fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Forward cache for one input.
struct Trace {
    /// `outs[0]` is the input, `outs[j]` node j's output (1-indexed).
    outs: Vec<Vec<f64>>,
    /// Node inputs `z_j`, `ins[j - 1]`.
    ins: Vec<Vec<f64>>,
    logits: [f64; 2],
}

impl ToySupernet {
    pub fn new(spec: ToySupernetSpec, space: &SearchSpaceSpec) -> Result<Self, SupernetError> {
        if spec.width < 2 {
            return Err(SupernetError::Config("width must be >= 2".into()));
        }
        if spec.batch_size == 0 || spec.dataset.train == 0 || spec.dataset.validation == 0 {
            return Err(SupernetError::Config(
                "batch size and dataset splits must be non-empty".into(),
            ));
        }
        let (mut np, mut nn) = (0, 0);
        let kinds = space
            .vocab()
            .iter()
            .map(|op| {
                if op.parametric {
                    np += 1;
                    if np % 2 == 1 {
                        OpKind::AffineRelu
                    } else {
                        OpKind::AffineTanh
                    }
                } else {
                    nn += 1;
                    if nn % 2 == 1 {
                        OpKind::MaxPool
                    } else {
                        OpKind::MeanPool
                    }
                }
            })
            .collect::<Vec<_>>();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "supernet-init"));
        let banks = (0..space.n_nodes())
            .map(|_| {
                kinds
                    .iter()
                    .map(|k| k.parametric().then(|| init_bank(spec.width, spec.init_scale, &mut rng)))
                    .collect()
            })
            .collect();
        let head = Head {
            v: vec![0.0; 2 * spec.width],
            c: [0.0; 2],
        };
        let (train, validation) = generate_dataset(&spec.dataset, spec.width);
        Ok(Self {
            spec,
            space: space.clone(),
            kinds,
            banks,
            head,
            train,
            validation,
        })
    }

    pub fn spec(&self) -> &ToySupernetSpec {
        &self.spec
    }

    /// Checksum of the bank for `(node, op)`; `None` for pooling operators.
    pub fn bank_checksum(&self, node: usize, op: usize) -> Option<u64> {
        self.banks[node][op]
            .as_ref()
            .map(|b| fold_checksum(b.w.iter().chain(&b.b).copied()))
    }

    fn extract(&self, arch: &ArchitectureVector) -> Child {
        Child {
            banks: arch
                .ops
                .iter()
                .enumerate()
                .map(|(node, &op)| self.banks[node][op].clone())
                .collect(),
            head: self.head.clone(),
        }
    }

    fn forward(&self, child: &Child, arch: &ArchitectureVector, x: &[f64]) -> Trace {
        let d = self.spec.width;
        let topo = self.space.topology();
        let mut outs = vec![x.to_vec()];
        let mut ins = Vec::with_capacity(arch.ops.len());
        for (node, &op) in arch.ops.iter().enumerate() {
            let j = node + 1;
            let mut z = outs[j - 1].clone();
            for pos in topo.edges_into(j) {
                if arch.skips.get(pos) {
                    let t = topo.edges()[pos].t;
                    for (zi, oi) in z.iter_mut().zip(&outs[t]) {
                        *zi += oi;
                    }
                }
            }
            let y = match self.kinds[op] {
                kind @ (OpKind::AffineRelu | OpKind::AffineTanh) => {
                    let bank = child.banks[node].as_ref().expect("parametric op has a bank");
                    (0..d)
                        .map(|r| {
                            let a = bank.w[r * d..][..d].iter().zip(&z).map(|(w, v)| w * v).sum::<f64>()
                                + bank.b[r];
                            if kind == OpKind::AffineRelu {
                                a.max(0.0)
                            } else {
                                a.tanh()
                            }
                        })
                        .collect()
                }
                OpKind::MaxPool => (0..d).map(|i| z[i].max(z[(i + d / 2) % d])).collect(),
                OpKind::MeanPool => (0..d).map(|i| 0.5 * (z[i] + z[(i + d / 2) % d])).collect(),
            };
            ins.push(z);
            outs.push(y);
        }
        let last = outs.last().expect("input is present");
        let h = &child.head;
        let logits = [0, 1].map(|r| {
            h.v[r * d..][..d].iter().zip(last).map(|(w, v)| w * v).sum::<f64>() + h.c[r]
        });
        Trace { outs, ins, logits }
    }

    /// One SGD step of `child` on `batch` (indices into the train split).
    /// Returns the mean cross-entropy before the step.
    fn sgd_step(&self, child: &mut Child, arch: &ArchitectureVector, batch: &[usize]) -> f64 {
        let d = self.spec.width;
        let topo = self.space.topology();
        let n = arch.ops.len();
        let mut g_banks: Vec<Option<Bank>> = child
            .banks
            .iter()
            .map(|b| {
                b.as_ref().map(|_| Bank {
                    w: vec![0.0; d * d],
                    b: vec![0.0; d],
                })
            })
            .collect();
        let mut g_head = Head {
            v: vec![0.0; 2 * d],
            c: [0.0; 2],
        };
        let mut loss = 0.0;
        for &idx in batch {
            let x = &self.train.x[idx];
            let label = self.train.y[idx];
            let tr = self.forward(child, arch, x);
            let m = tr.logits[0].max(tr.logits[1]);
            let e = [(tr.logits[0] - m).exp(), (tr.logits[1] - m).exp()];
            let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            loss -= p[label].max(1e-300).ln();
            let dl = [p[0] - f64::from(label == 0), p[1] - f64::from(label == 1)];

            let mut d_out: Vec<Vec<f64>> = vec![vec![0.0; d]; n + 1];
            for r in 0..2 {
                g_head.c[r] += dl[r];
                for u in 0..d {
                    g_head.v[r * d + u] += dl[r] * tr.outs[n][u];
                    d_out[n][u] += dl[r] * child.head.v[r * d + u];
                }
            }
            for j in (1..=n).rev() {
                let node = j - 1;
                let z = &tr.ins[node];
                let y = &tr.outs[j];
                let dy = std::mem::take(&mut d_out[j]);
                let mut dz = vec![0.0; d];
                match self.kinds[arch.ops[node]] {
                    kind @ (OpKind::AffineRelu | OpKind::AffineTanh) => {
                        let bank = child.banks[node].as_ref().expect("bank");
                        let gb = g_banks[node].as_mut().expect("bank");
                        for r in 0..d {
                            let da = if kind == OpKind::AffineRelu {
                                if y[r] > 0.0 {
                                    dy[r]
                                } else {
                                    0.0
                                }
                            } else {
                                dy[r] * (1.0 - y[r] * y[r])
                            };
                            if da == 0.0 {
                                continue;
                            }
                            gb.b[r] += da;
                            for u in 0..d {
                                gb.w[r * d + u] += da * z[u];
                                dz[u] += da * bank.w[r * d + u];
                            }
                        }
                    }
                    OpKind::MaxPool => {
                        for i in 0..d {
                            let p = (i + d / 2) % d;
                            if z[i] >= z[p] {
                                dz[i] += dy[i];
                            } else {
                                dz[p] += dy[i];
                            }
                        }
                    }
                    OpKind::MeanPool => {
                        for i in 0..d {
                            let p = (i + d / 2) % d;
                            dz[i] += 0.5 * dy[i];
                            dz[p] += 0.5 * dy[i];
                        }
                    }
                }
                for u in 0..d {
                    d_out[j - 1][u] += dz[u];
                }
                for pos in topo.edges_into(j) {
                    if arch.skips.get(pos) {
                        let t = topo.edges()[pos].t;
                        for u in 0..d {
                            d_out[t][u] += dz[u];
                        }
                    }
                }
            }
        }
        let scale = self.spec.learning_rate / batch.len() as f64;
        for (bank, g) in child.banks.iter_mut().zip(&g_banks) {
            if let (Some(bank), Some(g)) = (bank.as_mut(), g) {
                for (w, gw) in bank.w.iter_mut().zip(&g.w) {
                    *w -= scale * gw;
                }
                for (b, gb) in bank.b.iter_mut().zip(&g.b) {
                    *b -= scale * gb;
                }
            }
        }
        for (v, gv) in child.head.v.iter_mut().zip(&g_head.v) {
            *v -= scale * gv;
        }
        for r in 0..2 {
            child.head.c[r] -= scale * g_head.c[r];
        }
        loss / batch.len() as f64
    }

    fn accuracy(&self, child: &Child, arch: &ArchitectureVector) -> f64 {
        let correct = self
            .validation
            .x
            .iter()
            .zip(&self.validation.y)
            .filter(|(x, &y)| {
                let l = self.forward(child, arch, x).logits;
                // Ties predict class 0.
                usize::from(l[1] > l[0]) == y
            })
            .count();
        correct as f64 / self.validation.y.len() as f64
    }

    /// Validation accuracy of `arch` with the current shared parameters, no
    /// training.
    pub fn validation_accuracy(&self, arch: &ArchitectureVector) -> f64 {
        self.accuracy(&self.extract(arch), arch)
    }

    fn minibatch(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.train.y.len();
        (0..self.spec.batch_size).map(|_| rng.random_range(0..n)).collect()
    }

    /// Trains a copy of the child for `arch` from the current snapshot and
    /// returns its validation accuracy with the trained copy.
    fn train_child(&self, arch: &ArchitectureVector, step: u64, index: usize) -> (f64, Child) {
        let mut child = self.extract(arch);
        let mut rng = stream_rng(derive_seed(self.spec.seed, "child"), step, index as u64);
        for _ in 0..self.spec.child_steps {
            let batch = self.minibatch(&mut rng);
            self.sgd_step(&mut child, arch, &batch);
        }
        (self.accuracy(&child, arch), child)
    }

    /// Evaluates `archs` concurrently against the current snapshot, then
    /// merges each child's parameter change back into the shared banks in
    /// sample order. A bank selected by `m` children receives the mean of
    /// their changes.
    fn evaluate_all(&mut self, archs: &[ArchitectureVector], step: u64) -> Result<Vec<f64>, OracleError> {
        let results: Vec<(f64, Child)> = archs
            .par_iter()
            .enumerate()
            .map(|(i, a)| self.train_child(a, step, i))
            .collect();
        let n_ops = self.kinds.len();
        let mut uses = vec![vec![0usize; n_ops]; self.banks.len()];
        for a in archs {
            for (node, &op) in a.ops.iter().enumerate() {
                uses[node][op] += 1;
            }
        }
        let snapshot_banks = self.banks.clone();
        let snapshot_head = self.head.clone();
        let mut rewards = Vec::with_capacity(archs.len());
        for (index, ((reward, child), arch)) in results.into_iter().zip(archs).enumerate() {
            let finite = child
                .head
                .v
                .iter()
                .chain(child.banks.iter().flatten().flat_map(|b| b.w.iter()))
                .all(|v| v.is_finite());
            if !finite || !reward.is_finite() {
                return Err(OracleError::Evaluation {
                    index,
                    message: "child training diverged".into(),
                });
            }
            for (node, (&op, trained)) in arch.ops.iter().zip(&child.banks).enumerate() {
                if let (Some(trained), Some(start)) = (trained, &snapshot_banks[node][op]) {
                    let share = 1.0 / uses[node][op] as f64;
                    let bank = self.banks[node][op].as_mut().expect("parametric");
                    for (w, (t, s)) in bank.w.iter_mut().zip(trained.w.iter().zip(&start.w)) {
                        *w += share * (t - s);
                    }
                    for (b, (t, s)) in bank.b.iter_mut().zip(trained.b.iter().zip(&start.b)) {
                        *b += share * (t - s);
                    }
                }
            }
            let share = 1.0 / archs.len() as f64;
            for (v, (t, s)) in self.head.v.iter_mut().zip(child.head.v.iter().zip(&snapshot_head.v)) {
                *v += share * (t - s);
            }
            for r in 0..2 {
                self.head.c[r] += share * (child.head.c[r] - snapshot_head.c[r]);
            }
            rewards.push(reward);
        }
        Ok(rewards)
    }

    /// Trains the shared parameters on uniformly random architectures for
    /// `epochs` passes over the train split, one random architecture per SGD
    /// step. Returns the mean training loss of each epoch.
    pub fn pretrain(&mut self, epochs: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain"));
        let steps = self.train.y.len().div_ceil(self.spec.batch_size);
        let (n, k) = (self.space.n_nodes(), self.space.n_ops());
        let edges = self.space.topology().edge_count();
        let frozen = self.space.frozen_skips().cloned();
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut total = 0.0;
            for _ in 0..steps {
                let ops = (0..n).map(|_| rng.random_range(0..k)).collect();
                let skips = frozen
                    .clone()
                    .unwrap_or_else(|| SkipMask::from_bits((0..edges).map(|_| rng.random()).collect()));
                let arch = ArchitectureVector::new(ops, skips);
                let mut child = self.extract(&arch);
                let batch = self.minibatch(&mut rng);
                total += self.sgd_step(&mut child, &arch, &batch);
                for (node, (&op, bank)) in arch.ops.iter().zip(child.banks).enumerate() {
                    if bank.is_some() {
                        self.banks[node][op] = bank;
                    }
                }
                self.head = child.head;
            }
            losses.push(total / steps as f64);
        }
        losses
    }
}

impl Oracle for ToySupernet {
    fn evaluate_batch(
        &mut self,
        archs: &[ArchitectureVector],
        step: u64,
    ) -> Result<Vec<f64>, OracleError> {
        self.evaluate_all(archs, step)
    }
}
