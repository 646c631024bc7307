//! Per-decision reward credit implied by the policy gradient, and its noise
//! over repeated batches.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::archspace::{Edge, SearchSpaceSpec};
use crate::pgtrainer::SampleBatch;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipReward {
    pub t: usize,
    pub j: usize,
    /// Credit for the edge being present.
    pub r1: f64,
    /// Credit for the edge being absent.
    pub r0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardAssignmentTable {
    /// `op_rewards[j][k]`, node `j` 0-indexed.
    pub op_rewards: Vec<Vec<f64>>,
    /// One entry per candidate edge, canonical order.
    pub skip_rewards: Vec<SkipReward>,
}

impl RewardAssignmentTable {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data serializes")
    }
}

/// `op_rewards[j][k] = (1/N) sum_i [op_j^i = k] R^i`; for each edge
/// `r1 = (1/N) sum_i [s^i = 1] R^i` and `r0` likewise for `s^i = 0`.
pub fn assign_rewards<T: Scalar>(batch: &SampleBatch<T>, spec: &SearchSpaceSpec) -> RewardAssignmentTable {
    assert!(!batch.is_empty(), "reward assignment needs a non-empty batch");
    let n = batch.len() as f64;
    let edges = spec.topology().edges();
    let mut op_rewards = vec![vec![0.0; spec.n_ops()]; spec.n_nodes()];
    let mut on = vec![0.0; edges.len()];
    let mut off = vec![0.0; edges.len()];
    for s in &batch.samples {
        for (j, &k) in s.arch.ops.iter().enumerate() {
            op_rewards[j][k] += s.reward;
        }
        for (e, &bit) in s.arch.skips.bits().iter().enumerate() {
            if bit {
                on[e] += s.reward;
            } else {
                off[e] += s.reward;
            }
        }
    }
    for row in &mut op_rewards {
        row.iter_mut().for_each(|v| *v /= n);
    }
    let skip_rewards = edges
        .iter()
        .enumerate()
        .map(|(e, &Edge { t, j })| SkipReward {
            t,
            j,
            r1: on[e] / n,
            r0: off[e] / n,
        })
        .collect();
    RewardAssignmentTable {
        op_rewards,
        skip_rewards,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Op,
    SkipOn,
    SkipOff,
}

impl EntryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Op => "op",
            EntryKind::SkipOn => "skip_on",
            EntryKind::SkipOff => "skip_off",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryNoise {
    /// `O{j}.{k}` for operators, `S{t}.{j}=1` / `S{t}.{j}=0` for skips
    /// (1-indexed nodes).
    pub decision_id: String,
    pub kind: EntryKind,
    pub node: usize,
    pub edge_t: Option<usize>,
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthNoise {
    /// 1-indexed node.
    pub node: usize,
    pub edge_count: usize,
    /// Mean variance of the skip credits (both values) on edges into `node`;
    /// `None` when the node has no incoming candidate edges.
    pub skip_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub entries: Vec<EntryNoise>,
    pub depth: Vec<DepthNoise>,
}

/// Welford's running mean and unbiased variance.
fn mean_var(values: &[f64]) -> (f64, f64) {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    (mean, m2 / (values.len() - 1) as f64)
}

impl NoiseStats {
    fn mean_variance(&self, pred: impl Fn(EntryKind) -> bool) -> f64 {
        let vs: Vec<f64> = self.entries.iter().filter(|e| pred(e.kind)).map(|e| e.variance).collect();
        if vs.is_empty() {
            0.0
        } else {
            vs.iter().sum::<f64>() / vs.len() as f64
        }
    }

    pub fn mean_op_variance(&self) -> f64 {
        self.mean_variance(|k| k == EntryKind::Op)
    }

    pub fn mean_skip_variance(&self) -> f64 {
        self.mean_variance(|k| k != EntryKind::Op)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "decision_id,kind,node,edge_t,mean,variance,count")?;
        for e in &self.entries {
            let edge_t = e.edge_t.map(|t| t.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{:?},{:?},{}",
                e.decision_id,
                e.kind.as_str(),
                e.node,
                edge_t,
                e.mean,
                e.variance,
                e.count
            )?;
        }
        Ok(())
    }
}

/// Per-entry mean and unbiased variance (divisor `count - 1`) over repeated
/// tables, plus skip variance stratified by target node.
pub fn assignment_noise_stats(tables: &[RewardAssignmentTable], spec: &SearchSpaceSpec) -> NoiseStats {
    assert!(tables.len() >= 2, "noise statistics need at least two tables");
    let count = tables.len();
    let mut entries = Vec::new();
    for j in 0..spec.n_nodes() {
        for k in 0..spec.n_ops() {
            let vals: Vec<f64> = tables.iter().map(|t| t.op_rewards[j][k]).collect();
            let (mean, variance) = mean_var(&vals);
            entries.push(EntryNoise {
                decision_id: format!("O{}.{}", j + 1, k),
                kind: EntryKind::Op,
                node: j + 1,
                edge_t: None,
                mean,
                variance,
                count,
            });
        }
    }
    let topo = spec.topology();
    for (e, edge) in topo.edges().iter().enumerate() {
        for (kind, bit) in [(EntryKind::SkipOn, 1), (EntryKind::SkipOff, 0)] {
            let vals: Vec<f64> = tables
                .iter()
                .map(|t| {
                    let s = &t.skip_rewards[e];
                    if bit == 1 {
                        s.r1
                    } else {
                        s.r0
                    }
                })
                .collect();
            let (mean, variance) = mean_var(&vals);
            entries.push(EntryNoise {
                decision_id: format!("S{}.{}={bit}", edge.t, edge.j),
                kind,
                node: edge.j,
                edge_t: Some(edge.t),
                mean,
                variance,
                count,
            });
        }
    }
    let depth = (1..=spec.n_nodes())
        .map(|node| {
            let vs: Vec<f64> = entries
                .iter()
                .filter(|e| e.kind != EntryKind::Op && e.node == node)
                .map(|e| e.variance)
                .collect();
            DepthNoise {
                node,
                edge_count: topo.edges_into(node).len(),
                skip_variance: (!vs.is_empty()).then(|| vs.iter().sum::<f64>() / vs.len() as f64),
            }
        })
        .collect();
    NoiseStats { entries, depth }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{ArchitectureVector, OperatorVocabulary, SkipMask};
    use crate::controller::{log_prob, ControllerConfig, ControllerParams, DecisionTrace, Forcing, SampleMode};
    use crate::oracles::{PureOracle, TabularOracle, TabularOracleSpec};
    use crate::pgtrainer::{collect_batch, Sample};

    fn space(n: usize, k: usize) -> SearchSpaceSpec {
        SearchSpaceSpec::new(n, OperatorVocabulary::anonymous(k).unwrap(), None).unwrap()
    }

    fn hand_batch(rows: &[(Vec<usize>, Vec<bool>, f64)]) -> SampleBatch {
        SampleBatch {
            mode: SampleMode::Joint,
            samples: rows
                .iter()
                .map(|(ops, bits, r)| Sample {
                    arch: ArchitectureVector::new(ops.clone(), SkipMask::from_bits(bits.clone())),
                    trace: DecisionTrace::default(),
                    reward: *r,
                })
                .collect(),
        }
    }

    #[test]
    fn single_unit_reward_marks_choices() {
        let sp = space(3, 2);
        let t = assign_rewards(&hand_batch(&[(vec![1, 0, 1], vec![true], 1.0)]), &sp);
        assert_eq!(t.op_rewards, vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(t.skip_rewards, vec![SkipReward { t: 1, j: 3, r1: 1.0, r0: 0.0 }]);
    }

    #[test]
    fn two_sample_example() {
        let sp = space(3, 2);
        let b = hand_batch(&[(vec![0, 0, 0], vec![false], 0.5), (vec![1, 0, 0], vec![true], 1.0)]);
        let t = assign_rewards(&b, &sp);
        assert_eq!(t.op_rewards[0], vec![0.25, 0.5]);
        assert_eq!(t.skip_rewards[0].r0, 0.25);
        assert_eq!(t.skip_rewards[0].r1, 0.5);
    }

    #[test]
    fn conservation_on_sampled_batches() {
        let sp = space(5, 3);
        let p = ControllerParams::<f64>::init(ControllerConfig::new(8, 3), 3).unwrap();
        let mut oracle = TabularOracle::generate(&TabularOracleSpec { seed: 5, ..Default::default() }, &sp).unwrap();
        for step in 0..20 {
            let b = collect_batch(&p, &sp, SampleMode::Joint, &Forcing::none(), &mut oracle, 7, step, 1).unwrap();
            let t = assign_rewards(&b, &sp);
            let mean = b.mean_reward();
            for row in &t.op_rewards {
                assert!((row.iter().sum::<f64>() - mean).abs() < 1e-12);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
            for s in &t.skip_rewards {
                assert!((s.r1 + s.r0 - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_tables_have_zero_variance() {
        let sp = space(3, 2);
        let t = assign_rewards(&hand_batch(&[(vec![1, 0, 1], vec![true], 0.7)]), &sp);
        let stats = assignment_noise_stats(&[t.clone(), t.clone(), t], &sp);
        assert!(stats.entries.iter().all(|e| e.variance == 0.0 && e.count == 3));
    }

    #[test]
    fn two_tables_differing_by_delta() {
        // Unbiased variance of {x, x + d} is d^2 / 2.
        let sp = space(3, 2);
        let a = assign_rewards(&hand_batch(&[(vec![1, 0, 1], vec![true], 0.5)]), &sp);
        let mut b = a.clone();
        b.op_rewards[1][0] += 0.2;
        let stats = assignment_noise_stats(&[a, b], &sp);
        let e = stats.entries.iter().find(|e| e.decision_id == "O2.0").unwrap();
        assert!((e.variance - 0.02).abs() < 1e-15);
        assert!((e.mean - 0.6).abs() < 1e-15);
        assert_eq!(stats.entries.iter().filter(|e| e.variance != 0.0).count(), 1);
        assert_eq!(stats.depth.iter().map(|d| d.edge_count).collect::<Vec<_>>(), vec![0, 0, 1]);
    }

    #[test]
    fn csv_layout() {
        let sp = space(3, 2);
        let a = assign_rewards(&hand_batch(&[(vec![1, 0, 1], vec![true], 0.5)]), &sp);
        let stats = assignment_noise_stats(&[a.clone(), a], &sp);
        let mut out = Vec::new();
        stats.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("decision_id,kind,node,edge_t,mean,variance,count"));
        assert_eq!(lines.next(), Some("O1.0,op,1,,0.0,0.0,2"));
        assert!(text.contains("S1.3=1,skip_on,3,1,0.5,0.0,2"));
    }

    #[test]
    fn converges_to_exact_expectation() {
        // E[op_rewards[j][k]] = sum_tau p(tau) [op_j = k] R(tau), by enumeration.
        let sp = space(3, 3);
        let p = ControllerParams::<f64>::init(ControllerConfig::new(6, 3), 21).unwrap();
        let mut oracle = TabularOracle::generate(&TabularOracleSpec { seed: 9, ..Default::default() }, &sp).unwrap();
        let mut exact_ops = vec![vec![0.0; 3]; 3];
        let mut exact_on = 0.0;
        let mut second_ops = vec![vec![0.0; 3]; 3];
        let mut second_on = 0.0;
        for code in 0..27usize {
            for bit in [false, true] {
                let ops = vec![code % 3, (code / 3) % 3, code / 9];
                let arch = ArchitectureVector::new(ops.clone(), SkipMask::from_bits(vec![bit]));
                let prob = log_prob(&p, &arch, &sp, SampleMode::Joint).unwrap().0.exp();
                let r = oracle.evaluate(&arch, 0);
                for (j, &k) in ops.iter().enumerate() {
                    exact_ops[j][k] += prob * r;
                    second_ops[j][k] += prob * r * r;
                }
                if bit {
                    exact_on += prob * r;
                    second_on += prob * r * r;
                }
            }
        }
        let n = 100_000;
        let b = collect_batch(&p, &sp, SampleMode::Joint, &Forcing::none(), &mut oracle, n, 0, 77).unwrap();
        let t = assign_rewards(&b, &sp);
        let se = |mean: f64, second: f64| ((second - mean * mean) / n as f64).sqrt();
        for j in 0..3 {
            for k in 0..3 {
                let dev = (t.op_rewards[j][k] - exact_ops[j][k]).abs();
                assert!(dev < 5.0 * se(exact_ops[j][k], second_ops[j][k]), "({j},{k}) {dev}");
            }
        }
        assert!((t.skip_rewards[0].r1 - exact_on).abs() < 5.0 * se(exact_on, second_on));
    }

    #[test]
    fn skip_credit_is_noisier_than_operator_credit() {
        let sp = space(6, 4);
        let mut wins = 0;
        for seed in 0..20u64 {
            let p = ControllerParams::<f64>::init(ControllerConfig::new(8, 4), seed).unwrap();
            let mut oracle =
                TabularOracle::generate(&TabularOracleSpec { seed, ..Default::default() }, &sp).unwrap();
            let tables: Vec<_> = (0..50)
                .map(|step| {
                    let b = collect_batch(&p, &sp, SampleMode::Joint, &Forcing::none(), &mut oracle, 16, step, seed)
                        .unwrap();
                    assign_rewards(&b, &sp)
                })
                .collect();
            let stats = assignment_noise_stats(&tables, &sp);
            if stats.mean_skip_variance() > stats.mean_op_variance() {
                wins += 1;
            }
        }
        assert!(wins > 10, "{wins}/20");
    }
}
