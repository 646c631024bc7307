use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{OracleError, PureOracle};
use crate::archspace::{ArchitectureVector, SearchSpaceSpec, SkipMask};

/// Largest total cardinality [`enumerate_optimum`] will scan.
pub const ENUMERATION_LIMIT: u64 = 1 << 24;

/// Generator parameters for a random tabular landscape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularOracleSpec {
    pub seed: u64,
    /// Std-dev of the per-node operator utilities.
    pub utility_scale: f64,
    /// Mean of the per-edge skip weights.
    pub edge_mean: f64,
    /// Std-dev of the per-edge skip weights.
    pub edge_scale: f64,
    /// Number of pairwise operator interaction terms.
    pub interactions: usize,
    pub interaction_scale: f64,
}

impl Default for TabularOracleSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            utility_scale: 1.0,
            edge_mean: 0.0,
            edge_scale: 0.5,
            interactions: 4,
            interaction_scale: 0.5,
        }
    }
}

/// Bonus added when node `a` uses operator `op_a` and node `b` uses `op_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub a: usize,
    pub op_a: usize,
    pub b: usize,
    pub op_b: usize,
    pub value: f64,
}

/// `reward = logistic(sum_j u[j][op_j] + sum_edges w_e * s_e + interactions)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularOracle {
    pub utilities: Vec<Vec<f64>>,
    pub edge_weights: Vec<f64>,
    pub interactions: Vec<Interaction>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TabularOracle {
    pub fn from_parts(
        utilities: Vec<Vec<f64>>,
        edge_weights: Vec<f64>,
        interactions: Vec<Interaction>,
    ) -> Self {
        Self {
            utilities,
            edge_weights,
            interactions,
        }
    }

    pub fn generate(spec: &TabularOracleSpec, space: &SearchSpaceSpec) -> Result<Self, OracleError> {
        let normal = |mean: f64, sd: f64| {
            Normal::new(mean, sd).map_err(|e| OracleError::Config(format!("bad scale: {e}")))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (n, k) = (space.n_nodes(), space.n_ops());
        let u = normal(0.0, spec.utility_scale)?;
        let utilities = (0..n)
            .map(|_| (0..k).map(|_| u.sample(&mut rng)).collect())
            .collect();
        let w = normal(spec.edge_mean, spec.edge_scale)?;
        let edge_weights = (0..space.topology().edge_count())
            .map(|_| w.sample(&mut rng))
            .collect();
        let iv = normal(0.0, spec.interaction_scale)?;
        let interactions = if n < 2 {
            Vec::new()
        } else {
            (0..spec.interactions)
                .map(|_| {
                    let a = rng.random_range(0..n);
                    let b = (a + rng.random_range(1..n)) % n;
                    Interaction {
                        a,
                        op_a: rng.random_range(0..k),
                        b,
                        op_b: rng.random_range(0..k),
                        value: iv.sample(&mut rng),
                    }
                })
                .collect()
        };
        Ok(Self {
            utilities,
            edge_weights,
            interactions,
        })
    }

    /// Argument of the logistic.
    pub fn score(&self, arch: &ArchitectureVector) -> f64 {
        let mut s: f64 = arch
            .ops
            .iter()
            .zip(&self.utilities)
            .map(|(&op, row)| row[op])
            .sum();
        for (pos, w) in self.edge_weights.iter().enumerate() {
            if arch.skips.get(pos) {
                s += w;
            }
        }
        for it in &self.interactions {
            if arch.ops[it.a] == it.op_a && arch.ops[it.b] == it.op_b {
                s += it.value;
            }
        }
        s
    }

    pub fn reward(&self, arch: &ArchitectureVector) -> f64 {
        logistic(self.score(arch))
    }
}

impl PureOracle for TabularOracle {
    fn evaluate(&self, arch: &ArchitectureVector, _step: u64) -> f64 {
        self.reward(arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    pub best: ArchitectureVector,
    pub best_reward: f64,
    pub count: u64,
    /// Every architecture by descending reward, ties in ascending encoding
    /// order. Only filled when requested.
    pub ranking: Option<Vec<(ArchitectureVector, f64)>>,
}

impl Enumeration {
    /// Reward of the architecture at 0-based rank `rank` (requires ranking).
    pub fn reward_at_rank(&self, rank: usize) -> Option<f64> {
        self.ranking.as_ref()?.get(rank).map(|(_, r)| *r)
    }

    /// Smallest reward still inside the best `fraction` of the space.
    pub fn top_fraction_threshold(&self, fraction: f64) -> Option<f64> {
        let ranking = self.ranking.as_ref()?;
        let keep = ((ranking.len() as f64 * fraction).ceil() as usize).clamp(1, ranking.len());
        Some(ranking[keep - 1].1)
    }
}

fn ops_from_index(mut index: u64, n: usize, k: usize) -> Vec<usize> {
    let mut ops = vec![0; n];
    for slot in ops.iter_mut().rev() {
        *slot = (index % k as u64) as usize;
        index /= k as u64;
    }
    ops
}

fn mask_from_index(index: u64, len: usize) -> SkipMask {
    // Bit 0 of the mask is the most significant position, matching the
    // lexicographic order of the bit vector.
    SkipMask::from_bits((0..len).map(|i| index >> (len - 1 - i) & 1 == 1).collect())
}

/// Exhaustive scan of `space` (evaluated at step 0). Ties resolve to the
/// lexicographically smallest architecture.
pub fn enumerate_optimum<O: PureOracle + ?Sized>(
    oracle: &O,
    space: &SearchSpaceSpec,
    with_ranking: bool,
) -> Result<Enumeration, OracleError> {
    let (ops_count, skip_count) = space.cardinality();
    let total = &ops_count * &skip_count;
    if total > BigUint::from(ENUMERATION_LIMIT) {
        return Err(OracleError::TooLarge {
            size: total,
            limit: ENUMERATION_LIMIT,
        });
    }
    let ops_count: u64 = ops_count.try_into().expect("bounded by limit");
    let skip_count: u64 = skip_count.try_into().expect("bounded by limit");
    let (n, k) = (space.n_nodes(), space.n_ops());
    let edges = space.topology().edge_count();
    let frozen = space.frozen_skips().cloned();
    let arch_at = |oi: u64, si: u64| {
        let skips = match &frozen {
            Some(mask) => mask.clone(),
            None => mask_from_index(si, edges),
        };
        ArchitectureVector::new(ops_from_index(oi, n, k), skips)
    };

    if with_ranking {
        let mut all: Vec<(ArchitectureVector, f64)> = (0..ops_count)
            .into_par_iter()
            .flat_map_iter(|oi| {
                (0..skip_count).map(move |si| {
                    let arch = arch_at(oi, si);
                    let r = oracle.evaluate(&arch, 0);
                    (arch, r)
                })
            })
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (best, best_reward) = all[0].clone();
        return Ok(Enumeration {
            best,
            best_reward,
            count: ops_count * skip_count,
            ranking: Some(all),
        });
    }

    // Each ops block is scanned in lexicographic order keeping the first
    // maximum; blocks are combined preferring the lower index on ties.
    let (bi, bs, best_reward) = (0..ops_count)
        .into_par_iter()
        .map(|oi| {
            let mut best = (oi, 0u64, f64::NEG_INFINITY);
            for si in 0..skip_count {
                let r = oracle.evaluate(&arch_at(oi, si), 0);
                if r > best.2 {
                    best = (oi, si, r);
                }
            }
            best
        })
        .reduce(
            || (u64::MAX, u64::MAX, f64::NEG_INFINITY),
            |a, b| {
                if b.2 > a.2 || (b.2 == a.2 && (b.0, b.1) < (a.0, a.1)) {
                    b
                } else {
                    a
                }
            },
        );
    Ok(Enumeration {
        best: arch_at(bi, bs),
        best_reward,
        count: ops_count * skip_count,
        ranking: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{candidate_edges, OperatorVocabulary};

    fn space(n: usize, k: usize, frozen: Option<SkipMask>) -> SearchSpaceSpec {
        SearchSpaceSpec::new(n, OperatorVocabulary::anonymous(k).unwrap(), frozen).unwrap()
    }

    /// 2 nodes, 2 ops, no edges: score = u[0][a] + u[1][b] + bonus(a=1, b=0).
    fn hand_instance() -> TabularOracle {
        TabularOracle::from_parts(
            vec![vec![0.0, 1.0], vec![0.5, -0.5]],
            vec![],
            vec![Interaction {
                a: 0,
                op_a: 1,
                b: 1,
                op_b: 1,
                value: 2.0,
            }],
        )
    }

    #[test]
    fn zero_landscape_is_one_half() {
        let o = TabularOracle::from_parts(vec![vec![0.0; 3]; 4], vec![0.0; 3], vec![]);
        let sp = space(4, 3, None);
        let e = enumerate_optimum(&o, &sp, true).unwrap();
        assert!(e.ranking.unwrap().iter().all(|(_, r)| *r == 0.5));
    }

    #[test]
    fn hand_instance_matches_arithmetic() {
        let o = hand_instance();
        let l = |x: f64| 1.0 / (1.0 + (-x).exp());
        let cases = [
            ([0, 0], l(0.5)),
            ([0, 1], l(-0.5)),
            ([1, 0], l(1.5)),
            ([1, 1], l(1.0 - 0.5 + 2.0)),
        ];
        for (ops, expect) in cases {
            let arch = ArchitectureVector::new(ops.to_vec(), SkipMask::empty(0));
            assert_eq!(o.reward(&arch), expect);
        }
        let e = enumerate_optimum(&o, &space(2, 2, None), false).unwrap();
        assert_eq!(e.best.ops, vec![1, 1]);
        assert_eq!(e.best_reward, l(2.5));
    }

    #[test]
    fn constant_oracle_picks_smallest_encoding() {
        let o = TabularOracle::from_parts(vec![vec![0.3; 2]; 4], vec![0.0; 3], vec![]);
        let sp = space(4, 2, None);
        for rank in [false, true] {
            let e = enumerate_optimum(&o, &sp, rank).unwrap();
            assert_eq!(e.best.ops, vec![0; 4]);
            assert_eq!(e.best.skips, SkipMask::empty(3));
        }
    }

    #[test]
    fn ranked_and_unranked_scans_agree() {
        let sp = space(4, 3, None);
        let o = TabularOracle::generate(&TabularOracleSpec { seed: 3, ..Default::default() }, &sp).unwrap();
        let a = enumerate_optimum(&o, &sp, false).unwrap();
        let b = enumerate_optimum(&o, &sp, true).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.best_reward, b.best_reward);
        assert_eq!(a.count, 81 * 8);
        let ranking = b.ranking.unwrap();
        assert_eq!(ranking.len(), 81 * 8);
        assert!(ranking.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn frozen_space_has_4096_entries() {
        let topo = candidate_edges(6);
        let sp = space(6, 4, Some(SkipMask::residual_chain(&topo)));
        let o = TabularOracle::generate(&TabularOracleSpec::default(), &sp).unwrap();
        let e = enumerate_optimum(&o, &sp, true).unwrap();
        assert_eq!(e.count, 4096);
        assert!(e.ranking.unwrap().iter().all(|(a, _)| &a.skips == sp.frozen_skips().unwrap()));
    }

    #[test]
    fn guard_rejects_large_spaces() {
        let sp = space(12, 6, None);
        let o = TabularOracle::generate(&TabularOracleSpec::default(), &sp).unwrap();
        assert!(matches!(
            enumerate_optimum(&o, &sp, false),
            Err(OracleError::TooLarge { .. })
        ));
    }

    #[test]
    fn evaluation_is_pure() {
        let sp = space(5, 3, None);
        let o = TabularOracle::generate(&TabularOracleSpec { seed: 9, ..Default::default() }, &sp).unwrap();
        let arch = ArchitectureVector::new(vec![0, 1, 2, 1, 0], SkipMask::from_bits(vec![true, false, true, true, false, true]));
        let first = o.evaluate(&arch, 0);
        assert!((0..10_000).all(|s| o.evaluate(&arch, s) == first));
    }
}
