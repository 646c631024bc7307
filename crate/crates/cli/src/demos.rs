//! Multi-seed experiments: head gradient magnitudes, skip-density bias under
//! a biased proxy, exact alternating ascent, and supernet pretraining.

use std::io::Write;

use nar_core::archspace::{ArchitectureVector, OperatorVocabulary, SearchSpaceSpec, SkipMask};
use nar_core::nar::{
    exact_alternating_ascent, joint_search, nar_search, run_search, ArchRecord, SearchConfig,
    SearchMode, SearchResult,
};
use nar_core::oracles::{enumerate_optimum, OracleConfig, TabularOracle, TabularOracleSpec};
use nar_core::seeding::{derive_seed, stream_rng};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{Outputs, RESULT_FILE};
use crate::config::{BiasConfig, Eq11Config, Fig1Config, PretrainConfig};
use crate::error::CliError;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn run_seeds(seed: u64, runs: usize) -> Vec<u64> {
    (0..runs as u64).map(|r| seed.wrapping_add(r)).collect()
}

fn search_config(space: &SearchSpaceSpec, mode: SearchMode, oracle: OracleConfig, seed: u64) -> SearchConfig {
    SearchConfig {
        space: space.clone(),
        mode,
        oracle,
        controller: Default::default(),
        trainer: Default::default(),
        updates: 0,
        block_length: 100,
        pretrain_epochs: 0,
        seed,
        initial_arch: None,
        initial_skips: None,
    }
}

fn with_noise_seed(oracle: &OracleConfig, seed: u64) -> OracleConfig {
    match oracle {
        OracleConfig::Proxy { base, bias } => {
            let mut bias = bias.clone();
            bias.noise_seed = seed;
            OracleConfig::Proxy {
                base: base.clone(),
                bias,
            }
        }
        other => other.clone(),
    }
}

// ─── fig1 ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Run {
    pub seed: u64,
    pub op_mean: f64,
    pub skip_mean: f64,
    pub op_variance: f64,
    pub skip_variance: f64,
    pub skip_variance_higher: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Report {
    pub updates: usize,
    pub runs: Vec<Fig1Run>,
    pub skip_variance_higher: usize,
    pub verdict: String,
}

pub fn fig1(config: &Fig1Config, out: &mut Outputs) -> Result<Fig1Report, CliError> {
    if config.space.frozen_skips().is_some() {
        return Err(CliError::Config("fig1 runs joint search; remove frozen_skips".into()));
    }
    if config.updates < 2 || config.runs == 0 {
        return Err(CliError::Config("fig1 needs updates >= 2 and runs >= 1".into()));
    }
    let results: Vec<(u64, SearchResult)> = run_seeds(config.seed, config.runs)
        .into_par_iter()
        .map(|s| {
            let mut cfg = search_config(&config.space, SearchMode::Joint, with_noise_seed(&config.oracle, s), s);
            cfg.controller = config.controller.clone();
            cfg.trainer = config.trainer.clone();
            cfg.updates = config.updates;
            joint_search(&cfg).map(|r| (s, r))
        })
        .collect::<Result<_, _>>()?;

    out.write_with("gradlog.csv", |w| {
        writeln!(w, "seed,step,op_grad_norm,skip_grad_norm")?;
        for (s, r) in &results {
            for g in &r.grad_log.records {
                writeln!(w, "{},{},{:?},{:?}", s, g.step, g.op_grad_norm, g.skip_grad_norm)?;
            }
        }
        Ok(())
    })?;

    let runs: Vec<Fig1Run> = results
        .iter()
        .map(|(s, r)| {
            let (op, skip) = (r.grad_log.op_series(), r.grad_log.skip_series());
            let (op_variance, skip_variance) = (variance(&op), variance(&skip));
            Fig1Run {
                seed: *s,
                op_mean: mean(&op),
                skip_mean: mean(&skip),
                op_variance,
                skip_variance,
                skip_variance_higher: skip_variance > op_variance,
            }
        })
        .collect();
    let higher = runs.iter().filter(|r| r.skip_variance_higher).count();
    let report = Fig1Report {
        updates: config.updates,
        verdict: format!("skip variance higher: {higher}/{}", runs.len()),
        skip_variance_higher: higher,
        runs,
    };
    out.json(RESULT_FILE, &report)?;
    Ok(report)
}

// ─── bias ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRun {
    pub seed: u64,
    /// Skip density of the joint policy's decoded architecture.
    pub joint_density: f64,
    pub joint_best_density: f64,
    pub joint_best_reward: f64,
    pub nar_density: f64,
    pub nar_matches_mask: bool,
    pub nar_best_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub base_optimum: ArchRecord,
    pub base_optimum_reward: f64,
    pub optimum_density: f64,
    pub nar_mask: String,
    pub mask_density: f64,
    pub runs: Vec<BiasRun>,
    pub joint_mean_density: f64,
    pub joint_density_sd: f64,
    pub nar_mean_density: f64,
    /// Runs whose joint density exceeds the base optimum's.
    pub joint_exceeds_optimum: usize,
    pub nar_matches_mask: usize,
    pub verdict: String,
}

pub fn bias(config: &BiasConfig, out: &mut Outputs) -> Result<BiasReport, CliError> {
    let space = &config.space;
    if space.frozen_skips().is_some() {
        return Err(CliError::Config(
            "bias compares free and frozen skips; remove frozen_skips from space".into(),
        ));
    }
    if config.runs == 0 {
        return Err(CliError::Config("bias needs runs >= 1".into()));
    }
    let mask = config.nar_mask()?;
    let frozen = space
        .with_frozen_skips(Some(mask.clone()))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let base = TabularOracle::generate(&config.base, space)?;
    let optimum = enumerate_optimum(&base, space, false)?;

    let runs: Vec<BiasRun> = run_seeds(config.seed, config.runs)
        .into_par_iter()
        .map(|s| -> Result<BiasRun, CliError> {
            let mut bias = config.bias.clone();
            bias.noise_seed = s;
            let oracle = OracleConfig::Proxy {
                base: config.base.clone(),
                bias,
            };
            let mut joint = search_config(space, SearchMode::Joint, oracle.clone(), s);
            joint.controller = config.controller.clone();
            joint.trainer = config.trainer.clone();
            joint.updates = config.updates;
            let mut nar = joint.clone();
            nar.space = frozen.clone();
            nar.mode = SearchMode::NarFixedSkip;
            let j = joint_search(&joint)?;
            let n = nar_search(&nar)?;
            Ok(BiasRun {
                seed: s,
                joint_density: j.derived_arch.skip_density,
                joint_best_density: j.best_arch.skip_density,
                joint_best_reward: j.best_reward,
                nar_density: n.derived_arch.skip_density,
                nar_matches_mask: n.derived_arch.skips == mask.to_hex(),
                nar_best_reward: n.best_reward,
            })
        })
        .collect::<Result<_, _>>()?;

    let optimum_density = optimum.best.skips.density();
    let joint: Vec<f64> = runs.iter().map(|r| r.joint_density).collect();
    let nar: Vec<f64> = runs.iter().map(|r| r.nar_density).collect();
    let exceeds = runs.iter().filter(|r| r.joint_density > optimum_density).count();
    let matches = runs.iter().filter(|r| r.nar_matches_mask).count();
    let report = BiasReport {
        base_optimum: (&optimum.best).into(),
        base_optimum_reward: optimum.best_reward,
        optimum_density,
        nar_mask: mask.to_hex(),
        mask_density: mask.density(),
        joint_mean_density: mean(&joint),
        joint_density_sd: if joint.len() > 1 { variance(&joint).sqrt() } else { 0.0 },
        nar_mean_density: mean(&nar),
        joint_exceeds_optimum: exceeds,
        nar_matches_mask: matches,
        verdict: format!(
            "joint density above optimum: {exceeds}/{n}; nar density equals mask: {matches}/{n}",
            n = runs.len()
        ),
        runs,
    };
    out.json(RESULT_FILE, &report)?;
    Ok(report)
}

// ─── eq11 ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentRun {
    pub instance: usize,
    pub oracle_seed: u64,
    pub phases: usize,
    pub improvements: usize,
    pub monotone: bool,
    pub initial_reward: f64,
    pub final_reward: f64,
    pub global_optimum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eq11Report {
    pub instances: usize,
    pub monotone: usize,
    pub terminated: usize,
    pub reached_global_optimum: usize,
    pub max_phases: usize,
    pub verdict: String,
    pub runs: Vec<AscentRun>,
}

fn random_arch(space: &SearchSpaceSpec, rng: &mut impl Rng) -> ArchitectureVector {
    let ops = (0..space.n_nodes()).map(|_| rng.random_range(0..space.n_ops())).collect();
    let skips = match space.frozen_skips() {
        Some(mask) => mask.clone(),
        None => SkipMask::from_bits((0..space.topology().edge_count()).map(|_| rng.random()).collect()),
    };
    ArchitectureVector::new(ops, skips)
}

pub fn eq11(config: &Eq11Config, out: &mut Outputs) -> Result<Eq11Report, CliError> {
    if config.instances == 0 {
        return Err(CliError::Config("eq11 needs instances >= 1".into()));
    }
    let vocab = OperatorVocabulary::anonymous(config.n_ops).map_err(|e| CliError::Config(e.to_string()))?;
    let space = SearchSpaceSpec::new(config.n_nodes, vocab, None).map_err(|e| CliError::Config(e.to_string()))?;
    let init_seed = derive_seed(config.seed, "eq11-init");
    let traces = (0..config.instances)
        .into_par_iter()
        .map(|i| -> Result<_, CliError> {
            let spec = TabularOracleSpec {
                seed: config.seed.wrapping_add(i as u64),
                ..config.oracle.clone()
            };
            let oracle = TabularOracle::generate(&spec, &space)?;
            let init = random_arch(&space, &mut stream_rng(init_seed, i as u64, 0));
            let trace = exact_alternating_ascent(&oracle, &space, &init)?;
            let optimum = enumerate_optimum(&oracle, &space, false)?;
            Ok((spec.seed, trace, optimum.best_reward))
        })
        .collect::<Result<Vec<_>, _>>()?;

    out.write_with("trace.csv", |w| {
        writeln!(w, "instance,phase,arch,reward")?;
        for (i, (_, trace, _)) in traces.iter().enumerate() {
            for e in &trace.entries {
                writeln!(w, "{},{},{},{:?}", i, e.phase.as_str(), e.arch, e.reward)?;
            }
        }
        Ok(())
    })?;

    let runs: Vec<AscentRun> = traces
        .iter()
        .enumerate()
        .map(|(i, (seed, trace, best))| AscentRun {
            instance: i,
            oracle_seed: *seed,
            phases: trace.phases,
            improvements: trace.entries.len() - 1,
            monotone: trace.is_monotone(),
            initial_reward: trace.entries[0].reward,
            final_reward: trace.last().reward,
            global_optimum: *best,
        })
        .collect();
    let monotone = runs.iter().filter(|r| r.monotone).count();
    let report = Eq11Report {
        instances: runs.len(),
        monotone,
        // Every returned trace terminated; failures abort the run above.
        terminated: runs.len(),
        reached_global_optimum: runs.iter().filter(|r| r.final_reward == r.global_optimum).count(),
        max_phases: runs.iter().map(|r| r.phases).max().unwrap_or(0),
        verdict: format!("monotone: {monotone}/{}", runs.len()),
        runs,
    };
    out.json(RESULT_FILE, &report)?;
    Ok(report)
}

// ─── pretrain ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRun {
    pub seed: u64,
    pub entropy_without: f64,
    pub entropy_with: f64,
    pub with_at_least_without: bool,
    pub final_mean_reward_without: f64,
    pub final_mean_reward_with: f64,
    pub pretrain_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub pretrain_epochs: usize,
    pub runs: Vec<PretrainRun>,
    pub with_at_least_without: usize,
    pub majority: bool,
    pub verdict: String,
}

pub fn pretrain(config: &PretrainConfig, out: &mut Outputs) -> Result<PretrainReport, CliError> {
    if config.runs == 0 || config.pretrain_epochs == 0 {
        return Err(CliError::Config("pretrain needs runs >= 1 and pretrain_epochs >= 1".into()));
    }
    let mode = if config.space.frozen_skips().is_some() {
        SearchMode::NarFixedSkip
    } else {
        SearchMode::Joint
    };
    let runs: Vec<PretrainRun> = run_seeds(config.seed, config.runs)
        .into_par_iter()
        .map(|s| -> Result<PretrainRun, CliError> {
            let mut net = config.supernet.clone();
            net.seed = s;
            net.dataset.seed = s;
            let mut cfg = search_config(&config.space, mode, OracleConfig::Supernet(net), s);
            cfg.controller = config.controller.clone();
            cfg.trainer = config.trainer.clone();
            cfg.updates = config.updates;
            let without = run_search(&cfg)?;
            cfg.pretrain_epochs = config.pretrain_epochs;
            let with = run_search(&cfg)?;
            let last = |r: &SearchResult| r.history.last().map_or(f64::NAN, |h| h.mean_reward);
            Ok(PretrainRun {
                seed: s,
                entropy_without: without.final_operator_entropy,
                entropy_with: with.final_operator_entropy,
                with_at_least_without: with.final_operator_entropy >= without.final_operator_entropy,
                final_mean_reward_without: last(&without),
                final_mean_reward_with: last(&with),
                pretrain_losses: with.pretrain_losses,
            })
        })
        .collect::<Result<_, _>>()?;
    let count = runs.iter().filter(|r| r.with_at_least_without).count();
    let report = PretrainReport {
        pretrain_epochs: config.pretrain_epochs,
        majority: 2 * count > runs.len(),
        verdict: format!("entropy with pretraining >= without: {count}/{}", runs.len()),
        with_at_least_without: count,
        runs,
    };
    out.json(RESULT_FILE, &report)?;
    Ok(report)
}
