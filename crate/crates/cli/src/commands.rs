use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nar_core::archspace::{candidate_edges, SearchSpaceSpec, SkipMask};
use nar_core::controller::{
    finite_diff_check, sample, ControllerConfig, ControllerParams, Forcing, SampleMode,
};
use nar_core::nar::{run_search, ArchRecord, ControllerSettings, SearchConfig, SearchResult};
use nar_core::oracles::{
    enumerate_optimum, OracleConfig, OracleError, ProxyOracle, PureOracle, TabularOracle,
    ENUMERATION_LIMIT,
};
use nar_core::pgtrainer::collect_batch;
use nar_core::reward::{assign_rewards, assignment_noise_stats, DepthNoise, RewardAssignmentTable};
use nar_core::seeding::{derive_seed, stream_rng};
use num_bigint::BigUint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AnalyzeRewardsConfig, EnumerateConfig, GradcheckConfig};
use crate::error::CliError;

pub const RESULT_FILE: &str = "result.json";
pub const CHECKPOINT_FILE: &str = "controller.ckpt";

/// Files written into a run's output directory, in write order.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
    ) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
        if !self.files.iter().any(|n| n == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).expect("report serializes");
        self.write_with(name, |w| writeln!(w, "{text}"))
    }
}

pub fn controller_config(settings: &ControllerSettings, space: &SearchSpaceSpec) -> ControllerConfig {
    ControllerConfig {
        hidden: settings.hidden,
        n_ops: space.n_ops(),
        temperature: settings.temperature,
        tanh_constant: settings.tanh_constant,
    }
}

// ─── search ────────────────────────────────────────────────────────────────

pub fn search(config: &SearchConfig, out: &mut Outputs) -> Result<SearchResult, CliError> {
    let mut result = run_search(config)?;
    if let Some(params) = &result.params {
        let mut failure = None;
        out.write_with(CHECKPOINT_FILE, |w| {
            if let Err(e) = params.write_checkpoint(config.seed, &mut *w) {
                failure = Some(e.to_string());
            }
            Ok(())
        })?;
        if let Some(msg) = failure {
            return Err(CliError::Internal(format!("checkpoint: {msg}")));
        }
        result.checkpoint = Some(CHECKPOINT_FILE.into());
    }
    out.write_with("gradlog.csv", |w| result.grad_log.write_csv(w))?;
    if !result.incumbents.is_empty() {
        out.write_with("trace.csv", |w| {
            writeln!(w, "phase_index,phase,end_step,arch,reward,replaced")?;
            for inc in &result.incumbents {
                writeln!(
                    w,
                    "{},{:?},{},{},{:?},{}",
                    inc.phase_index,
                    inc.phase,
                    inc.end_step,
                    arch_text(&inc.arch),
                    inc.reward,
                    inc.replaced
                )?;
            }
            Ok(())
        })?;
    }
    out.json(RESULT_FILE, &result)?;
    Ok(result)
}

fn arch_text(arch: &ArchRecord) -> String {
    let ops: Vec<String> = arch.ops.iter().map(usize::to_string).collect();
    if arch.skips.is_empty() {
        format!("[{}]", ops.join(","))
    } else {
        format!("[{}]/{}", ops.join(","), arch.skips)
    }
}

// ─── enumerate ─────────────────────────────────────────────────────────────

/// Builds an oracle whose reward depends only on `(arch, step)`.
pub fn pure_oracle(config: &OracleConfig, space: &SearchSpaceSpec) -> Result<Box<dyn PureOracle>, CliError> {
    Ok(match config {
        OracleConfig::Tabular(spec) => Box::new(TabularOracle::generate(spec, space)?),
        OracleConfig::Proxy { base, bias } => {
            Box::new(ProxyOracle::new(TabularOracle::generate(base, space)?, bias.clone())?)
        }
        OracleConfig::Supernet(_) => {
            return Err(CliError::Config(
                "this command needs a pure oracle (tabular or proxy), not the supernet".into(),
            ))
        }
    })
}

/// Ranking is kept in memory only up to this many architectures unless
/// explicitly requested.
const AUTO_RANKING_LIMIT: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerateReport {
    pub ops_cardinality: String,
    pub skip_cardinality: String,
    pub count: u64,
    pub best_arch: ArchRecord,
    pub best_reward: f64,
    pub top_fraction: f64,
    /// Reward of the last architecture inside the top fraction.
    pub top_threshold: Option<f64>,
    pub ranking_file: Option<String>,
}

pub fn enumerate(config: &EnumerateConfig, out: &mut Outputs) -> Result<EnumerateReport, CliError> {
    if !(config.top_fraction > 0.0 && config.top_fraction <= 1.0) {
        return Err(CliError::Config("top_fraction must lie in (0, 1]".into()));
    }
    let (ops, skips) = config.space.cardinality();
    let total = &ops * &skips;
    if total > BigUint::from(ENUMERATION_LIMIT) {
        return Err(OracleError::TooLarge {
            size: total,
            limit: ENUMERATION_LIMIT,
        }
        .into());
    }
    let oracle = pure_oracle(&config.oracle, &config.space)?;
    let with_ranking = config.ranking || total <= BigUint::from(AUTO_RANKING_LIMIT);
    let found = enumerate_optimum(oracle.as_ref(), &config.space, with_ranking)?;
    let mut ranking_file = None;
    if config.ranking {
        let ranking = found.ranking.as_ref().expect("ranking requested");
        out.write_with("ranking.csv", |w| {
            writeln!(w, "rank,arch,reward")?;
            for (i, (arch, r)) in ranking.iter().enumerate() {
                writeln!(w, "{},{},{:?}", i + 1, arch, r)?;
            }
            Ok(())
        })?;
        ranking_file = Some("ranking.csv".to_string());
    }
    let report = EnumerateReport {
        ops_cardinality: ops.to_string(),
        skip_cardinality: skips.to_string(),
        count: found.count,
        best_arch: (&found.best).into(),
        best_reward: found.best_reward,
        top_fraction: config.top_fraction,
        top_threshold: found.top_fraction_threshold(config.top_fraction),
        ranking_file,
    };
    out.json(RESULT_FILE, &report)?;
    Ok(report)
}

// ─── analyze-rewards ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub sample_mode: SampleMode,
    pub batch_size: usize,
    pub batches: usize,
    pub batch_mean_rewards: Vec<f64>,
    pub mean_op_variance: f64,
    pub mean_skip_variance: f64,
    pub depth: Vec<DepthNoise>,
    pub tables: Vec<RewardAssignmentTable>,
}

pub fn analyze_rewards(config: &AnalyzeRewardsConfig, out: &mut Outputs) -> Result<AnalyzeReport, CliError> {
    if config.batch_size == 0 || config.batches < 2 {
        return Err(CliError::Config("need batch_size >= 1 and batches >= 2".into()));
    }
    let space = &config.space;
    let mode = config.sample_mode.unwrap_or(if space.frozen_skips().is_some() {
        SampleMode::FixedSkip
    } else {
        SampleMode::Joint
    });
    let params = ControllerParams::<f64>::init(
        controller_config(&config.controller, space),
        derive_seed(config.seed, "controller"),
    )?;
    let mut oracle = config.oracle.build(space)?;
    let sample_seed = derive_seed(config.seed, "sample");
    let mut tables = Vec::with_capacity(config.batches);
    let mut means = Vec::with_capacity(config.batches);
    for b in 0..config.batches {
        let batch = collect_batch(
            &params,
            space,
            mode,
            &Forcing::none(),
            oracle.as_mut(),
            config.batch_size,
            b as u64,
            sample_seed,
        )?;
        means.push(batch.mean_reward());
        tables.push(assign_rewards(&batch, space));
    }
    let stats = assignment_noise_stats(&tables, space);
    out.write_with("noise.csv", |w| stats.write_csv(w))?;
    let report = AnalyzeReport {
        sample_mode: mode,
        batch_size: config.batch_size,
        batches: config.batches,
        batch_mean_rewards: means,
        mean_op_variance: stats.mean_op_variance(),
        mean_skip_variance: stats.mean_skip_variance(),
        depth: stats.depth,
        tables,
    };
    out.json(RESULT_FILE, &report)?;
    Ok(report)
}

// ─── gradcheck ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckModeReport {
    pub mode: SampleMode,
    pub max_rel_error: f64,
    pub worst_point: usize,
    pub point_errors: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub points: usize,
    pub parameter_count: usize,
    pub modes: Vec<GradcheckModeReport>,
    pub pass: bool,
}

fn gradcheck_space(space: &SearchSpaceSpec, mode: SampleMode) -> Result<SearchSpaceSpec, CliError> {
    let frozen = match mode {
        SampleMode::Joint => None,
        SampleMode::FixedSkip => Some(
            space
                .frozen_skips()
                .cloned()
                .unwrap_or_else(|| SkipMask::residual_chain(&candidate_edges(space.n_nodes()))),
        ),
    };
    space
        .with_frozen_skips(frozen)
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Finite-difference check of the log-probability gradient. Point 0 is the
/// all-zero parameter vector; the others are seeded random initializations.
/// Each point is checked on an architecture sampled from its own policy.
pub fn gradcheck(config: &GradcheckConfig, out: &mut Outputs) -> Result<GradcheckReport, CliError> {
    if config.points == 0 || config.modes.is_empty() {
        return Err(CliError::Config("need at least one point and one mode".into()));
    }
    if !(config.h > 0.0 && config.tolerance > 0.0) {
        return Err(CliError::Config("h and tolerance must be positive".into()));
    }
    let cfg = ControllerConfig::new(config.hidden, config.space.n_ops());
    let init_seed = derive_seed(config.seed, "gradcheck");
    let points: Vec<ControllerParams<f64>> = (0..config.points)
        .map(|i| match i {
            0 => ControllerParams::zeros(cfg.clone()),
            _ => ControllerParams::init(cfg.clone(), init_seed.wrapping_add(i as u64)),
        })
        .collect::<Result<_, _>>()?;
    let arch_seed = derive_seed(config.seed, "gradcheck-arch");
    let mut modes = Vec::new();
    for &mode in &config.modes {
        let space = gradcheck_space(&config.space, mode)?;
        let errors: Vec<f64> = points
            .par_iter()
            .enumerate()
            .map(|(i, params)| {
                let mut rng = stream_rng(arch_seed, i as u64, 0);
                let (arch, _) = sample(params, &space, mode, &mut rng)?;
                finite_diff_check(params, &arch, &space, mode, config.h)
            })
            .collect::<Result<_, _>>()?;
        let (worst_point, max_rel_error) = errors
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
        modes.push(GradcheckModeReport {
            mode,
            max_rel_error,
            worst_point,
            pass: max_rel_error < config.tolerance,
            point_errors: errors,
        });
    }
    let report = GradcheckReport {
        h: config.h,
        tolerance: config.tolerance,
        points: config.points,
        parameter_count: points[0].len(),
        pass: modes.iter().all(|m| m.pass),
        modes,
    };
    out.json(RESULT_FILE, &report)?;
    Ok(report)
}
