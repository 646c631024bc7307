//! Run configuration: one JSON document whose `"mode"` field selects the
//! experiment. Search modes deserialize into [`SearchConfig`]; every other mode
//! has its own struct below. Unknown fields are rejected everywhere.

use std::fs;
use std::path::Path;

use nar_core::archspace::{candidate_edges, OperatorVocabulary, SearchSpaceSpec, SkipMask};
use nar_core::controller::SampleMode;
use nar_core::nar::{ControllerSettings, SearchConfig};
use nar_core::oracles::{OracleConfig, ProxyBiasSpec, TabularOracleSpec, ToySupernetSpec};
use nar_core::pgtrainer::{AdamConfig, TrainerConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const SEARCH_MODES: [&str; 3] = ["nar_fixed_skip", "alternating", "joint"];
pub const DEMO_MODES: [&str; 4] = ["fig1", "bias", "eq11", "pretrain"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnumerateConfig {
    pub space: SearchSpaceSpec,
    pub oracle: OracleConfig,
    /// Also write the full ranking to `ranking.csv`.
    #[serde(default)]
    pub ranking: bool,
    #[serde(default = "default_top_fraction")]
    pub top_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_top_fraction() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeRewardsConfig {
    pub space: SearchSpaceSpec,
    pub oracle: OracleConfig,
    /// Defaults to `fixed_skip` for spaces with frozen skips, else `joint`.
    #[serde(default)]
    pub sample_mode: Option<SampleMode>,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default = "default_analyze_batch")]
    pub batch_size: usize,
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_analyze_batch() -> usize {
    16
}

fn default_batches() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Joint mode drops any frozen mask; fixed-skip mode uses the frozen mask,
    /// or the residual chain when there is none.
    #[serde(default = "default_gradcheck_space")]
    pub space: SearchSpaceSpec,
    #[serde(default = "default_gradcheck_hidden")]
    pub hidden: usize,
    /// Parameter points; the first is all zeros, the rest are random inits.
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_gradcheck_modes")]
    pub modes: Vec<SampleMode>,
    #[serde(default)]
    pub seed: u64,
}

fn default_gradcheck_space() -> SearchSpaceSpec {
    SearchSpaceSpec::new(4, OperatorVocabulary::compact(), None).expect("valid preset space")
}

fn default_gradcheck_hidden() -> usize {
    8
}

fn default_points() -> usize {
    20
}

fn default_h() -> f64 {
    1e-6
}

fn default_tolerance() -> f64 {
    1e-5
}

fn default_gradcheck_modes() -> Vec<SampleMode> {
    vec![SampleMode::Joint, SampleMode::FixedSkip]
}

/// Gradient-magnitude comparison of the two controller heads in joint search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig1Config {
    #[serde(default = "default_demo_space")]
    pub space: SearchSpaceSpec,
    #[serde(default = "default_fig1_oracle")]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default = "default_updates")]
    pub updates: usize,
    /// Run `r` uses master seed `seed + r` (also the proxy noise seed).
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_demo_space() -> SearchSpaceSpec {
    SearchSpaceSpec::new(6, OperatorVocabulary::compact(), None).expect("valid preset space")
}

fn default_demo_base() -> TabularOracleSpec {
    TabularOracleSpec {
        seed: 11,
        ..Default::default()
    }
}

fn default_fig1_oracle() -> OracleConfig {
    OracleConfig::Proxy {
        base: default_demo_base(),
        bias: ProxyBiasSpec {
            beta0: 0.0,
            decay: 1e9,
            sigma0: 0.1,
            noise_seed: 0,
        },
    }
}

fn default_updates() -> usize {
    500
}

fn default_runs() -> usize {
    10
}

/// Joint search against a skip-biased proxy, compared with operator-only
/// search under a frozen mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    /// Must not freeze skips; the NAR arm freezes `nar_skips` itself.
    #[serde(default = "default_demo_space")]
    pub space: SearchSpaceSpec,
    #[serde(default = "default_demo_base")]
    pub base: TabularOracleSpec,
    #[serde(default = "default_bias")]
    pub bias: ProxyBiasSpec,
    /// Hex mask for the NAR arm; defaults to the residual chain.
    #[serde(default)]
    pub nar_skips: Option<String>,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default = "default_updates")]
    pub updates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_bias() -> ProxyBiasSpec {
    ProxyBiasSpec {
        beta0: 0.3,
        decay: 1000.0,
        sigma0: 0.1,
        noise_seed: 0,
    }
}

impl BiasConfig {
    pub fn nar_mask(&self) -> Result<SkipMask, CliError> {
        let topology = candidate_edges(self.space.n_nodes());
        match &self.nar_skips {
            Some(hex) => SkipMask::from_hex(hex, topology.edge_count())
                .map_err(|e| CliError::Config(format!("nar_skips: {e}"))),
            None => Ok(SkipMask::residual_chain(&topology)),
        }
    }
}

/// Exact alternating ascent over random tabular instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Eq11Config {
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_eq11_nodes")]
    pub n_nodes: usize,
    #[serde(default = "default_eq11_ops")]
    pub n_ops: usize,
    /// Landscape template; instance `i` uses generator seed `seed + i`.
    #[serde(default)]
    pub oracle: TabularOracleSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_instances() -> usize {
    100
}

fn default_eq11_nodes() -> usize {
    5
}

fn default_eq11_ops() -> usize {
    3
}

/// Final-policy operator entropy with and without supernet pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// Frozen skips run operator-only search, otherwise joint search.
    #[serde(default = "default_pretrain_space")]
    pub space: SearchSpaceSpec,
    /// Template; run `r` sets both the supernet and dataset seeds to `seed + r`.
    #[serde(default = "default_pretrain_supernet")]
    pub supernet: ToySupernetSpec,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default = "default_pretrain_trainer")]
    pub trainer: TrainerConfig,
    #[serde(default = "default_pretrain_updates")]
    pub updates: usize,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_pretrain_space() -> SearchSpaceSpec {
    let mask = SkipMask::residual_chain(&candidate_edges(4));
    SearchSpaceSpec::new(4, OperatorVocabulary::compact(), Some(mask)).expect("valid preset space")
}

fn default_pretrain_supernet() -> ToySupernetSpec {
    ToySupernetSpec {
        child_steps: 5,
        ..Default::default()
    }
}

fn default_pretrain_trainer() -> TrainerConfig {
    TrainerConfig {
        batch_size: 16,
        adam: AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn default_pretrain_updates() -> usize {
    100
}

fn default_pretrain_epochs() -> usize {
    5
}

/// Every non-search configuration, tagged by `"mode"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TaskConfig {
    Enumerate(EnumerateConfig),
    AnalyzeRewards(AnalyzeRewardsConfig),
    Gradcheck(GradcheckConfig),
    Fig1(Fig1Config),
    Bias(BiasConfig),
    Eq11(Eq11Config),
    Pretrain(PretrainConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    Search(SearchConfig),
    Task(TaskConfig),
}

impl RunConfig {
    pub fn mode(&self) -> String {
        match self.to_value().get("mode") {
            Some(Value::String(m)) => m.clone(),
            _ => unreachable!("every configuration serializes its mode"),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            RunConfig::Search(c) => c.seed,
            RunConfig::Task(t) => match t {
                TaskConfig::Enumerate(c) => c.seed,
                TaskConfig::AnalyzeRewards(c) => c.seed,
                TaskConfig::Gradcheck(c) => c.seed,
                TaskConfig::Fig1(c) => c.seed,
                TaskConfig::Bias(c) => c.seed,
                TaskConfig::Eq11(c) => c.seed,
                TaskConfig::Pretrain(c) => c.seed,
            },
        }
    }

    /// The configuration with every default filled in.
    pub fn to_value(&self) -> Value {
        match self {
            RunConfig::Search(c) => serde_json::to_value(c),
            RunConfig::Task(t) => serde_json::to_value(t),
        }
        .expect("configuration serializes")
    }

    pub fn from_value(value: Value) -> Result<Self, CliError> {
        let mode = match value.get("mode") {
            Some(Value::String(m)) => m.clone(),
            Some(_) => return Err(CliError::Config("\"mode\" must be a string".into())),
            None => return Err(CliError::Config("missing \"mode\" field".into())),
        };
        let parsed = if SEARCH_MODES.contains(&mode.as_str()) {
            serde_json::from_value(value).map(RunConfig::Search)
        } else {
            serde_json::from_value(value).map(RunConfig::Task)
        };
        parsed.map_err(|e| CliError::Config(format!("mode {mode:?}: {e}")))
    }
}

/// Which subcommand a mode belongs to.
pub fn subcommand_for(mode: &str) -> &'static str {
    match mode {
        m if SEARCH_MODES.contains(&m) => "search",
        "enumerate" => "enumerate",
        "analyze_rewards" => "analyze-rewards",
        "gradcheck" => "gradcheck",
        _ => "demo",
    }
}

/// Reads a configuration, or the configuration stored in a run manifest.
pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value = match value {
        Value::Object(mut map) if map.contains_key("tool_version") && map.contains_key("config") => {
            map.remove("config").expect("checked above")
        }
        other => other,
    };
    RunConfig::from_value(value)
}
