//! Search strategies: fixed-skip refinement, alternating operator / skip
//! search, joint search, and exact alternating coordinate ascent.

use std::io::Write;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspace::{
    parse_arch_vector, validate, ArchitectureVector, ParseError, SearchSpaceSpec, SkipMask,
    SpaceError,
};
use crate::controller::{
    greedy_decode, ControllerConfig, ControllerError, ControllerParams, Forcing, SampleMode,
};
use crate::oracles::{Oracle, OracleConfig, OracleError, PureOracle, ToySupernet};
use crate::pgtrainer::{GradLog, PolicyTrainer, TrainError, TrainerConfig};
use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum NarError {
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl NarError {
    /// The oracle error underneath, if any.
    pub fn oracle_error(&self) -> Option<&OracleError> {
        match self {
            NarError::Oracle(e) | NarError::Train(TrainError::Oracle(e)) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    NarFixedSkip,
    Alternating,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSettings {
    pub hidden: usize,
    pub temperature: Option<f64>,
    pub tanh_constant: Option<f64>,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            hidden: 32,
            temperature: None,
            tanh_constant: None,
        }
    }
}

fn default_updates() -> usize {
    500
}

fn default_block() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub space: SearchSpaceSpec,
    pub mode: SearchMode,
    pub oracle: OracleConfig,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default)]
    pub trainer: TrainerConfig,
    /// Controller updates.
    #[serde(default = "default_updates")]
    pub updates: usize,
    /// Controller updates per alternating phase.
    #[serde(default = "default_block")]
    pub block_length: usize,
    /// Supernet pretraining epochs before the search.
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Initial incumbent operators for alternating search, e.g. `[0,1,2]`.
    #[serde(default)]
    pub initial_arch: Option<String>,
    /// Initial incumbent skip mask (hex) for alternating search.
    #[serde(default)]
    pub initial_skips: Option<String>,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), NarError> {
        let cfg = |m: &str| Err(NarError::Config(m.into()));
        match self.mode {
            SearchMode::NarFixedSkip if self.space.frozen_skips().is_none() => {
                return cfg("nar_fixed_skip mode needs frozen skips in the space")
            }
            SearchMode::Alternating | SearchMode::Joint if self.space.frozen_skips().is_some() => {
                return cfg("alternating and joint modes search the skips; remove frozen_skips")
            }
            _ => {}
        }
        if self.block_length == 0 {
            return cfg("block_length must be at least 1");
        }
        if self.trainer.batch_size == 0 {
            return cfg("trainer.batch_size must be at least 1");
        }
        if self.controller.hidden == 0 {
            return cfg("controller.hidden must be at least 1");
        }
        if matches!(self.trainer.baseline_decay, Some(d) if !(d > 0.0 && d < 1.0)) {
            return cfg("trainer.baseline_decay must lie in (0, 1)");
        }
        let adam = &self.trainer.adam;
        if !(adam.learning_rate > 0.0 && adam.epsilon > 0.0)
            || !(0.0..1.0).contains(&adam.beta1)
            || !(0.0..1.0).contains(&adam.beta2)
        {
            return cfg("trainer.adam needs learning_rate > 0, epsilon > 0, betas in [0, 1)");
        }
        if self.pretrain_epochs > 0 && !matches!(self.oracle, OracleConfig::Supernet(_)) {
            return cfg("pretrain_epochs applies only to the supernet oracle");
        }
        if self.initial_arch.is_some() || self.initial_skips.is_some() {
            self.initial_incumbent()?;
        }
        Ok(())
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            hidden: self.controller.hidden,
            n_ops: self.space.n_ops(),
            temperature: self.controller.temperature,
            tanh_constant: self.controller.tanh_constant,
        }
    }

    fn initial_incumbent(&self) -> Result<Option<ArchitectureVector>, NarError> {
        let Some(text) = &self.initial_arch else {
            if self.initial_skips.is_some() {
                return Err(NarError::Config("initial_skips needs initial_arch".into()));
            }
            return Ok(None);
        };
        let mut arch = parse_arch_vector(text, &self.space)?;
        if let Some(hex) = &self.initial_skips {
            arch.skips = SkipMask::from_hex(hex, self.space.topology().edge_count())?;
        }
        validate(&arch, &self.space)
            .map_err(|v| NarError::Config(format!("initial architecture: {v:?}")))?;
        Ok(Some(arch))
    }
}

/// JSON form of an architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchRecord {
    pub ops: Vec<usize>,
    /// Skip mask, hex.
    pub skips: String,
    pub skip_density: f64,
}

impl From<&ArchitectureVector> for ArchRecord {
    fn from(a: &ArchitectureVector) -> Self {
        Self {
            ops: a.ops.clone(),
            skips: a.skips.to_hex(),
            skip_density: a.skips.density(),
        }
    }
}

impl ArchRecord {
    pub fn to_arch(&self, space: &SearchSpaceSpec) -> Result<ArchitectureVector, SpaceError> {
        Ok(ArchitectureVector::new(
            self.ops.clone(),
            SkipMask::from_hex(&self.skips, space.topology().edge_count())?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    O,
    S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub best_so_far: f64,
    pub op_grad_norm: f64,
    pub skip_grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncumbentRecord {
    pub phase_index: usize,
    pub phase: Phase,
    /// Step after the phase's last update.
    pub end_step: u64,
    pub arch: ArchRecord,
    pub reward: f64,
    /// True when the phase's best replaced the incumbent.
    pub replaced: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub mode: SearchMode,
    pub best_arch: ArchRecord,
    pub best_reward: f64,
    pub derived_arch: ArchRecord,
    /// Mean operator entropy (nats) along the final policy's argmax decode.
    pub final_operator_entropy: f64,
    pub history: Vec<HistoryRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub incumbents: Vec<IncumbentRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pretrain_losses: Vec<f64>,
    /// Path of the final controller checkpoint, when one was written.
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(skip)]
    pub params: Option<ControllerParams>,
    #[serde(skip)]
    pub grad_log: GradLog,
}

struct Runner {
    trainer: PolicyTrainer,
    oracle: Box<dyn Oracle>,
    sample_seed: u64,
    step: u64,
    best: Option<(ArchitectureVector, f64)>,
    history: Vec<HistoryRecord>,
}

impl Runner {
    /// Runs `count` updates and returns the best sample observed among them.
    fn run(
        &mut self,
        spec: &SearchSpaceSpec,
        mode: SampleMode,
        forcing: &Forcing,
        count: usize,
        phase: Option<Phase>,
    ) -> Result<Option<(ArchitectureVector, f64)>, NarError> {
        let mut phase_best: Option<(ArchitectureVector, f64)> = None;
        for _ in 0..count {
            let out = self
                .trainer
                .update(spec, mode, forcing, self.oracle.as_mut(), self.step, self.sample_seed)?;
            for s in &out.batch.samples {
                if phase_best.as_ref().is_none_or(|(_, r)| s.reward > *r) {
                    phase_best = Some((s.arch.clone(), s.reward));
                }
            }
            if let Some((arch, reward)) = &phase_best {
                if self.best.as_ref().is_none_or(|(_, r)| reward > r) {
                    self.best = Some((arch.clone(), *reward));
                }
            }
            self.history.push(HistoryRecord {
                step: self.step,
                mean_reward: out.batch.mean_reward(),
                best_so_far: self.best.as_ref().map_or(f64::NAN, |b| b.1),
                op_grad_norm: out.grad.op_grad_norm,
                skip_grad_norm: out.grad.skip_grad_norm,
                phase,
            });
            self.step += 1;
        }
        Ok(phase_best)
    }
}

fn build_oracle(config: &SearchConfig) -> Result<(Box<dyn Oracle>, Vec<f64>), NarError> {
    match &config.oracle {
        OracleConfig::Supernet(spec) => {
            let mut net = ToySupernet::new(spec.clone(), &config.space)
                .map_err(|e| NarError::Config(e.to_string()))?;
            let losses = net.pretrain(config.pretrain_epochs, derive_seed(config.seed, "pretrain"));
            Ok((Box::new(net), losses))
        }
        other => Ok((other.build(&config.space)?, Vec::new())),
    }
}

fn start(config: &SearchConfig, expected: SearchMode) -> Result<(Runner, Vec<f64>), NarError> {
    config.validate()?;
    if config.mode != expected {
        return Err(NarError::Config(format!(
            "configuration mode is {:?}, expected {:?}",
            config.mode, expected
        )));
    }
    let params = ControllerParams::init(config.controller_config(), derive_seed(config.seed, "controller"))?;
    let (oracle, losses) = build_oracle(config)?;
    Ok((
        Runner {
            trainer: PolicyTrainer::new(params, config.trainer.clone()),
            oracle,
            sample_seed: derive_seed(config.seed, "sample"),
            step: 0,
            best: None,
            history: Vec::new(),
        },
        losses,
    ))
}

fn finish(
    mut runner: Runner,
    config: &SearchConfig,
    mode: SampleMode,
    pretrain_losses: Vec<f64>,
    incumbents: Vec<IncumbentRecord>,
) -> Result<SearchResult, NarError> {
    let params = runner.trainer.params.clone();
    let (derived, trace) = greedy_decode(&params, &config.space, mode, &Forcing::none())?;
    let (best_arch, best_reward) = match runner.best.take() {
        Some(b) => b,
        None => {
            let r = runner.oracle.evaluate_batch(std::slice::from_ref(&derived), 0)?[0];
            (derived.clone(), r)
        }
    };
    Ok(SearchResult {
        mode: config.mode,
        best_arch: (&best_arch).into(),
        best_reward,
        derived_arch: (&derived).into(),
        final_operator_entropy: trace.mean_operator_entropy(),
        history: runner.history,
        incumbents,
        pretrain_losses,
        checkpoint: None,
        params: Some(params),
        grad_log: runner.trainer.grad_log,
    })
}

/// Operator-only search with the skips frozen to the space's mask.
pub fn nar_search(config: &SearchConfig) -> Result<SearchResult, NarError> {
    let (mut runner, losses) = start(config, SearchMode::NarFixedSkip)?;
    runner.run(&config.space, SampleMode::FixedSkip, &Forcing::none(), config.updates, None)?;
    finish(runner, config, SampleMode::FixedSkip, losses, Vec::new())
}

/// One controller over operators and skips.
pub fn joint_search(config: &SearchConfig) -> Result<SearchResult, NarError> {
    let (mut runner, losses) = start(config, SearchMode::Joint)?;
    runner.run(&config.space, SampleMode::Joint, &Forcing::none(), config.updates, None)?;
    finish(runner, config, SampleMode::Joint, losses, Vec::new())
}

/// Alternates operator phases (skips frozen to the incumbent's) and skip
/// phases (operators forced to the incumbent's). After each phase the
/// incumbent becomes the phase's best sample unless that scored lower.
/// Skip phases are omitted when the space has no candidate edges.
pub fn alternating_search(config: &SearchConfig) -> Result<SearchResult, NarError> {
    let (mut runner, losses) = start(config, SearchMode::Alternating)?;
    let space = &config.space;
    let mut incumbent = match config.initial_incumbent()? {
        Some(a) => a,
        None => greedy_decode(&runner.trainer.params, space, SampleMode::Joint, &Forcing::none())?.0,
    };
    let mut incumbent_reward = f64::NEG_INFINITY;
    let has_skips = space.topology().edge_count() > 0;
    let mut records = Vec::new();
    let mut remaining = config.updates;
    let mut phase = Phase::O;
    while remaining > 0 {
        let count = remaining.min(config.block_length);
        let best = match phase {
            Phase::O => {
                let frozen = space.with_frozen_skips(Some(incumbent.skips.clone()))?;
                runner.run(&frozen, SampleMode::FixedSkip, &Forcing::none(), count, Some(Phase::O))?
            }
            Phase::S => runner.run(
                space,
                SampleMode::Joint,
                &Forcing::ops(incumbent.ops.clone()),
                count,
                Some(Phase::S),
            )?,
        };
        remaining -= count;
        let mut replaced = false;
        if let Some((arch, reward)) = best {
            if reward >= incumbent_reward {
                incumbent = arch;
                incumbent_reward = reward;
                replaced = true;
            }
        }
        records.push(IncumbentRecord {
            phase_index: records.len(),
            phase,
            end_step: runner.step,
            arch: (&incumbent).into(),
            reward: incumbent_reward,
            replaced,
        });
        if has_skips {
            phase = if phase == Phase::O { Phase::S } else { Phase::O };
        }
    }
    finish(runner, config, SampleMode::Joint, losses, records)
}

/// Dispatches on `config.mode`.
pub fn run_search(config: &SearchConfig) -> Result<SearchResult, NarError> {
    match config.mode {
        SearchMode::NarFixedSkip => nar_search(config),
        SearchMode::Alternating => alternating_search(config),
        SearchMode::Joint => joint_search(config),
    }
}

/// Largest block scanned exhaustively by the exact ascent.
pub const BLOCK_ENUMERATION_LIMIT: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AscentPhase {
    Init,
    O,
    S,
}

impl AscentPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            AscentPhase::Init => "init",
            AscentPhase::O => "O",
            AscentPhase::S => "S",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentEntry {
    pub phase: AscentPhase,
    pub arch: ArchitectureVector,
    pub reward: f64,
}

/// The initial point followed by one entry per improving phase.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentTrace {
    pub entries: Vec<AscentEntry>,
    /// Phases executed, improving or not.
    pub phases: usize,
}

impl AscentTrace {
    pub fn is_monotone(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].reward >= w[0].reward)
    }

    pub fn last(&self) -> &AscentEntry {
        self.entries.last().expect("trace starts with the initial point")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "phase,arch,reward")?;
        for e in &self.entries {
            writeln!(out, "{},{},{:?}", e.phase.as_str(), e.arch, e.reward)?;
        }
        Ok(())
    }
}

fn block_fits(base: usize, digits: usize) -> bool {
    BigUint::from(base).pow(digits as u32) <= BigUint::from(BLOCK_ENUMERATION_LIMIT)
}

/// Advances a little-endian-in-reverse odometer (last digit fastest).
/// Returns false after the final combination.
fn odometer(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

/// Maximizes over one coordinate block: `digits` of radix `base` taken from
/// and written back to `current`. Only strict improvements are accepted.
fn maximize_block<O: PureOracle + ?Sized>(
    oracle: &O,
    current: &mut ArchitectureVector,
    reward: &mut f64,
    base: usize,
    get: impl Fn(&ArchitectureVector) -> Vec<usize>,
    set: impl Fn(&mut ArchitectureVector, &[usize]),
) -> bool {
    let n = get(current).len();
    let mut improved = false;
    if block_fits(base, n) {
        let mut digits = vec![0usize; n];
        let mut probe = current.clone();
        loop {
            set(&mut probe, &digits);
            let r = oracle.evaluate(&probe, 0);
            if r > *reward {
                *reward = r;
                *current = probe.clone();
                improved = true;
            }
            if !odometer(&mut digits, base) {
                break;
            }
        }
    } else {
        // Coordinate sweeps until no single coordinate improves.
        loop {
            let mut changed = false;
            for i in 0..n {
                let mut digits = get(current);
                for v in 0..base {
                    digits[i] = v;
                    let mut probe = current.clone();
                    set(&mut probe, &digits);
                    let r = oracle.evaluate(&probe, 0);
                    if r > *reward {
                        *reward = r;
                        *current = probe;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
            improved = true;
        }
    }
    improved
}

/// Alternately maximizes the exact reward over all operators (skips fixed)
/// and over all skips (operators fixed) until a full pass changes nothing.
/// Each block is scanned exhaustively when it has at most 2^20 settings, and
/// by repeated single-coordinate sweeps otherwise. Ties keep the incumbent.
pub fn exact_alternating_ascent<O: PureOracle + ?Sized>(
    oracle: &O,
    space: &SearchSpaceSpec,
    init: &ArchitectureVector,
) -> Result<AscentTrace, NarError> {
    validate(init, space).map_err(|v| NarError::Config(format!("initial architecture: {v:?}")))?;
    let mut current = init.clone();
    let mut reward = oracle.evaluate(&current, 0);
    let mut entries = vec![AscentEntry {
        phase: AscentPhase::Init,
        arch: current.clone(),
        reward,
    }];
    let skips_free = space.frozen_skips().is_none() && space.topology().edge_count() > 0;
    let mut phases = 0;
    loop {
        phases += 1;
        let o = maximize_block(
            oracle,
            &mut current,
            &mut reward,
            space.n_ops(),
            |a| a.ops.clone(),
            |a, d| a.ops.copy_from_slice(d),
        );
        if o {
            entries.push(AscentEntry {
                phase: AscentPhase::O,
                arch: current.clone(),
                reward,
            });
        }
        let mut s = false;
        if skips_free {
            phases += 1;
            s = maximize_block(
                oracle,
                &mut current,
                &mut reward,
                2,
                |a| a.skips.bits().iter().map(|&b| usize::from(b)).collect(),
                |a, d| a.skips = SkipMask::from_bits(d.iter().map(|&v| v == 1).collect()),
            );
            if s {
                entries.push(AscentEntry {
                    phase: AscentPhase::S,
                    arch: current.clone(),
                    reward,
                });
            }
        }
        if !o && !s {
            break;
        }
    }
    Ok(AscentTrace { entries, phases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{candidate_edges, OperatorVocabulary};
    use crate::oracles::{enumerate_optimum, ProxyBiasSpec, TabularOracle, TabularOracleSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tabular_config(space: SearchSpaceSpec, mode: SearchMode, updates: usize) -> SearchConfig {
        SearchConfig {
            space,
            mode,
            oracle: OracleConfig::Tabular(TabularOracleSpec { seed: 3, ..Default::default() }),
            controller: ControllerSettings { hidden: 8, ..Default::default() },
            trainer: TrainerConfig { batch_size: 8, ..Default::default() },
            updates,
            block_length: 5,
            pretrain_epochs: 0,
            seed: 1,
            initial_arch: None,
            initial_skips: None,
        }
    }

    fn frozen_space(n: usize, k: usize) -> SearchSpaceSpec {
        let mask = SkipMask::residual_chain(&candidate_edges(n));
        SearchSpaceSpec::new(n, OperatorVocabulary::anonymous(k).unwrap(), Some(mask)).unwrap()
    }

    fn open_space(n: usize, k: usize) -> SearchSpaceSpec {
        SearchSpaceSpec::new(n, OperatorVocabulary::anonymous(k).unwrap(), None).unwrap()
    }

    #[test]
    fn zero_updates_hold_the_argmax() {
        let cfg = tabular_config(frozen_space(4, 3), SearchMode::NarFixedSkip, 0);
        let r = nar_search(&cfg).unwrap();
        assert!(r.history.is_empty());
        assert_eq!(r.best_arch, r.derived_arch);
    }

    #[test]
    fn nar_respects_frozen_mask_and_zero_skip_gradient() {
        let sp = frozen_space(5, 3);
        let r = nar_search(&tabular_config(sp.clone(), SearchMode::NarFixedSkip, 20)).unwrap();
        let hex = sp.frozen_skips().unwrap().to_hex();
        assert_eq!(r.best_arch.skips, hex);
        assert_eq!(r.derived_arch.skips, hex);
        assert!(r.history.iter().all(|h| h.skip_grad_norm == 0.0));
        assert!(r.history.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far));
    }

    #[test]
    fn searches_are_reproducible() {
        for (sp, mode) in [
            (frozen_space(4, 3), SearchMode::NarFixedSkip),
            (open_space(4, 3), SearchMode::Joint),
            (open_space(4, 3), SearchMode::Alternating),
        ] {
            let cfg = tabular_config(sp, mode, 12);
            let a = serde_json::to_string(&run_search(&cfg).unwrap()).unwrap();
            let b = serde_json::to_string(&run_search(&cfg).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_block_alternating_equals_nar() {
        let open = open_space(5, 3);
        let frozen = frozen_space(5, 3);
        let mut nar = tabular_config(frozen.clone(), SearchMode::NarFixedSkip, 15);
        nar.block_length = 15;
        let mut alt = tabular_config(open, SearchMode::Alternating, 15);
        alt.block_length = 15;
        alt.initial_arch = Some("[0,0,0,0,0]".into());
        alt.initial_skips = Some(frozen.frozen_skips().unwrap().to_hex());
        let a = nar_search(&nar).unwrap();
        let b = alternating_search(&alt).unwrap();
        assert_eq!(a.best_arch, b.best_arch);
        assert_eq!(a.best_reward, b.best_reward);
        let strip = |h: &[HistoryRecord]| {
            h.iter().map(|r| (r.step, r.mean_reward, r.best_so_far, r.op_grad_norm)).collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.history), strip(&b.history));
    }

    #[test]
    fn incumbents_never_get_worse() {
        let mut cfg = tabular_config(open_space(5, 3), SearchMode::Alternating, 40);
        cfg.oracle = OracleConfig::Proxy {
            base: TabularOracleSpec { seed: 3, ..Default::default() },
            bias: ProxyBiasSpec { sigma0: 0.2, ..Default::default() },
        };
        let r = alternating_search(&cfg).unwrap();
        assert_eq!(r.incumbents.len(), 8);
        assert!(r.incumbents.windows(2).all(|w| w[1].reward >= w[0].reward));
        let phases: Vec<Phase> = r.incumbents.iter().map(|i| i.phase).collect();
        assert_eq!(&phases[..3], &[Phase::O, Phase::S, Phase::O]);
        // Operators are frozen during S phases.
        for w in r.incumbents.windows(2) {
            if w[1].phase == Phase::S {
                assert_eq!(w[0].arch.ops, w[1].arch.ops);
            } else {
                assert_eq!(w[0].arch.skips, w[1].arch.skips);
            }
        }
    }

    #[test]
    fn no_edges_alternating_matches_joint() {
        let sp = open_space(2, 2);
        assert_eq!(sp.topology().edge_count(), 0);
        let joint = joint_search(&tabular_config(sp.clone(), SearchMode::Joint, 20)).unwrap();
        let alt = alternating_search(&tabular_config(sp, SearchMode::Alternating, 20)).unwrap();
        assert_eq!(joint.best_arch, alt.best_arch);
        assert_eq!(joint.derived_arch, alt.derived_arch);
        let strip = |h: &[HistoryRecord]| h.iter().map(|r| (r.mean_reward, r.op_grad_norm)).collect::<Vec<_>>();
        assert_eq!(strip(&joint.history), strip(&alt.history));
    }

    #[test]
    fn config_violations() {
        let cfg = tabular_config(open_space(4, 3), SearchMode::NarFixedSkip, 5);
        assert!(matches!(nar_search(&cfg), Err(NarError::Config(_))));
        let mut cfg = tabular_config(open_space(4, 3), SearchMode::Alternating, 5);
        cfg.block_length = 0;
        assert!(matches!(alternating_search(&cfg), Err(NarError::Config(_))));
        let mut cfg = tabular_config(open_space(4, 3), SearchMode::Joint, 5);
        cfg.pretrain_epochs = 2;
        assert!(matches!(joint_search(&cfg), Err(NarError::Config(_))));
        let cfg = tabular_config(open_space(4, 3), SearchMode::Joint, 5);
        assert!(matches!(nar_search(&cfg), Err(NarError::Config(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = tabular_config(frozen_space(4, 3), SearchMode::NarFixedSkip, 5);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SearchConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let minimal = r#"{"space":{"n_nodes":3,"operators":"compact","frozen_skips":null},
            "mode":"joint","oracle":{"kind":"tabular","seed":2}}"#;
        let p: SearchConfig = serde_json::from_str(minimal).unwrap();
        assert_eq!(p.updates, 500);
        assert_eq!(p.trainer.batch_size, 32);
        assert_eq!(p.space.n_ops(), 4);
        let typo = minimal.replace("\"seed\":2}", "\"seed\":2},\"updtes\":3");
        assert!(serde_json::from_str::<SearchConfig>(&typo).is_err());
    }

    #[test]
    fn ascent_from_the_optimum_is_a_fixed_point() {
        let sp = open_space(4, 3);
        let oracle = TabularOracle::generate(&TabularOracleSpec { seed: 7, ..Default::default() }, &sp).unwrap();
        let best = enumerate_optimum(&oracle, &sp, false).unwrap().best;
        let trace = exact_alternating_ascent(&oracle, &sp, &best).unwrap();
        assert_eq!(trace.entries.len(), 1);
        assert_eq!(trace.last().arch, best);
    }

    #[test]
    fn ascent_is_monotone_on_random_instances() {
        let sp = open_space(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..100 {
            let oracle = TabularOracle::generate(&TabularOracleSpec { seed, ..Default::default() }, &sp).unwrap();
            let init = ArchitectureVector::new(
                (0..5).map(|_| rng.random_range(0..3)).collect(),
                SkipMask::from_bits((0..sp.topology().edge_count()).map(|_| rng.random()).collect()),
            );
            let trace = exact_alternating_ascent(&oracle, &sp, &init).unwrap();
            assert!(trace.is_monotone());
            assert!(trace.phases <= 50);
            // Terminal point: no single block change improves.
            let end = trace.last();
            for j in 0..5 {
                for k in 0..3 {
                    let mut a = end.arch.clone();
                    a.ops[j] = k;
                    assert!(oracle.evaluate(&a, 0) <= end.reward);
                }
            }
        }
    }

    #[test]
    fn separable_landscape_converges_in_one_operator_phase() {
        let sp = open_space(4, 3);
        let mut spec = TabularOracleSpec { seed: 13, interactions: 0, ..Default::default() };
        spec.edge_scale = 0.0;
        spec.edge_mean = 0.0;
        let oracle = TabularOracle::generate(&spec, &sp).unwrap();
        let opt = enumerate_optimum(&oracle, &sp, false).unwrap();
        let init = ArchitectureVector::new(vec![0; 4], SkipMask::empty(sp.topology().edge_count()));
        let trace = exact_alternating_ascent(&oracle, &sp, &init).unwrap();
        assert!(trace.entries.len() <= 2);
        assert_eq!(trace.last().reward, opt.best_reward);
        assert!(trace.entries.iter().skip(1).all(|e| e.phase == AscentPhase::O));
    }

    #[test]
    fn greedy_fallback_reaches_a_coordinate_optimum() {
        // 11 nodes x 4 ops exceeds the block limit; 2^45 skips too.
        let sp = open_space(11, 4);
        assert!(!block_fits(4, 11));
        let oracle = TabularOracle::generate(&TabularOracleSpec { seed: 2, ..Default::default() }, &sp).unwrap();
        let init = ArchitectureVector::new(vec![0; 11], SkipMask::empty(sp.topology().edge_count()));
        let trace = exact_alternating_ascent(&oracle, &sp, &init).unwrap();
        assert!(trace.is_monotone());
        let end = trace.last();
        for e in 0..sp.topology().edge_count() {
            let mut a = end.arch.clone();
            a.skips.set(e, !a.skips.get(e));
            assert!(oracle.evaluate(&a, 0) <= end.reward);
        }
    }

    #[test]
    fn ascent_csv() {
        let sp = open_space(3, 2);
        let oracle = TabularOracle::generate(&TabularOracleSpec { seed: 1, ..Default::default() }, &sp).unwrap();
        let init = ArchitectureVector::new(vec![0; 3], SkipMask::empty(1));
        let trace = exact_alternating_ascent(&oracle, &sp, &init).unwrap();
        let mut out = Vec::new();
        trace.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("phase,arch,reward\ninit,[0,0,0]/00,"));
    }
}
