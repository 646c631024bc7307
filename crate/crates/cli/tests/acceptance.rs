//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines are always
//! printed. Exits nonzero when any criterion fails.
//!
//! Criteria 6-9 run the shipped demo configurations in `configs/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nar_cli::commands::{self, Outputs};
use nar_cli::config::{self, RunConfig, TaskConfig};
use nar_cli::demos;
use nar_core::archspace::{
    candidate_edges, ArchitectureVector, OperatorVocabulary, SearchSpaceSpec, SkipMask,
};
use nar_core::controller::{ControllerConfig, ControllerParams, Forcing, SampleMode};
use nar_core::nar::{nar_search, SearchConfig};
use nar_core::oracles::{enumerate_optimum, PureOracle, TabularOracle};
use nar_core::pgtrainer::{ce_surrogate_gradient, collect_batch, reinforce_gradient, SampleBatch};
use nar_core::reward::assign_rewards;
use nar_core::seeding::{derive_seed, stream_rng};
use rand::Rng;
use rayon::prelude::*;
use tempfile::TempDir;

struct Verdict {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn check(id: u32, title: &'static str, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (pass, detail) = f();
    let v = Verdict {
        id,
        title,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    };
    println!(
        "{} #{:<2} {:<28} {} [{:.1}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.id,
        v.title,
        v.detail,
        v.seconds
    );
    v
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn shipped(name: &str) -> RunConfig {
    config::load(&configs_dir().join(name)).expect("shipped config loads")
}

fn scratch() -> (TempDir, Outputs) {
    let dir = TempDir::new().unwrap();
    let out = Outputs::create(dir.path()).unwrap();
    (dir, out)
}

/// Uniform pseudo-random reward keyed by the architecture's text form.
struct HashedReward(u64);

impl PureOracle for HashedReward {
    fn evaluate(&self, arch: &ArchitectureVector, _step: u64) -> f64 {
        stream_rng(derive_seed(self.0, &arch.to_string()), 0, 0).random()
    }
}

/// A random space, controller and batch for case `i`.
fn random_case(i: u64, mode: SampleMode) -> (ControllerParams<f64>, SearchSpaceSpec, SampleBatch<f64>) {
    let mut rng = stream_rng(0xacce, i, mode as u64);
    let n = rng.random_range(2..=6);
    let k = rng.random_range(2..=5);
    let frozen = match mode {
        SampleMode::Joint => None,
        SampleMode::FixedSkip => {
            let edges = candidate_edges(n).edge_count();
            Some(SkipMask::from_bits((0..edges).map(|_| rng.random()).collect()))
        }
    };
    let space = SearchSpaceSpec::new(n, OperatorVocabulary::anonymous(k).unwrap(), frozen).unwrap();
    let hidden = rng.random_range(3..=12);
    let mut params = ControllerParams::<f64>::init(ControllerConfig::new(hidden, k), rng.random()).unwrap();
    let scale = rng.random_range(1.0..20.0);
    params.flat_mut().iter_mut().for_each(|v| *v *= scale);
    let batch_size = rng.random_range(1..=24);
    let mut oracle = HashedReward(i);
    let batch = collect_batch(&params, &space, mode, &Forcing::none(), &mut oracle, batch_size, i, rng.random())
        .expect("valid batch");
    (params, space, batch)
}

// ═══ 1: REINFORCE equals the cross-entropy surrogate ═════════════════════════

fn equivalence() -> (bool, String) {
    let cases: Vec<(SampleMode, u64)> = [SampleMode::Joint, SampleMode::FixedSkip]
        .into_iter()
        .flat_map(|m| (0..100).map(move |i| (m, i)))
        .collect();
    let worst: Vec<(SampleMode, f64, usize)> = cases
        .par_iter()
        .map(|&(mode, i)| {
            let (params, space, batch) = random_case(i, mode);
            let a = reinforce_gradient(&params, &space, &batch, None).unwrap();
            let b = ce_surrogate_gradient(&params, &space, &batch).unwrap();
            let scale = a.iter().chain(&b).fold(0.0f64, |m, v| m.max(v.abs()));
            let mut worst = 0.0f64;
            for (x, y) in a.iter().zip(&b) {
                let denom = x.abs().max(y.abs()).max(1e-6 * scale);
                if denom > 0.0 {
                    worst = worst.max((x - y).abs() / denom);
                }
            }
            (mode, worst, a.len())
        })
        .collect();
    let max = |m: SampleMode| {
        worst
            .iter()
            .filter(|w| w.0 == m)
            .map(|w| w.1)
            .fold(0.0, f64::max)
    };
    let (j, f) = (max(SampleMode::Joint), max(SampleMode::FixedSkip));
    let coords: usize = worst.iter().map(|w| w.2).sum();
    (
        j < 1e-10 && f < 1e-10,
        format!("100+100 pairs, {coords} coordinates; max rel err joint {j:.2e}, fixed_skip {f:.2e}"),
    )
}

// ═══ 2: finite-difference gradient check ═════════════════════════════════════

fn gradient_check() -> (bool, String) {
    let RunConfig::Task(TaskConfig::Gradcheck(cfg)) = shipped("gradcheck.json") else {
        panic!("gradcheck.json has the wrong mode");
    };
    let (_dir, mut out) = scratch();
    let report = commands::gradcheck(&cfg, &mut out).expect("gradcheck runs");
    let modes: Vec<String> = report
        .modes
        .iter()
        .map(|m| format!("{:?} {:.2e} (worst point {})", m.mode, m.max_rel_error, m.worst_point))
        .collect();
    (
        report.pass && report.points >= 20 && report.h == 1e-6 && report.tolerance == 1e-5,
        format!("{} points incl. zero, h=1e-6, P={}: {}", report.points, report.parameter_count, modes.join(", ")),
    )
}

// ═══ 3: cardinalities ════════════════════════════════════════════════════════

fn cardinality() -> (bool, String) {
    let space = SearchSpaceSpec::new(12, OperatorVocabulary::anonymous(6).unwrap(), None).unwrap();
    let (ops, skips) = space.cardinality();
    let (ops, skips) = (ops.to_string(), skips.to_string());
    (
        ops == "2176782336" && skips == "36028797018963968",
        format!("operators {ops}, skips {skips} over {} edges", space.topology().edge_count()),
    )
}

// ═══ 4: reward assignment ════════════════════════════════════════════════════

fn reward_assignment() -> (bool, String) {
    let results: Vec<(bool, f64)> = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            let mode = if i % 2 == 0 { SampleMode::Joint } else { SampleMode::FixedSkip };
            let (_, space, batch) = random_case(10_000 + i, mode);
            let table = assign_rewards(&batch, &space);
            let n = batch.len() as f64;
            let mean = batch.mean_reward();

            // Naive re-enumeration: one pass over the batch per table cell.
            let mut exact = true;
            for j in 0..space.n_nodes() {
                for k in 0..space.n_ops() {
                    let mut total = 0.0;
                    for s in &batch.samples {
                        if s.arch.ops[j] == k {
                            total += s.reward;
                        }
                    }
                    exact &= table.op_rewards[j][k] == total / n;
                }
            }
            let mut position = 0;
            for j in 3..=space.n_nodes() {
                for t in 1..=j - 2 {
                    let (mut on, mut off) = (0.0, 0.0);
                    for s in &batch.samples {
                        if s.arch.skips.get(position) {
                            on += s.reward;
                        } else {
                            off += s.reward;
                        }
                    }
                    let cell = &table.skip_rewards[position];
                    exact &= cell.t == t && cell.j == j && cell.r1 == on / n && cell.r0 == off / n;
                    position += 1;
                }
            }
            exact &= table.skip_rewards.len() == position;

            let mut drift = 0.0f64;
            for row in &table.op_rewards {
                drift = drift.max((row.iter().sum::<f64>() - mean).abs());
            }
            for cell in &table.skip_rewards {
                drift = drift.max((cell.r1 + cell.r0 - mean).abs());
            }
            (exact, drift)
        })
        .collect();
    let mismatched = results.iter().filter(|r| !r.0).count();
    let drift = results.iter().map(|r| r.1).fold(0.0, f64::max);
    (
        mismatched == 0 && drift <= 1e-12,
        format!("1000 batches, {mismatched} mismatches vs naive; max conservation error {drift:.1e}"),
    )
}

// ═══ 5: exact alternating ascent ═════════════════════════════════════════════

fn ascent_monotone() -> (bool, String) {
    let RunConfig::Task(TaskConfig::Eq11(cfg)) = shipped("eq11.json") else {
        panic!("eq11.json has the wrong mode");
    };
    let (_dir, mut out) = scratch();
    let r = demos::eq11(&cfg, &mut out).expect("eq11 runs");
    (
        cfg.n_nodes == 5 && cfg.n_ops == 3 && r.instances == 100 && r.monotone == 100 && r.terminated == 100,
        format!(
            "{}; terminated {}/{}; max phases {}; reached global optimum {}/{}",
            r.verdict, r.terminated, r.instances, r.max_phases, r.reached_global_optimum, r.instances
        ),
    )
}

// ═══ 6: search effectiveness ═════════════════════════════════════════════════

fn search_effectiveness() -> (bool, String) {
    let RunConfig::Search(base) = shipped("search-nar.json") else {
        panic!("search-nar.json is not a search config");
    };
    let nar_core::oracles::OracleConfig::Tabular(spec) = &base.oracle else {
        panic!("search-nar.json must use a tabular oracle");
    };
    let oracle = TabularOracle::generate(spec, &base.space).unwrap();
    let e = enumerate_optimum(&oracle, &base.space, true).unwrap();
    let threshold = e.top_fraction_threshold(0.01).unwrap();
    let hits: Vec<(u64, Option<usize>, f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = SearchConfig { seed, ..base.clone() };
            let r = nar_search(&cfg).unwrap();
            let first = r.history.iter().position(|h| h.best_so_far >= threshold);
            let (m0, m1) = (r.history[0].mean_reward, r.history.last().unwrap().mean_reward);
            (seed, first, m0, m1)
        })
        .collect();
    let reached = hits.iter().filter(|h| h.1.is_some()).count();
    let latest = hits.iter().filter_map(|h| h.1).max().map_or("-".into(), |u| (u + 1).to_string());
    let m0 = hits.iter().map(|h| h.2).sum::<f64>() / 10.0;
    let m1 = hits.iter().map(|h| h.3).sum::<f64>() / 10.0;
    (
        e.count == 4096 && base.updates == 500 && base.trainer.batch_size == 32 && reached >= 8,
        format!(
            "{reached}/10 seeds reach top-1% (reward >= {threshold:.4}, optimum {:.4}); latest first hit at update {latest}; mean batch reward {m0:.3} -> {m1:.3}",
            e.best_reward
        ),
    )
}

// ═══ 7: gradient magnitudes of the two heads ═════════════════════════════════

fn head_variance() -> (bool, String) {
    let RunConfig::Task(TaskConfig::Fig1(cfg)) = shipped("fig1.json") else {
        panic!("fig1.json has the wrong mode");
    };
    let (dir, mut out) = scratch();
    let r = demos::fig1(&cfg, &mut out).expect("fig1 runs");
    let csv = fs::read_to_string(dir.path().join("gradlog.csv")).unwrap();
    let header_ok = csv.lines().next() == Some("seed,step,op_grad_norm,skip_grad_norm");
    let ratio: Vec<f64> = r.runs.iter().map(|x| x.skip_variance / x.op_variance).collect();
    let lo = ratio.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratio.iter().copied().fold(0.0, f64::max);
    (
        header_ok && r.skip_variance_higher >= 8,
        format!(
            "{} ({} csv rows); skip/op variance ratio {lo:.2}..{hi:.2}",
            r.verdict,
            csv.lines().count() - 1
        ),
    )
}

// ═══ 8: search bias under a biased proxy ═════════════════════════════════════

fn search_bias() -> (bool, String) {
    let RunConfig::Task(TaskConfig::Bias(cfg)) = shipped("bias.json") else {
        panic!("bias.json has the wrong mode");
    };
    let (_dir, mut out) = scratch();
    let r = demos::bias(&cfg, &mut out).expect("bias runs");
    (
        cfg.bias.beta0 == 0.3 && r.joint_exceeds_optimum >= 7 && r.nar_matches_mask == r.runs.len(),
        format!(
            "{}; optimum density {:.2}, joint mean {:.2}, nar mean {:.2} (mask {:.2}); bias decay {}",
            r.verdict, r.optimum_density, r.joint_mean_density, r.nar_mean_density, r.mask_density, cfg.bias.decay
        ),
    )
}

// ═══ 9: supernet pretraining and policy entropy ══════════════════════════════

fn pretrain_entropy() -> (bool, String) {
    let RunConfig::Task(TaskConfig::Pretrain(cfg)) = shipped("pretrain.json") else {
        panic!("pretrain.json has the wrong mode");
    };
    let (_dir, mut out) = scratch();
    let r = demos::pretrain(&cfg, &mut out).expect("pretrain runs");
    let pairs: Vec<String> = r
        .runs
        .iter()
        .map(|x| format!("{:.3}/{:.3}", x.entropy_without, x.entropy_with))
        .collect();
    (
        r.majority,
        format!("{}; entropy E0/E{} per seed: {}", r.verdict, r.pretrain_epochs, pairs.join(" ")),
    )
}

// ═══ 10: manifest reruns are bitwise reproducible ════════════════════════════

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_nar"))
        .args(args)
        .env_remove("NAR_OUT_DIR")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> (bool, String) {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let mut joint = serde_json::from_str::<serde_json::Value>(
        &fs::read_to_string(configs_dir().join("search-joint.json")).unwrap(),
    )
    .unwrap();
    joint["updates"] = 60.into();
    let mut alternating = serde_json::from_str::<serde_json::Value>(
        &fs::read_to_string(configs_dir().join("search-alternating.json")).unwrap(),
    )
    .unwrap();
    alternating["updates"] = 60.into();
    alternating["block_length"] = 15.into();
    let cases = [
        ("search", "joint", joint.to_string(), vec!["result.json", "gradlog.csv", "controller.ckpt"]),
        ("search", "alternating", alternating.to_string(), vec!["result.json", "gradlog.csv", "trace.csv"]),
        (
            "analyze-rewards",
            "analyze",
            fs::read_to_string(configs_dir().join("analyze-rewards.json")).unwrap(),
            vec!["result.json", "noise.csv"],
        ),
        ("demo", "eq11", fs::read_to_string(configs_dir().join("eq11.json")).unwrap(), vec!["result.json", "trace.csv"]),
    ];
    let mut identical = 0;
    let mut total = 0;
    let mut failures = Vec::new();
    for (sub, name, text, files) in &cases {
        let cfg = root.join(format!("{name}.json"));
        fs::write(&cfg, text).unwrap();
        let a = root.join(format!("{name}-w1"));
        let b = root.join(format!("{name}-w4"));
        let ok_a = run_cli(&[sub, "--config", cfg.to_str().unwrap(), "--workers", "1", "--out", a.to_str().unwrap()]);
        let manifest = a.join("manifest.json");
        let ok_b = ok_a
            && run_cli(&[sub, "--config", manifest.to_str().unwrap(), "--workers", "4", "--out", b.to_str().unwrap()]);
        for f in files {
            total += 1;
            if ok_b && fs::read(a.join(f)).ok() == fs::read(b.join(f)).ok() {
                identical += 1;
            } else {
                failures.push(format!("{name}/{f}"));
            }
        }
    }
    (
        identical == total,
        if failures.is_empty() {
            format!("{identical}/{total} outputs bitwise identical (workers 1 vs manifest rerun with 4)")
        } else {
            format!("differing: {}", failures.join(", "))
        },
    )
}

fn main() {
    // Accept and ignore libtest arguments such as `--nocapture` or filters.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let verdicts = [
        check(1, "reinforce == ce surrogate", equivalence),
        check(2, "finite-difference check", gradient_check),
        check(3, "cardinality n=12 K=6", cardinality),
        check(4, "reward assignment", reward_assignment),
        check(5, "alternating ascent", ascent_monotone),
        check(6, "search effectiveness", search_effectiveness),
        check(7, "head gradient variance", head_variance),
        check(8, "skip-density bias", search_bias),
        check(9, "pretraining entropy", pretrain_entropy),
        check(10, "manifest determinism", determinism),
    ];
    let passed = verdicts.iter().filter(|v| v.pass).count();
    let seconds: f64 = verdicts.iter().map(|v| v.seconds).sum();
    println!("acceptance: {passed}/{} criteria pass [{seconds:.0}s]", verdicts.len());
    if passed != verdicts.len() {
        std::process::exit(1);
    }
}
