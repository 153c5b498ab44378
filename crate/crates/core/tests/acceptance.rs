//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use du_orch::controller::{Controller, ControllerConfig, ControllerSetup, PolicyKind};
use du_orch::model::{fit_power_model, ConstraintConfig, CoreId, FrequencyLevel, LevelSet, ThreadId};
use du_orch::oracle::{certify_batch, summarize, InstanceSpec};
use du_orch::report::linear_r2;
use du_orch::sim::{run_scenario, RunReport, ScenarioConfig};
use du_orch::telemetry::{CoreStats, Counters, ThreadStats};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

fn paper_cal() -> ScenarioConfig {
    ScenarioConfig::parse(&std::fs::read_to_string(asset("paper_cal.cfg")).unwrap()).unwrap()
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Four reports per seed, in `PolicyKind::ALL` order.
struct PolicyRuns {
    by_seed: Vec<[RunReport; 4]>,
    elapsed: Duration,
}

fn policy_runs() -> PolicyRuns {
    let base = paper_cal();
    let start = Instant::now();
    let by_seed = SEEDS
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&seed| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            PolicyKind::ALL.map(|k| run_scenario(&cfg, k).unwrap())
        })
        .collect();
    PolicyRuns {
        by_seed,
        elapsed: start.elapsed(),
    }
}

fn c1_ordering(runs: &PolicyRuns) -> Verdict {
    let mut ordered = true;
    let mut savings = 0.0;
    for [base, stat, ond, comb] in &runs.by_seed {
        ordered &= comb.avg_power < ond.avg_power && ond.avg_power < stat.avg_power && stat.avg_power < base.avg_power;
        savings += 1.0 - comb.avg_power / base.avg_power;
    }
    let mean = savings / runs.by_seed.len() as f64;
    let fast = runs.elapsed <= Duration::from_secs(60);
    let r = &runs.by_seed[0];
    verdict(
        ordered && (0.39..=0.59).contains(&mean) && fast,
        format!(
            "seed 1: {:.2} / {:.2} / {:.2} / {:.2} W, ordered on all seeds: {ordered}, mean savings {mean:.3}, {:.2?}",
            r[0].avg_power, r[1].avg_power, r[2].avg_power, r[3].avg_power, runs.elapsed
        ),
    )
}

fn c2_throughput(runs: &PolicyRuns) -> Verdict {
    let worst = runs
        .by_seed
        .iter()
        .map(|[b, _, _, c]| (c.throughput - b.throughput).abs() / b.throughput)
        .fold(0.0, f64::max);
    verdict(worst <= 0.05, format!("worst relative gap {worst:.4}"))
}

fn c3_deadlines(runs: &PolicyRuns) -> Verdict {
    let misses: u64 = runs.by_seed.iter().flatten().map(|r| r.deadline_misses).sum();
    verdict(misses == 0, format!("{misses} misses over 40 runs"))
}

fn c4_counters(runs: &PolicyRuns) -> Verdict {
    let mut ok = true;
    let (mut mpki, mut ctx) = (0.0f64, 0.0f64);
    for [b, _, _, c] in &runs.by_seed {
        let m = c.mean_mpki / b.mean_mpki;
        let x = c.ctx_switches as f64 / b.ctx_switches as f64;
        ok &= m <= 0.6 && x <= 0.7;
        mpki = mpki.max(m);
        ctx = ctx.max(x);
    }
    verdict(ok, format!("worst MPKI ratio {mpki:.3}, worst ctx ratio {ctx:.3}"))
}

fn c5_oracle() -> Verdict {
    let start = Instant::now();
    let rows = certify_batch(200, 42, &InstanceSpec::default()).unwrap();
    let s = summarize(&rows);
    let elapsed = start.elapsed();
    verdict(
        s.agreement == 1.0 && s.within_bound >= 0.90 && elapsed <= Duration::from_secs(120),
        format!(
            "{} instances, {} feasible, agreement {:.3}, within 1.15x {:.3}, {elapsed:.2?}",
            s.instances, s.feasible, s.agreement, s.within_bound
        ),
    )
}

fn quadratic_samples(ps: f64, k: f64, n: usize) -> Vec<(FrequencyLevel, f64)> {
    (0..n)
        .map(|i| {
            let f = 0.8 + 2.4 * i as f64 / (n - 1) as f64;
            (FrequencyLevel(f), ps + k * f * f)
        })
        .collect()
}

fn rel_err(fit: &du_orch::PowerModelParams, ps: f64, k: f64) -> f64 {
    ((fit.p_static - ps).abs() / ps).max((fit.k_dyn - k).abs() / k)
}

fn c6_fit() -> Verdict {
    let exact_err = [(1.8, 1.9), (12.0, 2.5)]
        .iter()
        .map(|&(ps, k)| rel_err(&fit_power_model(&quadratic_samples(ps, k, 20), 0.0).unwrap().params, ps, k))
        .fold(0.0, f64::max);

    // desktop-class static share, 50 samples per draw
    let (ps, k) = (12.0, 2.5);
    let clean = quadratic_samples(ps, k, 50);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut noisy_err: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<(FrequencyLevel, f64)> =
            clean.iter().map(|&(f, p)| (f, p * (1.0 + noise.sample(&mut rng)))).collect();
        noisy_err = noisy_err.max(rel_err(&fit_power_model(&samples, 0.0).unwrap().params, ps, k));
    }
    verdict(
        exact_err <= 1e-9 && noisy_err <= 0.05,
        format!("noiseless error {exact_err:.1e}, worst 2% noise error over 20 seeds {noisy_err:.4}"),
    )
}

fn sweep() -> Vec<(u32, RunReport)> {
    let base = paper_cal();
    (1..=5u32)
        .into_par_iter()
        .map(|g| {
            let mut cfg = base.clone();
            cfg.gnb_background = g;
            (g, run_scenario(&cfg, PolicyKind::Baseline).unwrap())
        })
        .collect()
}

fn c7_noisy_neighbor(sweep: &[(u32, RunReport)], tti: f64) -> Verdict {
    let xs: Vec<f64> = sweep.iter().map(|(g, _)| *g as f64).collect();
    let util: Vec<f64> = sweep
        .iter()
        .map(|(_, r)| r.core_summary.iter().map(|c| c.utilization).sum::<f64>() / r.core_summary.len() as f64)
        .collect();
    let ctx: Vec<f64> = sweep.iter().map(|(_, r)| r.ctx_switches as f64 / (r.duration_slots as f64 * tti)).collect();
    let r2 = linear_r2(&xs, &util);
    let plateau = ctx[4] / ctx[2];
    verdict(r2 >= 0.95 && plateau <= 1.1, format!("R^2 {r2:.5}, ctx_rate(5)/ctx_rate(3) {plateau:.3}"))
}

/// Shortest run of slots any core held a frequency between two changes.
fn shortest_dwell(r: &RunReport) -> Option<u64> {
    let mut last: Vec<(u64, FrequencyLevel)> = r.plan_trace[0].plan.freq.iter().map(|&f| (0, f)).collect();
    let mut shortest = None;
    for rec in &r.plan_trace[1..] {
        for (i, &f) in rec.plan.freq.iter().enumerate() {
            if f != last[i].1 {
                let held = rec.slot - last[i].0;
                shortest = Some(shortest.map_or(held, |s: u64| s.min(held)));
                last[i] = (rec.slot, f);
            }
        }
    }
    shortest
}

fn c8_dwell(runs: &PolicyRuns, sweep: &[(u32, RunReport)], min_dwell: u64) -> Verdict {
    let all: Vec<&RunReport> = runs.by_seed.iter().flatten().chain(sweep.iter().map(|(_, r)| r)).collect();
    let changes: usize = all.iter().map(|r| r.plan_trace.len()).sum();
    let shortest = all.iter().filter_map(|r| shortest_dwell(r)).min();
    verdict(
        shortest.is_none_or(|s| s >= min_dwell),
        format!("{} runs, {changes} decisions, shortest dwell {shortest:?} slots, min {min_dwell}", all.len()),
    )
}

fn c9_decide_latency() -> Verdict {
    const N: usize = 8;
    const M: u32 = 32;
    let cal = paper_cal();
    let setup = ControllerSetup {
        n_cores: N,
        levels: LevelSet::new(cal.freq_levels.iter().map(|f| f.ghz()).collect()).unwrap(),
        cfg: ControllerConfig {
            warmup_slots: 0,
            ..cal.controller
        },
        constraints: ConstraintConfig {
            tti: 1e-3,
            delta: 0.05,
            baseline_throughput: 0.0,
            residency: 0.0,
            wakeup: 0.0,
        },
        kind: PolicyKind::Combined,
        ran_threads: (0..M).map(ThreadId).collect(),
    };
    let window_ns = 20_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let windows: Vec<BTreeMap<ThreadId, ThreadStats>> = (0..64)
        .map(|_| {
            (0..M)
                .map(|t| {
                    let cycles = rng.random_range(1_000_000..8_000_000u64);
                    let c = Counters {
                        cycles,
                        instructions: cycles * 3 / 2,
                        llc_misses: cycles / rng.random_range(200..2000u64),
                        ctx_switches: rng.random_range(0..40),
                        runtime_ns: cycles * 1000 / 2400,
                    };
                    (ThreadId(t), ThreadStats::from_counters(c, window_ns))
                })
                .collect()
        })
        .collect();

    let mut ctl = Controller::new(setup);
    let mut plan = ctl.initial_plan();
    let mut samples = Vec::with_capacity(10_000);
    for i in 0..10_000usize {
        let stats = &windows[i % windows.len()];
        let mut sums: BTreeMap<CoreId, Counters> = plan.cores().map(|c| (c, Counters::default())).collect();
        for (t, s) in stats {
            let c = plan.affinity.get(t).copied().unwrap_or(CoreId(t.0 % N as u32));
            sums.get_mut(&c).unwrap().merge(&s.counters);
        }
        let rollup: BTreeMap<CoreId, CoreStats> =
            sums.into_iter().map(|(c, k)| (c, CoreStats::from_counters(c, k, window_ns))).collect();
        let t0 = Instant::now();
        let next = ctl.decide(stats, &rollup, &plan, (i as u64 + 1) * 20);
        samples.push(t0.elapsed());
        plan = next;
    }
    samples.sort();
    let median = samples[samples.len() / 2];
    verdict(median < Duration::from_millis(1), format!("median {median:.2?}, p99 {:.2?}", samples[9_900]))
}

fn cli(args: &[&str]) -> (bool, Vec<u8>, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_du-orch")).args(args).output().unwrap();
    (out.status.success(), out.stdout, out.stderr)
}

fn c10_determinism() -> Verdict {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-determinism");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = asset("paper_cal.cfg");
    let cfg = cfg.to_str().unwrap();
    let tel = asset("sample_telemetry.log");
    let samples = asset("power_samples.csv");
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("simulate", vec!["simulate", cfg, "--seed", "3", "--runs", "2"]),
        ("simulate-json", vec!["simulate", cfg, "--seed", "3", "--policy", "combined", "--format", "json"]),
        ("sweep-gnb", vec!["sweep-gnb", cfg, "--seed", "3", "--duration-slots", "1000"]),
        ("fit-power", vec!["fit-power", samples.to_str().unwrap(), "--seed", "3"]),
        ("replay", vec!["replay", tel.to_str().unwrap(), "--config", cfg, "--seed", "3"]),
        ("oracle-check", vec!["oracle-check", "--seed", "3", "--instances", "50"]),
    ];
    let mut bad = Vec::new();
    for (name, args) in &commands {
        let mut outputs = Vec::new();
        for round in 0..2 {
            let path = dir.join(format!("{name}-{round}.out"));
            let mut a = args.clone();
            let p = path.to_str().unwrap().to_string();
            a.extend(["--out", &p]);
            let (ok, stdout, _) = cli(&a);
            let file = std::fs::read(&path).unwrap_or_default();
            outputs.push((ok, stdout, file));
        }
        if !outputs[0].0 || outputs[0] != outputs[1] || outputs[0].2.is_empty() {
            bad.push(*name);
        }
    }
    verdict(bad.is_empty(), format!("{} commands twice each, differing or failing: {bad:?}", commands.len()))
}

fn main() {
    let cal = paper_cal();
    let runs = policy_runs();
    let sweep = sweep();
    let results = [
        ("1 policy ordering and savings", c1_ordering(&runs)),
        ("2 throughput within delta", c2_throughput(&runs)),
        ("3 zero deadline misses", c3_deadlines(&runs)),
        ("4 MPKI and context-switch reduction", c4_counters(&runs)),
        ("5 oracle certification", c5_oracle()),
        ("6 power-model fitting", c6_fit()),
        ("7 noisy-neighbor shape", c7_noisy_neighbor(&sweep, cal.tti)),
        ("8 frequency dwell", c8_dwell(&runs, &sweep, cal.controller.min_dwell_slots)),
        ("9 decide latency", c9_decide_latency()),
        ("10 CLI determinism", c10_determinism()),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
