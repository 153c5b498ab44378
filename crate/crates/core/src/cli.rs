//! Command-line front end. `run` does all the work and returns the report
//! text, so the binary only handles I/O and exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::controller::PolicyKind;
use crate::error::{Error, Result};
use crate::model::{fit_power_model, FrequencyLevel, SchedulingPlan};
use crate::oracle::{certify_batch, summarize, InstanceSpec};
use crate::report::{
    cert_rows, encode, report_rows, sweep_rows, Format, CERT_HEADERS, REPORT_HEADERS, SWEEP_HEADERS,
};
use crate::sim::{replay_plans, run_scenario, run_scenario_with, PlanRecord, RunOptions, RunReport, ScenarioConfig};
use crate::telemetry::parse_log;

#[derive(Debug, Parser)]
#[command(name = "du-orch", version, about = "Energy-aware CPU orchestration for a RAN DU host")]
pub struct Cli {
    /// Seed override; scenario commands default to the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write the report here instead of standard output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Report encoding: csv or json.
    #[arg(long, global = true, default_value = "csv")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario under one policy or all four.
    Simulate {
        config: PathBuf,
        /// baseline, static, ondemand, combined or all.
        #[arg(long, default_value = "all")]
        policy: String,
        /// Consecutive seeds per policy, starting at the seed.
        #[arg(long, default_value_t = 1)]
        runs: u64,
        /// Override the scenario length.
        #[arg(long)]
        duration_slots: Option<u64>,
        /// Write emitted telemetry (single run only).
        #[arg(long)]
        telemetry_out: Option<PathBuf>,
        /// Write every run's plan trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Sweep the number of background gNB groups.
    SweepGnb {
        config: PathBuf,
        /// Inclusive range, e.g. 1..5.
        #[arg(long, default_value = "1..5")]
        range: String,
        #[arg(long, default_value = "baseline")]
        policy: String,
        #[arg(long)]
        duration_slots: Option<u64>,
    },
    /// Fit P(f) = p_static + k_dyn f^2 to a CSV of `ghz,watts` samples.
    FitPower {
        samples: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        p_idle: f64,
    },
    /// Re-run the controller over a captured telemetry log.
    Replay {
        telemetry: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "combined")]
        policy: String,
    },
    /// Compare the controller with the exhaustive optimum on random
    /// small instances.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 3)]
        max_cores: usize,
        #[arg(long, default_value_t = 4)]
        max_threads: usize,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
}

/// Report text plus warnings meant for standard error.
#[derive(Debug, Default)]
pub struct Output {
    pub text: String,
    pub warnings: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    ScenarioConfig::parse(&read(path)?).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn policies(name: &str) -> Result<Vec<PolicyKind>> {
    if name.eq_ignore_ascii_case("all") {
        Ok(PolicyKind::ALL.to_vec())
    } else {
        Ok(vec![name.parse()?])
    }
}

fn parse_range(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::Config(format!("bad range {s:?}, expected A..B within 0..5"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let a: u32 = a.trim().parse().map_err(|_| bad())?;
    let b: u32 = b.trim().parse().map_err(|_| bad())?;
    if a > b || b > 5 {
        return Err(bad());
    }
    Ok((a, b))
}

pub fn run(cli: &Cli) -> Result<Output> {
    match &cli.command {
        Command::Simulate {
            config,
            policy,
            runs,
            duration_slots,
            telemetry_out,
            trace,
        } => simulate(cli, config, policy, *runs, *duration_slots, telemetry_out.as_deref(), trace.as_deref()),
        Command::SweepGnb {
            config,
            range,
            policy,
            duration_slots,
        } => sweep_gnb(cli, config, range, policy, *duration_slots),
        Command::FitPower { samples, p_idle } => fit_power(cli, samples, *p_idle),
        Command::Replay {
            telemetry,
            config,
            policy,
        } => replay(cli, telemetry, config, policy),
        Command::OracleCheck {
            instances,
            max_cores,
            max_threads,
            levels,
        } => {
            let spec = InstanceSpec {
                max_cores: *max_cores,
                max_threads: *max_threads,
                levels: *levels,
            };
            oracle_check(cli, *instances, &spec)
        }
    }
}

#[derive(Serialize)]
struct TraceEntry<'a> {
    policy: PolicyKind,
    seed: u64,
    trace: &'a [PlanRecord],
}

fn simulate(
    cli: &Cli,
    config: &Path,
    policy: &str,
    runs: u64,
    duration_slots: Option<u64>,
    telemetry_out: Option<&Path>,
    trace: Option<&Path>,
) -> Result<Output> {
    let mut base = load_config(config)?;
    if let Some(d) = duration_slots {
        base.duration_slots = d;
    }
    let kinds = policies(policy)?;
    let seed0 = cli.seed.unwrap_or(base.seed);
    if runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    let jobs: Vec<(PolicyKind, u64)> = kinds
        .iter()
        .flat_map(|&k| (0..runs).map(move |i| (k, seed0 + i)))
        .collect();
    if telemetry_out.is_some() && jobs.len() != 1 {
        return Err(Error::Config("--telemetry-out needs exactly one run".into()));
    }

    let mut out = Output::default();
    let reports: Vec<RunReport> = if let Some(path) = telemetry_out {
        let (kind, seed) = jobs[0];
        let mut cfg = base.clone();
        cfg.seed = seed;
        let run = run_scenario_with(
            &cfg,
            kind,
            RunOptions {
                keep_telemetry: true,
                ..RunOptions::default()
            },
        )?;
        let mut text = String::new();
        for r in &run.telemetry {
            writeln!(text, "{r}").expect("string write");
        }
        write(path, &text)?;
        vec![run.report]
    } else {
        jobs.par_iter()
            .map(|&(kind, seed)| {
                let mut cfg = base.clone();
                cfg.seed = seed;
                run_scenario(&cfg, kind)
            })
            .collect::<Result<_>>()?
    };

    for r in &reports {
        if r.failsafe_events > 0 {
            out.warnings.push(format!(
                "{} seed {}: controller fail-safe triggered {} time(s)",
                r.policy, r.seed, r.failsafe_events
            ));
        }
    }
    if let Some(path) = trace {
        let entries: Vec<TraceEntry> = reports
            .iter()
            .map(|r| TraceEntry {
                policy: r.policy,
                seed: r.seed,
                trace: &r.plan_trace,
            })
            .collect();
        let mut text = serde_json::to_string(&entries).expect("trace serializes");
        text.push('\n');
        write(path, &text)?;
    }
    out.text = encode(&report_rows(&reports), REPORT_HEADERS, cli.format);
    Ok(out)
}

fn sweep_gnb(cli: &Cli, config: &Path, range: &str, policy: &str, duration_slots: Option<u64>) -> Result<Output> {
    let mut base = load_config(config)?;
    let (lo, hi) = parse_range(range)?;
    if let Some(d) = duration_slots {
        base.duration_slots = d;
    }
    base.seed = cli.seed.unwrap_or(base.seed);
    let kind: PolicyKind = policy.parse()?;
    let reports: Vec<(u32, RunReport)> = (lo..=hi)
        .into_par_iter()
        .map(|g| {
            let mut cfg = base.clone();
            cfg.gnb_background = g;
            run_scenario(&cfg, kind).map(|r| (g, r))
        })
        .collect::<Result<_>>()?;
    Ok(Output {
        text: encode(&sweep_rows(&reports, base.tti), SWEEP_HEADERS, cli.format),
        warnings: Vec::new(),
    })
}

/// Reads `ghz,watts` pairs. Blank lines and `#` comments are skipped, and a
/// non-numeric first record is taken as a header.
pub fn parse_power_samples(text: &str) -> Result<Vec<(FrequencyLevel, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedInput(e.to_string()))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if rec.len() != 2 {
            return Err(Error::MalformedInput(format!(
                "line {line}: expected 2 fields, got {}",
                rec.len()
            )));
        }
        match (rec[0].parse::<f64>(), rec[1].parse::<f64>()) {
            (Ok(f), Ok(p)) if f.is_finite() && p.is_finite() => samples.push((FrequencyLevel(f), p)),
            _ if i == 0 => continue,
            _ => return Err(Error::MalformedInput(format!("line {line}: not a number pair"))),
        }
    }
    Ok(samples)
}

#[derive(Serialize)]
struct FitRow {
    p_static: f64,
    k_dyn: f64,
    p_idle: f64,
    residual: f64,
    samples: usize,
}

fn fit_power(cli: &Cli, samples: &Path, p_idle: f64) -> Result<Output> {
    let samples = parse_power_samples(&read(samples)?)?;
    let fit = fit_power_model(&samples, p_idle)?;
    let row = FitRow {
        p_static: fit.params.p_static,
        k_dyn: fit.params.k_dyn,
        p_idle: fit.params.p_idle,
        residual: fit.residual,
        samples: samples.len(),
    };
    Ok(Output {
        text: encode(&[row], &["p_static", "k_dyn", "p_idle", "residual", "samples"], cli.format),
        warnings: Vec::new(),
    })
}

#[derive(Serialize)]
struct PlanRow {
    slot: u64,
    freq_ghz: String,
    affinity: String,
    isolated: String,
}

fn plan_row(r: &PlanRecord) -> PlanRow {
    let join = |it: Vec<String>| it.join(";");
    let SchedulingPlan {
        affinity,
        freq,
        isolated,
    } = &r.plan;
    PlanRow {
        slot: r.slot,
        freq_ghz: join(freq.iter().map(|f| f.to_string()).collect()),
        affinity: join(affinity.iter().map(|(t, c)| format!("{t}:{c}")).collect()),
        isolated: join(isolated.iter().map(|c| c.to_string()).collect()),
    }
}

fn replay(cli: &Cli, telemetry: &Path, config: &Path, policy: &str) -> Result<Output> {
    let mut cfg = load_config(config)?;
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    let kind: PolicyKind = policy.parse()?;
    let records = parse_log(&read(telemetry)?)
        .map_err(|(line, e)| Error::MalformedInput(format!("{}: line {line}: {e}", telemetry.display())))?;
    let trace = replay_plans(&cfg, kind, &records)?;
    let text = match cli.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&trace).expect("trace serializes");
            s.push('\n');
            s
        }
        Format::Csv => {
            let rows: Vec<PlanRow> = trace.iter().map(plan_row).collect();
            encode(&rows, &["slot", "freq_ghz", "affinity", "isolated"], Format::Csv)
        }
    };
    Ok(Output {
        text,
        warnings: Vec::new(),
    })
}

fn oracle_check(cli: &Cli, instances: usize, spec: &InstanceSpec) -> Result<Output> {
    let certs = certify_batch(instances, cli.seed.unwrap_or(1), spec)?;
    let summary = summarize(&certs);
    let mut out = Output {
        text: encode(&cert_rows(&certs, &summary), CERT_HEADERS, cli.format),
        warnings: Vec::new(),
    };
    if instances > 0 {
        out.warnings.push(format!(
            "{}: agreement {:.3}, within bound {:.3} of {} feasible",
            if summary.pass { "PASS" } else { "FAIL" },
            summary.agreement,
            summary.within_bound,
            summary.feasible
        ));
    }
    Ok(out)
}
