//! Report rows and their CSV / JSON encodings.

use serde::Serialize;

use crate::controller::PolicyKind;
use crate::oracle::{Certification, CertificationSummary};
use crate::sim::RunReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format {other:?}, expected csv or json")),
        }
    }
}

/// One simulated run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub avg_power_w: f64,
    pub throughput_bps: f64,
    pub deadline_misses: u64,
    pub ctx_switches: u64,
    pub mean_ipc: f64,
    pub mean_mpki: f64,
    pub freq_transitions: u64,
    /// Empty unless a baseline run with the same scenario and seed is in
    /// the same batch.
    pub savings_vs_baseline: Option<f64>,
    /// The controller fell back to the current plan at least once.
    pub failsafe: bool,
}

/// Rows ordered by (scenario, policy, seed).
pub fn report_rows(reports: &[RunReport]) -> Vec<ReportRow> {
    let baseline = |scenario: &str, seed: u64| {
        reports
            .iter()
            .find(|r| r.policy == PolicyKind::Baseline && r.scenario == scenario && r.seed == seed)
            .map(|r| r.avg_power)
    };
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.scenario, a.policy, a.seed).cmp(&(&b.scenario, b.policy, b.seed)));
    sorted
        .into_iter()
        .map(|r| ReportRow {
            scenario: r.scenario.clone(),
            policy: r.policy.name().to_string(),
            seed: r.seed,
            avg_power_w: r.avg_power,
            throughput_bps: r.throughput,
            deadline_misses: r.deadline_misses,
            ctx_switches: r.ctx_switches,
            mean_ipc: r.mean_ipc,
            mean_mpki: r.mean_mpki,
            freq_transitions: r.transitions,
            savings_vs_baseline: baseline(&r.scenario, r.seed)
                .filter(|&b| b > 0.0)
                .map(|b| 1.0 - r.avg_power / b),
            failsafe: r.failsafe_events > 0,
        })
        .collect()
}

/// One gNB count of a noisy-neighbor sweep, or the trailing fit summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// `data` or `summary`.
    pub kind: String,
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub gnb: Option<u32>,
    /// Mean per-core utilization over the run.
    pub utilization: Option<f64>,
    pub ipc: Option<f64>,
    pub mpki: Option<f64>,
    /// Context switches per second, all threads.
    pub ctx_rate: Option<f64>,
    pub avg_power_w: Option<f64>,
    /// Coefficient of determination of utilization against gNB count.
    pub r2: Option<f64>,
}

pub fn sweep_rows(reports: &[(u32, RunReport)], tti: f64) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = reports
        .iter()
        .map(|(gnb, r)| {
            let n = r.core_summary.len().max(1) as f64;
            let util = r.core_summary.iter().map(|c| c.utilization).sum::<f64>() / n;
            let mut total = crate::telemetry::Counters::default();
            for c in &r.core_summary {
                total.merge(&c.counters);
            }
            SweepRow {
                kind: "data".into(),
                scenario: r.scenario.clone(),
                policy: r.policy.name().into(),
                seed: r.seed,
                gnb: Some(*gnb),
                utilization: Some(util),
                ipc: Some(total.ipc()),
                mpki: Some(total.mpki()),
                ctx_rate: Some(r.ctx_switches as f64 / (r.duration_slots as f64 * tti)),
                avg_power_w: Some(r.avg_power),
                r2: None,
            }
        })
        .collect();
    if let Some(first) = rows.first().cloned() {
        let xs: Vec<f64> = rows.iter().map(|r| r.gnb.unwrap_or(0) as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.utilization.unwrap_or(0.0)).collect();
        rows.push(SweepRow {
            kind: "summary".into(),
            gnb: None,
            utilization: None,
            ipc: None,
            mpki: None,
            ctx_rate: None,
            avg_power_w: None,
            r2: Some(linear_r2(&xs, &ys)),
            ..first
        });
    }
    rows
}

/// Per-instance certification row, or the trailing summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertRow {
    /// `data` or `summary`.
    pub kind: String,
    pub instance: Option<usize>,
    pub n_cores: Option<usize>,
    pub n_threads: Option<usize>,
    pub oracle_energy_w: Option<f64>,
    pub heuristic_energy_w: Option<f64>,
    pub ratio: Option<f64>,
    pub feasibility_agrees: Option<bool>,
    pub agreement: Option<f64>,
    pub within_bound: Option<f64>,
    pub pass: Option<bool>,
}

pub fn cert_rows(certs: &[Certification], summary: &CertificationSummary) -> Vec<CertRow> {
    let mut rows: Vec<CertRow> = certs
        .iter()
        .map(|c| CertRow {
            kind: "data".into(),
            instance: Some(c.instance),
            n_cores: Some(c.n_cores),
            n_threads: Some(c.n_threads),
            oracle_energy_w: c.oracle_energy,
            heuristic_energy_w: c.heuristic_energy,
            ratio: c.ratio,
            feasibility_agrees: Some(c.feasibility_agrees),
            agreement: None,
            within_bound: None,
            pass: None,
        })
        .collect();
    if !certs.is_empty() {
        rows.push(CertRow {
            kind: "summary".into(),
            instance: None,
            n_cores: None,
            n_threads: None,
            oracle_energy_w: None,
            heuristic_energy_w: None,
            ratio: None,
            feasibility_agrees: None,
            agreement: Some(summary.agreement),
            within_bound: Some(summary.within_bound),
            pass: Some(summary.pass),
        });
    }
    rows
}

/// Encodes rows as CSV (header always present) or a JSON array.
pub fn encode<T: Serialize>(rows: &[T], headers: &[&str], format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(headers).expect("in-memory write");
            for r in rows {
                w.serialize(r).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
        }
    }
}

pub const REPORT_HEADERS: &[&str] = &[
    "scenario",
    "policy",
    "seed",
    "avg_power_w",
    "throughput_bps",
    "deadline_misses",
    "ctx_switches",
    "mean_ipc",
    "mean_mpki",
    "freq_transitions",
    "savings_vs_baseline",
    "failsafe",
];

pub const SWEEP_HEADERS: &[&str] = &[
    "kind",
    "scenario",
    "policy",
    "seed",
    "gnb",
    "utilization",
    "ipc",
    "mpki",
    "ctx_rate",
    "avg_power_w",
    "r2",
];

pub const CERT_HEADERS: &[&str] = &[
    "kind",
    "instance",
    "n_cores",
    "n_threads",
    "oracle_energy_w",
    "heuristic_energy_w",
    "ratio",
    "feasibility_agrees",
    "agreement",
    "within_bound",
    "pass",
];

/// R² of the least-squares line through `(xs, ys)`. A constant `ys` is
/// fitted exactly and scores 1.
pub fn linear_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return 1.0;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs[..n].iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs[..n].iter().zip(&ys[..n]).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys[..n].iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    let slope = sxy / sxx;
    let ss_res: f64 = xs[..n]
        .iter()
        .zip(&ys[..n])
        .map(|(x, y)| (y - (my + slope * (x - mx))).powi(2))
        .sum();
    1.0 - ss_res / syy
}
