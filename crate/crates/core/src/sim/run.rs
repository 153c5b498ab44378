//! Closed-loop runs: simulator, telemetry windows and controller wired
//! together at the controller cadence.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerSetup, PolicyKind};
use crate::error::{Error, Result};
use crate::model::{check_constraints, CoreId, SchedulingPlan, ThreadId};
use crate::sim::config::{ScenarioConfig, ThreadProfile};
use crate::sim::engine::SimState;
use crate::telemetry::{aggregate_window, rollup_by_record_core, CoreStats, Counters, TelemetryRecord, ThreadStats};

/// Plan in force from `slot` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub slot: u64,
    pub plan: SchedulingPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowCores {
    /// Slot index at the end of the window.
    pub slot: u64,
    pub cores: Vec<CoreStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub policy: PolicyKind,
    pub seed: u64,
    pub duration_slots: u64,
    /// Watts.
    pub avg_power: f64,
    /// Bits/s.
    pub throughput: f64,
    pub baseline_throughput: f64,
    /// Foreground thread-slots that missed the deadline.
    pub deadline_misses: u64,
    pub transitions: u64,
    pub ctx_switches: u64,
    pub mean_ipc: f64,
    pub mean_mpki: f64,
    pub core_series: Vec<WindowCores>,
    pub thread_summary: BTreeMap<ThreadId, ThreadStats>,
    /// Run-level per-core totals.
    pub core_summary: Vec<CoreStats>,
    pub clamp_events: u64,
    pub failsafe_events: u64,
    pub diagnostics: Vec<String>,
    /// Every controller decision, including the initial plan at slot 0.
    pub plan_trace: Vec<PlanRecord>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Appends `gnb_background` groups of background threads built from the
/// background template. Any background threads already present are
/// replaced, so the call is idempotent.
pub fn inject_background(cfg: &ScenarioConfig) -> Result<ScenarioConfig> {
    if cfg.gnb_background > 5 {
        return Err(Error::Config(format!(
            "gnb_background must be in [0,5], got {}",
            cfg.gnb_background
        )));
    }
    let mut out = cfg.clone();
    out.threads.retain(|t| !t.background);
    let mut next = out.threads.iter().map(|t| t.id.0 + 1).max().unwrap_or(0);
    let tpl = cfg.background;
    for _ in 0..cfg.gnb_background {
        for _ in 0..tpl.threads_per_gnb {
            out.threads.push(ThreadProfile {
                id: ThreadId(next),
                cycles_per_slot: tpl.cycles_per_slot,
                demand_jitter: tpl.demand_jitter,
                memory_intensity: tpl.memory_intensity,
                bits_per_slot: 0,
                background: true,
            });
            next += 1;
        }
    }
    Ok(out)
}

pub fn controller_setup(cfg: &ScenarioConfig, kind: PolicyKind) -> ControllerSetup {
    ControllerSetup {
        n_cores: cfg.n_cores,
        levels: cfg.freq_levels.clone(),
        cfg: cfg.controller,
        constraints: cfg.constraint_config(0.0),
        kind,
        ran_threads: cfg.foreground().map(|t| t.id).collect(),
    }
}

/// Options that do not change the simulated outcome.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep every emitted telemetry record in the result.
    pub keep_telemetry: bool,
    /// Evaluate demand without jitter.
    pub no_jitter: bool,
}

pub struct RunOutput {
    pub report: RunReport,
    pub telemetry: Vec<TelemetryRecord>,
    pub final_plan: SchedulingPlan,
}

pub fn run_scenario(cfg: &ScenarioConfig, policy: PolicyKind) -> Result<RunReport> {
    Ok(run_scenario_with(cfg, policy, RunOptions::default())?.report)
}

pub fn run_scenario_with(cfg: &ScenarioConfig, policy: PolicyKind, opts: RunOptions) -> Result<RunOutput> {
    let cfg = inject_background(cfg)?;
    let mut sim = SimState::new(cfg.clone())?;
    if opts.no_jitter {
        sim = sim.without_jitter();
    }
    let mut ctl = Controller::new(controller_setup(&cfg, policy));
    let mut plan = ctl.initial_plan();
    let mut plan_trace = vec![PlanRecord {
        slot: 0,
        plan: plan.clone(),
    }];

    let tti_ns = cfg.tti_ns();
    let cadence = cfg.controller.cadence_slots;
    let window_ns = cadence * tti_ns;
    let warmup = cfg.controller.warmup_slots.max(1);
    let foreground: BTreeSet<ThreadId> = cfg.foreground().map(|t| t.id).collect();

    let mut power_sum = 0.0;
    let mut bits_total = 0u64;
    let mut warm_bits = 0u64;
    let mut baseline_set = false;
    let mut deadline_misses = 0u64;
    let mut transitions = 0u64;
    let mut clamp_events = 0u64;
    let mut thread_totals: BTreeMap<ThreadId, Counters> = BTreeMap::new();
    let mut core_totals = vec![Counters::default(); cfg.n_cores];
    let mut core_series = Vec::new();
    let mut all_telemetry = Vec::new();

    let mut window_recs: Vec<TelemetryRecord> = Vec::new();
    let mut window_lat: BTreeMap<ThreadId, f64> = BTreeMap::new();
    let mut window_bits = 0u64;

    for slot in 0..cfg.duration_slots {
        let out = sim.step_slot(&plan)?;
        power_sum += out.slot_power;
        bits_total += out.bits_delivered;
        window_bits += out.bits_delivered;
        transitions += out.transitions as u64;
        for (t, met) in &out.deadline_met {
            if !met && foreground.contains(t) {
                deadline_misses += 1;
            }
        }
        for t in &foreground {
            let c = out.completion[t];
            let e = window_lat.entry(*t).or_insert(0.0);
            *e = e.max(c);
        }
        if slot < warmup {
            warm_bits += out.bits_delivered;
        }
        if slot + 1 == warmup {
            ctl.set_baseline_throughput(warm_bits as f64 / (warmup as f64 * cfg.tti));
            baseline_set = true;
        }

        let recs = sim.emit_telemetry();
        for r in &recs {
            thread_totals.entry(r.thread).or_default().add_record(r);
            core_totals[r.core.index()].add_record(r);
        }
        if opts.keep_telemetry {
            all_telemetry.extend_from_slice(&recs);
        }
        window_recs.extend(recs);

        if (slot + 1) % cadence == 0 {
            let now = slot + 1;
            let stats = aggregate_window(&window_recs, window_ns)?;
            let rollup = rollup_by_record_core(&window_recs, window_ns, cfg.n_cores);
            clamp_events += rollup.values().filter(|c| c.clamped).count() as u64;
            core_series.push(WindowCores {
                slot: now,
                cores: rollup.values().copied().collect(),
            });
            let report = baseline_set.then(|| {
                let measured = window_bits as f64 / (cadence as f64 * cfg.tti);
                check_constraints(&ctl.setup().constraints, &plan, &window_lat, measured)
            });
            let next = ctl.on_window(now, &stats, &rollup, &plan, report.as_ref());
            plan_trace.push(PlanRecord {
                slot: now,
                plan: next.clone(),
            });
            plan = next;
            window_recs.clear();
            window_lat.clear();
            window_bits = 0;
        }
    }

    let run_ns = cfg.duration_slots * tti_ns;
    let thread_summary: BTreeMap<ThreadId, ThreadStats> = thread_totals
        .iter()
        .map(|(t, c)| (*t, ThreadStats::from_counters(*c, run_ns)))
        .collect();
    let core_summary = core_totals
        .iter()
        .enumerate()
        .map(|(i, c)| CoreStats::from_counters(CoreId(i as u32), *c, run_ns))
        .collect();
    let ctx_switches = thread_totals.values().map(|c| c.ctx_switches).sum();
    let busy: Vec<&ThreadStats> = thread_summary
        .iter()
        .filter(|(t, s)| foreground.contains(t) && s.counters.instructions > 0)
        .map(|(_, s)| s)
        .collect();
    let mean = |f: fn(&ThreadStats) -> f64| {
        if busy.is_empty() {
            0.0
        } else {
            busy.iter().map(|s| f(s)).sum::<f64>() / busy.len() as f64
        }
    };

    let report = RunReport {
        scenario: cfg.name.clone(),
        policy,
        seed: cfg.seed,
        duration_slots: cfg.duration_slots,
        avg_power: power_sum / cfg.duration_slots as f64,
        throughput: bits_total as f64 / (cfg.duration_slots as f64 * cfg.tti),
        baseline_throughput: ctl.setup().constraints.baseline_throughput,
        deadline_misses,
        transitions,
        ctx_switches,
        mean_ipc: mean(|s| s.ipc),
        mean_mpki: mean(|s| s.mpki),
        core_series,
        thread_summary,
        core_summary,
        clamp_events,
        failsafe_events: ctl.failsafe_count(),
        diagnostics: ctl.diagnostics().to_vec(),
        plan_trace,
    };
    Ok(RunOutput {
        report,
        telemetry: all_telemetry,
        final_plan: plan,
    })
}

/// Re-runs the controller over a captured telemetry stream, window by
/// window, without actuation. Windows are `cadence_slots` slots long and
/// aligned to slot 0; constraint reports are not available offline, so no
/// rollback is applied.
pub fn replay_plans(
    cfg: &ScenarioConfig,
    policy: PolicyKind,
    records: &[TelemetryRecord],
) -> Result<Vec<PlanRecord>> {
    let cfg = inject_background(cfg)?;
    cfg.validate()?;
    let mut ctl = Controller::new(controller_setup(&cfg, policy));
    let mut plan = ctl.initial_plan();
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let mut trace = vec![PlanRecord {
        slot: 0,
        plan: plan.clone(),
    }];
    let cadence = cfg.controller.cadence_slots;
    let window_ns = cadence * cfg.tti_ns();
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.ts_ns);
    let last_ts = sorted.last().map_or(0, |r| r.ts_ns);

    let mut start = 0;
    let mut window_end = window_ns;
    while window_end <= last_ts {
        let end = start + sorted[start..].partition_point(|r| r.ts_ns <= window_end);
        let window = &sorted[start..end];
        let stats = aggregate_window(window, window_ns)?;
        let rollup = rollup_by_record_core(window, window_ns, cfg.n_cores);
        let now = window_end / cfg.tti_ns();
        plan = ctl.on_window(now, &stats, &rollup, &plan, None);
        trace.push(PlanRecord {
            slot: now,
            plan: plan.clone(),
        });
        start = end;
        window_end += window_ns;
    }
    Ok(trace)
}
