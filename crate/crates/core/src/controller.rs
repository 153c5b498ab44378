//! Rule-based placement and frequency controller.
//!
//! Rules, all parameterized by [`ControllerConfig`]:
//!
//! * a threshold governor with hysteresis and a minimum dwell per level;
//! * first-fit-decreasing packing of threads onto as few cores as fit under
//!   `headroom`, keeping cache-hot threads apart while empty cores remain,
//!   and parking the cores left empty;
//! * a rollback that raises frequencies and un-parks a core after a deadline
//!   or throughput violation, escalating to the all-max plan when violations
//!   repeat.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ConstraintConfig, ConstraintReport, CoreId, FrequencyLevel, LevelSet, SchedulingPlan, ThreadId,
};
use crate::telemetry::{CoreStats, Counters, ThreadStats};

const FIT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    /// All cores at peak frequency, no pinning, no isolation.
    Baseline,
    /// Packing computed once after warm-up, cores at peak frequency.
    StaticAffinity,
    /// No pinning, per-core governor.
    OnDemandFreq,
    /// Packing refreshed every window plus per-core governor.
    Combined,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Baseline,
        PolicyKind::StaticAffinity,
        PolicyKind::OnDemandFreq,
        PolicyKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Baseline => "baseline",
            PolicyKind::StaticAffinity => "static",
            PolicyKind::OnDemandFreq => "ondemand",
            PolicyKind::Combined => "combined",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "i" => Ok(PolicyKind::Baseline),
            "static" | "static-affinity" | "ii" => Ok(PolicyKind::StaticAffinity),
            "ondemand" | "on-demand" | "iii" => Ok(PolicyKind::OnDemandFreq),
            "combined" | "iv" => Ok(PolicyKind::Combined),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Decision period, slots.
    pub cadence_slots: u64,
    pub up_threshold: f64,
    pub down_threshold: f64,
    /// Maximum planned utilization of a packed core.
    pub headroom: f64,
    pub min_dwell_slots: u64,
    /// MPKI at or above which a thread counts as cache-hot.
    pub mpki_hot: f64,
    /// Slots run at peak settings before any policy engages.
    pub warmup_slots: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            cadence_slots: 100,
            up_threshold: 0.80,
            down_threshold: 0.30,
            headroom: 0.85,
            min_dwell_slots: 10,
            mpki_hot: 10.0,
            warmup_slots: 50,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, tti: f64, max_transition: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.cadence_slots == 0 {
            return bad("controller.cadence_slots must be >= 1".into());
        }
        if !(0.0 < self.down_threshold
            && self.down_threshold < self.up_threshold
            && self.up_threshold <= 1.0)
        {
            return bad(format!(
                "need 0 < down_threshold < up_threshold <= 1, got {} / {}",
                self.down_threshold, self.up_threshold
            ));
        }
        if !(self.headroom > 0.0 && self.headroom <= 1.0) {
            return bad(format!("headroom must be in (0,1], got {}", self.headroom));
        }
        if (self.min_dwell_slots as f64) * tti < max_transition {
            return bad(format!(
                "min_dwell_slots * tti = {} s is shorter than max(RT, WT) = {} s",
                self.min_dwell_slots as f64 * tti,
                max_transition
            ));
        }
        Ok(())
    }
}

/// One governor decision for one core.
pub fn governor_step(
    core: &CoreStats,
    current: FrequencyLevel,
    levels: &LevelSet,
    cfg: &ControllerConfig,
    dwell_age: u64,
) -> FrequencyLevel {
    if dwell_age < cfg.min_dwell_slots {
        current
    } else if core.utilization > cfg.up_threshold {
        levels.step_up(current)
    } else if core.utilization < cfg.down_threshold {
        levels.step_down(current)
    } else {
        current
    }
}

#[derive(Debug, Clone, Copy)]
struct Item {
    thread: ThreadId,
    util: f64,
    hot: bool,
}

fn sorted_items(stats: &BTreeMap<ThreadId, ThreadStats>, mpki_hot: f64) -> Vec<Item> {
    let mut items: Vec<Item> = stats
        .iter()
        .map(|(&thread, s)| Item {
            thread,
            util: s.utilization,
            hot: s.mpki >= mpki_hot,
        })
        .collect();
    items.sort_by(|a, b| {
        b.util
            .total_cmp(&a.util)
            .then(b.hot.cmp(&a.hot))
            .then(a.thread.cmp(&b.thread))
    });
    items
}

/// First-fit-decreasing with hot-thread separation. Returns the placement
/// and the threads that fit nowhere.
fn first_fit(items: &[Item], n_cores: usize, cap: f64) -> (BTreeMap<ThreadId, CoreId>, Vec<Item>) {
    let mut load: Vec<f64> = Vec::with_capacity(n_cores);
    let mut has_hot: Vec<bool> = Vec::with_capacity(n_cores);
    let mut placed = BTreeMap::new();
    let mut leftover = Vec::new();
    for item in items {
        let fits = |l: f64| l + item.util <= cap + FIT_EPS;
        let can_open = load.len() < n_cores && fits(0.0);
        let first_open = |skip_hot: bool| {
            (0..load.len()).find(|&c| fits(load[c]) && !(skip_hot && has_hot[c]))
        };
        let choice = if item.hot {
            first_open(true)
                .or(can_open.then_some(load.len()))
                .or_else(|| first_open(false))
        } else {
            first_open(false).or(can_open.then_some(load.len()))
        };
        match choice {
            Some(c) => {
                if c == load.len() {
                    load.push(0.0);
                    has_hot.push(false);
                }
                load[c] += item.util;
                has_hot[c] |= item.hot;
                placed.insert(item.thread, CoreId(c as u32));
            }
            None => leftover.push(*item),
        }
    }
    (placed, leftover)
}

fn isolated_from(placed: &BTreeMap<ThreadId, CoreId>, n_cores: usize) -> BTreeSet<CoreId> {
    let used: BTreeSet<CoreId> = placed.values().copied().collect();
    (0..n_cores as u32).map(CoreId).filter(|c| !used.contains(c)).collect()
}

/// Packs threads onto cores by utilization. Never fails: when the threads do
/// not fit under `headroom`, the cap is relaxed to 1.0, and whatever still
/// does not fit shares the last core.
pub fn affinity_cluster(
    stats: &BTreeMap<ThreadId, ThreadStats>,
    n_cores: usize,
    cfg: &ControllerConfig,
) -> (BTreeMap<ThreadId, CoreId>, BTreeSet<CoreId>) {
    let n_cores = n_cores.max(1);
    let items = sorted_items(stats, cfg.mpki_hot);
    let (placed, leftover) = first_fit(&items, n_cores, cfg.headroom);
    if leftover.is_empty() {
        let iso = isolated_from(&placed, n_cores);
        return (placed, iso);
    }
    let (mut placed, leftover) = first_fit(&items, n_cores, 1.0);
    let last = CoreId(n_cores as u32 - 1);
    for item in leftover {
        placed.insert(item.thread, last);
    }
    let iso = isolated_from(&placed, n_cores);
    (placed, iso)
}

/// Packs for the lowest level at which every thread fits under headroom,
/// with utilizations normalized to that level. Returns the reference level.
fn pack_lowest_level(
    demand: &BTreeMap<ThreadId, (f64, f64)>,
    n_cores: usize,
    levels: &LevelSet,
    cfg: &ControllerConfig,
) -> (BTreeMap<ThreadId, CoreId>, BTreeSet<CoreId>, FrequencyLevel) {
    let at_level = |f: FrequencyLevel| -> BTreeMap<ThreadId, ThreadStats> {
        demand
            .iter()
            .map(|(&t, &(ghz, mpki))| (t, normalized_stats(ghz / f.ghz(), mpki)))
            .collect()
    };
    for f in levels.iter() {
        let items = sorted_items(&at_level(f), cfg.mpki_hot);
        let (placed, leftover) = first_fit(&items, n_cores, cfg.headroom);
        if leftover.is_empty() {
            let iso = isolated_from(&placed, n_cores);
            return (placed, iso, f);
        }
    }
    let f = levels.max();
    let (placed, iso) = affinity_cluster(&at_level(f), n_cores, cfg);
    (placed, iso, f)
}

fn normalized_stats(utilization: f64, mpki: f64) -> ThreadStats {
    ThreadStats {
        utilization,
        ipc: 0.0,
        mpki,
        ctx_rate: 0.0,
        window_ns: 1,
        counters: Counters::default(),
        degenerate: false,
    }
}

fn planned_core(core: CoreId, utilization: f64) -> CoreStats {
    let mut s = CoreStats::empty(core, 1);
    s.utilization = utilization.min(1.0);
    s.clamped = utilization > 1.0;
    s
}

/// Static description of the host the controller drives.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSetup {
    pub n_cores: usize,
    pub levels: LevelSet,
    pub cfg: ControllerConfig,
    pub constraints: ConstraintConfig,
    pub kind: PolicyKind,
    /// Threads the controller may pin; everything else floats.
    pub ran_threads: BTreeSet<ThreadId>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    setup: ControllerSetup,
    last_change: Vec<Option<u64>>,
    frozen: Option<(BTreeMap<ThreadId, CoreId>, BTreeSet<CoreId>)>,
    violation_streak: u32,
    /// GHz lower bounds for threads that missed their deadline last window.
    demand_floor: BTreeMap<ThreadId, f64>,
    failsafe_count: u64,
    diagnostics: Vec<String>,
}

impl Controller {
    pub fn new(setup: ControllerSetup) -> Self {
        let n = setup.n_cores;
        Self {
            setup,
            last_change: vec![None; n],
            frozen: None,
            violation_streak: 0,
            demand_floor: BTreeMap::new(),
            failsafe_count: 0,
            diagnostics: Vec::new(),
        }
    }

    pub fn setup(&self) -> &ControllerSetup {
        &self.setup
    }

    pub fn kind(&self) -> PolicyKind {
        self.setup.kind
    }

    pub fn set_baseline_throughput(&mut self, bps: f64) {
        self.setup.constraints.baseline_throughput = bps;
    }

    pub fn failsafe_count(&self) -> u64 {
        self.failsafe_count
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// Peak frequency everywhere, nothing pinned, nothing parked.
    pub fn baseline_plan(&self) -> SchedulingPlan {
        SchedulingPlan::uniform(self.setup.n_cores, self.setup.levels.max())
    }

    pub fn initial_plan(&self) -> SchedulingPlan {
        self.baseline_plan()
    }

    fn dwell_age(&self, core: CoreId, now: u64) -> u64 {
        match self.last_change[core.index()] {
            Some(t) => now.saturating_sub(t),
            None => u64::MAX,
        }
    }

    fn ran_demand(&self, stats: &BTreeMap<ThreadId, ThreadStats>) -> (BTreeMap<ThreadId, (f64, f64)>, f64) {
        let mut ran = BTreeMap::new();
        let mut background = 0.0;
        for (t, s) in stats {
            if self.setup.ran_threads.contains(t) {
                let floor = self.demand_floor.get(t).copied().unwrap_or(0.0);
                ran.insert(*t, (s.demand_ghz().max(floor), s.mpki));
            } else {
                background += s.demand_ghz();
            }
        }
        for t in &self.setup.ran_threads {
            ran.entry(*t).or_insert((0.0, 0.0));
        }
        (ran, background)
    }

    fn packing(
        &self,
        demand: &BTreeMap<ThreadId, (f64, f64)>,
    ) -> (BTreeMap<ThreadId, CoreId>, BTreeSet<CoreId>, FrequencyLevel) {
        pack_lowest_level(demand, self.setup.n_cores, &self.setup.levels, &self.setup.cfg)
    }

    /// Keeps the current packing when it uses at most one core more than a
    /// fresh one and every core stays under headroom at the fresh reference
    /// level.
    fn keep_current_mapping(
        &self,
        current: &SchedulingPlan,
        demand: &BTreeMap<ThreadId, (f64, f64)>,
        fresh_isolated: &BTreeSet<CoreId>,
        f_ref: FrequencyLevel,
    ) -> bool {
        if !demand.keys().all(|t| current.affinity.contains_key(t)) {
            return false;
        }
        // one core of slack so jitter around a packing boundary does not
        // remap every window
        if current.isolated.len() + 1 < fresh_isolated.len() || current.isolated.len() > fresh_isolated.len() {
            return false;
        }
        let mut load = vec![0.0; self.setup.n_cores];
        for (t, &(ghz, _)) in demand {
            load[current.affinity[t].index()] += ghz;
        }
        load.iter()
            .all(|&l| l / f_ref.ghz() <= self.setup.cfg.headroom + FIT_EPS)
    }

    /// Policy decision for one window. The result always respects isolation
    /// and the per-core dwell guard; on an internal inconsistency the current
    /// plan is returned unchanged.
    pub fn decide(
        &mut self,
        stats: &BTreeMap<ThreadId, ThreadStats>,
        rollup: &BTreeMap<CoreId, CoreStats>,
        current: &SchedulingPlan,
        now: u64,
    ) -> SchedulingPlan {
        let candidate = self.policy_plan(stats, rollup, current, now);
        self.finalize(candidate, current, now)
    }

    fn policy_plan(
        &mut self,
        stats: &BTreeMap<ThreadId, ThreadStats>,
        rollup: &BTreeMap<CoreId, CoreStats>,
        current: &SchedulingPlan,
        now: u64,
    ) -> SchedulingPlan {
        let levels = &self.setup.levels;
        let cfg = self.setup.cfg;
        if now < cfg.warmup_slots {
            return self.baseline_plan();
        }
        match self.setup.kind {
            PolicyKind::Baseline => self.baseline_plan(),
            PolicyKind::StaticAffinity => {
                if self.frozen.is_none() {
                    let (demand, _) = self.ran_demand(stats);
                    let (placed, iso, _) = self.packing(&demand);
                    self.frozen = Some((placed, iso));
                }
                let (affinity, isolated) = self.frozen.clone().unwrap();
                SchedulingPlan {
                    affinity,
                    freq: vec![levels.max(); self.setup.n_cores],
                    isolated,
                }
            }
            PolicyKind::OnDemandFreq => {
                let freq = current
                    .cores()
                    .map(|c| {
                        let measured = rollup
                            .get(&c)
                            .copied()
                            .unwrap_or_else(|| CoreStats::empty(c, 1));
                        governor_step(&measured, current.freq_of(c), levels, &cfg, self.dwell_age(c, now))
                    })
                    .collect();
                SchedulingPlan {
                    affinity: BTreeMap::new(),
                    freq,
                    isolated: BTreeSet::new(),
                }
            }
            PolicyKind::Combined => {
                let (demand, background) = self.ran_demand(stats);
                let (placed, iso, f_ref) = self.packing(&demand);
                let (affinity, isolated) = if self.keep_current_mapping(current, &demand, &iso, f_ref) {
                    (current.affinity.clone(), current.isolated.clone())
                } else {
                    (placed, iso)
                };
                let n_active = (self.setup.n_cores - isolated.len()).max(1) as f64;
                let mut load = vec![background / n_active; self.setup.n_cores];
                for (t, &(ghz, _)) in &demand {
                    load[affinity[t].index()] += ghz;
                }
                let freq = current
                    .cores()
                    .map(|c| {
                        let f = current.freq_of(c);
                        if isolated.contains(&c) {
                            return f;
                        }
                        let planned = planned_core(c, load[c.index()] / f.ghz());
                        governor_step(&planned, f, levels, &cfg, self.dwell_age(c, now))
                    })
                    .collect();
                SchedulingPlan {
                    affinity,
                    freq,
                    isolated,
                }
            }
        }
    }

    fn finalize(&mut self, mut plan: SchedulingPlan, current: &SchedulingPlan, now: u64) -> SchedulingPlan {
        if plan.n_cores() != current.n_cores() {
            self.failsafe_count += 1;
            self.diagnostics.push(format!("slot {now}: plan core count mismatch"));
            return current.clone();
        }
        for c in current.cores() {
            let i = c.index();
            if plan.freq[i] != current.freq[i] {
                if self.dwell_age(c, now) < self.setup.cfg.min_dwell_slots {
                    plan.freq[i] = current.freq[i];
                } else {
                    self.last_change[i] = Some(now);
                }
            }
        }
        if let Err(e) = plan.validate() {
            self.failsafe_count += 1;
            self.diagnostics.push(format!("slot {now}: {e}"));
            return current.clone();
        }
        plan
    }

    /// Passes `candidate` through on a clean report; otherwise builds a
    /// recovery plan from `current`. Two violating windows in a row force
    /// the all-max plan until a clean window is seen.
    pub fn enforce_or_rollback(
        &mut self,
        candidate: SchedulingPlan,
        last_report: &ConstraintReport,
        current: &SchedulingPlan,
        rollup: &BTreeMap<CoreId, CoreStats>,
    ) -> SchedulingPlan {
        let violated = !last_report.latencies_ok() || !last_report.throughput_ok;
        if !violated {
            self.violation_streak = 0;
            return candidate;
        }
        // nothing is safer than the baseline; a violating baseline window
        // says nothing about the candidate
        if *current == self.baseline_plan() {
            self.violation_streak = 0;
            return candidate;
        }
        self.violation_streak += 1;
        if self.violation_streak >= 2 {
            return self.baseline_plan();
        }
        let mut plan = current.clone();
        for f in plan.freq.iter_mut() {
            *f = self.setup.levels.step_up(*f);
        }
        if let Some(&lifted) = plan.isolated.iter().next() {
            plan.isolated.remove(&lifted);
            let busiest = plan
                .active_cores()
                .filter(|c| *c != lifted)
                .max_by(|a, b| {
                    let ua = rollup.get(a).map_or(0.0, |s| s.utilization);
                    let ub = rollup.get(b).map_or(0.0, |s| s.utilization);
                    ua.total_cmp(&ub).then(b.cmp(a))
                });
            if let Some(busiest) = busiest {
                let mover = plan
                    .affinity
                    .iter()
                    .filter(|(_, c)| **c == busiest)
                    .map(|(t, _)| *t)
                    .next_back();
                if let Some(t) = mover {
                    plan.affinity.insert(t, lifted);
                }
            }
        }
        plan
    }

    /// Telemetry only sees served cycles, so a thread that misses its
    /// deadline under-reports its demand. Until it meets the deadline again
    /// its demand is taken as at least latency times its core frequency,
    /// which bounds the work it and its co-runners needed.
    fn update_demand_floor(&mut self, report: &ConstraintReport, current: &SchedulingPlan) {
        let tti = self.setup.constraints.tti;
        for (t, &lat) in &report.latency {
            if lat <= tti {
                self.demand_floor.remove(t);
                continue;
            }
            let f = current
                .affinity
                .get(t)
                .map_or(self.setup.levels.max(), |&c| current.freq_of(c));
            let floor = f.ghz() * lat / tti;
            let e = self.demand_floor.entry(*t).or_insert(0.0);
            *e = e.max(floor);
        }
    }

    /// Full per-window step: policy decision, constraint enforcement once a
    /// report is available, then dwell guard and validity checks.
    pub fn on_window(
        &mut self,
        now: u64,
        stats: &BTreeMap<ThreadId, ThreadStats>,
        rollup: &BTreeMap<CoreId, CoreStats>,
        current: &SchedulingPlan,
        report: Option<&ConstraintReport>,
    ) -> SchedulingPlan {
        if let Some(report) = report {
            self.update_demand_floor(report, current);
        }
        let mut plan = self.policy_plan(stats, rollup, current, now);
        if let (Some(report), true) = (report, now >= self.setup.cfg.warmup_slots) {
            plan = self.enforce_or_rollback(plan, report, current, rollup);
        }
        self.finalize(plan, current, now)
    }
}
