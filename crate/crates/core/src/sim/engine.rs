//! Slot-level execution model of a multicore host.
//!
//! Each slot, every thread draws a cycle demand, is placed on a core (pinned
//! by the plan, or balanced onto the least-loaded active core when floating),
//! and the cores are shared round-robin with a fine quantum, i.e. processor
//! sharing. Overheads that turn into cycles:
//!
//! * miss stalls: `misses * stall_cycles_per_miss`, where the miss rate grows
//!   with memory intensity and is boosted for a few slots after a migration;
//! * `migration_penalty_cycles` once per core change;
//! * `ctx_switch_cycles` for every thread preempted beyond the first on a core.
//!
//! Switches (preemptions plus incoming migrations) are bounded per core per
//! slot by `tti / sched_granularity`. Once a core's budget is spent, the
//! balancer stops moving threads onto it and further co-runners are batched
//! without an extra switch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{plan_energy, CoreId, FrequencyLevel, SchedulingPlan, ThreadId};
use crate::sim::config::ScenarioConfig;
use crate::telemetry::TelemetryRecord;

/// Jitter draws are truncated to this many standard deviations.
const JITTER_CLAMP_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub slot: u64,
    /// Seconds from slot start; greater than the TTI when unfinished.
    pub completion: BTreeMap<ThreadId, f64>,
    pub deadline_met: BTreeMap<ThreadId, bool>,
    pub bits_delivered: u64,
    /// Watts.
    pub slot_power: f64,
    pub transitions: u32,
    /// Realized busy fraction per core, before clamping.
    pub core_util: Vec<f64>,
    pub cycles_demanded: u64,
    pub cycles_served: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ThreadSlot {
    core: Option<CoreId>,
    cycles: u64,
    instructions: u64,
    misses: u64,
    ctx_switches: u64,
    runtime_ns: u64,
}

#[derive(Debug, Clone)]
pub struct SimState {
    cfg: ScenarioConfig,
    index: BTreeMap<ThreadId, usize>,
    slot: u64,
    demand_rng: ChaCha8Rng,
    place_rng: ChaCha8Rng,
    applied_freq: Option<Vec<FrequencyLevel>>,
    last_core: Vec<Option<CoreId>>,
    since_migration: Vec<Option<u32>>,
    last: Vec<ThreadSlot>,
    jitter: bool,
}

impl SimState {
    /// `cfg.threads` must already include any background threads.
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.threads.len();
        let index = cfg.threads.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
        let demand_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let place_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Self {
            cfg,
            index,
            slot: 0,
            demand_rng,
            place_rng,
            applied_freq: None,
            last_core: vec![None; n],
            since_migration: vec![None; n],
            last: vec![ThreadSlot::default(); n],
            jitter: true,
        })
    }

    /// Same state with demand jitter disabled (deterministic demand).
    pub fn without_jitter(mut self) -> Self {
        self.jitter = false;
        self
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    /// Number of slots executed so far.
    pub fn slot(&self) -> u64 {
        self.slot
    }

    /// Core each thread ran on in the last executed slot.
    pub fn placement(&self) -> BTreeMap<ThreadId, Option<CoreId>> {
        self.cfg
            .threads
            .iter()
            .zip(&self.last)
            .map(|(t, s)| (t.id, s.core))
            .collect()
    }

    fn check_plan(&self, plan: &SchedulingPlan) -> Result<()> {
        plan.validate()?;
        if plan.n_cores() != self.cfg.n_cores {
            return Err(Error::InvalidPlan(format!(
                "plan covers {} cores, host has {}",
                plan.n_cores(),
                self.cfg.n_cores
            )));
        }
        if let Some(f) = plan.freq.iter().find(|f| !self.cfg.freq_levels.contains(**f)) {
            return Err(Error::InvalidPlan(format!("frequency {f} GHz not in level set")));
        }
        if let Some(t) = plan.affinity.keys().find(|t| !self.index.contains_key(t)) {
            return Err(Error::InvalidPlan(format!("plan pins unknown thread {t}")));
        }
        Ok(())
    }

    fn draw_demand(&mut self, base: u64, jitter: f64) -> u64 {
        // one draw per thread per slot, independent of the plan
        let z: f64 = self.demand_rng.sample(StandardNormal);
        if !self.jitter || jitter == 0.0 {
            return base;
        }
        let z = z.clamp(-JITTER_CLAMP_SIGMA, JITTER_CLAMP_SIGMA);
        (base as f64 * (1.0 + jitter * z)).round().max(0.0) as u64
    }

    fn boost(&self, since: Option<u32>) -> f64 {
        let b = self.cfg.migration_mpki_boost;
        match since {
            Some(s) if b.decay_slots > 0 && s < b.decay_slots => {
                1.0 + (b.factor - 1.0) * (1.0 - s as f64 / b.decay_slots as f64)
            }
            _ => 1.0,
        }
    }

    /// Executes one slot under `plan`.
    pub fn step_slot(&mut self, plan: &SchedulingPlan) -> Result<SlotOutcome> {
        self.check_plan(plan)?;
        let n_cores = self.cfg.n_cores;
        let n_threads = self.cfg.threads.len();
        let tti_ns = self.cfg.tti_ns();

        let active: Vec<CoreId> = plan.active_cores().collect();

        let mut transitions = 0u32;
        let mut stall_ns = vec![0u64; n_cores];
        let switch_ns = (self.cfg.switch_latency * 1e9).round() as u64;
        if let Some(prev) = &self.applied_freq {
            for (c, (old, new)) in prev.iter().zip(&plan.freq).enumerate() {
                if old != new {
                    transitions += 1;
                    stall_ns[c] = switch_ns;
                }
            }
        }
        self.applied_freq = Some(plan.freq.clone());

        let demand: Vec<u64> = (0..n_threads)
            .map(|i| {
                let t = &self.cfg.threads[i];
                let (base, jitter) = (t.cycles_per_slot, t.demand_jitter);
                self.draw_demand(base, jitter)
            })
            .collect();

        if active.is_empty() && demand.iter().any(|&d| d > 0) {
            return Err(Error::InvalidPlan("no active core for runnable threads".into()));
        }

        let budget_per_core = if self.cfg.sched_granularity > 0.0 {
            (self.cfg.tti / self.cfg.sched_granularity).floor() as u32
        } else {
            u32::MAX
        };
        let mut budget = vec![budget_per_core; n_cores];
        let mut load = vec![0.0f64; n_cores];
        let mut core_of: Vec<Option<CoreId>> = vec![None; n_threads];
        let mut migrated = vec![false; n_threads];

        // pinned threads
        for (i, t) in self.cfg.threads.iter().enumerate() {
            let Some(&core) = plan.affinity.get(&t.id) else {
                continue;
            };
            if demand[i] == 0 {
                core_of[i] = Some(core);
                continue;
            }
            if self.last_core[i].is_some_and(|p| p != core) {
                migrated[i] = true;
                budget[core.index()] = budget[core.index()].saturating_sub(1);
            }
            core_of[i] = Some(core);
            load[core.index()] += demand[i] as f64;
        }

        // floating threads, largest first onto the least-loaded core; equal
        // loads are broken by a fresh random core order each slot
        let mut floating: Vec<usize> = (0..n_threads)
            .filter(|&i| !plan.affinity.contains_key(&self.cfg.threads[i].id) && demand[i] > 0)
            .collect();
        floating.sort_by_key(|&i| (std::cmp::Reverse(demand[i]), self.cfg.threads[i].id));
        let mut rank: Vec<usize> = (0..n_cores).collect();
        rank.shuffle(&mut self.place_rng);
        for &i in &floating {
            let d = demand[i] as f64;
            let ghz = |c: CoreId| plan.freq_of(c).ghz();
            let mut target = *active
                .iter()
                .min_by(|&&a, &&b| {
                    let la = (load[a.index()] + d) / ghz(a);
                    let lb = (load[b.index()] + d) / ghz(b);
                    la.total_cmp(&lb).then(rank[a.index()].cmp(&rank[b.index()]))
                })
                .expect("active cores checked above");
            match self.last_core[i] {
                Some(prev) if prev == target => {}
                Some(prev) if !plan.is_isolated(prev) => {
                    if budget[target.index()] > 0 {
                        budget[target.index()] -= 1;
                        migrated[i] = true;
                    } else {
                        target = prev;
                    }
                }
                Some(_) => {
                    budget[target.index()] = budget[target.index()].saturating_sub(1);
                    migrated[i] = true;
                }
                None => {}
            }
            core_of[i] = Some(target);
            load[target.index()] += d;
        }

        // idle threads keep their last known core
        for (slot, last) in core_of.iter_mut().zip(&self.last_core) {
            if slot.is_none() {
                *slot = *last;
            }
        }

        // per-thread cycle demand including overheads
        let mut work = vec![ThreadSlot::default(); n_threads];
        let mut total = vec![0u64; n_threads];
        for i in 0..n_threads {
            self.since_migration[i] = if migrated[i] {
                Some(0)
            } else {
                self.since_migration[i].map(|s| s.saturating_add(1))
            };
            if demand[i] == 0 {
                continue;
            }
            let t = &self.cfg.threads[i];
            let ipc = self.cfg.peak_ipc * (1.0 - 0.5 * t.memory_intensity);
            let instructions = (demand[i] as f64 * ipc).round() as u64;
            let mpki = t.memory_intensity * self.cfg.base_mpki * self.boost(self.since_migration[i]);
            let misses = (mpki * instructions as f64 / 1000.0).round() as u64;
            let mut cycles = demand[i] + misses * self.cfg.stall_cycles_per_miss;
            if migrated[i] {
                cycles += self.cfg.migration_penalty_cycles;
            }
            work[i] = ThreadSlot {
                core: core_of[i],
                cycles: 0,
                instructions,
                misses,
                ctx_switches: migrated[i] as u64,
                runtime_ns: 0,
            };
            total[i] = cycles;
        }

        // preemptions, charged in ThreadId order within each core
        let mut on_core: Vec<Vec<usize>> = vec![Vec::new(); n_cores];
        for i in 0..n_threads {
            if demand[i] > 0 {
                if let Some(c) = core_of[i] {
                    on_core[c.index()].push(i);
                }
            }
        }
        for (c, members) in on_core.iter_mut().enumerate() {
            members.sort_by_key(|&i| self.cfg.threads[i].id);
            for &i in members.iter().skip(1) {
                if budget[c] == 0 {
                    break;
                }
                budget[c] -= 1;
                work[i].ctx_switches += 1;
                total[i] += self.cfg.ctx_switch_cycles;
            }
        }

        // processor sharing per core
        let mut completion = vec![0.0f64; n_threads];
        let mut served = vec![0u64; n_threads];
        let mut core_busy_ns = vec![0u64; n_cores];
        for (c, members) in on_core.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let ghz = plan.freq[c].ghz();
            let stall = stall_ns[c] as f64;
            let capacity = ghz * (tti_ns as f64 - stall);
            let mut order = members.clone();
            order.sort_by_key(|&i| (total[i], self.cfg.threads[i].id));
            let n = order.len();
            let mut consumed = 0.0f64;
            let mut level = 0.0f64;
            let mut cap_level: Option<f64> = None;
            for (k, &i) in order.iter().enumerate() {
                let remaining = (n - k) as f64;
                let step = total[i] as f64 - level;
                if cap_level.is_none() && consumed + step * remaining > capacity {
                    cap_level = Some(level + (capacity - consumed).max(0.0) / remaining);
                }
                consumed += step * remaining;
                level = total[i] as f64;
                completion[i] = (stall + consumed / ghz) * 1e-9;
                served[i] = match cap_level {
                    Some(l) => (l.floor() as u64).min(total[i]),
                    None => total[i],
                };
            }
            for &i in members {
                let runtime = ((served[i] as f64 / ghz).round() as u64).min(tti_ns);
                work[i].runtime_ns = runtime;
                work[i].cycles = served[i];
                if served[i] < total[i] && total[i] > 0 {
                    let frac = served[i] as f64 / total[i] as f64;
                    work[i].instructions = (work[i].instructions as f64 * frac).floor() as u64;
                    work[i].misses = (work[i].misses as f64 * frac).floor() as u64;
                }
                core_busy_ns[c] += runtime;
            }
        }

        let tti = self.cfg.tti;
        let mut out_completion = BTreeMap::new();
        let mut deadline_met = BTreeMap::new();
        let mut bits = 0u64;
        for (i, t) in self.cfg.threads.iter().enumerate() {
            let met = served[i] == total[i] && completion[i] <= tti + 1e-15;
            out_completion.insert(t.id, completion[i]);
            deadline_met.insert(t.id, met);
            if met && total[i] > 0 {
                bits += t.bits_per_slot;
            }
        }

        let core_util: Vec<f64> = core_busy_ns.iter().map(|&b| b as f64 / tti_ns as f64).collect();
        let util_map: BTreeMap<CoreId, f64> = core_util
            .iter()
            .enumerate()
            .map(|(c, &u)| (CoreId(c as u32), u.min(1.0)))
            .collect();
        let slot_power = plan_energy(&self.cfg.power, plan, &util_map)?
            + self.cfg.switch_energy * transitions as f64 / tti;

        for i in 0..n_threads {
            if demand[i] > 0 {
                self.last_core[i] = core_of[i];
            } else {
                work[i] = ThreadSlot {
                    core: core_of[i],
                    ..ThreadSlot::default()
                };
            }
        }
        self.last = work;
        let outcome = SlotOutcome {
            slot: self.slot,
            completion: out_completion,
            deadline_met,
            bits_delivered: bits,
            slot_power,
            transitions,
            core_util,
            cycles_demanded: total.iter().sum(),
            cycles_served: served.iter().sum(),
        };
        self.slot += 1;
        Ok(outcome)
    }

    /// Counter records of the last executed slot, one per thread.
    pub fn emit_telemetry(&self) -> Vec<TelemetryRecord> {
        if self.slot == 0 {
            return Vec::new();
        }
        let ts_ns = self.slot * self.cfg.tti_ns();
        self.cfg
            .threads
            .iter()
            .zip(&self.last)
            .map(|(t, s)| TelemetryRecord {
                ts_ns,
                thread: t.id,
                core: s.core.unwrap_or(CoreId(0)),
                cycles: s.cycles,
                instructions: s.instructions,
                llc_misses: s.misses,
                ctx_switches: s.ctx_switches,
                runtime_ns: s.runtime_ns,
            })
            .collect()
    }
}
