//! Exhaustive reference optimizer for small instances and the
//! oracle-versus-controller certification built on it.
//!
//! Candidate plans are judged by the simulator's jitter-free slot model.
//! With every thread pinned and a fresh state there are no migrations, so
//! each core's outcome depends only on its own thread set and frequency.
//! The search therefore evaluates each (thread set, level) pair once and
//! then walks the full plan space summing per-core terms.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, PolicyKind};
use crate::error::{Error, Result};
use crate::model::{core_power, CoreId, FrequencyLevel, LevelSet, PowerModelParams, SchedulingPlan, ThreadId};
use crate::sim::{run_scenario_with, RunOptions, ScenarioConfig, SimState, ThreadProfile};

pub const MAX_CORES: usize = 4;
pub const MAX_THREADS: usize = 5;
pub const MAX_LEVELS: usize = 4;

/// Energy ratio bound used by the certification summary.
pub const RATIO_BOUND: f64 = 1.15;
/// Share of feasible instances that must meet `RATIO_BOUND`.
pub const RATIO_QUORUM: f64 = 0.90;

const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleInstance {
    pub n_cores: usize,
    pub threads: Vec<ThreadProfile>,
    pub levels: LevelSet,
    pub power: PowerModelParams,
    /// Seconds.
    pub tti: f64,
    pub ctx_switch_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub plan: SchedulingPlan,
    /// Watts.
    pub energy: f64,
}

impl OracleInstance {
    /// Threads with the given per-slot cycle demands, ids 0.., no memory
    /// traffic.
    pub fn simple(n_cores: usize, cycles: &[u64], levels: LevelSet, power: PowerModelParams, tti: f64) -> Self {
        let threads = cycles
            .iter()
            .enumerate()
            .map(|(i, &c)| ThreadProfile {
                id: ThreadId(i as u32),
                cycles_per_slot: c,
                demand_jitter: 0.0,
                memory_intensity: 0.0,
                bits_per_slot: 1000,
                background: false,
            })
            .collect();
        Self {
            n_cores,
            threads,
            levels,
            power,
            tti,
            ctx_switch_cycles: 0,
        }
    }

    pub fn check_bounds(&self) -> Result<()> {
        let bad = |m: String| Err(Error::OracleBounds(m));
        if self.n_cores == 0 || self.n_cores > MAX_CORES {
            return bad(format!("n_cores {} outside 1..={MAX_CORES}", self.n_cores));
        }
        if self.threads.len() > MAX_THREADS {
            return bad(format!("{} threads, at most {MAX_THREADS}", self.threads.len()));
        }
        if self.levels.len() > MAX_LEVELS {
            return bad(format!("{} frequency levels, at most {MAX_LEVELS}", self.levels.len()));
        }
        if let Some(t) = self.threads.iter().find(|t| t.demand_jitter != 0.0) {
            return bad(format!("thread {} has nonzero demand jitter", t.id));
        }
        if let Some(t) = self.threads.iter().find(|t| t.background) {
            return bad(format!("thread {} is a background thread", t.id));
        }
        Ok(())
    }

    /// Scenario with the instance's physics and no switch, migration or
    /// background effects.
    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            name: "oracle".into(),
            n_cores: self.n_cores,
            threads: self.threads.clone(),
            tti: self.tti,
            freq_levels: self.levels.clone(),
            power: self.power,
            ctx_switch_cycles: self.ctx_switch_cycles,
            migration_penalty_cycles: 0,
            switch_latency: 0.0,
            switch_energy: 0.0,
            gnb_background: 0,
            duration_slots: 1,
            ..ScenarioConfig::default()
        }
    }

    /// Controller settings for the steady-state heuristic: one-slot
    /// cadence and dwell, no headroom, and a down threshold at the
    /// tightest adjacent level ratio so a step down never overshoots.
    pub fn heuristic_controller(&self) -> ControllerConfig {
        let min_ratio = self
            .levels
            .iter()
            .zip(self.levels.iter().skip(1))
            .map(|(lo, hi)| lo.ghz() / hi.ghz())
            .fold(1.0, f64::min);
        ControllerConfig {
            cadence_slots: 1,
            up_threshold: 1.0,
            down_threshold: (min_ratio * (1.0 - 1e-9)).min(1.0 - 1e-9),
            headroom: 1.0,
            min_dwell_slots: 1,
            mpki_hot: f64::INFINITY,
            warmup_slots: 1,
        }
    }
}

/// Evaluates `plan` with one jitter-free slot on a fresh simulator.
/// Returns the slot energy when every thread meets its deadline.
pub fn evaluate_plan(inst: &OracleInstance, plan: &SchedulingPlan) -> Result<Option<f64>> {
    let mut sim = SimState::new(inst.scenario())?.without_jitter();
    let out = sim.step_slot(plan)?;
    Ok(out.deadline_met.values().all(|&m| m).then_some(out.slot_power))
}

/// Utilization of a single core running `mask` at `level`, or `None` when a
/// deadline is missed.
fn core_outcome(inst: &OracleInstance, mask: usize, level: FrequencyLevel) -> Result<Option<f64>> {
    let mut cfg = inst.scenario();
    cfg.n_cores = 1;
    cfg.threads = inst
        .threads
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, t)| t.clone())
        .collect();
    let plan = SchedulingPlan {
        affinity: cfg.threads.iter().map(|t| (t.id, CoreId(0))).collect(),
        freq: vec![level],
        isolated: BTreeSet::new(),
    };
    let mut sim = SimState::new(cfg)?.without_jitter();
    let out = sim.step_slot(&plan)?;
    Ok(out.deadline_met.values().all(|&m| m).then_some(out.core_util[0]))
}

/// Exact minimizer over every total affinity map, isolation set and
/// frequency assignment. Isolated cores carry the lowest level. Ties on
/// energy go to fewer active cores, then to the first plan in enumeration
/// order: affinity (thread 0 most significant), isolation mask, then
/// frequencies (core 0 most significant).
pub fn brute_force_optimal(inst: &OracleInstance) -> Result<Option<OracleSolution>> {
    inst.check_bounds()?;
    let n = inst.n_cores;
    let m = inst.threads.len();
    let levels: Vec<FrequencyLevel> = inst.levels.iter().collect();
    let l = levels.len();

    // term[mask][level] = energy contribution of an active core, if feasible
    let mut term = vec![vec![None; l]; 1 << m];
    for (mask, row) in term.iter_mut().enumerate() {
        for (li, slot) in row.iter_mut().enumerate() {
            *slot = core_outcome(inst, mask, levels[li])?.map(|u| core_power(&inst.power, levels[li]) * u);
        }
    }

    // (energy, active cores, affinity, isolation mask, level per core)
    type Best = (f64, usize, Vec<usize>, usize, Vec<usize>);
    let mut best: Option<Best> = None;
    let mut assign = vec![0usize; m];
    for a in 0..n.pow(m as u32) {
        let mut rest = a;
        for slot in assign.iter_mut().rev() {
            *slot = rest % n;
            rest /= n;
        }
        let mut masks = vec![0usize; n];
        for (t, &c) in assign.iter().enumerate() {
            masks[c] |= 1 << t;
        }
        let used: usize = (0..n).filter(|&c| masks[c] != 0).fold(0, |acc, c| acc | (1 << c));
        for iso in 0..(1usize << n) {
            if iso & used != 0 {
                continue;
            }
            let active: Vec<usize> = (0..n).filter(|&c| iso & (1 << c) == 0).collect();
            let idle = (n - active.len()) as f64 * inst.power.p_idle;
            let mut freq = vec![0usize; n];
            for fcode in 0..l.pow(active.len() as u32) {
                let mut rest = fcode;
                for &c in active.iter().rev() {
                    freq[c] = rest % l;
                    rest /= l;
                }
                let mut energy = idle;
                let mut feasible = true;
                for &c in &active {
                    match term[masks[c]][freq[c]] {
                        Some(e) => energy += e,
                        None => {
                            feasible = false;
                            break;
                        }
                    }
                }
                if !feasible {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((e, act, ..)) => {
                        let eps = TIE_EPS * e.abs().max(1.0);
                        energy < e - eps || (energy <= e + eps && active.len() < *act)
                    }
                };
                if better {
                    best = Some((energy, active.len(), assign.clone(), iso, freq.clone()));
                }
            }
        }
    }

    Ok(best.map(|(energy, _, assign, iso, freq)| OracleSolution {
        plan: SchedulingPlan {
            affinity: inst
                .threads
                .iter()
                .zip(&assign)
                .map(|(t, &c)| (t.id, CoreId(c as u32)))
                .collect(),
            freq: freq.iter().map(|&i| levels[i]).collect(),
            isolated: (0..n).filter(|&c| iso & (1 << c) != 0).map(|c| CoreId(c as u32)).collect(),
        },
        energy,
    }))
}

/// Steady-state Combined plan: the controller runs closed loop on the
/// jitter-free simulator until its frequencies settle.
pub fn heuristic_plan(inst: &OracleInstance) -> Result<SchedulingPlan> {
    inst.check_bounds()?;
    let mut cfg = inst.scenario();
    cfg.controller = inst.heuristic_controller();
    cfg.duration_slots = 4 * inst.levels.len() as u64 + 8;
    let out = run_scenario_with(
        &cfg,
        PolicyKind::Combined,
        RunOptions {
            no_jitter: true,
            ..RunOptions::default()
        },
    )?;
    Ok(out.final_plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub instance: usize,
    pub n_cores: usize,
    pub n_threads: usize,
    pub oracle_energy: Option<f64>,
    pub heuristic_energy: Option<f64>,
    pub ratio: Option<f64>,
    pub feasibility_agrees: bool,
}

pub fn certify(index: usize, inst: &OracleInstance) -> Result<Certification> {
    let oracle = brute_force_optimal(inst)?.map(|s| s.energy);
    let heuristic = evaluate_plan(inst, &heuristic_plan(inst)?)?;
    let ratio = match (oracle, heuristic) {
        (Some(o), Some(h)) if o > 0.0 => Some(h / o),
        (Some(_), Some(h)) => Some(if h > 0.0 { f64::INFINITY } else { 1.0 }),
        _ => None,
    };
    Ok(Certification {
        instance: index,
        n_cores: inst.n_cores,
        n_threads: inst.threads.len(),
        oracle_energy: oracle,
        heuristic_energy: heuristic,
        ratio,
        feasibility_agrees: oracle.is_some() == heuristic.is_some(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificationSummary {
    pub instances: usize,
    pub feasible: usize,
    pub agreement: f64,
    pub within_bound: f64,
    pub pass: bool,
}

pub fn summarize(rows: &[Certification]) -> CertificationSummary {
    let agree = rows.iter().filter(|r| r.feasibility_agrees).count();
    let feasible: Vec<&Certification> = rows.iter().filter(|r| r.oracle_energy.is_some()).collect();
    let within = feasible
        .iter()
        .filter(|r| r.ratio.is_some_and(|x| x <= RATIO_BOUND))
        .count();
    let agreement = if rows.is_empty() { 1.0 } else { agree as f64 / rows.len() as f64 };
    let within_bound = if feasible.is_empty() {
        1.0
    } else {
        within as f64 / feasible.len() as f64
    };
    CertificationSummary {
        instances: rows.len(),
        feasible: feasible.len(),
        agreement,
        within_bound,
        pass: agree == rows.len() && within_bound >= RATIO_QUORUM,
    }
}

/// Shape of randomly drawn certification instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSpec {
    /// Cores are drawn from `2..=max_cores`.
    pub max_cores: usize,
    /// Threads are drawn from `2..=max_threads`.
    pub max_threads: usize,
    pub levels: usize,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            max_cores: 3,
            max_threads: 4,
            levels: 3,
        }
    }
}

impl InstanceSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: usize, max: usize| {
            if (2..=max).contains(&v) {
                Ok(())
            } else {
                Err(Error::OracleBounds(format!("{name} = {v} outside 2..={max}")))
            }
        };
        check("max_cores", self.max_cores, MAX_CORES)?;
        check("max_threads", self.max_threads, MAX_THREADS)?;
        check("levels", self.levels, MAX_LEVELS)
    }
}

/// Random certification instance with geometric levels and a dominant
/// dynamic power term. About one in ten instances carries a thread no
/// level can serve.
pub fn random_instance(rng: &mut impl Rng, spec: &InstanceSpec) -> OracleInstance {
    let n_cores = rng.random_range(2..=spec.max_cores);
    let n_threads = rng.random_range(2..=spec.max_threads);
    let f_min = rng.random_range(1.0..1.5);
    let ratio: f64 = rng.random_range(1.25..1.6);
    let levels = LevelSet::new((0..spec.levels).map(|i| f_min * ratio.powi(i as i32)).collect())
        .expect("increasing levels");
    let power = PowerModelParams {
        p_static: rng.random_range(0.5..2.0),
        k_dyn: rng.random_range(1.0..3.0),
        p_idle: 0.0,
    };
    let tti = 1e-3;
    let cap = levels.max().ghz() * 1e9 * tti;
    let mut cycles: Vec<u64> = (0..n_threads)
        .map(|_| (rng.random_range(0.05..0.8) * cap) as u64)
        .collect();
    if rng.random_bool(0.1) {
        cycles[0] = (1.05 * cap) as u64;
    }
    OracleInstance::simple(n_cores, &cycles, levels, power, tti)
}

/// Certifies `n` instances drawn from `seed`. Instances are generated
/// sequentially and evaluated in parallel; output order is by index.
pub fn certify_batch(n: usize, seed: u64, spec: &InstanceSpec) -> Result<Vec<Certification>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<OracleInstance> = (0..n).map(|_| random_instance(&mut rng, spec)).collect();
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| certify(i, inst))
        .collect()
}

/// Thread-id permutation applied to an instance.
pub fn relabel(inst: &OracleInstance, perm: &[u32]) -> OracleInstance {
    let mut out = inst.clone();
    let ids: BTreeMap<ThreadId, ThreadId> = inst
        .threads
        .iter()
        .zip(perm)
        .map(|(t, &p)| (t.id, ThreadId(p)))
        .collect();
    for t in &mut out.threads {
        t.id = ids[&t.id];
    }
    out.threads.sort_by_key(|t| t.id);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PowerModelParams {
        PowerModelParams {
            p_static: 1.0,
            k_dyn: 2.0,
            p_idle: 0.0,
        }
    }

    #[test]
    fn single_thread_takes_lowest_feasible_level() {
        let levels = LevelSet::new(vec![1.0, 2.0, 3.0]).unwrap();
        let inst = OracleInstance::simple(1, &[1_000_000], levels, params(), 1e-3);
        let sol = brute_force_optimal(&inst).unwrap().unwrap();
        assert_eq!(sol.plan.freq, vec![FrequencyLevel(1.0)]);
        let expected = core_power(&params(), FrequencyLevel(1.0)) * 1.0;
        assert!((sol.energy - expected).abs() < 1e-9);
    }

    #[test]
    fn over_capacity_thread_is_infeasible() {
        let levels = LevelSet::new(vec![1.0, 2.0]).unwrap();
        let inst = OracleInstance::simple(2, &[2_000_001], levels, params(), 1e-3);
        assert_eq!(brute_force_optimal(&inst).unwrap(), None);
    }

    #[test]
    fn two_threads_spread_at_lowest_level() {
        let levels = LevelSet::new(vec![1.0, 2.0, 3.0]).unwrap();
        let inst = OracleInstance::simple(2, &[600_000, 600_000], levels, params(), 1e-3);
        let sol = brute_force_optimal(&inst).unwrap().unwrap();
        assert_eq!(sol.plan.freq, vec![FrequencyLevel(1.0); 2]);
        assert!(sol.plan.isolated.is_empty());
        assert_ne!(sol.plan.affinity[&ThreadId(0)], sol.plan.affinity[&ThreadId(1)]);
        // both on one core need 2 GHz: (1 + 8) * 0.6 = 5.4 W;
        // spread at 1 GHz: 2 * (1 + 2) * 0.6 = 3.6 W
        assert!((sol.energy - 3.6).abs() < 1e-9);
    }

    #[test]
    fn optimum_replays_in_full_simulator() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, &InstanceSpec::default());
            if let Some(sol) = brute_force_optimal(&inst).unwrap() {
                let e = evaluate_plan(&inst, &sol.plan).unwrap().unwrap();
                assert!((e - sol.energy).abs() < 1e-9 * e.max(1.0));
            }
        }
    }

    #[test]
    fn bounds_are_enforced() {
        let levels = LevelSet::new(vec![1.0, 2.0]).unwrap();
        let inst = OracleInstance::simple(5, &[1], levels.clone(), params(), 1e-3);
        assert!(matches!(brute_force_optimal(&inst), Err(Error::OracleBounds(_))));
        let inst = OracleInstance::simple(2, &[1; 6], levels.clone(), params(), 1e-3);
        assert!(matches!(brute_force_optimal(&inst), Err(Error::OracleBounds(_))));
        let mut inst = OracleInstance::simple(2, &[1], levels, params(), 1e-3);
        inst.threads[0].demand_jitter = 0.1;
        assert!(matches!(brute_force_optimal(&inst), Err(Error::OracleBounds(_))));
        let many = LevelSet::new(vec![1.0, 1.5, 2.0, 2.5, 3.0]).unwrap();
        let inst = OracleInstance::simple(2, &[1], many, params(), 1e-3);
        assert!(matches!(brute_force_optimal(&inst), Err(Error::OracleBounds(_))));
    }

    #[test]
    fn largest_instance_runs() {
        let levels = LevelSet::new(vec![1.0, 1.5, 2.0, 2.5]).unwrap();
        let inst = OracleInstance::simple(4, &[900_000, 700_000, 500_000, 300_000, 100_000], levels, params(), 1e-3);
        let sol = brute_force_optimal(&inst).unwrap().unwrap();
        assert_eq!(sol.plan.affinity.len(), 5);
    }

    #[test]
    fn heuristic_feasible_on_easy_instance() {
        let levels = LevelSet::new(vec![1.2, 1.8, 2.7]).unwrap();
        let inst = OracleInstance::simple(3, &[600_000, 500_000, 400_000, 300_000], levels, params(), 1e-3);
        let plan = heuristic_plan(&inst).unwrap();
        let h = evaluate_plan(&inst, &plan).unwrap().expect("feasible");
        let o = brute_force_optimal(&inst).unwrap().unwrap().energy;
        assert!(h <= 1.15 * o, "heuristic {h} oracle {o}");
    }
}
