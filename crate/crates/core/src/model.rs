//! Power model, energy objective and constraint predicates.
//!
//! Everything here is a pure function of its inputs. Per-core power follows
//! `P(f) = p_static + k_dyn * f^2` with `f` in GHz; the plan energy weights
//! each active core's power by its utilization and charges `p_idle` for every
//! isolated (parked) core.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ThreadId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoreId(pub u32);

impl fmt::Display for ThreadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl CoreId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModelParams {
    /// Static power per active core, watts.
    pub p_static: f64,
    /// Dynamic coefficient, watts per GHz².
    pub k_dyn: f64,
    /// Power drawn by an isolated core, watts.
    pub p_idle: f64,
}

impl PowerModelParams {
    pub fn new(p_static: f64, k_dyn: f64, p_idle: f64) -> Result<Self> {
        let p = Self {
            p_static,
            k_dyn,
            p_idle,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_dyn > 0.0) {
            return Err(Error::Config(format!("k_dyn must be > 0, got {}", self.k_dyn)));
        }
        if !(self.p_idle >= 0.0 && self.p_static >= self.p_idle) {
            return Err(Error::Config(format!(
                "need p_static >= p_idle >= 0, got p_static={} p_idle={}",
                self.p_static, self.p_idle
            )));
        }
        Ok(())
    }
}

/// Operating frequency of a core in GHz.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct FrequencyLevel(pub f64);

impl FrequencyLevel {
    pub fn ghz(self) -> f64 {
        self.0
    }
}

impl fmt::Display for FrequencyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Finite, strictly increasing set of selectable frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSet {
    levels: Vec<f64>,
}

impl LevelSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("frequency level set is empty".into()));
        }
        if levels.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Config("frequency levels must be positive".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("frequency levels must be strictly increasing".into()));
        }
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn min(&self) -> FrequencyLevel {
        FrequencyLevel(self.levels[0])
    }

    pub fn max(&self) -> FrequencyLevel {
        FrequencyLevel(*self.levels.last().unwrap())
    }

    pub fn get(&self, index: usize) -> FrequencyLevel {
        FrequencyLevel(self.levels[index])
    }

    pub fn iter(&self) -> impl Iterator<Item = FrequencyLevel> + '_ {
        self.levels.iter().map(|&l| FrequencyLevel(l))
    }

    pub fn index_of(&self, f: FrequencyLevel) -> Option<usize> {
        self.levels.iter().position(|&l| l == f.0)
    }

    pub fn contains(&self, f: FrequencyLevel) -> bool {
        self.index_of(f).is_some()
    }

    /// Next level up, saturating at the maximum.
    pub fn step_up(&self, f: FrequencyLevel) -> FrequencyLevel {
        match self.index_of(f) {
            Some(i) => self.get((i + 1).min(self.levels.len() - 1)),
            None => self.nearest_at_or_above(f),
        }
    }

    /// Next level down, saturating at the minimum.
    pub fn step_down(&self, f: FrequencyLevel) -> FrequencyLevel {
        match self.index_of(f) {
            Some(i) => self.get(i.saturating_sub(1)),
            None => self.min(),
        }
    }

    fn nearest_at_or_above(&self, f: FrequencyLevel) -> FrequencyLevel {
        self.iter().find(|l| l.0 >= f.0).unwrap_or(self.max())
    }
}

/// Control variables of one decision: thread placement, per-core frequency
/// and the set of parked cores.
///
/// Threads absent from `affinity` float: the host scheduler places them on
/// any non-isolated core each slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulingPlan {
    pub affinity: BTreeMap<ThreadId, CoreId>,
    pub freq: Vec<FrequencyLevel>,
    pub isolated: BTreeSet<CoreId>,
}

impl SchedulingPlan {
    /// All cores at `f`, nothing pinned, nothing isolated.
    pub fn uniform(n_cores: usize, f: FrequencyLevel) -> Self {
        Self {
            affinity: BTreeMap::new(),
            freq: vec![f; n_cores],
            isolated: BTreeSet::new(),
        }
    }

    pub fn n_cores(&self) -> usize {
        self.freq.len()
    }

    pub fn cores(&self) -> impl Iterator<Item = CoreId> {
        (0..self.freq.len() as u32).map(CoreId)
    }

    pub fn active_cores(&self) -> impl Iterator<Item = CoreId> + '_ {
        self.cores().filter(move |c| !self.isolated.contains(c))
    }

    pub fn is_isolated(&self, core: CoreId) -> bool {
        self.isolated.contains(&core)
    }

    pub fn freq_of(&self, core: CoreId) -> FrequencyLevel {
        self.freq[core.index()]
    }

    /// Structural validity: cores in range and no thread pinned to a parked core.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_cores() as u32;
        if n == 0 {
            return Err(Error::InvalidPlan("plan has no cores".into()));
        }
        if let Some(c) = self.isolated.iter().find(|c| c.0 >= n) {
            return Err(Error::InvalidPlan(format!("isolated core {c} out of range")));
        }
        for (&thread, &core) in &self.affinity {
            if core.0 >= n {
                return Err(Error::InvalidPlan(format!("{thread} mapped to missing core {core}")));
            }
            if self.isolated.contains(&core) {
                return Err(Error::IsolatedTarget { thread, core });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    /// Slot deadline, seconds.
    pub tti: f64,
    /// Allowed fractional throughput deviation.
    pub delta: f64,
    /// Reference throughput, bits/s.
    pub baseline_throughput: f64,
    /// Residency time, seconds.
    pub residency: f64,
    /// Wakeup time, seconds.
    pub wakeup: f64,
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tti > 0.0) {
            return Err(Error::Config("tti must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta must be in [0,1), got {}", self.delta)));
        }
        if !(self.residency >= 0.0 && self.wakeup >= 0.0) {
            return Err(Error::Config("residency and wakeup must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// Worst completion time per thread, seconds.
    pub latency: BTreeMap<ThreadId, f64>,
    pub latency_ok: BTreeMap<ThreadId, bool>,
    pub throughput_ok: bool,
    pub isolation_ok: bool,
    /// Seconds.
    pub worst_latency: f64,
    pub throughput_deviation: f64,
    pub diagnostics: Vec<String>,
}

impl ConstraintReport {
    pub fn latencies_ok(&self) -> bool {
        self.latency_ok.values().all(|&ok| ok)
    }

    pub fn feasible(&self) -> bool {
        self.latencies_ok() && self.throughput_ok && self.isolation_ok
    }
}

pub fn core_power(params: &PowerModelParams, f: FrequencyLevel) -> f64 {
    params.p_static + params.k_dyn * f.0 * f.0
}

/// Utilization-weighted power of the active cores plus idle power of the
/// isolated ones.
pub fn plan_energy(
    params: &PowerModelParams,
    plan: &SchedulingPlan,
    util: &BTreeMap<CoreId, f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for core in plan.cores() {
        if plan.is_isolated(core) {
            total += params.p_idle;
            continue;
        }
        let u = *util
            .get(&core)
            .ok_or_else(|| Error::MalformedInput(format!("no utilization for active core {core}")))?;
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::MalformedInput(format!("utilization {u} of {core} outside [0,1]")));
        }
        total += core_power(params, plan.freq_of(core)) * u;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerFit {
    pub params: PowerModelParams,
    /// Residual sum of squares, W².
    pub residual: f64,
}

/// Ordinary least squares of `P = p_static + k_dyn * f^2` on the `f^2` feature.
pub fn fit_power_model(samples: &[(FrequencyLevel, f64)], p_idle: f64) -> Result<PowerFit> {
    let mut distinct: Vec<f64> = samples.iter().map(|(f, _)| f.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::UnderdeterminedFit(distinct.len()));
    }
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|(f, _)| f.0 * f.0).collect();
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = samples.iter().map(|(_, p)| p).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, (_, y)) in xs.iter().zip(samples) {
        sxy += (x - x_mean) * (y - y_mean);
        sxx += (x - x_mean) * (x - x_mean);
    }
    let k_dyn = sxy / sxx;
    if !(k_dyn > 0.0) {
        return Err(Error::NonPhysicalFit(k_dyn));
    }
    let p_static = y_mean - k_dyn * x_mean;
    let residual = xs
        .iter()
        .zip(samples)
        .map(|(x, (_, y))| {
            let r = y - (p_static + k_dyn * x);
            r * r
        })
        .sum();
    Ok(PowerFit {
        params: PowerModelParams {
            p_static,
            k_dyn,
            p_idle,
        },
        residual,
    })
}

/// Evaluates deadline, throughput and isolation constraints. Bounds are
/// inclusive.
pub fn check_constraints(
    cfg: &ConstraintConfig,
    plan: &SchedulingPlan,
    latencies: &BTreeMap<ThreadId, f64>,
    measured_throughput: f64,
) -> ConstraintReport {
    let mut diagnostics = Vec::new();
    let mut latency_ok = BTreeMap::new();
    let mut worst_latency = 0.0f64;
    for (&thread, &lat) in latencies {
        latency_ok.insert(thread, lat <= cfg.tti);
        worst_latency = worst_latency.max(lat);
    }
    for thread in plan.affinity.keys() {
        if !latencies.contains_key(thread) {
            diagnostics.push(format!("no latency sample for {thread}"));
            latency_ok.insert(*thread, false);
        }
    }

    let deviation = (measured_throughput - cfg.baseline_throughput).abs();
    let throughput_ok = deviation <= cfg.delta * cfg.baseline_throughput;
    let throughput_deviation = if cfg.baseline_throughput > 0.0 {
        deviation / cfg.baseline_throughput
    } else {
        0.0
    };

    let isolation_ok = match plan.validate() {
        Ok(()) => true,
        Err(e) => {
            diagnostics.push(e.to_string());
            false
        }
    };

    ConstraintReport {
        latency: latencies.clone(),
        latency_ok,
        throughput_ok,
        isolation_ok,
        worst_latency,
        throughput_deviation,
        diagnostics,
    }
}

/// A power-state transition is usable only if both its residency and wakeup
/// times fit strictly inside one slot.
pub fn dwell_feasible(cfg: &ConstraintConfig) -> bool {
    cfg.residency.max(cfg.wakeup) < cfg.tti
}
