//! Scenario description and its flat key-value file format.
//!
//! ```text
//! # comment
//! n_cores = 8
//! freq_levels = 1.2, 1.5, 1.8
//! power.k_dyn = 1.9
//! thread.0.cycles_per_slot = 400000
//! ```
//!
//! Keys mirror the `ScenarioConfig` field names; thread profiles are indexed
//! groups `thread.<i>.<field>`. Omitted keys take the defaults of
//! [`ScenarioConfig::default`].

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::model::{ConstraintConfig, LevelSet, PowerModelParams, ThreadId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadProfile {
    pub id: ThreadId,
    /// Compute cycles needed per slot before stalls and overheads.
    pub cycles_per_slot: u64,
    /// Relative standard deviation of the per-slot demand.
    pub demand_jitter: f64,
    /// 0 = cache resident, 1 = streaming.
    pub memory_intensity: f64,
    /// Bits delivered when the slot deadline is met.
    pub bits_per_slot: u64,
    /// Noisy-neighbor thread: never pinned by the controller.
    pub background: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationBoost {
    /// Miss-rate multiplier right after a migration.
    pub factor: f64,
    /// Slots over which the multiplier decays linearly back to 1.
    pub decay_slots: u32,
}

/// Per-gNB group of background threads added by `inject_background`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundTemplate {
    pub threads_per_gnb: u32,
    pub cycles_per_slot: u64,
    pub demand_jitter: f64,
    pub memory_intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub n_cores: usize,
    pub threads: Vec<ThreadProfile>,
    /// Seconds.
    pub tti: f64,
    pub freq_levels: LevelSet,
    pub power: PowerModelParams,
    pub ctx_switch_cycles: u64,
    pub migration_penalty_cycles: u64,
    pub migration_mpki_boost: MigrationBoost,
    /// Seconds a core stalls after a frequency change.
    pub switch_latency: f64,
    /// Joules per frequency change.
    pub switch_energy: f64,
    pub gnb_background: u32,
    pub background: BackgroundTemplate,
    pub seed: u64,
    pub duration_slots: u64,
    pub stall_cycles_per_miss: u64,
    /// Misses per kilo-instruction of a fully memory-bound thread.
    pub base_mpki: f64,
    /// IPC of a cache-resident thread before stalls.
    pub peak_ipc: f64,
    /// Minimum timeslice, seconds. Bounds switches per core per slot.
    pub sched_granularity: f64,
    pub delta: f64,
    pub residency: f64,
    pub wakeup: f64,
    pub controller: ControllerConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            n_cores: 8,
            threads: Vec::new(),
            tti: 1e-3,
            freq_levels: LevelSet::new(vec![1.2, 1.5, 1.8, 2.1, 2.4, 2.7, 3.0]).unwrap(),
            power: PowerModelParams {
                p_static: 1.8,
                k_dyn: 1.9,
                p_idle: 0.3,
            },
            ctx_switch_cycles: 3000,
            migration_penalty_cycles: 20_000,
            migration_mpki_boost: MigrationBoost {
                factor: 2.0,
                decay_slots: 5,
            },
            switch_latency: 50e-6,
            switch_energy: 1e-3,
            gnb_background: 0,
            background: BackgroundTemplate {
                threads_per_gnb: 3,
                cycles_per_slot: 250_000,
                demand_jitter: 0.05,
                memory_intensity: 0.05,
            },
            seed: 1,
            duration_slots: 3000,
            stall_cycles_per_miss: 60,
            base_mpki: 10.0,
            peak_ipc: 2.0,
            sched_granularity: 250e-6,
            delta: 0.05,
            residency: 0.0,
            wakeup: 0.0,
            controller: ControllerConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn tti_ns(&self) -> u64 {
        (self.tti * 1e9).round() as u64
    }

    pub fn foreground(&self) -> impl Iterator<Item = &ThreadProfile> {
        self.threads.iter().filter(|t| !t.background)
    }

    pub fn constraint_config(&self, baseline_throughput: f64) -> ConstraintConfig {
        ConstraintConfig {
            tti: self.tti,
            delta: self.delta,
            baseline_throughput,
            residency: self.residency,
            wakeup: self.wakeup,
        }
    }

    /// Demand-side capacity check: total mean compute demand over the peak
    /// cycle budget of all cores.
    pub fn offered_load(&self) -> f64 {
        let demand: u64 = self.threads.iter().map(|t| t.cycles_per_slot).sum();
        let peak = self.freq_levels.max().ghz() * self.tti * 1e9 * self.n_cores as f64;
        demand as f64 / peak
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_cores == 0 {
            return bad("n_cores must be >= 1".into());
        }
        if self.duration_slots == 0 {
            return bad("duration_slots must be >= 1".into());
        }
        if self.tti_ns() == 0 {
            return bad("tti must be > 0".into());
        }
        if self.gnb_background > 5 {
            return bad(format!("gnb_background must be in [0,5], got {}", self.gnb_background));
        }
        self.power.validate()?;
        self.constraint_config(0.0).validate()?;
        self.controller
            .validate(self.tti, self.residency.max(self.wakeup))?;
        if !(self.migration_mpki_boost.factor >= 1.0) {
            return bad("migration_mpki_boost.factor must be >= 1".into());
        }
        if !(self.switch_latency >= 0.0 && self.switch_latency < self.tti) {
            return bad("switch_latency must be in [0, tti)".into());
        }
        if !(self.switch_energy >= 0.0 && self.sched_granularity >= 0.0) {
            return bad("switch_energy and sched_granularity must be >= 0".into());
        }
        if !(self.base_mpki >= 0.0 && self.peak_ipc > 0.0) {
            return bad("base_mpki must be >= 0 and peak_ipc > 0".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.threads {
            if !seen.insert(t.id) {
                return bad(format!("duplicate thread id {}", t.id));
            }
            if !(0.0..=1.0).contains(&t.memory_intensity) {
                return bad(format!("{}: memory_intensity must be in [0,1]", t.id));
            }
            if !(t.demand_jitter >= 0.0) {
                return bad(format!("{}: demand_jitter must be >= 0", t.id));
            }
        }
        Ok(())
    }

    /// Parses the flat key-value scenario format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut cfg = ScenarioConfig::default();
        kv.take_into("name", &mut cfg.name)?;
        kv.take_into("n_cores", &mut cfg.n_cores)?;
        kv.take_into("tti", &mut cfg.tti)?;
        if let Some(v) = kv.take("freq_levels") {
            let levels = v
                .split(',')
                .map(|s| parse_value::<f64>("freq_levels", s.trim()))
                .collect::<Result<Vec<_>>>()?;
            cfg.freq_levels = LevelSet::new(levels)?;
        }
        kv.take_into("power.p_static", &mut cfg.power.p_static)?;
        kv.take_into("power.k_dyn", &mut cfg.power.k_dyn)?;
        kv.take_into("power.p_idle", &mut cfg.power.p_idle)?;
        kv.take_into("ctx_switch_cycles", &mut cfg.ctx_switch_cycles)?;
        kv.take_into("migration_penalty_cycles", &mut cfg.migration_penalty_cycles)?;
        kv.take_into("migration_mpki_boost.factor", &mut cfg.migration_mpki_boost.factor)?;
        kv.take_into("migration_mpki_boost.decay_slots", &mut cfg.migration_mpki_boost.decay_slots)?;
        kv.take_into("switch_latency", &mut cfg.switch_latency)?;
        kv.take_into("switch_energy", &mut cfg.switch_energy)?;
        kv.take_into("gnb_background", &mut cfg.gnb_background)?;
        kv.take_into("background.threads_per_gnb", &mut cfg.background.threads_per_gnb)?;
        kv.take_into("background.cycles_per_slot", &mut cfg.background.cycles_per_slot)?;
        kv.take_into("background.demand_jitter", &mut cfg.background.demand_jitter)?;
        kv.take_into("background.memory_intensity", &mut cfg.background.memory_intensity)?;
        kv.take_into("seed", &mut cfg.seed)?;
        kv.take_into("duration_slots", &mut cfg.duration_slots)?;
        kv.take_into("stall_cycles_per_miss", &mut cfg.stall_cycles_per_miss)?;
        kv.take_into("base_mpki", &mut cfg.base_mpki)?;
        kv.take_into("peak_ipc", &mut cfg.peak_ipc)?;
        kv.take_into("sched_granularity", &mut cfg.sched_granularity)?;
        kv.take_into("constraints.delta", &mut cfg.delta)?;
        kv.take_into("constraints.residency", &mut cfg.residency)?;
        kv.take_into("constraints.wakeup", &mut cfg.wakeup)?;

        let c = &mut cfg.controller;
        kv.take_into("controller.cadence_slots", &mut c.cadence_slots)?;
        kv.take_into("controller.up_threshold", &mut c.up_threshold)?;
        kv.take_into("controller.down_threshold", &mut c.down_threshold)?;
        kv.take_into("controller.headroom", &mut c.headroom)?;
        kv.take_into("controller.min_dwell_slots", &mut c.min_dwell_slots)?;
        kv.take_into("controller.mpki_hot", &mut c.mpki_hot)?;
        kv.take_into("controller.warmup_slots", &mut c.warmup_slots)?;

        let mut index = 0;
        while kv.has_prefix(&format!("thread.{index}.")) {
            let key = |f: &str| format!("thread.{index}.{f}");
            let mut t = ThreadProfile {
                id: ThreadId(index),
                cycles_per_slot: 0,
                demand_jitter: 0.0,
                memory_intensity: 0.0,
                bits_per_slot: 0,
                background: false,
            };
            match kv.take(&key("cycles_per_slot")) {
                Some(v) => t.cycles_per_slot = parse_value(&key("cycles_per_slot"), &v)?,
                None => return Err(Error::Config(format!("missing {}", key("cycles_per_slot")))),
            }
            kv.take_into(&key("demand_jitter"), &mut t.demand_jitter)?;
            kv.take_into(&key("memory_intensity"), &mut t.memory_intensity)?;
            kv.take_into(&key("bits_per_slot"), &mut t.bits_per_slot)?;
            cfg.threads.push(t);
            index += 1;
        }
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = parse_value(key, &v)?;
        }
        Ok(())
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.keys().any(|k| k.starts_with(prefix))
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key {k}"))),
        }
    }
}
