//! Per-thread counter records and the windowed metrics derived from them.
//!
//! Wire format, one record per line, single-space separated base-10
//! unsigned integers:
//!
//! ```text
//! ts_ns thread_id core_id cycles instructions llc_misses ctx_switches runtime_ns
//! ```
//!
//! Lines starting with `#` are comments. Ratio metrics (IPC, MPKI) are always
//! computed from summed counters, never by averaging ratios.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoreId, SchedulingPlan, ThreadId};

pub const FIELD_COUNT: usize = 8;

/// Default aggregation window, ns.
pub const DEFAULT_WINDOW_NS: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub ts_ns: u64,
    pub thread: ThreadId,
    pub core: CoreId,
    pub cycles: u64,
    pub instructions: u64,
    pub llc_misses: u64,
    pub ctx_switches: u64,
    pub runtime_ns: u64,
}

impl fmt::Display for TelemetryRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {} {}",
            self.ts_ns,
            self.thread.0,
            self.core.0,
            self.cycles,
            self.instructions,
            self.llc_misses,
            self.ctx_switches,
            self.runtime_ns
        )
    }
}

pub fn parse_record(line: &str) -> Result<TelemetryRecord> {
    let mut values = [0u64; FIELD_COUNT];
    let mut count = 0;
    let mut offset = 0;
    for (idx, field) in line.split(' ').enumerate() {
        if idx >= FIELD_COUNT {
            return Err(Error::MalformedLine {
                offset,
                field: idx,
                reason: format!("expected {FIELD_COUNT} fields, found more"),
            });
        }
        if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::MalformedLine {
                offset,
                field: idx,
                reason: format!("not an unsigned integer: {field:?}"),
            });
        }
        values[idx] = field.parse().map_err(|_| Error::MalformedLine {
            offset,
            field: idx,
            reason: format!("out of range: {field}"),
        })?;
        count += 1;
        offset += field.len() + 1;
    }
    if count != FIELD_COUNT {
        return Err(Error::MalformedLine {
            offset: line.len(),
            field: count,
            reason: format!("expected {FIELD_COUNT} fields, found {count}"),
        });
    }
    let id = |i: usize| -> Result<u32> {
        u32::try_from(values[i]).map_err(|_| Error::MalformedLine {
            offset: 0,
            field: i,
            reason: "id exceeds 32 bits".into(),
        })
    };
    Ok(TelemetryRecord {
        ts_ns: values[0],
        thread: ThreadId(id(1)?),
        core: CoreId(id(2)?),
        cycles: values[3],
        instructions: values[4],
        llc_misses: values[5],
        ctx_switches: values[6],
        runtime_ns: values[7],
    })
}

/// Parses a whole log, skipping blank and comment lines. Errors carry the
/// 1-based line number.
pub fn parse_log(text: &str) -> std::result::Result<Vec<TelemetryRecord>, (usize, Error)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_record(trimmed).map_err(|e| (i + 1, e))?);
    }
    Ok(out)
}

/// Summed raw counters over a window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub cycles: u64,
    pub instructions: u64,
    pub llc_misses: u64,
    pub ctx_switches: u64,
    pub runtime_ns: u64,
}

impl Counters {
    pub fn add_record(&mut self, r: &TelemetryRecord) {
        self.cycles += r.cycles;
        self.instructions += r.instructions;
        self.llc_misses += r.llc_misses;
        self.ctx_switches += r.ctx_switches;
        self.runtime_ns += r.runtime_ns;
    }

    pub fn merge(&mut self, other: &Counters) {
        self.cycles += other.cycles;
        self.instructions += other.instructions;
        self.llc_misses += other.llc_misses;
        self.ctx_switches += other.ctx_switches;
        self.runtime_ns += other.runtime_ns;
    }

    /// Instructions per cycle; 0 when nothing ran.
    pub fn ipc(&self) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.instructions as f64 / self.cycles as f64
        }
    }

    /// Misses per thousand instructions; 0 when nothing retired.
    pub fn mpki(&self) -> f64 {
        if self.instructions == 0 {
            0.0
        } else {
            1000.0 * self.llc_misses as f64 / self.instructions as f64
        }
    }

    fn check(&self, thread: ThreadId) -> Result<()> {
        if self.cycles == 0 && self.instructions > 0 {
            return Err(Error::InconsistentCounters(thread));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreadStats {
    pub utilization: f64,
    pub ipc: f64,
    pub mpki: f64,
    /// Context switches per second.
    pub ctx_rate: f64,
    pub window_ns: u64,
    pub counters: Counters,
    /// Set when a ratio metric fell back to 0 on a zero denominator.
    pub degenerate: bool,
}

impl ThreadStats {
    pub fn from_counters(c: Counters, window_ns: u64) -> Self {
        let w = window_ns as f64;
        Self {
            utilization: (c.runtime_ns as f64 / w).clamp(0.0, 1.0),
            ipc: c.ipc(),
            mpki: c.mpki(),
            ctx_rate: c.ctx_switches as f64 / (w * 1e-9),
            window_ns,
            counters: c,
            degenerate: c.cycles == 0 || c.instructions == 0,
        }
    }

    /// Cycle demand expressed as a frequency: cycles consumed per ns of
    /// window, i.e. the GHz a core would need to run this thread flat out.
    pub fn demand_ghz(&self) -> f64 {
        self.counters.cycles as f64 / self.window_ns as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreStats {
    pub core: CoreId,
    pub utilization: f64,
    pub ipc: f64,
    pub mpki: f64,
    pub ctx_rate: f64,
    pub window_ns: u64,
    pub counters: Counters,
    /// Utilization exceeded 1 before clamping.
    pub clamped: bool,
}

impl CoreStats {
    pub fn empty(core: CoreId, window_ns: u64) -> Self {
        Self::from_counters(core, Counters::default(), window_ns)
    }

    pub fn from_counters(core: CoreId, c: Counters, window_ns: u64) -> Self {
        let w = window_ns as f64;
        let raw = c.runtime_ns as f64 / w;
        Self {
            core,
            utilization: raw.min(1.0),
            ipc: c.ipc(),
            mpki: c.mpki(),
            ctx_rate: c.ctx_switches as f64 / (w * 1e-9),
            window_ns,
            counters: c,
            clamped: raw > 1.0,
        }
    }

    /// Utilization before clamping.
    pub fn raw_utilization(&self) -> f64 {
        self.counters.runtime_ns as f64 / self.window_ns as f64
    }
}

/// Per-thread metrics over one window of records.
pub fn aggregate_window(
    records: &[TelemetryRecord],
    window_ns: u64,
) -> Result<BTreeMap<ThreadId, ThreadStats>> {
    if window_ns == 0 {
        return Err(Error::MalformedInput("window must be > 0 ns".into()));
    }
    let mut sums: BTreeMap<ThreadId, Counters> = BTreeMap::new();
    for r in records {
        sums.entry(r.thread).or_default().add_record(r);
    }
    sums.into_iter()
        .map(|(thread, c)| {
            c.check(thread)?;
            Ok((thread, ThreadStats::from_counters(c, window_ns)))
        })
        .collect()
}

/// Rolls thread stats up to cores following the plan's affinity. Every core
/// of the plan gets an entry, empty cores report zeros.
pub fn per_core_rollup(
    stats: &BTreeMap<ThreadId, ThreadStats>,
    plan: &SchedulingPlan,
) -> Result<BTreeMap<CoreId, CoreStats>> {
    let window_ns = stats.values().next().map_or(1, |s| s.window_ns);
    let mut sums: BTreeMap<CoreId, Counters> = plan.cores().map(|c| (c, Counters::default())).collect();
    for (thread, s) in stats {
        let core = plan.affinity.get(thread).ok_or(Error::UnmappedThread(*thread))?;
        sums.entry(*core).or_default().merge(&s.counters);
    }
    Ok(sums
        .into_iter()
        .map(|(core, c)| (core, CoreStats::from_counters(core, c, window_ns)))
        .collect())
}

/// Rolls records up to the core each record was observed on. Used for
/// floating threads, whose core changes from record to record.
pub fn rollup_by_record_core(
    records: &[TelemetryRecord],
    window_ns: u64,
    n_cores: usize,
) -> BTreeMap<CoreId, CoreStats> {
    let mut sums: BTreeMap<CoreId, Counters> =
        (0..n_cores as u32).map(|c| (CoreId(c), Counters::default())).collect();
    for r in records {
        sums.entry(r.core).or_default().add_record(r);
    }
    sums.into_iter()
        .map(|(core, c)| (core, CoreStats::from_counters(core, c, window_ns)))
        .collect()
}

/// Sliding window over one record stream. The writer pushes, readers take
/// snapshots; a snapshot is an owned copy and never observes a partial push.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    window_ns: u64,
    records: VecDeque<TelemetryRecord>,
}

impl SlidingWindow {
    pub fn new(window_ns: u64) -> Self {
        Self {
            window_ns,
            records: VecDeque::new(),
        }
    }

    pub fn window_ns(&self) -> u64 {
        self.window_ns
    }

    /// Appends a record and evicts everything at or before `ts - window`.
    pub fn push(&mut self, record: TelemetryRecord) {
        let horizon = record.ts_ns.saturating_sub(self.window_ns);
        self.records.push_back(record);
        while self.records.front().is_some_and(|r| r.ts_ns <= horizon && horizon > 0) {
            self.records.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn snapshot(&self) -> Vec<TelemetryRecord> {
        self.records.iter().copied().collect()
    }

    pub fn aggregate(&self) -> Result<BTreeMap<ThreadId, ThreadStats>> {
        aggregate_window(&self.snapshot(), self.window_ns)
    }
}
