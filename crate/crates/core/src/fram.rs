//! Two-memory faulty-RAM machine.
//!
//! A [`Sim`] owns a large corruptible *faulty* memory and a small
//! incorruptible *safe* memory. An installed [`Adversary`] is invoked at
//! hook points (after every faulty read/write and at named phase
//! checkpoints) and may overwrite faulty words until its budget of
//! `delta` corruptions is spent. Every stored word carries a hidden
//! provenance tag so that verification code can decide, after the fact,
//! which values were ever corrupted; algorithms and adversaries observe
//! visible values only.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which of the two simulated memories a region lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    Faulty,
    Safe,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Faulty => "faulty",
            Space::Safe => "safe",
        }
    }
}

/// Hidden cell classification: keys participate in faithful-ordering
/// checks, metadata (counters, sizes, replicas) does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CellKind {
    Key,
    Meta,
}

/// Hidden provenance of one stored word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Tag {
    pub kind: CellKind,
    /// Input key this instance descends from. Meaningless for `Meta`.
    pub origin: u32,
    /// False once a corruption touched this instance or an ancestor copy.
    pub faithful: bool,
}

impl Tag {
    pub(crate) const META: Tag = Tag {
        kind: CellKind::Meta,
        origin: 0,
        faithful: true,
    };
}

/// One machine word: a visible value plus its hidden tag. Copying a word
/// copies the tag, so faithfulness follows keys as they move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyWord {
    pub value: i64,
    pub(crate) tag: Tag,
}

impl KeyWord {
    pub(crate) fn meta(value: i64) -> KeyWord {
        KeyWord {
            value,
            tag: Tag::META,
        }
    }

    pub(crate) fn is_key(&self) -> bool {
        self.tag.kind == CellKind::Key
    }
}

/// Handle to a contiguous run of cells in one memory. Slicing yields a
/// sub-handle over the same cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub space: Space,
    pub(crate) base: usize,
    pub(crate) len: usize,
}

impl Region {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slice(&self, start: usize, len: usize) -> Region {
        assert!(start + len <= self.len, "slice out of region bounds");
        Region {
            space: self.space,
            base: self.base + start,
            len,
        }
    }

    /// Global address of the first cell within this region's space.
    /// Corruption requests and trace records use these addresses.
    pub fn base_addr(&self) -> usize {
        self.base
    }

    /// Rebuild a handle from a stored base address (structural metadata
    /// kept in simulated memory can only hold integers).
    pub(crate) fn from_raw(space: Space, base: usize, len: usize) -> Region {
        Region { space, base, len }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FramError {
    #[error("safe-memory budget exceeded: in use {in_use}, requested {requested}, capacity {capacity}")]
    SafeBudgetExceeded {
        in_use: usize,
        requested: usize,
        capacity: usize,
    },
    #[error("index {index} out of bounds for region of {len} cells")]
    OutOfBounds { index: usize, len: usize },
    #[error("adversary requested {requested} corruptions with {remaining} remaining")]
    BudgetExceeded { requested: usize, remaining: u64 },
    #[error("cell holds metadata, not a key")]
    KindMismatch,
}

/// Named hook points. `AfterRead`/`AfterWrite` fire on every faulty
/// access; the rest are phase checkpoints placed by the algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    AfterRead,
    AfterWrite,
    RoundStart,
    IterationStart,
    SafetyCheckBegin,
    BucketRoundStart,
    PqOpBegin,
}

/// What an adversary learns when its hook fires.
#[derive(Debug, Clone, Copy)]
pub struct AdversaryEvent {
    pub phase: Phase,
    /// Global operation counter, strictly increasing within a run.
    pub step: u64,
    /// Address the triggering access touched, for `AfterRead`/`AfterWrite`.
    pub addr: Option<usize>,
}

/// A single requested corruption: overwrite one faulty word.
#[derive(Debug, Clone, Copy)]
pub struct Corruption {
    pub addr: usize,
    pub new_value: i64,
}

/// Read-only view handed to adversaries: visible values of both
/// memories plus the remaining corruption budget. Hidden tags are not
/// reachable from here.
pub struct MemView<'a> {
    faulty: &'a [KeyWord],
    safe: &'a [KeyWord],
    remaining: u64,
}

impl<'a> MemView<'a> {
    pub fn faulty_value(&self, addr: usize) -> Option<i64> {
        self.faulty.get(addr).map(|c| c.value)
    }

    pub fn safe_value(&self, addr: usize) -> Option<i64> {
        self.safe.get(addr).map(|c| c.value)
    }

    /// Number of faulty words allocated so far; valid corruption targets
    /// are `0..faulty_extent()`.
    pub fn faulty_extent(&self) -> usize {
        self.faulty.len()
    }

    pub fn remaining_budget(&self) -> u64 {
        self.remaining
    }
}

/// Adversary strategy. Invoked at every hook point; returned corruptions
/// are applied atomically against the remaining budget. Implementations
/// must be deterministic given their construction parameters.
pub trait Adversary: Send {
    fn on_event(&mut self, ev: &AdversaryEvent, view: &MemView<'_>, out: &mut Vec<Corruption>);

    fn name(&self) -> &'static str {
        "custom"
    }
}

/// Instrumentation counters for one run. `wall_time` is excluded from
/// equality and serialization so that reports and replays compare
/// deterministically.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub comparisons: u64,
    pub faulty_reads: u64,
    pub faulty_writes: u64,
    pub safe_reads: u64,
    pub safe_writes: u64,
    pub rounds: u64,
    pub restarts: u64,
    pub binary_searches: u64,
    pub pq_pushes: u64,
    pub pq_pulls: u64,
    pub rebuilds: u64,
    pub alpha_used: u64,
    pub safe_high_water: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for RunMetrics {
    fn eq(&self, other: &Self) -> bool {
        self.comparisons == other.comparisons
            && self.faulty_reads == other.faulty_reads
            && self.faulty_writes == other.faulty_writes
            && self.safe_reads == other.safe_reads
            && self.safe_writes == other.safe_writes
            && self.rounds == other.rounds
            && self.restarts == other.restarts
            && self.binary_searches == other.binary_searches
            && self.pq_pushes == other.pq_pushes
            && self.pq_pulls == other.pq_pulls
            && self.rebuilds == other.rebuilds
            && self.alpha_used == other.alpha_used
            && self.safe_high_water == other.safe_high_water
    }
}

impl Eq for RunMetrics {}

/// One applied corruption, as kept in the internal log. The exported
/// trace drops the hidden fields.
#[derive(Debug, Clone)]
pub struct CorruptionRecord {
    pub step: u64,
    pub addr: usize,
    pub old_value: i64,
    pub new_value: i64,
    pub(crate) origin: Option<u32>,
}

/// Exported trace record, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub address_space: String,
    pub address: usize,
    pub old_value: i64,
    pub new_value: i64,
}

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    /// Requested safe-memory size S. The effective size is
    /// `max(2, min(s, delta))` rounded down to even (2 when `delta` is 0).
    pub s: usize,
    /// Corruption budget delta.
    pub delta: u64,
    /// Safe capacity multiplier; capacity is `c_safe * s_eff` words.
    pub c_safe: usize,
}

impl SimConfig {
    pub fn new(s: usize, delta: u64) -> SimConfig {
        SimConfig {
            s,
            delta,
            c_safe: 16,
        }
    }

    pub fn with_c_safe(mut self, c_safe: usize) -> SimConfig {
        self.c_safe = c_safe;
        self
    }

    pub fn s_eff(&self) -> usize {
        s_eff(self.s, self.delta)
    }
}

/// Effective safe size: S is never useful beyond delta, never below 2,
/// and the merge buffers need it even.
pub fn s_eff(s: usize, delta: u64) -> usize {
    if delta == 0 {
        return 2;
    }
    let capped = s.min(delta as usize).max(2);
    (capped / 2) * 2
}

struct FaultyMem {
    cells: Vec<KeyWord>,
    in_use: usize,
}

struct SafeMem {
    cells: Vec<KeyWord>,
    capacity: usize,
    in_use: usize,
    high_water: usize,
    /// Free blocks `(base, len)`, kept sorted by base and coalesced.
    free: Vec<(usize, usize)>,
}

impl SafeMem {
    fn alloc(&mut self, len: usize) -> Result<usize, FramError> {
        if self.in_use + len > self.capacity {
            return Err(FramError::SafeBudgetExceeded {
                in_use: self.in_use,
                requested: len,
                capacity: self.capacity,
            });
        }
        if len == 0 {
            return Ok(self.cells.len());
        }
        // First fit over the free list, then fresh cells at the end.
        let mut base = None;
        for (i, &(b, l)) in self.free.iter().enumerate() {
            if l >= len {
                base = Some((i, b, l));
                break;
            }
        }
        let base = match base {
            Some((i, b, l)) => {
                if l == len {
                    self.free.remove(i);
                } else {
                    self.free[i] = (b + len, l - len);
                }
                for c in &mut self.cells[b..b + len] {
                    *c = KeyWord::meta(0);
                }
                b
            }
            None => {
                let b = self.cells.len();
                self.cells.resize(b + len, KeyWord::meta(0));
                b
            }
        };
        self.in_use += len;
        self.high_water = self.high_water.max(self.in_use);
        Ok(base)
    }

    fn free(&mut self, base: usize, len: usize) {
        if len == 0 {
            return;
        }
        debug_assert!(self.in_use >= len);
        self.in_use -= len;
        let pos = self.free.partition_point(|&(b, _)| b < base);
        self.free.insert(pos, (base, len));
        // Coalesce with neighbors.
        if pos + 1 < self.free.len() {
            let (b, l) = self.free[pos];
            let (nb, nl) = self.free[pos + 1];
            if b + l == nb {
                self.free[pos] = (b, l + nl);
                self.free.remove(pos + 1);
            }
        }
        if pos > 0 {
            let (pb, pl) = self.free[pos - 1];
            let (b, l) = self.free[pos];
            if pb + pl == b {
                self.free[pos - 1] = (pb, pl + l);
                self.free.remove(pos);
            }
        }
    }
}

/// One simulation instance. Strictly sequential; distinct instances
/// share nothing and can run on different threads.
pub struct Sim {
    config: SimConfig,
    s_eff: usize,
    faulty: FaultyMem,
    safe: SafeMem,
    pub(crate) metrics: RunMetrics,
    step: u64,
    next_origin: u32,
    adversary: Option<Box<dyn Adversary>>,
    /// Set when an adversary violated its contract; hooks stop firing.
    violation: Option<FramError>,
    corruption_log: Vec<CorruptionRecord>,
    scratch: Vec<Corruption>,
}

impl Sim {
    pub fn new(config: SimConfig) -> Sim {
        let s_eff = config.s_eff();
        Sim {
            config,
            s_eff,
            faulty: FaultyMem {
                cells: Vec::new(),
                in_use: 0,
            },
            safe: SafeMem {
                cells: Vec::new(),
                capacity: config.c_safe * s_eff,
                in_use: 0,
                high_water: 0,
                free: Vec::new(),
            },
            metrics: RunMetrics::default(),
            step: 0,
            next_origin: 0,
            adversary: None,
            violation: None,
            corruption_log: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn s_eff(&self) -> usize {
        self.s_eff
    }

    pub fn delta(&self) -> u64 {
        self.config.delta
    }

    pub fn remaining_budget(&self) -> u64 {
        self.config.delta - self.metrics.alpha_used
    }

    /// Contract violation recorded for this run, if any. A run that
    /// trips this is flagged, never silently truncated.
    pub fn violation(&self) -> Option<&FramError> {
        self.violation.as_ref()
    }

    pub fn install_adversary(&mut self, adversary: Box<dyn Adversary>) {
        self.adversary = Some(adversary);
    }

    pub fn clear_adversary(&mut self) {
        self.adversary = None;
    }

    pub fn alloc(&mut self, space: Space, len: usize) -> Result<Region, FramError> {
        match space {
            Space::Faulty => {
                let base = self.faulty.in_use;
                self.faulty.in_use += len;
                if self.faulty.cells.len() < self.faulty.in_use {
                    self.faulty.cells.resize(self.faulty.in_use, KeyWord::meta(0));
                } else {
                    for c in &mut self.faulty.cells[base..base + len] {
                        *c = KeyWord::meta(0);
                    }
                }
                Ok(Region {
                    space,
                    base,
                    len,
                })
            }
            Space::Safe => {
                let base = self.safe.alloc(len)?;
                Ok(Region {
                    space,
                    base,
                    len,
                })
            }
        }
    }

    /// Release a region. Safe regions return their words to the budget.
    /// Faulty frees only roll the arena back when the region is the most
    /// recent allocation; anything else is abandoned in place (the
    /// faulty space is unbounded).
    pub fn free(&mut self, region: Region) {
        match region.space {
            Space::Safe => self.safe.free(region.base, region.len),
            Space::Faulty => {
                if region.base + region.len == self.faulty.in_use {
                    self.faulty.in_use = region.base;
                }
            }
        }
    }

    /// Watermark for scoped faulty allocation.
    pub fn faulty_mark(&self) -> usize {
        self.faulty.in_use
    }

    /// Roll the faulty arena back to a previous watermark, abandoning
    /// everything allocated after it.
    pub fn faulty_release(&mut self, mark: usize) {
        debug_assert!(mark <= self.faulty.in_use);
        self.faulty.in_use = mark;
    }

    pub fn faulty_in_use(&self) -> usize {
        self.faulty.in_use
    }

    pub fn safe_in_use(&self) -> usize {
        self.safe.in_use
    }

    pub fn safe_high_water(&self) -> usize {
        self.safe.high_water
    }

    pub fn safe_capacity(&self) -> usize {
        self.safe.capacity
    }

    /// Load input keys into a fresh faulty region, assigning fresh
    /// faithful origins.
    pub fn load_keys(&mut self, values: &[i64]) -> Region {
        let region = self
            .alloc(Space::Faulty, values.len())
            .expect("faulty space is unbounded");
        for (i, &v) in values.iter().enumerate() {
            let kw = self.mint_key(v);
            self.wr_key(region, i, kw);
        }
        region
    }

    /// Fresh faithful key with a new origin id.
    pub(crate) fn mint_key(&mut self, value: i64) -> KeyWord {
        let origin = self.next_origin;
        self.next_origin += 1;
        KeyWord {
            value,
            tag: Tag {
                kind: CellKind::Key,
                origin,
                faithful: true,
            },
        }
    }

    pub(crate) fn origins_minted(&self) -> u32 {
        self.next_origin
    }

    // ---- counted accesses (hot path) ----

    #[inline]
    pub(crate) fn rd(&mut self, r: Region, i: usize) -> KeyWord {
        debug_assert!(i < r.len, "read past region end");
        let addr = r.base + i;
        match r.space {
            Space::Faulty => {
                let kw = self.faulty.cells[addr];
                self.metrics.faulty_reads += 1;
                self.step += 1;
                if self.adversary.is_some() {
                    self.fire(Phase::AfterRead, Some(addr));
                }
                kw
            }
            Space::Safe => {
                self.metrics.safe_reads += 1;
                self.step += 1;
                self.safe.cells[addr]
            }
        }
    }

    #[inline]
    pub(crate) fn wr_key(&mut self, r: Region, i: usize, kw: KeyWord) {
        debug_assert!(i < r.len, "write past region end");
        debug_assert!(kw.is_key());
        let addr = r.base + i;
        match r.space {
            Space::Faulty => {
                self.faulty.cells[addr] = kw;
                self.metrics.faulty_writes += 1;
                self.step += 1;
                if self.adversary.is_some() {
                    self.fire(Phase::AfterWrite, Some(addr));
                }
            }
            Space::Safe => {
                self.safe.cells[addr] = kw;
                self.metrics.safe_writes += 1;
                self.step += 1;
            }
        }
    }

    #[inline]
    pub(crate) fn wr_meta(&mut self, r: Region, i: usize, value: i64) {
        debug_assert!(i < r.len, "write past region end");
        let addr = r.base + i;
        match r.space {
            Space::Faulty => {
                self.faulty.cells[addr] = KeyWord::meta(value);
                self.metrics.faulty_writes += 1;
                self.step += 1;
                if self.adversary.is_some() {
                    self.fire(Phase::AfterWrite, Some(addr));
                }
            }
            Space::Safe => {
                self.safe.cells[addr] = KeyWord::meta(value);
                self.metrics.safe_writes += 1;
                self.step += 1;
            }
        }
    }

    /// Counted key comparison.
    #[inline]
    pub(crate) fn lt(&mut self, a: i64, b: i64) -> bool {
        self.metrics.comparisons += 1;
        a < b
    }

    #[inline]
    pub(crate) fn le(&mut self, a: i64, b: i64) -> bool {
        self.metrics.comparisons += 1;
        a <= b
    }

    // ---- uncounted access (verification and debug assertions only) ----

    /// Raw cell view bypassing counters and hooks. For the hidden-tag
    /// oracle, never for algorithm logic.
    #[inline]
    pub(crate) fn peek(&self, r: Region, i: usize) -> KeyWord {
        debug_assert!(i < r.len);
        match r.space {
            Space::Faulty => self.faulty.cells[r.base + i],
            Space::Safe => self.safe.cells[r.base + i],
        }
    }

    // ---- public checked operations ----

    /// Visible value at `region[idx]`, with counters and hooks.
    pub fn read(&mut self, region: Region, idx: usize) -> Result<i64, FramError> {
        if idx >= region.len {
            return Err(FramError::OutOfBounds {
                index: idx,
                len: region.len,
            });
        }
        Ok(self.rd(region, idx).value)
    }

    /// Store a metadata word.
    pub fn write_meta(&mut self, region: Region, idx: usize, value: i64) -> Result<(), FramError> {
        if idx >= region.len {
            return Err(FramError::OutOfBounds {
                index: idx,
                len: region.len,
            });
        }
        self.wr_meta(region, idx, value);
        Ok(())
    }

    /// Move a key between cells; the hidden tag travels with the value.
    pub fn copy_key(
        &mut self,
        src: Region,
        src_idx: usize,
        dst: Region,
        dst_idx: usize,
    ) -> Result<(), FramError> {
        if src_idx >= src.len {
            return Err(FramError::OutOfBounds {
                index: src_idx,
                len: src.len,
            });
        }
        if dst_idx >= dst.len {
            return Err(FramError::OutOfBounds {
                index: dst_idx,
                len: dst.len,
            });
        }
        let kw = self.rd(src, src_idx);
        if !kw.is_key() {
            return Err(FramError::KindMismatch);
        }
        self.wr_key(dst, dst_idx, kw);
        Ok(())
    }

    /// Phase checkpoint: hands control to the adversary. Reports
    /// `BudgetExceeded` when the adversary over-asked (the batch is
    /// rejected whole and the run is flagged).
    pub fn checkpoint(&mut self, phase: Phase) -> Result<(), FramError> {
        let had_violation = self.violation.is_some();
        self.cp(phase);
        match (&self.violation, had_violation) {
            (Some(v), false) => Err(clone_error(v)),
            _ => Ok(()),
        }
    }

    /// Internal checkpoint: contract violations are recorded on the sim
    /// and flag the run instead of propagating.
    #[inline]
    pub(crate) fn cp(&mut self, phase: Phase) {
        self.step += 1;
        if self.adversary.is_some() {
            self.fire(phase, None);
        }
    }

    pub fn metrics(&self) -> RunMetrics {
        let mut m = self.metrics.clone();
        m.safe_high_water = self.safe.high_water;
        m
    }

    pub fn corruption_log(&self) -> &[CorruptionRecord] {
        &self.corruption_log
    }

    /// Newline-delimited JSON trace of all corruptions, for replay.
    pub fn export_trace(&self) -> String {
        let mut out = String::new();
        for rec in &self.corruption_log {
            let tr = TraceRecord {
                step: rec.step,
                address_space: Space::Faulty.name().to_string(),
                address: rec.addr,
                old_value: rec.old_value,
                new_value: rec.new_value,
            };
            out.push_str(&serde_json::to_string(&tr).expect("trace serializes"));
            out.push('\n');
        }
        out
    }

    #[cold]
    fn fire(&mut self, phase: Phase, addr: Option<usize>) {
        let Some(mut adv) = self.adversary.take() else {
            return;
        };
        let mut batch = std::mem::take(&mut self.scratch);
        batch.clear();
        let ev = AdversaryEvent {
            phase,
            step: self.step,
            addr,
        };
        {
            let view = MemView {
                faulty: &self.faulty.cells[..self.faulty.in_use],
                safe: &self.safe.cells,
                remaining: self.config.delta - self.metrics.alpha_used,
            };
            adv.on_event(&ev, &view, &mut batch);
        }
        if !batch.is_empty() {
            self.apply_corruptions(&batch);
        }
        self.scratch = batch;
        if self.violation.is_none() {
            self.adversary = Some(adv);
        }
    }

    fn apply_corruptions(&mut self, batch: &[Corruption]) {
        let remaining = self.config.delta - self.metrics.alpha_used;
        if batch.len() as u64 > remaining {
            self.violation = Some(FramError::BudgetExceeded {
                requested: batch.len(),
                remaining,
            });
            return;
        }
        for c in batch {
            if c.addr >= self.faulty.in_use {
                self.violation = Some(FramError::OutOfBounds {
                    index: c.addr,
                    len: self.faulty.in_use,
                });
                return;
            }
        }
        for c in batch {
            let cell = &mut self.faulty.cells[c.addr];
            let old = cell.value;
            let origin = if cell.tag.kind == CellKind::Key {
                Some(cell.tag.origin)
            } else {
                None
            };
            cell.value = c.new_value;
            cell.tag.faithful = false;
            self.metrics.alpha_used += 1;
            self.corruption_log.push(CorruptionRecord {
                step: self.step,
                addr: c.addr,
                old_value: old,
                new_value: c.new_value,
                origin,
            });
        }
    }
}

fn clone_error(e: &FramError) -> FramError {
    match e {
        FramError::SafeBudgetExceeded {
            in_use,
            requested,
            capacity,
        } => FramError::SafeBudgetExceeded {
            in_use: *in_use,
            requested: *requested,
            capacity: *capacity,
        },
        FramError::OutOfBounds { index, len } => FramError::OutOfBounds {
            index: *index,
            len: *len,
        },
        FramError::BudgetExceeded {
            requested,
            remaining,
        } => FramError::BudgetExceeded {
            requested: *requested,
            remaining: *remaining,
        },
        FramError::KindMismatch => FramError::KindMismatch,
    }
}

/// Apply an exact batch of corruptions through the normal adversary
/// path, so budget accounting, logging and tags stay honest. Test
/// plumbing: production runs install a strategy instead.
pub fn plant_corruptions(sim: &mut Sim, picks: &[(usize, i64)]) -> Result<(), FramError> {
    struct Planted(Vec<Corruption>);
    impl Adversary for Planted {
        fn on_event(&mut self, _ev: &AdversaryEvent, _view: &MemView<'_>, out: &mut Vec<Corruption>) {
            out.append(&mut self.0);
        }
    }
    let saved = sim.adversary.take();
    sim.install_adversary(Box::new(Planted(
        picks
            .iter()
            .map(|&(addr, new_value)| Corruption { addr, new_value })
            .collect(),
    )));
    let res = sim.checkpoint(Phase::RoundStart);
    sim.adversary = saved;
    res
}

/// Parse a newline-delimited corruption trace.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::NoFaults;

    #[test]
    fn s_eff_normalization() {
        assert_eq!(s_eff(8, 0), 2);
        assert_eq!(s_eff(1, 5), 2);
        assert_eq!(s_eff(3, 5), 2);
        assert_eq!(s_eff(5, 9), 4);
        assert_eq!(s_eff(16, 9), 8);
        assert_eq!(s_eff(16, 1024), 16);
        assert_eq!(s_eff(64, 64), 64);
    }

    #[test]
    fn alloc_zero_len_safe_leaves_high_water() {
        let mut sim = Sim::new(SimConfig::new(8, 8));
        let r = sim.alloc(Space::Safe, 0).unwrap();
        assert_eq!(r.len(), 0);
        assert_eq!(sim.safe_high_water(), 0);
    }

    #[test]
    fn safe_capacity_is_c_safe_times_s() {
        // S=8, delta=8 so s_eff=8; capacity 16*8 = 128.
        let mut sim = Sim::new(SimConfig::new(8, 8));
        sim.alloc(Space::Safe, 128).unwrap();
        let err = sim.alloc(Space::Safe, 1).unwrap_err();
        assert!(matches!(err, FramError::SafeBudgetExceeded { .. }));
    }

    #[test]
    fn faulty_space_unbounded() {
        let mut sim = Sim::new(SimConfig::new(8, 8));
        let r = sim.alloc(Space::Faulty, 1_000_000).unwrap();
        assert_eq!(r.len(), 1_000_000);
    }

    #[test]
    fn fresh_cells_read_zero() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let r = sim.alloc(Space::Faulty, 4).unwrap();
        assert_eq!(sim.read(r, 0).unwrap(), 0);
    }

    #[test]
    fn read_your_write() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let r = sim.alloc(Space::Faulty, 8).unwrap();
        sim.write_meta(r, 3, 42).unwrap();
        assert_eq!(sim.read(r, 3).unwrap(), 42);
        sim.write_meta(r, 3, 43).unwrap();
        assert_eq!(sim.read(r, 3).unwrap(), 43);
    }

    #[test]
    fn out_of_bounds_reported() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let r = sim.alloc(Space::Faulty, 2).unwrap();
        assert!(matches!(
            sim.read(r, 2),
            Err(FramError::OutOfBounds { index: 2, len: 2 })
        ));
    }

    #[test]
    fn copy_meta_as_key_rejected() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let r = sim.alloc(Space::Faulty, 2).unwrap();
        sim.write_meta(r, 0, 5).unwrap();
        assert_eq!(sim.copy_key(r, 0, r, 1), Err(FramError::KindMismatch));
    }

    #[test]
    fn copy_chain_stays_faithful() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let src = sim.load_keys(&[5]);
        let r = sim.alloc(Space::Faulty, 101).unwrap();
        sim.copy_key(src, 0, r, 0).unwrap();
        for i in 0..100 {
            sim.copy_key(r, i, r, i + 1).unwrap();
        }
        let kw = sim.peek(r, 100);
        assert_eq!(kw.value, 5);
        assert!(kw.tag.faithful);
        assert_eq!(kw.tag.origin, sim.peek(src, 0).tag.origin);
    }

    struct OneShot {
        fired: bool,
        addr: usize,
        value: i64,
    }

    impl Adversary for OneShot {
        fn on_event(&mut self, _ev: &AdversaryEvent, _view: &MemView<'_>, out: &mut Vec<Corruption>) {
            if !self.fired {
                self.fired = true;
                out.push(Corruption {
                    addr: self.addr,
                    new_value: self.value,
                });
            }
        }
    }

    #[test]
    fn corruption_flips_tag_and_logs() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let r = sim.load_keys(&[1, 2, 3]);
        sim.install_adversary(Box::new(OneShot {
            fired: false,
            addr: r.base + 1,
            value: -7,
        }));
        sim.checkpoint(Phase::RoundStart).unwrap();
        assert_eq!(sim.read(r, 1).unwrap(), -7);
        assert!(!sim.peek(r, 1).tag.faithful);
        assert_eq!(sim.metrics().alpha_used, 1);
        assert_eq!(sim.corruption_log().len(), 1);
        assert_eq!(sim.corruption_log()[0].old_value, 2);
    }

    struct Greedy {
        per_hook: usize,
    }

    impl Adversary for Greedy {
        fn on_event(&mut self, _ev: &AdversaryEvent, view: &MemView<'_>, out: &mut Vec<Corruption>) {
            for a in 0..self.per_hook.min(view.faulty_extent()) {
                out.push(Corruption {
                    addr: a,
                    new_value: 0,
                });
            }
        }
    }

    #[test]
    fn over_budget_batch_rejected_whole() {
        let mut sim = Sim::new(SimConfig::new(4, 1));
        let _r = sim.load_keys(&[1, 2, 3]);
        sim.install_adversary(Box::new(Greedy { per_hook: 2 }));
        let err = sim.checkpoint(Phase::RoundStart).unwrap_err();
        assert!(matches!(err, FramError::BudgetExceeded { .. }));
        // Nothing applied, run flagged.
        assert_eq!(sim.metrics().alpha_used, 0);
        assert!(sim.violation().is_some());
    }

    #[test]
    fn no_faults_leaves_memory_unchanged() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let r = sim.load_keys(&[9, 8, 7]);
        sim.install_adversary(Box::new(NoFaults));
        sim.checkpoint(Phase::RoundStart).unwrap();
        for (i, want) in [9, 8, 7].into_iter().enumerate() {
            assert_eq!(sim.read(r, i).unwrap(), want);
        }
        assert_eq!(sim.metrics().alpha_used, 0);
    }

    #[test]
    fn metrics_count_reads() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let r = sim.load_keys(&[1, 2, 3, 4]);
        assert_eq!(sim.metrics().faulty_writes, 4);
        for i in 0..4 {
            sim.read(r, i).unwrap();
        }
        assert_eq!(sim.metrics().faulty_reads, 4);
    }

    #[test]
    fn safe_free_list_reuses_words() {
        let mut sim = Sim::new(SimConfig::new(8, 8));
        let a = sim.alloc(Space::Safe, 64).unwrap();
        let b = sim.alloc(Space::Safe, 64).unwrap();
        sim.free(a);
        let c = sim.alloc(Space::Safe, 32).unwrap();
        assert_eq!(c.base, a.base);
        sim.free(b);
        sim.free(c);
        assert_eq!(sim.safe_in_use(), 0);
        assert_eq!(sim.safe_high_water(), 128);
    }

    #[test]
    fn trace_round_trip() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let r = sim.load_keys(&[1, 2, 3]);
        sim.install_adversary(Box::new(OneShot {
            fired: false,
            addr: r.base,
            value: 99,
        }));
        sim.checkpoint(Phase::RoundStart).unwrap();
        let text = sim.export_trace();
        let records = parse_trace(&text).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].address, r.base);
        assert_eq!(records[0].new_value, 99);
        assert_eq!(records[0].old_value, 1);
    }
}
