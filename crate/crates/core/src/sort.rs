//! Resilient sorting suite: purifying merge, bucket merge, and the
//! merge/sort drivers built on them.
//!
//! The purifying merge pushes keys through a two-level buffer cascade —
//! large faulty staging buffers feeding small safe ones — with an
//! inversion check on every key entering safe memory and a safety check
//! before anything is committed to the output. A failed check rolls the
//! current round back to its start, minus the keys the checks already
//! exiled to the fallout sequence `F`. The bucket merge then folds `F`
//! back in by repeatedly pulling the smallest remaining fallout keys
//! into safe pivots and partitioning the main sequence around them.

use thiserror::Error;

use crate::fram::{KeyWord, Phase, Region, Sim, Space};
use crate::safeheap::SafeHeap;
use crate::verify::{self, PurifyCall};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SortError {
    #[error("input sequence is not faithfully ordered")]
    ContractViolation,
}

/// Buffer capacities for one merge, derived from the effective safe
/// size and the corruption budget.
#[derive(Debug, Clone, Copy)]
pub struct MergeParams {
    pub s_eff: usize,
    pub delta: u64,
}

impl MergeParams {
    pub fn from_sim(sim: &Sim) -> MergeParams {
        MergeParams {
            s_eff: sim.s_eff(),
            delta: sim.delta(),
        }
    }

    /// Staging buffers X1/Y1.
    pub fn stage_cap(&self) -> usize {
        4 * self.delta as usize + self.s_eff
    }

    /// Output staging buffer Z1.
    pub fn z1_cap(&self) -> usize {
        self.delta as usize + self.s_eff / 2
    }

    /// Safe buffers X2/Y2.
    pub fn safe_cap(&self) -> usize {
        self.s_eff
    }

    /// Safe merge buffer Z2.
    pub fn z2_cap(&self) -> usize {
        self.s_eff / 2
    }

    /// Keys a round accumulates in Z1 before the safety check.
    fn z1_goal(&self) -> usize {
        (self.delta as usize).max(1)
    }
}

/// Growable faulty buffer; doubles when full, old storage is abandoned.
pub(crate) struct GrowBuf {
    region: Region,
    len: usize,
}

impl GrowBuf {
    pub(crate) fn new(sim: &mut Sim, cap: usize) -> GrowBuf {
        let region = sim
            .alloc(Space::Faulty, cap.max(4))
            .expect("faulty space is unbounded");
        GrowBuf { region, len: 0 }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    pub(crate) fn clear(&mut self) {
        self.len = 0;
    }

    pub(crate) fn push(&mut self, sim: &mut Sim, kw: KeyWord) {
        if self.len == self.region.len() {
            let bigger = sim
                .alloc(Space::Faulty, self.region.len() * 2)
                .expect("faulty space is unbounded");
            for i in 0..self.len {
                let k = sim.rd(self.region, i);
                sim.wr_key(bigger, i, k);
            }
            self.region = bigger;
        }
        sim.wr_key(self.region, self.len, kw);
        self.len += 1;
    }

    pub(crate) fn live(&self) -> Region {
        self.region.slice(0, self.len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckOutcome {
    Ok,
    RemovedOk,
    RoundFail,
}

/// Which input side a check applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideSel {
    X,
    Y,
}

/// One side of the purifying merge.
///
/// `arr` is the staging buffer and, through the dual cursors, its own
/// round-start snapshot: `[0, w)` holds the keys consumed this attempt
/// that must come back on a rollback (each key is written back, already
/// compacted, the moment it is read — constant-time removal), `[r, len)`
/// is the unconsumed remainder, and `[w, r)` is garbage left by keys
/// moved to `F`. The safe buffer `x2` is snapshotted into `snap` at
/// every attempt start.
struct Side {
    input: Region,
    in_pos: usize,
    arr: Region,
    len: usize,
    r: usize,
    w: usize,
    x2: Region,
    x2_f: usize,
    x2_l: usize,
    snap: Region,
    /// Snap-origin entries consumed from the front of `x2` this attempt.
    c: usize,
    /// Snap-origin entries currently in `x2` (they form its prefix).
    snap_in_x2: usize,
    /// Arr-origin entries currently in `x2` are `arr[aw_lo, w)`.
    aw_lo: usize,
}

impl Side {
    fn new(sim: &mut Sim, input: Region, params: &MergeParams) -> Side {
        let arr = sim
            .alloc(Space::Faulty, params.stage_cap())
            .expect("faulty space is unbounded");
        let x2 = sim
            .alloc(Space::Safe, params.safe_cap())
            .expect("purify safe buffers fit the budget");
        let snap = sim
            .alloc(Space::Safe, params.safe_cap())
            .expect("purify safe buffers fit the budget");
        Side {
            input,
            in_pos: 0,
            arr,
            len: 0,
            r: 0,
            w: 0,
            x2,
            x2_f: 0,
            x2_l: 0,
            snap,
            c: 0,
            snap_in_x2: 0,
            aw_lo: 0,
        }
    }

    fn release(&self, sim: &mut Sim) {
        sim.free(self.x2);
        sim.free(self.snap);
    }

    fn x2_len(&self) -> usize {
        self.x2_l - self.x2_f
    }

    /// No unconsumed keys in the staging buffer or the input.
    fn upstream_empty(&self) -> bool {
        self.r == self.len && self.in_pos == self.input.len()
    }

    fn exhausted(&self) -> bool {
        self.upstream_empty() && self.x2_len() == 0
    }

    /// Round preparation: drop the consumed prefix (its keys are in the
    /// committed pipeline), re-establish the safe buffer's size floor,
    /// top the staging buffer up from the input, and snapshot the safe
    /// buffer.
    fn prepare(&mut self, sim: &mut Sim, params: &MergeParams, f: &mut GrowBuf) {
        self.compact_arr(sim);
        // A failed round can roll the safe buffer back below the size
        // floor the cost accounting relies on (every further failure
        // would come cheaper than S/2 faults). Top it back up without
        // checks and validate, as for the first fill; every pair the
        // validation exiles is paid for by a corruption. Topped-up keys
        // move for good: the snapshot below becomes their rollback home.
        let floor = params.safe_cap() / 2;
        while self.x2_len() < floor && self.r < self.len {
            while self.x2_len() < floor && self.r < self.len {
                let kw = sim.rd(self.arr, self.r);
                self.r += 1;
                self.x2_push(sim, kw);
            }
            self.validate_window(sim, f);
        }
        self.compact_arr(sim);
        while self.len < params.stage_cap() && self.in_pos < self.input.len() {
            let kw = sim.rd(self.input, self.in_pos);
            sim.wr_key(self.arr, self.len, kw);
            self.len += 1;
            self.in_pos += 1;
        }
        // Snapshot x2.
        let n = self.x2_len();
        for j in 0..n {
            let kw = sim.rd(self.x2, self.x2_f + j);
            sim.wr_key(self.snap, j, kw);
        }
        self.c = 0;
        self.snap_in_x2 = n;
        self.aw_lo = 0;
        // Compact x2 storage so appends have room.
        if self.x2_f > 0 {
            for j in 0..n {
                let kw = sim.rd(self.snap, j);
                sim.wr_key(self.x2, j, kw);
            }
            self.x2_f = 0;
            self.x2_l = n;
        }
    }

    /// Drop everything before the read cursor: those keys live on in the
    /// safe buffer, the output pipeline or F.
    fn compact_arr(&mut self, sim: &mut Sim) {
        if self.r > 0 {
            let live = self.len - self.r;
            for i in 0..live {
                let kw = sim.rd(self.arr, self.r + i);
                sim.wr_key(self.arr, i, kw);
            }
            self.len = live;
            self.r = 0;
        }
        self.w = 0;
    }

    /// Adjacent-pair validation of the live safe buffer after unchecked
    /// insertions past position `n_old`: inverted pairs go to F, and the
    /// survivors compact in place. Entries here have no staging-buffer
    /// rollback copies; the caller snapshots the survivors.
    fn validate_window(&mut self, sim: &mut Sim, f: &mut GrowBuf) {
        let total = self.x2_len();
        let base = self.x2_f;
        let mut kept = 0usize;
        for j in 0..total {
            let kw = sim.rd(self.x2, base + j);
            if kept > 0 {
                let top = sim.rd(self.x2, base + kept - 1);
                if !sim.lt(top.value, kw.value) {
                    f.push(sim, top);
                    f.push(sim, kw);
                    kept -= 1;
                    continue;
                }
            }
            if kept != j {
                sim.wr_key(self.x2, base + kept, kw);
            }
            kept += 1;
        }
        self.x2_l = base + kept;
        self.debug_assert_x2_order(sim);
    }

    fn x2_push(&mut self, sim: &mut Sim, kw: KeyWord) {
        if self.x2_l == self.x2.len() && self.x2_f > 0 {
            // Slide the live window back to the front of the buffer.
            let n = self.x2_len();
            for j in 0..n {
                let k = sim.rd(self.x2, self.x2_f + j);
                sim.wr_key(self.x2, j, k);
            }
            self.x2_f = 0;
            self.x2_l = n;
        }
        assert!(self.x2_l < self.x2.len(), "x2 overfull");
        sim.wr_key(self.x2, self.x2_l, kw);
        self.x2_l += 1;
    }

    fn x2_front(&self, sim: &mut Sim) -> KeyWord {
        sim.rd(self.x2, self.x2_f)
    }

    fn x2_pop_front(&mut self, sim: &mut Sim) -> KeyWord {
        let kw = sim.rd(self.x2, self.x2_f);
        self.x2_f += 1;
        if self.snap_in_x2 > 0 {
            self.snap_in_x2 -= 1;
            self.c += 1;
        } else {
            self.aw_lo += 1;
        }
        kw
    }

    fn x2_pop_back(&mut self, sim: &mut Sim) -> KeyWord {
        debug_assert!(self.x2_len() > 0);
        self.x2_l -= 1;
        let kw = sim.rd(self.x2, self.x2_l);
        if self.w > self.aw_lo {
            // Arr-origin: un-keep its restore copy.
            self.w -= 1;
        } else {
            self.snap_in_x2 -= 1;
        }
        kw
    }

    /// Consume one staged key through the inversion check.
    fn admit(&mut self, sim: &mut Sim, f: &mut GrowBuf, checked: bool) -> CheckOutcome {
        debug_assert!(self.r < self.len);
        let kw = sim.rd(self.arr, self.r);
        if !checked || self.x2_len() == 0 {
            self.keep(sim, kw);
            if checked {
                self.debug_assert_x2_order(sim);
            }
            return CheckOutcome::Ok;
        }
        let last = sim.rd(self.x2, self.x2_l - 1).value;
        if sim.lt(last, kw.value) {
            self.keep(sim, kw);
            self.debug_assert_x2_order(sim);
            CheckOutcome::Ok
        } else {
            // Inverted: at least one of the pair is corrupted. Both go
            // to F and neither is restored on rollback.
            let last_kw = self.x2_pop_back(sim);
            f.push(sim, last_kw);
            f.push(sim, kw);
            self.r += 1;
            if self.x2_len() == 0 {
                CheckOutcome::RoundFail
            } else {
                self.debug_assert_x2_order(sim);
                CheckOutcome::RemovedOk
            }
        }
    }

    fn keep(&mut self, sim: &mut Sim, kw: KeyWord) {
        // Lazy removal: the key is re-written at its compacted position
        // as it is read, so the prefix [0, w) is always the rollback
        // image of everything consumed and kept.
        sim.wr_key(self.arr, self.w, kw);
        self.w += 1;
        self.r += 1;
        self.x2_push(sim, kw);
    }

    /// Plain rollback (inversion-check failure): staging buffer becomes
    /// kept-prefix plus unconsumed remainder, safe buffer is restored
    /// from its snapshot minus the keys moved to F.
    fn restore(&mut self, sim: &mut Sim) {
        let tail = self.len - self.r;
        for i in 0..tail {
            let kw = sim.rd(self.arr, self.r + i);
            sim.wr_key(self.arr, self.w + i, kw);
        }
        self.len = self.w + tail;
        self.r = 0;
        self.w = 0;
        let t = self.c + self.snap_in_x2;
        for j in 0..t {
            let kw = sim.rd(self.snap, j);
            sim.wr_key(self.x2, j, kw);
        }
        self.x2_f = 0;
        self.x2_l = t;
        self.c = 0;
        self.snap_in_x2 = t;
        self.aw_lo = 0;
    }

    /// Count keys strictly below `z` across the safe buffer and the
    /// staged remainder (this side's half of the safety check). Strict:
    /// every strictly smaller key is preceded somewhere in the
    /// concatenation by a retained larger one, so a restart taken on
    /// this count always lets the sweep charge the adversary; a
    /// corrupted duplicate of `z` sitting in order offers the sweep
    /// nothing and is harmless to faithful order.
    fn count_below(&self, sim: &mut Sim, z: i64) -> usize {
        let mut count = 0;
        for pos in self.x2_f..self.x2_l {
            let v = sim.rd(self.x2, pos).value;
            if sim.lt(v, z) {
                count += 1;
            }
        }
        for i in self.r..self.len {
            let v = sim.rd(self.arr, i).value;
            if sim.lt(v, z) {
                count += 1;
            }
        }
        count
    }

    /// Safety-check failure path: scan the safe buffer then the staged
    /// remainder for adjacent inversions, exiling each inverted pair to
    /// F, and leave the side rolled back with survivors compacted.
    fn sweep_and_restore(&mut self, sim: &mut Sim, f: &mut GrowBuf, marks: &SweepMarks) {
        marks.clear(sim);
        let mut arr_dest = self.w;
        // Top of the survivor stack: arr-part survivors live at
        // [w, arr_dest); below them, unmarked scanned x2 positions.
        let mut x2_top: Option<usize> = None;
        let mut top_val: i64 = 0;
        let mut have_top = false;
        let mut x2_scan_done = 0usize; // positions [x2_f, x2_f+scanned)

        let snap_idx = |s: &Side, pos: usize| -> Option<usize> {
            let off = pos - s.x2_f;
            if off < s.snap_in_x2 {
                Some(s.c + off)
            } else {
                None
            }
        };
        let arr_idx = |s: &Side, pos: usize| -> usize {
            s.aw_lo + (pos - s.x2_f - s.snap_in_x2)
        };

        // Walk the live safe buffer.
        for pos in self.x2_f..self.x2_l {
            let kw = sim.rd(self.x2, pos);
            x2_scan_done = pos + 1 - self.x2_f;
            if have_top && !sim.lt(top_val, kw.value) {
                // Inverted pair {top, incoming}: both to F.
                let top_pos = x2_top.expect("arr part empty during x2 walk");
                let top_kw = sim.rd(self.x2, top_pos);
                f.push(sim, top_kw);
                f.push(sim, kw);
                // Both pair members leave the restore set: the top and
                // the incoming key are x2 residents here.
                for p in [top_pos, pos] {
                    match snap_idx(self, p) {
                        Some(sj) => marks.set_snap(sim, sj),
                        None => marks.set_arr(sim, arr_idx(self, p) - self.aw_lo),
                    }
                }
                // New top: highest earlier unmarked position.
                x2_top = None;
                have_top = false;
                let mut p = top_pos;
                while p > self.x2_f {
                    p -= 1;
                    let marked = match snap_idx(self, p) {
                        Some(sj) => marks.get_snap(sim, sj),
                        None => marks.get_arr(sim, arr_idx(self, p) - self.aw_lo),
                    };
                    if !marked {
                        x2_top = Some(p);
                        top_val = sim.rd(self.x2, p).value;
                        have_top = true;
                        break;
                    }
                }
            } else {
                x2_top = Some(pos);
                top_val = kw.value;
                have_top = true;
            }
        }
        let _ = x2_scan_done;

        // Continue into the staged remainder, writing survivors down at
        // their compacted positions.
        for i in self.r..self.len {
            let kw = sim.rd(self.arr, i);
            if have_top && !sim.lt(top_val, kw.value) {
                if arr_dest > self.w {
                    arr_dest -= 1;
                    let top_kw = sim.rd(self.arr, arr_dest);
                    f.push(sim, top_kw);
                } else {
                    let top_pos = x2_top.expect("top bookkeeping");
                    let top_kw = sim.rd(self.x2, top_pos);
                    f.push(sim, top_kw);
                    match snap_idx(self, top_pos) {
                        Some(sj) => marks.set_snap(sim, sj),
                        None => marks.set_arr(sim, arr_idx(self, top_pos) - self.aw_lo),
                    }
                }
                f.push(sim, kw);
                // Recompute the top.
                if arr_dest > self.w {
                    top_val = sim.rd(self.arr, arr_dest - 1).value;
                    x2_top = None;
                    have_top = true;
                } else {
                    have_top = false;
                    let mut p = match x2_top {
                        Some(p) => p,
                        None => self.x2_f + x2_scan_done,
                    };
                    x2_top = None;
                    while p > self.x2_f {
                        p -= 1;
                        let marked = match snap_idx(self, p) {
                            Some(sj) => marks.get_snap(sim, sj),
                            None => marks.get_arr(sim, arr_idx(self, p) - self.aw_lo),
                        };
                        if !marked {
                            x2_top = Some(p);
                            top_val = sim.rd(self.x2, p).value;
                            have_top = true;
                            break;
                        }
                    }
                }
            } else {
                sim.wr_key(self.arr, arr_dest, kw);
                arr_dest += 1;
                top_val = kw.value;
                x2_top = None;
                have_top = true;
            }
        }

        // Compact the arr window hit by x2-part marks, then close the
        // gap under the survivor block.
        let win_lo = self.aw_lo;
        let mut new_w = win_lo;
        for p in win_lo..self.w {
            if !marks.get_arr(sim, p - win_lo) {
                if new_w != p {
                    let kw = sim.rd(self.arr, p);
                    sim.wr_key(self.arr, new_w, kw);
                }
                new_w += 1;
            }
        }
        if new_w != self.w {
            for j in 0..arr_dest - self.w {
                let kw = sim.rd(self.arr, self.w + j);
                sim.wr_key(self.arr, new_w + j, kw);
            }
        }
        self.len = new_w + (arr_dest - self.w);
        self.r = 0;
        self.w = 0;

        // Restore x2 from the snapshot minus marks.
        let t = self.c + self.snap_in_x2;
        let mut nl = 0;
        for j in 0..t {
            if !marks.get_snap(sim, j) {
                let kw = sim.rd(self.snap, j);
                sim.wr_key(self.x2, nl, kw);
                nl += 1;
            }
        }
        self.x2_f = 0;
        self.x2_l = nl;
        self.c = 0;
        self.snap_in_x2 = nl;
        self.aw_lo = 0;
    }

    /// Debug invariant: outside the unchecked first fill the safe buffer
    /// is strictly sorted, and its faithful values strictly increase.
    fn debug_assert_x2_order(&self, sim: &Sim) {
        if cfg!(debug_assertions) {
            let mut prev: Option<i64> = None;
            let mut prev_faithful: Option<i64> = None;
            for j in 0..self.x2_len() {
                let kw = sim.peek(self.x2, self.x2_f + j);
                if let Some(p) = prev {
                    debug_assert!(p < kw.value, "x2 out of order");
                }
                prev = Some(kw.value);
                if verify::is_faithful(&kw) {
                    if let Some(p) = prev_faithful {
                        debug_assert!(p < kw.value, "x2 faithful subsequence out of order");
                    }
                    prev_faithful = Some(kw.value);
                }
            }
        }
    }
}

/// Packed bitmap pair (safe memory) used by the safety-check sweep:
/// marks over the x2 snapshot and over the arr window that currently
/// backs x2 entries. Both are at most `s_eff` bits.
struct SweepMarks {
    snap_bits: Region,
    arr_bits: Region,
}

impl SweepMarks {
    fn new(sim: &mut Sim, s_eff: usize) -> SweepMarks {
        let words = s_eff.div_ceil(64).max(1);
        SweepMarks {
            snap_bits: sim
                .alloc(Space::Safe, words)
                .expect("sweep marks fit the safe budget"),
            arr_bits: sim
                .alloc(Space::Safe, words)
                .expect("sweep marks fit the safe budget"),
        }
    }

    fn release(&self, sim: &mut Sim) {
        sim.free(self.snap_bits);
        sim.free(self.arr_bits);
    }

    fn clear(&self, sim: &mut Sim) {
        for i in 0..self.snap_bits.len() {
            sim.wr_meta(self.snap_bits, i, 0);
            sim.wr_meta(self.arr_bits, i, 0);
        }
    }

    fn set(region: Region, sim: &mut Sim, i: usize) {
        let word = sim.rd(region, i / 64).value;
        sim.wr_meta(region, i / 64, word | (1i64 << (i % 64)));
    }

    fn get(region: Region, sim: &mut Sim, i: usize) -> bool {
        sim.rd(region, i / 64).value & (1i64 << (i % 64)) != 0
    }

    fn set_snap(&self, sim: &mut Sim, i: usize) {
        Self::set(self.snap_bits, sim, i);
    }

    fn get_snap(&self, sim: &mut Sim, i: usize) -> bool {
        Self::get(self.snap_bits, sim, i)
    }

    fn set_arr(&self, sim: &mut Sim, i: usize) {
        Self::set(self.arr_bits, sim, i);
    }

    fn get_arr(&self, sim: &mut Sim, i: usize) -> bool {
        Self::get(self.arr_bits, sim, i)
    }
}

/// Purifying-merge state. Exposed so the checks can be unit-tested in
/// isolation; production callers use [`purifying_merge`].
pub struct Purify {
    params: MergeParams,
    x: Side,
    y: Side,
    z1: Region,
    z1_len: usize,
    z2: Region,
    z2_len: usize,
    z: Region,
    z_len: usize,
    f: GrowBuf,
    z_last: Option<i64>,
    checks_on: bool,
    marks: SweepMarks,
}

impl Purify {
    pub fn new(sim: &mut Sim, x: Region, y: Region) -> Purify {
        let params = MergeParams::from_sim(sim);
        let z1 = sim
            .alloc(Space::Faulty, params.z1_cap())
            .expect("faulty space is unbounded");
        let z = sim
            .alloc(Space::Faulty, x.len() + y.len())
            .expect("faulty space is unbounded");
        let z2 = sim
            .alloc(Space::Safe, params.z2_cap())
            .expect("purify safe buffers fit the budget");
        let marks = SweepMarks::new(sim, params.s_eff);
        let xs = Side::new(sim, x, &params);
        let ys = Side::new(sim, y, &params);
        Purify {
            params,
            x: xs,
            y: ys,
            z1,
            z1_len: 0,
            z2,
            z2_len: 0,
            z,
            z_len: 0,
            f: GrowBuf::new(sim, 8),
            z_last: None,
            checks_on: true,
            marks,
        }
    }

    fn side(&mut self, sel: SideSel) -> &mut Side {
        match sel {
            SideSel::X => &mut self.x,
            SideSel::Y => &mut self.y,
        }
    }

    /// Prepare both sides for a round attempt (test hook; the driver
    /// calls this internally).
    pub fn prepare_round(&mut self, sim: &mut Sim) {
        let params = self.params;
        let Purify { f, x, y, .. } = self;
        x.prepare(sim, &params, f);
        y.prepare(sim, &params, f);
    }

    /// Enable or disable the inversion checks (test hook for building
    /// buffer states that would otherwise be rejected on entry).
    pub fn set_checks(&mut self, on: bool) {
        self.checks_on = on;
    }

    /// Feed the next staged key of `side` into its safe buffer through
    /// the inversion check. Exposed for unit tests.
    pub fn inversion_step(&mut self, sim: &mut Sim, sel: SideSel) -> CheckOutcome {
        let checked = self.checks_on;
        let Purify { f, x, y, .. } = self;
        match sel {
            SideSel::X => x.admit(sim, f, checked),
            SideSel::Y => y.admit(sim, f, checked),
        }
    }

    pub fn x2_values(&self, sim: &Sim, sel: SideSel) -> Vec<i64> {
        let s = match sel {
            SideSel::X => &self.x,
            SideSel::Y => &self.y,
        };
        (s.x2_f..s.x2_l).map(|p| sim.peek(s.x2, p).value).collect()
    }

    pub fn fallout_values(&self, sim: &Sim) -> Vec<i64> {
        (0..self.f.len())
            .map(|i| sim.peek(self.f.live(), i).value)
            .collect()
    }

    fn all_exhausted(&self) -> bool {
        self.x.exhausted() && self.y.exhausted()
    }

    /// One iteration: refill both safe buffers under checks, merge into
    /// the safe output buffer, then append it to Z1.
    fn iteration(&mut self, sim: &mut Sim) -> Result<usize, SideSel> {
        sim.cp(Phase::IterationStart);
        let cap = self.params.safe_cap();
        for sel in [SideSel::X, SideSel::Y] {
            loop {
                let s = self.side(sel);
                if s.x2_len() >= cap || s.r >= s.len {
                    break;
                }
                match self.inversion_step(sim, sel) {
                    CheckOutcome::RoundFail => return Err(sel),
                    _ => {}
                }
            }
        }
        // Standard merge in safe memory until Z2 is full. A side that
        // still has upstream keys never drains here: it was refilled to
        // capacity and at most z2_cap of it can leave.
        let mut emitted = 0;
        while self.z2_len < self.params.z2_cap() {
            let xe = self.x.x2_len() > 0;
            let ye = self.y.x2_len() > 0;
            let kw = if xe && ye {
                let xv = self.x.x2_front(sim);
                let yv = self.y.x2_front(sim);
                if sim.le(xv.value, yv.value) {
                    self.x.x2_pop_front(sim)
                } else {
                    self.y.x2_pop_front(sim)
                }
            } else if xe {
                if !self.y.upstream_empty() {
                    break;
                }
                self.x.x2_pop_front(sim)
            } else if ye {
                if !self.x.upstream_empty() {
                    break;
                }
                self.y.x2_pop_front(sim)
            } else {
                break;
            };
            sim.wr_key(self.z2, self.z2_len, kw);
            self.z2_len += 1;
            emitted += 1;
        }
        // Flush Z2 into Z1; the last key written is the safety anchor.
        for i in 0..self.z2_len {
            let kw = sim.rd(self.z2, i);
            sim.wr_key(self.z1, self.z1_len, kw);
            self.z1_len += 1;
            self.z_last = Some(kw.value);
        }
        self.z2_len = 0;
        Ok(emitted)
    }

    /// The safety check: with `z` the last key committed to Z1, fewer
    /// than `s_eff / 2` keys across both staged remainders may sit at or
    /// below `z`. On failure the adjacent-inversion sweep runs and both
    /// sides roll back. Exposed for unit tests.
    pub fn safety_check(&mut self, sim: &mut Sim) -> CheckOutcome {
        sim.cp(Phase::SafetyCheckBegin);
        if self.all_exhausted() {
            return CheckOutcome::Ok;
        }
        let z = match self.z_last {
            Some(z) => z,
            None => return CheckOutcome::Ok,
        };
        let count = self.x.count_below(sim, z) + self.y.count_below(sim, z);
        if count < self.params.s_eff / 2 {
            return CheckOutcome::Ok;
        }
        if std::env::var_os("PURIFY_DEBUG").is_some() {
            for (name, s2) in [("X", &self.x), ("Y", &self.y)] {
                let x2: Vec<i64> = (s2.x2_f..s2.x2_l).map(|p| sim.peek(s2.x2, p).value).collect();
                let rem: Vec<i64> = (s2.r..s2.len).map(|i| sim.peek(s2.arr, i).value).collect();
                eprintln!("FAIL z={z} count={count} side {name}: x2={x2:?} rem={rem:?} w={} aw_lo={} c={} snap_in_x2={} in_pos={}", s2.w, s2.aw_lo, s2.c, s2.snap_in_x2, s2.in_pos);
            }
        }
        let Purify { f, x, y, marks, .. } = self;
        x.sweep_and_restore(sim, f, marks);
        y.sweep_and_restore(sim, f, marks);
        CheckOutcome::RoundFail
    }

    fn rollback_plain(&mut self, sim: &mut Sim) {
        self.x.restore(sim);
        self.y.restore(sim);
    }

    fn flush_z1(&mut self, sim: &mut Sim) {
        for i in 0..self.z1_len {
            let kw = sim.rd(self.z1, i);
            sim.wr_key(self.z, self.z_len, kw);
            self.z_len += 1;
        }
        self.z1_len = 0;
        self.z_last = None;
    }

    fn run(&mut self, sim: &mut Sim) -> (Region, Region) {
        let goal = self.params.z1_goal();
        let restarts_at_entry = sim.metrics.restarts;
        let rounds_at_entry = sim.metrics.rounds;
        let round_limit =
            2 * (self.x.input.len() + self.y.input.len() + 4) as u64 + 2 * self.params.delta;
        loop {
            assert!(
                sim.metrics.restarts - restarts_at_entry <= 2 * self.params.delta + 2,
                "purifying merge restarted more often than the budget allows"
            );
            assert!(
                sim.metrics.rounds - rounds_at_entry <= round_limit,
                "purifying merge ran more rounds than the inputs can feed"
            );
            sim.metrics.rounds += 1;
            sim.cp(Phase::RoundStart);
            self.prepare_round(sim);
            // Round body: iterate until Z1 reaches its goal or the
            // inputs run dry; a failed check restarts the round.
            let failed = loop {
                match self.iteration(sim) {
                    Err(_side) => break true,
                    Ok(emitted) => {
                        if self.z1_len >= goal || self.all_exhausted() {
                            break false;
                        }
                        if emitted == 0 {
                            // A first-fill validation can empty a safe
                            // buffer mid-round; end the round so the next
                            // one refills it.
                            break false;
                        }
                    }
                }
            };
            if failed {
                sim.metrics.restarts += 1;
                self.z1_len = 0;
                self.z_last = None;
                self.rollback_plain(sim);
                continue;
            }
            match self.safety_check(sim) {
                CheckOutcome::Ok => {
                    self.flush_z1(sim);
                    if self.all_exhausted() {
                        break;
                    }
                }
                _ => {
                    sim.metrics.restarts += 1;
                    self.z1_len = 0;
                    self.z_last = None;
                    // Sides already swept and rolled back.
                }
            }
        }
        (self.z.slice(0, self.z_len), self.f.live())
    }

    fn release(&self, sim: &mut Sim) {
        self.x.release(sim);
        self.y.release(sim);
        sim.free(self.z2);
        self.marks.release(sim);
    }
}

/// Merge two faithfully ordered sequences into a faithfully ordered `Z`
/// plus a fallout sequence `F` of keys the checks refused (at most two
/// per corruption). Every input key lands in exactly one of the two.
pub fn purifying_merge(
    sim: &mut Sim,
    x: Region,
    y: Region,
) -> Result<(Region, Region), SortError> {
    if !verify::assert_faithfully_ordered(sim, x) || !verify::assert_faithfully_ordered(sim, y) {
        return Err(SortError::ContractViolation);
    }
    let mut st = Purify::new(sim, x, y);
    let out = st.run(sim);
    st.release(sim);
    Ok(out)
}

/// Merge a faithfully ordered sequence `x` with an arbitrary sequence
/// `y` into `dst`: rounds of pulling the smallest remaining `y` keys
/// into safe pivots, partitioning `x` among the pivot buckets, and
/// emitting buckets and pivots in order.
pub fn bucket_merge(
    sim: &mut Sim,
    x: Region,
    y: Region,
    dst: Region,
    dst_off: usize,
) -> Result<usize, SortError> {
    if !verify::assert_faithfully_ordered(sim, x) {
        return Err(SortError::ContractViolation);
    }
    let s = sim.s_eff();
    let delta = sim.delta() as usize;
    let n2 = y.len();
    let mut out = dst_off;

    if n2 == 0 {
        for i in 0..x.len() {
            let kw = sim.rd(x, i);
            sim.wr_key(dst, out, kw);
            out += 1;
        }
        return Ok(out - dst_off);
    }

    // Segment queue over y: up to s nodes, one per segment, keyed by the
    // segment minimum (a safe copy; the stored position makes removal
    // immune to later corruption of the cell).
    let seg_size = n2.div_ceil(s);
    let n_segs = n2.div_ceil(seg_size);
    let mut heap = SafeHeap::new(sim, s);
    for si in 0..n_segs {
        let lo = si * seg_size;
        let len = seg_size.min(n2 - lo);
        if len > 0 {
            let (min_kw, pos) = segment_min(sim, y, lo, len);
            heap.insert(sim, min_kw, si as i64, len as i64, pos as i64);
        }
    }

    let pivots = sim
        .alloc(Space::Safe, s)
        .expect("pivot buffer fits the safe budget");
    let mut buckets: Vec<GrowBuf> = (0..=s).map(|_| GrowBuf::new(sim, 8)).collect();

    let mut cursor = 0usize; // consumed prefix of x
    let rounds = n2.div_ceil(s);
    for _ in 0..rounds {
        sim.cp(Phase::BucketRoundStart);
        // Extract up to s smallest remaining y keys, insertion-sorted
        // into the pivot buffer.
        let mut m = 0usize;
        while m < s {
            let Some(node) = heap.pop_min(sim) else {
                break;
            };
            let min_kw = node.key;
            let (seg, len, pos) = (node.a as usize, node.b as usize, node.c as usize);
            // Shift the segment over the removed cell.
            let lo = seg * seg_size;
            for j in pos..len - 1 {
                let kw = sim.rd(y, lo + j + 1);
                sim.wr_key(y, lo + j, kw);
            }
            let len = len - 1;
            if len > 0 {
                let (nmin, npos) = segment_min(sim, y, lo, len);
                heap.insert(sim, nmin, seg as i64, len as i64, npos as i64);
            }
            // Insertion sort into pivots.
            let mut j = m;
            while j > 0 {
                let pv = sim.rd(pivots, j - 1);
                if sim.le(pv.value, min_kw.value) {
                    break;
                }
                sim.wr_key(pivots, j, pv);
                j -= 1;
            }
            sim.wr_key(pivots, j, min_kw);
            m += 1;
        }
        debug_assert!(m > 0, "segment queue drained early");
        if m == 0 {
            break;
        }

        // Partition x among the m+1 buckets. Bucket i covers
        // [pivot[i-1], pivot[i]); bucket 0 is open below, bucket m open
        // above. The scan stops once the overflow bucket holds delta+1
        // keys.
        let mut last_b = 0usize;
        let dir_limit = (s.max(2)).ilog2() as usize + usize::from(!s.is_power_of_two());
        while cursor < x.len() {
            let kw = sim.rd(x, cursor);
            let b = find_bucket(sim, pivots, m, last_b, dir_limit, kw.value);
            buckets[b].push(sim, kw);
            debug_assert!(buckets[m].len() <= delta + 1, "overflow bucket overfull");
            cursor += 1;
            last_b = b;
            if b == m && buckets[m].len() == delta + 1 {
                break;
            }
        }

        // Emit buckets and pivots in order.
        for i in 0..m {
            let bl = buckets[i].live();
            for j in 0..bl.len() {
                let kw = sim.rd(bl, j);
                sim.wr_key(dst, out, kw);
                out += 1;
            }
            let pv = sim.rd(pivots, i);
            assert!(
                out < dst.len(),
                "bucket overflow: out={out} dst={} x={} y={} cursor={cursor} m={m} i={i} heap={}",
                dst.len(),
                x.len(),
                y.len(),
                heap.len(),
            );
            sim.wr_key(dst, out, pv);
            out += 1;
        }
        // Keys beyond the last pivot rejoin the head of x's remainder;
        // they were the most recently consumed positions, so faithful
        // order is preserved.
        let t = buckets[m].len();
        if t > 0 {
            let bl = buckets[m].live();
            for j in 0..t {
                let kw = sim.rd(bl, j);
                sim.wr_key(x, cursor - t + j, kw);
            }
            cursor -= t;
        }
        for b in buckets.iter_mut() {
            b.clear();
        }
    }

    // Whatever is left of x follows everything emitted.
    while cursor < x.len() {
        let kw = sim.rd(x, cursor);
        sim.wr_key(dst, out, kw);
        out += 1;
        cursor += 1;
    }

    heap.release(sim);
    sim.free(pivots);
    Ok(out - dst_off)
}

fn segment_min(sim: &mut Sim, y: Region, lo: usize, len: usize) -> (KeyWord, usize) {
    let mut best = sim.rd(y, lo);
    let mut pos = 0;
    for j in 1..len {
        let kw = sim.rd(y, lo + j);
        if sim.lt(kw.value, best.value) {
            best = kw;
            pos = j;
        }
    }
    (best, pos)
}

/// Bucket search: last bucket, then a bounded directional scan, then a
/// binary search over the pivots.
fn find_bucket(
    sim: &mut Sim,
    pivots: Region,
    m: usize,
    last: usize,
    dir_limit: usize,
    v: i64,
) -> usize {
    let lo_of = |sim: &mut Sim, b: usize| -> Option<i64> {
        if b == 0 {
            None
        } else {
            Some(sim.rd(pivots, b - 1).value)
        }
    };
    let in_bucket = |sim: &mut Sim, b: usize, v: i64| -> bool {
        let below_hi = if b == m {
            true
        } else {
            let hi = sim.rd(pivots, b).value;
            sim.lt(v, hi)
        };
        if !below_hi {
            return false;
        }
        match lo_of(sim, b) {
            None => true,
            Some(lo) => sim.le(lo, v),
        }
    };
    if in_bucket(sim, last, v) {
        return last;
    }
    // Directional neighbors.
    let go_right = if last == m {
        false
    } else {
        let hi = sim.rd(pivots, last).value;
        sim.le(hi, v)
    };
    for step in 1..=dir_limit {
        let b = if go_right {
            last + step
        } else {
            match last.checked_sub(step) {
                Some(b) => b,
                None => break,
            }
        };
        if b > m {
            break;
        }
        if in_bucket(sim, b, v) {
            return b;
        }
    }
    // Binary search: first pivot strictly greater than v.
    sim.metrics.binary_searches += 1;
    let mut lo = 0usize;
    let mut hi = m;
    while lo < hi {
        let mid = (lo + hi) / 2;
        let pv = sim.rd(pivots, mid).value;
        if sim.le(pv, v) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Observer for per-merge contract checking.
pub trait MergeObserver {
    fn on_purify(&mut self, sim: &Sim, call: &PurifyCall);
}

impl<F: FnMut(&Sim, &PurifyCall)> MergeObserver for F {
    fn on_purify(&mut self, sim: &Sim, call: &PurifyCall) {
        self(sim, call)
    }
}

/// Resilient merge: purifying merge, then bucket-merge the fallout back
/// in. Writes exactly `x.len() + y.len()` keys into `dst`.
pub fn s_merge<'o>(
    sim: &mut Sim,
    x: Region,
    y: Region,
    dst: Region,
    mut observer: Option<&mut (dyn MergeObserver + 'o)>,
) -> Result<(), SortError> {
    assert!(dst.len() >= x.len() + y.len(), "dst too small");
    let mark = sim.faulty_mark();
    let alpha_before = sim.metrics.alpha_used;
    let restarts_before = sim.metrics.restarts;
    let (z, f) = purifying_merge(sim, x, y)?;
    if let Some(obs) = observer.as_deref_mut() {
        let call = PurifyCall {
            x,
            y,
            z,
            f,
            alpha_before,
            alpha_after: sim.metrics.alpha_used,
            restarts: sim.metrics.restarts - restarts_before,
        };
        obs.on_purify(sim, &call);
    }
    let written = bucket_merge(sim, z, f, dst, 0)?;
    debug_assert_eq!(written, x.len() + y.len());
    sim.faulty_release(mark);
    Ok(())
}

/// Resilient sort: bottom-up mergesort over two ping-pong buffers, with
/// run bookkeeping in a handful of safe scalars.
pub fn s_sort<'o>(
    sim: &mut Sim,
    input: Region,
    mut observer: Option<&mut (dyn MergeObserver + 'o)>,
) -> Result<Region, SortError> {
    let n = input.len();
    if n <= 1 {
        return Ok(input);
    }
    let mut src = sim
        .alloc(Space::Faulty, n)
        .expect("faulty space is unbounded");
    let mut dst = sim
        .alloc(Space::Faulty, n)
        .expect("faulty space is unbounded");
    for i in 0..n {
        let kw = sim.rd(input, i);
        sim.wr_key(src, i, kw);
    }
    let mut width = 1usize;
    while width < n {
        let mut i = 0usize;
        while i < n {
            let left = width.min(n - i);
            let right = width.min(n - i - left);
            if right == 0 {
                // Odd run: carry it over.
                for j in 0..left {
                    let kw = sim.rd(src, i + j);
                    sim.wr_key(dst, i + j, kw);
                }
            } else {
                s_merge(
                    sim,
                    src.slice(i, left),
                    src.slice(i + left, right),
                    dst.slice(i, left + right),
                    observer.as_deref_mut(),
                )?;
            }
            i += left + right;
        }
        std::mem::swap(&mut src, &mut dst);
        width *= 2;
    }
    Ok(src)
}
