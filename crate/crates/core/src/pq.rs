//! Resilient priority queue.
//!
//! Keys live in a cascade of layers, each with an up buffer (large keys
//! moving away from the front) and a down buffer (small keys about to
//! leave). Newly inserted keys gather in an immediate insertion buffer
//! and in up to `S` overflow buffers indexed by the safe queue `P_I`;
//! the smallest positions of `U_0` and `D_0` are covered by safe window
//! queues so a deletemin touches only safe minima and one faulty cell.
//! Buffer sizes and layer links are replicated `2*delta+1` times in
//! faulty memory; the three queues and all cursors live in safe memory.
//!
//! Size thresholds double per layer. When an up buffer overflows or a
//! down buffer underflows, the push/pull primitives remerge the layer
//! with its neighbor using the resilient merge, cascading outward until
//! the size invariants hold again.

use thiserror::Error;

use crate::fram::{KeyWord, Phase, Region, Sim, Space};
use crate::reliable::ReliableCell;
use crate::safeheap::SafeHeap;
use crate::sort::{s_merge, s_sort};
use crate::verify;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PqError {
    #[error("queue is empty")]
    EmptyQueue,
    #[error("push/pull invoked without its size-invariant trigger")]
    ContractViolation,
}

/// Parameters fixed between global rebuilds.
#[derive(Debug, Clone, Copy)]
pub struct PqParams {
    pub s_eff: usize,
    pub delta: u64,
    /// Key count at the last rebuild, never below 16.
    pub n_ref: usize,
    /// Immediate-buffer capacity: ceil(log2 n_ref) + ceil(delta/s_eff).
    pub cap_i0: usize,
    /// Layer-0 size threshold; layer i uses `s0 << i`.
    pub s0: u64,
}

impl PqParams {
    fn compute(sim: &Sim, n_ref: usize) -> PqParams {
        let s_eff = sim.s_eff();
        let delta = sim.delta();
        let n_ref = n_ref.max(16);
        let log_n = ceil_log2(n_ref);
        let d_over_s = (delta as usize).div_ceil(s_eff);
        let cap_i0 = log_n + d_over_s;
        let log_s = ceil_log2(s_eff);
        let base = s_eff as u64 * (log_n as u64) * (log_n as u64)
            + delta * (log_s as u64 + d_over_s as u64);
        PqParams {
            s_eff,
            delta,
            n_ref,
            cap_i0,
            s0: 2 * base,
        }
    }

    pub fn threshold(&self, layer: usize) -> u64 {
        self.s0 << layer
    }
}

fn ceil_log2(n: usize) -> usize {
    debug_assert!(n >= 1);
    if n <= 1 {
        return 0;
    }
    (n - 1).ilog2() as usize + 1
}

/// One layer: up and down buffers plus reliably written structural data.
struct Layer {
    u: Region,
    d: Region,
    /// Safe working mirrors of the live lengths. The reliable cells are
    /// the durable record, rewritten whenever a buffer changes and read
    /// back at push/pull entry.
    u_len: usize,
    d_len: usize,
    size_u: ReliableCell,
    size_d: ReliableCell,
    link_prev: ReliableCell,
    link_next: ReliableCell,
}

impl Layer {
    fn new_empty(sim: &mut Sim, delta: u64, index: usize) -> Layer {
        let u = sim.alloc(Space::Faulty, 0).expect("faulty space");
        let d = sim.alloc(Space::Faulty, 0).expect("faulty space");
        Layer {
            u,
            d,
            u_len: 0,
            d_len: 0,
            size_u: ReliableCell::new(sim, delta, 0),
            size_d: ReliableCell::new(sim, delta, 0),
            link_prev: ReliableCell::new(sim, delta, index as i64 - 1),
            link_next: ReliableCell::new(sim, delta, -1),
        }
    }

    fn set_u(&mut self, sim: &mut Sim, region: Region, len: usize) {
        self.u = region;
        self.u_len = len;
        self.size_u.write(sim, len as i64);
    }

    fn set_d(&mut self, sim: &mut Sim, region: Region, len: usize) {
        self.d = region;
        self.d_len = len;
        self.size_d.write(sim, len as i64);
    }

    fn u_live(&self) -> Region {
        self.u.slice(0, self.u_len)
    }

    fn d_live(&self) -> Region {
        self.d.slice(0, self.d_len)
    }
}

/// Safe window queue over the smallest `delta + 1` positions of a host
/// buffer: up to `s_eff` sub-buffers of at most `ceil(delta/s_eff) + 1`
/// keys, each represented by a safe node holding a copy of its minimum.
/// `p` marks the first host position beyond the window.
struct Window {
    heap: SafeHeap,
    p: usize,
}

impl Window {
    fn build(sim: &mut Sim, host: Region, host_len: usize, params: &PqParams) -> Window {
        let sub_cap = (params.delta as usize).div_ceil(params.s_eff) + 1;
        let mut heap = SafeHeap::new(sim, params.s_eff);
        let window_end = host_len.min(params.delta as usize + 1);
        let mut start = 0usize;
        while start < window_end {
            let len = sub_cap.min(window_end - start);
            let (min_kw, pos) = scan_min(sim, host, start, len);
            heap.insert(sim, min_kw, start as i64, len as i64, pos as i64);
            start += len;
        }
        Window {
            heap,
            p: window_end,
        }
    }

    fn release(self, sim: &mut Sim) {
        self.heap.release(sim);
    }

    fn peek_min(&mut self, sim: &mut Sim) -> Option<KeyWord> {
        self.heap.peek_min(sim).map(|n| n.key)
    }

    /// Remove the window minimum. The vacated slot is backfilled from
    /// the first beyond-window key when one exists; otherwise the
    /// sub-buffer compacts. Returns the safe copy of the minimum.
    fn remove_min(&mut self, sim: &mut Sim, host: Region, host_live_end: usize) -> KeyWord {
        let node = self.heap.pop_min(sim).expect("window queue not empty");
        let (start, len, pos) = (node.a as usize, node.b as usize, node.c as usize);
        if self.p < host_live_end {
            let fill = sim.rd(host, self.p);
            sim.wr_key(host, start + pos, fill);
            self.p += 1;
            let (min_kw, mpos) = scan_min(sim, host, start, len);
            self.heap
                .insert(sim, min_kw, start as i64, len as i64, mpos as i64);
        } else {
            for j in pos..len - 1 {
                let kw = sim.rd(host, start + j + 1);
                sim.wr_key(host, start + j, kw);
            }
            let len = len - 1;
            if len > 0 {
                let (min_kw, mpos) = scan_min(sim, host, start, len);
                self.heap
                    .insert(sim, min_kw, start as i64, len as i64, mpos as i64);
            }
        }
        node.key
    }

    /// Drain every window key in ascending order of the safe minima
    /// into `dest`, leaving the heap empty. Restores the host's full
    /// order ahead of push/pull and at collection time.
    fn drain_sorted(&mut self, sim: &mut Sim, host: Region, dest: Region, mut out: usize) -> usize {
        while let Some(node) = self.heap.pop_min(sim) {
            let (start, len, pos) = (node.a as usize, node.b as usize, node.c as usize);
            sim.wr_key(dest, out, node.key);
            out += 1;
            for j in pos..len - 1 {
                let kw = sim.rd(host, start + j + 1);
                sim.wr_key(host, start + j, kw);
            }
            let len = len - 1;
            if len > 0 {
                let (min_kw, mpos) = scan_min(sim, host, start, len);
                self.heap
                    .insert(sim, min_kw, start as i64, len as i64, mpos as i64);
            }
        }
        out
    }
}

fn scan_min(sim: &mut Sim, region: Region, start: usize, len: usize) -> (KeyWord, usize) {
    debug_assert!(len > 0);
    let mut best = sim.rd(region, start);
    let mut pos = 0usize;
    for j in 1..len {
        let kw = sim.rd(region, start + j);
        if sim.lt(kw.value, best.value) {
            best = kw;
            pos = j;
        }
    }
    (best, pos)
}

/// Which structure a deletemin drew from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Immediate(usize),
    Insertion,
    WindowUp,
    WindowDown,
}

/// The resilient priority queue. All key storage is simulated memory;
/// the struct itself holds handles and safe-scalar bookkeeping only.
pub struct Pq {
    params: PqParams,
    i0: Region,
    i0_len: usize,
    p_i: SafeHeap,
    layers: Vec<Layer>,
    win_u: Option<Window>,
    win_d: Option<Window>,
    /// Physical extents of the layer-0 hosts (window backfills consume
    /// the suffix without shifting cells).
    u0_live_end: usize,
    d0_live_end: usize,
    count: usize,
}

impl Pq {
    pub fn new(sim: &mut Sim) -> Pq {
        let empty = sim.alloc(Space::Faulty, 0).expect("faulty space");
        Self::from_keys(sim, empty)
    }

    /// Build from existing keys: sort resiliently and distribute among
    /// the down buffers, filling each layer to its threshold and leaving
    /// the remainder in the last layer.
    pub fn from_keys(sim: &mut Sim, keys: Region) -> Pq {
        let params = PqParams::compute(sim, keys.len());
        let i0 = sim
            .alloc(Space::Faulty, params.cap_i0)
            .expect("faulty space");
        let p_i = SafeHeap::new(sim, params.s_eff);
        let mut pq = Pq {
            params,
            i0,
            i0_len: 0,
            p_i,
            layers: Vec::new(),
            win_u: None,
            win_d: None,
            u0_live_end: 0,
            d0_live_end: 0,
            count: keys.len(),
        };
        let sorted = s_sort(sim, keys, None).expect("fresh keys are faithfully ordered");
        pq.distribute(sim, sorted);
        pq
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn params(&self) -> &PqParams {
        &self.params
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_sizes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.u_len, l.d_len)).collect()
    }

    /// Lay a sorted region out into fresh layers and rebuild windows.
    fn distribute(&mut self, sim: &mut Sim, sorted: Region) {
        let delta = self.params.delta;
        self.layers.clear();
        let mut off = 0usize;
        let mut idx = 0usize;
        loop {
            let mut layer = Layer::new_empty(sim, delta, idx);
            let rem = sorted.len() - off;
            let cap = self.params.threshold(idx) as usize;
            let take = rem.min(cap);
            if take > 0 {
                let d = sim.alloc(Space::Faulty, take).expect("faulty space");
                for j in 0..take {
                    let kw = sim.rd(sorted, off + j);
                    sim.wr_key(d, j, kw);
                }
                layer.set_d(sim, d, take);
            }
            off += take;
            self.layers.push(layer);
            if off == sorted.len() {
                break;
            }
            idx += 1;
        }
        self.relink(sim);
        self.u0_live_end = self.layers[0].u_len;
        self.d0_live_end = self.layers[0].d_len;
        let params = self.params;
        let l0u = (self.layers[0].u, self.layers[0].u_len);
        let l0d = (self.layers[0].d, self.layers[0].d_len);
        self.win_u = Some(Window::build(sim, l0u.0, l0u.1, &params));
        self.win_d = Some(Window::build(sim, l0d.0, l0d.1, &params));
    }

    fn relink(&mut self, sim: &mut Sim) {
        let k = self.layers.len();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.link_prev.write(sim, i as i64 - 1);
            layer
                .link_next
                .write(sim, if i + 1 < k { (i + 1) as i64 } else { -1 });
        }
    }

    /// Append a key to the immediate insertion buffer, spilling into the
    /// insertion queue or the layer structure when full. Returns the
    /// fresh origin id (the harness mirrors it into the oracle).
    pub fn insert(&mut self, sim: &mut Sim, value: i64) -> u32 {
        sim.cp(Phase::PqOpBegin);
        let kw = sim.mint_key(value);
        let origin = verify::origin_of(&kw);
        debug_assert!(self.i0_len < self.params.cap_i0);
        sim.wr_key(self.i0, self.i0_len, kw);
        self.i0_len += 1;
        self.count += 1;
        if self.i0_len == self.params.cap_i0 {
            self.spill_immediate(sim);
        }
        self.maybe_rebuild(sim);
        origin
    }

    fn spill_immediate(&mut self, sim: &mut Sim) {
        if self.p_i.len() < self.params.s_eff {
            // Fresh overflow buffer keyed by its minimum.
            let buf = sim
                .alloc(Space::Faulty, self.params.cap_i0)
                .expect("faulty space");
            for j in 0..self.i0_len {
                let kw = sim.rd(self.i0, j);
                sim.wr_key(buf, j, kw);
            }
            let (min_kw, pos) = scan_min(sim, buf, 0, self.i0_len);
            self.p_i.insert(
                sim,
                min_kw,
                buf.base_addr() as i64,
                self.i0_len as i64,
                pos as i64,
            );
            self.i0_len = 0;
            return;
        }
        self.flush_into_u0(sim);
    }

    /// The full spill: sort everything on the insertion side together
    /// with U_0's window keys, merge with U_0's suffix, and install the
    /// result as the new U_0; push if it overflows.
    fn flush_into_u0(&mut self, sim: &mut Sim) {
        let params = self.params;
        let mut win_u = self.win_u.take().expect("window queues exist");
        let l0u = self.layers[0].u;
        let suffix_start = win_u.p;
        let suffix_len = self.u0_live_end - suffix_start;
        let window_keys = self.layers[0].u_len - suffix_len;
        let mut total = self.i0_len + window_keys;
        for i in 0..self.p_i.len() {
            total += self.p_i.node_at(sim, i).b as usize;
        }

        let gather = sim.alloc(Space::Faulty, total).expect("faulty space");
        let mut off = 0usize;
        for j in 0..self.i0_len {
            let kw = sim.rd(self.i0, j);
            sim.wr_key(gather, off, kw);
            off += 1;
        }
        self.i0_len = 0;
        while let Some(node) = self.p_i.pop_min(sim) {
            let buf = Region::from_raw(Space::Faulty, node.a as usize, node.b as usize);
            for j in 0..buf.len() {
                let kw = sim.rd(buf, j);
                sim.wr_key(gather, off, kw);
                off += 1;
            }
        }
        off = win_u.drain_sorted(sim, l0u, gather, off);
        debug_assert_eq!(off, total);
        win_u.release(sim);

        let sorted = s_sort(sim, gather, None).expect("gathered keys sort");
        let new_len = total + suffix_len;
        let new_u = sim.alloc(Space::Faulty, new_len).expect("faulty space");
        s_merge(
            sim,
            sorted,
            l0u.slice(suffix_start, suffix_len),
            new_u,
            None,
        )
        .expect("flush inputs are faithfully ordered");
        self.layers[0].set_u(sim, new_u, new_len);
        self.u0_live_end = new_len;

        if (self.layers[0].u_len as u64) <= params.threshold(0) / 2 {
            let (u, ul) = (self.layers[0].u, self.layers[0].u_len);
            self.win_u = Some(Window::build(sim, u, ul, &params));
        } else {
            // U_0 overflowed: restore D_0's full order, push, and
            // rebuild both windows over the replaced buffers.
            self.restore_d0_order(sim);
            self.push(sim, 0).expect("overflow trigger checked");
            self.u0_live_end = self.layers[0].u_len;
            self.d0_live_end = self.layers[0].d_len;
            let (u, ul) = (self.layers[0].u, self.layers[0].u_len);
            let (d, dl) = (self.layers[0].d, self.layers[0].d_len);
            self.win_u = Some(Window::build(sim, u, ul, &params));
            self.win_d = Some(Window::build(sim, d, dl, &params));
        }
    }

    /// Rewrite D_0 as one fully ordered buffer: window keys extracted in
    /// safe order, then the untouched suffix. Consumes the window queue.
    fn restore_d0_order(&mut self, sim: &mut Sim) {
        let mut win = self.win_d.take().expect("window queues exist");
        let l0d = self.layers[0].d;
        let total = self.layers[0].d_len;
        let fresh = sim.alloc(Space::Faulty, total).expect("faulty space");
        let drained = win.drain_sorted(sim, l0d, fresh, 0);
        let suffix_len = self.d0_live_end - win.p;
        debug_assert_eq!(drained + suffix_len, total);
        for j in 0..suffix_len {
            let kw = sim.rd(l0d, win.p + j);
            sim.wr_key(fresh, drained + j, kw);
        }
        win.release(sim);
        self.layers[0].set_d(sim, fresh, total);
        self.d0_live_end = total;
    }

    /// Remove and return the minimum visible key (the minimum faithful
    /// key in the queue, or an even smaller corrupted one).
    pub fn delete_min(&mut self, sim: &mut Sim) -> Result<i64, PqError> {
        self.delete_min_traced(sim).map(|kw| kw.value)
    }

    /// Deletemin variant returning the tagged instance for the oracle.
    pub(crate) fn delete_min_traced(&mut self, sim: &mut Sim) -> Result<KeyWord, PqError> {
        sim.cp(Phase::PqOpBegin);
        if self.count == 0 {
            return Err(PqError::EmptyQueue);
        }
        // Candidates: full scan of the immediate buffer, peekmin of the
        // three safe queues. Fixed preference order on ties.
        let mut best: Option<(KeyWord, Source)> = None;
        for j in 0..self.i0_len {
            let kw = sim.rd(self.i0, j);
            let better = match &best {
                None => true,
                Some((b, _)) => sim.lt(kw.value, b.value),
            };
            if better {
                best = Some((kw, Source::Immediate(j)));
            }
        }
        if let Some(node) = self.p_i.peek_min(sim) {
            let better = match &best {
                None => true,
                Some((b, _)) => sim.lt(node.key.value, b.value),
            };
            if better {
                best = Some((node.key, Source::Insertion));
            }
        }
        if let Some(kw) = self.win_u.as_mut().expect("windows exist").peek_min(sim) {
            let better = match &best {
                None => true,
                Some((b, _)) => sim.lt(kw.value, b.value),
            };
            if better {
                best = Some((kw, Source::WindowUp));
            }
        }
        if let Some(kw) = self.win_d.as_mut().expect("windows exist").peek_min(sim) {
            let better = match &best {
                None => true,
                Some((b, _)) => sim.lt(kw.value, b.value),
            };
            if better {
                best = Some((kw, Source::WindowDown));
            }
        }
        let (kw, source) = best.expect("count > 0 implies a candidate");
        match source {
            Source::Immediate(pos) => {
                for j in pos..self.i0_len - 1 {
                    let k = sim.rd(self.i0, j + 1);
                    sim.wr_key(self.i0, j, k);
                }
                self.i0_len -= 1;
            }
            Source::Insertion => self.remove_from_insertion(sim),
            Source::WindowUp => {
                let win = self.win_u.as_mut().expect("windows exist");
                win.remove_min(sim, self.layers[0].u, self.u0_live_end);
                let len = self.layers[0].u_len - 1;
                let region = self.layers[0].u;
                self.layers[0].set_u(sim, region, len);
            }
            Source::WindowDown => {
                let win = self.win_d.as_mut().expect("windows exist");
                win.remove_min(sim, self.layers[0].d, self.d0_live_end);
                let len = self.layers[0].d_len - 1;
                let region = self.layers[0].d;
                self.layers[0].set_d(sim, region, len);
                if self.layers.len() > 1
                    && (self.layers[0].d_len as u64) < self.params.threshold(0) / 2
                {
                    self.restore_d0_order(sim);
                    self.pull(sim, 0).expect("underflow trigger checked");
                    let params = self.params;
                    self.d0_live_end = self.layers[0].d_len;
                    let (d, dl) = (self.layers[0].d, self.layers[0].d_len);
                    self.win_d = Some(Window::build(sim, d, dl, &params));
                }
            }
        }
        self.count -= 1;
        self.maybe_rebuild(sim);
        Ok(kw)
    }

    /// Deletemin case where the minimum sits in an insertion buffer:
    /// the node's stored position removes the right cell even if it was
    /// corrupted since, and the node's safe copy restores the faithful
    /// value. The shrunken buffer is re-fed from the immediate buffer
    /// or folded back into it.
    fn remove_from_insertion(&mut self, sim: &mut Sim) {
        let node = self.p_i.pop_min(sim).expect("peeked nonempty");
        let (base, len, pos) = (node.a as usize, node.b as usize, node.c as usize);
        let buf = Region::from_raw(Space::Faulty, base, self.params.cap_i0);
        for j in pos..len - 1 {
            let kw = sim.rd(buf, j + 1);
            sim.wr_key(buf, j, kw);
        }
        let mut c = len - 1;
        let half = self.params.cap_i0 / 2;
        if c >= half {
            let (min_kw, mpos) = scan_min(sim, buf, 0, c);
            self.p_i
                .insert(sim, min_kw, base as i64, c as i64, mpos as i64);
        } else if self.i0_len > 0 {
            let take = self.i0_len.min(half);
            for _ in 0..take {
                self.i0_len -= 1;
                let kw = sim.rd(self.i0, self.i0_len);
                sim.wr_key(buf, c, kw);
                c += 1;
            }
            let (min_kw, mpos) = scan_min(sim, buf, 0, c);
            self.p_i
                .insert(sim, min_kw, base as i64, c as i64, mpos as i64);
        } else if c > 0 {
            for j in 0..c {
                let kw = sim.rd(buf, j);
                sim.wr_key(self.i0, j, kw);
            }
            self.i0_len = c;
        }
    }

    fn maybe_rebuild(&mut self, sim: &mut Sim) {
        if self.count >= 2 * self.params.n_ref || self.count <= self.params.n_ref / 2 {
            self.rebuild_global(sim);
        }
    }

    /// Full rebuild: gather every live key, sort, redistribute, and
    /// recompute all thresholds from the new key count.
    pub fn rebuild_global(&mut self, sim: &mut Sim) {
        sim.metrics.rebuilds += 1;
        let gather = sim.alloc(Space::Faulty, self.count).expect("faulty space");
        let mut off = 0usize;
        for j in 0..self.i0_len {
            let kw = sim.rd(self.i0, j);
            sim.wr_key(gather, off, kw);
            off += 1;
        }
        self.i0_len = 0;
        while let Some(node) = self.p_i.pop_min(sim) {
            let buf = Region::from_raw(Space::Faulty, node.a as usize, node.b as usize);
            for j in 0..buf.len() {
                let kw = sim.rd(buf, j);
                sim.wr_key(gather, off, kw);
                off += 1;
            }
        }
        let mut win_u = self.win_u.take().expect("windows exist");
        off = win_u.drain_sorted(sim, self.layers[0].u, gather, off);
        let up = win_u.p;
        win_u.release(sim);
        for j in up..self.u0_live_end {
            let kw = sim.rd(self.layers[0].u, j);
            sim.wr_key(gather, off, kw);
            off += 1;
        }
        let mut win_d = self.win_d.take().expect("windows exist");
        off = win_d.drain_sorted(sim, self.layers[0].d, gather, off);
        let dp = win_d.p;
        win_d.release(sim);
        for j in dp..self.d0_live_end {
            let kw = sim.rd(self.layers[0].d, j);
            sim.wr_key(gather, off, kw);
            off += 1;
        }
        for i in 1..self.layers.len() {
            for (region, len) in [
                (self.layers[i].u, self.layers[i].u_len),
                (self.layers[i].d, self.layers[i].d_len),
            ] {
                for j in 0..len {
                    let kw = sim.rd(region, j);
                    sim.wr_key(gather, off, kw);
                    off += 1;
                }
            }
        }
        assert_eq!(off, self.count, "rebuild lost track of keys");

        self.params = PqParams::compute(sim, self.count);
        self.i0 = sim
            .alloc(Space::Faulty, self.params.cap_i0)
            .expect("faulty space");
        let sorted = s_sort(sim, gather, None).expect("gathered keys sort");
        self.distribute(sim, sorted);
    }

    fn read_sizes(&self, sim: &mut Sim, i: usize) -> (usize, usize) {
        let u = self.layers[i].size_u.read(sim) as usize;
        let d = self.layers[i].size_d.read(sim) as usize;
        debug_assert_eq!(u, self.layers[i].u_len);
        debug_assert_eq!(d, self.layers[i].d_len);
        (u, d)
    }

    /// Push: U_i overflowed. Merge U_i, D_i and U_{i+1}; the smallest
    /// |D_i| - delta keys become the new D_i, the rest the new U_{i+1}
    /// (the new last layer's D when a layer is created). Cascades
    /// outward, then pulls any down buffer the cascade left underfull.
    /// Layer-0 buffers must be in full order (windows drained).
    pub fn push(&mut self, sim: &mut Sim, i: usize) -> Result<(), PqError> {
        if (self.layers[i].u_len as u64) <= self.params.threshold(i) / 2 {
            return Err(PqError::ContractViolation);
        }
        let first = i;
        let mut j = i;
        loop {
            sim.metrics.pq_pushes += 1;
            let was_last = j + 1 == self.layers.len();
            if was_last {
                let l = Layer::new_empty(sim, self.params.delta, j + 1);
                self.layers.push(l);
                self.relink(sim);
            }
            let (u_len, d_len) = self.read_sizes(sim, j);
            let (next_u_len, _) = self.read_sizes(sim, j + 1);
            let mark = sim.faulty_mark();
            let t1 = sim
                .alloc(Space::Faulty, u_len + d_len)
                .expect("faulty space");
            s_merge(
                sim,
                self.layers[j].u_live(),
                self.layers[j].d_live(),
                t1,
                None,
            )
            .expect("layer buffers are faithfully ordered");
            let m_len = u_len + d_len + next_u_len;
            let m = sim.alloc(Space::Faulty, m_len).expect("faulty space");
            s_merge(sim, t1, self.layers[j + 1].u_live(), m, None)
                .expect("layer buffers are faithfully ordered");

            let keep = d_len.saturating_sub(self.params.delta as usize).min(m_len);
            let up = m_len - keep;
            let new_d = sim.alloc(Space::Faulty, keep).expect("faulty space");
            for x in 0..keep {
                let kw = sim.rd(m, x);
                sim.wr_key(new_d, x, kw);
            }
            let new_up = sim.alloc(Space::Faulty, up).expect("faulty space");
            for x in 0..up {
                let kw = sim.rd(m, keep + x);
                sim.wr_key(new_up, x, kw);
            }
            // The merge scratch is above the two new buffers; only it is
            // reclaimed.
            let _ = mark;

            let empty = sim.alloc(Space::Faulty, 0).expect("faulty space");
            self.layers[j].set_u(sim, empty, 0);
            self.layers[j].set_d(sim, new_d, keep);
            if was_last {
                self.layers[j + 1].set_d(sim, new_up, up);
            } else {
                self.layers[j + 1].set_u(sim, new_up, up);
            }

            if !was_last && (self.layers[j + 1].u_len as u64) > self.params.threshold(j + 1) / 2 {
                j += 1;
                continue;
            }
            break;
        }
        // Sweep the affected down buffers, following the layer links.
        let mut l = first as i64;
        while l >= 0 && (l as usize) <= j && (l as usize) < self.layers.len() {
            let li = l as usize;
            if li + 1 < self.layers.len()
                && (self.layers[li].d_len as u64) < self.params.threshold(li) / 2
            {
                self.pull(sim, li)?;
            }
            l = self.layers[li].link_next.read(sim);
        }
        Ok(())
    }

    /// Pull: D_i underflowed (never the last layer). Merge D_i, U_{i+1}
    /// and D_{i+1}; the smallest s_i keys refill D_i, the next
    /// |D_{i+1}| - (s_i - |D_i|) - delta keys rebuild D_{i+1}, the rest
    /// become the new U_{i+1}. Cascades outward, then pushes any up
    /// buffer the cascade overfilled. Layer-0 buffers must be in full
    /// order (windows drained).
    pub fn pull(&mut self, sim: &mut Sim, i: usize) -> Result<(), PqError> {
        if i + 1 >= self.layers.len()
            || (self.layers[i].d_len as u64) >= self.params.threshold(i) / 2
        {
            return Err(PqError::ContractViolation);
        }
        let first = i;
        let mut j = i;
        loop {
            sim.metrics.pq_pulls += 1;
            let (_, d_len) = self.read_sizes(sim, j);
            let (next_u_len, next_d_len) = self.read_sizes(sim, j + 1);
            let s_j = self.params.threshold(j) as usize;
            let t1 = sim
                .alloc(Space::Faulty, d_len + next_u_len)
                .expect("faulty space");
            s_merge(
                sim,
                self.layers[j].d_live(),
                self.layers[j + 1].u_live(),
                t1,
                None,
            )
            .expect("layer buffers are faithfully ordered");
            let m_len = d_len + next_u_len + next_d_len;
            let m = sim.alloc(Space::Faulty, m_len).expect("faulty space");
            s_merge(sim, t1, self.layers[j + 1].d_live(), m, None)
                .expect("layer buffers are faithfully ordered");

            let keep = s_j.min(m_len);
            let down_next = next_d_len
                .saturating_sub(s_j - d_len)
                .saturating_sub(self.params.delta as usize)
                .min(m_len - keep);
            let up_next = m_len - keep - down_next;
            let new_d = sim.alloc(Space::Faulty, keep).expect("faulty space");
            for x in 0..keep {
                let kw = sim.rd(m, x);
                sim.wr_key(new_d, x, kw);
            }
            let new_dn = sim.alloc(Space::Faulty, down_next).expect("faulty space");
            for x in 0..down_next {
                let kw = sim.rd(m, keep + x);
                sim.wr_key(new_dn, x, kw);
            }
            let new_un = sim.alloc(Space::Faulty, up_next).expect("faulty space");
            for x in 0..up_next {
                let kw = sim.rd(m, keep + down_next + x);
                sim.wr_key(new_un, x, kw);
            }

            self.layers[j].set_d(sim, new_d, keep);
            self.layers[j + 1].set_d(sim, new_dn, down_next);
            self.layers[j + 1].set_u(sim, new_un, up_next);

            if down_next == 0 && up_next == 0 {
                assert_eq!(j + 2, self.layers.len(), "only the last layer empties");
                self.layers.pop();
                self.relink(sim);
                break;
            }
            if j + 2 < self.layers.len()
                && (self.layers[j + 1].d_len as u64) < self.params.threshold(j + 1) / 2
            {
                j += 1;
                continue;
            }
            break;
        }
        // Sweep the affected up buffers, following the layer links.
        let mut l = first as i64;
        let last_touched = (j + 1).min(self.layers.len().saturating_sub(1));
        while l >= 0 && (l as usize) <= last_touched {
            let li = l as usize;
            if (self.layers[li].u_len as u64) > self.params.threshold(li) / 2 {
                self.push(sim, li)?;
            }
            l = self.layers[li].link_next.read(sim);
        }
        Ok(())
    }

    /// Evaluate the structural invariants using hidden tags, returning
    /// the violations found (empty when everything holds). Layer 0 is
    /// checked in its window-relaxed form.
    pub fn check_invariants(&self, sim: &Sim) -> Vec<String> {
        let mut out = Vec::new();
        let k = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            if i == 0 {
                self.check_window_host(
                    sim,
                    "U0",
                    self.win_u.as_ref(),
                    layer.u,
                    self.u0_live_end,
                    &mut out,
                );
                self.check_window_host(
                    sim,
                    "D0",
                    self.win_d.as_ref(),
                    layer.d,
                    self.d0_live_end,
                    &mut out,
                );
            } else {
                if !verify::assert_faithfully_ordered(sim, layer.u_live()) {
                    out.push(format!("I1: U{i} not faithfully ordered"));
                }
                if !verify::assert_faithfully_ordered(sim, layer.d_live()) {
                    out.push(format!("I1: D{i} not faithfully ordered"));
                }
            }
        }
        for i in 0..k.saturating_sub(1) {
            let d_max = if i == 0 {
                self.layer0_d_faithful_max(sim)
            } else {
                faithful_max(sim, self.layers[i].d_live())
            };
            if let Some(dm) = d_max {
                for (name, region) in [
                    (format!("D{}", i + 1), self.layers[i + 1].d_live()),
                    (format!("U{}", i + 1), self.layers[i + 1].u_live()),
                ] {
                    if let Some(lo) = faithful_min(sim, region) {
                        if lo <= dm {
                            out.push(format!(
                                "I2: D{i} (faithful max {dm}) not before {name} (faithful min {lo})"
                            ));
                        }
                    }
                }
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let s_i = self.params.threshold(i);
            if i + 1 < k && ((layer.d_len as u64) < s_i / 2 || (layer.d_len as u64) > s_i) {
                out.push(format!(
                    "I3: |D{i}| = {} outside [{}, {}]",
                    layer.d_len,
                    s_i / 2,
                    s_i
                ));
            }
            if (layer.u_len as u64) > s_i / 2 {
                out.push(format!("I4: |U{i}| = {} > {}", layer.u_len, s_i / 2));
            }
        }
        out
    }

    /// Layer-0 relaxed order: the window keys, taken as a resiliently
    /// sorted multiset, concatenated with the beyond-window suffix must
    /// be faithfully ordered, and no safe node may exceed a faithful key
    /// of its sub-buffer.
    fn check_window_host(
        &self,
        sim: &Sim,
        name: &str,
        win: Option<&Window>,
        host: Region,
        live_end: usize,
        out: &mut Vec<String>,
    ) {
        let Some(win) = win else {
            out.push(format!("{name}: window queue missing"));
            return;
        };
        let mut window_max: Option<i64> = None;
        for i in 0..win.heap.len() {
            let node = win.heap.peek_node(sim, i);
            let (start, len) = (node.a as usize, node.b as usize);
            for j in 0..len {
                let kw = sim.peek(host, start + j);
                if verify::is_faithful(&kw) {
                    if node.key.value > kw.value {
                        out.push(format!(
                            "{name}: node min {} exceeds faithful sub-buffer key {}",
                            node.key.value, kw.value
                        ));
                    }
                    window_max = Some(window_max.map_or(kw.value, |m: i64| m.max(kw.value)));
                }
            }
        }
        let suffix = host.slice(win.p, live_end - win.p);
        if !verify::assert_faithfully_ordered(sim, suffix) {
            out.push(format!("{name}: suffix not faithfully ordered"));
        }
        if let (Some(wm), Some(sm)) = (window_max, faithful_min(sim, suffix)) {
            if sm <= wm {
                out.push(format!(
                    "{name}: window faithful max {wm} not before suffix faithful min {sm}"
                ));
            }
        }
    }

    fn layer0_d_faithful_max(&self, sim: &Sim) -> Option<i64> {
        let win = self.win_d.as_ref()?;
        let host = self.layers[0].d;
        let mut best: Option<i64> = None;
        for i in 0..win.heap.len() {
            let node = win.heap.peek_node(sim, i);
            let (start, len) = (node.a as usize, node.b as usize);
            for j in 0..len {
                let kw = sim.peek(host, start + j);
                if verify::is_faithful(&kw) {
                    best = Some(best.map_or(kw.value, |m: i64| m.max(kw.value)));
                }
            }
        }
        let suffix = host.slice(win.p, self.d0_live_end - win.p);
        if let Some(m) = faithful_max(sim, suffix) {
            best = Some(best.map_or(m, |b: i64| b.max(m)));
        }
        best
    }

    /// Origins of every live instance, sorted; for conservation checks.
    pub fn live_origins(&self, sim: &Sim) -> Vec<u32> {
        let mut out = Vec::new();
        for j in 0..self.i0_len {
            out.push(verify::origin_of(&sim.peek(self.i0, j)));
        }
        for i in 0..self.p_i.len() {
            let node = self.p_i.peek_node(sim, i);
            let buf = Region::from_raw(Space::Faulty, node.a as usize, node.b as usize);
            for j in 0..buf.len() {
                out.push(verify::origin_of(&sim.peek(buf, j)));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if i == 0 {
                for (win, host, live_end) in [
                    (self.win_u.as_ref(), layer.u, self.u0_live_end),
                    (self.win_d.as_ref(), layer.d, self.d0_live_end),
                ] {
                    let win = win.expect("windows exist");
                    for x in 0..win.heap.len() {
                        let node = win.heap.peek_node(sim, x);
                        let (start, len) = (node.a as usize, node.b as usize);
                        for j in 0..len {
                            out.push(verify::origin_of(&sim.peek(host, start + j)));
                        }
                    }
                    for j in win.p..live_end {
                        out.push(verify::origin_of(&sim.peek(host, j)));
                    }
                }
            } else {
                for j in 0..layer.u_len {
                    out.push(verify::origin_of(&sim.peek(layer.u, j)));
                }
                for j in 0..layer.d_len {
                    out.push(verify::origin_of(&sim.peek(layer.d, j)));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn faithful_min(sim: &Sim, region: Region) -> Option<i64> {
    let mut best: Option<i64> = None;
    for i in 0..region.len() {
        let kw = sim.peek(region, i);
        if verify::is_faithful(&kw) {
            best = Some(best.map_or(kw.value, |b: i64| b.min(kw.value)));
        }
    }
    best
}

fn faithful_max(sim: &Sim, region: Region) -> Option<i64> {
    let mut best: Option<i64> = None;
    for i in 0..region.len() {
        let kw = sim.peek(region, i);
        if verify::is_faithful(&kw) {
            best = Some(best.map_or(kw.value, |b: i64| b.max(kw.value)));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fram::SimConfig;

    #[test]
    fn empty_queue_reports_empty() {
        let mut sim = Sim::new(SimConfig::new(4, 0));
        let mut pq = Pq::new(&mut sim);
        assert_eq!(pq.delete_min(&mut sim), Err(PqError::EmptyQueue));
        assert!(pq.check_invariants(&sim).is_empty());
    }

    #[test]
    fn from_keys_yields_sorted_deletions() {
        let mut sim = Sim::new(SimConfig::new(4, 0));
        let keys = sim.load_keys(&[5, 1, 9]);
        let mut pq = Pq::from_keys(&mut sim, keys);
        assert_eq!(pq.delete_min(&mut sim), Ok(1));
        assert_eq!(pq.delete_min(&mut sim), Ok(5));
        assert_eq!(pq.delete_min(&mut sim), Ok(9));
        assert_eq!(pq.delete_min(&mut sim), Err(PqError::EmptyQueue));
    }

    #[test]
    fn insert_then_deletemin_sorted() {
        let mut sim = Sim::new(SimConfig::new(4, 0));
        let mut pq = Pq::new(&mut sim);
        for v in [5, 3, 8] {
            pq.insert(&mut sim, v);
        }
        assert_eq!(pq.delete_min(&mut sim), Ok(3));
        assert_eq!(pq.delete_min(&mut sim), Ok(5));
        assert_eq!(pq.delete_min(&mut sim), Ok(8));
    }

    #[test]
    fn immediate_spill_creates_one_insertion_node() {
        // Seed above the rebuild floor so the spill is observable.
        let mut sim = Sim::new(SimConfig::new(4, 0));
        let keys = sim.load_keys(&(0..20).collect::<Vec<i64>>());
        let mut pq = Pq::from_keys(&mut sim, keys);
        let cap = pq.params().cap_i0;
        for v in 0..cap as i64 {
            pq.insert(&mut sim, v + 100);
        }
        assert_eq!(pq.p_i.len(), 1);
        assert_eq!(pq.i0_len, 0);
    }

    #[test]
    fn full_insertion_queue_flushes_once_into_u0() {
        let mut sim = Sim::new(SimConfig::new(4, 0));
        let keys = sim.load_keys(&(0..24).collect::<Vec<i64>>());
        let mut pq = Pq::from_keys(&mut sim, keys);
        let cap = pq.params().cap_i0;
        let s = pq.params().s_eff;
        // Fill P_I completely, then one more immediate-buffer round
        // forces the flush. Sized to stay under the rebuild trigger.
        let total = s * cap + cap;
        assert!(24 + total < 2 * pq.params().n_ref, "test sized under rebuild");
        for v in 0..total as i64 {
            pq.insert(&mut sim, v + 1000);
        }
        assert_eq!(pq.p_i.len(), 0);
        assert_eq!(pq.i0_len, 0);
        assert_eq!(pq.layers[0].u_len, total);
        assert!(verify::assert_faithfully_ordered(
            &sim,
            pq.layers[0].u_live()
        ));
        assert!(pq.check_invariants(&sim).is_empty());
    }

    #[test]
    fn sorted_sequence_no_faults() {
        let mut sim = Sim::new(SimConfig::new(8, 64));
        let mut vals: Vec<i64> = (0..2000).map(|i| (i * house(7)) % 1_000_003).collect();
        vals.sort_unstable();
        vals.dedup();
        let keys = sim.load_keys(&vals);
        let mut pq = Pq::from_keys(&mut sim, keys);
        let mut last = i64::MIN;
        for _ in 0..vals.len() {
            let v = pq.delete_min(&mut sim).unwrap();
            assert!(v >= last);
            last = v;
        }
        assert!(pq.is_empty());
    }

    fn house(x: i64) -> i64 {
        // Small odd multiplier for spread-out distinct test values.
        2 * x + 1
    }

    #[test]
    fn rebuild_triggers_on_growth() {
        // Below 32 keys a fresh queue never rebuilds by growth.
        let mut sim = Sim::new(SimConfig::new(4, 0));
        let keys = sim.load_keys(&(0..20).collect::<Vec<i64>>());
        let mut pq = Pq::from_keys(&mut sim, keys);
        let before = sim.metrics().rebuilds;
        for v in 20..31 {
            pq.insert(&mut sim, v);
        }
        assert_eq!(sim.metrics().rebuilds, before);
        // Growth from 100 to 200 keys passes exactly one doubling.
        let mut sim = Sim::new(SimConfig::new(4, 0));
        let keys = sim.load_keys(&(0..100).collect::<Vec<i64>>());
        let mut pq = Pq::from_keys(&mut sim, keys);
        let before = sim.metrics().rebuilds;
        for v in 100..200 {
            pq.insert(&mut sim, v);
        }
        assert_eq!(sim.metrics().rebuilds - before, 1);
    }

    #[test]
    fn rebuild_distribution_fills_thresholds_upward() {
        let mut sim = Sim::new(SimConfig::new(4, 0));
        let vals: Vec<i64> = (0..3000).collect();
        let keys = sim.load_keys(&vals);
        let pq = Pq::from_keys(&mut sim, keys);
        let mut rem = vals.len() as u64;
        for (i, (u_len, d_len)) in pq.layer_sizes().iter().enumerate() {
            assert_eq!(*u_len, 0);
            let want = rem.min(pq.params().threshold(i));
            assert_eq!(*d_len as u64, want, "layer {i}");
            rem -= want;
        }
        assert_eq!(rem, 0);
        assert!(pq.check_invariants(&sim).is_empty());
    }

    #[test]
    fn push_on_single_layer_creates_layer_with_exact_sizes() {
        let mut sim = Sim::new(SimConfig::new(4, 0));
        // delta = 0: push keeps |D_0| keys in D'_0 and sends |U_0| to
        // the new last layer's down buffer. D_0 starts at its threshold
        // so the post-push sweep leaves the new layer in place.
        let vals: Vec<i64> = (0..144).collect();
        let keys = sim.load_keys(&vals);
        let mut pq = Pq::from_keys(&mut sim, keys);
        assert_eq!(pq.layer_count(), 1);
        let s0 = pq.params().threshold(0);
        // Install an oversized, ordered U_0 by hand.
        let extra: Vec<i64> = (1000..1000 + s0 as i64 / 2 + 1).collect();
        let u = sim.load_keys(&extra);
        pq.restore_d0_order(&mut sim);
        let d0 = pq.layers[0].d_len;
        let u_len = extra.len();
        pq.layers[0].set_u(&mut sim, u, u_len);
        pq.u0_live_end = u_len;
        pq.win_u.take().map(|w| w.release(&mut sim));
        let params = pq.params;
        pq.win_u = Some(Window::build(&mut sim, u, u_len, &params));

        // Full order restore then push, as the flush path would.
        let mut w = pq.win_u.take().unwrap();
        let fresh = sim.alloc(Space::Faulty, u_len).unwrap();
        let drained = w.drain_sorted(&mut sim, u, fresh, 0);
        assert_eq!(drained, u_len.min(pq.params().delta as usize + 1));
        for j in drained..u_len {
            let kw = sim.rd(u, j);
            sim.wr_key(fresh, j, kw);
        }
        w.release(&mut sim);
        pq.layers[0].set_u(&mut sim, fresh, u_len);
        pq.push(&mut sim, 0).unwrap();

        assert_eq!(pq.layer_count(), 2);
        assert_eq!(pq.layers[0].u_len, 0);
        assert_eq!(pq.layers[0].d_len, d0); // delta = 0: nothing subtracted
        assert_eq!(pq.layers[1].d_len, u_len);
        assert_eq!(pq.layers[1].u_len, 0);

        pq.u0_live_end = pq.layers[0].u_len;
        pq.d0_live_end = pq.layers[0].d_len;
        let params = pq.params;
        let (ur, ul) = (pq.layers[0].u, pq.layers[0].u_len);
        let (dr, dl) = (pq.layers[0].d, pq.layers[0].d_len);
        pq.win_u = Some(Window::build(&mut sim, ur, ul, &params));
        pq.win_d = Some(Window::build(&mut sim, dr, dl, &params));
        let violations = pq.check_invariants(&sim);
        assert!(violations.is_empty(), "{violations:?}");
    }

    #[test]
    fn pull_contract_violation_detected() {
        let mut sim = Sim::new(SimConfig::new(4, 0));
        let keys = sim.load_keys(&(0..40).collect::<Vec<i64>>());
        let mut pq = Pq::from_keys(&mut sim, keys);
        // Single layer: pull is never legal.
        assert_eq!(pq.pull(&mut sim, 0), Err(PqError::ContractViolation));
        // Push without overflow is rejected too.
        assert_eq!(pq.push(&mut sim, 0), Err(PqError::ContractViolation));
    }

    #[test]
    fn mixed_workload_no_faults_matches_reference() {
        use std::collections::BinaryHeap;
        let mut sim = Sim::new(SimConfig::new(4, 0));
        let mut pq = Pq::new(&mut sim);
        let mut model: BinaryHeap<std::cmp::Reverse<i64>> = BinaryHeap::new();
        let mut next = 0i64;
        let mut state = 0x9E3779B97F4A7C15u64;
        for step in 0..4000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let do_insert = model.is_empty() || (state >> 33) % 3 != 0;
            if do_insert {
                let v = next * 7 + ((state >> 17) % 5) as i64;
                next += 1;
                pq.insert(&mut sim, v);
                model.push(std::cmp::Reverse(v));
            } else {
                let got = pq.delete_min(&mut sim).unwrap();
                let want = model.pop().unwrap().0;
                assert_eq!(got, want, "step {step}");
            }
            if step % 64 == 0 {
                let violations = pq.check_invariants(&sim);
                assert!(violations.is_empty(), "step {step}: {violations:?}");
            }
        }
        while let Some(std::cmp::Reverse(want)) = model.pop() {
            assert_eq!(pq.delete_min(&mut sim), Ok(want));
        }
        assert_eq!(pq.delete_min(&mut sim), Err(PqError::EmptyQueue));
    }

    #[test]
    fn adversarial_workload_against_reference_model() {
        use crate::adversary::{PqAttack, RandomUniform};
        use crate::fram::Adversary;
        use crate::verify::{PqReferenceModel, Verdict};

        for (delta, which, seed) in [
            (8u64, 0u8, 1u64),
            (8, 1, 2),
            (64, 0, 3),
            (64, 1, 4),
            (64, 1, 5),
        ] {
            let mut sim = Sim::new(SimConfig::new(4, delta));
            let adv: Box<dyn Adversary> = if which == 0 {
                Box::new(RandomUniform::new(0.002, seed))
            } else {
                Box::new(PqAttack::new(0.01, seed))
            };
            sim.install_adversary(adv);
            let mut pq = Pq::new(&mut sim);
            let mut model = PqReferenceModel::new();
            let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
            let mut next_val = 0i64;
            for step in 0..2500u32 {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                let insert = pq.is_empty() || (state >> 33) % 3 != 0;
                if insert {
                    let v = next_val * 5 + ((state >> 20) % 3) as i64;
                    next_val += 1;
                    let origin = pq.insert(&mut sim, v);
                    model.oracle_insert(origin, v);
                } else {
                    let kw = pq.delete_min_traced(&mut sim).unwrap();
                    model.absorb_corruptions(&sim);
                    let verdict = model
                        .oracle_check_deletemin(
                            kw.value,
                            verify::is_faithful(&kw),
                            verify::origin_of(&kw),
                        )
                        .unwrap();
                    assert_eq!(
                        verdict,
                        Verdict::Pass,
                        "delta={delta} which={which} seed={seed} step={step}"
                    );
                }
                if step % 50 == 0 {
                    let violations = pq.check_invariants(&sim);
                    assert!(
                        violations.is_empty(),
                        "delta={delta} which={which} seed={seed} step={step}: {violations:?}"
                    );
                    assert_eq!(pq.len(), model.len(), "conservation of counts");
                    let live = pq.live_origins(&sim);
                    assert_eq!(live.len(), pq.len(), "live instance count");
                }
            }
            assert!(sim.violation().is_none());
            assert!(sim.safe_high_water() <= 16 * sim.s_eff() + 64);
        }
    }

    #[test]
    fn corrupted_d1_cell_keeps_i1() {
        let mut sim = Sim::new(SimConfig::new(4, 8));
        let keys = sim.load_keys(&(0..200).map(|i| i * 3).collect::<Vec<i64>>());
        let pq = Pq::from_keys(&mut sim, keys);
        assert!(pq.check_invariants(&sim).is_empty());
        if pq.layer_count() > 1 {
            let d1 = pq.layers[1].d;
            crate::fram::plant_corruptions(&mut sim, &[(d1.base_addr() + 2, -999)]).unwrap();
            // One corrupted cell leaves the faithful subsequence intact.
            assert!(pq.check_invariants(&sim).is_empty());
        }
    }
}
