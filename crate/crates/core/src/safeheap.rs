//! Fixed-capacity binary min-heap laid out in safe memory.
//!
//! Each node occupies four consecutive safe cells: a key copy (so the
//! priority survives later corruption of the cell it was read from) and
//! three metadata words the owner uses for buffer address, length and
//! minimum position. Ties on the key break on the first metadata word,
//! keeping extraction order deterministic.

use crate::fram::{KeyWord, Region, Sim, Space};

pub(crate) struct SafeHeap {
    region: Region,
    cap: usize,
    len: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeapNode {
    pub key: KeyWord,
    pub a: i64,
    pub b: i64,
    pub c: i64,
}

impl SafeHeap {
    pub fn new(sim: &mut Sim, cap: usize) -> SafeHeap {
        let region = sim
            .alloc(Space::Safe, 4 * cap)
            .expect("heap nodes fit the safe budget");
        SafeHeap {
            region,
            cap,
            len: 0,
        }
    }

    pub fn release(&self, sim: &mut Sim) {
        sim.free(self.region);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// Node at heap slot `i` (arbitrary order); for walking all nodes.
    pub fn node_at(&self, sim: &mut Sim, i: usize) -> HeapNode {
        debug_assert!(i < self.len);
        self.node(sim, i)
    }

    /// Uncounted node view for verification code.
    pub fn peek_node(&self, sim: &Sim, i: usize) -> HeapNode {
        debug_assert!(i < self.len);
        HeapNode {
            key: sim.peek(self.region, 4 * i),
            a: sim.peek(self.region, 4 * i + 1).value,
            b: sim.peek(self.region, 4 * i + 2).value,
            c: sim.peek(self.region, 4 * i + 3).value,
        }
    }

    fn node(&self, sim: &mut Sim, i: usize) -> HeapNode {
        HeapNode {
            key: sim.rd(self.region, 4 * i),
            a: sim.rd(self.region, 4 * i + 1).value,
            b: sim.rd(self.region, 4 * i + 2).value,
            c: sim.rd(self.region, 4 * i + 3).value,
        }
    }

    fn put(&mut self, sim: &mut Sim, i: usize, n: HeapNode) {
        sim.wr_key(self.region, 4 * i, n.key);
        sim.wr_meta(self.region, 4 * i + 1, n.a);
        sim.wr_meta(self.region, 4 * i + 2, n.b);
        sim.wr_meta(self.region, 4 * i + 3, n.c);
    }

    fn before(sim: &mut Sim, x: &HeapNode, y: &HeapNode) -> bool {
        if sim.lt(x.key.value, y.key.value) {
            return true;
        }
        x.key.value == y.key.value && x.a < y.a
    }

    pub fn insert(&mut self, sim: &mut Sim, key: KeyWord, a: i64, b: i64, c: i64) {
        assert!(self.len < self.cap, "safe heap at capacity");
        let mut i = self.len;
        self.len += 1;
        let node = HeapNode { key, a, b, c };
        while i > 0 {
            let parent = (i - 1) / 2;
            let p = self.node(sim, parent);
            if Self::before(sim, &node, &p) {
                self.put(sim, i, p);
                i = parent;
            } else {
                break;
            }
        }
        self.put(sim, i, node);
    }

    pub fn peek_min(&mut self, sim: &mut Sim) -> Option<HeapNode> {
        if self.len == 0 {
            None
        } else {
            Some(self.node(sim, 0))
        }
    }

    pub fn pop_min(&mut self, sim: &mut Sim) -> Option<HeapNode> {
        if self.len == 0 {
            return None;
        }
        let min = self.node(sim, 0);
        self.len -= 1;
        if self.len > 0 {
            let last = self.node(sim, self.len);
            let mut i = 0usize;
            loop {
                let l = 2 * i + 1;
                let r = 2 * i + 2;
                if l >= self.len {
                    break;
                }
                let mut child = l;
                let mut cn = self.node(sim, l);
                if r < self.len {
                    let rn = self.node(sim, r);
                    if Self::before(sim, &rn, &cn) {
                        child = r;
                        cn = rn;
                    }
                }
                if Self::before(sim, &cn, &last) {
                    self.put(sim, i, cn);
                    i = child;
                } else {
                    break;
                }
            }
            self.put(sim, i, last);
        }
        Some(min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fram::SimConfig;

    #[test]
    fn heap_orders_keys() {
        let mut sim = Sim::new(SimConfig::new(8, 8));
        let keys = sim.load_keys(&[5, 1, 4, 2, 3]);
        let mut heap = SafeHeap::new(&mut sim, 8);
        for i in 0..5 {
            let kw = sim.rd(keys, i);
            heap.insert(&mut sim, kw, i as i64, 0, 0);
        }
        assert_eq!(heap.peek_min(&mut sim).unwrap().key.value, 1);
        let mut out = Vec::new();
        while let Some(n) = heap.pop_min(&mut sim) {
            out.push(n.key.value);
        }
        assert_eq!(out, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn heap_tie_break_is_deterministic() {
        let mut sim = Sim::new(SimConfig::new(8, 8));
        let keys = sim.load_keys(&[7, 7, 7]);
        let mut heap = SafeHeap::new(&mut sim, 4);
        for i in [2i64, 0, 1] {
            let kw = sim.rd(keys, i as usize);
            heap.insert(&mut sim, kw, i, 0, 0);
        }
        let order: Vec<i64> = std::iter::from_fn(|| heap.pop_min(&mut sim).map(|n| n.a)).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }
}
