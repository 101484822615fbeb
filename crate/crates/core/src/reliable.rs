//! Reliably written variables: a value replicated `2*delta + 1` times in
//! faulty memory and recovered by majority vote. With at most `delta`
//! corruptions since the last write, a strict majority of replicas is
//! intact, so the vote cannot be fooled.

use crate::fram::{FramError, Region, Sim, Space};

/// Handle to one replicated variable. Replicas are metadata words; keys
/// never live here.
#[derive(Debug, Clone, Copy)]
pub struct ReliableCell {
    region: Region,
    delta: u64,
}

impl ReliableCell {
    /// Allocate `2*delta + 1` faulty words, initialized to `value`.
    pub fn new(sim: &mut Sim, delta: u64, value: i64) -> ReliableCell {
        let len = 2 * delta as usize + 1;
        let region = sim
            .alloc(Space::Faulty, len)
            .expect("faulty space is unbounded");
        let cell = ReliableCell { region, delta };
        cell.write(sim, value);
        cell
    }

    pub fn delta(&self) -> u64 {
        self.delta
    }

    pub fn replicas(&self) -> usize {
        self.region.len()
    }

    /// Set every replica. Prior corruptions become irrelevant.
    pub fn write(&self, sim: &mut Sim, value: i64) {
        for i in 0..self.region.len() {
            sim.wr_meta(self.region, i, value);
        }
    }

    /// Majority vote over the replicas using O(1) safe words: one
    /// candidate/counter pass, then a confirming count.
    pub fn read(&self, sim: &mut Sim) -> i64 {
        let n = self.region.len();
        let mut candidate = 0i64;
        let mut count = 0u64;
        for i in 0..n {
            let v = sim.rd(self.region, i).value;
            if count == 0 {
                candidate = v;
                count = 1;
            } else if v == candidate {
                count += 1;
            } else {
                count -= 1;
            }
        }
        let mut votes = 0usize;
        for i in 0..n {
            if sim.rd(self.region, i).value == candidate {
                votes += 1;
            }
        }
        debug_assert!(
            votes > self.delta as usize,
            "majority lost: more than delta corruptions since last write"
        );
        candidate
    }

    /// Replica addresses, for tests that corrupt specific copies.
    pub fn region(&self) -> Region {
        self.region
    }
}

/// Convenience wrappers matching the operation names used elsewhere.
pub fn write_reliable(sim: &mut Sim, cell: &ReliableCell, value: i64) {
    cell.write(sim, value);
}

pub fn read_reliable(sim: &mut Sim, cell: &ReliableCell) -> i64 {
    cell.read(sim)
}

/// Corrupt chosen replicas of a cell (test helper); replica indexes are
/// relative to the cell.
pub fn corrupt_replicas(
    sim: &mut Sim,
    cell: &ReliableCell,
    picks: &[(usize, i64)],
) -> Result<(), FramError> {
    let base = cell.region().base_addr();
    let batch: Vec<(usize, i64)> = picks.iter().map(|&(i, v)| (base + i, v)).collect();
    crate::fram::plant_corruptions(sim, &batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fram::{Sim, SimConfig};

    fn sim_with(delta: u64) -> Sim {
        Sim::new(SimConfig::new(8, delta))
    }

    #[test]
    fn delta_zero_single_replica() {
        let mut sim = sim_with(0);
        let cell = ReliableCell::new(&mut sim, 0, 7);
        assert_eq!(cell.replicas(), 1);
        assert_eq!(cell.read(&mut sim), 7);
    }

    #[test]
    fn write_sets_all_replicas() {
        let mut sim = sim_with(3);
        let cell = ReliableCell::new(&mut sim, 3, 7);
        assert_eq!(cell.replicas(), 7);
        for i in 0..7 {
            assert_eq!(sim.read(cell.region(), i).unwrap(), 7);
        }
    }

    #[test]
    fn overwrite_resets_prior_corruption() {
        let mut sim = sim_with(3);
        let cell = ReliableCell::new(&mut sim, 3, 7);
        corrupt_replicas(&mut sim, &cell, &[(0, 99), (1, 99), (2, 99)]).unwrap();
        cell.write(&mut sim, 11);
        assert_eq!(cell.read(&mut sim), 11);
    }

    #[test]
    fn unanimous_attack_on_three_of_seven_fails() {
        // All three corrupted replicas vote 9; 9 still has only 3 < 4 votes.
        let mut sim = sim_with(3);
        let cell = ReliableCell::new(&mut sim, 3, 7);
        corrupt_replicas(&mut sim, &cell, &[(1, 9), (4, 9), (6, 9)]).unwrap();
        assert_eq!(cell.read(&mut sim), 7);
    }

    #[test]
    fn read_uses_constant_safe_space() {
        let mut sim = sim_with(4);
        let cell = ReliableCell::new(&mut sim, 4, 13);
        let before = sim.safe_high_water();
        cell.read(&mut sim);
        assert_eq!(sim.safe_high_water(), before);
    }

    /// Exhaustive over subsets for small delta: every way to corrupt at
    /// most delta replicas, with adversarial value patterns including an
    /// agreeing bloc.
    #[test]
    fn majority_exhaustive_small_delta() {
        for delta in 0u64..=4 {
            let n = 2 * delta as usize + 1;
            let subsets: Vec<Vec<usize>> = (0usize..1 << n)
                .filter(|m| (m.count_ones() as u64) <= delta)
                .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
                .collect();
            for subset in subsets {
                for pattern in 0..3 {
                    let mut sim = sim_with(delta);
                    let cell = ReliableCell::new(&mut sim, delta, 7);
                    let picks: Vec<(usize, i64)> = subset
                        .iter()
                        .enumerate()
                        .map(|(j, &i)| {
                            let v = match pattern {
                                0 => 9,                 // agreeing bloc
                                1 => 100 + j as i64,    // all distinct
                                _ => 7,                 // re-writing the true value
                            };
                            (i, v)
                        })
                        .collect();
                    corrupt_replicas(&mut sim, &cell, &picks).unwrap();
                    assert_eq!(cell.read(&mut sim), 7, "delta={delta} subset={subset:?} pattern={pattern}");
                }
            }
        }
    }
}
