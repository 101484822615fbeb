//! Hidden-tag oracle.
//!
//! Everything here reads provenance tags that algorithms and adversaries
//! cannot see, turning "faithfully ordered" and the merge and queue
//! contracts into mechanical checks. All functions are side-effect-free
//! on the simulation: they bypass counters and adversary hooks.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::fram::{KeyWord, Region, Sim};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerifyError {
    #[error("duplicate input value {0}")]
    DuplicateInput(i64),
    #[error("cell {0} holds metadata, not a key")]
    KindMismatch(usize),
    #[error("oracle desynchronized from the structure under test: {0}")]
    Desync(String),
}

/// Immutable record of every origin's original value. Grows only through
/// `load_input` and `record_insert`.
#[derive(Debug, Clone, Default)]
pub struct InputSnapshot {
    values: Vec<i64>,
}

impl InputSnapshot {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn original(&self, origin: u32) -> i64 {
        self.values[origin as usize]
    }

    pub(crate) fn record(&mut self, origin: u32, value: i64) {
        debug_assert_eq!(origin as usize, self.values.len());
        self.values.push(value);
    }
}

/// Load distinct input keys into faulty memory and capture the snapshot.
/// Duplicates are rejected: the faithfulness notion needs distinct
/// faithful values.
pub fn load_input(sim: &mut Sim, values: &[i64]) -> Result<(Region, InputSnapshot), VerifyError> {
    let mut seen = BTreeSet::new();
    for &v in values {
        if !seen.insert(v) {
            return Err(VerifyError::DuplicateInput(v));
        }
    }
    let first_origin = sim.origins_minted();
    let region = sim.load_keys(values);
    let mut snapshot = InputSnapshot::default();
    debug_assert_eq!(first_origin, 0);
    for (i, &v) in values.iter().enumerate() {
        snapshot.record(first_origin + i as u32, v);
    }
    Ok((region, snapshot))
}

/// Indices and values of the tag-faithful cells of a key region, in
/// index order.
pub fn faithful_subsequence(sim: &Sim, region: Region) -> Result<Vec<(usize, i64)>, VerifyError> {
    let mut out = Vec::new();
    for i in 0..region.len() {
        let kw = sim.peek(region, i);
        if !kw.is_key() {
            return Err(VerifyError::KindMismatch(i));
        }
        if tag_of(&kw).faithful {
            out.push((i, kw.value));
        }
    }
    Ok(out)
}

/// True iff the faithful values of the region strictly increase.
pub fn assert_faithfully_ordered(sim: &Sim, region: Region) -> bool {
    let mut prev: Option<i64> = None;
    for i in 0..region.len() {
        let kw = sim.peek(region, i);
        if kw.is_key() && tag_of(&kw).faithful {
            if let Some(p) = prev {
                if kw.value <= p {
                    return false;
                }
            }
            prev = Some(kw.value);
        }
    }
    true
}

/// Origin ids of every key cell of a region, sorted (a multiset).
pub fn origin_multiset(sim: &Sim, region: Region) -> Vec<u32> {
    let mut v: Vec<u32> = (0..region.len())
        .map(|i| tag_of(&sim.peek(region, i)).origin)
        .collect();
    v.sort_unstable();
    v
}

fn tag_of(kw: &KeyWord) -> crate::fram::Tag {
    kw.tag
}

pub(crate) fn is_faithful(kw: &KeyWord) -> bool {
    kw.tag.faithful
}

pub(crate) fn origin_of(kw: &KeyWord) -> u32 {
    kw.tag.origin
}

/// Everything one purifying-merge invocation exposes for checking. The
/// input regions still hold their original cells when this is built.
#[derive(Debug, Clone, Copy)]
pub struct PurifyCall {
    pub x: Region,
    pub y: Region,
    pub z: Region,
    pub f: Region,
    pub alpha_before: u64,
    pub alpha_after: u64,
    pub restarts: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ContractReport {
    pub failures: Vec<String>,
}

impl ContractReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Check one purifying-merge output against its contract:
/// every input key lands in exactly one of Z and F, F is bounded by
/// twice the corruptions spent so far, Z is faithfully ordered, and
/// faithful cells still carry their original values.
///
/// The F bound uses the run-cumulative corruption count: a key corrupted
/// in an earlier call can surface out of order here and be swept to F,
/// charged against the same corruption event.
pub fn merge_contract_check(
    sim: &Sim,
    call: &PurifyCall,
    snapshot: &InputSnapshot,
) -> ContractReport {
    let mut report = ContractReport::default();
    let n_in = call.x.len() + call.y.len();
    if call.z.len() + call.f.len() != n_in {
        report.failures.push(format!(
            "conservation: |Z|+|F| = {}+{} != {}",
            call.z.len(),
            call.f.len(),
            n_in
        ));
    }
    if call.f.len() as u64 > 2 * call.alpha_after {
        report.failures.push(format!(
            "|F| = {} exceeds 2*alpha = {}",
            call.f.len(),
            2 * call.alpha_after
        ));
    }
    if !assert_faithfully_ordered(sim, call.z) {
        report
            .failures
            .push("Z is not faithfully ordered".to_string());
    }
    let mut inputs = origin_multiset(sim, call.x);
    inputs.extend(origin_multiset(sim, call.y));
    inputs.sort_unstable();
    let mut outputs = origin_multiset(sim, call.z);
    outputs.extend(origin_multiset(sim, call.f));
    outputs.sort_unstable();
    if inputs != outputs {
        report
            .failures
            .push("origin multiset not preserved across Z and F".to_string());
    }
    for region in [call.z, call.f] {
        for i in 0..region.len() {
            let kw = sim.peek(region, i);
            if is_faithful(&kw) && kw.value != snapshot.original(origin_of(&kw)) {
                report.failures.push(format!(
                    "faithful cell {} of output carries {} but origin {} was {}",
                    i,
                    kw.value,
                    origin_of(&kw),
                    snapshot.original(origin_of(&kw))
                ));
            }
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

/// Shadow model of the priority queue: the multiset of live origins with
/// their original values, split into never-corrupted origins and origins
/// some instance of which was corrupted while live.
///
/// A deletemin is accepted when the returned value does not exceed the
/// minimum original value over never-corrupted live origins; a
/// faithful-tagged return from a never-corrupted origin must equal that
/// minimum exactly. A faithful-tagged return below the minimum is legal
/// only for a corrupted-flagged origin: the structure restored the
/// original from a safe copy.
#[derive(Debug, Default)]
pub struct PqReferenceModel {
    clean: BTreeSet<(i64, u32)>,
    flagged: HashMap<u32, i64>,
    snapshot: HashMap<u32, i64>,
    pub returned: Vec<i64>,
    pub corrupted_returns: u64,
    log_cursor: usize,
}

impl PqReferenceModel {
    pub fn new() -> PqReferenceModel {
        PqReferenceModel::default()
    }

    pub fn len(&self) -> usize {
        self.clean.len() + self.flagged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn oracle_insert(&mut self, origin: u32, value: i64) {
        self.snapshot.insert(origin, value);
        self.clean.insert((value, origin));
    }

    /// Absorb corruption events the simulation logged since the last
    /// call; any live origin touched by one moves to the flagged side.
    pub fn absorb_corruptions(&mut self, sim: &Sim) {
        let log = sim.corruption_log();
        while self.log_cursor < log.len() {
            let rec = &log[self.log_cursor];
            self.log_cursor += 1;
            let Some(origin) = rec.origin else { continue };
            if let Some(&value) = self.snapshot.get(&origin) {
                if self.clean.remove(&(value, origin)) {
                    self.flagged.insert(origin, value);
                }
            }
        }
    }

    fn clean_min(&self) -> Option<i64> {
        self.clean.iter().next().map(|&(v, _)| v)
    }

    /// Judge one deletemin return. `value` and `faithful`/`origin` come
    /// from the returned instance's hidden tag.
    pub fn oracle_check_deletemin(
        &mut self,
        value: i64,
        faithful: bool,
        origin: u32,
    ) -> Result<Verdict, VerifyError> {
        let live_clean = self
            .snapshot
            .get(&origin)
            .map(|&v| self.clean.contains(&(v, origin)))
            .unwrap_or(false);
        let live_flagged = self.flagged.contains_key(&origin);
        if !live_clean && !live_flagged {
            return Err(VerifyError::Desync(format!(
                "returned origin {origin} is not live in the model"
            )));
        }
        let min = self.clean_min();
        let verdict = if faithful {
            let original = self.snapshot[&origin];
            if value != original {
                // Faithful tags always carry the original value; anything
                // else means provenance tracking itself broke.
                return Err(VerifyError::Desync(format!(
                    "faithful return {value} differs from original {original}"
                )));
            }
            match (live_clean, min) {
                (true, Some(m)) => {
                    if value == m {
                        Verdict::Pass
                    } else {
                        Verdict::Fail
                    }
                }
                (true, None) => Verdict::Fail, // unreachable: origin itself is clean
                (false, Some(m)) => {
                    if value <= m {
                        Verdict::Pass
                    } else {
                        Verdict::Fail
                    }
                }
                (false, None) => Verdict::Pass,
            }
        } else {
            self.corrupted_returns += 1;
            match min {
                Some(m) => {
                    if value <= m {
                        Verdict::Pass
                    } else {
                        Verdict::Fail
                    }
                }
                None => Verdict::Pass,
            }
        };
        // The physical instance left the queue either way.
        if live_clean {
            let v = self.snapshot[&origin];
            self.clean.remove(&(v, origin));
        } else {
            self.flagged.remove(&origin);
        }
        self.returned.push(value);
        Ok(verdict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fram::{Sim, SimConfig};

    #[test]
    fn load_rejects_duplicates() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        assert_eq!(
            load_input(&mut sim, &[1, 2, 1]).unwrap_err(),
            VerifyError::DuplicateInput(1)
        );
    }

    #[test]
    fn faithful_subsequence_skips_corrupted() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let (r, _snap) = load_input(&mut sim, &[10, 20, 30, 40, 50]).unwrap();
        assert_eq!(faithful_subsequence(&sim, r).unwrap().len(), 5);
        crate::fram::plant_corruptions(&mut sim, &[(r.base_addr() + 3, 999)]).unwrap();
        let sub = faithful_subsequence(&sim, r).unwrap();
        assert_eq!(
            sub.iter().map(|&(i, _)| i).collect::<Vec<_>>(),
            vec![0, 1, 2, 4]
        );
    }

    #[test]
    fn ordering_ignores_corrupted_cells() {
        let mut sim = Sim::new(SimConfig::new(4, 4));
        let (r, _snap) = load_input(&mut sim, &[1, 5, 2, 3]).unwrap();
        assert!(!assert_faithfully_ordered(&sim, r));
        // Corrupting the out-of-place cell removes it from the check.
        crate::fram::plant_corruptions(&mut sim, &[(r.base_addr() + 1, 999)]).unwrap();
        assert!(assert_faithfully_ordered(&sim, r));
    }

    #[test]
    fn model_accepts_min_and_smaller_corrupted() {
        let mut m = PqReferenceModel::new();
        m.oracle_insert(0, 3);
        m.oracle_insert(1, 5);
        assert_eq!(m.oracle_check_deletemin(3, true, 0).unwrap(), Verdict::Pass);
        assert_eq!(m.len(), 1);

        let mut m = PqReferenceModel::new();
        m.oracle_insert(0, 3);
        m.oracle_insert(1, 5);
        // A corrupted instance may surface below the minimum.
        assert_eq!(m.oracle_check_deletemin(2, false, 1).unwrap(), Verdict::Pass);
    }

    #[test]
    fn model_rejects_skipped_minimum() {
        let mut m = PqReferenceModel::new();
        m.oracle_insert(0, 3);
        m.oracle_insert(1, 5);
        assert_eq!(m.oracle_check_deletemin(5, true, 1).unwrap(), Verdict::Fail);
    }

    #[test]
    fn model_desync_on_unknown_origin() {
        let mut m = PqReferenceModel::new();
        m.oracle_insert(0, 3);
        assert!(m.oracle_check_deletemin(4, true, 9).is_err());
    }
}
