//! Built-in adversary strategies.
//!
//! Every strategy is deterministic given its parameters and seed: two
//! runs with the same configuration produce identical corruption logs.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fram::{Adversary, AdversaryEvent, Corruption, MemView, Phase, TraceRecord};

/// Spends nothing. Equivalent to not installing an adversary at all.
pub struct NoFaults;

impl Adversary for NoFaults {
    fn on_event(&mut self, _ev: &AdversaryEvent, _view: &MemView<'_>, _out: &mut Vec<Corruption>) {}

    fn name(&self) -> &'static str {
        "nofaults"
    }
}

/// Corrupts a uniformly chosen live faulty word with probability `p` at
/// every hook, writing an adversarially mixed value (huge, tiny, or a
/// near-duplicate of a neighbor).
pub struct RandomUniform {
    p: f64,
    rng: ChaCha8Rng,
}

impl RandomUniform {
    pub fn new(p: f64, seed: u64) -> RandomUniform {
        RandomUniform {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Adversary for RandomUniform {
    fn on_event(&mut self, _ev: &AdversaryEvent, view: &MemView<'_>, out: &mut Vec<Corruption>) {
        if view.remaining_budget() == 0 || view.faulty_extent() == 0 {
            return;
        }
        if self.rng.random::<f64>() >= self.p {
            return;
        }
        let addr = self.rng.random_range(0..view.faulty_extent());
        let value = match self.rng.random_range(0..4u8) {
            0 => i64::MAX / 2 - self.rng.random_range(0..1024),
            1 => i64::MIN / 2 + self.rng.random_range(0..1024),
            2 => self.rng.random_range(-64..64),
            _ => {
                // Duplicate a neighbor, shifted by one: a crafted inversion.
                let n = if addr + 1 < view.faulty_extent() {
                    addr + 1
                } else {
                    addr
                };
                view.faulty_value(n).unwrap_or(0).wrapping_sub(1)
            }
        };
        out.push(Corruption {
            addr,
            new_value: value,
        });
    }

    fn name(&self) -> &'static str {
        "random"
    }
}

/// Targets the merge pipeline: after a faulty read at address `a` inside
/// a purifying-merge phase, corrupts `a + 1` (the word about to be
/// consumed next) to sit just below the value read, planting an
/// inversion that the incoming check must pay for.
pub struct InversionAttack {
    p: f64,
    /// Corruptions spent per chain. One chain of about S/2 poisoned
    /// cells buys one round restart; longer chains only feed the sweep.
    chain_cap: u32,
    rng: ChaCha8Rng,
    in_merge: bool,
    iterations_seen: u32,
    /// Iterations since the current round began: rounds that survive a
    /// few iterations belong to merges large enough to restart.
    iter_in_round: u32,
    last_read: Option<usize>,
    last_corrupted: Option<usize>,
    chain_len: u32,
}

impl InversionAttack {
    pub fn new(p: f64, seed: u64) -> InversionAttack {
        Self::with_chain(p, 16, seed)
    }

    pub fn with_chain(p: f64, chain_cap: u32, seed: u64) -> InversionAttack {
        InversionAttack {
            p,
            chain_cap: chain_cap.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            in_merge: false,
            iterations_seen: 0,
            iter_in_round: 0,
            last_read: None,
            last_corrupted: None,
            chain_len: 0,
        }
    }
}

impl Adversary for InversionAttack {
    fn on_event(&mut self, ev: &AdversaryEvent, view: &MemView<'_>, out: &mut Vec<Corruption>) {
        match ev.phase {
            Phase::RoundStart => {
                self.in_merge = true;
                self.iter_in_round = 0;
            }
            Phase::IterationStart => {
                self.in_merge = true;
                self.iterations_seen = self.iterations_seen.saturating_add(1);
                self.iter_in_round = self.iter_in_round.saturating_add(1);
            }
            Phase::BucketRoundStart | Phase::PqOpBegin => self.in_merge = false,
            _ => {}
        }
        // Stay idle while the first buffer fill runs without checks
        // (budget spent there is swept up wholesale) and outside
        // multi-iteration rounds (small merges exhaust their inputs
        // before a restart can cost anything).
        if !self.in_merge
            || self.iterations_seen < 2
            || self.iter_in_round < 3
            || view.remaining_budget() == 0
        {
            return;
        }
        if ev.phase != Phase::AfterRead {
            return;
        }
        let Some(addr) = ev.addr else { return };
        // A chain stays alive as long as the consumer keeps reading the
        // cells we poison: every admitted key then pairs with the buffer
        // tail and the round collapses once the safe buffer drains. New
        // chains start (with probability p) when a sequential scan is
        // detected, so strikes land on cells genuinely about to be read.
        let chained = self.last_corrupted == Some(addr) && self.chain_len < self.chain_cap;
        let sequential = self.last_read == Some(addr.wrapping_sub(1));
        self.last_read = Some(addr);
        if addr + 1 >= view.faulty_extent() {
            return;
        }
        if !chained {
            if !sequential {
                return;
            }
            if self.p < 1.0 && self.rng.random::<f64>() >= self.p {
                return;
            }
            self.chain_len = 0;
        }
        let read_value = view.faulty_value(addr).unwrap_or(0);
        self.last_corrupted = Some(addr + 1);
        self.chain_len += 1;
        out.push(Corruption {
            addr: addr + 1,
            new_value: read_value.saturating_sub(1 << 30),
        });
    }

    fn name(&self) -> &'static str {
        "inversion"
    }
}

/// Targets the bucket partitioner: corrupts the key after the one just
/// scanned to a far-away value, so the neighbor-bucket search fails and
/// the algorithm falls back to a binary search.
pub struct BucketAttack {
    p: f64,
    rng: ChaCha8Rng,
    in_bucket: bool,
    flip: bool,
}

impl BucketAttack {
    pub fn new(p: f64, seed: u64) -> BucketAttack {
        BucketAttack {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            in_bucket: false,
            flip: false,
        }
    }
}

impl Adversary for BucketAttack {
    fn on_event(&mut self, ev: &AdversaryEvent, view: &MemView<'_>, out: &mut Vec<Corruption>) {
        match ev.phase {
            Phase::BucketRoundStart => self.in_bucket = true,
            Phase::RoundStart | Phase::IterationStart | Phase::PqOpBegin => self.in_bucket = false,
            _ => {}
        }
        if !self.in_bucket || view.remaining_budget() == 0 {
            return;
        }
        if ev.phase != Phase::AfterRead {
            return;
        }
        let Some(addr) = ev.addr else { return };
        if addr + 1 >= view.faulty_extent() {
            return;
        }
        if self.p < 1.0 && self.rng.random::<f64>() >= self.p {
            return;
        }
        self.flip = !self.flip;
        let value = if self.flip { i64::MAX / 4 } else { i64::MIN / 4 };
        out.push(Corruption {
            addr: addr + 1,
            new_value: value,
        });
    }

    fn name(&self) -> &'static str {
        "bucket"
    }
}

/// Targets the priority queue's window sub-buffers: corrupts the word a
/// queue operation just read (sub-buffer minima, insertion buffers),
/// alternating between values below and above everything live.
pub struct PqAttack {
    p: f64,
    rng: ChaCha8Rng,
    in_pq: bool,
    flip: bool,
}

impl PqAttack {
    pub fn new(p: f64, seed: u64) -> PqAttack {
        PqAttack {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            in_pq: false,
            flip: false,
        }
    }
}

impl Adversary for PqAttack {
    fn on_event(&mut self, ev: &AdversaryEvent, view: &MemView<'_>, out: &mut Vec<Corruption>) {
        if ev.phase == Phase::PqOpBegin {
            self.in_pq = true;
        }
        if !self.in_pq || view.remaining_budget() == 0 {
            return;
        }
        if ev.phase != Phase::AfterRead {
            return;
        }
        let Some(addr) = ev.addr else { return };
        if self.p < 1.0 && self.rng.random::<f64>() >= self.p {
            return;
        }
        self.flip = !self.flip;
        let value = if self.flip {
            i64::MIN / 4 + self.rng.random_range(0..1024)
        } else {
            i64::MAX / 4 - self.rng.random_range(0..1024)
        };
        out.push(Corruption {
            addr,
            new_value: value,
        });
    }

    fn name(&self) -> &'static str {
        "pq"
    }
}

/// Reapplies a previously exported corruption trace at the recorded
/// steps. A replayed run reproduces the original metrics exactly.
pub struct Replay {
    by_step: BTreeMap<u64, Vec<(usize, i64)>>,
}

impl Replay {
    pub fn new(records: Vec<TraceRecord>) -> Replay {
        let mut by_step: BTreeMap<u64, Vec<(usize, i64)>> = BTreeMap::new();
        for r in records {
            by_step
                .entry(r.step)
                .or_default()
                .push((r.address, r.new_value));
        }
        Replay { by_step }
    }
}

impl Adversary for Replay {
    fn on_event(&mut self, ev: &AdversaryEvent, _view: &MemView<'_>, out: &mut Vec<Corruption>) {
        if let Some(batch) = self.by_step.remove(&ev.step) {
            for (addr, new_value) in batch {
                out.push(Corruption { addr, new_value });
            }
        }
    }

    fn name(&self) -> &'static str {
        "replay"
    }
}

/// Parsed `--adversary` argument: `name[:k=v,...]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdversarySpec {
    pub name: String,
    pub params: Vec<(String, String)>,
}

impl AdversarySpec {
    pub fn nofaults() -> AdversarySpec {
        AdversarySpec {
            name: "nofaults".to_string(),
            params: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<AdversarySpec, String> {
        let (name, rest) = match text.split_once(':') {
            Some((n, r)) => (n, Some(r)),
            None => (text, None),
        };
        let name = name.trim().to_ascii_lowercase();
        match name.as_str() {
            "nofaults" | "none" | "random" | "inversion" | "bucket" | "pq" | "replay" => {}
            other => return Err(format!("unknown adversary `{other}`")),
        }
        let mut params = Vec::new();
        if let Some(rest) = rest {
            for kv in rest.split(',').filter(|s| !s.trim().is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| format!("malformed adversary parameter `{kv}`"))?;
                params.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        Ok(AdversarySpec { name, params })
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn p_or(&self, default: f64) -> Result<f64, String> {
        match self.param("p") {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .map_err(|e| format!("bad p for adversary: {e}")),
        }
    }

    /// Instantiate the strategy. `replay` needs its trace resolved by the
    /// caller and is rejected here.
    pub fn build(&self, seed: u64) -> Result<Option<Box<dyn Adversary>>, String> {
        match self.name.as_str() {
            "nofaults" | "none" => Ok(None),
            "random" => Ok(Some(Box::new(RandomUniform::new(self.p_or(0.01)?, seed)))),
            "inversion" => {
                let chain = match self.param("chain") {
                    None => 16,
                    Some(v) => v
                        .parse::<u32>()
                        .map_err(|e| format!("bad chain for adversary: {e}"))?,
                };
                Ok(Some(Box::new(InversionAttack::with_chain(
                    self.p_or(1.0)?,
                    chain,
                    seed,
                ))))
            }
            "bucket" => Ok(Some(Box::new(BucketAttack::new(self.p_or(1.0)?, seed)))),
            "pq" => Ok(Some(Box::new(PqAttack::new(self.p_or(1.0)?, seed)))),
            "replay" => Err("replay adversary requires a resolved trace".to_string()),
            other => Err(format!("unknown adversary `{other}`")),
        }
    }

    pub fn display(&self) -> String {
        if self.params.is_empty() {
            self.name.clone()
        } else {
            let kv: Vec<String> = self
                .params
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            format!("{}:{}", self.name, kv.join(","))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fram::{Sim, SimConfig};

    #[test]
    fn spec_parsing() {
        let s = AdversarySpec::parse("random:p=0.5").unwrap();
        assert_eq!(s.name, "random");
        assert_eq!(s.param("p"), Some("0.5"));
        assert!(AdversarySpec::parse("martian").is_err());
        assert!(AdversarySpec::parse("random:p").is_err());
    }

    #[test]
    fn random_uniform_is_deterministic() {
        let run = || {
            let mut sim = Sim::new(SimConfig::new(4, 16));
            let r = sim.load_keys(&(0..64).map(|i| i as i64 * 3).collect::<Vec<_>>());
            sim.install_adversary(Box::new(RandomUniform::new(0.5, 1)));
            for i in 0..64 {
                sim.read(r, i).unwrap();
            }
            sim.corruption_log()
                .iter()
                .map(|c| (c.step, c.addr, c.new_value))
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn replay_reapplies_at_steps() {
        let mut sim = Sim::new(SimConfig::new(4, 8));
        let r = sim.load_keys(&[10, 20, 30, 40]);
        sim.install_adversary(Box::new(RandomUniform::new(1.0, 7)));
        for i in 0..4 {
            sim.read(r, i).unwrap();
        }
        let trace = sim.export_trace();
        let metrics = sim.metrics();

        let mut sim2 = Sim::new(SimConfig::new(4, 8));
        let r2 = sim2.load_keys(&[10, 20, 30, 40]);
        let records = crate::fram::parse_trace(&trace).unwrap();
        sim2.install_adversary(Box::new(Replay::new(records)));
        for i in 0..4 {
            sim2.read(r2, i).unwrap();
        }
        assert_eq!(sim2.metrics(), metrics);
        assert_eq!(sim2.export_trace(), trace);
    }
}
