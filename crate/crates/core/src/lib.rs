//! Faulty-RAM simulation toolkit.
//!
//! Simulates a machine with a large corruptible memory, a small safe
//! memory of `S` words, and an adaptive adversary limited to `delta`
//! corruptions per run, then implements and instruments the resilient
//! algorithms that exploit the safe memory: a purifying/bucket merge
//! sort family and a layered resilient priority queue. Hidden provenance
//! tags make "the faithful values are correctly ordered" a mechanical
//! check rather than a proof obligation.
//!
//! Entry points:
//! - [`fram::Sim`]: the two-memory machine and adversary hooks.
//! - [`sort::s_sort`] / [`sort::s_merge`]: resilient sorting and merging.
//! - [`pq::Pq`]: the resilient priority queue.
//! - [`verify`]: the hidden-tag oracle used by tests and the harness.
//! - [`harness`]: experiment runner, reports and trace replay.

pub mod adversary;
pub mod fram;
pub mod harness;
pub mod pq;
pub mod reliable;
mod safeheap;
pub mod sort;
pub mod verify;

pub use fram::{Region, RunMetrics, Sim, SimConfig, Space};
