//! Tagged accounting of the memory terms that scale with corpus size,
//! batch size and retrieval count.
//!
//! Buffers that matter for the scaling analysis register their byte size
//! through a [`Reservation`]; the probe tracks live and peak bytes per
//! [`MemTag`] and can enforce a per-tag budget. Process RSS is available as
//! a secondary, untagged figure.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemTag {
    Keys,
    Logits,
    Retrieved,
    Params,
}

impl MemTag {
    pub const ALL: [MemTag; 4] = [MemTag::Keys, MemTag::Logits, MemTag::Retrieved, MemTag::Params];

    pub fn as_str(self) -> &'static str {
        match self {
            MemTag::Keys => "keys",
            MemTag::Logits => "logits",
            MemTag::Retrieved => "retrieved",
            MemTag::Params => "params",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for MemTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug)]
struct Counters {
    live: [AtomicUsize; 4],
    peak: [AtomicUsize; 4],
    budget: [AtomicUsize; 4],
}

#[derive(Clone, Debug)]
pub struct MemoryProbe {
    inner: Arc<Counters>,
}

impl Default for MemoryProbe {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryProbe {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(Counters {
                live: Default::default(),
                peak: Default::default(),
                budget: [
                    AtomicUsize::new(usize::MAX),
                    AtomicUsize::new(usize::MAX),
                    AtomicUsize::new(usize::MAX),
                    AtomicUsize::new(usize::MAX),
                ],
            }),
        }
    }

    pub fn set_budget(&self, tag: MemTag, bytes: usize) {
        self.inner.budget[tag.slot()].store(bytes, Ordering::SeqCst);
    }

    pub fn reserve(&self, tag: MemTag, bytes: usize) -> Result<Reservation> {
        let slot = tag.slot();
        let budget = self.inner.budget[slot].load(Ordering::SeqCst);
        let prev = self.inner.live[slot].fetch_add(bytes, Ordering::SeqCst);
        let now = prev + bytes;
        if now > budget {
            self.inner.live[slot].fetch_sub(bytes, Ordering::SeqCst);
            return Err(Error::BudgetExceeded {
                tag: tag.as_str(),
                requested: bytes,
                live: prev,
                budget,
            });
        }
        self.inner.peak[slot].fetch_max(now, Ordering::SeqCst);
        Ok(Reservation {
            probe: self.clone(),
            tag,
            bytes,
        })
    }

    pub fn live(&self, tag: MemTag) -> usize {
        self.inner.live[tag.slot()].load(Ordering::SeqCst)
    }

    pub fn peak(&self, tag: MemTag) -> usize {
        self.inner.peak[tag.slot()].load(Ordering::SeqCst)
    }

    /// Resets every peak to the currently live amount.
    pub fn reset_peaks(&self) {
        for tag in MemTag::ALL {
            let live = self.live(tag);
            self.inner.peak[tag.slot()].store(live, Ordering::SeqCst);
        }
    }

    pub fn snapshot(&self) -> ProbeSnapshot {
        ProbeSnapshot {
            peak: MemTag::ALL.map(|t| self.peak(t)),
            live: MemTag::ALL.map(|t| self.live(t)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeSnapshot {
    pub peak: [usize; 4],
    pub live: [usize; 4],
}

impl ProbeSnapshot {
    pub fn peak_of(&self, tag: MemTag) -> usize {
        self.peak[tag.slot()]
    }
}

/// Bytes held against a tag until dropped.
#[derive(Debug)]
pub struct Reservation {
    probe: MemoryProbe,
    tag: MemTag,
    bytes: usize,
}

impl Reservation {
    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn tag(&self) -> MemTag {
        self.tag
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        self.probe.inner.live[self.tag.slot()].fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

/// A vector whose heap footprint is charged to a tag for its lifetime.
#[derive(Debug)]
pub struct TrackedVec<T> {
    data: Vec<T>,
    _reservation: Reservation,
}

impl<T: Clone> TrackedVec<T> {
    pub fn filled(probe: &MemoryProbe, tag: MemTag, len: usize, value: T) -> Result<Self> {
        let reservation = probe.reserve(tag, len * std::mem::size_of::<T>())?;
        Ok(Self {
            data: vec![value; len],
            _reservation: reservation,
        })
    }
}

impl<T> TrackedVec<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl<T> std::ops::Deref for TrackedVec<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> std::ops::DerefMut for TrackedVec<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Resident set size of this process in bytes, when the platform exposes it.
pub fn resident_set_bytes() -> Option<usize> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: usize = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4096)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn live_and_peak_follow_reservations() {
        let probe = MemoryProbe::new();
        {
            let _a = probe.reserve(MemTag::Logits, 100).unwrap();
            let _b = probe.reserve(MemTag::Logits, 50).unwrap();
            assert_eq!(probe.live(MemTag::Logits), 150);
        }
        assert_eq!(probe.live(MemTag::Logits), 0);
        assert_eq!(probe.peak(MemTag::Logits), 150);
        probe.reset_peaks();
        assert_eq!(probe.peak(MemTag::Logits), 0);
        assert_eq!(probe.peak(MemTag::Keys), 0);
    }

    #[test]
    fn budget_rejects_without_leaking() {
        let probe = MemoryProbe::new();
        probe.set_budget(MemTag::Retrieved, 64);
        let _a = probe.reserve(MemTag::Retrieved, 40).unwrap();
        let err = probe.reserve(MemTag::Retrieved, 40).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { live: 40, .. }));
        assert_eq!(probe.live(MemTag::Retrieved), 40);
    }

    #[test]
    fn tracked_vec_charges_its_bytes() {
        let probe = MemoryProbe::new();
        let v = TrackedVec::filled(&probe, MemTag::Keys, 10, 0f32).unwrap();
        assert_eq!(probe.live(MemTag::Keys), 40);
        drop(v);
        assert_eq!(probe.live(MemTag::Keys), 0);
    }
}
