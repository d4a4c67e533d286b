use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::message::MessageClass;

const CLASSES: usize = MessageClass::ALL.len();

#[derive(Default)]
struct ClassCounters {
    sent_count: AtomicU64,
    sent_bytes: AtomicU64,
    recv_count: AtomicU64,
    recv_bytes: AtomicU64,
}

/// Byte and round-trip counters. Every counter only ever grows.
#[derive(Default)]
pub struct CommStats {
    classes: [ClassCounters; CLASSES],
    round_trips: AtomicU64,
    mask_bytes: AtomicU64,
    mask_full_equiv_bytes: AtomicU64,
}

impl CommStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_sent(&self, class: MessageClass, bytes: usize) {
        let c = &self.classes[class.index()];
        c.sent_count.fetch_add(1, Ordering::Relaxed);
        c.sent_bytes.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub fn record_received(&self, class: MessageClass, bytes: usize) {
        let c = &self.classes[class.index()];
        c.recv_count.fetch_add(1, Ordering::Relaxed);
        c.recv_bytes.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub fn record_round_trip(&self) {
        self.round_trips.fetch_add(1, Ordering::Relaxed);
    }

    /// Mask bytes actually put on the wire, next to the size the full
    /// additive mask would have had.
    pub fn record_mask(&self, wire_bytes: usize, full_equiv_bytes: usize) {
        self.mask_bytes
            .fetch_add(wire_bytes as u64, Ordering::Relaxed);
        self.mask_full_equiv_bytes
            .fetch_add(full_equiv_bytes as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CommSnapshot {
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CommSnapshot {
            classes: MessageClass::ALL
                .iter()
                .map(|&class| {
                    let c = &self.classes[class.index()];
                    ClassStats {
                        class: class.name().to_string(),
                        sent_count: load(&c.sent_count),
                        sent_bytes: load(&c.sent_bytes),
                        recv_count: load(&c.recv_count),
                        recv_bytes: load(&c.recv_bytes),
                    }
                })
                .collect(),
            round_trips: load(&self.round_trips),
            mask_bytes: load(&self.mask_bytes),
            mask_full_equiv_bytes: load(&self.mask_full_equiv_bytes),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub sent_count: u64,
    pub sent_bytes: u64,
    pub recv_count: u64,
    pub recv_bytes: u64,
}

/// Point-in-time copy of [`CommStats`], serializable and subtractable.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommSnapshot {
    pub classes: Vec<ClassStats>,
    pub round_trips: u64,
    pub mask_bytes: u64,
    pub mask_full_equiv_bytes: u64,
}

impl CommSnapshot {
    pub fn class(&self, class: MessageClass) -> ClassStats {
        self.classes
            .iter()
            .find(|c| c.class == class.name())
            .cloned()
            .unwrap_or_else(|| ClassStats {
                class: class.name().to_string(),
                ..ClassStats::default()
            })
    }

    pub fn total_sent_bytes(&self) -> u64 {
        self.classes.iter().map(|c| c.sent_bytes).sum()
    }

    pub fn total_recv_bytes(&self) -> u64 {
        self.classes.iter().map(|c| c.recv_bytes).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_sent_bytes() + self.total_recv_bytes()
    }

    /// Counter growth from `earlier` to `self`.
    pub fn delta_since(&self, earlier: &CommSnapshot) -> CommSnapshot {
        CommSnapshot {
            classes: self
                .classes
                .iter()
                .map(|c| {
                    let e = earlier
                        .classes
                        .iter()
                        .find(|e| e.class == c.class)
                        .cloned()
                        .unwrap_or_default();
                    ClassStats {
                        class: c.class.clone(),
                        sent_count: c.sent_count - e.sent_count,
                        sent_bytes: c.sent_bytes - e.sent_bytes,
                        recv_count: c.recv_count - e.recv_count,
                        recv_bytes: c.recv_bytes - e.recv_bytes,
                    }
                })
                .collect(),
            round_trips: self.round_trips - earlier.round_trips,
            mask_bytes: self.mask_bytes - earlier.mask_bytes,
            mask_full_equiv_bytes: self.mask_full_equiv_bytes - earlier.mask_full_equiv_bytes,
        }
    }

    /// Sum of several snapshots (e.g. one per client link).
    pub fn sum(parts: &[CommSnapshot]) -> CommSnapshot {
        let mut out = CommSnapshot::default();
        for class in MessageClass::ALL {
            let mut acc = ClassStats {
                class: class.name().to_string(),
                ..ClassStats::default()
            };
            for p in parts {
                let c = p.class(class);
                acc.sent_count += c.sent_count;
                acc.sent_bytes += c.sent_bytes;
                acc.recv_count += c.recv_count;
                acc.recv_bytes += c.recv_bytes;
            }
            out.classes.push(acc);
        }
        for p in parts {
            out.round_trips += p.round_trips;
            out.mask_bytes += p.mask_bytes;
            out.mask_full_equiv_bytes += p.mask_full_equiv_bytes;
        }
        out
    }
}
