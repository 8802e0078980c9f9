//! Clip-level FIFO memory with a pinned reference entry.
//!
//! Storage order is `[reference, oldest, ..., newest]`. The view handed to
//! the relative time encoding is the exact reverse: index 0 is the most
//! recent entry and the last index is the reference frame.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::types::MultiScaleFeatures;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry<F> {
    /// Frame index the features were taken from.
    pub timestamp: usize,
    pub features: F,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<F> {
    capacity: usize,
    entries: Vec<MemoryEntry<F>>,
}

impl<F> MemoryBank<F> {
    /// Bank holding only the reference entry (timestamp 0).
    pub fn init(reference: F, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("bank_size must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            entries: vec![MemoryEntry {
                timestamp: 0,
                features: reference,
            }],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Always false: the reference entry is never evicted.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latest_timestamp(&self) -> usize {
        self.entries.last().map_or(0, |e| e.timestamp)
    }

    /// Append the last frame of a clip, evicting the oldest non-reference
    /// entry when full. With capacity 1 the update is dropped.
    pub fn update(&mut self, features: F, timestamp: usize) -> Result<()> {
        let latest = self.latest_timestamp();
        if timestamp <= latest {
            return Err(Error::Ordering { got: timestamp, latest });
        }
        if self.capacity == 1 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.remove(1);
        }
        self.entries.push(MemoryEntry { timestamp, features });
        Ok(())
    }

    /// Entries in storage order.
    pub fn entries(&self) -> &[MemoryEntry<F>] {
        &self.entries
    }

    /// Entries nearest-first, reference last.
    pub fn rte_order(&self) -> impl Iterator<Item = &MemoryEntry<F>> {
        self.entries.iter().rev()
    }

    pub fn timestamps(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.timestamp).collect()
    }
}

/// Per-scale frame and mask features of one stored frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryFeatures {
    pub frame: MultiScaleFeatures,
    pub mask: MultiScaleFeatures,
}

impl MemoryFeatures {
    pub fn new(frame: MultiScaleFeatures, mask: MultiScaleFeatures) -> Result<Self> {
        if frame.scale_strides != mask.scale_strides {
            return Err(Error::Config(format!(
                "frame features at strides {:?} but mask features at {:?}",
                frame.scale_strides, mask.scale_strides
            )));
        }
        for (f, m) in frame.per_scale.iter().zip(&mask.per_scale) {
            if f.shape()[..3] != m.shape()[..3] || f.shape()[0] != 1 {
                return Err(Error::Dimension(format!(
                    "memory entry must hold one frame with matching spatial size, got {:?} and {:?}",
                    f.shape(),
                    m.shape()
                )));
            }
        }
        Ok(Self { frame, mask })
    }
}

/// Concatenated memory contents for one scale: `[n, h, w, c]` frame and mask
/// features plus `n`.
#[derive(Clone, Debug)]
pub struct MemoryRead {
    pub frame: Vec<crate::tensor::Tensor>,
    pub mask: Vec<crate::tensor::Tensor>,
    pub strides: Vec<usize>,
    pub n: usize,
}

impl MemoryBank<MemoryFeatures> {
    pub fn init_features(reference: MemoryFeatures, capacity: usize) -> Result<Self> {
        Self::init(reference, capacity)
    }

    pub fn strides(&self) -> &[usize] {
        &self.entries[0].features.frame.scale_strides
    }

    /// Update with a strides check against the reference entry.
    pub fn update_features(&mut self, features: MemoryFeatures, timestamp: usize) -> Result<()> {
        if features.frame.scale_strides != self.strides() {
            return Err(Error::Config(format!(
                "memory update at strides {:?}, bank holds {:?}",
                features.frame.scale_strides,
                self.strides()
            )));
        }
        self.update(features, timestamp)
    }

    fn gather<'a>(&self, order: impl Iterator<Item = &'a MemoryEntry<MemoryFeatures>>) -> MemoryRead {
        let entries: Vec<&MemoryEntry<MemoryFeatures>> = order.collect();
        let strides = self.strides().to_vec();
        let per = |pick: fn(&MemoryFeatures) -> &MultiScaleFeatures| {
            (0..strides.len())
                .map(|s| {
                    let parts: Vec<&crate::tensor::Tensor> =
                        entries.iter().map(|e| &pick(&e.features).per_scale[s]).collect();
                    crate::tensor::Tensor::concat_outer(&parts)
                })
                .collect::<Vec<_>>()
        };
        MemoryRead {
            frame: per(|f| &f.frame),
            mask: per(|f| &f.mask),
            strides,
            n: entries.len(),
        }
    }

    /// Storage-order concatenation.
    pub fn read(&self) -> MemoryRead {
        self.gather(self.entries.iter())
    }

    /// Nearest-first concatenation, aligned with RTE indices.
    pub fn read_rte_order(&self) -> MemoryRead {
        self.gather(self.entries.iter().rev())
    }

    /// Human-readable state: capacity, then one line per entry.
    pub fn debug_dump(&self) -> String {
        let mut s = format!("capacity {}\nsize {}\n", self.capacity, self.len());
        for (i, e) in self.entries.iter().enumerate() {
            let shapes: Vec<String> = e
                .features
                .frame
                .per_scale
                .iter()
                .zip(&e.features.frame.scale_strides)
                .map(|(t, st)| format!("s{st}:{:?}", t.shape()))
                .collect();
            let _ = writeln!(s, "slot {i} t={} {}", e.timestamp, shapes.join(" "));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn fills_then_evicts_oldest_non_reference() {
        let mut b = MemoryBank::init((), 3).unwrap();
        assert_eq!(b.timestamps(), vec![0]);
        b.update((), 2).unwrap();
        b.update((), 4).unwrap();
        assert_eq!(b.timestamps(), vec![0, 2, 4]);
        b.update((), 6).unwrap();
        assert_eq!(b.timestamps(), vec![0, 4, 6]);
        let rte: Vec<usize> = b.rte_order().map(|e| e.timestamp).collect();
        assert_eq!(rte, vec![6, 4, 0]);
    }

    #[test]
    fn capacity_one_keeps_reference_only() {
        let mut b = MemoryBank::init((), 1).unwrap();
        for t in 1..5 {
            b.update((), t).unwrap();
        }
        assert_eq!(b.timestamps(), vec![0]);
    }

    #[test]
    fn ten_updates_into_seven_slots() {
        let mut b = MemoryBank::init((), 7).unwrap();
        for t in 1..=10 {
            b.update((), 2 * t).unwrap();
        }
        assert_eq!(b.len(), 7);
        assert_eq!(b.timestamps(), vec![0, 10, 12, 14, 16, 18, 20]);
    }

    #[test]
    fn rejects_stale_timestamps_and_zero_capacity() {
        let mut b = MemoryBank::init((), 3).unwrap();
        b.update((), 4).unwrap();
        assert!(matches!(b.update((), 4), Err(Error::Ordering { got: 4, latest: 4 })));
        assert!(matches!(b.update((), 0), Err(Error::Ordering { .. })));
        assert!(MemoryBank::init((), 0).is_err());
    }

    fn feats(v: f64, strides: &[usize]) -> MultiScaleFeatures {
        MultiScaleFeatures {
            per_scale: strides.iter().map(|s| Tensor::full(&[1, 64 / s, 64 / s, 2], v)).collect(),
            scale_strides: strides.to_vec(),
        }
    }

    #[test]
    fn reads_concatenate_along_frames() {
        let entry = |v| MemoryFeatures::new(feats(v, &[32, 16]), feats(-v, &[32, 16])).unwrap();
        let mut b = MemoryBank::init_features(entry(0.0), 3).unwrap();
        let r = b.read();
        assert_eq!(r.n, 1);
        assert_eq!(r.frame[0].shape(), &[1, 2, 2, 2]);
        b.update_features(entry(1.0), 2).unwrap();
        b.update_features(entry(2.0), 4).unwrap();
        let r = b.read();
        assert_eq!(r.n, 3);
        assert_eq!(r.frame[1].shape(), &[3, 4, 4, 2]);
        let rr = b.read_rte_order();
        assert_eq!(rr.frame[0].data()[0], 2.0);
        assert_eq!(rr.mask[0].data()[rr.mask[0].numel() - 1], -0.0);
        assert!(b.debug_dump().contains("slot 2 t=4 s32:[1, 2, 2, 2]"));
    }

    #[test]
    fn mismatched_scales_are_configuration_errors() {
        let bad = MemoryFeatures::new(feats(0.0, &[32, 16]), feats(0.0, &[32]));
        assert!(matches!(bad, Err(Error::Config(_))));
        let mut b = MemoryBank::init_features(MemoryFeatures::new(feats(0.0, &[32]), feats(0.0, &[32])).unwrap(), 3).unwrap();
        let other = MemoryFeatures::new(feats(0.0, &[16]), feats(0.0, &[16])).unwrap();
        assert!(matches!(b.update_features(other, 1), Err(Error::Config(_))));
    }
}
