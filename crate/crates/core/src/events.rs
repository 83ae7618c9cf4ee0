//! Turns per-segment verdicts into timestamped cough events.
//!
//! A positive segment seeds an event from its first onset peak (or the
//! segment start when it has none) to its last onset peak plus `tail_s` (or
//! the segment end). A positive segment directly after another positive one
//! extends the open event instead of starting a new one when its first onset
//! lies within `merge_window_s` of the boundary, or when its seed would
//! overlap the open event.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::OnsetPeak;

#[derive(Debug, Error, PartialEq)]
pub enum EventError {
    #[error("segment {got} follows segment {previous}; segments must be contiguous")]
    NonContiguousSegments { previous: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentVerdict {
    pub segment_index: usize,
    pub probability: f64,
    /// Onset times relative to the segment start.
    pub onset_peaks: Vec<OnsetPeak>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoughEvent {
    pub start_s: f64,
    pub end_s: f64,
    pub confidence: f64,
    pub merged_segment_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationParams {
    pub threshold: f64,
    pub merge_window_s: f64,
    pub tail_s: f64,
}

impl Default for ConsolidationParams {
    fn default() -> Self {
        Self { threshold: 0.5, merge_window_s: 0.4, tail_s: 0.45 }
    }
}

/// Streaming fold over one stream's verdicts. Holds at most one open event.
#[derive(Debug, Clone)]
pub struct Consolidator {
    params: ConsolidationParams,
    open: Option<CoughEvent>,
    last_index: Option<usize>,
}

impl Consolidator {
    pub fn new(params: ConsolidationParams) -> Self {
        Self { params, open: None, last_index: None }
    }

    /// Feeds the next verdict; returns an event once it can no longer grow.
    pub fn push(&mut self, v: &SegmentVerdict) -> Result<Option<CoughEvent>, EventError> {
        if let Some(prev) = self.last_index {
            if v.segment_index != prev + 1 {
                return Err(EventError::NonContiguousSegments { previous: prev, got: v.segment_index });
            }
        }
        self.last_index = Some(v.segment_index);

        if v.probability < self.params.threshold {
            return Ok(self.open.take());
        }

        let base = v.segment_index as f64;
        let seed = match (v.onset_peaks.first(), v.onset_peaks.last()) {
            (Some(first), Some(last)) => CoughEvent {
                start_s: base + first.time_s,
                end_s: base + last.time_s + self.params.tail_s,
                confidence: v.probability,
                merged_segment_count: 1,
            },
            _ => CoughEvent { start_s: base, end_s: base + 1.0, confidence: v.probability, merged_segment_count: 1 },
        };

        let Some(open) = self.open.as_mut() else {
            self.open = Some(seed);
            return Ok(None);
        };
        let near_boundary = v.onset_peaks.first().is_some_and(|p| p.time_s <= self.params.merge_window_s);
        if near_boundary || seed.start_s < open.end_s {
            open.end_s = open.end_s.max(seed.end_s);
            open.confidence = open.confidence.max(seed.confidence);
            open.merged_segment_count += 1;
            Ok(None)
        } else {
            Ok(self.open.replace(seed))
        }
    }

    /// Flushes the open event, if any.
    pub fn finish(&mut self) -> Option<CoughEvent> {
        self.open.take()
    }
}

pub fn consolidate(verdicts: &[SegmentVerdict], params: ConsolidationParams) -> Result<Vec<CoughEvent>, EventError> {
    let mut c = Consolidator::new(params);
    let mut events = Vec::new();
    for v in verdicts {
        events.extend(c.push(v)?);
    }
    events.extend(c.finish());
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(i: usize, p: f64, onsets: &[f64]) -> SegmentVerdict {
        SegmentVerdict {
            segment_index: i,
            probability: p,
            onset_peaks: onsets.iter().map(|&t| OnsetPeak { time_s: t, strength: 1.0 }).collect(),
        }
    }

    #[test]
    fn single_positive_segment() {
        let ev = consolidate(&[verdict(0, 0.1, &[]), verdict(1, 0.1, &[]), verdict(2, 0.9, &[0.3])], Default::default()).unwrap();
        assert_eq!(ev.len(), 1);
        assert!((ev[0].start_s - 2.3).abs() < 1e-12);
        assert!((ev[0].end_s - 2.75).abs() < 1e-12);
        assert_eq!(ev[0].merged_segment_count, 1);
    }

    #[test]
    fn boundary_spill_merges() {
        // cough from 0.3 s carrying past the 1 s boundary; next onset at 1.35 s
        let ev = consolidate(&[verdict(0, 0.8, &[0.3]), verdict(1, 0.95, &[0.35])], Default::default()).unwrap();
        assert_eq!(ev.len(), 1);
        assert!((ev[0].start_s - 0.3).abs() < 1e-12);
        assert!((ev[0].end_s - 1.8).abs() < 1e-9);
        assert_eq!(ev[0].confidence, 0.95);
        assert_eq!(ev[0].merged_segment_count, 2);
    }

    #[test]
    fn far_onset_splits() {
        let ev = consolidate(&[verdict(0, 0.8, &[0.3]), verdict(1, 0.9, &[0.9])], Default::default()).unwrap();
        assert_eq!(ev.len(), 2);
        assert!(ev[0].end_s <= ev[1].start_s);
    }

    #[test]
    fn onsetless_positive_spans_segment() {
        let ev = consolidate(&[verdict(4, 0.7, &[])], Default::default()).unwrap();
        assert_eq!(ev, vec![CoughEvent { start_s: 4.0, end_s: 5.0, confidence: 0.7, merged_segment_count: 1 }]);
    }

    #[test]
    fn overlapping_seed_is_merged() {
        // first event ends at 1.4 s; the next segment has no onsets, so its
        // seed starts at the boundary and would overlap
        let ev = consolidate(&[verdict(0, 0.8, &[0.95]), verdict(1, 0.6, &[])], Default::default()).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].end_s, 2.0);
    }

    #[test]
    fn gaps_are_rejected() {
        assert_eq!(
            consolidate(&[verdict(0, 0.8, &[]), verdict(2, 0.8, &[])], Default::default()),
            Err(EventError::NonContiguousSegments { previous: 0, got: 2 })
        );
    }

    #[test]
    fn all_negative_gives_nothing() {
        let v: Vec<_> = (0..10).map(|i| verdict(i, 0.49, &[0.1, 0.5])).collect();
        assert!(consolidate(&v, Default::default()).unwrap().is_empty());
    }
}
