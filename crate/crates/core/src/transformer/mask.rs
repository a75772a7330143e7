//! Additive self-attention masks.
//!
//! A mask entry is 0 (attend) or -10000 (blocked); the matrix is added to
//! raw attention scores before the softmax. The static seq2seq pattern lets
//! source positions see each other bidirectionally while target positions see
//! the whole source plus earlier targets. A dynamic overlay can additionally
//! block source columns, and may only ever turn 0 into -10000.

use crate::tokenizer::{Segment, TokenSequence};

pub const MASKED: f64 = -10000.0;

/// Per-pair additive mask matrix, row-major `[seq_len x seq_len]`, rows are
/// query positions and columns key positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    seq_len: usize,
    additive: Vec<f64>,
}

impl AttentionMask {
    /// Static seq2seq pattern for the given segment layout.
    pub fn seq2seq(segment: &[Segment]) -> Self {
        let n = segment.len();
        let mut additive = vec![0.0; n * n];
        for q in 0..n {
            for k in 0..n {
                let blocked = match (segment[q], segment[k]) {
                    (Segment::Source, Segment::Source) => false,
                    (Segment::Source, Segment::Target) => true,
                    (Segment::Target, Segment::Source) => false,
                    (Segment::Target, Segment::Target) => k > q,
                };
                if blocked {
                    additive[q * n + k] = MASKED;
                }
            }
        }
        AttentionMask { seq_len: n, additive }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn entries(&self) -> &[f64] {
        &self.additive
    }

    pub fn at(&self, query: usize, key: usize) -> f64 {
        self.additive[query * self.seq_len + key]
    }

    pub fn zeros_in_row(&self, query: usize) -> usize {
        self.additive[query * self.seq_len..(query + 1) * self.seq_len]
            .iter()
            .filter(|&&v| v == 0.0)
            .count()
    }

    /// Blocks the overlay's masked source columns for every query row, then
    /// restores the per-row fallback column wherever a row would be left with
    /// no attendable key. Entries only ever move 0 -> -10000 except for that
    /// guard, which re-zeroes a position that the static pattern had at 0.
    pub fn with_overlay(&self, overlay: &DynamicOverlay) -> Self {
        let n = self.seq_len;
        let mut out = self.clone();
        for (col, &masked) in overlay.masked.iter().enumerate() {
            if !masked || col >= n {
                continue;
            }
            for q in 0..n {
                out.additive[q * n + col] = MASKED;
            }
        }
        for q in 0..n {
            if out.zeros_in_row(q) == 0 {
                let col = overlay.fallback_col(q);
                // only re-open a position the static pattern allowed
                if self.additive[q * n + col] == 0.0 {
                    out.additive[q * n + col] = 0.0;
                } else {
                    out.additive[q * n + q] = 0.0;
                }
            }
        }
        out
    }
}

/// One sampled episode mask: which source columns are blocked, plus the
/// per-source-row fallback (its most-attended source column in the captured
/// state) used when a sampled mask would blind a row completely.
#[derive(Debug, Clone)]
pub struct DynamicOverlay {
    /// Per source position, `true` = action 0 (mask).
    pub masked: Vec<bool>,
    /// Per source row, the column restored if the row loses every key.
    pub top_attended: Vec<usize>,
}

impl DynamicOverlay {
    pub fn new(masked: Vec<bool>, top_attended: Vec<usize>) -> Self {
        DynamicOverlay {
            masked,
            top_attended,
        }
    }

    /// Overlay that blocks nothing (the "attend everything" policy).
    pub fn attend_all(n_src: usize) -> Self {
        DynamicOverlay {
            masked: vec![false; n_src],
            top_attended: (0..n_src).collect(),
        }
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.masked.is_empty() {
            return 0.0;
        }
        self.masked.iter().filter(|&&m| m).count() as f64 / self.masked.len() as f64
    }

    fn fallback_col(&self, row: usize) -> usize {
        self.top_attended.get(row).copied().unwrap_or(row)
    }
}

/// Which layers receive the dynamic overlay; the captured layer always sees
/// it so the next episode's state reflects the action taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApplyLayers {
    #[default]
    All,
    CapturedOnly,
}

impl std::str::FromStr for ApplyLayers {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(ApplyLayers::All),
            "captured" | "captured-only" => Ok(ApplyLayers::CapturedOnly),
            other => Err(format!("unknown apply_layers value: {other}")),
        }
    }
}

impl std::fmt::Display for ApplyLayers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ApplyLayers::All => write!(f, "all"),
            ApplyLayers::CapturedOnly => write!(f, "captured"),
        }
    }
}

/// Base mask plus optional overlay, with the layer-application policy.
#[derive(Debug, Clone)]
pub struct MaskSet {
    base: AttentionMask,
    overlaid: Option<AttentionMask>,
    apply: ApplyLayers,
}

impl MaskSet {
    pub fn static_only(seq: &TokenSequence) -> Self {
        MaskSet {
            base: AttentionMask::seq2seq(&seq.segment),
            overlaid: None,
            apply: ApplyLayers::All,
        }
    }

    pub fn with_overlay(seq: &TokenSequence, overlay: &DynamicOverlay, apply: ApplyLayers) -> Self {
        let base = AttentionMask::seq2seq(&seq.segment);
        let overlaid = base.with_overlay(overlay);
        MaskSet {
            base,
            overlaid: Some(overlaid),
            apply,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.base.seq_len()
    }

    pub fn base(&self) -> &AttentionMask {
        &self.base
    }

    pub fn for_layer(&self, layer: usize, capture_layer: usize) -> &AttentionMask {
        match (&self.overlaid, self.apply) {
            (Some(o), ApplyLayers::All) => o,
            (Some(o), ApplyLayers::CapturedOnly) if layer == capture_layer => o,
            _ => &self.base,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Segment::{Source, Target};

    fn segs() -> Vec<Segment> {
        // [SOS, w, SEP, t1, t2(EOS)]
        vec![Source, Source, Source, Target, Target]
    }

    #[test]
    fn static_pattern_blocks_targets_from_sources_and_future() {
        let m = AttentionMask::seq2seq(&segs());
        // source query sees sources, not targets
        assert_eq!(m.at(1, 0), 0.0);
        assert_eq!(m.at(1, 3), MASKED);
        // target query sees every source
        assert_eq!(m.at(3, 0), 0.0);
        assert_eq!(m.at(3, 2), 0.0);
        // target sees itself and earlier targets, not later ones
        assert_eq!(m.at(3, 3), 0.0);
        assert_eq!(m.at(3, 4), MASKED);
        assert_eq!(m.at(4, 3), 0.0);
    }

    #[test]
    fn every_row_keeps_a_zero() {
        let m = AttentionMask::seq2seq(&segs());
        for q in 0..5 {
            assert!(m.zeros_in_row(q) > 0);
        }
    }

    #[test]
    fn overlay_masks_source_columns_for_all_rows() {
        let m = AttentionMask::seq2seq(&segs());
        let overlay = DynamicOverlay::new(vec![false, true, false], vec![0, 0, 0]);
        let out = m.with_overlay(&overlay);
        for q in 0..5 {
            assert_eq!(out.at(q, 1), MASKED);
        }
        // untouched columns keep the static pattern
        assert_eq!(out.at(3, 0), 0.0);
        assert_eq!(out.at(1, 3), MASKED);
    }

    #[test]
    fn overlay_never_increases_zero_count() {
        let m = AttentionMask::seq2seq(&segs());
        let overlay = DynamicOverlay::new(vec![true, false, true], vec![1, 1, 1]);
        let out = m.with_overlay(&overlay);
        for q in 0..5 {
            assert!(out.zeros_in_row(q) <= m.zeros_in_row(q));
        }
    }

    #[test]
    fn all_masked_rows_fall_back_to_top_attended() {
        let m = AttentionMask::seq2seq(&segs());
        let overlay = DynamicOverlay::new(vec![true, true, true], vec![2, 0, 1]);
        let out = m.with_overlay(&overlay);
        // source rows would be empty; each reopens its recorded top column
        assert_eq!(out.at(0, 2), 0.0);
        assert_eq!(out.at(1, 0), 0.0);
        assert_eq!(out.at(2, 1), 0.0);
        for q in 0..5 {
            assert!(out.zeros_in_row(q) > 0, "row {q} left empty");
        }
        // target rows never lose their self-attention
        assert_eq!(out.at(3, 3), 0.0);
    }

    #[test]
    fn attend_all_overlay_is_identity() {
        let m = AttentionMask::seq2seq(&segs());
        let out = m.with_overlay(&DynamicOverlay::attend_all(3));
        assert_eq!(m, out);
    }

    #[test]
    fn mask_set_layer_selection() {
        let seq = crate::tokenizer::TokenSequence {
            ids: vec![1, 7, 3, 8, 2],
            segment: segs(),
        };
        let overlay = DynamicOverlay::new(vec![false, true, false], vec![0, 0, 0]);
        let set = MaskSet::with_overlay(&seq, &overlay, ApplyLayers::CapturedOnly);
        assert_eq!(set.for_layer(1, 1).at(0, 1), MASKED);
        assert_eq!(set.for_layer(0, 1).at(0, 1), 0.0);
        let set = MaskSet::with_overlay(&seq, &overlay, ApplyLayers::All);
        assert_eq!(set.for_layer(0, 1).at(0, 1), MASKED);
    }
}
