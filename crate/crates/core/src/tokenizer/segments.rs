use crate::compute::{Graph, Real, Tensor};

use super::TokenizerError;

/// Segment membership of each position.
///
/// Position `t` belongs to segment `ids[t]`, the number of boundaries strictly
/// before `t`, so a boundary closes the segment it sits in and any trailing
/// positions after the last boundary form one final segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentIndex {
    pub ids: Vec<usize>,
    pub m: usize,
}

impl SegmentIndex {
    pub fn from_hard(hard: &[bool]) -> Self {
        let mut ids = Vec::with_capacity(hard.len());
        let mut closed = 0;
        for &b in hard {
            ids.push(closed);
            if b {
                closed += 1;
            }
        }
        let m = ids.last().map_or(0, |&j| j + 1);
        SegmentIndex { ids, m }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of positions in each segment.
    pub fn lengths(&self) -> Vec<usize> {
        let mut out = vec![0; self.m];
        for &j in &self.ids {
            out[j] += 1;
        }
        out
    }
}

/// For each position, the last segment closed strictly before it, or `None`
/// when no segment has closed yet (those positions read the null vector).
pub fn upsample_index(seg: &SegmentIndex) -> Vec<Option<usize>> {
    seg.ids.iter().map(|&j| j.checked_sub(1)).collect()
}

/// Mean of the hidden rows in each segment (`m x width`).
pub fn segment_pool<T: Real>(hidden: &Tensor<T>, seg: &SegmentIndex) -> Result<Tensor<T>, TokenizerError> {
    let mut g = Graph::new();
    let h = g.constant(hidden.clone());
    let p = g.segment_mean_pool(h, &seg.ids, seg.m)?;
    Ok(g.value(p).clone())
}
