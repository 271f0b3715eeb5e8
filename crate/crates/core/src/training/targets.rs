//! Assignment of ground-truth segments to (position, anchor) cells of a head output.

use crate::proposals::AnchorSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub position: usize,
    pub anchor: usize,
    /// Target for `σ(c)`: the center's offset inside its cell.
    pub c_target: f64,
    /// Target for `l`: `ln(length / anchor)` in cells.
    pub l_target: f64,
    /// Index of the ground-truth segment.
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub positions: usize,
    pub anchors: usize,
    /// Sorted by `(position, anchor)`.
    pub positives: Vec<Positive>,
}

impl Assignment {
    pub fn is_positive(&self, position: usize, anchor: usize) -> bool {
        self.positives
            .iter()
            .any(|p| p.position == position && p.anchor == anchor)
    }
}

/// Anchor index minimising `|ln(length / anchor)|`; ties go to the smaller anchor.
pub fn closest_anchor(length_cells: f64, anchors: &[f64]) -> usize {
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for (i, a) in anchors.iter().enumerate() {
        let gap = (length_cells / a).ln().abs();
        if gap < best_gap {
            best = i;
            best_gap = gap;
        }
    }
    best
}

/// Each segment `(start, end)` in seconds goes to the cell holding its center (clamped to
/// `t − 1`) and its closest anchor. When two segments land on the same cell and anchor the
/// longer one is kept.
pub fn assign_targets(segments: &[(f64, f64)], anchors: &AnchorSet, t: usize) -> Assignment {
    let cell = anchors.cell_seconds;
    let mut positives: Vec<Positive> = Vec::with_capacity(segments.len());
    for (i, &(s, e)) in segments.iter().enumerate() {
        let center = 0.5 * (s + e) / cell;
        let length = (e - s) / cell;
        let position = (center.floor().max(0.0) as usize).min(t.saturating_sub(1));
        let anchor = closest_anchor(length, &anchors.anchors);
        let candidate = Positive {
            position,
            anchor,
            c_target: (center - position as f64).clamp(0.0, 1.0),
            l_target: (length / anchors.anchors[anchor]).ln(),
            segment: i,
        };
        match positives
            .iter_mut()
            .find(|p| p.position == position && p.anchor == anchor)
        {
            Some(existing) => {
                let (ps, pe) = segments[existing.segment];
                log::warn!(
                    "{} segments {} and {i} collide at cell {position}, anchor {anchor}; keeping the longer",
                    anchors.modality,
                    existing.segment
                );
                if e - s > pe - ps {
                    *existing = candidate;
                }
            }
            None => positives.push(candidate),
        }
    }
    positives.sort_by_key(|p| (p.position, p.anchor));
    Assignment {
        positions: t,
        anchors: anchors.len(),
        positives,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;

    fn anchors(xs: &[f64]) -> AnchorSet {
        AnchorSet::new(Modality::Audio, xs.to_vec(), 1.0).unwrap()
    }

    #[test]
    fn center_cell_is_the_floor() {
        let a = assign_targets(&[(1.2, 5.2)], &anchors(&[4.0]), 10);
        assert_eq!(a.positives[0].position, 3);
        assert!((a.positives[0].c_target - 0.2).abs() < 1e-12);
        assert!(a.positives[0].l_target.abs() < 1e-12);
    }

    #[test]
    fn symmetric_log_tie_picks_smaller_anchor() {
        assert_eq!(closest_anchor(4.0, &[2.0, 8.0]), 0);
    }

    #[test]
    fn collision_keeps_the_longer_segment() {
        let a = assign_targets(&[(2.0, 4.0), (1.5, 4.5)], &anchors(&[3.0]), 10);
        assert_eq!(a.positives.len(), 1);
        assert_eq!(a.positives[0].segment, 1);
    }
}
