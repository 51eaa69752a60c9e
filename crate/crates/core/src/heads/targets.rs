use crate::config::ScaleMode;
use crate::error::{Error, Result};
use crate::segment::Segment;

/// Ground-truth action in level-1 snippet units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub segment: Segment,
    pub class_id: usize,
}

/// Per-location targets on one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationTargets {
    pub level: usize,
    pub positive: Vec<bool>,
    pub class_id: Vec<Option<usize>>,
    /// `(d_s, d_e)` in head units, zero at negatives.
    pub distances: Vec<[f64; 2]>,
    pub assigned: Vec<Option<Segment>>,
}

impl LocationTargets {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|p| **p).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTargets {
    pub levels: Vec<LocationTargets>,
    /// Start-window labels over level-1 locations.
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl SampleTargets {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().map(LocationTargets::num_positive).sum()
    }
}

/// Centre-inside assignment: location `i` on level `l` (centre
/// `c = i·2^(l-1)`) is positive iff `c` lies strictly inside an annotated
/// segment; among several, the shortest wins, then the earliest start.
/// Also builds the start/end window labels `|i − ψ| ≤ τ` on level 1.
pub fn assign_targets(
    level_lens: &[usize],
    annotations: &[Annotation],
    clip_len: f64,
    scale_mode: ScaleMode,
    tau: f64,
) -> Result<SampleTargets> {
    for a in annotations {
        let s = a.segment;
        if !(s.start >= 0.0 && s.end <= clip_len && s.start < s.end) {
            return Err(Error::InvalidArgument(format!(
                "annotation [{}, {}] outside clip [0, {clip_len}] or empty",
                s.start, s.end
            )));
        }
    }
    let mut order: Vec<&Annotation> = annotations.iter().collect();
    order.sort_by(|a, b| {
        a.segment
            .length()
            .total_cmp(&b.segment.length())
            .then(a.segment.start.total_cmp(&b.segment.start))
    });
    let levels = level_lens
        .iter()
        .enumerate()
        .map(|(li, &len)| {
            let level = li + 1;
            let stride = (1usize << li) as f64;
            let scale = scale_mode.factor(level);
            let mut t = LocationTargets {
                level,
                positive: vec![false; len],
                class_id: vec![None; len],
                distances: vec![[0.0; 2]; len],
                assigned: vec![None; len],
            };
            for i in 0..len {
                let c = i as f64 * stride;
                if let Some(a) = order.iter().find(|a| a.segment.start < c && c < a.segment.end) {
                    t.positive[i] = true;
                    t.class_id[i] = Some(a.class_id);
                    t.distances[i] = [(c - a.segment.start) / scale, (a.segment.end - c) / scale];
                    t.assigned[i] = Some(a.segment);
                }
            }
            t
        })
        .collect();
    let base = level_lens.first().copied().unwrap_or(0);
    let window = |edge: fn(&Segment) -> f64| -> Vec<f64> {
        (0..base)
            .map(|i| {
                let i = i as f64;
                let hit = annotations.iter().any(|a| {
                    let e = edge(&a.segment);
                    e - tau <= i && i <= e + tau
                });
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    Ok(SampleTargets {
        levels,
        start: window(|s| s.start),
        end: window(|s| s.end),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(s: f64, e: f64, c: usize) -> Annotation {
        Annotation {
            segment: Segment::new(s, e),
            class_id: c,
        }
    }

    #[test]
    fn empty_annotations() {
        let t = assign_targets(&[64, 32], &[], 64.0, ScaleMode::Double, 5.0).unwrap();
        assert_eq!(t.num_positive(), 0);
        assert!(t.start.iter().all(|v| *v == 0.0));
        assert!(t.end.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn start_window_indices() {
        let t = assign_targets(&[64], &[ann(20.0, 40.0, 0)], 64.0, ScaleMode::Double, 5.0).unwrap();
        let ones: Vec<usize> = (0..64).filter(|&i| t.start[i] == 1.0).collect();
        assert_eq!(ones, (15..=25).collect::<Vec<_>>());
        let ones: Vec<usize> = (0..64).filter(|&i| t.end[i] == 1.0).collect();
        assert_eq!(ones, (35..=45).collect::<Vec<_>>());
    }

    #[test]
    fn nested_segments_pick_shortest() {
        let t = assign_targets(&[64], &[ann(10.0, 50.0, 0), ann(20.0, 30.0, 1)], 64.0, ScaleMode::Double, 5.0)
            .unwrap();
        assert_eq!(t.levels[0].class_id[25], Some(1));
        assert_eq!(t.levels[0].assigned[25], Some(Segment::new(20.0, 30.0)));
        assert_eq!(t.levels[0].class_id[40], Some(0));
        // c = 25, S(1) = 2
        assert_eq!(t.levels[0].distances[25], [2.5, 2.5]);
    }

    #[test]
    fn centre_strictly_inside() {
        let t = assign_targets(&[16, 8], &[ann(4.0, 8.0, 2)], 16.0, ScaleMode::Double, 1.0).unwrap();
        let pos: Vec<usize> = (0..16).filter(|&i| t.levels[0].positive[i]).collect();
        assert_eq!(pos, vec![5, 6, 7]);
        // level 2 centres are 0,2,4,6,...; only 6 is strictly inside
        let pos: Vec<usize> = (0..8).filter(|&i| t.levels[1].positive[i]).collect();
        assert_eq!(pos, vec![3]);
        assert_eq!(t.levels[1].distances[3], [0.5, 0.5]);
    }

    #[test]
    fn out_of_clip_rejected() {
        assert!(assign_targets(&[16], &[ann(4.0, 18.0, 0)], 16.0, ScaleMode::Double, 1.0).is_err());
        assert!(assign_targets(&[16], &[ann(5.0, 5.0, 0)], 16.0, ScaleMode::Double, 1.0).is_err());
    }
}
