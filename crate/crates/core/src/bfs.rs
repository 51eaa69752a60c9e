//! Background feature sampling: channelwise maxima over the background
//! left of each coarse start and right of each coarse end, fused with the
//! boundary-attended level features into the combined feature `H_l`.

use crate::backbone::{CoarseProposal, PyramidLevel};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::Conv;

/// Half-open index windows `[a, b)` on one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackgroundRanges {
    pub left: (usize, usize),
    pub right: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub struct CombinedFeature {
    pub level: usize,
    pub features: Var,
}

/// Background windows for one proposal, with `start`/`end` in level units.
///
/// left = `[δ·start, start)`, right = `[end, end + δ·(len − end))`, each
/// endpoint rounded to the nearest index and clamped to `[0, len]`.
pub fn background_ranges(start: f64, end: f64, length: usize, delta: f64) -> Result<BackgroundRanges> {
    if start > end {
        return Err(Error::InvalidArgument(format!(
            "background ranges need start <= end, got {start} > {end}"
        )));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate must be in (0, 1], got {delta}")));
    }
    let len = length as f64;
    let idx = |v: f64| v.round().clamp(0.0, len) as usize;
    let (start, end) = (start.clamp(0.0, len), end.clamp(0.0, len));
    let left = (idx(delta * start), idx(start));
    let right = (idx(end), idx(end + delta * (len - end)));
    Ok(BackgroundRanges {
        left: (left.0.min(left.1), left.1),
        right: (right.0, right.1.max(right.0)),
    })
}

/// Ranges for every proposal of one level. Proposal segments live on the
/// level-1 axis and are divided by the level stride first.
pub fn proposal_ranges(
    level: &PyramidLevel,
    length: usize,
    proposals: &[CoarseProposal],
    delta: f64,
) -> Result<Vec<BackgroundRanges>> {
    if proposals.len() != length {
        return Err(Error::shape(
            "sample_background",
            format!("{} proposals for {length} locations", proposals.len()),
        ));
    }
    let stride = level.stride as f64;
    proposals
        .iter()
        .map(|p| background_ranges(p.segment.start / stride, p.segment.end / stride, length, delta))
        .collect()
}

/// Background tensor `T_l×2C` for precomputed ranges: left maxima in the
/// first `C` channels, right maxima in the last `C`. Empty ranges give zeros.
pub fn sample_with_ranges(tape: &mut Tape, features: Var, ranges: &[BackgroundRanges]) -> Result<Var> {
    let left: Vec<_> = ranges.iter().map(|r| r.left).collect();
    let right: Vec<_> = ranges.iter().map(|r| r.right).collect();
    let l = tape.range_max(features, &left)?;
    let r = tape.range_max(features, &right)?;
    tape.concat_cols(&[l, r])
}

pub fn sample_background(
    tape: &mut Tape,
    level: &PyramidLevel,
    proposals: &[CoarseProposal],
    delta: f64,
) -> Result<(Var, Vec<BackgroundRanges>)> {
    let ranges = proposal_ranges(level, level.len(tape), proposals, delta)?;
    let bg = sample_with_ranges(tape, level.features, &ranges)?;
    Ok((bg, ranges))
}

/// `H_l = Conv([M_l ⊙ (P_s + P_e), BG])`, reducing `3C → C` channels.
pub fn refine_features(
    tape: &mut Tape,
    level: &PyramidLevel,
    pooled_start: Var,
    pooled_end: Var,
    background: Var,
    reduce: &Conv,
) -> Result<CombinedFeature> {
    let attention = tape.add(pooled_start, pooled_end)?;
    let attended = tape.mul(level.features, attention)?;
    let stacked = tape.concat_cols(&[attended, background])?;
    let features = reduce.forward(tape, stacked, 1)?;
    Ok(CombinedFeature {
        level: level.level,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::oracle;
    use crate::segment::Segment;
    use proptest::prelude::*;

    #[test]
    fn range_example() {
        let r = background_ranges(40.0, 60.0, 100, 0.7).unwrap();
        assert_eq!(r.left, (28, 40));
        assert_eq!(r.right, (60, 88));
    }

    #[test]
    fn edge_boundaries_give_empty_ranges() {
        let r = background_ranges(0.0, 50.0, 100, 0.7).unwrap();
        assert_eq!(r.left.0, r.left.1);
        let r = background_ranges(10.0, 100.0, 100, 0.7).unwrap();
        assert_eq!(r.right.0, r.right.1);
    }

    #[test]
    fn full_rate_right_range_reaches_clip_end() {
        let r = background_ranges(40.0, 60.0, 100, 1.0).unwrap();
        assert_eq!(r.right, (60, 100));
        // the left window [δ·start, start) collapses at δ = 1
        assert_eq!(r.left, (40, 40));
    }

    #[test]
    fn reversed_boundaries_rejected() {
        assert!(background_ranges(60.0, 40.0, 100, 0.7).is_err());
    }

    proptest! {
        #[test]
        fn ranges_in_bounds_and_nested(
            len in 1usize..200,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
            d1 in 0.01f64..1.0,
            d2 in 0.01f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (s, e) = (lo * len as f64, hi * len as f64);
            let (d1, d2) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let r1 = background_ranges(s, e, len, d1).unwrap();
            let r2 = background_ranges(s, e, len, d2).unwrap();
            for r in [r1, r2] {
                prop_assert!(r.left.0 <= r.left.1 && r.left.1 <= len);
                prop_assert!(r.right.0 <= r.right.1 && r.right.1 <= len);
            }
            // left window shrinks toward the start as δ grows; right grows
            prop_assert!(r1.left.0 <= r2.left.0 && r1.left.1 == r2.left.1);
            prop_assert!(r1.right.0 == r2.right.0 && r1.right.1 <= r2.right.1);
        }
    }

    fn level_with(tape: &mut Tape, t: Tensor, stride: usize) -> PyramidLevel {
        PyramidLevel {
            level: stride.trailing_zeros() as usize + 1,
            stride,
            features: tape.leaf(&t),
        }
    }

    fn proposal(i: usize, s: f64, e: f64) -> CoarseProposal {
        CoarseProposal {
            level: 1,
            location: i,
            start_dist: 0.0,
            end_dist: 0.0,
            segment: Segment::new(s, e),
        }
    }

    #[test]
    fn constant_features_give_constant_background() {
        let mut tape = Tape::new();
        let lvl = level_with(&mut tape, Tensor::full(&[10, 2], 3.5), 1);
        let props: Vec<_> = (0..10).map(|i| proposal(i, 4.0, 6.0)).collect();
        let (bg, ranges) = sample_background(&mut tape, &lvl, &props, 0.5).unwrap();
        assert_eq!(tape.shape(bg), &[10, 4]);
        for (i, r) in ranges.iter().enumerate() {
            let row = &tape.value(bg)[i * 4..i * 4 + 4];
            if r.left.0 < r.left.1 {
                assert_eq!(&row[..2], &[3.5, 3.5]);
            }
            if r.right.0 < r.right.1 {
                assert_eq!(&row[2..], &[3.5, 3.5]);
            }
        }
    }

    #[test]
    fn left_spike_only_in_left_channels() {
        let mut data = vec![0.0; 20 * 2];
        data[3 * 2] = 9.0;
        data[3 * 2 + 1] = 7.0;
        let mut tape = Tape::new();
        let lvl = level_with(&mut tape, Tensor::new(vec![20, 2], data).unwrap(), 1);
        let props: Vec<_> = (0..20).map(|i| proposal(i, 5.0, 12.0)).collect();
        let (bg, ranges) = sample_background(&mut tape, &lvl, &props, 0.5).unwrap();
        // left = [round(2.5), 5) = [3, 5) contains the spike
        assert_eq!(ranges[0].left, (3, 5));
        let row = &tape.value(bg)[0..4];
        assert_eq!(row, &[9.0, 7.0, 0.0, 0.0]);
        let naive = oracle::sample_background_naive(&tape.tensor(lvl.features), &ranges);
        assert_eq!(tape.value(bg), naive.data());
    }

    #[test]
    fn identity_wiring_recovers_level_features() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
        let m = crate::params::Init::new(&mut rng, 1.0).uniform(&[6, 3], 1.0);
        let mut tape = Tape::new();
        let lvl = level_with(&mut tape, m.clone(), 1);
        let ps = tape.constant(&[6, 3], vec![0.5; 18]).unwrap();
        let pe = tape.constant(&[6, 3], vec![0.5; 18]).unwrap();
        let bg = tape.constant(&[6, 6], vec![0.0; 36]).unwrap();
        // kernel 1: identity on the first C of 3C inputs
        let mut w = vec![0.0; 9 * 3];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let weight = tape.constant(&[1, 9, 3], w).unwrap();
        let bias = tape.constant(&[3], vec![0.0; 3]).unwrap();
        let conv = Conv { weight, bias, kernel: 1 };
        let h = refine_features(&mut tape, &lvl, ps, pe, bg, &conv).unwrap();
        assert_eq!(tape.value(h.features), m.data());
    }

    #[test]
    fn zero_attention_leaves_background_only() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(12);
        let mut init = crate::params::Init::new(&mut rng, 1.0);
        let m = init.uniform(&[6, 2], 1.0);
        let bgt = init.uniform(&[6, 4], 1.0);
        let w = init.uniform(&[3, 6, 2], 1.0);
        let mut tape = Tape::new();
        let lvl = level_with(&mut tape, m, 1);
        let zeros = tape.constant(&[6, 2], vec![0.0; 12]).unwrap();
        let bg = tape.leaf(&bgt);
        let weight = tape.leaf(&w);
        let bias = tape.constant(&[2], vec![0.1, -0.1]).unwrap();
        let conv = Conv { weight, bias, kernel: 3 };
        let h = refine_features(&mut tape, &lvl, zeros, zeros, bg, &conv).unwrap();
        let mut stacked = vec![0.0; 6 * 6];
        for t in 0..6 {
            stacked[t * 6 + 2..t * 6 + 6].copy_from_slice(bgt.row(t));
        }
        let expected = oracle::conv1d_naive(
            &Tensor::new(vec![6, 6], stacked).unwrap(),
            &w,
            Some(&[0.1, -0.1]),
            1,
            1,
        );
        for (a, b) in tape.value(h.features).iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
