//! tIoU-based average precision, mAP over threshold grids and
//! false-negative profiling.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Annotation;
use crate::inference::Detection;

pub use crate::segment::tiou;

pub const THUMOS_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

pub fn activitynet_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Greedy matching of one class's detections (all videos, descending
/// score) against that class's ground truth. Returns the TP flag per
/// ranked detection and the number of GT instances.
fn match_class(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    class_id: usize,
    threshold: f64,
) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(v, d)| d.iter().filter(|d| d.class_id == class_id).map(move |d| (v, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = ground_truth
        .iter()
        .flatten()
        .filter(|g| g.class_id == class_id)
        .count();
    let flags = ranked
        .iter()
        .map(|(v, d)| {
            let gts = ground_truth.get(*v).map_or(&[][..], |g| g.as_slice());
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if g.class_id != class_id || matched[*v][gi] {
                    continue;
                }
                let o = tiou(&d.segment, &g.segment);
                if o < threshold {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bi, bo)) => o > bo || (o == bo && g.segment.start < gts[bi].segment.start),
                };
                if better {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                matched[*v][gi] = true;
                true
            } else {
                false
            }
        })
        .collect();
    (flags, num_gt)
}

/// All-point interpolated AP for one class; `None` if the class has no
/// ground truth.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    class_id: usize,
    threshold: f64,
) -> Option<f64> {
    let (flags, num_gt) = match_class(detections, ground_truth, class_id, threshold);
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for (k, hit) in flags.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    Some(ap)
}

/// A half-open `(lo, hi]` bucket; `hi = ∞` for the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl Bucket {
    pub fn new(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo < v && v <= self.hi
    }
}

/// Action-length buckets in seconds.
pub fn default_length_buckets() -> Vec<Bucket> {
    vec![
        Bucket::new("XS", 0.0, 2.0),
        Bucket::new("S", 2.0, 4.0),
        Bucket::new("M", 4.0, 6.0),
        Bucket::new("L", 6.0, 18.0),
        Bucket::new("XL", 18.0, f64::INFINITY),
    ]
}

/// Fraction of the video covered by the instance.
pub fn default_coverage_buckets() -> Vec<Bucket> {
    vec![
        Bucket::new("XS", 0.0, 0.02),
        Bucket::new("S", 0.02, 0.04),
        Bucket::new("M", 0.04, 0.06),
        Bucket::new("L", 0.06, 0.18),
        Bucket::new("XL", 0.18, f64::INFINITY),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRate {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub instances: usize,
    pub false_negatives: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FnProfile {
    pub threshold: f64,
    pub instances: usize,
    pub false_negatives: usize,
    pub length: Vec<BucketRate>,
    pub coverage: Vec<BucketRate>,
}

fn check_sorted(buckets: &[Bucket]) -> Result<()> {
    for b in buckets {
        if !(b.lo < b.hi) {
            return Err(Error::InvalidArgument(format!("bucket {} has lo >= hi", b.name)));
        }
    }
    if buckets.windows(2).any(|w| w[0].hi > w[1].lo) {
        return Err(Error::InvalidArgument("bucket boundaries must be sorted and disjoint".into()));
    }
    Ok(())
}

fn rates(buckets: &[Bucket], items: &[(bool, f64)]) -> Vec<BucketRate> {
    buckets
        .iter()
        .map(|b| {
            let inside: Vec<bool> = items.iter().filter(|(_, v)| b.contains(*v)).map(|(f, _)| *f).collect();
            let fns = inside.iter().filter(|f| **f).count();
            BucketRate {
                name: b.name.clone(),
                lo: b.lo,
                hi: b.hi,
                instances: inside.len(),
                false_negatives: fns,
                rate: if inside.is_empty() { 0.0 } else { fns as f64 / inside.len() as f64 },
            }
        })
        .collect()
}

/// A GT instance is a false negative iff no detection of its class in its
/// video reaches `threshold` tIoU with it. `durations` gives each video's
/// length in the same unit as the segments.
pub fn fn_profile(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    durations: &[f64],
    length_buckets: &[Bucket],
    coverage_buckets: &[Bucket],
    threshold: f64,
) -> Result<FnProfile> {
    check_sorted(length_buckets)?;
    check_sorted(coverage_buckets)?;
    let mut by_length = Vec::new();
    let mut by_coverage = Vec::new();
    for (v, gts) in ground_truth.iter().enumerate() {
        let dets = detections.get(v).map_or(&[][..], |d| d.as_slice());
        for g in gts {
            let missed = !dets
                .iter()
                .any(|d| d.class_id == g.class_id && tiou(&d.segment, &g.segment) >= threshold);
            by_length.push((missed, g.segment.length()));
            let duration = durations.get(v).copied().unwrap_or(0.0);
            let coverage = if duration > 0.0 { g.segment.length() / duration } else { 0.0 };
            by_coverage.push((missed, coverage));
        }
    }
    if by_length.is_empty() {
        return Ok(FnProfile {
            threshold,
            ..FnProfile::default()
        });
    }
    Ok(FnProfile {
        threshold,
        instances: by_length.len(),
        false_negatives: by_length.iter().filter(|(f, _)| *f).count(),
        length: rates(length_buckets, &by_length),
        coverage: rates(coverage_buckets, &by_coverage),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// `ap[t][c]`; `None` for classes without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    pub map: Vec<f64>,
    pub average_map: f64,
    pub fn_profile: Option<FnProfile>,
}

/// Per-threshold mAP over classes with ground truth, and their mean.
pub fn map_grid(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("threshold grid is empty".into()));
    }
    let mut ap = Vec::with_capacity(thresholds.len());
    let mut map = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let per_class: Vec<Option<f64>> = (0..num_classes)
            .map(|c| average_precision(detections, ground_truth, c, t))
            .collect();
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        map.push(if valid.is_empty() {
            0.0
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        });
        ap.push(per_class);
    }
    let average_map = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        ap,
        map,
        average_map,
        fn_profile: None,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<16}", "tIoU");
        for t in &self.thresholds {
            let _ = write!(s, "{t:>8.2}");
        }
        let _ = writeln!(s);
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
        let classes = self.ap.first().map_or(0, Vec::len);
        for c in 0..classes {
            if self.ap.iter().all(|row| row[c].is_none()) {
                continue;
            }
            let _ = write!(s, "{:<16}", name(c));
            for row in &self.ap {
                match row[c] {
                    Some(v) => {
                        let _ = write!(s, "{:>8.2}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(s, "{:>8}", "-");
                    }
                }
            }
            let _ = writeln!(s);
        }
        let _ = write!(s, "{:<16}", "mAP");
        for m in &self.map {
            let _ = write!(s, "{:>8.2}", 100.0 * m);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "average mAP: {:.2}", 100.0 * self.average_map);
        if let Some(p) = &self.fn_profile {
            let _ = writeln!(
                s,
                "\nfalse negatives at tIoU {:.2}: {}/{}",
                p.threshold, p.false_negatives, p.instances
            );
            for (title, rows) in [("length (s)", &p.length), ("coverage", &p.coverage)] {
                let _ = writeln!(s, "{title}");
                for r in rows {
                    let _ = writeln!(
                        s,
                        "  {:<4} ({:>6}, {:>6}]  {:>4}/{:<4}  {:.3}",
                        r.name,
                        r.lo,
                        r.hi,
                        r.false_negatives,
                        r.instances,
                        r.rate
                    );
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::segment::Segment;
    use proptest::prelude::*;

    fn det(s: f64, e: f64, c: usize, score: f64) -> Detection {
        Detection {
            segment: Segment::new(s, e),
            class_id: c,
            score,
        }
    }

    fn gt(s: f64, e: f64, c: usize) -> Annotation {
        Annotation {
            segment: Segment::new(s, e),
            class_id: c,
        }
    }

    #[test]
    fn tiou_examples() {
        let a = Segment::new(0.0, 10.0);
        assert_eq!(tiou(&a, &a), 1.0);
        assert!((tiou(&a, &Segment::new(5.0, 15.0)) - 5.0 / 15.0).abs() < 1e-15);
        assert_eq!(tiou(&a, &Segment::new(11.0, 12.0)), 0.0);
        assert_eq!(tiou(&Segment::new(1.0, 1.0), &Segment::new(1.0, 1.0)), 0.0);
    }

    #[test]
    fn perfect_and_rank_inverted() {
        let g = vec![vec![gt(0.0, 10.0, 0)]];
        assert_eq!(average_precision(&[vec![det(0.0, 10.0, 0, 0.9)]], &g, 0, 0.5), Some(1.0));
        let d = vec![vec![det(20.0, 30.0, 0, 0.9), det(0.0, 10.0, 0, 0.5)]];
        assert_eq!(average_precision(&d, &g, 0, 0.5), Some(0.5));
        assert_eq!(average_precision(&d, &g, 1, 0.5), None);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let g = vec![vec![gt(0.0, 10.0, 0)]];
        let d = vec![vec![det(0.0, 10.0, 0, 0.9), det(0.0, 10.0, 0, 0.8)]];
        let (flags, _) = match_class(&d, &g, 0, 0.5);
        assert_eq!(flags, vec![true, false]);
        assert_eq!(average_precision(&d, &g, 0, 0.5), Some(1.0));
    }

    #[test]
    fn equal_tiou_prefers_earlier_gt() {
        let g = vec![vec![gt(10.0, 20.0, 0), gt(0.0, 10.0, 0)]];
        let d = vec![vec![det(5.0, 15.0, 0, 0.9)]];
        let (flags, _) = match_class(&d, &g, 0, 0.3);
        assert_eq!(flags, vec![true]);
        let d = vec![vec![det(5.0, 15.0, 0, 0.9), det(10.0, 20.0, 0, 0.8)]];
        // the first detection took [0, 10]; the second still finds [10, 20]
        assert_eq!(average_precision(&d, &g, 0, 0.3), Some(1.0));
    }

    #[test]
    fn grids() {
        assert_eq!(THUMOS_THRESHOLDS, [0.3, 0.4, 0.5, 0.6, 0.7]);
        let a = activitynet_thresholds();
        assert_eq!(a.len(), 10);
        assert!((a[0] - 0.5).abs() < 1e-12 && (a[9] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn perfect_grid() {
        let g = vec![vec![gt(0.0, 10.0, 0), gt(20.0, 25.0, 1)], vec![gt(3.0, 4.0, 1)]];
        let d: Vec<Vec<Detection>> = g
            .iter()
            .map(|v| v.iter().map(|a| det(a.segment.start, a.segment.end, a.class_id, 0.8)).collect())
            .collect();
        let r = map_grid(&d, &g, 3, &THUMOS_THRESHOLDS).unwrap();
        assert_eq!(r.average_map, 1.0);
        assert!(r.ap.iter().all(|row| row[2].is_none()));
        assert!(map_grid(&d, &g, 3, &[]).is_err());
    }

    #[test]
    fn xl_bucket_unmatched() {
        let g = vec![vec![gt(0.0, 20.0, 0)]];
        let p = fn_profile(
            &[vec![]],
            &g,
            &[100.0],
            &default_length_buckets(),
            &default_coverage_buckets(),
            0.5,
        )
        .unwrap();
        let xl = p.length.iter().find(|b| b.name == "XL").unwrap();
        assert_eq!(xl.rate, 1.0);
        assert!(p.length.iter().filter(|b| b.name != "XL").all(|b| b.rate == 0.0));
        let empty = fn_profile(&[], &[], &[], &default_length_buckets(), &default_coverage_buckets(), 0.5).unwrap();
        assert!(empty.length.is_empty());
    }

    #[test]
    fn five_instance_profile_matches_oracle() {
        let g = vec![
            vec![gt(0.0, 1.5, 0), gt(3.0, 6.0, 1), gt(10.0, 30.0, 0)],
            vec![gt(2.0, 5.0, 2), gt(7.0, 14.0, 0)],
        ];
        let d = vec![
            vec![det(0.0, 1.4, 0, 0.9), det(3.5, 6.0, 0, 0.8), det(12.0, 30.0, 0, 0.3)],
            vec![det(2.0, 5.0, 1, 0.9), det(7.5, 13.0, 0, 0.7)],
        ];
        let p = fn_profile(&d, &g, &[40.0, 20.0], &default_length_buckets(), &default_coverage_buckets(), 0.5)
            .unwrap();
        let naive = oracle::false_negatives_naive(&d, &g, 0.5);
        for b in &p.length {
            let inside: Vec<_> = naive.iter().filter(|(_, l)| *l > b.lo && *l <= b.hi).collect();
            let fns = inside.iter().filter(|(f, _)| *f).count();
            assert_eq!(b.instances, inside.len());
            assert_eq!(b.false_negatives, fns);
        }
        assert_eq!(p.false_negatives, naive.iter().filter(|(f, _)| *f).count());
        assert_eq!(p.false_negatives, 2);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<Annotation>>)> {
        let seg = (0u8..20, 1u8..8).prop_map(|(s, l)| (s as f64, (s + l) as f64));
        let d = prop::collection::vec((seg.clone(), 0usize..2, 0u8..10), 0..=6);
        let g = prop::collection::vec((seg, 0usize..2), 1..=4);
        (d, g, 0usize..2).prop_map(|(d, g, split)| {
            let dets: Vec<Detection> = d
                .into_iter()
                .map(|((s, e), c, sc)| det(s, e, c, sc as f64 / 10.0 + 0.05))
                .collect();
            let gts: Vec<Annotation> = g.into_iter().map(|((s, e), c)| gt(s, e, c)).collect();
            let (d1, d2) = dets.split_at(split.min(dets.len()));
            let (g1, g2) = gts.split_at(split.min(gts.len()));
            (vec![d1.to_vec(), d2.to_vec()], vec![g1.to_vec(), g2.to_vec()])
        })
    }

    proptest! {
        #[test]
        fn ap_matches_exhaustive((d, g) in arb_case(), t in prop::sample::select(vec![0.1, 0.3, 0.5, 0.7])) {
            for c in 0..2 {
                let a = average_precision(&d, &g, c, t);
                let b = oracle::average_precision_exhaustive(&d, &g, c, t);
                match (a, b) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                    (a, b) => prop_assert_eq!(a, b),
                }
            }
        }

        #[test]
        fn ap_invariant_to_monotone_rescale((d, g) in arb_case()) {
            let rescaled: Vec<Vec<Detection>> = d
                .iter()
                .map(|v| v.iter().map(|x| Detection { score: x.score.powi(3) * 0.5, ..*x }).collect())
                .collect();
            for c in 0..2 {
                prop_assert_eq!(average_precision(&d, &g, c, 0.5), average_precision(&rescaled, &g, c, 0.5));
            }
        }

        #[test]
        fn appended_match_never_decreases_ap((d, g) in arb_case()) {
            let base = map_grid(&d, &g, 2, &[0.5]).unwrap();
            for (v, gts) in g.iter().enumerate() {
                for a in gts {
                    let mut d2 = d.clone();
                    d2[v].push(det(a.segment.start, a.segment.end, a.class_id, 0.0));
                    let before = average_precision(&d, &g, a.class_id, 0.5).unwrap();
                    let after = average_precision(&d2, &g, a.class_id, 0.5).unwrap();
                    prop_assert!(after + 1e-12 >= before);
                }
            }
            prop_assert!(base.ap[0].iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn fn_rates_bounded_and_additive((d, g) in arb_case()) {
            let p = fn_profile(&d, &g, &[30.0, 30.0], &default_length_buckets(), &default_coverage_buckets(), 0.5).unwrap();
            prop_assert!(p.length.iter().all(|b| (0.0..=1.0).contains(&b.rate)));
            prop_assert_eq!(p.length.iter().map(|b| b.false_negatives).sum::<usize>(), p.false_negatives);
            prop_assert_eq!(p.length.iter().map(|b| b.instances).sum::<usize>(), p.instances);
        }
    }
}
