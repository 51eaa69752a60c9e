//! Deliberately naive reference implementations used by the test suites
//! and `selftest` to cross-check the optimized code paths.

use crate::bfs::BackgroundRanges;
use crate::heads::Annotation;
use crate::inference::{detection_order, Detection};
use crate::numerics::Tensor;
use crate::segment::{tiou, Segment};

/// Direct quadruple loop over output position, output channel, tap and
/// input channel.
pub fn conv1d_naive(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: usize, padding: usize) -> Tensor {
    let (t, cin) = (x.rows(), x.cols());
    let (k, cout) = (w.shape()[0], w.shape()[2]);
    let tout = (t + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; tout * cout];
    for o in 0..tout {
        for co in 0..cout {
            let mut acc = bias.map_or(0.0, |b| b[co]);
            for kk in 0..k {
                let p = (o * stride + kk) as isize - padding as isize;
                if p < 0 || p >= t as isize {
                    continue;
                }
                for ci in 0..cin {
                    acc += x.data()[p as usize * cin + ci] * w.data()[(kk * cin + ci) * cout + co];
                }
            }
            out[o * cout + co] = acc;
        }
    }
    Tensor::new(vec![tout, cout], out).expect("shape matches")
}

pub fn max_pool_naive(x: &Tensor, window: usize, stride: usize) -> Tensor {
    let (t, c) = (x.rows(), x.cols());
    let tout = (t - window) / stride + 1;
    let mut out = Vec::with_capacity(tout * c);
    for o in 0..tout {
        for ch in 0..c {
            let m = (o * stride..o * stride + window)
                .map(|r| x.at(r, ch))
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(m);
        }
    }
    Tensor::new(vec![tout, c], out).expect("shape matches")
}

pub fn softmax_naive(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Double loop over locations and window rows; `T×2C` output with the
/// left maxima first. Empty windows yield zeros.
pub fn sample_background_naive(features: &Tensor, ranges: &[BackgroundRanges]) -> Tensor {
    let c = features.cols();
    let mut out = vec![0.0; ranges.len() * 2 * c];
    for (i, r) in ranges.iter().enumerate() {
        for (side, (a, b)) in [r.left, r.right].into_iter().enumerate() {
            for ch in 0..c {
                let mut best: Option<f64> = None;
                for row in a..b {
                    let v = features.at(row, ch);
                    best = Some(match best {
                        Some(m) if m >= v => m,
                        _ => v,
                    });
                }
                out[i * 2 * c + side * c + ch] = best.unwrap_or(0.0);
            }
        }
    }
    Tensor::new(vec![ranges.len(), 2 * c], out).expect("shape matches")
}

/// Quadratic Soft-NMS over a flat score array with "done" flags.
pub fn soft_nms_reference(detections: &[Detection], sigma: f64, final_threshold: f64) -> Vec<Detection> {
    let n = detections.len();
    let mut scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let mut done = vec![false; n];
    let mut classes: Vec<usize> = detections.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        loop {
            let mut pick: Option<usize> = None;
            for i in 0..n {
                if done[i] || detections[i].class_id != class {
                    continue;
                }
                if pick.is_none_or(|p| scores[i] > scores[p]) {
                    pick = Some(i);
                }
            }
            let Some(p) = pick else { break };
            done[p] = true;
            for j in 0..n {
                if !done[j] && detections[j].class_id == class {
                    let o = tiou(&detections[p].segment, &detections[j].segment);
                    scores[j] *= (-(o * o) / sigma).exp();
                }
            }
        }
    }
    let mut out: Vec<Detection> = detections
        .iter()
        .zip(&scores)
        .filter(|(_, s)| **s >= final_threshold)
        .map(|(d, s)| Detection { score: *s, ..*d })
        .collect();
    out.sort_by(detection_order);
    out
}

/// Precision/recall enumeration: every true positive at rank `k`
/// contributes `max_{j ≥ k} precision(j) / #GT`. Matching follows the
/// greedy rule, written out over explicit candidate lists.
pub fn average_precision_exhaustive(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    class_id: usize,
    threshold: f64,
) -> Option<f64> {
    let total_gt: usize = ground_truth
        .iter()
        .map(|g| g.iter().filter(|a| a.class_id == class_id).count())
        .sum();
    if total_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, Detection)> = Vec::new();
    for (v, dets) in detections.iter().enumerate() {
        for d in dets.iter().filter(|d| d.class_id == class_id) {
            ranked.push((v, *d));
        }
    }
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for (v, d) in &ranked {
        let mut candidates: Vec<(f64, f64, usize)> = Vec::new();
        for (gi, g) in ground_truth[*v].iter().enumerate() {
            if g.class_id != class_id || used[*v][gi] {
                continue;
            }
            let o = tiou(&d.segment, &g.segment);
            if o >= threshold {
                candidates.push((o, g.segment.start, gi));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)));
        match candidates.first() {
            Some(&(_, _, gi)) => {
                used[*v][gi] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|h| **h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / total_gt as f64;
        }
    }
    Some(ap)
}

/// `(is_false_negative, length)` for every ground-truth instance, by
/// checking every same-class detection of its video.
pub fn false_negatives_naive(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    threshold: f64,
) -> Vec<(bool, f64)> {
    let mut out = Vec::new();
    for (v, gts) in ground_truth.iter().enumerate() {
        for g in gts {
            let mut found = false;
            for d in &detections[v] {
                if d.class_id == g.class_id && tiou(&d.segment, &g.segment) >= threshold {
                    found = true;
                }
            }
            out.push((!found, g.segment.length()));
        }
    }
    out
}

/// Empirical index frequencies of `draws` over `len` bins.
pub fn frequencies(draws: &[usize], len: usize) -> Vec<f64> {
    let mut counts = vec![0usize; len];
    for &d in draws {
        counts[d] += 1;
    }
    counts.iter().map(|&c| c as f64 / draws.len() as f64).collect()
}

pub fn segment_within(s: &Segment, lo: f64, hi: f64) -> bool {
    s.start >= lo && s.end <= hi && s.start <= s.end
}
