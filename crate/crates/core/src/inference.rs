//! Turning refined head outputs into scored detections, and Gaussian
//! Soft-NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::config::ScaleMode;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};
use crate::segment::{tiou, Segment};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub segment: Segment,
    pub class_id: usize,
    pub score: f64,
}

/// Head outputs of one level, detached from the tape.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub level: usize,
    pub logits: Tensor,
    pub distances: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeParams {
    pub scale_mode: ScaleMode,
    /// Valid clip length on the level-1 axis; segments are clamped to it.
    pub clip_len: f64,
    pub seconds_per_unit: f64,
    pub score_threshold: f64,
    pub top_k: usize,
}

/// Score-descending order; ties by earlier start, then class id.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.segment.start.total_cmp(&b.segment.start))
        .then(a.class_id.cmp(&b.class_id))
}

/// Every (location, class) pair with `sigmoid(logit) ≥ threshold` becomes a
/// detection spanning `[c − Δs·S(l), c + Δe·S(l)]`, clamped to the clip;
/// degenerate spans are dropped and only the `top_k` best survive.
pub fn decode_detections(outputs: &[LevelOutput], params: &DecodeParams) -> Vec<Detection> {
    let mut dets = Vec::new();
    for out in outputs {
        let stride = (1usize << (out.level - 1)) as f64;
        let scale = params.scale_mode.factor(out.level);
        let classes = out.logits.cols();
        for i in 0..out.logits.rows() {
            let c = i as f64 * stride;
            let seg = Segment::new(
                c - out.distances.at(i, 0) * scale,
                c + out.distances.at(i, 1) * scale,
            )
            .clamp(0.0, params.clip_len);
            if !(seg.start < seg.end) {
                continue;
            }
            for k in 0..classes {
                let score = sigmoid(out.logits.at(i, k));
                if score >= params.score_threshold {
                    dets.push(Detection {
                        segment: seg.scaled(params.seconds_per_unit),
                        class_id: k,
                        score,
                    });
                }
            }
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(params.top_k);
    dets
}

/// Per-class Gaussian Soft-NMS: repeatedly keep the best remaining
/// detection and decay the others of its class by `exp(−tIoU²/σ)`.
/// Detections that end below `final_threshold` are dropped.
pub fn soft_nms(detections: &[Detection], sigma: f64, final_threshold: f64) -> Result<Vec<Detection>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("soft-NMS sigma must be positive, got {sigma}")));
    }
    let mut classes: Vec<usize> = detections.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept = Vec::with_capacity(detections.len());
    for class in classes {
        let mut pool: Vec<Detection> = detections.iter().filter(|d| d.class_id == class).copied().collect();
        while !pool.is_empty() {
            let mut best = 0;
            for (i, d) in pool.iter().enumerate().skip(1) {
                if d.score > pool[best].score {
                    best = i;
                }
            }
            let top = pool.remove(best);
            for d in &mut pool {
                let iou = tiou(&top.segment, &d.segment);
                d.score *= (-(iou * iou) / sigma).exp();
            }
            kept.push(top);
        }
    }
    kept.retain(|d| d.score >= final_threshold);
    kept.sort_by(detection_order);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(s: f64, e: f64, c: usize, score: f64) -> Detection {
        Detection {
            segment: Segment::new(s, e),
            class_id: c,
            score,
        }
    }

    fn params() -> DecodeParams {
        DecodeParams {
            scale_mode: ScaleMode::Double,
            clip_len: 16.0,
            seconds_per_unit: 1.0,
            score_threshold: 1e-3,
            top_k: 200,
        }
    }

    #[test]
    fn single_detection_unchanged() {
        let d = vec![det(1.0, 3.0, 0, 0.7)];
        assert_eq!(soft_nms(&d, 0.5, 1e-4).unwrap(), d);
    }

    #[test]
    fn identical_segments_decay() {
        let d = vec![det(1.0, 3.0, 0, 1.0), det(1.0, 3.0, 0, 0.9)];
        let out = soft_nms(&d, 0.5, 1e-4).unwrap();
        assert_eq!(out[0].score, 1.0);
        assert!((out[1].score - 0.9 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((out[1].score - 0.1218).abs() < 1e-4);
    }

    #[test]
    fn disjoint_and_cross_class_untouched() {
        let d = vec![det(0.0, 1.0, 0, 0.8), det(2.0, 3.0, 0, 0.6), det(0.0, 1.0, 1, 0.5)];
        let out = soft_nms(&d, 0.5, 1e-4).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn bad_sigma() {
        assert!(soft_nms(&[], 0.0, 1e-4).is_err());
    }

    fn level(logits: Vec<f64>, dist: Vec<f64>, t: usize, nc: usize) -> LevelOutput {
        LevelOutput {
            level: 1,
            logits: Tensor::new(vec![t, nc], logits).unwrap(),
            distances: Tensor::new(vec![t, 2], dist).unwrap(),
        }
    }

    #[test]
    fn decode_threshold_and_degenerate() {
        let out = level(vec![f64::NEG_INFINITY; 4], vec![1.0; 8], 4, 1);
        assert!(decode_detections(&[out], &params()).is_empty());
        let out = level(vec![3.0; 4], vec![0.0; 8], 4, 1);
        assert!(decode_detections(&[out], &params()).is_empty());
    }

    #[test]
    fn decode_sigmoid_zero_and_geometry() {
        // level 1: centre 0, S(1) = 2, distances 0.5/1.5 -> [-1, 3] -> [0, 3]
        let out = level(vec![0.0], vec![0.5, 1.5], 1, 1);
        let mut p = params();
        p.seconds_per_unit = 0.5;
        let d = decode_detections(&[out], &p);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].score, 0.5);
        assert_eq!(d[0].segment, Segment::new(0.0, 1.5));
    }

    #[test]
    fn decode_top_k() {
        let out = LevelOutput {
            level: 2,
            logits: Tensor::new(vec![4, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap(),
            distances: Tensor::full(&[4, 2], 0.5),
        };
        let mut p = params();
        p.top_k = 3;
        let d = decode_detections(&[out], &p);
        assert_eq!(d.len(), 3);
        assert_eq!(d[0].score, sigmoid(7.0));
        // level 2: centre 6, S(2) = 4, distances 0.5 → [4, 8]
        assert_eq!(d[0].segment, Segment::new(4.0, 8.0));
    }
}
