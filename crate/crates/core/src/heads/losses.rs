//! GIoU, sigmoid focal and binary cross-entropy losses, as plain functions
//! and as fused tape ops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, CustomOp, Tape, Var};
use crate::segment::Segment;

/// Probabilities entering a log are clamped to `[P_MIN, 1 − P_MIN]`.
pub const P_MIN: f64 = 1e-7;

/// Generalized IoU of two 1-D intervals. Coincident degenerate intervals
/// (zero-length hull) give 1.
pub fn giou_1d(pred: &Segment, target: &Segment) -> f64 {
    let hull = pred.end.max(target.end) - pred.start.min(target.start);
    if hull <= 0.0 {
        return 1.0;
    }
    let inter = pred.intersection(target);
    let union = pred.length() + target.length() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

/// `1 − GIoU` between `[−ps, pe]` and `[−ts, te]` plus its partial
/// derivatives w.r.t. `ps` and `pe`.
fn giou_loss_dist(ps: f64, pe: f64, ts: f64, te: f64) -> (f64, f64, f64) {
    let inter = ps.min(ts) + pe.min(te);
    let union = ps + pe + ts + te - inter;
    let hull = ps.max(ts) + pe.max(te);
    if union <= 0.0 || hull <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let loss = 1.0 - inter / union + (hull - union) / hull;
    let grad = |p: f64, t: f64| {
        let di = if p < t { 1.0 } else { 0.0 };
        let du = 1.0 - di;
        let dh = if p >= t { 1.0 } else { 0.0 };
        let diou = (di * union - inter * du) / (union * union);
        let dratio = (du * hull - union * dh) / (hull * hull);
        -diou - dratio
    };
    (loss, grad(ps, ts), grad(pe, te))
}

struct GiouOp {
    targets: Vec<[f64; 2]>,
}

impl CustomOp for GiouOp {
    fn backward(&self, inputs: &[&[f64]], grad_out: &[f64], grad_inputs: &mut [Vec<f64>]) {
        let n = self.targets.len() as f64;
        for (i, t) in self.targets.iter().enumerate() {
            let (_, gs, ge) = giou_loss_dist(inputs[0][2 * i], inputs[0][2 * i + 1], t[0], t[1]);
            grad_inputs[0][2 * i] += grad_out[0] * gs / n;
            grad_inputs[0][2 * i + 1] += grad_out[0] * ge / n;
        }
    }
}

/// Mean `1 − GIoU` between predicted `P×2` distances and fixed targets,
/// both measured outward from a shared centre. `P = 0` yields 0.
pub fn giou_loss(tape: &mut Tape, pred: Var, targets: &[[f64; 2]]) -> Result<Var> {
    if tape.rows(pred) != targets.len() || (tape.cols(pred) != 2 && !targets.is_empty()) {
        return Err(Error::shape(
            "giou_loss",
            format!("{:?} predictions for {} targets", tape.shape(pred), targets.len()),
        ));
    }
    if targets.is_empty() {
        return tape.constant(&[1], vec![0.0]);
    }
    let p = tape.value(pred);
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, t)| giou_loss_dist(p[2 * i], p[2 * i + 1], t[0], t[1]).0)
        .sum();
    let value = total / targets.len() as f64;
    tape.custom(
        &[pred],
        vec![1],
        vec![value],
        Box::new(GiouOp {
            targets: targets.to_vec(),
        }),
    )
}

fn focal_term(x: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let clamped = p.clamp(P_MIN, 1.0 - P_MIN);
    let live = clamped == p;
    if y > 0.5 {
        let loss = -alpha * (1.0 - clamped).powf(gamma) * clamped.ln();
        let grad = if live {
            alpha * (1.0 - p).powf(gamma) * (gamma * p * p.ln() - (1.0 - p))
        } else {
            0.0
        };
        (loss, grad)
    } else {
        let loss = -(1.0 - alpha) * clamped.powf(gamma) * (1.0 - clamped).ln();
        let grad = if live {
            (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * (1.0 - p).ln())
        } else {
            0.0
        };
        (loss, grad)
    }
}

/// Sigmoid focal loss summed over all entries and divided by `normalizer`.
pub fn focal_loss_value(logits: &[f64], targets: &[f64], alpha: f64, gamma: f64, normalizer: f64) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| focal_term(x, y, alpha, gamma).0)
        .sum::<f64>()
        / normalizer
}

struct FocalOp {
    targets: Vec<f64>,
    alpha: f64,
    gamma: f64,
    normalizer: f64,
}

impl CustomOp for FocalOp {
    fn backward(&self, inputs: &[&[f64]], grad_out: &[f64], grad_inputs: &mut [Vec<f64>]) {
        for (i, (&x, &y)) in inputs[0].iter().zip(&self.targets).enumerate() {
            grad_inputs[0][i] += grad_out[0] * focal_term(x, y, self.alpha, self.gamma).1 / self.normalizer;
        }
    }
}

/// Focal loss on a logit tensor against same-shaped 0/1 targets.
pub fn focal_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[f64],
    alpha: f64,
    gamma: f64,
    normalizer: f64,
) -> Result<Var> {
    if tape.value(logits).len() != targets.len() {
        return Err(Error::shape("focal_loss", "targets must match logits"));
    }
    if normalizer <= 0.0 {
        return Err(Error::InvalidArgument("focal normalizer must be positive".into()));
    }
    let value = focal_loss_value(tape.value(logits), targets, alpha, gamma, normalizer);
    tape.custom(
        &[logits],
        vec![1],
        vec![value],
        Box::new(FocalOp {
            targets: targets.to_vec(),
            alpha,
            gamma,
            normalizer,
        }),
    )
}

/// Mean binary cross-entropy of probabilities against 0/1 labels.
pub fn bce(probs: &[f64], targets: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(P_MIN, 1.0 - P_MIN);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / probs.len() as f64
}

struct BceLogitsOp {
    targets: Vec<f64>,
}

impl CustomOp for BceLogitsOp {
    fn backward(&self, inputs: &[&[f64]], grad_out: &[f64], grad_inputs: &mut [Vec<f64>]) {
        let n = self.targets.len() as f64;
        for (i, (&z, &y)) in inputs[0].iter().zip(&self.targets).enumerate() {
            let p = sigmoid(z);
            if p.clamp(P_MIN, 1.0 - P_MIN) == p {
                grad_inputs[0][i] += grad_out[0] * (p - y) / n;
            }
        }
    }
}

/// Mean BCE of `sigmoid(logits)` against labels, with clamping.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    if tape.value(logits).len() != targets.len() {
        return Err(Error::shape("bce_with_logits", "targets must match logits"));
    }
    if targets.is_empty() {
        return tape.constant(&[1], vec![0.0]);
    }
    let probs: Vec<f64> = tape.value(logits).iter().map(|&z| sigmoid(z)).collect();
    let value = bce(&probs, targets);
    tape.custom(
        &[logits],
        vec![1],
        vec![value],
        Box::new(BceLogitsOp {
            targets: targets.to_vec(),
        }),
    )
}

/// The five loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub coarse: f64,
    pub refine: f64,
    pub cls: f64,
    pub start: f64,
    pub end: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// `λ·(refine + coarse) + cls + start + end`, in the same operation
    /// order the tape uses.
    pub fn recompose(&self) -> f64 {
        self.lambda * (self.refine + self.coarse) + self.cls + self.start + self.end
    }

    pub fn add_assign(&mut self, other: &LossBreakdown) {
        self.coarse += other.coarse;
        self.refine += other.refine;
        self.cls += other.cls;
        self.start += other.start;
        self.end += other.end;
        self.total += other.total;
        self.lambda = other.lambda;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            coarse: self.coarse * k,
            refine: self.refine * k,
            cls: self.cls * k,
            start: self.start * k,
            end: self.end * k,
            total: self.total * k,
            lambda: self.lambda,
        }
    }
}

/// Individual loss terms already on the tape.
pub struct LossTerms {
    pub coarse: Var,
    pub refine: Var,
    pub cls: Var,
    pub start: Var,
    pub end: Var,
}

/// Combines the terms as `λ·(refine + coarse) + cls + start + end`.
pub fn combine_losses(tape: &mut Tape, terms: &LossTerms, lambda: f64) -> Result<(Var, LossBreakdown)> {
    let reg = tape.add(terms.refine, terms.coarse)?;
    let reg = tape.scale(reg, lambda);
    let total = tape.add(reg, terms.cls)?;
    let total = tape.add(total, terms.start)?;
    let total = tape.add(total, terms.end)?;
    let breakdown = LossBreakdown {
        coarse: tape.scalar(terms.coarse),
        refine: tape.scalar(terms.refine),
        cls: tape.scalar(terms.cls),
        start: tape.scalar(terms.start),
        end: tape.scalar(terms.end),
        total: tape.scalar(total),
        lambda,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor};
    use proptest::prelude::*;

    fn seg(a: f64, b: f64) -> Segment {
        Segment::new(a, b)
    }

    #[test]
    fn giou_examples() {
        assert_eq!(giou_1d(&seg(1.0, 3.0), &seg(1.0, 3.0)), 1.0);
        assert!((giou_1d(&seg(0.0, 2.0), &seg(4.0, 6.0)) + 1.0 / 3.0).abs() < 1e-15);
        assert!((giou_1d(&seg(2.0, 4.0), &seg(0.0, 8.0)) - 0.25).abs() < 1e-15);
        assert_eq!(giou_1d(&seg(2.0, 2.0), &seg(2.0, 2.0)), 1.0);
    }

    proptest! {
        #[test]
        fn giou_properties(a in 0.0f64..10.0, la in 0.01f64..5.0, b in 0.0f64..10.0, lb in 0.01f64..5.0) {
            let (x, y) = (seg(a, a + la), seg(b, b + lb));
            let g = giou_1d(&x, &y);
            prop_assert!((g - giou_1d(&y, &x)).abs() < 1e-12);
            prop_assert!(g <= crate::segment::tiou(&x, &y) + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0);
            let hull = seg(a.min(b), (a + la).max(b + lb));
            let inner = seg(hull.start + 0.1 * hull.length(), hull.end - 0.2 * hull.length());
            prop_assert!((giou_1d(&inner, &hull) - crate::segment::tiou(&inner, &hull)).abs() < 1e-12);
        }

        #[test]
        fn distance_form_matches_segments(ps in 0.0f64..5.0, pe in 0.0f64..5.0, ts in 0.01f64..5.0, te in 0.01f64..5.0) {
            let (l, _, _) = giou_loss_dist(ps, pe, ts, te);
            let g = giou_1d(&seg(-ps, pe), &seg(-ts, te));
            prop_assert!((l - (1.0 - g)).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_half_probability_positive() {
        let v = focal_loss_value(&[0.0], &[1.0], 0.25, 2.0, 1.0);
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.0433).abs() < 1e-4);
    }

    #[test]
    fn focal_saturates_to_zero() {
        let v = focal_loss_value(&[40.0, -40.0], &[1.0, 0.0], 0.25, 2.0, 1.0);
        assert!(v < 1e-20);
    }

    #[test]
    fn focal_gamma_zero_is_half_bce() {
        let logits = [0.3, -1.7, 2.2, 0.0];
        let targets = [1.0, 0.0, 0.0, 1.0];
        let focal = focal_loss_value(&logits, &targets, 0.5, 0.0, 1.0);
        let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
        let b = bce(&probs, &targets) * targets.len() as f64;
        assert!((focal - 0.5 * b).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        assert!((bce(&[0.5; 7], &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(&[1.0, 0.0], &[1.0, 0.0]) < 1e-6);
        // single location, hand evaluation
        assert!((bce(&[0.8], &[1.0]) - (-(0.8f64).ln())).abs() < 1e-10);
        assert!((bce(&[0.8], &[0.0]) - (-(0.2f64).ln())).abs() < 1e-10);
    }

    #[test]
    fn loss_ops_pass_grad_check() {
        let targets = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let point = Tensor::new(vec![3, 2], vec![0.3, -0.8, 1.5, -0.2, 0.05, 2.0]).unwrap();
        let e = grad_check(|t, x| focal_loss(t, x, &targets, 0.25, 2.0, 2.0), &point, 1e-5).unwrap();
        assert!(e < 1e-6, "focal {e}");
        let e = grad_check(|t, x| bce_with_logits(t, x, &targets), &point, 1e-5).unwrap();
        assert!(e < 1e-6, "bce {e}");
        let dist = Tensor::new(vec![3, 2], vec![0.7, 1.9, 2.5, 0.4, 1.1, 1.3]).unwrap();
        let tg = [[1.0, 1.0], [2.0, 0.5], [0.6, 3.0]];
        let e = grad_check(|t, x| giou_loss(t, x, &tg), &dist, 1e-5).unwrap();
        assert!(e < 1e-6, "giou {e}");
    }

    #[test]
    fn recomposition_and_lambda_zero() {
        let mut tape = Tape::new();
        let mk = |t: &mut Tape, v: f64| t.constant(&[1], vec![v]).unwrap();
        let terms = LossTerms {
            coarse: mk(&mut tape, 0.71),
            refine: mk(&mut tape, 0.33),
            cls: mk(&mut tape, 1.25),
            start: mk(&mut tape, 0.6),
            end: mk(&mut tape, 0.45),
        };
        let (_, b) = combine_losses(&mut tape, &terms, 0.0).unwrap();
        assert_eq!(b.total, b.cls + b.start + b.end);
        let (_, b) = combine_losses(&mut tape, &terms, 1.7).unwrap();
        assert_eq!(b.total, b.recompose());
    }
}
