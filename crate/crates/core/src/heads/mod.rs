//! Refinement heads, target assignment and the training objective.

pub mod losses;
pub mod targets;

pub use losses::{
    bce, bce_with_logits, combine_losses, focal_loss, focal_loss_value, giou_1d, giou_loss, LossBreakdown,
    LossTerms,
};
pub use targets::{assign_targets, Annotation, LocationTargets, SampleTargets};

use crate::backbone::BoundaryFeatures;
use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, Conv, Init, Norm, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct LevelPredictions {
    pub level: usize,
    /// `T_l×N_c` pre-sigmoid class scores.
    pub logits: Var,
    /// `T_l×2` nonnegative refined distances, already scaled by ω.
    pub distances: Var,
}

#[derive(Clone, Copy, Debug)]
struct Branch {
    stem: Conv,
    norm: Norm,
    out: Conv,
}

/// Classifier and regressor shared across all levels, plus the scalar
/// affine rescale applied to the boundary maps before their sigmoid.
pub struct HeadParams {
    cls: Branch,
    reg: Branch,
    pub start_scale: Var,
    pub start_shift: Var,
    pub end_scale: Var,
    pub end_shift: Var,
}

impl HeadParams {
    pub fn register(store: &mut ParamStore, init: &mut Init, channels: usize, num_classes: usize) {
        for (name, out) in [("head.cls", num_classes), ("head.reg", 2)] {
            Conv::register(store, init, &format!("{name}.stem"), 3, channels, channels);
            Norm::register(store, &format!("{name}.norm"), channels);
            Conv::register(store, init, &format!("{name}.out"), 3, channels, out);
        }
        for branch in ["start", "end"] {
            store.insert(format!("boundary.{branch}.rescale.scale"), Tensor::scalar(1.0));
            store.insert(format!("boundary.{branch}.rescale.shift"), Tensor::scalar(0.0));
        }
    }

    pub fn bind(tape: &Tape, bound: &Bound) -> Result<Self> {
        let branch = |name: &str| -> Result<Branch> {
            Ok(Branch {
                stem: Conv::bind(tape, bound, &format!("{name}.stem"))?,
                norm: Norm::bind(bound, &format!("{name}.norm"))?,
                out: Conv::bind(tape, bound, &format!("{name}.out"))?,
            })
        };
        Ok(Self {
            cls: branch("head.cls")?,
            reg: branch("head.reg")?,
            start_scale: bound.get("boundary.start.rescale.scale")?,
            start_shift: bound.get("boundary.start.rescale.shift")?,
            end_scale: bound.get("boundary.end.rescale.scale")?,
            end_shift: bound.get("boundary.end.rescale.shift")?,
        })
    }
}

fn run_branch(tape: &mut Tape, z: Var, b: &Branch, eps: f64) -> Result<Var> {
    let x = b.stem.forward(tape, z, 1)?;
    let x = b.norm.forward(tape, x, eps)?;
    let x = tape.relu(x);
    b.out.forward(tape, x, 1)
}

/// Classifier logits and ω-scaled refined distances for one level.
pub fn refine_heads(
    tape: &mut Tape,
    level: usize,
    encoded: Var,
    params: &HeadParams,
    omega: f64,
    eps: f64,
) -> Result<LevelPredictions> {
    let logits = run_branch(tape, encoded, &params.cls, eps)?;
    let raw = run_branch(tape, encoded, &params.reg, eps)?;
    let dist = tape.softplus(raw);
    let distances = tape.scale(dist, omega);
    Ok(LevelPredictions {
        level,
        logits,
        distances,
    })
}

/// Per-location boundary logits: the channelwise mean of each boundary map
/// passed through the learned scalar rescale. Their sigmoid is the
/// start/end probability.
pub fn boundary_logits(tape: &mut Tape, boundary: &BoundaryFeatures, params: &HeadParams) -> Result<(Var, Var)> {
    let ms = tape.row_mean(boundary.start);
    let me = tape.row_mean(boundary.end);
    Ok((
        tape.affine_scalar(ms, params.start_scale, params.start_shift)?,
        tape.affine_scalar(me, params.end_scale, params.end_shift)?,
    ))
}

/// `(L_start, L_end)` from boundary logits and the window labels.
pub fn boundary_bce(tape: &mut Tape, start_logits: Var, end_logits: Var, targets: &SampleTargets) -> Result<(Var, Var)> {
    Ok((
        bce_with_logits(tape, start_logits, &targets.start)?,
        bce_with_logits(tape, end_logits, &targets.end)?,
    ))
}

/// Focal-loss settings and loss weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
}

/// Assembles the full objective from per-level coarse distances, refined
/// predictions and boundary logits.
pub fn total_loss(
    tape: &mut Tape,
    coarse_distances: &[Var],
    predictions: &[LevelPredictions],
    boundary: (Var, Var),
    targets: &SampleTargets,
    num_classes: usize,
    settings: LossSettings,
) -> Result<(Var, LossBreakdown)> {
    let mut coarse_rows = Vec::new();
    let mut refine_rows = Vec::new();
    let mut reg_targets = Vec::new();
    let mut cls_targets = Vec::new();
    let mut logit_parts = Vec::new();
    for ((t, &coarse), pred) in targets.levels.iter().zip(coarse_distances).zip(predictions) {
        let positives: Vec<usize> = (0..t.positive.len()).filter(|&i| t.positive[i]).collect();
        if !positives.is_empty() {
            coarse_rows.push(tape.gather_rows(coarse, &positives)?);
            refine_rows.push(tape.gather_rows(pred.distances, &positives)?);
            reg_targets.extend(positives.iter().map(|&i| t.distances[i]));
        }
        for cid in &t.class_id {
            cls_targets.extend((0..num_classes).map(|c| if *cid == Some(c) { 1.0 } else { 0.0 }));
        }
        logit_parts.push(pred.logits);
    }
    let num_pos = reg_targets.len();
    let (coarse, refine) = if num_pos == 0 {
        let zero = tape.constant(&[1], vec![0.0])?;
        (zero, zero)
    } else {
        let c = tape.concat_rows(&coarse_rows)?;
        let r = tape.concat_rows(&refine_rows)?;
        (giou_loss(tape, c, &reg_targets)?, giou_loss(tape, r, &reg_targets)?)
    };
    let logits = tape.concat_rows(&logit_parts)?;
    let cls = focal_loss(
        tape,
        logits,
        &cls_targets,
        settings.alpha,
        settings.gamma,
        num_pos.max(1) as f64,
    )?;
    let (start, end) = boundary_bce(tape, boundary.0, boundary.1, targets)?;
    let terms = LossTerms {
        coarse,
        refine,
        cls,
        start,
        end,
    };
    combine_losses(tape, &terms, settings.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heads(channels: usize, classes: usize) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        HeadParams::register(&mut store, &mut Init::new(&mut rng, 0.02), channels, classes);
        store
    }

    #[test]
    fn head_shapes_and_zero_omega() {
        let store = heads(8, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = HeadParams::bind(&tape, &bound).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = tape.leaf(&Init::new(&mut rng, 1.0).uniform(&[16, 8], 1.0));
        let pred = refine_heads(&mut tape, 1, z, &p, 8.0, 1e-5).unwrap();
        assert_eq!(tape.shape(pred.logits), &[16, 3]);
        assert_eq!(tape.shape(pred.distances), &[16, 2]);
        assert!(tape.value(pred.distances).iter().all(|d| *d >= 0.0));
        let pred = refine_heads(&mut tape, 1, z, &p, 0.0, 1e-5).unwrap();
        assert!(tape.value(pred.distances).iter().all(|d| *d == 0.0));
    }

    #[test]
    fn zeroed_classifier_emits_bias() {
        let mut store = heads(8, 3);
        store.get_mut("head.cls.out.weight").unwrap().data_mut().fill(0.0);
        store.get_mut("head.cls.out.bias").unwrap().data_mut().copy_from_slice(&[0.5, -0.25, 1.0]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = HeadParams::bind(&tape, &bound).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = tape.leaf(&Init::new(&mut rng, 1.0).uniform(&[5, 8], 1.0));
        let pred = refine_heads(&mut tape, 1, z, &p, 8.0, 1e-5).unwrap();
        for r in 0..5 {
            assert_eq!(&tape.value(pred.logits)[r * 3..r * 3 + 3], &[0.5, -0.25, 1.0]);
        }
    }
}
