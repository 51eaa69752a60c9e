//! Feature pyramid, coarse anchor-free boundary regression and the
//! boundary-attentive start/end branches.

use crate::config::ScaleMode;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::{Bound, Conv, Init, Norm, ParamStore};
use crate::segment::Segment;

/// One pyramid level. `stride` is the number of level-1 snippets covered
/// by one location, `2^(level-1)`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidLevel {
    pub level: usize,
    pub stride: usize,
    pub features: Var,
}

impl PyramidLevel {
    pub fn len(&self, tape: &Tape) -> usize {
        tape.rows(self.features)
    }

    /// Position of location `i` on the level-1 time axis.
    pub fn center(&self, i: usize) -> f64 {
        (i * self.stride) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseProposal {
    pub level: usize,
    pub location: usize,
    pub start_dist: f64,
    pub end_dist: f64,
    pub segment: Segment,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundaryFeatures {
    pub start: Var,
    pub end: Var,
}

/// Tape handles for every backbone parameter.
pub struct BackboneParams {
    pub pyramid: Vec<Conv>,
    pub coarse_hidden: Conv,
    pub coarse_out: Conv,
    pub start_conv: Conv,
    pub start_norm: Norm,
    pub end_conv: Conv,
    pub end_norm: Norm,
}

impl BackboneParams {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        input_dim: usize,
        channels: usize,
        levels: usize,
        boundary_kernel: usize,
    ) {
        for l in 1..=levels {
            let cin = if l == 1 { input_dim } else { channels };
            Conv::register(store, init, &format!("pyramid.l{l}"), 3, cin, channels);
        }
        Conv::register(store, init, "coarse.hidden", 3, channels, channels);
        Conv::register(store, init, "coarse.out", 3, channels, 2);
        for branch in ["start", "end"] {
            Conv::register(store, init, &format!("boundary.{branch}.conv"), boundary_kernel, channels, channels);
            Norm::register(store, &format!("boundary.{branch}.norm"), channels);
        }
    }

    pub fn bind(tape: &Tape, bound: &Bound, levels: usize) -> Result<Self> {
        Ok(Self {
            pyramid: (1..=levels)
                .map(|l| Conv::bind(tape, bound, &format!("pyramid.l{l}")))
                .collect::<Result<_>>()?,
            coarse_hidden: Conv::bind(tape, bound, "coarse.hidden")?,
            coarse_out: Conv::bind(tape, bound, "coarse.out")?,
            start_conv: Conv::bind(tape, bound, "boundary.start.conv")?,
            start_norm: Norm::bind(bound, "boundary.start.norm")?,
            end_conv: Conv::bind(tape, bound, "boundary.end.conv")?,
            end_norm: Norm::bind(bound, "boundary.end.norm")?,
        })
    }
}

/// Required multiple of the input length for an `levels`-level pyramid.
pub fn length_multiple(levels: usize) -> usize {
    1 << (levels.max(1) - 1)
}

/// Level 1 is a stride-1 convolution of the input; every further level a
/// stride-2 convolution of the previous one, so `T_l = T_1 / 2^(l-1)`.
pub fn build_pyramid(tape: &mut Tape, features: Var, convs: &[Conv]) -> Result<Vec<PyramidLevel>> {
    let levels = convs.len();
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let t = tape.rows(features);
    let multiple = length_multiple(levels);
    if t == 0 || !t.is_multiple_of(multiple) {
        let padded = t.div_ceil(multiple).max(1) * multiple;
        return Err(Error::InvalidArgument(format!(
            "sequence length {t} is not divisible by {multiple} for {levels} levels; pad to {padded}"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut x = features;
    for (i, conv) in convs.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let y = conv.forward(tape, x, stride)?;
        x = tape.relu(y);
        out.push(PyramidLevel {
            level: i + 1,
            stride: 1 << i,
            features: x,
        });
    }
    Ok(out)
}

/// Maps predicted distances at location `i` of `level` to a segment on the
/// level-1 axis: centre `i·2^(l-1)`, extents scaled by `scale_mode`, then
/// clamped to `[0, clip_len]`.
pub fn decode_coarse(
    location: usize,
    start_dist: f64,
    end_dist: f64,
    level: usize,
    scale_mode: ScaleMode,
    clip_len: f64,
) -> Segment {
    let c = (location << (level - 1)) as f64;
    let s = scale_mode.factor(level);
    Segment::new(c - start_dist * s, c + end_dist * s).clamp(0.0, clip_len)
}

/// Runs the shared coarse regression head on one level. Returns the
/// `T_l×2` distance tensor and one decoded proposal per location.
pub fn coarse_predict(
    tape: &mut Tape,
    level: &PyramidLevel,
    params: &BackboneParams,
    scale_mode: ScaleMode,
    clip_len: f64,
) -> Result<(Var, Vec<CoarseProposal>)> {
    let h = params.coarse_hidden.forward(tape, level.features, 1)?;
    let h = tape.relu(h);
    let raw = params.coarse_out.forward(tape, h, 1)?;
    let dist = tape.softplus(raw);
    let values = tape.value(dist);
    let proposals = (0..tape.rows(dist))
        .map(|i| {
            let (ds, de) = (values[2 * i], values[2 * i + 1]);
            CoarseProposal {
                level: level.level,
                location: i,
                start_dist: ds,
                end_dist: de,
                segment: decode_coarse(i, ds, de, level.level, scale_mode, clip_len),
            }
        })
        .collect();
    Ok((dist, proposals))
}

/// Two independent conv → layer norm → ReLU branches over level 1.
pub fn boundary_features(
    tape: &mut Tape,
    level1: &PyramidLevel,
    params: &BackboneParams,
    eps: f64,
) -> Result<BoundaryFeatures> {
    let mut branch = |conv: &Conv, norm: &Norm| -> Result<Var> {
        let y = conv.forward(tape, level1.features, 1)?;
        let y = norm.forward(tape, y, eps)?;
        Ok(tape.relu(y))
    };
    let start = branch(&params.start_conv, &params.start_norm)?;
    let end = branch(&params.end_conv, &params.end_norm)?;
    Ok(BoundaryFeatures { start, end })
}

/// Max-pools both boundary maps down to level `level` (window and stride
/// `2^(level-1)`); level 1 passes through unchanged.
pub fn pool_boundary(tape: &mut Tape, boundary: &BoundaryFeatures, level: usize) -> Result<(Var, Var)> {
    if level == 0 {
        return Err(Error::InvalidArgument("levels are 1-based".into()));
    }
    if level == 1 {
        return Ok((boundary.start, boundary.end));
    }
    let w = 1 << (level - 1);
    Ok((
        tape.max_pool1d(boundary.start, w, w)?,
        tape.max_pool1d(boundary.end, w, w)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(input_dim: usize, channels: usize, levels: usize) -> (ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut rng, 0.02);
        BackboneParams::register(&mut store, &mut init, input_dim, channels, levels, 3);
        (store, rng)
    }

    fn random_input(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Tensor {
        Init::new(rng, 1.0).uniform(&[t, c], 1.0)
    }

    #[test]
    fn pyramid_dims_halve() {
        let (store, mut rng) = setup(4, 8, 5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = BackboneParams::bind(&tape, &bound, 5).unwrap();
        let x = tape.leaf(&random_input(&mut rng, 256, 4));
        let levels = build_pyramid(&mut tape, x, &p.pyramid).unwrap();
        let dims: Vec<usize> = levels.iter().map(|l| l.len(&tape)).collect();
        assert_eq!(dims, vec![256, 128, 64, 32, 16]);
        assert_eq!(levels[3].stride, 8);
    }

    #[test]
    fn single_level_pyramid() {
        let (store, mut rng) = setup(4, 8, 1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = BackboneParams::bind(&tape, &bound, 1).unwrap();
        let x = tape.leaf(&random_input(&mut rng, 64, 4));
        let levels = build_pyramid(&mut tape, x, &p.pyramid).unwrap();
        assert_eq!(levels.len(), 1);
        assert_eq!(levels[0].len(&tape), 64);
    }

    #[test]
    fn indivisible_length_rejected() {
        let (store, mut rng) = setup(4, 8, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = BackboneParams::bind(&tape, &bound, 3).unwrap();
        let x = tape.leaf(&random_input(&mut rng, 100, 4));
        assert!(build_pyramid(&mut tape, x, &p.pyramid).is_ok());
        let x = tape.leaf(&random_input(&mut rng, 102, 4));
        let err = build_pyramid(&mut tape, x, &p.pyramid).unwrap_err().to_string();
        assert!(err.contains("pad to 104"), "{err}");
    }

    #[test]
    fn decode_examples() {
        let s = decode_coarse(10, 2.0, 3.0, 1, ScaleMode::Double, 100.0);
        assert_eq!(s, Segment::new(6.0, 16.0));
        let s = decode_coarse(7, 0.0, 0.0, 1, ScaleMode::Double, 100.0);
        assert_eq!(s, Segment::new(7.0, 7.0));
        let s = decode_coarse(1, 100.0, 0.0, 1, ScaleMode::Double, 100.0);
        assert_eq!(s.start, 0.0);
        let s = decode_coarse(3, 1.0, 1.0, 3, ScaleMode::Stride, 100.0);
        assert_eq!(s, Segment::new(8.0, 16.0));
    }

    #[test]
    fn zeroed_coarse_head_emits_softplus_of_bias() {
        let (mut store, mut rng) = setup(4, 8, 2);
        for name in ["coarse.out.weight", "coarse.hidden.weight"] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        store.get_mut("coarse.out.bias").unwrap().data_mut().copy_from_slice(&[0.3, -1.2]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = BackboneParams::bind(&tape, &bound, 2).unwrap();
        let x = tape.leaf(&random_input(&mut rng, 16, 4));
        let levels = build_pyramid(&mut tape, x, &p.pyramid).unwrap();
        let (_, props) = coarse_predict(&mut tape, &levels[1], &p, ScaleMode::Double, 16.0).unwrap();
        assert_eq!(props.len(), 8);
        let (es, ee) = ((1.0 + 0.3f64.exp()).ln(), (1.0 + (-1.2f64).exp()).ln());
        for pr in &props {
            assert!((pr.start_dist - es).abs() < 1e-12);
            assert!((pr.end_dist - ee).abs() < 1e-12);
            assert!(pr.segment.start <= pr.segment.end);
        }
    }

    #[test]
    fn boundary_features_nonnegative_and_independent() {
        let (store, mut rng) = setup(4, 8, 2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = BackboneParams::bind(&tape, &bound, 2).unwrap();
        let x = tape.leaf(&random_input(&mut rng, 16, 4));
        let levels = build_pyramid(&mut tape, x, &p.pyramid).unwrap();
        let b = boundary_features(&mut tape, &levels[0], &p, 1e-5).unwrap();
        assert!(tape.value(b.start).iter().all(|v| *v >= 0.0));
        assert!(tape.value(b.end).iter().all(|v| *v >= 0.0));
        assert_ne!(tape.value(b.start), tape.value(b.end));
        assert_eq!(tape.shape(b.start), &[16, 8]);
    }

    #[test]
    fn zeroed_boundary_branch_is_zero() {
        let (mut store, mut rng) = setup(4, 8, 2);
        for branch in ["start", "end"] {
            store.get_mut(&format!("boundary.{branch}.conv.weight")).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = BackboneParams::bind(&tape, &bound, 2).unwrap();
        let x = tape.leaf(&random_input(&mut rng, 16, 4));
        let levels = build_pyramid(&mut tape, x, &p.pyramid).unwrap();
        let b = boundary_features(&mut tape, &levels[0], &p, 1e-5).unwrap();
        assert!(tape.value(b.start).iter().all(|v| *v == 0.0));
        assert!(tape.value(b.end).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pool_boundary_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let s = tape.leaf(&random_input(&mut rng, 8, 3));
        let e = tape.leaf(&random_input(&mut rng, 8, 3));
        let b = BoundaryFeatures { start: s, end: e };
        let (ps, _) = pool_boundary(&mut tape, &b, 1).unwrap();
        assert_eq!(ps, s);
        let (ps, pe) = pool_boundary(&mut tape, &b, 3).unwrap();
        assert_eq!(tape.shape(ps), &[2, 3]);
        let sv = tape.value(s).to_vec();
        for o in 0..2 {
            for c in 0..3 {
                let m = (0..4).map(|k| sv[(4 * o + k) * 3 + c]).fold(f64::MIN, f64::max);
                assert_eq!(tape.value(ps)[o * 3 + c], m);
            }
        }
        assert_eq!(tape.shape(pe), &[2, 3]);
    }
}
