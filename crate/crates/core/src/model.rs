//! The full detector: pyramid, coarse head, boundary branches, background
//! sampling, encoders and refinement heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    boundary_features, build_pyramid, coarse_predict, length_multiple, pool_boundary, BackboneParams, CoarseProposal,
    PyramidLevel,
};
use crate::bfs::{proposal_ranges, refine_features, sample_with_ranges, BackgroundRanges, CombinedFeature};
use crate::config::{EncoderType, InferenceConfig, ModelConfig};
use crate::data::{pad_to_divisible, Checkpoint};
use crate::error::{Error, Result};
use crate::heads::{
    assign_targets, boundary_logits, refine_heads, total_loss, Annotation, HeadParams, LevelPredictions,
    LossBreakdown, LossSettings, SampleTargets,
};
use crate::inference::{decode_detections, soft_nms, DecodeParams, Detection, LevelOutput};
use crate::numerics::{max_relative_error, Tape, Tensor, Var};
use crate::params::{Bound, Conv, Init, ParamStore};
use crate::transformer::{encode_cnn, encode_pyramid, encode_vanilla, EncodedLevel, EncoderParams, Sampling};

/// Discrete choices made during a forward pass. Replaying them makes the
/// loss a smooth function of the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decisions {
    /// Background windows per level; empty when background sampling is off.
    pub ranges: Vec<Vec<BackgroundRanges>>,
    /// Context indices per level (level 1 empty); empty for non-hierarchical encoders.
    pub sampled: Vec<Vec<usize>>,
}

pub struct ForwardOutput {
    pub bound: Bound,
    pub levels: Vec<PyramidLevel>,
    pub coarse_distances: Vec<Var>,
    pub proposals: Vec<Vec<CoarseProposal>>,
    pub combined: Vec<CombinedFeature>,
    pub encoded: Vec<EncodedLevel>,
    pub predictions: Vec<LevelPredictions>,
    pub boundary_logits: (Var, Var),
    pub decisions: Decisions,
}

/// How context tokens are drawn.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
    Replay(&'a Decisions),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Htnet {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub params: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub scalars: usize,
}

impl Htnet {
    pub fn new(config: &ModelConfig, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument("input_dim and num_classes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng, config.init_std);
        let mut store = ParamStore::new();
        let c = config.channels;
        BackboneParams::register(&mut store, &mut init, input_dim, c, config.levels, config.boundary_kernel);
        for l in 1..=config.levels {
            let name = format!("bfs.l{l}.reduce");
            Conv::register(&mut store, &mut init, &name, 3, 3 * c, c);
            // background inputs start switched off
            let w = store.get_mut(&format!("{name}.weight")).expect("just registered");
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                if (i / c) % (3 * c) >= c {
                    *v = 0.0;
                }
            }
        }
        match config.encoder_type {
            EncoderType::Hierarchical => {
                for l in 1..=config.levels {
                    EncoderParams::register(
                        &mut store,
                        &mut init,
                        &format!("encoder.l{l}"),
                        c,
                        config.ffn_mult,
                        config.encoder_depth,
                        l > 1,
                    );
                }
            }
            EncoderType::Vanilla => {
                EncoderParams::register(&mut store, &mut init, "encoder.shared", c, config.ffn_mult, config.encoder_depth, false);
            }
            EncoderType::Cnn => {
                for l in 1..=config.levels {
                    Conv::register(&mut store, &mut init, &format!("encoder.cnn.l{l}.conv1"), 3, c, c);
                    Conv::register(&mut store, &mut init, &format!("encoder.cnn.l{l}.conv2"), 3, c, c);
                }
            }
        }
        HeadParams::register(&mut store, &mut init, c, num_classes);
        Ok(Self {
            config: config.clone(),
            input_dim,
            num_classes,
            params: store,
        })
    }

    /// Rebuilds a model from a checkpoint, checking every parameter's name
    /// and shape against the checkpoint's configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(&ckpt.config.model, ckpt.input_dim, ckpt.classes.len(), 0)?;
        if model.params.len() != ckpt.params.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} tensors, configuration expects {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in ckpt.params.iter() {
            let expected = model
                .params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unexpected checkpoint tensor `{name}`")))?;
            if expected.shape() != t.shape() {
                return Err(Error::InvalidArgument(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
        }
        model.params = ckpt.params.clone();
        Ok(model)
    }

    pub fn pad(&self, features: &Tensor) -> Result<(Tensor, usize)> {
        if features.shape().len() != 2 || features.cols() != self.input_dim {
            return Err(Error::shape(
                "model input",
                format!("expected T×{}, got {:?}", self.input_dim, features.shape()),
            ));
        }
        Ok(pad_to_divisible(features, self.config.levels))
    }

    /// Forward pass over already padded features. `clip_len` is the valid
    /// (unpadded) length.
    pub fn forward(&self, tape: &mut Tape, features: &Tensor, clip_len: f64, mode: Mode) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if !features.rows().is_multiple_of(length_multiple(cfg.levels)) {
            return Err(Error::InvalidArgument(format!(
                "length {} is not a multiple of {}; pad the input first",
                features.rows(),
                length_multiple(cfg.levels)
            )));
        }
        let bound = self.params.bind(tape);
        let x = tape.constant(features.shape(), features.data().to_vec())?;
        let bb = BackboneParams::bind(tape, &bound, cfg.levels)?;
        let levels = build_pyramid(tape, x, &bb.pyramid)?;
        let boundary = boundary_features(tape, &levels[0], &bb, cfg.ln_eps)?;
        let replay = match &mode {
            Mode::Replay(d) => Some(*d),
            _ => None,
        };
        let mut coarse_distances = Vec::with_capacity(cfg.levels);
        let mut proposals = Vec::with_capacity(cfg.levels);
        let mut combined = Vec::with_capacity(cfg.levels);
        let mut ranges_all = Vec::new();
        for (li, lvl) in levels.iter().enumerate() {
            let (dist, props) = coarse_predict(tape, lvl, &bb, cfg.scale_mode, clip_len)?;
            let (ps, pe) = pool_boundary(tape, &boundary, lvl.level)?;
            let len = lvl.len(tape);
            let bg = if cfg.bfs_enabled {
                let ranges = match replay {
                    Some(d) => d
                        .ranges
                        .get(li)
                        .cloned()
                        .ok_or_else(|| Error::InvalidArgument(format!("no recorded ranges for level {}", li + 1)))?,
                    None => proposal_ranges(lvl, len, &props, cfg.delta)?,
                };
                let bg = sample_with_ranges(tape, lvl.features, &ranges)?;
                ranges_all.push(ranges);
                bg
            } else {
                tape.constant(&[len, 2 * cfg.channels], vec![0.0; len * 2 * cfg.channels])?
            };
            let reduce = Conv::bind(tape, &bound, &format!("bfs.l{}.reduce", lvl.level))?;
            combined.push(refine_features(tape, lvl, ps, pe, bg, &reduce)?);
            coarse_distances.push(dist);
            proposals.push(props);
        }
        let (encoded, sampled) = match cfg.encoder_type {
            EncoderType::Hierarchical => {
                let encoders = (1..=cfg.levels)
                    .map(|l| {
                        EncoderParams::bind(&bound, &format!("encoder.l{l}"), cfg.encoder_depth, cfg.heads, l > 1)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sampling = match mode {
                    Mode::Eval => Sampling::Stratified,
                    Mode::Train(rng) => Sampling::Random(rng),
                    Mode::Replay(d) => Sampling::Fixed(&d.sampled),
                };
                encode_pyramid(tape, &combined, &encoders, sampling, cfg.context_source, cfg.ln_eps)?
            }
            EncoderType::Vanilla => {
                let enc = EncoderParams::bind(&bound, "encoder.shared", cfg.encoder_depth, cfg.heads, false)?;
                (encode_vanilla(tape, &combined, &enc, cfg.ln_eps)?, Vec::new())
            }
            EncoderType::Cnn => {
                let convs = (1..=cfg.levels)
                    .map(|l| {
                        Ok((
                            Conv::bind(tape, &bound, &format!("encoder.cnn.l{l}.conv1"))?,
                            Conv::bind(tape, &bound, &format!("encoder.cnn.l{l}.conv2"))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (encode_cnn(tape, &combined, &convs)?, Vec::new())
            }
        };
        let heads = HeadParams::bind(tape, &bound)?;
        let predictions = encoded
            .iter()
            .map(|e| refine_heads(tape, e.level, e.z, &heads, cfg.omega, cfg.ln_eps))
            .collect::<Result<Vec<_>>>()?;
        let boundary_logits = boundary_logits(tape, &boundary, &heads)?;
        Ok(ForwardOutput {
            bound,
            levels,
            coarse_distances,
            proposals,
            combined,
            encoded,
            predictions,
            boundary_logits,
            decisions: Decisions {
                ranges: ranges_all,
                sampled,
            },
        })
    }

    /// Targets for a padded sequence of `padded_len` snippets whose first
    /// `clip_len` are valid. Annotations are in snippet units.
    pub fn targets(&self, padded_len: usize, clip_len: usize, annotations: &[Annotation]) -> Result<SampleTargets> {
        let lens: Vec<usize> = (0..self.config.levels).map(|l| padded_len >> l).collect();
        assign_targets(&lens, annotations, clip_len as f64, self.config.scale_mode, self.config.tau)
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            lambda: self.config.lambda,
            alpha: self.config.focal_alpha,
            gamma: self.config.focal_gamma,
        }
    }

    pub fn loss(&self, tape: &mut Tape, out: &ForwardOutput, targets: &SampleTargets) -> Result<(Var, LossBreakdown)> {
        total_loss(
            tape,
            &out.coarse_distances,
            &out.predictions,
            out.boundary_logits,
            targets,
            self.num_classes,
            self.loss_settings(),
        )
    }

    /// Forward, loss and backward for one clip; parameter gradients are
    /// accumulated with weight `weight`. Fails on a non-finite loss before
    /// touching any gradient.
    pub fn accumulate_gradients(
        &mut self,
        sample_id: &str,
        features: &Tensor,
        annotations: &[Annotation],
        rng: &mut ChaCha8Rng,
        weight: f64,
    ) -> Result<LossBreakdown> {
        let (padded, clip) = self.pad(features)?;
        let targets = self.targets(padded.rows(), clip, annotations)?;
        let mut tape = Tape::new();
        let non_finite = |e: Error| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss {
                sample: sample_id.to_string(),
            },
            other => other,
        };
        let out = self
            .forward(&mut tape, &padded, clip as f64, Mode::Train(rng))
            .map_err(non_finite)?;
        let (loss, breakdown) = self.loss(&mut tape, &out, &targets).map_err(non_finite)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                sample: sample_id.to_string(),
            });
        }
        let scaled = tape.scale(loss, weight);
        tape.backward(scaled)?;
        self.params.accumulate_grads(&tape, &out.bound)?;
        Ok(breakdown)
    }

    /// Loss terms for one clip under deterministic context sampling.
    pub fn eval_loss(&self, features: &Tensor, annotations: &[Annotation]) -> Result<LossBreakdown> {
        let (padded, clip) = self.pad(features)?;
        let targets = self.targets(padded.rows(), clip, annotations)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &padded, clip as f64, Mode::Eval)?;
        Ok(self.loss(&mut tape, &out, &targets)?.1)
    }

    /// Per-level head outputs under deterministic context sampling, and
    /// the valid clip length.
    pub fn predict_levels(&self, features: &Tensor) -> Result<(Vec<LevelOutput>, usize)> {
        let (padded, clip) = self.pad(features)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &padded, clip as f64, Mode::Eval)?;
        let levels = out
            .predictions
            .iter()
            .map(|p| LevelOutput {
                level: p.level,
                logits: tape.tensor(p.logits),
                distances: tape.tensor(p.distances),
            })
            .collect();
        Ok((levels, clip))
    }

    /// Decoded, Soft-NMS-suppressed detections in seconds.
    pub fn detect(&self, features: &Tensor, inference: &InferenceConfig, seconds_per_snippet: f64) -> Result<Vec<Detection>> {
        let (levels, clip) = self.predict_levels(features)?;
        for l in &levels {
            if !(l.logits.is_finite() && l.distances.is_finite()) {
                return Err(Error::NonFinite(format!("predictions at level {}", l.level)));
            }
        }
        let dets = decode_detections(
            &levels,
            &DecodeParams {
                scale_mode: self.config.scale_mode,
                clip_len: clip as f64,
                seconds_per_unit: seconds_per_snippet,
                score_threshold: inference.score_threshold,
                top_k: inference.top_k,
            },
        );
        soft_nms(&dets, inference.nms_sigma, inference.final_threshold)
    }

    fn replay_loss(&self, padded: &Tensor, clip: usize, targets: &SampleTargets, decisions: &Decisions) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, padded, clip as f64, Mode::Replay(decisions))?;
        let (loss, _) = self.loss(&mut tape, &out, targets)?;
        Ok(tape.scalar(loss))
    }

    /// Compares the analytic gradient of the total loss w.r.t. every
    /// parameter scalar with central differences. Background windows and
    /// context indices are recorded once and replayed, so the loss is
    /// evaluated on a fixed smooth branch.
    pub fn gradient_check(&self, features: &Tensor, annotations: &[Annotation], eps: f64) -> Result<GradCheckReport> {
        let (padded, clip) = self.pad(features)?;
        let targets = self.targets(padded.rows(), clip, annotations)?;
        let decisions = {
            let mut tape = Tape::new();
            self.forward(&mut tape, &padded, clip as f64, Mode::Eval)?.decisions
        };
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &padded, clip as f64, Mode::Replay(&decisions))?;
        let (loss, _) = self.loss(&mut tape, &out, &targets)?;
        tape.backward(loss)?;
        let mut probe = self.clone();
        let mut worst = (0.0, String::new());
        let mut scalars = 0;
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let var = out.bound.get(&name)?;
            let analytic = tape.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(var).len()]);
            let n = analytic.len();
            let mut numeric = vec![0.0; n];
            for j in 0..n {
                let orig = self.params.get(&name).expect("known").data()[j];
                probe.params.get_mut(&name).expect("known").data_mut()[j] = orig + eps;
                let up = probe.replay_loss(&padded, clip, &targets, &decisions)?;
                probe.params.get_mut(&name).expect("known").data_mut()[j] = orig - eps;
                let down = probe.replay_loss(&padded, clip, &targets, &decisions)?;
                probe.params.get_mut(&name).expect("known").data_mut()[j] = orig;
                numeric[j] = (up - down) / (2.0 * eps);
            }
            scalars += n;
            let err = max_relative_error(&analytic, &numeric);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, name);
            }
        }
        Ok(GradCheckReport {
            max_relative_error: worst.0,
            worst_parameter: worst.1,
            scalars,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::Segment;

    fn tiny(encoder: EncoderType, bfs: bool) -> ModelConfig {
        ModelConfig {
            levels: 2,
            channels: 4,
            heads: 1,
            ffn_mult: 1,
            encoder_type: encoder,
            bfs_enabled: bfs,
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    fn features(t: usize, c: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Init::new(&mut rng, 1.0).uniform(&[t, c], 1.0)
    }

    fn anns() -> Vec<Annotation> {
        vec![Annotation {
            segment: Segment::new(3.0, 9.0),
            class_id: 1,
        }]
    }

    #[test]
    fn all_variants_run_and_shapes_match() {
        for enc in [EncoderType::Hierarchical, EncoderType::Vanilla, EncoderType::Cnn] {
            for bfs in [true, false] {
                let m = Htnet::new(&tiny(enc, bfs), 3, 2, 1).unwrap();
                let (levels, clip) = m.predict_levels(&features(15, 3)).unwrap();
                assert_eq!(clip, 15);
                assert_eq!(levels[0].logits.shape(), &[16, 2]);
                assert_eq!(levels[1].distances.shape(), &[8, 2]);
            }
        }
    }

    #[test]
    fn small_gradient_check() {
        for enc in [EncoderType::Hierarchical, EncoderType::Cnn] {
            let m = Htnet::new(&tiny(enc, true), 3, 2, 2).unwrap();
            let r = m.gradient_check(&features(8, 3), &anns()[..0], 1e-5).unwrap();
            assert!(r.max_relative_error < 1e-4, "{enc:?}: {r:?}");
            let r = m.gradient_check(&features(12, 3), &anns(), 1e-5).unwrap();
            assert!(r.max_relative_error < 1e-4, "{enc:?}: {r:?}");
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let m = Htnet::new(&tiny(EncoderType::Hierarchical, true), 3, 2, 1).unwrap();
        let mut ckpt = Checkpoint {
            config: crate::config::Config {
                model: m.config.clone(),
                ..Default::default()
            },
            classes: vec!["a".into(), "b".into()],
            input_dim: 3,
            epoch: 0,
            val_map: None,
            params: m.params.clone(),
        };
        assert_eq!(Htnet::from_checkpoint(&ckpt).unwrap(), m);
        ckpt.input_dim = 4;
        assert!(Htnet::from_checkpoint(&ckpt).is_err());
    }
}
