//! Synthetic untrimmed "videos": Gaussian background noise with
//! class-specific pattern vectors added over non-overlapping action spans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, VideoData};
use crate::error::{Error, Result};
use crate::heads::Annotation;
use crate::numerics::Tensor;
use crate::segment::Segment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Training videos.
    pub videos: usize,
    /// Held-out videos, generated after the training ones.
    pub eval_videos: usize,
    pub min_snippets: usize,
    pub max_snippets: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    /// Action length range, in snippets.
    pub min_action_len: usize,
    pub max_action_len: usize,
    /// Amplitude of the unit-norm class pattern relative to unit-variance noise.
    pub snr: f64,
    /// Amplitude of a per-class scene pattern added to the background
    /// snippets. When positive, all actions of a video share one class.
    pub scene_snr: f64,
    /// Weight `ρ ∈ [0, 1)` of a direction shared by all class patterns:
    /// each becomes `√ρ·shared + √(1−ρ)·own` with `own ⟂ shared`.
    pub pattern_overlap: f64,
    pub seed: u64,
    pub fps: f64,
    pub frames_per_snippet: usize,
    pub snippet_stride: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 10,
            eval_videos: 0,
            min_snippets: 64,
            max_snippets: 64,
            feature_dim: 16,
            num_classes: 3,
            min_actions: 1,
            max_actions: 3,
            min_action_len: 4,
            max_action_len: 16,
            snr: 10.0,
            scene_snr: 0.0,
            pattern_overlap: 0.0,
            seed: 7,
            fps: 16.0,
            frames_per_snippet: 16,
            snippet_stride: 16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: format!("synth.{key}"),
                message,
            })
        };
        if self.feature_dim == 0 || self.num_classes == 0 {
            return bad("feature_dim", "feature_dim and num_classes must be positive".into());
        }
        if self.min_snippets == 0 || self.min_snippets > self.max_snippets {
            return bad("min_snippets", "need 0 < min_snippets <= max_snippets".into());
        }
        if self.min_actions > self.max_actions {
            return bad("min_actions", "min_actions exceeds max_actions".into());
        }
        if self.min_action_len < 2 || self.min_action_len > self.max_action_len {
            return bad("min_action_len", "need 2 <= min_action_len <= max_action_len".into());
        }
        let worst = self.max_actions * self.max_action_len + self.max_actions.saturating_sub(1);
        if worst > self.min_snippets {
            return bad(
                "max_actions",
                format!(
                    "infeasible packing: {} actions of up to {} snippets need {worst} > {} snippets",
                    self.max_actions, self.max_action_len, self.min_snippets
                ),
            );
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return bad("snr", "must be finite and nonnegative".into());
        }
        if !(self.scene_snr >= 0.0 && self.scene_snr.is_finite()) {
            return bad("scene_snr", "must be finite and nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.pattern_overlap) {
            return bad("pattern_overlap", "must lie in [0, 1)".into());
        }
        if !(self.fps > 0.0) || self.snippet_stride == 0 || self.frames_per_snippet == 0 {
            return bad("fps", "fps, frames_per_snippet and snippet_stride must be positive".into());
        }
        Ok(())
    }

    pub fn seconds_per_snippet(&self) -> f64 {
        self.snippet_stride as f64 / self.fps
    }
}

fn unit_pattern(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / norm).collect()
}

/// Generates the dataset in memory. Feature values are rounded through
/// `f32` so they equal what a save/load cycle produces.
pub fn synth_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut patterns: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| unit_pattern(&mut rng, config.feature_dim))
        .collect();
    if config.pattern_overlap > 0.0 {
        let shared = unit_pattern(&mut rng, config.feature_dim);
        let (a, b) = (config.pattern_overlap.sqrt(), (1.0 - config.pattern_overlap).sqrt());
        for p in &mut patterns {
            // orthogonalize against the shared direction first
            let dot: f64 = p.iter().zip(&shared).map(|(x, y)| x * y).sum();
            let mut own: Vec<f64> = p.iter().zip(&shared).map(|(x, y)| x - dot * y).collect();
            let norm = own.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            own.iter_mut().for_each(|x| *x /= norm);
            *p = shared.iter().zip(&own).map(|(s, o)| a * s + b * o).collect();
        }
    }
    let scenes: Vec<Vec<f64>> = if config.scene_snr > 0.0 {
        (0..config.num_classes)
            .map(|_| unit_pattern(&mut rng, config.feature_dim))
            .collect()
    } else {
        Vec::new()
    };
    let sps = config.seconds_per_snippet();
    let total = config.videos + config.eval_videos;
    let mut videos = Vec::with_capacity(total);
    for v in 0..total {
        let t = rng.random_range(config.min_snippets..=config.max_snippets);
        let k = rng.random_range(config.min_actions..=config.max_actions);
        let lens: Vec<usize> = (0..k)
            .map(|_| rng.random_range(config.min_action_len..=config.max_action_len))
            .collect();
        let free = t - lens.iter().sum::<usize>() - k.saturating_sub(1);
        let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut data: Vec<f64> = (0..t * config.feature_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let video_class = (!scenes.is_empty()).then(|| rng.random_range(0..config.num_classes));
        let mut in_action = vec![false; t];
        let mut annotations = Vec::with_capacity(k);
        let mut cursor = 0;
        let mut prev_cut = 0;
        for (j, len) in lens.iter().enumerate() {
            let start = cursor + (cuts[j] - prev_cut);
            prev_cut = cuts[j];
            let end = start + len;
            let class_id = video_class.unwrap_or_else(|| rng.random_range(0..config.num_classes));
            in_action[start..end].iter_mut().for_each(|a| *a = true);
            for row in start..end {
                for (x, p) in data[row * config.feature_dim..(row + 1) * config.feature_dim]
                    .iter_mut()
                    .zip(&patterns[class_id])
                {
                    *x += config.snr * p;
                }
            }
            annotations.push(Annotation {
                segment: Segment::new(start as f64, end as f64),
                class_id,
            });
            cursor = end + 1;
        }
        if let Some(c) = video_class {
            for row in (0..t).filter(|r| !in_action[*r]) {
                for (x, p) in data[row * config.feature_dim..(row + 1) * config.feature_dim]
                    .iter_mut()
                    .zip(&scenes[c])
                {
                    *x += config.scene_snr * p;
                }
            }
        }
        for x in &mut data {
            *x = *x as f32 as f64;
        }
        let subset = if v < config.videos { "train" } else { "val" };
        videos.push(VideoData {
            id: format!("{subset}_{v:04}"),
            subset: subset.into(),
            features: Tensor::new(vec![t, config.feature_dim], data)?,
            annotations,
            seconds_per_snippet: sps,
        });
    }
    Ok(Dataset {
        classes: (0..config.num_classes).map(|c| format!("action_{c}")).collect(),
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_non_overlapping() {
        let cfg = SynthConfig {
            videos: 6,
            eval_videos: 2,
            min_snippets: 50,
            max_snippets: 80,
            ..SynthConfig::default()
        };
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.videos.iter().filter(|v| v.subset == "val").count(), 2);
        for v in &a.videos {
            let t = v.features.rows() as f64;
            let mut segs: Vec<_> = v.annotations.iter().map(|a| a.segment).collect();
            segs.sort_by(|x, y| x.start.total_cmp(&y.start));
            for s in &segs {
                assert!(s.start >= 0.0 && s.end <= t && s.length() >= 2.0);
            }
            for w in segs.windows(2) {
                assert!(w[0].end < w[1].start);
            }
        }
    }

    #[test]
    fn zero_snr_is_pure_noise() {
        let base = SynthConfig::default();
        let quiet = SynthConfig { snr: 0.0, ..base.clone() };
        let d = synth_dataset(&quiet).unwrap();
        assert!(d.videos.iter().all(|v| !v.annotations.is_empty()));
        let mean: f64 = d.videos[0].features.data().iter().sum::<f64>() / d.videos[0].features.numel() as f64;
        assert!(mean.abs() < 0.2);
    }

    #[test]
    fn infeasible_packing_rejected() {
        let cfg = SynthConfig {
            max_actions: 5,
            max_action_len: 20,
            ..SynthConfig::default()
        };
        assert!(synth_dataset(&cfg).is_err());
    }

    #[test]
    fn scene_videos_have_one_class() {
        let cfg = SynthConfig {
            videos: 8,
            scene_snr: 1.0,
            ..SynthConfig::default()
        };
        let d = synth_dataset(&cfg).unwrap();
        for v in &d.videos {
            let c = v.annotations[0].class_id;
            assert!(v.annotations.iter().all(|a| a.class_id == c));
        }
    }

    #[test]
    fn knobs_off_leave_data_unchanged() {
        let base = SynthConfig::default();
        let explicit = SynthConfig {
            scene_snr: 0.0,
            pattern_overlap: 0.0,
            ..base.clone()
        };
        assert_eq!(synth_dataset(&base).unwrap(), synth_dataset(&explicit).unwrap());
        assert!(synth_dataset(&SynthConfig {
            pattern_overlap: 1.0,
            ..base
        })
        .is_err());
    }

    fn class_mean_cosines(cfg: &SynthConfig) -> Vec<f64> {
        let d = synth_dataset(cfg).unwrap();
        let dim = cfg.feature_dim;
        let mut sums = vec![vec![0.0; dim]; cfg.num_classes];
        for v in &d.videos {
            for a in &v.annotations {
                for row in a.segment.start as usize..a.segment.end as usize {
                    for (s, x) in sums[a.class_id].iter_mut().zip(v.features.row(row)) {
                        *s += x;
                    }
                }
            }
        }
        let unit: Vec<Vec<f64>> = sums
            .iter()
            .map(|s| {
                let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                s.iter().map(|x| x / n).collect()
            })
            .collect();
        let mut out = Vec::new();
        for i in 0..unit.len() {
            for j in i + 1..unit.len() {
                out.push(unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum());
            }
        }
        out
    }

    #[test]
    fn overlap_makes_classes_similar() {
        let cfg = SynthConfig {
            videos: 40,
            pattern_overlap: 0.9,
            ..SynthConfig::default()
        };
        assert!(class_mean_cosines(&cfg).iter().all(|c| *c > 0.8));
        let apart = SynthConfig {
            pattern_overlap: 0.0,
            ..cfg
        };
        assert!(class_mean_cosines(&apart).iter().all(|c| *c < 0.8));
    }
}
