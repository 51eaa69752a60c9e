//! Optimizer, schedule, training loop and ablation runner.

mod optim;

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, clip_grad_norm, cosine_lr, grad_norm, AdamW};

use crate::config::{apply_overrides, Config, InferenceConfig};
use crate::data::VideoData;
use crate::error::{Error, Result};
use crate::evaluation::{map_grid, EvalReport, THUMOS_THRESHOLDS};
use crate::heads::LossBreakdown;
use crate::inference::Detection;
use crate::model::Htnet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Mean per-clip loss terms over the epoch.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub skipped_steps: u64,
    pub val_map: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights with the best validation average mAP, or the final weights
    /// when no validation ran.
    pub best: Htnet,
    pub best_epoch: usize,
    pub best_map: Option<f64>,
    pub last: Htnet,
    pub history: Vec<EpochMetrics>,
}

/// Detections for every video and the report over `thresholds`; ground
/// truth and detections are in seconds.
pub fn evaluate(
    model: &Htnet,
    videos: &[VideoData],
    inference: &InferenceConfig,
    thresholds: &[f64],
) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    let dets = videos
        .iter()
        .map(|v| model.detect(&v.features, inference, v.seconds_per_snippet))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = videos.iter().map(VideoData::annotations_seconds).collect();
    let report = map_grid(&dets, &gts, model.num_classes, thresholds)?;
    Ok((report, dets))
}

/// Trains `model` on `train`, validating on `val` (if nonempty) every
/// `eval_every` epochs and after the last one. Writes one JSON line per
/// epoch to `metrics`.
pub fn train(
    mut model: Htnet,
    train: &[VideoData],
    val: &[VideoData],
    config: &Config,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let tc = &config.train;
    tc.validate()?;
    if train.is_empty() && tc.epochs > 0 {
        return Err(Error::InvalidArgument("no training videos".into()));
    }
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let horizon = if tc.horizon == 0 {
        tc.epochs * steps_per_epoch
    } else {
        tc.horizon
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(&model.params, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best = (model.clone(), 0, None::<f64>);
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut lr = 0.0;
        let mut norm_sum = 0.0;
        let skipped_before = opt.skipped;
        for batch in order.chunks(tc.batch_size) {
            model.params.zero_grad();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let v = &train[i];
                let b = model.accumulate_gradients(&v.id, &v.features, &v.annotations, &mut rng, weight)?;
                sum.add_assign(&b);
            }
            norm_sum += clip_grad_norm(&mut model.params, tc.grad_clip);
            lr = cosine_lr(opt.step as usize, horizon, tc.lr);
            adamw_step(&mut model.params, &mut opt, lr);
        }
        model.params.zero_grad();
        let validate = !val.is_empty() && tc.eval_every > 0 && (epoch % tc.eval_every == 0 || epoch == tc.epochs);
        let val_map = if validate {
            Some(evaluate(&model, val, &config.inference, &THUMOS_THRESHOLDS)?.0.average_map)
        } else {
            None
        };
        if let Some(m) = val_map {
            if best.2.is_none_or(|b| m > b) {
                best = (model.clone(), epoch, Some(m));
            }
        }
        let record = EpochMetrics {
            epoch,
            steps: steps_per_epoch,
            lr,
            loss: sum.scaled(1.0 / train.len() as f64),
            grad_norm: norm_sum / steps_per_epoch as f64,
            skipped_steps: opt.skipped - skipped_before,
            val_map,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (coarse {:.4} refine {:.4} cls {:.4} start {:.4} end {:.4}){}",
            record.loss.total,
            record.loss.coarse,
            record.loss.refine,
            record.loss.cls,
            record.loss.start,
            record.loss.end,
            val_map.map_or(String::new(), |m| format!(", val avg mAP {:.4}", m))
        );
        if let Some(w) = metrics.as_deref_mut() {
            let line = serde_json::to_string(&record).expect("metrics serialize");
            writeln!(w, "{line}").map_err(|e| Error::io("<metrics>", e))?;
        }
        history.push(record);
    }
    let (best_model, best_epoch, best_map) = if best.2.is_some() {
        best
    } else {
        (model.clone(), tc.epochs, None)
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        best_map,
        last: model,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub overrides: Vec<String>,
    pub seeds: Vec<u64>,
    pub average_maps: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28}{:>14}  per-seed", "variant", "avg mAP (%)");
        for r in &self.rows {
            let per: Vec<String> = r.average_maps.iter().map(|m| format!("{:.2}", 100.0 * m)).collect();
            let _ = writeln!(s, "{:<28}{:>14.2}  {}", r.label, 100.0 * r.mean, per.join(" "));
        }
        s
    }
}

/// Background sampling on/off crossed with hierarchical/CNN encoders.
pub fn bfs_encoder_grid() -> Vec<(String, Vec<String>)> {
    let mut rows = Vec::new();
    for (enc, enc_label) in [("hierarchical", "hier-transformer"), ("cnn", "cnn")] {
        for (bfs, bfs_label) in [(true, "bfs"), (false, "no-bfs")] {
            rows.push((
                format!("{bfs_label} + {enc_label}"),
                vec![format!("model.bfs_enabled={bfs}"), format!("model.encoder_type=\"{enc}\"")],
            ));
        }
    }
    rows
}

/// Background sampling rates 0.3, 0.5, 0.7.
pub fn delta_grid() -> Vec<(String, Vec<String>)> {
    [0.3, 0.5, 0.7]
        .iter()
        .map(|d| (format!("delta = {d}"), vec![format!("model.delta={d}")]))
        .collect()
}

/// Trains every grid row under each seed on identical data and reports
/// the mean validation average mAP (training set if `val` is empty).
pub fn ablate(
    train_set: &[VideoData],
    val: &[VideoData],
    num_classes: usize,
    base: &Config,
    grid: &[(String, Vec<String>)],
    seeds: &[u64],
) -> Result<AblationTable> {
    if grid.len() < 2 {
        return Err(Error::InvalidArgument("ablation needs at least two configurations".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let input_dim = train_set
        .first()
        .map(|v| v.features.cols())
        .ok_or_else(|| Error::InvalidArgument("no training videos".into()))?;
    let eval_set = if val.is_empty() { train_set } else { val };
    let mut rows = Vec::with_capacity(grid.len());
    for (label, overrides) in grid {
        let mut maps = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = apply_overrides(base, overrides)?;
            cfg.train.seed = seed;
            let model = Htnet::new(&cfg.model, input_dim, num_classes, seed)?;
            let outcome = train(model, train_set, val, &cfg, None)?;
            let (report, _) = evaluate(&outcome.best, eval_set, &cfg.inference, &THUMOS_THRESHOLDS)?;
            log::info!("{label} seed {seed}: avg mAP {:.4}", report.average_map);
            maps.push(report.average_map);
        }
        rows.push(AblationRow {
            label: label.clone(),
            overrides: overrides.clone(),
            seeds: seeds.to_vec(),
            mean: maps.iter().sum::<f64>() / maps.len() as f64,
            average_maps: maps,
        });
    }
    Ok(AblationTable { rows })
}
