//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{apply_overrides, load_config, Config};
use crate::data::{
    load_annotations, load_checkpoint, load_dataset, load_manifest, read_json, save_checkpoint, serialize_detections,
    synth_generate, write_json, Checkpoint, ResultsFile, VideoData,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    activitynet_thresholds, default_coverage_buckets, default_length_buckets, fn_profile, map_grid, THUMOS_THRESHOLDS,
};
use crate::model::Htnet;
use crate::selftest;
use crate::training::{ablate, bfs_encoder_grid, delta_grid, train};

#[derive(Debug, Parser)]
#[command(name = "htnet", version, about = "Temporal action localization on precomputed video features")]
pub struct Cli {
    /// TOML configuration file layered over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one configuration value, e.g. `--set model.delta=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Output directory; the resolved config is written here.
    #[arg(long, global = true, env = "HTNET_OUT", default_value = "htnet-out")]
    pub out: PathBuf,

    /// Seed for data generation and training (`synth.seed`, `train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ThresholdGrid {
    /// 0.3, 0.4, ..., 0.7
    Thumos,
    /// 0.5, 0.55, ..., 0.95
    Activitynet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationGrid {
    /// Background sampling on/off × hierarchical/CNN encoder
    BfsEncoder,
    /// Background sampling rate 0.3 / 0.5 / 0.7
    Delta,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into the output directory.
    Synth,
    /// Train a model and save the best checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value = "train")]
        train_subset: String,
        /// Validation subset; may be empty.
        #[arg(long, default_value = "val")]
        val_subset: String,
    },
    /// Run a checkpoint over a dataset and write `results.json`.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Only videos of this subset; all videos by default.
        #[arg(long)]
        subset: Option<String>,
    },
    /// Score a results file against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        subset: Option<String>,
        #[arg(long, value_enum, default_value = "thumos")]
        grid: ThresholdGrid,
        /// tIoU used for the false-negative profile.
        #[arg(long, default_value_t = 0.5)]
        fn_threshold: f64,
    },
    /// Train a grid of variants under several seeds and compare them.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum, default_value = "bfs-encoder")]
        grid: AblationGrid,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Gradient checks and oracle comparisons.
    Selftest,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns 0 on success, 1 for invalid input, 2 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn resolve(cli: &Cli) -> Result<Config> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("synth.seed={seed}"));
        overrides.push(format!("train.seed={seed}"));
    }
    load_config(cli.config.as_deref(), &overrides)
}

fn prepare_out(dir: &Path, config: &Config) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    config.save(&dir.join("config.toml"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn select(videos: Vec<VideoData>, subset: Option<&str>) -> Vec<VideoData> {
    match subset {
        Some(s) => videos.into_iter().filter(|v| v.subset == s).collect(),
        None => videos,
    }
}

/// Runs the parsed command. `Ok(false)` means it ran but reported failure.
pub fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth => {
            let cfg = resolve(cli)?;
            prepare_out(&cli.out, &cfg)?;
            let (manifest, _) = synth_generate(&cfg.synth, &cli.out)?;
            println!("wrote {} videos to {}", manifest.videos.len(), cli.out.display());
        }
        Command::Train {
            manifest,
            annotations,
            train_subset,
            val_subset,
        } => {
            let cfg = resolve(cli)?;
            let data = load_dataset(manifest, Some(annotations))?;
            let train_set = data.subset(train_subset);
            let val_set = data.subset(val_subset);
            let first = train_set
                .first()
                .ok_or_else(|| Error::InvalidArgument(format!("no videos in subset `{train_subset}`")))?;
            prepare_out(&cli.out, &cfg)?;
            let model = Htnet::new(&cfg.model, first.features.cols(), data.num_classes(), cfg.train.seed)?;
            let metrics_path = cli.out.join("metrics.jsonl");
            let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            let mut writer = BufWriter::new(file);
            let outcome = train(model, &train_set, &val_set, &cfg, Some(&mut writer))?;
            writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
            let ckpt = Checkpoint {
                config: cfg.clone(),
                classes: data.classes.clone(),
                input_dim: outcome.best.input_dim,
                epoch: outcome.best_epoch,
                val_map: outcome.best_map,
                params: outcome.best.params,
            };
            save_checkpoint(&cli.out.join("checkpoint.htnc"), &ckpt)?;
            match outcome.best_map {
                Some(m) => println!("best epoch {} with validation average mAP {m:.4}", outcome.best_epoch),
                None => println!("trained {} epochs", outcome.best_epoch),
            }
        }
        Command::Predict {
            checkpoint,
            manifest,
            subset,
        } => {
            if cli.config.is_some() {
                return Err(Error::InvalidArgument(
                    "predict reads its configuration from the checkpoint; use --set for inference options".into(),
                ));
            }
            let ckpt = load_checkpoint(checkpoint)?;
            let cfg = apply_overrides(&ckpt.config, &cli.overrides)?;
            if cfg.model != ckpt.config.model {
                return Err(Error::InvalidArgument("model settings are fixed by the checkpoint".into()));
            }
            let model = Htnet::from_checkpoint(&ckpt)?;
            let data = load_dataset(manifest, None)?;
            if data.classes != ckpt.classes {
                return Err(Error::format(manifest, "class list differs from the checkpoint's"));
            }
            prepare_out(&cli.out, &cfg)?;
            let mut detections = BTreeMap::new();
            for v in select(data.videos, subset.as_deref()) {
                let dets = model.detect(&v.features, &cfg.inference, v.seconds_per_snippet)?;
                detections.insert(v.id, dets);
            }
            let results = serialize_detections(&detections, &ckpt.classes)?;
            write_json(&cli.out.join("results.json"), &results)?;
            println!("wrote detections for {} videos", detections.len());
        }
        Command::Eval {
            results,
            manifest,
            annotations,
            subset,
            grid,
            fn_threshold,
        } => {
            let cfg = resolve(cli)?;
            let m = load_manifest(manifest)?;
            let anns = load_annotations(annotations, &m)?;
            let file: ResultsFile = read_json(results)?;
            let mut by_video = file.detections(&m.classes, results)?;
            if let Some(id) = by_video.keys().find(|id| m.video(id).is_none()) {
                return Err(Error::format(results, format!("video `{id}` is not in the manifest")));
            }
            prepare_out(&cli.out, &cfg)?;
            let records: Vec<_> = m
                .videos
                .iter()
                .filter(|v| subset.as_deref().is_none_or(|s| v.subset == s))
                .collect();
            let dets: Vec<_> = records.iter().map(|v| by_video.remove(&v.id).unwrap_or_default()).collect();
            let gts: Vec<_> = records.iter().map(|v| anns.for_video(&v.id)).collect();
            let durations: Vec<_> = records.iter().map(|v| v.duration()).collect();
            let thresholds = match grid {
                ThresholdGrid::Thumos => THUMOS_THRESHOLDS.to_vec(),
                ThresholdGrid::Activitynet => activitynet_thresholds(),
            };
            let mut report = map_grid(&dets, &gts, m.num_classes(), &thresholds)?;
            report.fn_profile = Some(fn_profile(
                &dets,
                &gts,
                &durations,
                &default_length_buckets(),
                &default_coverage_buckets(),
                *fn_threshold,
            )?);
            let mut json = report.to_json();
            json.push('\n');
            write_text(&cli.out.join("report.json"), &json)?;
            write_text(&cli.out.join("report.txt"), &report.to_text(&m.classes))?;
            println!("average mAP {:.4}", report.average_map);
        }
        Command::Ablate {
            manifest,
            annotations,
            grid,
            seeds,
        } => {
            let cfg = resolve(cli)?;
            let data = load_dataset(manifest, Some(annotations))?;
            prepare_out(&cli.out, &cfg)?;
            let rows = match grid {
                AblationGrid::BfsEncoder => bfs_encoder_grid(),
                AblationGrid::Delta => delta_grid(),
            };
            let table = ablate(
                &data.subset("train"),
                &data.subset("val"),
                data.num_classes(),
                &cfg,
                &rows,
                seeds,
            )?;
            write_json(&cli.out.join("ablation.json"), &table)?;
            let text = table.to_text();
            write_text(&cli.out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            println!("{}/{} checks passed", checks.iter().filter(|c| c.passed).count(), checks.len());
            return Ok(ok);
        }
    }
    Ok(true)
}
