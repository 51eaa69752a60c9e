//! Feature, manifest, annotation, results and checkpoint files, plus the
//! synthetic dataset generator.

mod checkpoint;
mod features;
mod manifest;
mod synth;

use std::collections::BTreeMap;
use std::path::Path;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use features::{
    decode_features, encode_features, load_features, pad_to_divisible, save_features, FEATURE_MAGIC,
    FEATURE_VERSION, HEADER_LEN,
};
pub use manifest::{
    load_annotations, load_manifest, read_json, serialize_detections, write_json, AnnotationRecord, AnnotationSet,
    DatasetManifest, ResultRecord, ResultsFile, VideoRecord, SCHEMA_VERSION,
};
pub use synth::{synth_dataset, SynthConfig};

use crate::error::{Error, Result};
use crate::heads::Annotation;
use crate::numerics::Tensor;
use crate::segment::Segment;

/// One video in memory. Annotations are in snippet units.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoData {
    pub id: String,
    pub subset: String,
    pub features: Tensor,
    pub annotations: Vec<Annotation>,
    pub seconds_per_snippet: f64,
}

impl VideoData {
    pub fn duration(&self) -> f64 {
        self.features.rows() as f64 * self.seconds_per_snippet
    }

    /// Annotations converted to seconds.
    pub fn annotations_seconds(&self) -> Vec<Annotation> {
        self.annotations
            .iter()
            .map(|a| Annotation {
                segment: a.segment.scaled(self.seconds_per_snippet),
                class_id: a.class_id,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub videos: Vec<VideoData>,
}

impl Dataset {
    pub fn subset(&self, name: &str) -> Vec<VideoData> {
        self.videos.iter().filter(|v| v.subset == name).cloned().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Writes `features/<id>.htnf`, `manifest.json` and `annotations.json`
/// under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path, config: &SynthConfig) -> Result<(DatasetManifest, AnnotationSet)> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut records = Vec::with_capacity(dataset.videos.len());
    let mut annotations = BTreeMap::new();
    for v in &dataset.videos {
        let rel = Path::new("features").join(format!("{}.htnf", v.id));
        save_features(&dir.join(&rel), &v.features)?;
        records.push(VideoRecord {
            id: v.id.clone(),
            features: rel,
            snippets: v.features.rows(),
            feature_dim: v.features.cols(),
            fps: config.fps,
            frames_per_snippet: config.frames_per_snippet,
            snippet_stride: config.snippet_stride,
            subset: v.subset.clone(),
        });
        annotations.insert(
            v.id.clone(),
            v.annotations_seconds()
                .iter()
                .map(|a| AnnotationRecord {
                    start: a.segment.start,
                    end: a.segment.end,
                    class_id: a.class_id,
                })
                .collect(),
        );
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        classes: dataset.classes.clone(),
        videos: records,
    };
    let annotations = AnnotationSet {
        schema_version: SCHEMA_VERSION,
        videos: annotations,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("annotations.json"), &annotations)?;
    Ok((manifest, annotations))
}

/// Generates a synthetic dataset and writes it to `dir`.
pub fn synth_generate(config: &SynthConfig, dir: &Path) -> Result<(DatasetManifest, AnnotationSet)> {
    let dataset = synth_dataset(config)?;
    write_dataset(&dataset, dir, config)
}

/// Loads every video of `manifest_path`, checking each file's declared
/// shape. `annotations_path` is optional for inference-only use.
pub fn load_dataset(manifest_path: &Path, annotations_path: Option<&Path>) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let annotations = match annotations_path {
        Some(p) => Some(load_annotations(p, &manifest)?),
        None => None,
    };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for rec in &manifest.videos {
        let path = base.join(&rec.features);
        let features = load_features(&path)?;
        if features.rows() != rec.snippets || features.cols() != rec.feature_dim {
            return Err(Error::format(
                &path,
                format!(
                    "holds {}×{} features, manifest declares {}×{}",
                    features.rows(),
                    features.cols(),
                    rec.snippets,
                    rec.feature_dim
                ),
            ));
        }
        let sps = rec.seconds_per_snippet();
        let anns = annotations
            .as_ref()
            .map(|a| {
                a.for_video(&rec.id)
                    .into_iter()
                    .map(|x| Annotation {
                        segment: Segment::new(x.segment.start / sps, x.segment.end / sps),
                        class_id: x.class_id,
                    })
                    .collect()
            })
            .unwrap_or_default();
        videos.push(VideoData {
            id: rec.id.clone(),
            subset: rec.subset.clone(),
            features,
            annotations: anns,
            seconds_per_snippet: sps,
        });
    }
    Ok(Dataset {
        classes: manifest.classes.clone(),
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_round_trip_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            videos: 3,
            eval_videos: 1,
            ..SynthConfig::default()
        };
        synth_generate(&cfg, dir.path()).unwrap();
        let loaded = load_dataset(&dir.path().join("manifest.json"), Some(&dir.path().join("annotations.json"))).unwrap();
        assert_eq!(loaded, synth_dataset(&cfg).unwrap());
    }

    #[test]
    fn synth_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        synth_generate(&cfg, a.path()).unwrap();
        synth_generate(&cfg, b.path()).unwrap();
        for f in ["manifest.json", "annotations.json", "features/train_0003.htnf"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn mismatched_shape_rejected() {
        let dir = tempfile::tempdir().unwrap();
        synth_generate(&SynthConfig { videos: 1, ..SynthConfig::default() }, dir.path()).unwrap();
        let mp = dir.path().join("manifest.json");
        let mut m: DatasetManifest = read_json(&mp).unwrap();
        m.videos[0].snippets = 63;
        write_json(&mp, &m).unwrap();
        let err = load_dataset(&mp, None).unwrap_err().to_string();
        assert!(err.contains("manifest declares 63"), "{err}");
        assert!(load_dataset(&dir.path().join("missing.json"), None).is_err());
    }
}
