//! JSON dataset manifests, annotation sets and detection results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Annotation;
use crate::inference::{detection_order, Detection};
use crate::segment::Segment;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    /// Feature file, relative to the manifest's directory.
    pub features: PathBuf,
    pub snippets: usize,
    pub feature_dim: usize,
    pub fps: f64,
    pub frames_per_snippet: usize,
    /// Frames between consecutive snippet starts.
    pub snippet_stride: usize,
    #[serde(default = "default_subset")]
    pub subset: String,
}

fn default_subset() -> String {
    "train".into()
}

impl VideoRecord {
    pub fn seconds_per_snippet(&self) -> f64 {
        self.snippet_stride as f64 / self.fps
    }

    pub fn duration(&self) -> f64 {
        self.snippets as f64 * self.seconds_per_snippet()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub classes: Vec<String>,
    pub videos: Vec<VideoRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        check_version(self.schema_version, path)?;
        if self.classes.is_empty() {
            return Err(Error::format(path, "manifest declares no classes"));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.videos {
            if !seen.insert(&v.id) {
                return Err(Error::format(path, format!("duplicate video id `{}`", v.id)));
            }
            if v.snippets == 0 || v.feature_dim == 0 || !(v.fps > 0.0) || v.snippet_stride == 0 {
                return Err(Error::format(
                    path,
                    format!("video `{}` needs positive snippets, feature_dim, fps and snippet_stride", v.id),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
}

/// Ground truth in seconds, keyed by video id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub schema_version: u32,
    pub videos: BTreeMap<String, Vec<AnnotationRecord>>,
}

impl AnnotationSet {
    /// Checks `0 ≤ start < end ≤ duration` and class ids against `manifest`.
    pub fn validate(&self, manifest: &DatasetManifest, path: &Path) -> Result<()> {
        check_version(self.schema_version, path)?;
        for (id, records) in &self.videos {
            let video = manifest
                .video(id)
                .ok_or_else(|| Error::format(path, format!("annotations for unknown video `{id}`")))?;
            let duration = video.duration();
            for r in records {
                if !(r.start >= 0.0 && r.start < r.end && r.end <= duration + 1e-9) {
                    return Err(Error::format(
                        path,
                        format!("video `{id}`: [{}, {}] outside [0, {duration}] or empty", r.start, r.end),
                    ));
                }
                if r.class_id >= manifest.num_classes() {
                    return Err(Error::format(
                        path,
                        format!("video `{id}`: class id {} >= {}", r.class_id, manifest.num_classes()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn for_video(&self, id: &str) -> Vec<Annotation> {
        self.videos.get(id).map_or_else(Vec::new, |v| {
            v.iter()
                .map(|r| Annotation {
                    segment: Segment::new(r.start, r.end),
                    class_id: r.class_id,
                })
                .collect()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub start: f64,
    pub end: f64,
    pub label: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub results: BTreeMap<String, Vec<ResultRecord>>,
}

/// Builds a results file, sorting each video's detections by score
/// (descending) then start.
pub fn serialize_detections(detections: &BTreeMap<String, Vec<Detection>>, classes: &[String]) -> Result<ResultsFile> {
    let mut results = BTreeMap::new();
    for (id, dets) in detections {
        let mut dets = dets.clone();
        dets.sort_by(detection_order);
        let records = dets
            .iter()
            .map(|d| {
                let label = classes.get(d.class_id).ok_or_else(|| {
                    Error::InvalidArgument(format!("video `{id}`: unknown class id {}", d.class_id))
                })?;
                Ok(ResultRecord {
                    start: d.segment.start,
                    end: d.segment.end,
                    label: label.clone(),
                    score: d.score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        results.insert(id.clone(), records);
    }
    Ok(ResultsFile {
        schema_version: SCHEMA_VERSION,
        results,
    })
}

impl ResultsFile {
    pub fn detections(&self, classes: &[String], path: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
        check_version(self.schema_version, path)?;
        self.results
            .iter()
            .map(|(id, records)| {
                let dets = records
                    .iter()
                    .map(|r| {
                        let class_id = classes
                            .iter()
                            .position(|c| *c == r.label)
                            .ok_or_else(|| Error::format(path, format!("video `{id}`: unknown label `{}`", r.label)))?;
                        Ok(Detection {
                            segment: Segment::new(r.start, r.end),
                            class_id,
                            score: r.score,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((id.clone(), dets))
            })
            .collect()
    }
}

fn check_version(v: u32, path: &Path) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::format(path, format!("schema_version {v} unsupported, expected {SCHEMA_VERSION}")));
    }
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = read_json(path)?;
    m.validate(path)?;
    Ok(m)
}

pub fn load_annotations(path: &Path, manifest: &DatasetManifest) -> Result<AnnotationSet> {
    let a: AnnotationSet = read_json(path)?;
    a.validate(manifest, path)?;
    Ok(a)
}
