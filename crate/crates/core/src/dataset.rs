//! Multiple-choice planning questions and their frame references.
//!
//! The on-disk format is a single JSON document:
//!
//! ```json
//! {"name": "...", "frame_root": "...", "samples": [
//!   {"sample_id": "...", "task_goal": "...", "video_id": "...",
//!    "segments": [{"start_s": 0.0, "stop_s": 3.0, "narration": null}],
//!    "observation": {"timestamp_s": 3.5, "path": null},
//!    "choices": ["...", "..."], "gold": 1}
//! ]}
//! ```
//!
//! Loading validates every sample and assigns segment indices; the in-memory
//! manifest is immutable afterwards.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{sample_frames, FrameStore, SamplingPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSegment {
    pub index: usize,
    pub start_s: f64,
    pub stop_s: f64,
    /// Gold caption when available. Never put into model prompts; only the
    /// oracle mock reads it.
    pub narration: Option<String>,
}

impl ActionSegment {
    pub fn duration_s(&self) -> f64 {
        self.stop_s - self.start_s
    }
}

/// A single image reference: either a timestamp in a video, an explicit file,
/// or both (the path wins when present).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRef {
    pub video_id: String,
    pub timestamp_s: Option<f64>,
    pub path: Option<PathBuf>,
}

impl FrameRef {
    pub fn at(video_id: impl Into<String>, timestamp_s: f64) -> Self {
        Self {
            video_id: video_id.into(),
            timestamp_s: Some(timestamp_s),
            path: None,
        }
    }
}

impl std::fmt::Display for FrameRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (&self.path, self.timestamp_s) {
            (Some(p), _) => write!(f, "{}:{}", self.video_id, p.display()),
            (None, Some(t)) => write!(f, "{}@{:.3}s", self.video_id, t),
            (None, None) => write!(f, "{}@?", self.video_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanningSample {
    pub sample_id: String,
    pub task_goal: String,
    pub video_id: String,
    pub segments: Vec<ActionSegment>,
    pub observation: FrameRef,
    pub choices: Vec<String>,
    pub gold: Option<usize>,
}

impl PlanningSample {
    /// `A`, `B`, ... for choice index `i`.
    pub fn letter(i: usize) -> char {
        debug_assert!(i < 26);
        (b'A' + i as u8) as char
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub frame_root: PathBuf,
    pub samples: Vec<PlanningSample>,
}

impl DatasetManifest {
    pub fn get(&self, sample_id: &str) -> Option<&PlanningSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DatasetFile::from(self)).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Parses and validates a manifest from its JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile =
            serde_json::from_str(text).map_err(|e| Error::json("dataset file", e))?;
        file.validate()
    }
}

pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DatasetFile =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    file.validate()
}

/// Every frame the pipeline will need (sampled progress frames and the
/// observation) that the store cannot serve from disk right now.
///
/// Frames that an extractor could still produce are reported as missing: an
/// empty result means the dataset runs fully offline.
pub fn validate_frames(
    manifest: &DatasetManifest,
    store: &FrameStore,
    policy: &SamplingPolicy,
) -> Vec<FrameRef> {
    let mut missing = Vec::new();
    for sample in &manifest.samples {
        for segment in &sample.segments {
            for t in sample_frames(segment, policy).timestamps_s {
                let frame = FrameRef::at(&sample.video_id, t);
                if store.locate(&frame).is_none() && !missing.contains(&frame) {
                    missing.push(frame);
                }
            }
        }
        if store.locate(&sample.observation).is_none() && !missing.contains(&sample.observation)
        {
            missing.push(sample.observation.clone());
        }
    }
    missing
}

// ---------------------------------------------------------------------------
// file format

#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    name: String,
    frame_root: PathBuf,
    samples: Vec<SampleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    sample_id: String,
    task_goal: String,
    video_id: String,
    segments: Vec<SegmentRecord>,
    observation: ObservationRecord,
    choices: Vec<String>,
    gold: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentRecord {
    start_s: f64,
    stop_s: f64,
    #[serde(default)]
    narration: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRecord {
    #[serde(default)]
    timestamp_s: Option<f64>,
    #[serde(default)]
    path: Option<PathBuf>,
}

impl DatasetFile {
    fn validate(self) -> Result<DatasetManifest> {
        let mut seen = HashSet::new();
        let mut samples = Vec::with_capacity(self.samples.len());
        for record in self.samples {
            if !seen.insert(record.sample_id.clone()) {
                return Err(Error::DuplicateId(record.sample_id));
            }
            samples.push(record.validate()?);
        }
        Ok(DatasetManifest {
            name: self.name,
            frame_root: self.frame_root,
            samples,
        })
    }
}

impl SampleRecord {
    fn validate(self) -> Result<PlanningSample> {
        let id = self.sample_id.as_str();
        if id.is_empty() {
            return Err(Error::schema(id, "sample_id", "must not be empty"));
        }
        if self.choices.len() < 2 {
            return Err(Error::schema(
                id,
                "choices",
                format!("need at least 2 choices, got {}", self.choices.len()),
            ));
        }
        if self.choices.len() > 26 {
            return Err(Error::schema(id, "choices", "at most 26 choices are supported"));
        }
        let gold = match self.gold {
            None => None,
            Some(g) if g >= 0 && (g as usize) < self.choices.len() => Some(g as usize),
            Some(g) => {
                return Err(Error::schema(
                    id,
                    "gold",
                    format!("index {g} out of range for {} choices", self.choices.len()),
                ))
            }
        };

        let mut segments = Vec::with_capacity(self.segments.len());
        let mut prev_start = f64::NEG_INFINITY;
        for (index, seg) in self.segments.into_iter().enumerate() {
            let field = format!("segments[{index}]");
            if !(seg.start_s.is_finite() && seg.stop_s.is_finite()) {
                return Err(Error::schema(id, &field, "bounds must be finite"));
            }
            if seg.start_s < 0.0 {
                return Err(Error::schema(id, &field, "start_s must be >= 0"));
            }
            if seg.stop_s < seg.start_s {
                return Err(Error::schema(id, &field, "stop_s must be >= start_s"));
            }
            if seg.start_s < prev_start {
                return Err(Error::schema(id, &field, "segments must be sorted by start_s"));
            }
            prev_start = seg.start_s;
            segments.push(ActionSegment {
                index,
                start_s: seg.start_s,
                stop_s: seg.stop_s,
                narration: seg.narration,
            });
        }

        let obs = self.observation;
        match (obs.timestamp_s, &obs.path) {
            (None, None) => {
                return Err(Error::schema(
                    id,
                    "observation",
                    "needs a timestamp_s or a path",
                ))
            }
            (Some(t), _) => {
                if !t.is_finite() || t < 0.0 {
                    return Err(Error::schema(id, "observation.timestamp_s", "must be >= 0"));
                }
                // The observation is the present moment, not part of the progress video.
                if let Some(last) = segments.last() {
                    if t < last.stop_s {
                        return Err(Error::schema(
                            id,
                            "observation.timestamp_s",
                            format!(
                                "{t} falls inside the task progress (last segment ends at {})",
                                last.stop_s
                            ),
                        ));
                    }
                }
            }
            (None, Some(_)) => {}
        }

        Ok(PlanningSample {
            observation: FrameRef {
                video_id: self.video_id.clone(),
                timestamp_s: obs.timestamp_s,
                path: obs.path,
            },
            sample_id: self.sample_id,
            task_goal: self.task_goal,
            video_id: self.video_id,
            segments,
            choices: self.choices,
            gold,
        })
    }
}

impl From<&DatasetManifest> for DatasetFile {
    fn from(m: &DatasetManifest) -> Self {
        DatasetFile {
            name: m.name.clone(),
            frame_root: m.frame_root.clone(),
            samples: m
                .samples
                .iter()
                .map(|s| SampleRecord {
                    sample_id: s.sample_id.clone(),
                    task_goal: s.task_goal.clone(),
                    video_id: s.video_id.clone(),
                    segments: s
                        .segments
                        .iter()
                        .map(|g| SegmentRecord {
                            start_s: g.start_s,
                            stop_s: g.stop_s,
                            narration: g.narration.clone(),
                        })
                        .collect(),
                    observation: ObservationRecord {
                        timestamp_s: s.observation.timestamp_s,
                        path: s.observation.path.clone(),
                    },
                    choices: s.choices.clone(),
                    gold: s.gold.map(|g| g as i64),
                })
                .collect(),
        }
    }
}
