//! Per-segment frame timestamp selection and frame resolution.
//!
//! Frames live on disk as `{root}/{video_id}/{timestamp_ms}.jpg`. Missing
//! frames can be produced on demand by an external extractor command; the
//! core never decodes video itself.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize, Serializer};

use crate::dataset::{ActionSegment, FrameRef};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingScheme {
    /// Endpoints included, interior points evenly spaced (thirds for 4 frames).
    #[default]
    EvenlyInclusive,
    /// Endpoints included, interior points at the centres of equal bins
    /// (quartiles `d/4` and `3d/4` for 4 frames).
    InteriorQuartiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    pub count: usize,
    pub scheme: SamplingScheme,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            count: 4,
            scheme: SamplingScheme::EvenlyInclusive,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("sampling count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FramePlan {
    pub segment_index: usize,
    pub timestamps_s: Vec<f64>,
}

/// Timestamps to show the memory model for one segment. Pure.
///
/// A `count` of 0 is treated as 1; a single frame is taken at the segment start.
pub fn sample_frames(segment: &ActionSegment, policy: &SamplingPolicy) -> FramePlan {
    let n = policy.count.max(1);
    let (start, stop) = (segment.start_s, segment.stop_s);
    let d = stop - start;
    let timestamps_s = if n == 1 {
        vec![start]
    } else {
        let mut ts = Vec::with_capacity(n);
        ts.push(start);
        match policy.scheme {
            SamplingScheme::EvenlyInclusive => {
                let steps = (n - 1) as f64;
                ts.extend((1..n - 1).map(|i| start + d * i as f64 / steps));
            }
            SamplingScheme::InteriorQuartiles => {
                let bins = (2 * (n - 2)) as f64;
                ts.extend((1..n - 1).map(|k| start + d * (2 * k - 1) as f64 / bins));
            }
        }
        ts.push(stop);
        ts
    };
    FramePlan {
        segment_index: segment.index,
        timestamps_s,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detail {
    #[default]
    Low,
    High,
}

/// Encoded image bytes as read from the frame store. Never decoded.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    bytes: Arc<[u8]>,
    media_type: String,
}

impl Image {
    pub fn new(bytes: impl Into<Arc<[u8]>>, media_type: impl Into<String>) -> Self {
        Self {
            bytes: bytes.into(),
            media_type: media_type.into(),
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn media_type(&self) -> &str {
        &self.media_type
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.bytes)
    }

    fn media_type_for(path: &Path) -> &'static str {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("png") => "image/png",
            Some("webp") => "image/webp",
            Some("gif") => "image/gif",
            _ => "image/jpeg",
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(bytes, Self::media_type_for(path)))
    }
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Image({}, {} bytes, {})",
            self.media_type,
            self.bytes.len(),
            &self.digest()[..12]
        )
    }
}

/// Images serialize by digest only; bytes never end up in journals or goldens.
impl Serialize for Image {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Image", 2)?;
        s.serialize_field("media_type", &self.media_type)?;
        s.serialize_field("sha256", &self.digest())?;
        s.end()
    }
}

pub const DEFAULT_SNAP_TOLERANCE_S: f64 = 0.25;

/// Resolves [`FrameRef`]s to image bytes.
///
/// Safe to share between threads. Extraction of a given output file is
/// serialized through a per-file lock and lands via rename, so concurrent
/// requests for the same frame never observe a partial file.
#[derive(Debug)]
pub struct FrameStore {
    root: PathBuf,
    extractor_command: Option<String>,
    snap_tolerance_s: f64,
    key_locks: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
    extractions: AtomicUsize,
}

impl FrameStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            extractor_command: None,
            snap_tolerance_s: DEFAULT_SNAP_TOLERANCE_S,
            key_locks: Mutex::new(HashMap::new()),
            extractions: AtomicUsize::new(0),
        }
    }

    /// Command template with `{video}`, `{timestamp}` (seconds) and `{out}`
    /// placeholders, split on whitespace into argv (no shell involved).
    pub fn with_extractor(mut self, command: impl Into<String>) -> Self {
        self.extractor_command = Some(command.into());
        self
    }

    pub fn with_snap_tolerance(mut self, seconds: f64) -> Self {
        self.snap_tolerance_s = seconds.max(0.0);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Number of extractor invocations so far.
    pub fn extractions(&self) -> usize {
        self.extractions.load(Ordering::SeqCst)
    }

    pub fn frame_path(&self, video_id: &str, timestamp_s: f64) -> PathBuf {
        self.root
            .join(video_id)
            .join(format!("{}.jpg", timestamp_ms(timestamp_s)))
    }

    /// Path of an already-present file for `frame`, snapping timestamps to the
    /// nearest stored frame within the tolerance.
    pub fn locate(&self, frame: &FrameRef) -> Option<PathBuf> {
        if let Some(p) = &frame.path {
            let p = if p.is_absolute() { p.clone() } else { self.root.join(p) };
            if p.is_file() {
                return Some(p);
            }
        }
        let t = frame.timestamp_s?;
        let exact = self.frame_path(&frame.video_id, t);
        if exact.is_file() {
            return Some(exact);
        }
        self.snap(&frame.video_id, t)
    }

    fn snap(&self, video_id: &str, t: f64) -> Option<PathBuf> {
        let target = timestamp_ms(t) as i128;
        let tolerance = (self.snap_tolerance_s * 1000.0).round() as i128;
        let dir = self.root.join(video_id);
        let mut best: Option<(i128, i128, PathBuf)> = None;
        for entry in fs::read_dir(&dir).ok()?.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jpg") {
                continue;
            }
            let Some(ms) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok())
            else {
                continue;
            };
            let ms = ms as i128;
            let gap = (ms - target).abs();
            if gap > tolerance {
                continue;
            }
            let better = match &best {
                None => true,
                Some((g, m, _)) => gap < *g || (gap == *g && ms < *m),
            };
            if better {
                best = Some((gap, ms, path));
            }
        }
        best.map(|(_, _, p)| p)
    }

    pub fn resolve_ref(&self, frame: &FrameRef) -> Result<Image> {
        if let Some(path) = self.locate(frame) {
            return Image::read(&path);
        }
        let unresolvable = || Error::FrameUnresolvable {
            video_id: frame.video_id.clone(),
            timestamp_s: frame.timestamp_s.unwrap_or(f64::NAN),
        };
        match (&self.extractor_command, frame.timestamp_s) {
            (Some(cmd), Some(t)) => {
                let out = self.extract(cmd, &frame.video_id, t)?;
                Image::read(&out)
            }
            _ => Err(unresolvable()),
        }
    }

    /// One image per planned timestamp, in plan order.
    pub fn resolve(&self, plan: &FramePlan, video_id: &str) -> Result<Vec<Image>> {
        plan.timestamps_s
            .iter()
            .map(|&t| self.resolve_ref(&FrameRef::at(video_id, t)))
            .collect()
    }

    fn extract(&self, template: &str, video_id: &str, t: f64) -> Result<PathBuf> {
        let out = self.frame_path(video_id, t);
        let lock = {
            let mut locks = self.key_locks.lock().expect("frame lock map poisoned");
            locks.entry(out.clone()).or_default().clone()
        };
        let _guard = lock.lock().expect("frame lock poisoned");
        if out.is_file() {
            return Ok(out);
        }
        let dir = out.parent().expect("frame path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.{}.tmp.jpg",
            timestamp_ms(t),
            std::process::id()
        ));

        let timestamp = format!("{t:.3}");
        let tmp_str = tmp.to_string_lossy();
        let argv: Vec<String> = template
            .split_whitespace()
            .map(|tok| {
                tok.replace("{video}", video_id)
                    .replace("{timestamp}", &timestamp)
                    .replace("{out}", &tmp_str)
            })
            .collect();
        let Some((program, args)) = argv.split_first() else {
            return Err(Error::Config("empty extractor command".into()));
        };
        self.extractions.fetch_add(1, Ordering::SeqCst);
        log::debug!("extracting {video_id}@{timestamp}s via {program}");
        let output = Command::new(program)
            .args(args)
            .output()
            .map_err(|e| Error::ExtractorFailed {
                status: "spawn failed".into(),
                stderr: e.to_string(),
            })?;
        if !output.status.success() {
            let _ = fs::remove_file(&tmp);
            return Err(Error::ExtractorFailed {
                status: output.status.to_string(),
                stderr: excerpt(&String::from_utf8_lossy(&output.stderr)),
            });
        }
        if !tmp.is_file() {
            return Err(Error::ExtractorFailed {
                status: output.status.to_string(),
                stderr: format!("extractor wrote no file to {}", tmp.display()),
            });
        }
        fs::rename(&tmp, &out).map_err(|e| Error::io(&out, e))?;
        Ok(out)
    }
}

fn timestamp_ms(t: f64) -> u64 {
    (t * 1000.0).round().max(0.0) as u64
}

fn excerpt(s: &str) -> String {
    const KEEP: usize = 400;
    let s = s.trim();
    if s.len() <= KEEP {
        return s.to_string();
    }
    let mut start = s.len() - KEEP;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    format!("...{}", &s[start..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(start: f64, stop: f64) -> ActionSegment {
        ActionSegment {
            index: 0,
            start_s: start,
            stop_s: stop,
            narration: None,
        }
    }

    /// Independent oracle: linear interpolation between endpoints.
    fn lerp_oracle(start: f64, stop: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let w = i as f64 / (n - 1) as f64;
                (1.0 - w) * start + w * stop
            })
            .collect()
    }

    #[test]
    fn four_frames_thirds() {
        let p = SamplingPolicy::default();
        assert_eq!(
            sample_frames(&seg(0.0, 3.0), &p).timestamps_s,
            vec![0.0, 1.0, 2.0, 3.0]
        );
        assert_eq!(
            sample_frames(&seg(10.0, 11.5), &p).timestamps_s,
            vec![10.0, 10.5, 11.0, 11.5]
        );
        assert_eq!(sample_frames(&seg(5.0, 5.0), &p).timestamps_s, vec![5.0; 4]);
        assert_eq!(lerp_oracle(10.0, 11.5, 4), vec![10.0, 10.5, 11.0, 11.5]);
    }

    #[test]
    fn interior_quartiles() {
        let p = SamplingPolicy {
            count: 4,
            scheme: SamplingScheme::InteriorQuartiles,
        };
        assert_eq!(
            sample_frames(&seg(0.0, 4.0), &p).timestamps_s,
            vec![0.0, 1.0, 3.0, 4.0]
        );
    }

    #[test]
    fn small_counts() {
        let one = SamplingPolicy {
            count: 1,
            ..Default::default()
        };
        assert_eq!(sample_frames(&seg(2.0, 6.0), &one).timestamps_s, vec![2.0]);
        let two = SamplingPolicy {
            count: 2,
            ..Default::default()
        };
        assert_eq!(sample_frames(&seg(2.0, 6.0), &two).timestamps_s, vec![2.0, 6.0]);
        assert!(SamplingPolicy { count: 0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn matches_interpolation_oracle(start in 0.0f64..10_000.0, len in 0.0f64..600.0, n in 2usize..12) {
            let s = seg(start, start + len);
            let plan = sample_frames(&s, &SamplingPolicy { count: n, ..Default::default() });
            let oracle = lerp_oracle(s.start_s, s.stop_s, n);
            prop_assert_eq!(plan.timestamps_s.len(), n);
            prop_assert_eq!(plan.timestamps_s[0], s.start_s);
            prop_assert_eq!(plan.timestamps_s[n - 1], s.stop_s);
            for (a, b) in plan.timestamps_s.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            for w in plan.timestamps_s.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn snaps_to_nearest_stored_frame() {
        let dir = tempfile::tempdir().unwrap();
        let vid = dir.path().join("v1");
        fs::create_dir_all(&vid).unwrap();
        fs::write(vid.join("1000.jpg"), b"a").unwrap();
        fs::write(vid.join("1200.jpg"), b"b").unwrap();
        fs::write(vid.join("notes.txt"), b"x").unwrap();
        let store = FrameStore::new(dir.path());
        let img = store.resolve_ref(&FrameRef::at("v1", 1.09)).unwrap();
        assert_eq!(img.bytes(), b"a");
        let img = store.resolve_ref(&FrameRef::at("v1", 1.1)).unwrap();
        assert_eq!(img.bytes(), b"a", "ties go to the earlier frame");
        let img = store.resolve_ref(&FrameRef::at("v1", 1.3)).unwrap();
        assert_eq!(img.bytes(), b"b");
        assert!(matches!(
            store.resolve_ref(&FrameRef::at("v1", 2.0)),
            Err(Error::FrameUnresolvable { .. })
        ));
        let tight = FrameStore::new(dir.path()).with_snap_tolerance(0.0);
        assert!(tight.resolve_ref(&FrameRef::at("v1", 1.09)).is_err());
    }

    #[test]
    fn explicit_paths_resolve_relative_to_root() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("obs.png"), b"png").unwrap();
        let store = FrameStore::new(dir.path());
        let frame = FrameRef {
            video_id: "v".into(),
            timestamp_s: None,
            path: Some("obs.png".into()),
        };
        let img = store.resolve_ref(&frame).unwrap();
        assert_eq!(img.media_type(), "image/png");
    }

    #[test]
    fn image_serializes_by_digest() {
        let img = Image::new(b"abc".to_vec(), "image/jpeg");
        let v = serde_json::to_value(&img).unwrap();
        assert_eq!(
            v["sha256"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(v.get("bytes").is_none());
    }
}
