//! Stage one: turn each progress segment into a one-sentence action memory.
//!
//! Extracted sentences are kept in an append-only JSON Lines journal so
//! repeated runs (and resumed runs) never pay for the same segment twice.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, ChatMessage, Detail, ModelRequest, Part, RequestScope, Stage};
use crate::dataset::{ActionSegment, PlanningSample};
use crate::error::{Error, Result};
use crate::sampler::{sample_frames, FrameStore, SamplingPolicy};

pub const MAX_SENTENCE_CHARS: usize = 200;
pub const EMPTY_MEMORY: &str = "No actions have been taken yet.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub video_id: String,
    pub segment_index: usize,
    pub start_s: f64,
    pub stop_s: f64,
    pub sentence: String,
    pub model_id: String,
    pub prompt_version: String,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemoryKey {
    pub video_id: String,
    pub segment_index: usize,
    pub start_ms: u64,
    pub stop_ms: u64,
    pub model_id: String,
    pub prompt_version: String,
}

fn ms(t: f64) -> u64 {
    (t * 1000.0).round().max(0.0) as u64
}

impl MemoryKey {
    pub fn new(video_id: &str, segment: &ActionSegment, model_id: &str, prompt_version: &str) -> Self {
        Self {
            video_id: video_id.to_string(),
            segment_index: segment.index,
            start_ms: ms(segment.start_s),
            stop_ms: ms(segment.stop_s),
            model_id: model_id.to_string(),
            prompt_version: prompt_version.to_string(),
        }
    }
}

impl MemoryEntry {
    pub fn key(&self) -> MemoryKey {
        MemoryKey {
            video_id: self.video_id.clone(),
            segment_index: self.segment_index,
            start_ms: ms(self.start_s),
            stop_ms: ms(self.stop_s),
            model_id: self.model_id.clone(),
            prompt_version: self.prompt_version.clone(),
        }
    }
}

/// Versioned memory-extraction prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryTemplate {
    pub version: String,
    pub system_text: String,
    pub instruction: String,
    pub detail: Detail,
    pub max_tokens: u32,
}

impl Default for MemoryTemplate {
    fn default() -> Self {
        Self {
            version: "memory-v1".into(),
            system_text: "You watch short first-person video clips of everyday tasks and \
                          report what the camera wearer does."
                .into(),
            instruction: "The following frames are taken, in order, from one short clip: the \
                          first frame, two evenly spaced frames, and the last frame. In a single \
                          short sentence, state the action the camera wearer performs in this \
                          clip, naming the object involved (for example: \"Pick up the knife.\"). \
                          Output only that sentence."
                .into(),
            detail: Detail::Low,
            max_tokens: 60,
        }
    }
}

/// Append-only journal of [`MemoryEntry`] lines with an in-memory index.
///
/// Reads are concurrent; appends are serialized. Later lines win over earlier
/// lines with the same key, so reloading reproduces the index exactly.
#[derive(Debug)]
pub struct MemoryCache {
    path: PathBuf,
    index: RwLock<HashMap<MemoryKey, MemoryEntry>>,
    writer: Mutex<File>,
    inflight: Mutex<HashMap<MemoryKey, Arc<Mutex<()>>>>,
}

impl MemoryCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let index = Self::read_journal(&path)?;
        let mut writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        terminate_torn_line(&path, &mut writer)?;
        Ok(Self {
            path,
            index: RwLock::new(index),
            writer: Mutex::new(writer),
            inflight: Mutex::new(HashMap::new()),
        })
    }

    fn read_journal(path: &Path) -> Result<HashMap<MemoryKey, MemoryEntry>> {
        let mut index = HashMap::new();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(index),
            Err(e) => return Err(Error::io(path, e)),
        };
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<MemoryEntry>(&line) {
                Ok(entry) => {
                    index.insert(entry.key(), entry);
                }
                // A torn final line from an interrupted write.
                Err(e) => log::warn!("{}:{}: skipping unreadable entry: {e}", path.display(), n + 1),
            }
        }
        Ok(index)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("memory index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &MemoryKey) -> Option<MemoryEntry> {
        self.index
            .read()
            .expect("memory index poisoned")
            .get(key)
            .cloned()
    }

    /// Persists `entry` to the journal, then makes it visible in the index.
    pub fn append(&self, entry: MemoryEntry) -> Result<()> {
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        {
            let mut w = self.writer.lock().expect("memory journal poisoned");
            w.write_all(line.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        self.index
            .write()
            .expect("memory index poisoned")
            .insert(entry.key(), entry);
        Ok(())
    }

    /// Rewrites the journal with one line per live key, sorted by key.
    pub fn compact(&self) -> Result<usize> {
        let mut w = self.writer.lock().expect("memory journal poisoned");
        let index = self.index.read().expect("memory index poisoned");
        let mut entries: Vec<_> = index.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut text = String::new();
        for (_, e) in &entries {
            text.push_str(&serde_json::to_string(e).expect("entry serializes"));
            text.push('\n');
        }
        let tmp = self.path.with_extension("jsonl.compact");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| Error::io(&self.path, e))?;
        *w = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(entries.len())
    }

    fn key_lock(&self, key: &MemoryKey) -> Arc<Mutex<()>> {
        self.inflight
            .lock()
            .expect("inflight map poisoned")
            .entry(key.clone())
            .or_default()
            .clone()
    }
}

/// Makes sure the next append starts on a fresh line.
pub(crate) fn terminate_torn_line(path: &Path, writer: &mut File) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.last().is_some_and(|b| *b != b'\n') {
        writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn strip_line_prefix(mut line: &str) -> &str {
    loop {
        let before = line;
        line = line.trim_start();
        line = line.trim_start_matches(['#', '>', '-', '+', '•']);
        let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits > 0 {
            let rest = &line[digits..];
            if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
                line = r;
            }
        }
        if line == before {
            return line;
        }
    }
}

const QUOTES: [char; 6] = ['"', '\'', '“', '”', '‘', '’'];

/// Reduces model output to one sentence ending in a period.
///
/// Markdown markers and list prefixes are dropped, whitespace collapsed, the
/// first sentence kept, and the result capped at [`MAX_SENTENCE_CHARS`].
/// Returns `None` when nothing usable is left. Idempotent.
pub fn normalize_sentence(raw: &str) -> Option<String> {
    let cleaned: String = raw.chars().filter(|c| !matches!(c, '*' | '`')).collect();
    let joined = cleaned
        .lines()
        .map(strip_line_prefix)
        .filter(|l| !l.trim().is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    let mut text = joined.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let next = strip_line_prefix(text.trim_start_matches(QUOTES).trim_start()).to_string();
        if next == text {
            break;
        }
        text = next;
    }

    let chars: Vec<char> = text.chars().collect();
    let cut = (0..chars.len())
        .find(|&i| is_terminator(chars[i]) && chars.get(i + 1).is_none_or(|c| c.is_whitespace()))
        .unwrap_or(chars.len());
    let trim_tail = |s: &str| -> String {
        s.trim_end_matches(|c: char| {
            c.is_whitespace() || is_terminator(c) || matches!(c, ',' | ';' | ':') || QUOTES.contains(&c)
        })
        .to_string()
    };
    let mut sentence = trim_tail(&chars[..cut].iter().collect::<String>());
    if sentence.chars().count() > MAX_SENTENCE_CHARS - 1 {
        let capped: String = sentence.chars().take(MAX_SENTENCE_CHARS - 1).collect();
        let at_word = match capped.rfind(' ') {
            Some(i) if i > 0 => capped[..i].to_string(),
            _ => capped,
        };
        sentence = trim_tail(&at_word);
    }
    if sentence.is_empty() || !sentence.chars().any(char::is_alphanumeric) {
        return None;
    }
    sentence.push('.');
    Some(sentence)
}

/// One memory sentence per segment of `sample`, in segment order.
///
/// The cache is consulted before any frame is read or model called; new
/// entries are journaled before this returns.
pub fn extract_memory(
    sample: &PlanningSample,
    backend: &dyn Backend,
    store: &FrameStore,
    policy: &SamplingPolicy,
    cache: &MemoryCache,
    template: &MemoryTemplate,
) -> Result<Vec<MemoryEntry>> {
    let model_id = backend.model_id();
    let mut entries = Vec::with_capacity(sample.segments.len());
    for segment in &sample.segments {
        let key = MemoryKey::new(&sample.video_id, segment, model_id, &template.version);
        if let Some(hit) = cache.get(&key) {
            entries.push(hit);
            continue;
        }
        let lock = cache.key_lock(&key);
        let _guard = lock.lock().expect("memory key lock poisoned");
        if let Some(hit) = cache.get(&key) {
            entries.push(hit);
            continue;
        }
        let annotate = |e: Error| e.annotate(&sample.sample_id, Some(segment.index));
        let plan = sample_frames(segment, policy);
        let frames = store.resolve(&plan, &sample.video_id).map_err(annotate)?;

        let mut parts = vec![Part::text(template.instruction.clone())];
        parts.extend(frames.into_iter().map(|img| Part::image(img, template.detail)));
        let mut request = ModelRequest::new(
            model_id,
            vec![
                ChatMessage::system(template.system_text.clone()),
                ChatMessage::user(parts),
            ],
        );
        request.temperature = 0.0;
        request.max_tokens = template.max_tokens;
        let mut scope = RequestScope::new(Stage::Memory, &sample.sample_id);
        scope.segment_index = Some(segment.index);
        let request = request.with_scope(scope);

        let response = backend.complete(&request).map_err(annotate)?;
        let sentence = normalize_sentence(&response.text).ok_or_else(|| Error::EmptyExtraction {
            sample_id: sample.sample_id.clone(),
            segment_index: segment.index,
        })?;
        let entry = MemoryEntry {
            video_id: sample.video_id.clone(),
            segment_index: segment.index,
            start_s: segment.start_s,
            stop_s: segment.stop_s,
            sentence,
            model_id: model_id.to_string(),
            prompt_version: template.version.clone(),
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        cache.append(entry.clone())?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Numbered task-progress block fed to the planner.
pub fn render_memory(entries: &[MemoryEntry]) -> String {
    if entries.is_empty() {
        return EMPTY_MEMORY.to_string();
    }
    let mut ordered: Vec<&MemoryEntry> = entries.iter().collect();
    ordered.sort_by_key(|e| e.segment_index);
    ordered
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. {}", i + 1, e.sentence))
        .collect::<Vec<_>>()
        .join("\n")
}
