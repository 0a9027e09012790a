//! Stage two: few-shot multimodal planning prompt, model call, answer parsing.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{LazyLock, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::{
    Backend, ChatMessage, Detail, Image, ModelRequest, Part, RequestScope, Stage,
};
use crate::dataset::PlanningSample;
use crate::error::{Error, Result};
use crate::memory::{render_memory, terminate_torn_line, MemoryEntry};
use crate::sampler::{sample_frames, FrameStore, SamplingPolicy};

pub const REASK_TEXT: &str = "Reply with only the option letter.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub task_goal: String,
    pub memory_block: String,
    pub observation_description: String,
    pub choices: Vec<String>,
    pub reasoning: String,
    pub answer_index: usize,
}

impl FewShotExample {
    pub fn validate(&self) -> Result<()> {
        if self.answer_index >= self.choices.len() {
            return Err(Error::Config(format!(
                "few-shot example `{}`: answer_index {} out of range",
                self.task_goal, self.answer_index
            )));
        }
        if self.reasoning.trim().is_empty() {
            return Err(Error::Config(format!(
                "few-shot example `{}`: empty reasoning",
                self.task_goal
            )));
        }
        Ok(())
    }
}

const DEFAULT_SHOTS: &str = include_str!("../data/few_shot_v1.json");

/// The four shipped worked examples.
pub fn default_shots() -> Vec<FewShotExample> {
    serde_json::from_str(DEFAULT_SHOTS).expect("bundled few-shot examples parse")
}

pub fn load_shots(path: &Path) -> Result<Vec<FewShotExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let shots: Vec<FewShotExample> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    for s in &shots {
        s.validate()?;
    }
    Ok(shots)
}

pub const DEFAULT_SYSTEM_TEXT: &str = "You plan the next step of an everyday task seen from a \
first-person camera. You are given the task goal, a numbered list of the actions completed so \
far, the current observation, and candidate next actions. Choose the single candidate that best \
advances the task from the current state. Do not repeat an action that is already done just \
because it appears in the progress.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub version: String,
    pub system_text: String,
    /// Number of worked examples placed before the query.
    pub example_slots: usize,
    /// Ask for an `Observation:` description before the reasoning.
    pub require_observation_description: bool,
    /// Show the sampled progress frames next to the memory text.
    pub include_progress_frames: bool,
    pub observation_detail: Detail,
    pub progress_detail: Detail,
    pub max_tokens: u32,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            version: "plan-v1".into(),
            system_text: DEFAULT_SYSTEM_TEXT.into(),
            example_slots: 4,
            require_observation_description: true,
            include_progress_frames: false,
            observation_detail: Detail::High,
            progress_detail: Detail::Low,
            max_tokens: 512,
        }
    }
}

fn lettered(choices: &[String]) -> String {
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("({}) {}", PlanningSample::letter(i), c))
        .collect::<Vec<_>>()
        .join("\n")
}

fn context_block(goal: &str, memory_block: &str, choices: &[String]) -> String {
    format!(
        "Task goal: {goal}\n\nActions completed so far:\n{memory_block}\n\nCandidate next actions:\n{}",
        lettered(choices)
    )
}

fn instruction(describe: bool) -> &'static str {
    if describe {
        "First describe the current observation on a line starting with \"Observation:\". \
         Then explain which candidate should come next on a line starting with \"Reasoning:\". \
         Finish with a final line \"Answer: (X)\" where X is the letter of the chosen action."
    } else {
        "Explain which candidate should come next on a line starting with \"Reasoning:\". \
         Finish with a final line \"Answer: (X)\" where X is the letter of the chosen action."
    }
}

fn example_turns(shot: &FewShotExample, describe: bool) -> [ChatMessage; 2] {
    let observation = if describe {
        "Current observation: (image not included in this example)".to_string()
    } else {
        format!("Current observation: {}", shot.observation_description)
    };
    let user = format!(
        "{}\n\n{}\n\n{}",
        context_block(&shot.task_goal, &shot.memory_block, &shot.choices),
        observation,
        instruction(describe)
    );
    let letter = PlanningSample::letter(shot.answer_index);
    let mut reply = String::new();
    if describe {
        reply.push_str(&format!("Observation: {}\n", shot.observation_description));
    }
    reply.push_str(&format!("Reasoning: {}\nAnswer: ({letter})", shot.reasoning));
    [ChatMessage::user_text(user), ChatMessage::assistant(reply)]
}

/// Everything needed to assemble one planning request.
#[derive(Debug, Clone, Copy)]
pub struct PlanningPrompt<'a> {
    pub sample: &'a PlanningSample,
    pub memory: &'a [MemoryEntry],
    pub shots: &'a [FewShotExample],
    pub template: &'a PromptTemplate,
    pub observation: &'a Image,
    /// Sampled frames per progress segment, present iff the template asks for them.
    pub progress_frames: Option<&'a [Vec<Image>]>,
}

impl PlanningPrompt<'_> {
    /// System turn, one user/assistant pair per worked example (text only),
    /// then the query turn with the observation image.
    pub fn build(&self, model_id: &str, image_limit: Option<usize>) -> Result<ModelRequest> {
        let t = self.template;
        if self.shots.len() != t.example_slots {
            return Err(Error::Config(format!(
                "template `{}` wants {} examples, got {}",
                t.version,
                t.example_slots,
                self.shots.len()
            )));
        }
        if self.progress_frames.is_some() != t.include_progress_frames {
            return Err(Error::Config(format!(
                "template `{}`: progress frames must be supplied iff include_progress_frames",
                t.version
            )));
        }
        let describe = t.require_observation_description;
        let mut messages = vec![ChatMessage::system(t.system_text.clone())];
        for shot in self.shots {
            messages.extend(example_turns(shot, describe));
        }

        let s = self.sample;
        let mut parts = vec![Part::text(context_block(
            &s.task_goal,
            &render_memory(self.memory),
            &s.choices,
        ))];
        if let Some(frames) = self.progress_frames {
            parts.push(Part::text("Frames from the task progress video, oldest first:"));
            for (i, seg) in frames.iter().enumerate() {
                parts.push(Part::text(format!("Progress segment {}:", i + 1)));
                parts.extend(seg.iter().map(|img| Part::image(img.clone(), t.progress_detail)));
            }
        }
        parts.push(Part::text("Current observation:"));
        parts.push(Part::image(self.observation.clone(), t.observation_detail));
        parts.push(Part::text(instruction(describe)));
        messages.push(ChatMessage::user(parts));

        let mut request = ModelRequest::new(model_id, messages);
        request.max_tokens = t.max_tokens;
        if let Some(limit) = image_limit {
            let count = request.image_count();
            if count > limit {
                return Err(Error::TooManyImages { count, limit });
            }
        }
        Ok(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseMethod {
    LetterPattern,
    ExactChoiceMatch,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub index: Option<usize>,
    pub method: ParseMethod,
}

impl ParsedAnswer {
    pub const FAILURE: ParsedAnswer = ParsedAnswer {
        index: None,
        method: ParseMethod::None,
    };

    pub fn is_failure(&self) -> bool {
        self.index.is_none()
    }
}

static ANSWER_PAREN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i:\banswer\b)(?:\s*(?i:is))?\s*[:\-]?\s*[\(\[]([A-Za-z])[\)\]]").unwrap()
});
static ANSWER_BARE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)(?i:\banswer\b)(?:\s*(?i:is))?\s*[:\-]?\s*([A-Z])(?:$|[^A-Za-z0-9'])")
        .unwrap()
});
static PAREN_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Z])\)").unwrap());
static BARE_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^[ \t]*[\(\[]?([A-Za-z])[\)\]]?[ \t]*\.?[ \t]*$").unwrap()
});

/// Picks a choice index out of free-form model output. Total.
///
/// The last letter match wins among `Answer: (X)`, `Answer: X`, `(X)` and a
/// line holding only the letter, restricted to the first `choices.len()`
/// letters. Otherwise the last non-empty line is searched for a choice string
/// (case-insensitive, longest match; equal-length distinct matches fail).
pub fn parse_answer(raw_text: &str, choices: &[String]) -> ParsedAnswer {
    let n = choices.len().min(26);
    let mut best: Option<(usize, usize)> = None;
    for re in [&*ANSWER_PAREN, &*ANSWER_BARE, &*PAREN_LETTER, &*BARE_LINE] {
        for caps in re.captures_iter(raw_text) {
            let m = caps.get(1).expect("letter group");
            let c = m.as_str().chars().next().expect("one letter").to_ascii_uppercase();
            let idx = (c as u8 - b'A') as usize;
            if idx < n && best.is_none_or(|(pos, _)| m.start() > pos) {
                best = Some((m.start(), idx));
            }
        }
    }
    if let Some((_, index)) = best {
        return ParsedAnswer {
            index: Some(index),
            method: ParseMethod::LetterPattern,
        };
    }

    let Some(last) = raw_text.lines().rev().find(|l| !l.trim().is_empty()) else {
        return ParsedAnswer::FAILURE;
    };
    let last = last.to_lowercase();
    let mut hits: Vec<(usize, usize)> = choices
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let c = c.trim().to_lowercase();
            !c.is_empty() && last.contains(&c)
        })
        .map(|(i, c)| (c.trim().chars().count(), i))
        .collect();
    hits.sort_by_key(|h| std::cmp::Reverse(h.0));
    match hits.as_slice() {
        [] => ParsedAnswer::FAILURE,
        [(len, i), rest @ ..] => {
            let rival = rest
                .iter()
                .any(|(l, j)| l == len && !choices[*j].eq_ignore_ascii_case(&choices[*i]));
            if rival {
                ParsedAnswer::FAILURE
            } else {
                ParsedAnswer {
                    index: Some(*i),
                    method: ParseMethod::ExactChoiceMatch,
                }
            }
        }
    }
}

/// Text of the `Observation:` section, up to the reasoning or answer line.
pub fn observation_description(raw_text: &str) -> Option<String> {
    let label = |line: &str, name: &str| -> Option<String> {
        let l = line.trim().trim_start_matches(['*', '#', ' ']);
        let head = l.get(..name.len())?;
        if head.eq_ignore_ascii_case(name) {
            let rest = l[name.len()..].trim_start_matches('*');
            rest.strip_prefix(':')
                .map(|r| r.trim_start_matches('*').trim().to_string())
        } else {
            None
        }
    };
    let mut lines = raw_text.lines();
    let mut collected = loop {
        let line = lines.next()?;
        if let Some(rest) = label(line, "observation") {
            break vec![rest];
        }
    };
    for line in lines {
        if label(line, "reasoning").is_some() || label(line, "answer").is_some() {
            break;
        }
        collected.push(line.trim().to_string());
    }
    let text = collected
        .into_iter()
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    (!text.is_empty()).then_some(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningTranscript {
    pub sample_id: String,
    pub model_id: String,
    pub backend_id: String,
    pub run: String,
    pub raw_text: String,
    /// Reply to the letter-only re-ask, when the first reply did not parse.
    pub reask_text: Option<String>,
    pub observation_description: Option<String>,
    pub answer: ParsedAnswer,
    pub request_digest: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

/// Append-only JSON Lines log of planning transcripts.
#[derive(Debug)]
pub struct TranscriptJournal {
    path: PathBuf,
    writer: Mutex<File>,
}

impl TranscriptJournal {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        terminate_torn_line(&path, &mut writer)?;
        Ok(Self {
            path,
            writer: Mutex::new(writer),
        })
    }

    pub fn append(&self, transcript: &PlanningTranscript) -> Result<()> {
        let mut line = serde_json::to_string(transcript).expect("transcript serializes");
        line.push('\n');
        let mut w = self.writer.lock().expect("transcript journal poisoned");
        w.write_all(line.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn read_all(path: &Path) -> Result<Vec<PlanningTranscript>> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if let Ok(t) = serde_json::from_str(&line) {
                out.push(t);
            }
        }
        Ok(out)
    }
}

/// How one planning call is sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRun {
    pub label: String,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl PlanRun {
    pub fn greedy(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            temperature: 0.0,
            seed: None,
        }
    }
}

/// Shared planning context: prompt template, worked examples, frames.
#[derive(Debug, Clone, Copy)]
pub struct Planner<'a> {
    pub template: &'a PromptTemplate,
    pub shots: &'a [FewShotExample],
    pub store: &'a FrameStore,
    pub policy: &'a SamplingPolicy,
    pub journal: Option<&'a TranscriptJournal>,
}

impl Planner<'_> {
    /// Observation image and, when the template wants them, progress frames.
    pub fn images(&self, sample: &PlanningSample) -> Result<(Image, Option<Vec<Vec<Image>>>)> {
        let obs = self.store.resolve_ref(&sample.observation)?;
        let progress = if self.template.include_progress_frames {
            Some(
                sample
                    .segments
                    .iter()
                    .map(|seg| self.store.resolve(&sample_frames(seg, self.policy), &sample.video_id))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok((obs, progress))
    }

    /// Prompt, call, parse; one terse re-ask when the reply does not parse.
    pub fn plan(
        &self,
        sample: &PlanningSample,
        memory: &[MemoryEntry],
        backend: &dyn Backend,
        run: &PlanRun,
    ) -> Result<PlanningTranscript> {
        let annotate = |e: Error| e.annotate(&sample.sample_id, None);
        let (observation, progress) = self.images(sample).map_err(annotate)?;
        let prompt = PlanningPrompt {
            sample,
            memory,
            shots: self.shots,
            template: self.template,
            observation: &observation,
            progress_frames: progress.as_deref(),
        };
        let mut request = prompt
            .build(backend.model_id(), backend.max_images())
            .map_err(annotate)?;
        request.temperature = run.temperature;
        request.seed = run.seed;
        let mut scope = RequestScope::new(Stage::Plan, &sample.sample_id);
        scope.run = Some(run.label.clone());
        let request = request.with_scope(scope.clone());
        let request_digest = request.digest();

        let first = backend.complete(&request).map_err(annotate)?;
        let mut answer = parse_answer(&first.text, &sample.choices);
        let mut prompt_tokens = first.prompt_tokens;
        let mut completion_tokens = first.completion_tokens;
        let mut latency_ms = first.latency_ms;
        let mut reask_text = None;

        if answer.is_failure() {
            let mut reask = request.clone();
            let previous = if first.text.trim().is_empty() {
                "(no answer)".to_string()
            } else {
                first.text.clone()
            };
            reask.messages.push(ChatMessage::assistant(previous));
            reask.messages.push(ChatMessage::user_text(REASK_TEXT));
            scope.attempt = 1;
            reask.scope = Some(scope);
            let second = backend.complete(&reask).map_err(annotate)?;
            answer = parse_answer(&second.text, &sample.choices);
            prompt_tokens += second.prompt_tokens;
            completion_tokens += second.completion_tokens;
            latency_ms += second.latency_ms;
            reask_text = Some(second.text);
        }

        let transcript = PlanningTranscript {
            sample_id: sample.sample_id.clone(),
            model_id: backend.model_id().to_string(),
            backend_id: backend.id().to_string(),
            run: run.label.clone(),
            observation_description: observation_description(&first.text),
            raw_text: first.text,
            reask_text,
            answer,
            request_digest,
            prompt_tokens,
            completion_tokens,
            latency_ms,
        };
        if let Some(journal) = self.journal {
            journal.append(&transcript)?;
        }
        if transcript.answer.is_failure() {
            return Err(Error::UnparseableAfterRetry(sample.sample_id.clone()));
        }
        Ok(transcript)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn choices() -> Vec<String> {
        ["add garlic to food", "pick up chopping board", "stir food", "wash hands"]
            .map(String::from)
            .to_vec()
    }

    fn p(raw: &str) -> Option<usize> {
        parse_answer(raw, &choices()).index
    }

    #[test]
    fn letter_patterns() {
        let r = parse_answer("...therefore Answer: (B)", &choices());
        assert_eq!(r.index, Some(1));
        assert_eq!(r.method, ParseMethod::LetterPattern);
        assert_eq!(p("C"), Some(2));
        assert_eq!(p("The best is (A), not (B).\nAnswer: (A)"), Some(0));
        assert_eq!(p("answer is d"), None, "lowercase bare letters need brackets");
        assert_eq!(p("answer: (d)"), Some(3));
        assert_eq!(p("Answer: (E)"), None, "out of range");
        assert_eq!(p("Answer: B\n"), Some(1));
        assert_eq!(p("Answer: Because the board is held"), None);
    }

    #[test]
    fn choice_string_fallback() {
        let r = parse_answer("I think we should\nadd garlic to food next", &choices());
        assert_eq!(r.index, Some(0));
        assert_eq!(r.method, ParseMethod::ExactChoiceMatch);
        let rivals = ["cut onion", "cut bread"].map(String::from);
        assert!(parse_answer("cut onion or cut bread?", &rivals).is_failure());
        assert_eq!(
            parse_answer("then stir food in pan", &["stir food".into(), "stir food in pan".into()]).index,
            Some(1),
            "longest choice wins"
        );
        assert_eq!(p("I cannot decide."), None);
        assert_eq!(p(""), None);
        assert_eq!(parse_answer("I cannot decide.", &choices()), ParsedAnswer::FAILURE);
    }

    #[test]
    fn observation_section() {
        let raw = "Observation: A pan on the stove\nwith oil.\nReasoning: stir.\nAnswer: (C)";
        assert_eq!(
            observation_description(raw).as_deref(),
            Some("A pan on the stove with oil.")
        );
        assert_eq!(
            observation_description("**Observation:** a cup\nAnswer: (A)").as_deref(),
            Some("a cup")
        );
        assert_eq!(observation_description("Answer: (A)"), None);
    }

    #[test]
    fn shipped_shots_are_valid() {
        let shots = default_shots();
        assert_eq!(shots.len(), 4);
        for s in &shots {
            s.validate().unwrap();
        }
    }
}
