//! Per-sample results, accuracy, and the files a finished run leaves behind.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::PlanningSample;
use crate::error::{Error, Result};

/// A percentage held in basis points so rounding happens once, in integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent(pub u32);

impl Percent {
    /// `100 * num / den` rounded half-up to two decimals. `None` when `den`
    /// is zero.
    pub fn ratio(num: usize, den: usize) -> Option<Self> {
        if den == 0 {
            return None;
        }
        let (num, den) = (num as u64, den as u64);
        Some(Percent(((20_000 * num + den) / (2 * den)) as u32))
    }

    pub fn basis_points(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Percent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !(0.0..=100.0).contains(&v) {
            return Err(serde::de::Error::custom(format!("percentage out of range: {v}")));
        }
        Ok(Percent((v * 100.0).round() as u32))
    }
}

/// Signed difference between two percentages, e.g. `+2.46`.
pub fn format_delta(from: Percent, to: Percent) -> String {
    let d = i64::from(to.0) - i64::from(from.0);
    let sign = if d < 0 { '-' } else { '+' };
    format!("{sign}{}.{:02}", d.abs() / 100, d.abs() % 100)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub final_index: Option<usize>,
    pub answer_letter: Option<char>,
    pub gold: Option<usize>,
    /// Present exactly when `gold` is; unanswered labeled samples are wrong.
    pub correct: Option<bool>,
    /// Request digests of every planning call that fed the decision.
    pub transcripts: Vec<String>,
    pub tie_broken: bool,
    pub judge_called: bool,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    pub latency_ms: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl SampleResult {
    pub fn new(sample: &PlanningSample) -> Self {
        Self {
            sample_id: sample.sample_id.clone(),
            final_index: None,
            answer_letter: None,
            gold: sample.gold,
            correct: sample.gold.map(|_| false),
            transcripts: Vec::new(),
            tie_broken: false,
            judge_called: false,
            errors: Vec::new(),
            warnings: Vec::new(),
            latency_ms: 0,
            prompt_tokens: 0,
            completion_tokens: 0,
        }
    }

    pub fn answer(&mut self, index: usize) {
        self.final_index = Some(index);
        self.answer_letter = Some(PlanningSample::letter(index));
        self.correct = self.gold.map(|g| g == index);
    }

    pub fn is_answered(&self) -> bool {
        self.final_index.is_some()
    }
}

/// Accuracy over gold-labeled samples; absent when none are labeled.
pub fn compute_accuracy(results: &[SampleResult]) -> Option<Percent> {
    let labeled = results.iter().filter(|r| r.gold.is_some()).count();
    let correct = results.iter().filter(|r| r.correct == Some(true)).count();
    Percent::ratio(correct, labeled)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub judge_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_fingerprint: String,
    pub dataset: String,
    pub preset: String,
    pub n_samples: usize,
    pub n_answered: usize,
    pub n_failed: usize,
    pub n_gold_labeled: usize,
    pub n_correct: usize,
    pub accuracy_pct: Option<Percent>,
    pub cost: Cost,
    pub wall_time_ms: u64,
    pub started_at: String,
    pub finished_at: String,
    /// Sorted by `sample_id`.
    pub per_sample: Vec<SampleResult>,
}

impl EvaluationReport {
    pub fn assemble(
        config_fingerprint: String,
        dataset: String,
        preset: String,
        mut per_sample: Vec<SampleResult>,
    ) -> Self {
        per_sample.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let n_answered = per_sample.iter().filter(|r| r.is_answered()).count();
        let cost = Cost {
            prompt_tokens: per_sample.iter().map(|r| r.prompt_tokens).sum(),
            completion_tokens: per_sample.iter().map(|r| r.completion_tokens).sum(),
            judge_calls: per_sample.iter().filter(|r| r.judge_called).count(),
        };
        Self {
            config_fingerprint,
            dataset,
            preset,
            n_samples: per_sample.len(),
            n_answered,
            n_failed: per_sample.len() - n_answered,
            n_gold_labeled: per_sample.iter().filter(|r| r.gold.is_some()).count(),
            n_correct: per_sample.iter().filter(|r| r.correct == Some(true)).count(),
            accuracy_pct: compute_accuracy(&per_sample),
            cost,
            wall_time_ms: 0,
            started_at: String::new(),
            finished_at: String::new(),
            per_sample,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// The report with run-to-run noise (clock readings, latencies) zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_time_ms = 0;
        r.started_at.clear();
        r.finished_at.clear();
        for s in &mut r.per_sample {
            s.latency_ms = 0;
        }
        r
    }

    /// One row per sample.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record([
            "sample_id",
            "answer",
            "gold",
            "correct",
            "errors",
            "prompt_tokens",
            "completion_tokens",
        ])
        .map_err(csv_err)?;
        for r in &self.per_sample {
            let opt = |v: Option<String>| v.unwrap_or_default();
            w.write_record([
                r.sample_id.clone(),
                opt(r.answer_letter.map(String::from)),
                opt(r.gold.map(|g| PlanningSample::letter(g).to_string())),
                opt(r.correct.map(|c| c.to_string())),
                r.errors.join("; "),
                r.prompt_tokens.to_string(),
                r.completion_tokens.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("report.json", self.to_json())?;
        write("summary.csv", self.summary_csv()?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub answer_letter: char,
    /// Set when the letter is the fallback rather than a model answer.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

pub fn predictions(report: &EvaluationReport, fallback_letter: char) -> Vec<Prediction> {
    let mut out: Vec<Prediction> = report
        .per_sample
        .iter()
        .map(|r| Prediction {
            sample_id: r.sample_id.clone(),
            answer_letter: r.answer_letter.unwrap_or(fallback_letter),
            flagged: r.answer_letter.is_none(),
        })
        .collect();
    out.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    out
}

/// Writes the submission list, one prediction per line.
pub fn export_predictions(report: &EvaluationReport, fallback_letter: char, path: &Path) -> Result<()> {
    let preds = predictions(report, fallback_letter);
    let mut text = String::from("[");
    for (i, p) in preds.iter().enumerate() {
        text.push_str(if i == 0 { "\n  " } else { ",\n  " });
        text.push_str(&serde_json::to_string(p).expect("prediction serializes"));
    }
    text.push_str(if preds.is_empty() { "]\n" } else { "\n]\n" });
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
