//! Several presets over one dataset, compared in a single table.

use std::fs;

use serde::Serialize;

use crate::error::{Error, Result};

use super::presets::presets;
use super::report::{format_delta, Percent};
use super::{evaluate_with, EvalOptions, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub order: usize,
    pub preset: String,
    pub description: String,
    pub accuracy_pct: Option<Percent>,
    /// Against the previous row; absent on the first row or when either side
    /// has no accuracy.
    pub delta: Option<String>,
    pub n_samples: usize,
    pub n_failed: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Order | Preset | Accuracy | Delta | Modification |\n");
        out.push_str("|---:|---|---:|---:|---|\n");
        for r in &self.rows {
            let accuracy = match (&r.accuracy_pct, &r.error) {
                (Some(p), _) => p.to_string(),
                (None, Some(_)) => "error".into(),
                (None, None) => "n/a".into(),
            };
            let description = match &r.error {
                Some(e) => format!("{} ({})", r.description, e.replace('|', "/")),
                None => r.description.clone(),
            };
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.order,
                r.preset,
                accuracy,
                r.delta.as_deref().unwrap_or(""),
                description
            ));
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(["order", "preset", "accuracy_pct", "delta", "n_samples", "n_failed", "error"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.order.to_string(),
                r.preset.clone(),
                r.accuracy_pct.map(|p| p.to_string()).unwrap_or_default(),
                r.delta.clone().unwrap_or_default(),
                r.n_samples.to_string(),
                r.n_failed.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// One evaluation per preset with the same dataset, seed, and backends.
///
/// Each preset writes into its own subdirectory of `base.output_dir`; the
/// memory journal is shared. Template and strategy overrides in `base` are
/// ignored so every row is the preset as shipped. A failing preset becomes
/// an error row and the suite moves on.
pub fn run_ablation_suite(base: &RunConfig, names: &[&str], options: &EvalOptions) -> Result<AblationTable> {
    let registry = presets();
    let catalog = names
        .iter()
        .map(|n| registry.get(n))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&base.output_dir).map_err(|e| Error::io(&base.output_dir, e))?;

    let mut table = AblationTable::default();
    let mut previous: Option<Percent> = None;
    for (i, preset) in catalog.iter().enumerate() {
        let mut config = base.clone();
        config.preset = preset.name.clone();
        config.template = None;
        config.strategy = None;
        config.output_dir = base.output_dir.join(&preset.name);
        config.memory_cache = Some(base.memory_cache_path());
        let mut row = AblationRow {
            order: i + 1,
            preset: preset.name.clone(),
            description: preset.description.clone(),
            accuracy_pct: None,
            delta: None,
            n_samples: 0,
            n_failed: 0,
            error: None,
        };
        match evaluate_with(config, options) {
            Ok(report) => {
                row.accuracy_pct = report.accuracy_pct;
                row.n_samples = report.n_samples;
                row.n_failed = report.n_failed;
            }
            Err(e) => {
                log::warn!("preset {}: {e}", preset.name);
                row.error = Some(e.to_string());
            }
        }
        if i > 0 {
            if let (Some(prev), Some(cur)) = (previous, row.accuracy_pct) {
                row.delta = Some(format_delta(prev, cur));
            }
        }
        previous = row.accuracy_pct;
        table.rows.push(row);
    }

    let md = base.output_dir.join("ablation.md");
    fs::write(&md, table.to_markdown()).map_err(|e| Error::io(&md, e))?;
    let csv_path = base.output_dir.join("ablation.csv");
    fs::write(&csv_path, table.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(order: usize, preset: &str, acc: Option<u32>, delta: Option<&str>) -> AblationRow {
        AblationRow {
            order,
            preset: preset.into(),
            description: format!("{preset} change"),
            accuracy_pct: acc.map(Percent),
            delta: delta.map(String::from),
            n_samples: 10,
            n_failed: 0,
            error: None,
        }
    }

    #[test]
    fn markdown_and_csv_shapes() {
        let table = AblationTable {
            rows: vec![row(1, "zero-shot", Some(4558), None), row(2, "four-shot", Some(4804), Some("+2.46"))],
        };
        let md = table.to_markdown();
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains("| 2 | four-shot | 48.04 | +2.46 | four-shot change |"), "{md}");
        let csv = table.to_csv().unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "1,zero-shot,45.58,,10,0,");
    }

    #[test]
    fn unknown_preset_is_rejected_up_front() {
        let dir = tempfile::tempdir().unwrap();
        let base = RunConfig::new(dir.path().join("d.json"), dir.path().join("out"));
        let err = run_ablation_suite(&base, &["zero-shot", "bogus"], &EvalOptions::default()).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(!dir.path().join("out").exists());
    }
}
