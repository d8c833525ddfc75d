//! Dataset-level evaluation: per-configuration accuracy tables, combined
//! accuracy ladders, threshold coverage, and confidence histograms.
//!
//! `evaluate` runs one sweep per question and aggregates accuracies; the
//! combined rows apply the optimizer's highest-confidence selection over
//! record subsets (per window, across windows, across providers). Reports
//! serialize deterministically to JSON or a CSV table whose rows are chunk
//! numbers and columns are window sizes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::write_atomic;
use crate::inference::{
    assemble_prompt, normalize_confidence, ConfidenceResult, InferenceError, InferenceRequest,
    Label, MCQuestion,
};
use crate::optimizer::{
    best_record, iterate_grid, sweep, OptimizerError, SweepDeps, SweepGrid, SweepMethod,
    SweepResult,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset {path} line {line}: {detail}")]
    BadDataset {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("dataset {path} contains no questions")]
    EmptyDataset { path: String },
    #[error("questions missing gold labels: {0:?}")]
    MissingGold(Vec<String>),
    #[error("question `{qid}`: {source}")]
    Question {
        qid: String,
        #[source]
        source: OptimizerError,
    },
    #[error("question `{qid}`: {source}")]
    NoRag {
        qid: String,
        #[source]
        source: InferenceError,
    },
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("unknown report format `{0}` (expected `json` or `csv`)")]
    UnknownFormat(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct DatasetRecord {
    qid: String,
    question: String,
    options: BTreeMap<String, String>,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    category: Option<String>,
}

/// Load a JSONL dataset of
/// `{"qid", "question", "options": {"A": ...}, "answer"?, "category"?}`.
/// Malformed lines are reported with their line number; duplicate qids and
/// empty datasets are errors.
pub fn load_dataset(path: &Path) -> Result<Vec<MCQuestion>, EvalError> {
    let file = fs::File::open(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let bad = |line: usize, detail: String| EvalError::BadDataset {
        path: path.display().to_string(),
        line,
        detail,
    };
    let mut questions = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| bad(lineno, e.to_string()))?;
        let mut options = BTreeMap::new();
        for (key, text) in record.options {
            let label = Label::try_from(key).map_err(|e| bad(lineno, e))?;
            options.insert(label, text);
        }
        let gold = match record.answer {
            Some(ans) => Some(
                Label::try_from(ans).map_err(|e| bad(lineno, format!("bad answer label: {e}")))?,
            ),
            None => None,
        };
        if !seen.insert(record.qid.clone()) {
            return Err(bad(lineno, format!("duplicate qid `{}`", record.qid)));
        }
        let mut question = MCQuestion::new(record.qid, record.question, options, gold)
            .map_err(|e| bad(lineno, e.to_string()))?;
        question.category = record.category;
        questions.push(question);
    }
    if questions.is_empty() {
        return Err(EvalError::EmptyDataset {
            path: path.display().to_string(),
        });
    }
    Ok(questions)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Run header recorded into emitted reports for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub method: SweepMethod,
    pub grid: SweepGrid,
    pub budget: usize,
    /// Explicit seeds by role (e.g. local embedder name -> seed).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub seeds: BTreeMap<String, u64>,
}

/// Accuracy of one grid cell.
///
/// `answered` counts the questions that actually visited this configuration
/// (threshold sweeps may exit before reaching it); `accuracy` is the
/// fraction of *all* questions this configuration answered correctly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigAccuracy {
    pub provider: String,
    pub k: usize,
    pub window: usize,
    pub answered: usize,
    pub accuracy: f64,
}

/// The accuracy table: one cell per grid configuration plus the combined
/// ladder and the no-context baseline. Combined per-window and all-window
/// rows are computed over the first provider in the grid; the all-provider
/// row spans everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ReportMeta>,
    pub n_questions: usize,
    pub per_config_accuracy: Vec<ConfigAccuracy>,
    /// window size -> accuracy of best-confidence selection over that
    /// window's configs (first provider).
    pub combined_per_window: BTreeMap<usize, f64>,
    pub combined_all_windows: f64,
    pub combined_all_providers: f64,
    pub no_rag_accuracy: f64,
}

/// Selective-prediction coverage at a threshold: how many questions exited
/// early and how accurate those answers were, overall and per winning
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ReportMeta>,
    pub theta: f64,
    pub n_questions: usize,
    pub answered_count: usize,
    /// Accuracy over the answered subset; 0 when nothing was answered.
    pub answered_accuracy: f64,
    pub per_config_answered: Vec<ConfigAnswered>,
}

/// Early-exit count and accuracy for one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigAnswered {
    pub provider: String,
    pub k: usize,
    pub window: usize,
    pub count: usize,
    pub accuracy: f64,
}

/// Everything `evaluate` produced: the report plus the raw per-question
/// results it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub sweeps: Vec<SweepResult>,
    /// No-context baseline answer per question.
    pub no_rag: BTreeMap<String, ConfidenceResult>,
}

fn require_gold(dataset: &[MCQuestion]) -> Result<(), EvalError> {
    let missing: Vec<String> = dataset
        .iter()
        .filter(|q| q.gold.is_none())
        .map(|q| q.qid.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(EvalError::MissingGold(missing))
    }
}

/// Run the sweep method over every question and aggregate the accuracy
/// report. Questions are processed in parallel on the current rayon pool;
/// results are aggregated in dataset order, so output is independent of the
/// worker count.
pub fn evaluate(
    dataset: &[MCQuestion],
    grid: &SweepGrid,
    method: &SweepMethod,
    deps: &SweepDeps<'_>,
) -> Result<Evaluation, EvalError> {
    require_gold(dataset)?;
    let outcomes: Vec<Result<(SweepResult, ConfidenceResult), EvalError>> = dataset
        .par_iter()
        .map(|q| {
            let swept = sweep(q, grid, method, deps).map_err(|e| EvalError::Question {
                qid: q.qid.clone(),
                source: e,
            })?;
            let no_rag = no_rag_answer(q, deps)?;
            Ok((swept, no_rag))
        })
        .collect();

    let mut sweeps = Vec::with_capacity(dataset.len());
    let mut no_rag = BTreeMap::new();
    for (q, outcome) in dataset.iter().zip(outcomes) {
        let (swept, baseline) = outcome?;
        sweeps.push(swept);
        no_rag.insert(q.qid.clone(), baseline);
    }

    let report = report_from_sweeps(dataset, grid, &sweeps, &no_rag)?;
    Ok(Evaluation {
        report,
        sweeps,
        no_rag,
    })
}

/// Answer one question with an empty-context prompt.
pub fn no_rag_answer(
    question: &MCQuestion,
    deps: &SweepDeps<'_>,
) -> Result<ConfidenceResult, EvalError> {
    let wrap = |e: InferenceError| EvalError::NoRag {
        qid: question.qid.clone(),
        source: e,
    };
    let prompt = assemble_prompt(question, &[], deps.budget, deps.template_id, deps.tokenizer)
        .map_err(wrap)?;
    let labels = question.labels();
    let raw = deps
        .backend
        .first_token_probs(&InferenceRequest {
            prompt: &prompt,
            labels: &labels,
            qid: Some(&question.qid),
            config: None,
        })
        .map_err(wrap)?;
    normalize_confidence(&raw).map_err(wrap)
}

/// Derive the accuracy report from per-question sweep results. This is the
/// same computation `evaluate` performs, exposed so persisted sweep JSONL
/// can be re-aggregated and compared.
pub fn report_from_sweeps(
    dataset: &[MCQuestion],
    grid: &SweepGrid,
    sweeps: &[SweepResult],
    no_rag: &BTreeMap<String, ConfidenceResult>,
) -> Result<EvalReport, EvalError> {
    require_gold(dataset)?;
    let n = dataset.len();
    let by_qid: BTreeMap<&str, &SweepResult> =
        sweeps.iter().map(|s| (s.qid.as_str(), s)).collect();
    let gold_of = |q: &MCQuestion| q.gold.expect("gold checked above");

    let mut per_config_accuracy = Vec::new();
    for cfg in iterate_grid(grid) {
        let mut answered = 0usize;
        let mut correct = 0usize;
        for q in dataset {
            let Some(swept) = by_qid.get(q.qid.as_str()) else {
                continue;
            };
            if let Some(rec) = swept.records.iter().find(|r| r.config == cfg) {
                answered += 1;
                if rec.result.chosen == gold_of(q) {
                    correct += 1;
                }
            }
        }
        per_config_accuracy.push(ConfigAccuracy {
            provider: cfg.provider.name.clone(),
            k: cfg.k,
            window: cfg.window,
            answered,
            accuracy: correct as f64 / n as f64,
        });
    }

    let first_provider = &grid.providers[0].name;
    let accuracy_over = |keep: &dyn Fn(&crate::optimizer::SweepRecord) -> bool| -> f64 {
        let mut correct = 0usize;
        for q in dataset {
            let Some(swept) = by_qid.get(q.qid.as_str()) else {
                continue;
            };
            if let Some(best) = best_record(swept.records.iter().filter(|r| keep(r))) {
                if best.result.chosen == gold_of(q) {
                    correct += 1;
                }
            }
        }
        correct as f64 / n as f64
    };

    let mut combined_per_window = BTreeMap::new();
    for &window in &grid.window_sizes {
        let accuracy = accuracy_over(&|r| {
            r.config.window == window && r.config.provider.name == *first_provider
        });
        combined_per_window.insert(window, accuracy);
    }
    let combined_all_windows = accuracy_over(&|r| r.config.provider.name == *first_provider);
    let combined_all_providers = accuracy_over(&|_| true);

    let no_rag_correct = dataset
        .iter()
        .filter(|q| no_rag.get(&q.qid).is_some_and(|r| r.chosen == gold_of(q)))
        .count();

    Ok(EvalReport {
        meta: None,
        n_questions: n,
        per_config_accuracy,
        combined_per_window,
        combined_all_windows,
        combined_all_providers,
        no_rag_accuracy: no_rag_correct as f64 / n as f64,
    })
}

/// Threshold-method coverage: run a threshold sweep per question and count
/// early exits and their accuracy.
pub fn threshold_report(
    dataset: &[MCQuestion],
    grid: &SweepGrid,
    theta: f64,
    deps: &SweepDeps<'_>,
) -> Result<(ThresholdReport, Vec<SweepResult>), EvalError> {
    require_gold(dataset)?;
    let method = SweepMethod::Threshold { theta };
    let outcomes: Vec<Result<SweepResult, EvalError>> = dataset
        .par_iter()
        .map(|q| {
            sweep(q, grid, &method, deps).map_err(|e| EvalError::Question {
                qid: q.qid.clone(),
                source: e,
            })
        })
        .collect();
    let mut sweeps = Vec::with_capacity(dataset.len());
    for outcome in outcomes {
        sweeps.push(outcome?);
    }

    let report = threshold_report_from_sweeps(dataset, grid, theta, &sweeps)?;
    Ok((report, sweeps))
}

/// Derive a [`ThresholdReport`] from existing threshold-sweep results.
pub fn threshold_report_from_sweeps(
    dataset: &[MCQuestion],
    grid: &SweepGrid,
    theta: f64,
    sweeps: &[SweepResult],
) -> Result<ThresholdReport, EvalError> {
    require_gold(dataset)?;
    let gold: BTreeMap<&str, Label> = dataset
        .iter()
        .map(|q| (q.qid.as_str(), q.gold.expect("gold checked")))
        .collect();

    let mut answered_count = 0usize;
    let mut answered_correct = 0usize;
    let mut per_config: BTreeMap<(String, usize, usize), (usize, usize)> = BTreeMap::new();
    for swept in sweeps {
        if swept.exhausted {
            continue;
        }
        answered_count += 1;
        let correct = gold
            .get(swept.qid.as_str())
            .is_some_and(|g| swept.final_result.chosen == *g);
        if correct {
            answered_correct += 1;
        }
        let key = (
            swept.winning_config.provider.name.clone(),
            swept.winning_config.k,
            swept.winning_config.window,
        );
        let cell = per_config.entry(key).or_insert((0, 0));
        cell.0 += 1;
        if correct {
            cell.1 += 1;
        }
    }

    let per_config_answered = iterate_grid(grid)
        .into_iter()
        .map(|cfg| {
            let key = (cfg.provider.name.clone(), cfg.k, cfg.window);
            let (count, correct) = per_config.get(&key).copied().unwrap_or((0, 0));
            ConfigAnswered {
                provider: cfg.provider.name.clone(),
                k: cfg.k,
                window: cfg.window,
                count,
                accuracy: if count == 0 {
                    0.0
                } else {
                    correct as f64 / count as f64
                },
            }
        })
        .collect();

    Ok(ThresholdReport {
        meta: None,
        theta,
        n_questions: dataset.len(),
        answered_count,
        answered_accuracy: if answered_count == 0 {
            0.0
        } else {
            answered_correct as f64 / answered_count as f64
        },
        per_config_answered,
    })
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

/// Confidence histogram of correct vs wrong predictions over uniform bins
/// on `[0, 1]`. Each group's densities sum to 1 when the group is non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub correct_density: Vec<f64>,
    pub wrong_density: Vec<f64>,
}

/// Bin `(confidence, is_correct)` pairs; the boundary value 1.0 falls in the
/// last bin. Empty groups yield all-zero densities.
pub fn confidence_histogram(
    records: &[(f64, bool)],
    n_bins: usize,
) -> Result<Histogram, EvalError> {
    if n_bins < 2 {
        return Err(EvalError::TooFewBins(n_bins));
    }
    let bin_edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
    let mut correct = vec![0usize; n_bins];
    let mut wrong = vec![0usize; n_bins];
    for &(confidence, is_correct) in records {
        let clamped = confidence.clamp(0.0, 1.0);
        let bin = ((clamped * n_bins as f64) as usize).min(n_bins - 1);
        if is_correct {
            correct[bin] += 1;
        } else {
            wrong[bin] += 1;
        }
    }
    let density = |counts: &[usize]| -> Vec<f64> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return vec![0.0; counts.len()];
        }
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    };
    Ok(Histogram {
        bin_edges,
        correct_density: density(&correct),
        wrong_density: density(&wrong),
    })
}

/// Pair sweep finals with gold labels as `(confidence, is_correct)` records.
pub fn correctness_records(
    dataset: &[MCQuestion],
    sweeps: &[SweepResult],
) -> Result<Vec<(f64, bool)>, EvalError> {
    require_gold(dataset)?;
    let gold: BTreeMap<&str, Label> = dataset
        .iter()
        .map(|q| (q.qid.as_str(), q.gold.expect("gold checked")))
        .collect();
    Ok(sweeps
        .iter()
        .filter_map(|s| {
            gold.get(s.qid.as_str())
                .map(|g| (s.final_result.confidence, s.final_result.chosen == *g))
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

/// Output encoding for reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(EvalError::UnknownFormat(other.to_string())),
        }
    }
}

/// Serialize the report deterministically and write it atomically.
pub fn emit_report(
    report: &EvalReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), EvalError> {
    let bytes = match format {
        ReportFormat::Json => report_to_json(report).into_bytes(),
        ReportFormat::Csv => report_to_csv(report).into_bytes(),
    };
    write_atomic(path, &bytes).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn report_to_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::BadDataset {
        path: path.display().to_string(),
        line: 0,
        detail: e.to_string(),
    })
}

/// CSV mirror of the accuracy table: one row per (provider, chunk number),
/// one column per window size, then footer rows for the combined ladder and
/// the no-context baseline.
pub fn report_to_csv(report: &EvalReport) -> String {
    let windows: Vec<usize> = if report.per_config_accuracy.is_empty() {
        report.combined_per_window.keys().copied().collect()
    } else {
        report
            .per_config_accuracy
            .iter()
            .map(|c| c.window)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    let mut providers: Vec<&str> = Vec::new();
    for cell in &report.per_config_accuracy {
        if !providers.contains(&cell.provider.as_str()) {
            providers.push(&cell.provider);
        }
    }
    let chunk_numbers: Vec<usize> = report
        .per_config_accuracy
        .iter()
        .map(|c| c.k)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut out = String::new();
    out.push_str("provider,chunk_number");
    for w in &windows {
        out.push_str(&format!(",window_{w}"));
    }
    out.push('\n');

    let cell = |provider: &str, k: usize, w: usize| -> Option<f64> {
        report
            .per_config_accuracy
            .iter()
            .find(|c| c.provider == provider && c.k == k && c.window == w)
            .map(|c| c.accuracy)
    };
    for provider in &providers {
        for &k in &chunk_numbers {
            out.push_str(&format!("{provider},{k}"));
            for &w in &windows {
                match cell(provider, k, w) {
                    Some(acc) => out.push_str(&format!(",{acc}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }

    // Footer: combined ladder and baseline, padded to the header width.
    let pad = |out: &mut String, used: usize| {
        for _ in used..windows.len() {
            out.push(',');
        }
        out.push('\n');
    };
    out.push_str("combined,per_window");
    for w in &windows {
        match report.combined_per_window.get(w) {
            Some(acc) => out.push_str(&format!(",{acc}")),
            None => out.push(','),
        }
    }
    out.push('\n');
    out.push_str(&format!(
        "combined,all_windows,{}",
        report.combined_all_windows
    ));
    pad(&mut out, 1);
    out.push_str(&format!(
        "combined,all_providers,{}",
        report.combined_all_providers
    ));
    pad(&mut out, 1);
    out.push_str(&format!("baseline,without_rag,{}", report.no_rag_accuracy));
    pad(&mut out, 1);
    out
}

/// CSV form of a histogram:
/// `bin_edge_low,bin_edge_high,correct_density,wrong_density`.
pub fn histogram_to_csv(hist: &Histogram) -> String {
    let mut out = String::from("bin_edge_low,bin_edge_high,correct_density,wrong_density\n");
    for i in 0..hist.correct_density.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            hist.bin_edges[i],
            hist.bin_edges[i + 1],
            hist.correct_density[i],
            hist.wrong_density[i]
        ));
    }
    out
}

pub fn emit_histogram(hist: &Histogram, path: &Path) -> Result<(), EvalError> {
    write_atomic(path, histogram_to_csv(hist).as_bytes()).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusBuilder, HeuristicTokenizer};
    use crate::embedding::{EmbeddingProvider, LocalHashProvider, ProviderId};
    use crate::inference::{InferenceBackend, RawOptionProbs};
    use crate::optimizer::ProviderStack;
    use crate::vindex::VectorIndex;
    use std::io::Write;
    use std::sync::Arc;

    fn write_lines(dir: &tempfile::TempDir, name: &str, lines: &[&str]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        path
    }

    #[test]
    fn load_dataset_parses_well_formed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "data.jsonl",
            &[
                r#"{"qid":"q1","question":"Pick one","options":{"A":"a","B":"b"},"answer":"A"}"#,
                r#"{"qid":"q2","question":"Pick two","options":{"A":"a","B":"b","C":"c"},"answer":"C"}"#,
                r#"{"qid":"q3","question":"No gold","options":{"A":"a","B":"b"}}"#,
            ],
        );
        let questions = load_dataset(&path).unwrap();
        assert_eq!(questions.len(), 3);
        assert_eq!(questions[1].gold, Label::new('C'));
        assert_eq!(questions[2].gold, None);
    }

    #[test]
    fn load_dataset_reports_bad_answer_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "data.jsonl",
            &[
                r#"{"qid":"q1","question":"ok","options":{"A":"a","B":"b"},"answer":"A"}"#,
                r#"{"qid":"q2","question":"bad","options":{"A":"a","B":"b"},"answer":"Z"}"#,
            ],
        );
        let err = load_dataset(&path).unwrap_err();
        match err {
            EvalError::BadDataset { line, detail, .. } => {
                assert_eq!(line, 2);
                assert!(detail.contains("answer"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_dataset_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(&dir, "data.jsonl", &[]);
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            EvalError::EmptyDataset { .. }
        ));
    }

    #[test]
    fn load_dataset_rejects_duplicate_qids() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "data.jsonl",
            &[
                r#"{"qid":"q1","question":"a","options":{"A":"a","B":"b"}}"#,
                r#"{"qid":"q1","question":"b","options":{"A":"a","B":"b"}}"#,
            ],
        );
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, EvalError::BadDataset { line: 2, .. }));
    }

    #[test]
    fn load_dataset_rejects_missing_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(&dir, "data.jsonl", &[r#"{"qid":"q1","question":"x"}"#]);
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            EvalError::BadDataset { line: 1, .. }
        ));
    }

    // -- pipeline fixtures -----------------------------------------------------

    /// Backend that always gives the gold label the highest raw probability.
    struct GoldBackend {
        gold: BTreeMap<String, Label>,
    }

    impl InferenceBackend for GoldBackend {
        fn id(&self) -> &str {
            "gold-oracle"
        }
        fn first_token_probs(
            &self,
            req: &InferenceRequest<'_>,
        ) -> Result<RawOptionProbs, InferenceError> {
            let gold = self.gold[req.qid.expect("qid always set")];
            let probs = req
                .labels
                .iter()
                .map(|&l| (l, if l == gold { 0.7 } else { 0.1 }))
                .collect();
            Ok(RawOptionProbs {
                probs,
                source: self.id().to_string(),
            })
        }
    }

    fn tiny_corpus() -> Corpus {
        let mut builder = CorpusBuilder::new(16, Arc::new(HeuristicTokenizer)).unwrap();
        builder
            .add_document("d0", "Alpha beta gamma. Delta epsilon zeta. Eta theta iota.")
            .unwrap();
        builder.seal().unwrap()
    }

    fn stack_for(corpus: &Corpus, name: &str, seed: u64) -> ProviderStack {
        let provider = LocalHashProvider::new(name, 32, seed).unwrap();
        let mut index = VectorIndex::new(provider.id().clone());
        let texts: Vec<&str> = corpus.chunks().iter().map(|c| c.text.as_str()).collect();
        for (chunk, vec) in corpus
            .chunks()
            .iter()
            .zip(provider.embed_batch(&texts).unwrap())
        {
            index.add(chunk.chunk_id, &vec).unwrap();
        }
        ProviderStack::new(Box::new(provider), index)
    }

    fn make_questions(n: usize) -> Vec<MCQuestion> {
        (0..n)
            .map(|i| {
                let options: BTreeMap<Label, String> = Label::first_n(4)
                    .into_iter()
                    .enumerate()
                    .map(|(j, l)| (l, format!("choice {j}")))
                    .collect();
                let gold = Label::first_n(4)[i % 4];
                MCQuestion::new(
                    format!("q{i}"),
                    format!("Synthetic question number {i}?"),
                    options,
                    Some(gold),
                )
                .unwrap()
            })
            .collect()
    }

    fn small_grid() -> SweepGrid {
        SweepGrid::new(vec![1, 2], vec![0, 1], vec![ProviderId::new("local", 32)]).unwrap()
    }

    fn deps_of<'a>(
        corpus: &'a Corpus,
        stacks: &'a [ProviderStack],
        backend: &'a dyn InferenceBackend,
    ) -> SweepDeps<'a> {
        SweepDeps {
            corpus,
            stacks,
            backend,
            tokenizer: &HeuristicTokenizer,
            budget: 2048,
            template_id: crate::inference::DEFAULT_TEMPLATE,
        }
    }

    #[test]
    fn perfect_oracle_yields_full_accuracy() {
        let corpus = tiny_corpus();
        let stacks = vec![stack_for(&corpus, "local", 0)];
        let questions = make_questions(6);
        let backend = GoldBackend {
            gold: questions
                .iter()
                .map(|q| (q.qid.clone(), q.gold.unwrap()))
                .collect(),
        };
        let deps = deps_of(&corpus, &stacks, &backend);
        let grid = small_grid();
        let evaluation = evaluate(&questions, &grid, &SweepMethod::BestProbability, &deps).unwrap();
        let report = &evaluation.report;
        for cell in &report.per_config_accuracy {
            assert_eq!(cell.accuracy, 1.0);
            assert_eq!(cell.answered, 6);
        }
        assert_eq!(report.combined_all_windows, 1.0);
        assert_eq!(report.combined_all_providers, 1.0);
        for acc in report.combined_per_window.values() {
            assert_eq!(*acc, 1.0);
        }
        assert_eq!(report.no_rag_accuracy, 1.0);
    }

    #[test]
    fn report_has_one_cell_per_grid_config() {
        let corpus = tiny_corpus();
        let stacks = vec![stack_for(&corpus, "local", 0)];
        let questions = make_questions(3);
        let backend = GoldBackend {
            gold: questions
                .iter()
                .map(|q| (q.qid.clone(), q.gold.unwrap()))
                .collect(),
        };
        let deps = deps_of(&corpus, &stacks, &backend);
        let grid = SweepGrid::with_default_ranges(vec![ProviderId::new("local", 32)]).unwrap();
        let evaluation = evaluate(&questions, &grid, &SweepMethod::BestProbability, &deps).unwrap();
        assert_eq!(evaluation.report.per_config_accuracy.len(), 14);
        assert_eq!(evaluation.report.combined_per_window.len(), 2);
        assert_eq!(evaluation.report.n_questions, 3);
    }

    #[test]
    fn evaluate_requires_gold_labels() {
        let corpus = tiny_corpus();
        let stacks = vec![stack_for(&corpus, "local", 0)];
        let mut questions = make_questions(2);
        questions[1].gold = None;
        let backend = GoldBackend {
            gold: BTreeMap::new(),
        };
        let deps = deps_of(&corpus, &stacks, &backend);
        let err =
            evaluate(&questions, &small_grid(), &SweepMethod::BestProbability, &deps).unwrap_err();
        assert!(matches!(err, EvalError::MissingGold(qids) if qids == vec!["q1".to_string()]));
    }

    #[test]
    fn report_rederives_from_persisted_sweeps() {
        let corpus = tiny_corpus();
        let stacks = vec![stack_for(&corpus, "local", 0)];
        let questions = make_questions(5);
        let backend = GoldBackend {
            gold: questions
                .iter()
                .map(|q| (q.qid.clone(), q.gold.unwrap()))
                .collect(),
        };
        let deps = deps_of(&corpus, &stacks, &backend);
        let grid = small_grid();
        let evaluation = evaluate(&questions, &grid, &SweepMethod::BestProbability, &deps).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweeps.jsonl");
        crate::optimizer::write_sweep_results(&path, &evaluation.sweeps).unwrap();
        let loaded = crate::optimizer::read_sweep_results(&path).unwrap();
        let rederived = report_from_sweeps(&questions, &grid, &loaded, &evaluation.no_rag).unwrap();
        assert_eq!(rederived, evaluation.report);
    }

    // -- calibrated oracle -------------------------------------------------------

    /// Backend whose confidence is calibrated: the chosen option is correct
    /// with probability equal to the confidence it reports.
    struct CalibratedBackend {
        seed: u64,
        gold: BTreeMap<String, Label>,
    }

    impl InferenceBackend for CalibratedBackend {
        fn id(&self) -> &str {
            "calibrated-oracle"
        }
        fn first_token_probs(
            &self,
            req: &InferenceRequest<'_>,
        ) -> Result<RawOptionProbs, InferenceError> {
            use rand::{Rng, SeedableRng};
            let qid = req.qid.expect("qid always set");
            let mut key = self.seed;
            for b in qid.bytes() {
                key = key.wrapping_mul(0x100000001b3).wrapping_add(u64::from(b));
            }
            if let Some(cfg) = req.config {
                key = key
                    .wrapping_mul(0x100000001b3)
                    .wrapping_add((cfg.k * 1000 + cfg.window) as u64);
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(key);
            let n = req.labels.len();
            let confidence: f64 = rng.random_range((1.0 / n as f64) + 0.01..0.99);
            let correct: bool = rng.random_bool(confidence);
            let gold = self.gold[qid];
            let chosen = if correct {
                gold
            } else {
                let labels = req.labels;
                let idx = labels.iter().position(|l| *l == gold).unwrap();
                labels[(idx + 1) % labels.len()]
            };
            let rest = (1.0 - confidence) / (n - 1) as f64;
            let probs = req
                .labels
                .iter()
                .map(|&l| (l, if l == chosen { confidence } else { rest }))
                .collect();
            Ok(RawOptionProbs {
                probs,
                source: self.id().to_string(),
            })
        }
    }

    fn calibrated_setup(
        n_questions: usize,
    ) -> (Corpus, Vec<ProviderStack>, Vec<MCQuestion>, CalibratedBackend) {
        let corpus = tiny_corpus();
        let stacks = vec![stack_for(&corpus, "local", 0)];
        let questions = make_questions(n_questions);
        let backend = CalibratedBackend {
            seed: 0xfeed,
            gold: questions
                .iter()
                .map(|q| (q.qid.clone(), q.gold.unwrap()))
                .collect(),
        };
        (corpus, stacks, questions, backend)
    }

    #[test]
    fn threshold_answered_accuracy_beats_overall() {
        let (corpus, stacks, questions, backend) = calibrated_setup(2000);
        let deps = deps_of(&corpus, &stacks, &backend);
        let grid = small_grid();
        let (report, sweeps) = threshold_report(&questions, &grid, 0.5, &deps).unwrap();
        assert!(report.answered_count > 0);
        let overall_correct = sweeps
            .iter()
            .zip(&questions)
            .filter(|(s, q)| s.final_result.chosen == q.gold.unwrap())
            .count();
        let overall = overall_correct as f64 / questions.len() as f64;
        assert!(
            report.answered_accuracy >= overall,
            "answered {} < overall {}",
            report.answered_accuracy,
            overall
        );
    }

    #[test]
    fn coverage_shrinks_as_theta_rises() {
        let (corpus, stacks, questions, backend) = calibrated_setup(200);
        let deps = deps_of(&corpus, &stacks, &backend);
        let grid = small_grid();
        let mut previous = usize::MAX;
        for i in 1..=9 {
            let theta = i as f64 / 10.0;
            let (report, _) = threshold_report(&questions, &grid, theta, &deps).unwrap();
            assert!(
                report.answered_count <= previous,
                "coverage rose at theta {theta}"
            );
            previous = report.answered_count;
        }
    }

    #[test]
    fn theta_limits_answer_everything_or_nothing() {
        let (corpus, stacks, questions, backend) = calibrated_setup(40);
        let deps = deps_of(&corpus, &stacks, &backend);
        let grid = small_grid();
        // Four options: every confidence is at least 0.25, so theta = 0.1
        // answers on the first config.
        let (low, sweeps) = threshold_report(&questions, &grid, 0.1, &deps).unwrap();
        assert_eq!(low.answered_count, questions.len());
        for swept in &sweeps {
            assert_eq!(swept.records.len(), 1);
        }
        // The calibrated oracle never reaches confidence 1.0.
        let (high, _) = threshold_report(&questions, &grid, 1.0, &deps).unwrap();
        assert_eq!(high.answered_count, 0);
        assert_eq!(high.answered_accuracy, 0.0);
    }

    // -- histograms ---------------------------------------------------------------

    #[test]
    fn histogram_puts_boundary_value_in_last_bin() {
        let records = vec![(1.0, true), (1.0, true)];
        let hist = confidence_histogram(&records, 10).unwrap();
        assert_eq!(hist.correct_density[9], 1.0);
        assert!(hist.correct_density[..9].iter().all(|d| *d == 0.0));
        assert!(hist.wrong_density.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn histogram_two_bins_split() {
        let records = vec![(0.1, false), (0.9, true)];
        let hist = confidence_histogram(&records, 2).unwrap();
        assert_eq!(hist.wrong_density, vec![1.0, 0.0]);
        assert_eq!(hist.correct_density, vec![0.0, 1.0]);
    }

    #[test]
    fn histogram_requires_two_bins() {
        assert!(matches!(
            confidence_histogram(&[], 1).unwrap_err(),
            EvalError::TooFewBins(1)
        ));
    }

    #[test]
    fn histogram_densities_sum_to_one() {
        let records: Vec<(f64, bool)> =
            (0..100).map(|i| (i as f64 / 100.0, i % 3 == 0)).collect();
        let hist = confidence_histogram(&records, 20).unwrap();
        let sum_c: f64 = hist.correct_density.iter().sum();
        let sum_w: f64 = hist.wrong_density.iter().sum();
        assert!((sum_c - 1.0).abs() <= 1e-9);
        assert!((sum_w - 1.0).abs() <= 1e-9);
    }

    // -- emission -------------------------------------------------------------------

    fn sample_report() -> EvalReport {
        EvalReport {
            meta: None,
            n_questions: 24,
            per_config_accuracy: vec![
                ConfigAccuracy {
                    provider: "local".into(),
                    k: 5,
                    window: 0,
                    answered: 24,
                    accuracy: 0.5,
                },
                ConfigAccuracy {
                    provider: "local".into(),
                    k: 5,
                    window: 1,
                    answered: 24,
                    accuracy: 0.625,
                },
            ],
            combined_per_window: [(0, 0.5), (1, 0.625)].into(),
            combined_all_windows: 0.75,
            combined_all_providers: 0.875,
            no_rag_accuracy: 0.25,
        }
    }

    #[test]
    fn report_json_round_trips() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        emit_report(&report, ReportFormat::Json, &path).unwrap();
        let loaded = read_report(&path).unwrap();
        assert_eq!(loaded, report);
    }

    #[test]
    fn report_csv_has_row_per_chunk_number() {
        let corpus = tiny_corpus();
        let stacks = vec![stack_for(&corpus, "local", 0)];
        let questions = make_questions(3);
        let backend = GoldBackend {
            gold: questions
                .iter()
                .map(|q| (q.qid.clone(), q.gold.unwrap()))
                .collect(),
        };
        let deps = deps_of(&corpus, &stacks, &backend);
        let grid = SweepGrid::with_default_ranges(vec![ProviderId::new("local", 32)]).unwrap();
        let evaluation = evaluate(&questions, &grid, &SweepMethod::BestProbability, &deps).unwrap();
        let csv = report_to_csv(&evaluation.report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "provider,chunk_number,window_0,window_1");
        // 7 chunk-number rows + header + 4 footer rows.
        assert_eq!(lines.len(), 1 + 7 + 4);
        assert!(lines.iter().any(|l| l.starts_with("local,35,")));
        assert!(lines.iter().any(|l| l.starts_with("baseline,without_rag,")));
    }

    #[test]
    fn unknown_format_is_an_error() {
        assert!(matches!(
            "yaml".parse::<ReportFormat>(),
            Err(EvalError::UnknownFormat(f)) if f == "yaml"
        ));
    }

    #[test]
    fn histogram_csv_layout() {
        let hist = confidence_histogram(&[(0.1, false), (0.9, true)], 2).unwrap();
        let csv = histogram_to_csv(&hist);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "bin_edge_low,bin_edge_high,correct_density,wrong_density"
        );
        assert_eq!(lines[1], "0,0.5,0,1");
        assert_eq!(lines[2], "0.5,1,1,0");
    }
}
