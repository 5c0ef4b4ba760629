//! Scoring: accuracy, normalized exact match, per-category breakdowns and report emitters.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DatasetSplit, TaskKind, TaskRecord};
use crate::guide::{GuidedAnswer, Prediction, UNPARSED};

/// Column order of the science breakdown.
pub const SCIENCE_CATEGORIES: [&str; 9] = ["NAT", "SOC", "LAN", "TXT", "IMG", "NO", "G1-6", "G7-12", "Avg"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the split has no records")]
    EmptySplit,
    #[error("prediction for unknown record `{0}`")]
    UnknownRecordId(String),
    #[error("more than one prediction for record `{0}`")]
    DuplicatePrediction(String),
    #[error("{count} record(s) have no prediction, first `{first}` (use --allow-partial to score them as wrong)")]
    MissingPrediction { count: usize, first: String },
    #[error("record `{record_id}` lacks category tag `{tag}`")]
    MissingCategoryTag { record_id: String, tag: String },
    #[error("record `{record_id}` has invalid value `{value}` for tag `{tag}`")]
    InvalidCategoryTag { record_id: String, tag: String, value: String },
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv failure: {0}")]
    Csv(#[from] csv::Error),
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    pred != UNPARSED && normalize_answer(pred) == normalize_answer(gold)
}

/// Exact match without normalization beyond trimming outer whitespace.
pub fn strict_exact_match(pred: &str, gold: &str) -> bool {
    pred != UNPARSED && pred.trim() == gold.trim()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Score records without a prediction as wrong instead of failing.
    pub allow_partial: bool,
    /// Disable answer normalization for exact match.
    pub strict_em: bool,
}

/// Anything carrying a record id and an extracted answer.
pub trait Scored {
    fn record_id(&self) -> &str;
    fn extracted(&self) -> &str;
    fn strategy_name(&self) -> String;
}

impl Scored for GuidedAnswer {
    fn record_id(&self) -> &str {
        &self.record_id
    }
    fn extracted(&self) -> &str {
        &self.extracted
    }
    fn strategy_name(&self) -> String {
        self.background.source.to_string()
    }
}

impl Scored for Prediction {
    fn record_id(&self) -> &str {
        &self.record_id
    }
    fn extracted(&self) -> &str {
        &self.extracted
    }
    fn strategy_name(&self) -> String {
        self.strategy.to_string()
    }
}

pub fn is_correct(record: &TaskRecord, extracted: &str, opts: EvalOptions) -> bool {
    if extracted == UNPARSED {
        return false;
    }
    match record.task_kind {
        TaskKind::TableQA if opts.strict_em => strict_exact_match(extracted, &record.gold_answer),
        TaskKind::TableQA => exact_match(extracted, &record.gold_answer),
        _ => extracted.trim().eq_ignore_ascii_case(record.gold_answer.trim()),
    }
}

/// Sets `correct` on each answer. Answers for unknown records are left unset.
pub fn grade(answers: &mut [GuidedAnswer], split: &DatasetSplit, opts: EvalOptions) {
    let by_id: HashMap<&str, &TaskRecord> = split.records.iter().map(|r| (r.id.as_str(), r)).collect();
    for a in answers {
        a.correct = by_id.get(a.record_id.as_str()).map(|r| is_correct(r, &a.extracted, opts));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub correct: usize,
    pub total: usize,
    pub fraction: f64,
}

impl CategoryScore {
    fn from_counts(correct: usize, total: usize) -> Self {
        CategoryScore {
            correct,
            total,
            fraction: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_kind: TaskKind,
    pub strategy: String,
    pub overall: f64,
    pub correct: usize,
    pub total: usize,
    pub per_category: BTreeMap<String, CategoryScore>,
    pub n_unparsed: usize,
}

impl MetricReport {
    pub fn is_science_breakdown(&self) -> bool {
        SCIENCE_CATEGORIES.iter().all(|c| self.per_category.contains_key(*c))
    }
}

/// Per-record correctness in split order, after validating the prediction set.
fn score_records<A: Scored>(
    answers: &[A],
    split: &DatasetSplit,
    opts: EvalOptions,
) -> Result<(Vec<bool>, usize, String), EvalError> {
    if split.records.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let known: HashMap<&str, usize> = split.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut by_record: Vec<Option<&A>> = vec![None; split.records.len()];
    for a in answers {
        let i = *known
            .get(a.record_id())
            .ok_or_else(|| EvalError::UnknownRecordId(a.record_id().to_string()))?;
        if by_record[i].replace(a).is_some() {
            return Err(EvalError::DuplicatePrediction(a.record_id().to_string()));
        }
    }
    let missing: Vec<&str> = split
        .records
        .iter()
        .zip(&by_record)
        .filter(|(_, a)| a.is_none())
        .map(|(r, _)| r.id.as_str())
        .collect();
    if !missing.is_empty() && !opts.allow_partial {
        return Err(EvalError::MissingPrediction {
            count: missing.len(),
            first: missing[0].to_string(),
        });
    }
    let mut unparsed = 0;
    let correct = split
        .records
        .iter()
        .zip(&by_record)
        .map(|(r, a)| match a {
            Some(a) => {
                if a.extracted() == UNPARSED {
                    unparsed += 1;
                }
                is_correct(r, a.extracted(), opts)
            }
            None => false,
        })
        .collect();
    let mut strategies: Vec<String> = answers.iter().map(Scored::strategy_name).collect();
    strategies.sort();
    strategies.dedup();
    let strategy = match strategies.len() {
        0 => "none".to_string(),
        1 => strategies.remove(0),
        _ => "mixed".to_string(),
    };
    Ok((correct, unparsed, strategy))
}

/// Overall accuracy plus one entry per `tag=value` found in record categories.
pub fn accuracy<A: Scored>(answers: &[A], split: &DatasetSplit, opts: EvalOptions) -> Result<MetricReport, EvalError> {
    let (correct, n_unparsed, strategy) = score_records(answers, split, opts)?;
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (r, &ok) in split.records.iter().zip(&correct) {
        for (tag, value) in &r.categories {
            let c = counts.entry(format!("{tag}={value}")).or_default();
            c.0 += ok as usize;
            c.1 += 1;
        }
    }
    let n_correct = correct.iter().filter(|&&c| c).count();
    Ok(MetricReport {
        task_kind: split.task_kind,
        strategy,
        overall: n_correct as f64 / correct.len() as f64,
        correct: n_correct,
        total: correct.len(),
        per_category: counts
            .into_iter()
            .map(|(k, (c, t))| (k, CategoryScore::from_counts(c, t)))
            .collect(),
        n_unparsed,
    })
}

fn tag<'a>(r: &'a TaskRecord, name: &str) -> Result<&'a str, EvalError> {
    r.categories
        .get(name)
        .map(String::as_str)
        .ok_or_else(|| EvalError::MissingCategoryTag {
            record_id: r.id.clone(),
            tag: name.to_string(),
        })
}

fn flag(r: &TaskRecord, name: &str) -> Result<bool, EvalError> {
    match tag(r, name)? {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(EvalError::InvalidCategoryTag {
            record_id: r.id.clone(),
            tag: name.to_string(),
            value: other.to_string(),
        }),
    }
}

/// Science breakdown columns a record belongs to, read from its
/// `subject`, `has_text`, `has_image` and `grade` tags.
pub fn science_memberships(r: &TaskRecord) -> Result<Vec<&'static str>, EvalError> {
    let invalid = |t: &str, v: &str| EvalError::InvalidCategoryTag {
        record_id: r.id.clone(),
        tag: t.to_string(),
        value: v.to_string(),
    };
    let mut out = Vec::with_capacity(4);
    out.push(match tag(r, "subject")? {
        "NAT" => "NAT",
        "SOC" => "SOC",
        "LAN" => "LAN",
        v => return Err(invalid("subject", v)),
    });
    let (txt, img) = (flag(r, "has_text")?, flag(r, "has_image")?);
    if txt {
        out.push("TXT");
    }
    if img {
        out.push("IMG");
    }
    if !txt && !img {
        out.push("NO");
    }
    out.push(match tag(r, "grade")? {
        "G1-6" => "G1-6",
        "G7-12" => "G7-12",
        v => return Err(invalid("grade", v)),
    });
    Ok(out)
}

/// Accuracy per science category; `Avg` is overall accuracy, not a mean of columns.
pub fn sciqa_breakdown<A: Scored>(
    answers: &[A],
    split: &DatasetSplit,
    opts: EvalOptions,
) -> Result<MetricReport, EvalError> {
    let memberships = split
        .records
        .iter()
        .map(science_memberships)
        .collect::<Result<Vec<_>, _>>()?;
    let (correct, n_unparsed, strategy) = score_records(answers, split, opts)?;
    let mut counts: BTreeMap<&str, (usize, usize)> = SCIENCE_CATEGORIES.iter().map(|c| (*c, (0, 0))).collect();
    for (cats, &ok) in memberships.iter().zip(&correct) {
        for c in cats.iter().chain(std::iter::once(&"Avg")) {
            let e = counts.get_mut(c).expect("known category");
            e.0 += ok as usize;
            e.1 += 1;
        }
    }
    let n_correct = correct.iter().filter(|&&c| c).count();
    Ok(MetricReport {
        task_kind: split.task_kind,
        strategy,
        overall: n_correct as f64 / correct.len() as f64,
        correct: n_correct,
        total: correct.len(),
        per_category: counts
            .into_iter()
            .map(|(k, (c, t))| (k.to_string(), CategoryScore::from_counts(c, t)))
            .collect(),
        n_unparsed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

fn pct(fraction: f64, decimals: usize) -> String {
    format!("{:.*}", decimals, fraction * 100.0)
}

/// Markdown table for one report: a science breakdown row, or a single benchmark column.
pub fn render_markdown(report: &MetricReport) -> String {
    let mut s = String::new();
    if report.is_science_breakdown() {
        let _ = writeln!(s, "| Method | {} |", SCIENCE_CATEGORIES.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(SCIENCE_CATEGORIES.len()));
        let cells: Vec<String> = SCIENCE_CATEGORIES
            .iter()
            .map(|c| pct(report.per_category[*c].fraction, 2))
            .collect();
        let _ = writeln!(s, "| {} | {} |", report.strategy, cells.join(" | "));
    } else {
        let _ = writeln!(s, "| Method | {} |", report.task_kind.benchmark_name());
        let _ = writeln!(s, "|---|---|");
        let _ = writeln!(s, "| {} | {} |", report.strategy, pct(report.overall, 1));
    }
    s
}

pub fn render_csv(report: &MetricReport) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["category", "correct", "total", "fraction"])?;
    w.write_record([
        "overall".to_string(),
        report.correct.to_string(),
        report.total.to_string(),
        report.overall.to_string(),
    ])?;
    for (k, v) in &report.per_category {
        w.write_record([k.clone(), v.correct.to_string(), v.total.to_string(), v.fraction.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_report(report: &MetricReport, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    let body = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ReportFormat::Csv => render_csv(report)?,
        ReportFormat::Markdown => render_markdown(report),
    };
    fs::write(path, body).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_report(path: &Path) -> Result<MetricReport, EvalError> {
    let bytes = fs::read(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

/// Strategies as rows, benchmarks as columns, accuracy in percent to one decimal.
pub fn comparison_table(reports: &[MetricReport]) -> String {
    let mut strategies: Vec<&str> = Vec::new();
    for r in reports {
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    let tasks: Vec<TaskKind> = TaskKind::ALL
        .into_iter()
        .filter(|t| reports.iter().any(|r| r.task_kind == *t))
        .collect();
    let mut s = String::new();
    let names: Vec<&str> = tasks.iter().map(|t| t.benchmark_name()).collect();
    let _ = writeln!(s, "| Method | {} |", names.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(tasks.len()));
    for strat in strategies {
        let cells: Vec<String> = tasks
            .iter()
            .map(|t| {
                reports
                    .iter()
                    .rev()
                    .find(|r| r.strategy == strat && r.task_kind == *t)
                    .map_or("-".to_string(), |r| pct(r.overall, 1))
            })
            .collect();
        let _ = writeln!(s, "| {} | {} |", strat, cells.join(" | "));
    }
    s
}
