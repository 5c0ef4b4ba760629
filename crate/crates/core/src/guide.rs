//! Generate-then-read pipeline.
//!
//! For each record a background `K` is produced by the chosen strategy, then
//! the answering model reads `K` together with the question. Direct prompting
//! skips the first step; the retrieval baseline replaces it with BM25 search.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{parallel_map, Backend, BackendError, BackendStats, GenerationRequest};
use crate::corpus::{option_index, option_letter, task_input, DatasetSplit, TaskKind, TaskRecord};
use crate::retrieval::{retrieve_background, InvertedIndex};
use crate::template::{SelfGuide, TemplateError, TemplateSet};
use crate::Bm25Params;

/// Extraction result when no answer can be read from the model output.
pub const UNPARSED: &str = "<unparsed>";

#[derive(Debug, Error)]
pub enum GuideError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("backend returned an empty generation")]
    EmptyGeneration,
    #[error("retrieval found no passage for the query")]
    NoRetrievalHits,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed predictions file {path} line {line}: {reason}")]
    MalformedPredictions { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    Direct,
    Pkg,
    CoT,
    GenRead,
    Retrieval,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Direct,
        StrategyKind::Pkg,
        StrategyKind::CoT,
        StrategyKind::GenRead,
        StrategyKind::Retrieval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Direct => "Direct",
            StrategyKind::Pkg => "Pkg",
            StrategyKind::CoT => "CoT",
            StrategyKind::GenRead => "GenRead",
            StrategyKind::Retrieval => "Retrieval",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown strategy `{s}` (expected Direct, Pkg, CoT, GenRead or Retrieval)"))
    }
}

#[derive(Debug, Clone)]
pub enum GuidingStrategy {
    Direct,
    Pkg,
    CoT,
    GenRead,
    Retrieval {
        index: Arc<InvertedIndex>,
        top_n: usize,
        params: Bm25Params,
    },
}

impl GuidingStrategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            GuidingStrategy::Direct => StrategyKind::Direct,
            GuidingStrategy::Pkg => StrategyKind::Pkg,
            GuidingStrategy::CoT => StrategyKind::CoT,
            GuidingStrategy::GenRead => StrategyKind::GenRead,
            GuidingStrategy::Retrieval { .. } => StrategyKind::Retrieval,
        }
    }

    pub fn retrieval(index: Arc<InvertedIndex>) -> Self {
        GuidingStrategy::Retrieval {
            index,
            top_n: 1,
            params: Bm25Params::default(),
        }
    }
}

/// The pair of model handles a run may use.
#[derive(Debug, Clone)]
pub struct Backends {
    pub pkg: Option<Backend>,
    pub llm: Backend,
}

impl Backends {
    fn pkg(&self) -> Result<&Backend, GuideError> {
        self.pkg
            .as_ref()
            .ok_or_else(|| GuideError::Config("the Pkg strategy needs a knowledge-module backend".into()))
    }

    fn stats(&self) -> (Option<BackendStats>, BackendStats) {
        (self.pkg.as_ref().map(Backend::stats), self.llm.stats())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub background_max_tokens: u32,
    pub answer_max_tokens: u32,
    pub temperature: f64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            background_max_tokens: 512,
            answer_max_tokens: 64,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub text: String,
    pub source: StrategyKind,
    /// Model name of the generator, or `"index"` for retrieval.
    pub generator_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedAnswer {
    pub record_id: String,
    pub background: Background,
    pub raw_llm_text: String,
    pub extracted: String,
    pub correct: Option<bool>,
    /// Set when a backend call for this record failed.
    pub error: Option<String>,
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub strategy: StrategyKind,
    pub background_text: String,
    pub raw_llm_text: String,
    pub extracted: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<&GuidedAnswer> for Prediction {
    fn from(a: &GuidedAnswer) -> Self {
        Prediction {
            record_id: a.record_id.clone(),
            strategy: a.background.source,
            background_text: a.background.text.clone(),
            raw_llm_text: a.raw_llm_text.clone(),
            extracted: a.extracted.clone(),
            error: a.error.clone(),
        }
    }
}

fn request(prompt: String, max_tokens: u32, settings: &GenerationSettings) -> GenerationRequest {
    GenerationRequest {
        prompt,
        max_tokens,
        temperature: settings.temperature,
        stop: Vec::new(),
    }
}

fn non_blank(text: String) -> Result<String, GuideError> {
    if text.trim().is_empty() {
        Err(GuideError::EmptyGeneration)
    } else {
        Ok(text)
    }
}

pub fn generate_background(
    strategy: &GuidingStrategy,
    record: &TaskRecord,
    backends: &Backends,
    templates: &TemplateSet,
    settings: &GenerationSettings,
) -> Result<Background, GuideError> {
    let kind = strategy.kind();
    let via = |backend: &Backend, prompt: String| -> Result<Background, GuideError> {
        let resp = backend.generate(&request(prompt, settings.background_max_tokens, settings))?;
        Ok(Background {
            text: non_blank(resp.text)?,
            source: kind,
            generator_model: backend.descriptor().model_name.clone(),
        })
    };
    match strategy {
        GuidingStrategy::Direct => Ok(Background {
            text: String::new(),
            source: kind,
            generator_model: String::new(),
        }),
        GuidingStrategy::Pkg => {
            let prompt = templates.render_alignment(
                &templates.instruction_for(record.task_kind),
                &task_input(record),
                None,
            )?;
            via(backends.pkg()?, prompt.text)
        }
        GuidingStrategy::CoT => via(&backends.llm, templates.self_guiding_prompt(SelfGuide::CoT, record)?.text),
        GuidingStrategy::GenRead => via(
            &backends.llm,
            templates.self_guiding_prompt(SelfGuide::GenRead, record)?.text,
        ),
        GuidingStrategy::Retrieval { index, top_n, params } => {
            let text = retrieve_background(index, params, &record.question, *top_n);
            if text.is_empty() {
                return Err(GuideError::NoRetrievalHits);
            }
            Ok(Background {
                text,
                source: kind,
                generator_model: "index".into(),
            })
        }
    }
}

pub fn answer(
    record: &TaskRecord,
    background: Background,
    backends: &Backends,
    templates: &TemplateSet,
    settings: &GenerationSettings,
) -> Result<GuidedAnswer, GuideError> {
    let prompt = templates.render_answer_prompt(&background.text, record)?;
    let resp = backends
        .llm
        .generate(&request(prompt.text, settings.answer_max_tokens, settings))?;
    let extracted = extract_answer(record.task_kind, &resp.text, &record.options);
    Ok(GuidedAnswer {
        record_id: record.id.clone(),
        background,
        raw_llm_text: resp.text,
        extracted,
        correct: None,
        error: None,
    })
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte offsets of whole-word, case-insensitive occurrences of `word` (ASCII).
fn find_word(haystack_lower: &str, word: &str) -> Option<usize> {
    haystack_lower.match_indices(word).map(|(i, _)| i).find(|&i| {
        let before = haystack_lower[..i].chars().next_back();
        let after = haystack_lower[i + word.len()..].chars().next();
        !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
    })
}

fn letter_in_parens(text: &str, n_options: usize) -> Option<String> {
    let bytes = text.as_bytes();
    (0..bytes.len().saturating_sub(2)).find_map(|i| {
        let (open, l, close) = (bytes[i], bytes[i + 1], bytes[i + 2]);
        (open == b'(' && close == b')' && l.is_ascii_uppercase() && ((l - b'A') as usize) < n_options)
            .then(|| (l as char).to_string())
    })
}

fn standalone_letter(text: &str, n_options: usize) -> Option<String> {
    let chars: Vec<char> = text.chars().collect();
    (0..chars.len()).find_map(|i| {
        let c = chars[i];
        let valid = c.is_ascii_uppercase() && ((c as u8 - b'A') as usize) < n_options;
        let isolated = (i == 0 || !is_word_char(chars[i - 1])) && chars.get(i + 1).is_none_or(|&n| !is_word_char(n));
        (valid && isolated).then(|| c.to_string())
    })
}

/// Reads the answer out of raw model text.
///
/// In order: an option letter, written `(X)` anywhere or else as a standalone
/// capital; `true`/`false` for claims; the longest option text quoted
/// verbatim; the first line for table questions; otherwise [`UNPARSED`].
pub fn extract_answer(task: TaskKind, raw_text: &str, options: &[String]) -> String {
    let n = options.len().min(26);
    if n > 0 {
        if let Some(l) = letter_in_parens(raw_text, n).or_else(|| standalone_letter(raw_text, n)) {
            return l;
        }
    }
    let lower = raw_text.to_lowercase();
    if task == TaskKind::FactCheck {
        let t = find_word(&lower, "true");
        let f = find_word(&lower, "false");
        match (t, f) {
            (Some(a), Some(b)) => return if a < b { "true" } else { "false" }.into(),
            (Some(_), None) => return "true".into(),
            (None, Some(_)) => return "false".into(),
            (None, None) => {}
        }
    }
    if n > 0 {
        let best = options
            .iter()
            .take(n)
            .enumerate()
            .filter(|(_, o)| !o.trim().is_empty() && lower.contains(&o.to_lowercase()))
            .max_by(|(ia, a), (ib, b)| a.chars().count().cmp(&b.chars().count()).then(ib.cmp(ia)));
        if let Some((i, _)) = best {
            return option_letter(i).to_string();
        }
    }
    if task == TaskKind::TableQA {
        let first = raw_text.trim().lines().next().unwrap_or("").trim();
        let stripped = first.trim_end_matches(|c: char| c.is_ascii_punctuation()).trim_end();
        if !stripped.is_empty() {
            return stripped.to_string();
        }
    }
    UNPARSED.to_string()
}

/// True when `extracted` is a valid answer shape for the task, or the sentinel.
pub fn is_well_formed_extraction(task: TaskKind, extracted: &str, n_options: usize) -> bool {
    if extracted == UNPARSED {
        return true;
    }
    match task {
        TaskKind::FactCheck => extracted == "true" || extracted == "false",
        TaskKind::MedicalMCQ | TaskKind::ScienceMCQ => option_index(extracted).is_some_and(|i| i < n_options),
        TaskKind::TableQA => !extracted.is_empty() && !extracted.contains('\n'),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub record_id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub strategy: StrategyKind,
    pub task_kind: TaskKind,
    pub split: String,
    pub pkg_model: Option<String>,
    pub llm_model: String,
    pub template_hash: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub records: usize,
    pub pkg_network_calls: u64,
    pub pkg_cache_hits: u64,
    pub llm_network_calls: u64,
    pub llm_cache_hits: u64,
    pub failures: Vec<RecordFailure>,
    pub settings: GenerationSettings,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub answers: Vec<GuidedAnswer>,
    pub manifest: RunManifest,
}

fn run_record(
    strategy: &GuidingStrategy,
    record: &TaskRecord,
    backends: &Backends,
    templates: &TemplateSet,
    settings: &GenerationSettings,
) -> Result<GuidedAnswer, (String, GuideError)> {
    let bg = generate_background(strategy, record, backends, templates, settings).map_err(|e| ("background".to_string(), e))?;
    answer(record, bg, backends, templates, settings).map_err(|e| ("answer".to_string(), e))
}

/// Runs background generation then answering for every record.
///
/// Only configuration problems abort; per-record failures become
/// [`UNPARSED`] answers and are listed in the manifest.
pub fn run_pipeline(
    split: &DatasetSplit,
    strategy: &GuidingStrategy,
    backends: &Backends,
    templates: &TemplateSet,
    settings: &GenerationSettings,
    max_in_flight: usize,
) -> Result<PipelineRun, GuideError> {
    if max_in_flight == 0 {
        return Err(GuideError::Config("max_in_flight must be at least 1".into()));
    }
    if strategy.kind() == StrategyKind::Pkg {
        backends.pkg()?;
    }
    if let GuidingStrategy::Retrieval { top_n, params, .. } = strategy {
        if *top_n == 0 {
            return Err(GuideError::Config("retrieval top_n must be at least 1".into()));
        }
        params.validate().map_err(|e| GuideError::Config(e.to_string()))?;
    }

    let started_at = Utc::now();
    let (pkg_before, llm_before) = backends.stats();
    let results = parallel_map(&split.records, max_in_flight, |_, r| {
        run_record(strategy, r, backends, templates, settings)
    });

    let mut failures = Vec::new();
    let answers = results
        .into_iter()
        .zip(&split.records)
        .map(|(res, record)| match res {
            Ok(a) => a,
            Err((stage, e)) => {
                failures.push(RecordFailure {
                    record_id: record.id.clone(),
                    stage,
                    error: e.to_string(),
                });
                GuidedAnswer {
                    record_id: record.id.clone(),
                    background: Background {
                        text: String::new(),
                        source: strategy.kind(),
                        generator_model: String::new(),
                    },
                    raw_llm_text: String::new(),
                    extracted: UNPARSED.into(),
                    correct: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();

    let (pkg_after, llm_after) = backends.stats();
    let pkg_delta = match (pkg_before, pkg_after) {
        (Some(b), Some(a)) => (a.network_calls - b.network_calls, a.cache_hits - b.cache_hits),
        _ => (0, 0),
    };
    let manifest = RunManifest {
        strategy: strategy.kind(),
        task_kind: split.task_kind,
        split: split.split_name.to_string(),
        pkg_model: backends.pkg.as_ref().map(|b| b.descriptor().model_name.clone()),
        llm_model: backends.llm.descriptor().model_name.clone(),
        template_hash: templates.fingerprint(),
        started_at,
        finished_at: Utc::now(),
        records: split.records.len(),
        pkg_network_calls: pkg_delta.0,
        pkg_cache_hits: pkg_delta.1,
        llm_network_calls: llm_after.network_calls - llm_before.network_calls,
        llm_cache_hits: llm_after.cache_hits - llm_before.cache_hits,
        failures,
        settings: *settings,
    };
    Ok(PipelineRun { answers, manifest })
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), GuideError> {
    let io = |source| GuideError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for p in predictions {
        let line = serde_json::to_string(p).expect("predictions serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, GuideError> {
    let text = fs::read_to_string(path).map_err(|source| GuideError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| GuideError::MalformedPredictions {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Index of predictions by record id; later lines replace earlier ones.
pub fn predictions_by_id(predictions: Vec<Prediction>) -> BTreeMap<String, Prediction> {
    predictions.into_iter().map(|p| (p.record_id.clone(), p)).collect()
}
