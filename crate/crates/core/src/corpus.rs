//! Dataset ingestion and construction of knowledge-alignment training triples.
//!
//! Datasets are JSON Lines files, one [`TaskRecord`] per line. Loading is
//! fail-fast: the first malformed line aborts with its 1-based line number and
//! the offending field, so metric denominators never silently shrink.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::template::{self, TemplateSet};

/// Whitespace-token cap applied to passages before deriving triples.
pub const PASSAGE_TOKEN_CAP: usize = 256;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("dataset file not found: {0}")]
    MissingFile(PathBuf),
    #[error("line {line}: field `{field}`: {reason}")]
    SchemaViolation {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("record `{0}` has neither a gold background nor a gold table")]
    MissingBackground(String),
    #[error("invalid triple: {0}")]
    InvalidTriple(String),
    #[error("refusing to export an empty triple set")]
    EmptyExport,
    #[error("unsupported task kind `{0}`")]
    UnsupportedTask(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed training file {path}: {source}")]
    TrainingFile {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    FactCheck,
    TableQA,
    MedicalMCQ,
    ScienceMCQ,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::FactCheck,
        TaskKind::TableQA,
        TaskKind::MedicalMCQ,
        TaskKind::ScienceMCQ,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::FactCheck => "FactCheck",
            TaskKind::TableQA => "TableQA",
            TaskKind::MedicalMCQ => "MedicalMCQ",
            TaskKind::ScienceMCQ => "ScienceMCQ",
        }
    }

    pub fn is_mcq(self) -> bool {
        matches!(self, TaskKind::MedicalMCQ | TaskKind::ScienceMCQ)
    }

    /// Name of the benchmark this task kind was modelled on, used as a report column.
    pub fn benchmark_name(self) -> &'static str {
        match self {
            TaskKind::FactCheck => "FM2",
            TaskKind::TableQA => "NQ-Table",
            TaskKind::MedicalMCQ => "MedMC-QA",
            TaskKind::ScienceMCQ => "ScienceQA",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CorpusError::UnsupportedTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Published split sizes of the four benchmarks, `(train, valid, test)`.
pub fn reference_split_sizes(kind: TaskKind) -> (usize, usize, usize) {
    match kind {
        TaskKind::FactCheck => (10_419, 1_169, 1_380),
        TaskKind::TableQA => (9_594, 1_068, 959),
        TaskKind::MedicalMCQ => (160_869, 4_183, 6_150),
        TaskKind::ScienceMCQ => (12_726, 4_241, 4_241),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub caption: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn validate(&self) -> Result<(), String> {
        if self.header.is_empty() && !self.rows.is_empty() {
            return Err("header is empty but rows are present".into());
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.header.len() {
                return Err(format!(
                    "row {i} has {} cells, header has {}",
                    row.len(),
                    self.header.len()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub task_kind: TaskKind,
    /// The claim for fact checking, the question otherwise.
    pub question: String,
    pub options: Vec<String>,
    pub context: Option<String>,
    pub gold_answer: String,
    pub gold_background: Option<String>,
    pub gold_table: Option<Table>,
    pub image_feature_ref: Option<String>,
    pub categories: BTreeMap<String, String>,
}

impl TaskRecord {
    /// Checks the per-record invariants, returning the offending field on failure.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.task_kind.is_mcq() {
            if self.options.len() < 2 {
                return Err(("options", "multiple-choice records need at least 2 options".into()));
            }
            if self.options.len() > 26 {
                return Err(("options", "more than 26 options cannot be letter-addressed".into()));
            }
            match option_index(&self.gold_answer) {
                Some(i) if i < self.options.len() => {}
                _ => {
                    return Err((
                        "gold_answer",
                        format!(
                            "`{}` is not an option letter within A..{}",
                            self.gold_answer,
                            option_letter(self.options.len() - 1)
                        ),
                    ))
                }
            }
        } else if !self.options.is_empty() {
            return Err(("options", format!("{} records take no options", self.task_kind)));
        }
        if self.task_kind == TaskKind::FactCheck
            && self.gold_answer != "true"
            && self.gold_answer != "false"
        {
            return Err(("gold_answer", "fact-check gold must be \"true\" or \"false\"".into()));
        }
        if let Some(t) = &self.gold_table {
            t.validate().map_err(|e| ("gold_table", e))?;
        }
        Ok(())
    }

    /// The background text a knowledge module should learn to produce for this record.
    pub fn background_text(&self) -> Option<String> {
        match (self.task_kind, &self.gold_table, &self.gold_background) {
            (TaskKind::TableQA, Some(t), _) => Some(flatten_table(t)),
            (_, _, Some(bg)) => Some(bg.clone()),
            (_, Some(t), None) => Some(flatten_table(t)),
            _ => None,
        }
    }
}

/// `0 -> 'A'`, `25 -> 'Z'`.
pub fn option_letter(index: usize) -> char {
    assert!(index < 26, "option index {index} beyond Z");
    (b'A' + index as u8) as char
}

/// Inverse of [`option_letter`] for a single uppercase letter.
pub fn option_index(letter: &str) -> Option<usize> {
    let mut chars = letter.chars();
    match (chars.next(), chars.next()) {
        (Some(c @ 'A'..='Z'), None) => Some((c as u8 - b'A') as usize),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub task_kind: TaskKind,
    pub split_name: SplitName,
    pub records: Vec<TaskRecord>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TaskRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

const RECORD_FIELDS: [&str; 10] = [
    "id",
    "task_kind",
    "question",
    "options",
    "context",
    "gold_answer",
    "gold_background",
    "gold_table",
    "image_feature_ref",
    "categories",
];

type FieldResult<T> = Result<T, (&'static str, String)>;

fn req<'a>(obj: &'a Map<String, Value>, field: &'static str) -> FieldResult<&'a Value> {
    obj.get(field).ok_or((field, "missing".to_string()))
}

fn req_str(obj: &Map<String, Value>, field: &'static str) -> FieldResult<String> {
    match req(obj, field)? {
        Value::String(s) => Ok(s.clone()),
        other => Err((field, format!("expected string, got {other}"))),
    }
}

fn opt_str(obj: &Map<String, Value>, field: &'static str) -> FieldResult<Option<String>> {
    match req(obj, field)? {
        Value::Null => Ok(None),
        Value::String(s) => Ok(Some(s.clone())),
        other => Err((field, format!("expected string or null, got {other}"))),
    }
}

fn str_list(v: &Value, field: &'static str) -> FieldResult<Vec<String>> {
    let arr = v
        .as_array()
        .ok_or((field, "expected array of strings".to_string()))?;
    arr.iter()
        .map(|x| {
            x.as_str()
                .map(str::to_string)
                .ok_or((field, "expected array of strings".to_string()))
        })
        .collect()
}

fn parse_table(v: &Value) -> FieldResult<Table> {
    const F: &str = "gold_table";
    let obj = v.as_object().ok_or((F, "expected object or null".to_string()))?;
    let caption = obj
        .get("caption")
        .and_then(Value::as_str)
        .ok_or((F, "missing string `caption`".to_string()))?
        .to_string();
    let header = str_list(obj.get("header").ok_or((F, "missing `header`".to_string()))?, F)?;
    let rows = obj
        .get("rows")
        .and_then(Value::as_array)
        .ok_or((F, "missing array `rows`".to_string()))?
        .iter()
        .map(|r| str_list(r, F))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(extra) = obj.keys().find(|k| !["caption", "header", "rows"].contains(&k.as_str())) {
        return Err((F, format!("unexpected key `{extra}`")));
    }
    Ok(Table {
        caption,
        header,
        rows,
    })
}

/// Parses one dataset line. Errors name the offending field.
pub fn parse_record(line: &str) -> Result<TaskRecord, (String, String)> {
    let lift = |(f, r): (&str, String)| (f.to_string(), r);
    let value: Value = serde_json::from_str(line).map_err(|e| ("<line>".to_string(), e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ("<line>".to_string(), "expected a JSON object".to_string()))?;
    if let Some(extra) = obj.keys().find(|k| !RECORD_FIELDS.contains(&k.as_str())) {
        return Err((extra.clone(), "unexpected field".to_string()));
    }
    let task_kind_raw = req_str(obj, "task_kind").map_err(lift)?;
    let task_kind = task_kind_raw
        .parse::<TaskKind>()
        .map_err(|e| ("task_kind".to_string(), e.to_string()))?;
    let gold_table = match req(obj, "gold_table").map_err(lift)? {
        Value::Null => None,
        v => Some(parse_table(v).map_err(lift)?),
    };
    let categories = match req(obj, "categories").map_err(lift)? {
        Value::Object(m) => m
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => Ok((k.clone(), s.clone())),
                _ => Err(("categories".to_string(), format!("tag `{k}` must map to a string"))),
            })
            .collect::<Result<BTreeMap<_, _>, _>>()?,
        _ => return Err(("categories".to_string(), "expected object".to_string())),
    };
    let record = TaskRecord {
        id: req_str(obj, "id").map_err(lift)?,
        task_kind,
        question: req_str(obj, "question").map_err(lift)?,
        options: str_list(req(obj, "options").map_err(lift)?, "options").map_err(lift)?,
        context: opt_str(obj, "context").map_err(lift)?,
        gold_answer: req_str(obj, "gold_answer").map_err(lift)?,
        gold_background: opt_str(obj, "gold_background").map_err(lift)?,
        gold_table,
        image_feature_ref: opt_str(obj, "image_feature_ref").map_err(lift)?,
        categories,
    };
    record.validate().map_err(lift)?;
    Ok(record)
}

/// Loads a JSON Lines dataset split, failing on the first malformed line.
pub fn load_dataset(
    path: &Path,
    task_kind: TaskKind,
    split_name: SplitName,
) -> Result<DatasetSplit, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let violation = |field: String, reason: String| CorpusError::SchemaViolation {
            line: line_no,
            field,
            reason,
        };
        let record = parse_record(line).map_err(|(f, r)| violation(f, r))?;
        if record.task_kind != task_kind {
            return Err(violation(
                "task_kind".into(),
                format!("expected {task_kind}, found {}", record.task_kind),
            ));
        }
        if !seen.insert(record.id.clone()) {
            return Err(violation("id".into(), format!("duplicate id `{}`", record.id)));
        }
        records.push(record);
    }
    Ok(DatasetSplit {
        task_kind,
        split_name,
        records,
    })
}

/// Writes records in the dataset line format. Intended for fixtures and conversions.
pub fn write_dataset(path: &Path, records: &[TaskRecord]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn escape_cell(cell: &str) -> String {
    cell.replace('|', "/").replace(['\r', '\n'], " ")
}

/// Renders a table as text: caption, header, then one line per row, cells joined by `" | "`.
pub fn flatten_table(t: &Table) -> String {
    let mut lines = vec![escape_cell(&t.caption)];
    let join = |cells: &[String]| cells.iter().map(|c| escape_cell(c)).collect::<Vec<_>>().join(" | ");
    if !t.header.is_empty() {
        lines.push(join(&t.header));
    }
    lines.extend(t.rows.iter().map(|r| join(r)));
    lines.join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl KnowledgeTriple {
    pub fn new(
        instruction: impl Into<String>,
        input: impl Into<String>,
        output: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let t = KnowledgeTriple {
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for (name, v) in [
            ("instruction", &self.instruction),
            ("input", &self.input),
            ("output", &self.output),
        ] {
            if v.trim().is_empty() {
                return Err(CorpusError::InvalidTriple(format!("empty {name}")));
            }
        }
        if let Some(s) = template::SENTINELS.iter().find(|s| self.output.contains(*s)) {
            return Err(CorpusError::InvalidTriple(format!("output contains `{s}`")));
        }
        Ok(())
    }
}

/// The alignment input for a record: `"Statement: ..."` for claims, `"Question: ..."` otherwise.
pub fn task_input(record: &TaskRecord) -> String {
    match record.task_kind {
        TaskKind::FactCheck => format!("Statement: {}", record.question),
        _ => format!("Question: {}", record.question),
    }
}

/// One triple per record using the default instructions.
pub fn build_triples(split: &DatasetSplit) -> Result<Vec<KnowledgeTriple>, CorpusError> {
    build_triples_with(split, &TemplateSet::default())
}

pub fn build_triples_with(
    split: &DatasetSplit,
    templates: &TemplateSet,
) -> Result<Vec<KnowledgeTriple>, CorpusError> {
    let instruction = templates.instruction_for(split.task_kind);
    split
        .records
        .iter()
        .map(|r| {
            let output = r
                .background_text()
                .ok_or_else(|| CorpusError::MissingBackground(r.id.clone()))?;
            KnowledgeTriple::new(instruction.clone(), task_input(r), output)
        })
        .collect()
}

/// Splits after `.`, `!` or `?` when followed by whitespace and an uppercase
/// letter, or by the end of the text. Terminators stay with their sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let at_end = j == chars.len();
            let boundary = at_end || (j > i + 1 && chars[j].1.is_uppercase());
            if boundary {
                let end = pos + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                start = if at_end { text.len() } else { chars[j].0 };
                i = j;
                continue;
            }
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// Keeps whole leading sentences while the running whitespace-token count stays within the cap.
fn cap_sentences(sentences: Vec<String>, cap: usize) -> Vec<String> {
    let mut total = 0;
    sentences
        .into_iter()
        .take_while(|s| {
            total += s.split_whitespace().count();
            total <= cap
        })
        .collect()
}

/// Turns raw passages into triples: first sentence as input, the rest as output.
///
/// Passages that yield fewer than two sentences after the token cap are dropped;
/// the second element of the result counts them.
pub fn derive_passage_triples(passages: &[String]) -> (Vec<KnowledgeTriple>, usize) {
    let instruction = template::instruction_for_task(TaskKind::FactCheck);
    let mut triples = Vec::new();
    let mut dropped = 0;
    for p in passages {
        let sentences = cap_sentences(split_sentences(p), PASSAGE_TOKEN_CAP);
        if sentences.len() < 2 {
            dropped += 1;
            continue;
        }
        let output = sentences[1..].join(" ");
        match KnowledgeTriple::new(instruction.clone(), sentences[0].clone(), output) {
            Ok(t) => triples.push(t),
            Err(_) => dropped += 1,
        }
    }
    (triples, dropped)
}

/// Fine-tuning hyperparameters recorded next to an exported training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub peak_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_schedule: String,
    pub warmup_ratio: f64,
}

impl TrainingManifest {
    /// Settings used for each benchmark's knowledge module.
    pub fn for_task(kind: TaskKind) -> Self {
        let (batch_size, epochs) = match kind {
            TaskKind::FactCheck => (64, 3),
            TaskKind::TableQA => (32, 10),
            TaskKind::MedicalMCQ => (32, 3),
            TaskKind::ScienceMCQ => (32, 5),
        };
        TrainingManifest {
            peak_learning_rate: 2e-5,
            batch_size,
            epochs,
            warmup_schedule: "cosine".into(),
            warmup_ratio: 0.1,
        }
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the triples as one JSON array plus a `<path>.manifest.json` sidecar.
pub fn export_training_file(
    triples: &[KnowledgeTriple],
    path: &Path,
    manifest: &TrainingManifest,
) -> Result<(), CorpusError> {
    if triples.is_empty() {
        return Err(CorpusError::EmptyExport);
    }
    let body = serde_json::to_vec_pretty(triples).expect("triples always serialize");
    fs::write(path, body).map_err(io_err(path))?;
    let mpath = manifest_path(path);
    let m = serde_json::to_vec_pretty(manifest).expect("manifest always serializes");
    fs::write(&mpath, m).map_err(io_err(&mpath))
}

pub fn load_training_file(path: &Path) -> Result<Vec<KnowledgeTriple>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| CorpusError::TrainingFile {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a passage file (`{"doc_id", "text"}` per line) and returns only the texts.
pub fn load_passage_texts(path: &Path) -> Result<Vec<String>, CorpusError> {
    crate::retrieval::load_passages(path)
        .map(|ps| ps.into_iter().map(|p| p.text).collect())
        .map_err(|e| match e {
            crate::retrieval::RetrievalError::MissingFile(p) => CorpusError::MissingFile(p),
            crate::retrieval::RetrievalError::Io { path, source } => CorpusError::Io { path, source },
            other => CorpusError::SchemaViolation {
                line: 0,
                field: "<passage>".into(),
                reason: other.to_string(),
            },
        })
}
