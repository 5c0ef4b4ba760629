//! Prompt templates for knowledge alignment, answering and self-guiding.
//!
//! Templates use `{name}` placeholders. A `{#name}...{/name}` section is kept
//! only when `name` is filled with a non-empty value; the answer prompts wrap
//! their background block in such a section so that direct (unguided)
//! prompting drops it together with its separators.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{option_letter, TaskKind, TaskRecord};

/// Section markers of the alignment format; never allowed inside generated backgrounds.
pub const SENTINELS: [&str; 3] = ["### Instruction:", "### Input:", "### Response:"];

const ALIGNMENT_HEAD: &str = "Below is an instruction that describes a task, paired with an input that provides further context.\nWrite a response that appropriately completes the request.\n### Instruction:\n";
const ALIGNMENT_MID: &str = "\n### Input:\n";
const ALIGNMENT_TAIL: &str = "\n### Response:\n";

const COT_SUFFIX: &str = "Let's think step-by-step";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unsupported task kind `{0}`")]
    UnsupportedTask(String),
    #[error("field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("record has an empty question")]
    EmptyQuestion,
    #[error("{0} options exceed the A..Z letter range")]
    TooManyOptions(usize),
    #[error("placeholder `{{{0}}}` has no value")]
    UnfilledPlaceholder(String),
    #[error("malformed template: {0}")]
    Malformed(String),
    #[error("unknown template name `{0}`")]
    UnknownKind(String),
    #[error("cannot read template overrides {path}: {reason}")]
    Overrides { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptKind {
    AlignmentInference,
    AlignmentTraining,
    AnswerFactCheck,
    AnswerTableQA,
    AnswerMedicalMCQ,
    AnswerScienceMCQ,
    CoTBackground,
    GenReadBackground,
}

impl PromptKind {
    pub const ALL: [PromptKind; 8] = [
        PromptKind::AlignmentInference,
        PromptKind::AlignmentTraining,
        PromptKind::AnswerFactCheck,
        PromptKind::AnswerTableQA,
        PromptKind::AnswerMedicalMCQ,
        PromptKind::AnswerScienceMCQ,
        PromptKind::CoTBackground,
        PromptKind::GenReadBackground,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::AlignmentInference => "AlignmentInference",
            PromptKind::AlignmentTraining => "AlignmentTraining",
            PromptKind::AnswerFactCheck => "AnswerFactCheck",
            PromptKind::AnswerTableQA => "AnswerTableQA",
            PromptKind::AnswerMedicalMCQ => "AnswerMedicalMCQ",
            PromptKind::AnswerScienceMCQ => "AnswerScienceMCQ",
            PromptKind::CoTBackground => "CoTBackground",
            PromptKind::GenReadBackground => "GenReadBackground",
        }
    }

    pub fn answer_for(task: TaskKind) -> PromptKind {
        match task {
            TaskKind::FactCheck => PromptKind::AnswerFactCheck,
            TaskKind::TableQA => PromptKind::AnswerTableQA,
            TaskKind::MedicalMCQ => PromptKind::AnswerMedicalMCQ,
            TaskKind::ScienceMCQ => PromptKind::AnswerScienceMCQ,
        }
    }

    /// Placeholders the renderer supplies for this kind.
    fn placeholders(self) -> &'static [&'static str] {
        match self {
            PromptKind::AlignmentInference => &["instruction", "input"],
            PromptKind::AlignmentTraining => &["instruction", "input", "output"],
            PromptKind::AnswerFactCheck
            | PromptKind::AnswerTableQA
            | PromptKind::AnswerMedicalMCQ
            | PromptKind::AnswerScienceMCQ => &["background", "question", "query", "options", "context"],
            PromptKind::CoTBackground | PromptKind::GenReadBackground => {
                &["question", "query", "options", "context", "domain", "task"]
            }
        }
    }

    fn default_template(self) -> &'static str {
        match self {
            PromptKind::AlignmentInference => concat!(
                "Below is an instruction that describes a task, paired with an input that provides further context.\n",
                "Write a response that appropriately completes the request.\n",
                "### Instruction:\n{instruction}\n### Input:\n{input}\n### Response:\n"
            ),
            PromptKind::AlignmentTraining => concat!(
                "Below is an instruction that describes a task, paired with an input that provides further context.\n",
                "Write a response that appropriately completes the request.\n",
                "### Instruction:\n{instruction}\n### Input:\n{input}\n### Response:\n{output}"
            ),
            PromptKind::AnswerFactCheck => {
                "{#background}{background} \n\n {/background}claim: {query} \n\n Is the claim true or false?"
            }
            PromptKind::AnswerTableQA => concat!(
                "{#background}Refer to the background below and answer the following question with just a few words. ",
                "The answer should be less than 5 words.\n\n Background: {background}\n\n {/background}",
                "Question: {question}\n\n Answer:"
            ),
            PromptKind::AnswerMedicalMCQ => concat!(
                "{#background}Refer to the medical background below and answer the following question.\n",
                " Background: {background}\n\n{/background}",
                "Question: {question}\nOptions: {options}\n\nPlease only choose the answer from options. The answer is:"
            ),
            PromptKind::AnswerScienceMCQ => concat!(
                "Question: {question}\n{#background}BECAUSE: {background}\n{/background}",
                "Options: {options}\nPlease only choose the answer from options. The answer is:"
            ),
            PromptKind::CoTBackground => "{question}\nLet's think step-by-step",
            PromptKind::GenReadBackground => {
                "Please provide the background document from {domain} to {task}.\n{question}"
            }
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownKind(s.to_string()))
    }
}

/// Self-guiding baselines where the answering model writes its own background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelfGuide {
    CoT,
    GenRead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub text: String,
    pub placeholders_filled: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Var(String),
    Open(String),
    Close(String),
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits a template into literal text, placeholders and section markers.
/// Braces that do not enclose a valid name are literal.
fn parse_template(tpl: &str) -> Result<Vec<Piece>, TemplateError> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut rest = tpl;
    let mut open: Vec<String> = Vec::new();
    while let Some(start) = rest.find('{') {
        text.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let Some(end) = after.find('}') else {
            text.push_str(&rest[start..]);
            rest = "";
            break;
        };
        let inner = &after[..end];
        let piece = if let Some(name) = inner.strip_prefix('#').filter(|n| is_name(n)) {
            open.push(name.to_string());
            Some(Piece::Open(name.to_string()))
        } else if let Some(name) = inner.strip_prefix('/').filter(|n| is_name(n)) {
            match open.pop() {
                Some(o) if o == name => Some(Piece::Close(name.to_string())),
                _ => return Err(TemplateError::Malformed(format!("unbalanced section `{name}`"))),
            }
        } else if is_name(inner) {
            Some(Piece::Var(inner.to_string()))
        } else {
            None
        };
        match piece {
            Some(p) => {
                if !text.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                }
                pieces.push(p);
                rest = &after[end + 1..];
            }
            None => {
                text.push('{');
                rest = after;
            }
        }
    }
    text.push_str(rest);
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    if let Some(o) = open.pop() {
        return Err(TemplateError::Malformed(format!("section `{o}` is never closed")));
    }
    Ok(pieces)
}

fn render_pieces(pieces: &[Piece], values: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let mut out = String::new();
    let mut skip_depth = 0usize;
    for p in pieces {
        match p {
            Piece::Open(name) => {
                let filled = values.get(name).is_some_and(|v| !v.is_empty());
                if skip_depth > 0 || !filled {
                    skip_depth += 1;
                }
            }
            Piece::Close(_) => skip_depth = skip_depth.saturating_sub(1),
            _ if skip_depth > 0 => {}
            Piece::Text(t) => out.push_str(t),
            Piece::Var(name) => match values.get(name) {
                Some(v) => out.push_str(v),
                None => return Err(TemplateError::UnfilledPlaceholder(name.clone())),
            },
        }
    }
    Ok(out)
}

/// Default alignment instruction for a task.
pub fn instruction_for_task(kind: TaskKind) -> String {
    match kind {
        TaskKind::FactCheck => {
            "Generate a background document from Wikipedia to support or refute the statement.".into()
        }
        TaskKind::TableQA => "Generate a background table from Wikipedia to answer the given question.".into(),
        TaskKind::MedicalMCQ => {
            "Generate a background document from the medical domain to answer the given question.".into()
        }
        TaskKind::ScienceMCQ => {
            "Generate a background document from the science domain to answer the given question.".into()
        }
    }
}

/// Parses a task name and returns its default instruction.
pub fn instruction_for_task_name(name: &str) -> Result<String, TemplateError> {
    let kind = name
        .parse::<TaskKind>()
        .map_err(|_| TemplateError::UnsupportedTask(name.to_string()))?;
    Ok(instruction_for_task(kind))
}

/// `(domain, task)` fill-ins for the GenRead request.
pub fn genread_fill(kind: TaskKind) -> (&'static str, &'static str) {
    match kind {
        TaskKind::FactCheck => ("Wikipedia", "verify the claim"),
        TaskKind::TableQA => ("Wikipedia", "answer the question"),
        TaskKind::MedicalMCQ => ("the medical domain", "answer the question"),
        TaskKind::ScienceMCQ => ("the science domain", "answer the question"),
    }
}

/// `"(A) first (B) second ..."` in record order.
pub fn render_options(options: &[String]) -> Result<String, TemplateError> {
    if options.len() > 26 {
        return Err(TemplateError::TooManyOptions(options.len()));
    }
    Ok(options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("({}) {}", option_letter(i), o))
        .collect::<Vec<_>>()
        .join(" "))
}

/// The full set of templates in effect, defaults plus any overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<PromptKind, String>,
    science_instruction: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: PromptKind::ALL
                .into_iter()
                .map(|k| (k, k.default_template().to_string()))
                .collect(),
            science_instruction: instruction_for_task(TaskKind::ScienceMCQ),
        }
    }
}

/// Override-file key for the science alignment instruction.
pub const SCIENCE_INSTRUCTION_KEY: &str = "ScienceMCQInstruction";

impl TemplateSet {
    pub fn template(&self, kind: PromptKind) -> &str {
        &self.templates[&kind]
    }

    /// Replaces one template after checking it parses and only uses placeholders the kind supplies.
    pub fn set_template(&mut self, kind: PromptKind, tpl: impl Into<String>) -> Result<(), TemplateError> {
        let tpl = tpl.into();
        for p in parse_template(&tpl)? {
            if let Piece::Var(n) | Piece::Open(n) = &p {
                if !kind.placeholders().contains(&n.as_str()) {
                    return Err(TemplateError::Malformed(format!(
                        "{kind} does not supply placeholder `{n}`"
                    )));
                }
            }
        }
        self.templates.insert(kind, tpl);
        Ok(())
    }

    pub fn set_science_instruction(&mut self, s: impl Into<String>) {
        self.science_instruction = s.into();
    }

    /// Applies a JSON object of `PromptKind name -> template string` on top of the defaults.
    pub fn from_overrides_json(json: &str) -> Result<Self, TemplateError> {
        let map: BTreeMap<String, String> =
            serde_json::from_str(json).map_err(|e| TemplateError::Overrides {
                path: "<inline>".into(),
                reason: e.to_string(),
            })?;
        let mut set = TemplateSet::default();
        for (key, tpl) in map {
            if key == SCIENCE_INSTRUCTION_KEY {
                set.set_science_instruction(tpl);
            } else {
                set.set_template(key.parse()?, tpl)?;
            }
        }
        Ok(set)
    }

    pub fn load_overrides(path: &Path) -> Result<Self, TemplateError> {
        let json = fs::read_to_string(path).map_err(|e| TemplateError::Overrides {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_overrides_json(&json)
    }

    /// Hex SHA-256 over every template and the science instruction.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.templates {
            for part in [k.as_str(), v.as_str()] {
                h.update((part.len() as u64).to_le_bytes());
                h.update(part.as_bytes());
            }
        }
        h.update(self.science_instruction.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn instruction_for(&self, kind: TaskKind) -> String {
        match kind {
            TaskKind::ScienceMCQ => self.science_instruction.clone(),
            other => instruction_for_task(other),
        }
    }

    fn render(&self, kind: PromptKind, values: BTreeMap<String, String>) -> Result<RenderedPrompt, TemplateError> {
        let pieces = parse_template(self.template(kind))?;
        let text = render_pieces(&pieces, &values)?;
        Ok(RenderedPrompt {
            kind,
            text,
            placeholders_filled: values,
        })
    }

    /// Alignment prompt; with `output` it is a training example, without it an inference prompt.
    pub fn render_alignment(
        &self,
        instruction: &str,
        input: &str,
        output: Option<&str>,
    ) -> Result<RenderedPrompt, TemplateError> {
        if instruction.is_empty() {
            return Err(TemplateError::EmptyField("instruction"));
        }
        if input.is_empty() {
            return Err(TemplateError::EmptyField("input"));
        }
        let mut values = BTreeMap::from([
            ("instruction".to_string(), instruction.to_string()),
            ("input".to_string(), input.to_string()),
        ]);
        let kind = match output {
            Some(o) => {
                values.insert("output".into(), o.to_string());
                PromptKind::AlignmentTraining
            }
            None => PromptKind::AlignmentInference,
        };
        self.render(kind, values)
    }

    fn record_values(record: &TaskRecord) -> Result<BTreeMap<String, String>, TemplateError> {
        if record.question.trim().is_empty() {
            return Err(TemplateError::EmptyQuestion);
        }
        Ok(BTreeMap::from([
            ("question".to_string(), record.question.clone()),
            ("query".to_string(), record.question.clone()),
            ("options".to_string(), render_options(&record.options)?),
            ("context".to_string(), record.context.clone().unwrap_or_default()),
        ]))
    }

    /// Answer prompt embedding `background`; an empty background drops the background block.
    pub fn render_answer_prompt(
        &self,
        background: &str,
        record: &TaskRecord,
    ) -> Result<RenderedPrompt, TemplateError> {
        let mut values = Self::record_values(record)?;
        values.insert("background".into(), background.to_string());
        self.render(PromptKind::answer_for(record.task_kind), values)
    }

    /// Prompt asking the answering model to produce its own background.
    ///
    /// For multiple-choice records the `{question}` value carries an
    /// `Options:` line so the model sees the choices it reasons about.
    pub fn self_guiding_prompt(&self, guide: SelfGuide, record: &TaskRecord) -> Result<RenderedPrompt, TemplateError> {
        let mut values = Self::record_values(record)?;
        if record.task_kind.is_mcq() {
            let q = format!("{}\nOptions: {}", record.question, values["options"]);
            values.insert("question".into(), q);
        }
        let (domain, task) = genread_fill(record.task_kind);
        values.insert("domain".into(), domain.into());
        values.insert("task".into(), task.into());
        let kind = match guide {
            SelfGuide::CoT => PromptKind::CoTBackground,
            SelfGuide::GenRead => PromptKind::GenReadBackground,
        };
        self.render(kind, values)
    }
}

/// Renders with the default templates.
pub fn render_alignment(instruction: &str, input: &str, output: Option<&str>) -> Result<RenderedPrompt, TemplateError> {
    TemplateSet::default().render_alignment(instruction, input, output)
}

/// Renders with the default templates.
pub fn render_answer_prompt(background: &str, record: &TaskRecord) -> Result<RenderedPrompt, TemplateError> {
    TemplateSet::default().render_answer_prompt(background, record)
}

/// Renders with the default templates.
pub fn self_guiding_prompt(guide: SelfGuide, record: &TaskRecord) -> Result<RenderedPrompt, TemplateError> {
    TemplateSet::default().self_guiding_prompt(guide, record)
}

/// Recovers `(instruction, input, output)` from a default-format alignment string.
pub fn parse_alignment(text: &str) -> Option<(String, String, Option<String>)> {
    let body = text.strip_prefix(ALIGNMENT_HEAD)?;
    let (instruction, rest) = body.split_once(ALIGNMENT_MID)?;
    let (input, output) = rest.split_once(ALIGNMENT_TAIL)?;
    let output = (!output.is_empty()).then(|| output.to_string());
    Some((instruction.to_string(), input.to_string(), output))
}

/// Byte length of the alignment skeleton with every placeholder empty.
pub fn alignment_skeleton_len() -> usize {
    ALIGNMENT_HEAD.len() + ALIGNMENT_MID.len() + ALIGNMENT_TAIL.len()
}

pub fn ends_with_cot_suffix(text: &str) -> bool {
    text.ends_with(COT_SUFFIX)
}
