//! The think-verbalize-cite action grammar.
//!
//! A policy model talks to the search engine through four line-oriented
//! actions:
//!
//! ```text
//! Search: <query>
//! Reflexion: <thought>
//! Output: <sentence with [n] citation markers>
//! End
//! ```
//!
//! Retrieved passages are shown back to the model as
//! `Document [n] (Title: <title>) <body>` lines, numbered from 1 in the order
//! they were first shown within one question. Citation markers in `Output`
//! lines refer to those numbers.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Passage;

/// Most citations a single sentence may carry.
pub const MAX_CITATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("unrecognized action: {raw:?}")]
    UnknownAction { raw: String },
    #[error("action {keyword} has an empty payload")]
    EmptyPayload { keyword: &'static str },
    #[error("empty model output")]
    Empty,
    #[error("expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: String },
    #[error("transcript line {line}: {message}")]
    Transcript { line: usize, message: String },
    #[error("template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no cited document is visible (cited {cited:?})")]
pub struct CitationError {
    pub cited: Vec<u32>,
}

/// An `Output` action: the sentence as emitted (markers included) and the
/// question-local document numbers it cites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputAction {
    pub sentence: String,
    pub citations: Vec<u32>,
}

impl OutputAction {
    pub fn new(sentence: impl Into<String>) -> Self {
        let sentence = sentence.into();
        let citations = extract_citations(&sentence).citations;
        Self {
            sentence,
            citations,
        }
    }

    /// The sentence with every citation marker removed.
    pub fn clean(&self) -> String {
        extract_citations(&self.sentence).clean
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Search { query: String },
    Reflexion { thought: String },
    Output(OutputAction),
    End,
}

impl Action {
    pub fn keyword(&self) -> &'static str {
        match self {
            Action::Search { .. } => "Search",
            Action::Reflexion { .. } => "Reflexion",
            Action::Output(_) => "Output",
            Action::End => "End",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Search { query } => write!(f, "Search: {query}"),
            Action::Reflexion { thought } => write!(f, "Reflexion: {thought}"),
            Action::Output(out) => write!(f, "Output: {}", out.sentence),
            Action::End => f.write_str("End"),
        }
    }
}

impl FromStr for Action {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action(s)
    }
}

/// Parses the first non-empty line of raw model output into an [`Action`].
///
/// Keywords are matched case-insensitively; `Search`, `Reflexion` and
/// `Output` must be followed by a colon. Triple quotes around the action, as
/// they appear in the instruction text, are tolerated.
pub fn parse_action(raw: &str) -> Result<Action, ProtocolError> {
    let line = raw
        .lines()
        .map(|l| l.trim().trim_matches('"').trim())
        .find(|l| !l.is_empty())
        .ok_or(ProtocolError::Empty)?;

    if let Some((head, rest)) = line.split_once(':') {
        let payload = rest.trim();
        let keyword = head.trim();
        let kind = if keyword.eq_ignore_ascii_case("search") {
            Some("Search")
        } else if keyword.eq_ignore_ascii_case("reflexion") {
            Some("Reflexion")
        } else if keyword.eq_ignore_ascii_case("output") {
            Some("Output")
        } else {
            None
        };
        if let Some(kind) = kind {
            if payload.is_empty() {
                return Err(ProtocolError::EmptyPayload { keyword: kind });
            }
            return Ok(match kind {
                "Search" => Action::Search {
                    query: payload.to_string(),
                },
                "Reflexion" => Action::Reflexion {
                    thought: payload.to_string(),
                },
                _ => Action::Output(OutputAction::new(payload)),
            });
        }
    }

    let bare = line.trim_end_matches(|c: char| c.is_ascii_punctuation());
    if bare.eq_ignore_ascii_case("end") {
        return Ok(Action::End);
    }
    Err(ProtocolError::UnknownAction {
        raw: raw.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedCitations {
    pub clean: String,
    pub citations: Vec<u32>,
    /// Distinct citations beyond the cap, in order of appearance.
    pub overflow: Vec<u32>,
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d+)\]").unwrap())
}

fn space_before_punct_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s+([.,;:!?])").unwrap())
}

/// Collects `[n]` markers in order of first appearance, keeping at most
/// [`MAX_CITATIONS`] distinct numbers, and returns the marker-free sentence.
pub fn extract_citations(sentence: &str) -> ExtractedCitations {
    let mut citations = Vec::new();
    let mut overflow = Vec::new();
    for cap in marker_re().captures_iter(sentence) {
        let Ok(n) = cap[1].parse::<u32>() else {
            continue;
        };
        if citations.contains(&n) || overflow.contains(&n) {
            continue;
        }
        if citations.len() < MAX_CITATIONS {
            citations.push(n);
        } else {
            overflow.push(n);
        }
    }
    if !overflow.is_empty() {
        log::warn!(
            "sentence cites {} documents, dropping {:?}",
            citations.len() + overflow.len(),
            overflow
        );
    }
    let stripped = marker_re().replace_all(sentence, " ");
    let collapsed = stripped.split_whitespace().collect::<Vec<_>>().join(" ");
    let clean = space_before_punct_re()
        .replace_all(&collapsed, "$1")
        .into_owned();
    ExtractedCitations {
        clean,
        citations,
        overflow,
    }
}

/// Rewrites the sentence's markers with `map`; markers mapped to `None` are
/// removed.
pub fn rewrite_markers(sentence: &str, map: impl Fn(u32) -> Option<u32>) -> String {
    let replaced = marker_re().replace_all(sentence, |cap: &regex::Captures| {
        match cap[1].parse::<u32>().ok().and_then(&map) {
            Some(n) => format!("[{n}]"),
            None => String::new(),
        }
    });
    let collapsed = replaced.split_whitespace().collect::<Vec<_>>().join(" ");
    space_before_punct_re()
        .replace_all(&collapsed, "$1")
        .into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedOutput {
    pub output: OutputAction,
    pub removed: Vec<u32>,
}

/// Keeps only citations that name a visible document. Markers of dropped
/// citations (including ones over the cap) are removed from the sentence.
pub fn validate_citations(
    output: &OutputAction,
    visible: &BTreeSet<u32>,
) -> Result<ValidatedOutput, CitationError> {
    let kept: Vec<u32> = output
        .citations
        .iter()
        .copied()
        .filter(|c| visible.contains(c))
        .take(MAX_CITATIONS)
        .collect();
    let removed: Vec<u32> = output
        .citations
        .iter()
        .copied()
        .filter(|c| !kept.contains(c))
        .collect();
    if kept.is_empty() && !removed.is_empty() {
        return Err(CitationError {
            cited: output.citations.clone(),
        });
    }
    if !removed.is_empty() {
        log::warn!("dropping citations {removed:?} not among visible documents");
    }
    let sentence = rewrite_markers(&output.sentence, |n| kept.contains(&n).then_some(n));
    Ok(ValidatedOutput {
        output: OutputAction {
            sentence,
            citations: kept,
        },
        removed,
    })
}

/// One `Search` call and the passages it returned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchRound {
    pub query: String,
    pub passages: Vec<Passage>,
}

/// The sentence a turn ended with, plus its citations both as prompt-local
/// document numbers and as corpus passage ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnOutput {
    pub sentence: String,
    pub citations: Vec<u32>,
    pub cited_passages: Vec<u32>,
}

/// One think-verbalize-cite step: the searches issued (the last one is the
/// effective query), the reflections between them, and the cited sentence.
/// A turn without output is still in progress.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub rounds: Vec<SearchRound>,
    pub reflections: Vec<String>,
    pub output: Option<TurnOutput>,
}

impl Turn {
    pub fn query(&self) -> &str {
        self.rounds.last().map_or("", |r| r.query.as_str())
    }

    pub fn retrieved(&self) -> &[Passage] {
        self.rounds.last().map_or(&[], |r| r.passages.as_slice())
    }

    pub fn sentence(&self) -> Option<&str> {
        self.output.as_ref().map(|o| o.sentence.as_str())
    }

    pub fn document_count(&self) -> usize {
        self.rounds.iter().map(|r| r.passages.len()).sum()
    }

    /// Transcript lines in the order they were produced.
    pub fn lines(&self, first_number: u32) -> Vec<String> {
        let mut out = Vec::new();
        let mut number = first_number;
        for (i, round) in self.rounds.iter().enumerate() {
            out.push(
                Action::Search {
                    query: round.query.clone(),
                }
                .to_string(),
            );
            for p in &round.passages {
                out.push(render_document(number, &p.title, &p.body));
                number += 1;
            }
            if let Some(thought) = self.reflections.get(i) {
                out.push(
                    Action::Reflexion {
                        thought: thought.clone(),
                    }
                    .to_string(),
                );
            }
        }
        if let Some(o) = &self.output {
            out.push(format!("Output: {}", o.sentence));
        }
        out
    }
}

pub fn render_document(number: u32, title: &str, body: &str) -> String {
    format!("Document [{number}] (Title: {title}) {body}")
}

/// Documents shown so far, as (prompt number, passage), numbered from 1.
pub fn visible_documents<'a>(
    history: &'a [Turn],
    pending: Option<&'a Turn>,
) -> Vec<(u32, &'a Passage)> {
    history
        .iter()
        .chain(pending)
        .flat_map(|t| t.rounds.iter())
        .flat_map(|r| r.passages.iter())
        .enumerate()
        .map(|(i, p)| (i as u32 + 1, p))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Asqa,
    Qampari,
    Eli5,
}

impl DatasetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::Asqa => "asqa",
            DatasetTag::Qampari => "qampari",
            DatasetTag::Eli5 => "eli5",
        }
    }
}

impl FromStr for DatasetTag {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "asqa" => Ok(DatasetTag::Asqa),
            "qampari" => Ok(DatasetTag::Qampari),
            "eli5" => Ok(DatasetTag::Eli5),
            other => Err(ProtocolError::Template(format!(
                "unknown dataset {other:?}"
            ))),
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEMONSTRATIONS_PER_TEMPLATE: usize = 4;

const DEMO_MARKER: &str = "### DEMONSTRATION";
const QUERY_MARKER: &str = "### QUERY";

/// Few-shot agent prompt.
///
/// On disk a template is plain text: the instruction, then each
/// demonstration after a `### DEMONSTRATION` line, then the question block
/// after a `### QUERY` line. The question block must contain `{question}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub dataset: DatasetTag,
    pub instruction: String,
    pub demonstrations: Vec<String>,
    pub query_block: String,
}

impl PromptTemplate {
    pub fn parse(dataset: DatasetTag, text: &str) -> Result<Self, ProtocolError> {
        let (head, query) = text
            .split_once(QUERY_MARKER)
            .ok_or_else(|| ProtocolError::Template(format!("missing {QUERY_MARKER} section")))?;
        let mut parts = head.split(DEMO_MARKER);
        let instruction = parts.next().unwrap_or_default().trim().to_string();
        let demonstrations: Vec<String> = parts.map(|d| d.trim().to_string()).collect();
        let template = Self {
            dataset,
            instruction,
            demonstrations,
            query_block: query.trim().to_string(),
        };
        template.validate()?;
        Ok(template)
    }

    pub fn load(dataset: DatasetTag, path: &Path) -> Result<Self, ProtocolError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ProtocolError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(dataset, &text)
    }

    pub fn builtin(dataset: DatasetTag) -> Self {
        let text = match dataset {
            DatasetTag::Asqa => include_str!("../templates/asqa.txt"),
            DatasetTag::Qampari => include_str!("../templates/qampari.txt"),
            DatasetTag::Eli5 => include_str!("../templates/eli5.txt"),
        };
        Self::parse(dataset, text).expect("shipped template is valid")
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.instruction.is_empty() {
            return Err(ProtocolError::Template("empty instruction".into()));
        }
        if self.demonstrations.len() != DEMONSTRATIONS_PER_TEMPLATE {
            return Err(ProtocolError::Template(format!(
                "expected {DEMONSTRATIONS_PER_TEMPLATE} demonstrations, found {}",
                self.demonstrations.len()
            )));
        }
        if !self.query_block.contains("{question}") {
            return Err(ProtocolError::Template(
                "query block lacks {question}".into(),
            ));
        }
        for (i, demo) in self.demonstrations.iter().enumerate() {
            Transcript::parse(demo)
                .map_err(|e| ProtocolError::Template(format!("demonstration {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn to_file_text(&self) -> String {
        let mut out = self.instruction.clone();
        for d in &self.demonstrations {
            out.push_str(&format!("\n{DEMO_MARKER}\n{d}"));
        }
        out.push_str(&format!("\n{QUERY_MARKER}\n{}\n", self.query_block));
        out
    }
}

/// Serializes the agent prompt: instruction, demonstrations, the question,
/// then every line of `history` followed by the in-progress `pending` turn.
pub fn render_prompt(
    template: &PromptTemplate,
    question: &str,
    history: &[Turn],
    pending: Option<&Turn>,
) -> String {
    let mut out = String::new();
    out.push_str(&template.instruction);
    out.push('\n');
    for demo in &template.demonstrations {
        out.push('\n');
        out.push_str(demo);
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&template.query_block.replace("{question}", question));
    let mut number = 1;
    for turn in history.iter().chain(pending) {
        for line in turn.lines(number) {
            out.push('\n');
            out.push_str(&line);
        }
        number += turn.document_count() as u32;
    }
    out
}

/// Prompt asking whether the evidence of the latest search is enough to write
/// the next sentence. Expected reply: `Yes` or `No`.
pub fn render_support_judgment(question: &str, round: &SearchRound, first_number: u32) -> String {
    let mut out = format!("Question: {question}\nSearch: {}\n", round.query);
    for (i, p) in round.passages.iter().enumerate() {
        out.push_str(&render_document(first_number + i as u32, &p.title, &p.body));
        out.push('\n');
    }
    out.push_str(
        "Do the documents above provide valid information for writing the next sentence \
         of the answer? Answer Yes or No.\nAnswer:",
    );
    out
}

/// Reads a Yes/No style judgment; anything that is not affirmative counts as
/// insufficient evidence.
pub fn parse_support_judgment(raw: &str) -> bool {
    let word = raw
        .trim()
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())
        .unwrap_or("")
        .to_ascii_lowercase();
    matches!(word.as_str(), "yes" | "supportive" | "true" | "1")
}

/// A `Document [n] (...)` line in a transcript. Some published
/// demonstrations omit the `Title:` label; `labeled` keeps that verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentLine {
    pub number: u32,
    pub title: String,
    pub labeled: bool,
    pub text: String,
}

impl fmt::Display for DocumentLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.labeled {
            f.write_str(&render_document(self.number, &self.title, &self.text))
        } else {
            write!(
                f,
                "Document [{}] ({}) {}",
                self.number, self.title, self.text
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TranscriptLine {
    Question(String),
    Document(DocumentLine),
    Action(Action),
}

impl fmt::Display for TranscriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TranscriptLine::Question(q) => write!(f, "Question: {q}"),
            TranscriptLine::Document(d) => d.fmt(f),
            TranscriptLine::Action(a) => a.fmt(f),
        }
    }
}

/// A complete worked example: one question and its action/document lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub lines: Vec<TranscriptLine>,
}

fn parse_document_line(line: &str) -> Option<DocumentLine> {
    let rest = line.strip_prefix("Document [")?;
    let (num, rest) = rest.split_once(']')?;
    let number = num.parse().ok()?;
    let rest = rest.strip_prefix(" (")?;
    // titles may contain parentheses, so find the matching close
    let mut depth = 1usize;
    let mut close = None;
    for (i, c) in rest.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 {
                    close = Some(i);
                    break;
                }
            }
            _ => {}
        }
    }
    let close = close?;
    let header = &rest[..close];
    let text = rest[close + 1..]
        .strip_prefix(' ')
        .unwrap_or(&rest[close + 1..]);
    let (title, labeled) = match header.strip_prefix("Title: ") {
        Some(t) => (t.to_string(), true),
        None => (header.to_string(), false),
    };
    Some(DocumentLine {
        number,
        title,
        labeled,
        text: text.to_string(),
    })
}

impl Transcript {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let mut lines = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ProtocolError::Transcript {
                line: idx + 1,
                message,
            };
            if let Some(q) = line.strip_prefix("Question: ") {
                lines.push(TranscriptLine::Question(q.to_string()));
            } else if line.starts_with("Document [") {
                let doc = parse_document_line(line)
                    .ok_or_else(|| err(format!("malformed document line {line:?}")))?;
                lines.push(TranscriptLine::Document(doc));
            } else {
                let action = parse_action(line).map_err(|e| err(e.to_string()))?;
                lines.push(TranscriptLine::Action(action));
            }
        }
        if !matches!(lines.first(), Some(TranscriptLine::Question(_))) {
            return Err(ProtocolError::Transcript {
                line: 1,
                message: "transcript must start with a Question line".into(),
            });
        }
        Ok(Self { lines })
    }

    pub fn render(&self) -> String {
        self.lines
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn question(&self) -> &str {
        match self.lines.first() {
            Some(TranscriptLine::Question(q)) => q,
            _ => "",
        }
    }

    pub fn actions(&self) -> Vec<Action> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                TranscriptLine::Action(a) => Some(a.clone()),
                _ => None,
            })
            .collect()
    }

    /// Rebuilds the turn history the transcript describes. Passage ids are
    /// the zero-based document numbers. Returns the turns and whether the
    /// transcript ended with `End`.
    pub fn to_turns(&self) -> Result<(Vec<Turn>, bool), ProtocolError> {
        let mut turns = Vec::new();
        let mut current = Turn::default();
        let mut ended = false;
        let mut expected_number = 1u32;
        for (idx, line) in self.lines.iter().enumerate().skip(1) {
            let err = |message: &str| ProtocolError::Transcript {
                line: idx + 1,
                message: message.to_string(),
            };
            if ended {
                return Err(err("lines after End"));
            }
            match line {
                TranscriptLine::Question(_) => return Err(err("second Question line")),
                TranscriptLine::Document(d) => {
                    if d.number != expected_number {
                        return Err(err("document numbers must be consecutive"));
                    }
                    expected_number += 1;
                    let round = current
                        .rounds
                        .last_mut()
                        .ok_or_else(|| err("document before any Search"))?;
                    round.passages.push(Passage::new(
                        d.number - 1,
                        d.title.clone(),
                        d.text.clone(),
                    ));
                }
                TranscriptLine::Action(Action::Search { query }) => {
                    current.rounds.push(SearchRound {
                        query: query.clone(),
                        passages: Vec::new(),
                    });
                }
                TranscriptLine::Action(Action::Reflexion { thought }) => {
                    if current.rounds.len() != current.reflections.len() + 1 {
                        return Err(err("Reflexion must follow a Search"));
                    }
                    current.reflections.push(thought.clone());
                }
                TranscriptLine::Action(Action::Output(out)) => {
                    if current.rounds.is_empty() {
                        return Err(err("Output before any Search"));
                    }
                    let visible: BTreeSet<u32> = (1..expected_number).collect();
                    let checked =
                        validate_citations(out, &visible).map_err(|e| err(&e.to_string()))?;
                    if checked.output != *out {
                        return Err(err("Output cites documents that were not shown"));
                    }
                    current.output = Some(TurnOutput {
                        sentence: out.sentence.clone(),
                        citations: out.citations.clone(),
                        cited_passages: out.citations.iter().map(|c| c - 1).collect(),
                    });
                    turns.push(std::mem::take(&mut current));
                }
                TranscriptLine::Action(Action::End) => ended = true,
            }
        }
        if !current.rounds.is_empty() {
            turns.push(current);
        }
        Ok((turns, ended))
    }
}
