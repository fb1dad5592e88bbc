//! Rule-table backend for offline, deterministic runs.
//!
//! A fixture is a JSON object with optional `generate`, `score` and `entail`
//! arrays. Rules are tried in order and the first match wins; an input no
//! rule matches is an error, so fixtures have to cover every call a run
//! makes.
//!
//! ```json
//! {
//!   "generate": [{"prompt": {"ends_with": "Question: Q1"}, "responses": ["Search: q1", "End"]}],
//!   "score":    [{"continuation": {"exact": "A sentence."}, "logprob": -3.5}],
//!   "entail":   [{"premise": {"contains": "Matt Prater"}, "hypothesis": "any", "entailed": true}]
//! }
//! ```
//!
//! A generate rule with several responses picks `responses[seed % len]`, so
//! sampling several children from one prompt with consecutive seeds walks
//! through the alternatives.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, ContinuationScore, EntailmentBackend, GenerationParams, PolicyBackend,
    ScoringBackend,
};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    #[default]
    Any,
    Exact(String),
    Contains(String),
    StartsWith(String),
    EndsWith(String),
    Regex(String),
}

impl Matcher {
    pub fn exact(s: impl Into<String>) -> Self {
        Matcher::Exact(s.into())
    }

    pub fn contains(s: impl Into<String>) -> Self {
        Matcher::Contains(s.into())
    }

    pub fn ends_with(s: impl Into<String>) -> Self {
        Matcher::EndsWith(s.into())
    }

    pub fn regex(s: impl Into<String>) -> Self {
        Matcher::Regex(s.into())
    }
}

#[derive(Debug)]
enum Compiled {
    Any,
    Exact(String),
    Contains(String),
    StartsWith(String),
    EndsWith(String),
    Regex(Regex),
}

impl Compiled {
    fn new(m: &Matcher) -> Result<Self, BackendError> {
        Ok(match m {
            Matcher::Any => Compiled::Any,
            Matcher::Exact(s) => Compiled::Exact(s.clone()),
            Matcher::Contains(s) => Compiled::Contains(s.clone()),
            Matcher::StartsWith(s) => Compiled::StartsWith(s.clone()),
            Matcher::EndsWith(s) => Compiled::EndsWith(s.clone()),
            Matcher::Regex(s) => Compiled::Regex(
                Regex::new(s)
                    .map_err(|e| BackendError::Config(format!("bad rule regex {s:?}: {e}")))?,
            ),
        })
    }

    fn is_match(&self, text: &str) -> bool {
        match self {
            Compiled::Any => true,
            Compiled::Exact(s) => text == s,
            Compiled::Contains(s) => text.contains(s.as_str()),
            Compiled::StartsWith(s) => text.starts_with(s.as_str()),
            Compiled::EndsWith(s) => text.ends_with(s.as_str()),
            Compiled::Regex(re) => re.is_match(text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRule {
    pub prompt: Matcher,
    pub responses: Vec<String>,
}

impl GenerateRule {
    pub fn new<I, S>(prompt: Matcher, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            prompt,
            responses: responses.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRule {
    #[serde(default)]
    pub context: Matcher,
    pub continuation: Matcher,
    pub logprob: f64,
    /// Defaults to the whitespace token count of the continuation.
    #[serde(default)]
    pub tokens: Option<usize>,
}

impl ScoreRule {
    pub fn new(context: Matcher, continuation: Matcher, logprob: f64) -> Self {
        Self {
            context,
            continuation,
            logprob,
            tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailRule {
    #[serde(default)]
    pub premise: Matcher,
    #[serde(default)]
    pub hypothesis: Matcher,
    pub entailed: bool,
}

impl EntailRule {
    pub fn new(premise: Matcher, hypothesis: Matcher, entailed: bool) -> Self {
        Self {
            premise,
            hypothesis,
            entailed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRules {
    #[serde(default)]
    pub generate: Vec<GenerateRule>,
    #[serde(default)]
    pub score: Vec<ScoreRule>,
    #[serde(default)]
    pub entail: Vec<EntailRule>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedCall {
    pub kind: &'static str,
    pub input: String,
    pub rule: Option<usize>,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    rules: ScriptRules,
    generate: Vec<Compiled>,
    score: Vec<(Compiled, Compiled)>,
    entail: Vec<(Compiled, Compiled)>,
    calls: Mutex<Vec<ScriptedCall>>,
}

impl ScriptedBackend {
    pub fn new(rules: ScriptRules) -> Result<Self, BackendError> {
        let generate = rules
            .generate
            .iter()
            .map(|r| {
                if r.responses.is_empty() {
                    return Err(BackendError::Config(
                        "generate rule without responses".into(),
                    ));
                }
                Compiled::new(&r.prompt)
            })
            .collect::<Result<_, _>>()?;
        let score = rules
            .score
            .iter()
            .map(|r| Ok((Compiled::new(&r.context)?, Compiled::new(&r.continuation)?)))
            .collect::<Result<_, BackendError>>()?;
        let entail = rules
            .entail
            .iter()
            .map(|r| Ok((Compiled::new(&r.premise)?, Compiled::new(&r.hypothesis)?)))
            .collect::<Result<_, BackendError>>()?;
        Ok(Self {
            rules,
            generate,
            score,
            entail,
            calls: Mutex::new(Vec::new()),
        })
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        let rules: ScriptRules = serde_json::from_str(json)
            .map_err(|e| BackendError::Config(format!("scripted fixture: {e}")))?;
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
    }

    pub fn rules(&self) -> &ScriptRules {
        &self.rules
    }

    pub fn calls(&self) -> Vec<ScriptedCall> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    fn log(&self, kind: &'static str, input: String, rule: Option<usize>) {
        self.calls
            .lock()
            .expect("call log poisoned")
            .push(ScriptedCall { kind, input, rule });
    }
}

impl PolicyBackend for ScriptedBackend {
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        let hit = self.generate.iter().position(|m| m.is_match(prompt));
        self.log("generate", prompt.to_string(), hit);
        let idx = hit.ok_or_else(|| BackendError::Unscripted {
            kind: "generate",
            input: tail(prompt),
        })?;
        let responses = &self.rules.generate[idx].responses;
        let pick = params.seed.unwrap_or(0) % responses.len() as u64;
        Ok(responses[pick as usize].clone())
    }
}

impl ScoringBackend for ScriptedBackend {
    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError> {
        let hit = self
            .score
            .iter()
            .position(|(c, k)| c.is_match(context) && k.is_match(continuation));
        self.log("score", format!("{context}\u{1f}{continuation}"), hit);
        let idx = hit.ok_or_else(|| BackendError::Unscripted {
            kind: "score",
            input: continuation.to_string(),
        })?;
        let rule = &self.rules.score[idx];
        Ok(ContinuationScore {
            logprob: rule.logprob,
            token_count: rule
                .tokens
                .unwrap_or_else(|| continuation.split_whitespace().count()),
        })
    }

    fn probe(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

impl EntailmentBackend for ScriptedBackend {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool, BackendError> {
        let hit = self
            .entail
            .iter()
            .position(|(p, h)| p.is_match(premise) && h.is_match(hypothesis));
        self.log("entail", format!("{premise}\u{1f}{hypothesis}"), hit);
        let idx = hit.ok_or_else(|| BackendError::Unscripted {
            kind: "entail",
            input: hypothesis.to_string(),
        })?;
        Ok(self.rules.entail[idx].entailed)
    }
}

fn tail(prompt: &str) -> String {
    let chars: Vec<char> = prompt.chars().collect();
    let start = chars.len().saturating_sub(200);
    chars[start..].iter().collect()
}
