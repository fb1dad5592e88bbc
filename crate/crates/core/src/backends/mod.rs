//! Interfaces to the external models and the per-run call ledger.
//!
//! Three kinds of model are involved in a search: a policy that writes
//! actions (and, possibly aliased, a reflector that critiques retrieval), a
//! pair of scorers giving continuation log-likelihoods under the aligned
//! policy and its reference, and an entailment judge.

mod openai;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use openai::{OpenAiBackend, OpenAiConfig, RouteKind};
pub use scripted::{
    EntailRule, GenerateRule, Matcher, ScoreRule, ScriptRules, ScriptedBackend, ScriptedCall,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempts: {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("backend lacks a required capability: {0}")]
    Capability(String),
    #[error("scripted backend has no rule for {kind} input {input:?}")]
    Unscripted { kind: &'static str, input: String },
    #[error("malformed backend response: {0}")]
    Response(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 256,
            stop: vec!["\n".to_string()],
            seed: None,
        }
    }
}

/// Summed token log-probability of a continuation and its token count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationScore {
    pub logprob: f64,
    pub token_count: usize,
}

pub trait PolicyBackend: Send + Sync {
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError>;
}

pub trait ScoringBackend: Send + Sync {
    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError>;

    /// Checked once before a search starts.
    fn probe(&self) -> Result<(), BackendError> {
        self.score_continuation("", "probe").map(|_| ())
    }
}

pub trait EntailmentBackend: Send + Sync {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Policy,
    Reflector,
    ScorerPolicy,
    ScorerReference,
    Judge,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Policy,
        Role::Reflector,
        Role::ScorerPolicy,
        Role::ScorerReference,
        Role::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Policy => "policy",
            Role::Reflector => "reflector",
            Role::ScorerPolicy => "scorer_policy",
            Role::ScorerReference => "scorer_reference",
            Role::Judge => "judge",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub prompt_hash: String,
    pub latency_ms: f64,
    pub ok: bool,
}

/// Append-only record of every backend call made through a [`BackendSet`].
#[derive(Debug, Default)]
pub struct CallLedger {
    records: Mutex<Vec<CallRecord>>,
}

impl CallLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, record: CallRecord) {
        self.records.lock().expect("ledger poisoned").push(record);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().expect("ledger poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("ledger poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, role: Role) -> usize {
        self.records
            .lock()
            .expect("ledger poisoned")
            .iter()
            .filter(|r| r.role == role)
            .count()
    }

    /// Calls per role; every role is present, zero counts included.
    pub fn summary(&self) -> BTreeMap<Role, usize> {
        let mut out: BTreeMap<Role, usize> = Role::ALL.iter().map(|&r| (r, 0)).collect();
        for r in self.records.lock().expect("ledger poisoned").iter() {
            *out.entry(r.role).or_default() += 1;
        }
        out
    }
}

pub fn prompt_hash(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// The five model roles a search needs, plus the ledger their calls go to.
/// Roles may share one underlying backend.
#[derive(Clone)]
pub struct BackendSet {
    pub policy: Arc<dyn PolicyBackend>,
    pub reflector: Arc<dyn PolicyBackend>,
    pub scorer_policy: Arc<dyn ScoringBackend>,
    pub scorer_reference: Arc<dyn ScoringBackend>,
    pub judge: Arc<dyn EntailmentBackend>,
    ledger: Arc<CallLedger>,
}

impl fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendSet")
            .field("calls", &self.ledger.len())
            .finish_non_exhaustive()
    }
}

impl BackendSet {
    pub fn new(
        policy: Arc<dyn PolicyBackend>,
        reflector: Arc<dyn PolicyBackend>,
        scorer_policy: Arc<dyn ScoringBackend>,
        scorer_reference: Arc<dyn ScoringBackend>,
        judge: Arc<dyn EntailmentBackend>,
    ) -> Self {
        Self {
            policy,
            reflector,
            scorer_policy,
            scorer_reference,
            judge,
            ledger: Arc::new(CallLedger::new()),
        }
    }

    /// Every role served by the same scripted backend.
    pub fn from_scripted(backend: ScriptedBackend) -> Self {
        let b = Arc::new(backend);
        Self::new(b.clone(), b.clone(), b.clone(), b.clone(), b)
    }

    /// The same backends with a fresh, empty ledger.
    pub fn with_fresh_ledger(&self) -> Self {
        Self {
            ledger: Arc::new(CallLedger::new()),
            ..self.clone()
        }
    }

    pub fn ledger(&self) -> &CallLedger {
        &self.ledger
    }

    fn record<T>(
        &self,
        role: Role,
        parts: &[&str],
        f: impl FnOnce() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let start = Instant::now();
        let result = f();
        self.ledger.push(CallRecord {
            role,
            prompt_hash: prompt_hash(parts),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            ok: result.is_ok(),
        });
        result
    }

    pub fn generate(
        &self,
        role: Role,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let backend = match role {
            Role::Policy => &self.policy,
            Role::Reflector => &self.reflector,
            other => return Err(BackendError::Config(format!("{other} cannot generate"))),
        };
        self.record(role, &[prompt], || backend.generate(prompt, params))
    }

    pub fn score(
        &self,
        role: Role,
        context: &str,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError> {
        let backend = match role {
            Role::ScorerPolicy => &self.scorer_policy,
            Role::ScorerReference => &self.scorer_reference,
            other => return Err(BackendError::Config(format!("{other} cannot score"))),
        };
        self.record(role, &[context, continuation], || {
            backend.score_continuation(context, continuation)
        })
    }

    pub fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool, BackendError> {
        self.record(Role::Judge, &[premise, hypothesis], || {
            self.judge.entails(premise, hypothesis)
        })
    }

    /// Verifies the scorers return log-probabilities. Probe calls are not
    /// written to the ledger.
    pub fn probe(&self) -> Result<(), BackendError> {
        self.scorer_policy.probe()?;
        self.scorer_reference.probe()
    }
}

impl EntailmentBackend for BackendSet {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool, BackendError> {
        BackendSet::entails(self, premise, hypothesis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted() -> ScriptedBackend {
        ScriptedBackend::new(ScriptRules {
            generate: vec![GenerateRule::new(
                Matcher::contains("Question: Q1"),
                ["End"],
            )],
            score: vec![ScoreRule::new(
                Matcher::exact("ctx"),
                Matcher::exact("abc def"),
                -1.25,
            )],
            entail: vec![EntailRule::new(
                Matcher::exact("P1"),
                Matcher::exact("H1"),
                true,
            )],
        })
        .unwrap()
    }

    #[test]
    fn ledger_tracks_roles() {
        let set = BackendSet::from_scripted(scripted());
        let p = GenerationParams::default();
        assert_eq!(
            set.generate(Role::Policy, "Question: Q1", &p).unwrap(),
            "End"
        );
        assert_eq!(
            set.generate(Role::Reflector, "Question: Q1", &p).unwrap(),
            "End"
        );
        let s = set.score(Role::ScorerPolicy, "ctx", "abc def").unwrap();
        assert_eq!(
            s,
            ContinuationScore {
                logprob: -1.25,
                token_count: 2
            }
        );
        assert!(set.entails("P1", "H1").unwrap());
        assert!(set.entails("P2", "H1").is_err());

        let summary = set.ledger().summary();
        assert_eq!(summary[&Role::Policy], 1);
        assert_eq!(summary[&Role::Reflector], 1);
        assert_eq!(summary[&Role::ScorerPolicy], 1);
        assert_eq!(summary[&Role::ScorerReference], 0);
        assert_eq!(summary[&Role::Judge], 2);
        assert!(!set.ledger().records().last().unwrap().ok);
    }

    #[test]
    fn wrong_role_is_rejected() {
        let set = BackendSet::from_scripted(scripted());
        assert!(set
            .generate(Role::Judge, "x", &GenerationParams::default())
            .is_err());
        assert!(set.score(Role::Policy, "ctx", "abc def").is_err());
    }

    #[test]
    fn prompt_hash_is_stable() {
        assert_eq!(prompt_hash(&["a", "b"]), prompt_hash(&["a", "b"]));
        assert_ne!(prompt_hash(&["ab", ""]), prompt_hash(&["a", "b"]));
        assert_eq!(prompt_hash(&["x"]).len(), 16);
    }

    #[test]
    fn fresh_ledger_is_empty() {
        let set = BackendSet::from_scripted(scripted());
        set.entails("P1", "H1").unwrap();
        assert!(set.with_fresh_ledger().ledger().is_empty());
        assert_eq!(set.ledger().len(), 1);
    }
}
