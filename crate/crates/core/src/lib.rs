//! Attributed question answering by tree search over retrieve-then-cite steps.

pub mod backends;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod mcts;
pub mod protocol;
pub mod reward;

pub use backends::{BackendError, BackendSet, Role, ScriptedBackend};
pub use config::AppConfig;
pub use corpus::{Corpus, CorpusError, Index, Passage, Retriever};
pub use eval::{run_benchmark, BenchmarkItem, RunReport};
pub use mcts::{
    run_search, AttributedAnswer, SearchConfig, SearchEngine, SearchError, SearchOutcome,
    SearchTree,
};
pub use protocol::{Action, PromptTemplate, ProtocolError};
pub use reward::{EvaluationError, RewardBreakdown, RewardEngine};
