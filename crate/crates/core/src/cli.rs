//! Command-line entry points. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::backends::Role;
use crate::config::AppConfig;
use crate::corpus::{Corpus, Index};
use crate::eval::{load_dataset, run_benchmark, HarnessOptions};
use crate::mcts::{SearchConfig, SearchEngine, TreeDump};

#[derive(Debug, Parser)]
#[command(
    name = "citetree",
    version,
    about = "Attributed answers by tree search over cited sentences"
)]
pub struct Cli {
    /// Log level (error, warn, info, debug, trace); overrides the config.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 index from a JSON Lines corpus.
    Index { corpus: PathBuf, out: PathBuf },
    /// Answer one question with citations.
    Ask {
        question: String,
        #[arg(long)]
        config: PathBuf,
        /// Write the search tree as JSON.
        #[arg(long)]
        dump_tree: Option<PathBuf>,
        #[command(flatten)]
        search: SearchFlags,
    },
    /// Run the benchmark harness over a dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file; overrides `paths.dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Report directory; overrides `paths.report_dir`.
        #[arg(long)]
        report_dir: Option<PathBuf>,
        #[command(flatten)]
        search: SearchFlags,
    },
    /// Summarize a tree written by `ask --dump-tree`.
    InspectTree {
        path: PathBuf,
        /// Print Graphviz DOT instead of a summary.
        #[arg(long)]
        dot: bool,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct SearchFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_reflection: bool,
    #[arg(long)]
    pub no_rg: bool,
    #[arg(long)]
    pub no_ra: bool,
    #[arg(long)]
    pub no_search: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub children: Option<usize>,
    #[arg(long)]
    pub reflections: Option<usize>,
    #[arg(long)]
    pub uct_weight: Option<f64>,
}

impl SearchFlags {
    pub fn apply(&self, cfg: &mut SearchConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.disable_reflection |= self.no_reflection;
        cfg.disable_rg |= self.no_rg;
        cfg.disable_ra |= self.no_ra;
        cfg.disable_search |= self.no_search;
        if let Some(v) = self.iterations {
            cfg.max_iterations = v;
        }
        if let Some(v) = self.depth {
            cfg.max_depth = v;
        }
        if let Some(v) = self.children {
            cfg.max_children = v;
        }
        if let Some(v) = self.reflections {
            cfg.max_reflections = v;
        }
        if let Some(v) = self.uct_weight {
            cfg.uct_weight = v;
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_config(path: &Path, flags: &SearchFlags) -> Result<AppConfig, CliError> {
    let mut cfg = AppConfig::load(path).map_err(usage)?;
    flags.apply(&mut cfg.search);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn init_logging(level: &str) {
    let filter = level.parse().unwrap_or(log::LevelFilter::Warn);
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .parse_default_env()
        .try_init();
}

fn format_calls(calls: &std::collections::BTreeMap<Role, usize>) -> String {
    calls
        .iter()
        .map(|(r, n)| format!("{r}={n}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_index(corpus: &Path, out_path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let corpus = Corpus::load_jsonl(corpus).map_err(usage)?;
    let n = corpus.len();
    let index = Index::build(corpus).map_err(usage)?;
    index.save(out_path).map_err(runtime)?;
    writeln!(out, "indexed {n} passages").map_err(runtime)
}

fn cmd_ask(
    question: &str,
    config: &Path,
    dump_tree: Option<&Path>,
    flags: &SearchFlags,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = load_config(config, flags)?;
    init_logging(&cfg.log_level);
    let index = match (&cfg.paths.index, &cfg.paths.corpus) {
        (Some(p), _) => Index::load(p).map_err(usage)?,
        (None, Some(p)) => Index::build(Corpus::load_jsonl(p).map_err(usage)?).map_err(usage)?,
        (None, None) => return Err(usage("config sets neither paths.index nor paths.corpus")),
    };
    let template = cfg.template().map_err(usage)?;
    let backends = cfg.build_backends().map_err(usage)?;
    let engine =
        SearchEngine::new(&index, &backends, &template, cfg.search.clone()).map_err(usage)?;
    let outcome = engine.run(question).map_err(runtime)?;

    if let Some(path) = dump_tree {
        let json = serde_json::to_string_pretty(&outcome.tree.to_dump()).map_err(runtime)?;
        fs::write(path, json).map_err(runtime)?;
    }
    let answer = &outcome.answer;
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(runtime);
    w(out, answer.text())?;
    if answer.partial {
        w(out, "(partial: no path reached End)".into())?;
    }
    let cited = answer.cited_ids();
    if !cited.is_empty() {
        w(out, String::new())?;
        w(out, "References:".into())?;
        for id in cited {
            let title = index.corpus().get(id).map_or("", |p| p.title.as_str());
            w(out, format!("[{id}] {title}"))?;
        }
    }
    w(out, String::new())?;
    let s = &outcome.stats;
    w(
        out,
        format!(
            "iterations={} nodes={} depth={} reflections={}",
            s.iterations,
            outcome.tree.len(),
            outcome.tree.max_depth(),
            s.reflections_used
        ),
    )?;
    w(out, format!("calls: {}", format_calls(&s.calls)))
}

fn cmd_eval(
    config: &Path,
    dataset: Option<&Path>,
    limit: Option<usize>,
    workers: Option<usize>,
    report_dir: Option<&Path>,
    flags: &SearchFlags,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut cfg = load_config(config, flags)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate().map_err(usage)?;
    init_logging(&cfg.log_level);
    let dataset_path = dataset
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| usage("no dataset given (--dataset or paths.dataset)"))?;
    let items = load_dataset(cfg.dataset, &dataset_path).map_err(usage)?;
    let template = cfg.template().map_err(usage)?;
    let backends = cfg.build_backends().map_err(usage)?;
    let options = HarnessOptions {
        limit,
        workers: cfg.workers,
    };
    let mut report =
        run_benchmark(&items, &cfg.search, &backends, &template, options).map_err(runtime)?;
    report.config = serde_json::to_value(&cfg).map_err(runtime)?;
    let dir = report_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.report_dir.clone())
        .unwrap_or_else(|| PathBuf::from("reports"));
    let (json, csv) = report.write(&dir).map_err(runtime)?;

    writeln!(
        out,
        "dataset={} items={} failed={}",
        report.dataset,
        report.items.len(),
        report.failed
    )
    .map_err(runtime)?;
    for (k, v) in &report.aggregate {
        writeln!(out, "{k:<20} {v:.4}").map_err(runtime)?;
    }
    writeln!(out, "calls: {}", format_calls(&report.calls)).map_err(runtime)?;
    writeln!(out, "report: {}", json.display()).map_err(runtime)?;
    writeln!(out, "csv: {}", csv.display()).map_err(runtime)
}

fn cmd_inspect(path: &Path, dot: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(usage)?;
    let dump: TreeDump = serde_json::from_str(&text).map_err(usage)?;
    if dot {
        return write!(out, "{}", dump.to_dot()).map_err(runtime);
    }
    writeln!(
        out,
        "nodes={} depth={} max_children={} root N={} V={:.4}",
        dump.count(),
        dump.depth(),
        dump.max_branching(),
        dump.n,
        dump.v
    )
    .map_err(runtime)?;
    // greedy walk by value, the way a reader would eyeball the tree
    let mut cur = &dump;
    while let Some(best) = cur.children.iter().reduce(|a, b| {
        if b.v > a.v || (b.v == a.v && b.n > a.n) {
            b
        } else {
            a
        }
    }) {
        let label = if best.state.end {
            "End".to_string()
        } else {
            best.state.sentence.clone()
        };
        writeln!(
            out,
            "  depth {} N={} V={:.4}: {}",
            best.depth, best.n, best.v, label
        )
        .map_err(runtime)?;
        cur = best;
    }
    Ok(())
}

/// Parses arguments and runs a command, returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    if let Some(level) = &cli.log_level {
        init_logging(level);
    }
    let result = match &cli.command {
        Command::Index { corpus, out: path } => cmd_index(corpus, path, out),
        Command::Ask {
            question,
            config,
            dump_tree,
            search,
        } => cmd_ask(question, config, dump_tree.as_deref(), search, out),
        Command::Eval {
            config,
            dataset,
            limit,
            workers,
            report_dir,
            search,
        } => cmd_eval(
            config,
            dataset.as_deref(),
            *limit,
            *workers,
            report_dir.as_deref(),
            search,
            out,
        ),
        Command::InspectTree { path, dot } => cmd_inspect(path, *dot, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
