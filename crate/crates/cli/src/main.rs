//! `malrag` — build and inspect retrieval databases, query evidence for
//! single flows, classify batches, and run evaluation experiments.
//!
//! Primary output (tables, result lines, reports) goes to stdout or the
//! requested file; every diagnostic goes to stderr. Exit codes: 0 success,
//! 1 validation error, 2 backend error, 3 internal-consistency error.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use malrag_core::config::{load_config, FileConfig};
use malrag_core::db::{build_database, load_snapshot, save_snapshot, StatsMode, TrafficDatabase};
use malrag_core::error::{
    ConfigError, DbError, Error, EvalError, IngestError, LlmError, PromptError, RetrievalError,
};
use malrag_core::eval::{run_experiment, DatasetSource, EvalMode, ExperimentConfig};
use malrag_core::flow::{load_dataset, parse_records, FlowRecord, RandomizationPolicy};
use malrag_core::llm::BackendConfig;
use malrag_core::norm::{normalize_flow, View};
use malrag_core::pipeline::{classify_batch, Ablation, Engine};
use malrag_core::prompt::PromptTemplate;
use malrag_core::retrieval::{adaptive_prune, coverage_enhanced_retrieval};

/// Retrieval-augmented malicious traffic identification over multi-view
/// flow evidence.
#[derive(Parser)]
#[command(name = "malrag", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize labeled flow records and save a database snapshot
    BuildDb(BuildDbArgs),
    /// Print the label set and per-group statistics of a snapshot
    DbStats(DbStatsArgs),
    /// Retrieve and prune evidence for one flow without classifying it
    Query(QueryArgs),
    /// Classify flow records and emit one result line per flow
    Classify(ClassifyArgs),
    /// Run a multi-seed evaluation experiment
    Eval(EvalArgs),
}

/// Engine settings: a `key = value` config file plus flag overrides.
/// Flags win over the file; the file wins over built-in defaults.
#[derive(Args)]
struct ConfigArgs {
    /// Config file with `key = value` lines (keys: L_pay, L_len, L_time,
    /// W_seg, k, alpha)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Payload vector length
    #[arg(long, value_name = "N")]
    l_pay: Option<usize>,
    /// Packet-length vector length
    #[arg(long, value_name = "N")]
    l_len: Option<usize>,
    /// Inter-arrival vector length
    #[arg(long, value_name = "N")]
    l_time: Option<usize>,
    /// Spectral frame width (even, at least 2)
    #[arg(long, value_name = "N")]
    w_seg: Option<usize>,
    /// Per-view retrieval depth
    #[arg(long, value_name = "N")]
    k: Option<usize>,
    /// Pruning threshold scale: tau = mean + alpha * std
    #[arg(long, value_name = "X")]
    alpha: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<FileConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => FileConfig::default(),
        };
        if let Some(v) = self.l_pay {
            cfg.norm.l_pay = v;
        }
        if let Some(v) = self.l_len {
            cfg.norm.l_len = v;
        }
        if let Some(v) = self.l_time {
            cfg.norm.l_time = v;
        }
        if let Some(v) = self.w_seg {
            cfg.norm.w_seg = v;
        }
        if let Some(v) = self.k {
            cfg.retrieval.k = v;
        }
        if let Some(v) = self.alpha {
            cfg.retrieval.alpha = v;
        }
        cfg.norm.validate()?;
        cfg.retrieval.validate()?;
        Ok(cfg)
    }

    /// Whether the user asked for specific normalization settings (as
    /// opposed to silently inheriting defaults).
    fn norm_requested(&self) -> bool {
        self.config.is_some()
            || self.l_pay.is_some()
            || self.l_len.is_some()
            || self.l_time.is_some()
            || self.w_seg.is_some()
    }
}

#[derive(Args)]
struct RandomizeArgs {
    /// Seed for strong-feature randomization of tagged payload spans
    #[arg(
        long,
        value_name = "SEED",
        default_value_t = 0,
        conflicts_with = "no_randomize"
    )]
    randomize_seed: u64,
    /// Disable strong-feature randomization
    #[arg(long)]
    no_randomize: bool,
}

impl RandomizeArgs {
    fn policy(&self) -> Option<RandomizationPolicy> {
        if self.no_randomize {
            None
        } else {
            Some(RandomizationPolicy::all(self.randomize_seed))
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendChoice {
    /// Offline majority vote over the kept evidence pool
    Mock,
    /// Chat endpoint named by MALRAG_LLM_URL, MALRAG_LLM_MODEL, and
    /// optionally MALRAG_LLM_KEY
    Remote,
}

impl BackendChoice {
    fn config(self) -> Result<BackendConfig, CliError> {
        match self {
            BackendChoice::Mock => Ok(BackendConfig::mock()),
            BackendChoice::Remote => Ok(BackendConfig::from_env()?),
        }
    }
}

#[derive(Args)]
struct BuildDbArgs {
    /// Line-delimited labeled flow records
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Snapshot file to write
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    randomize: RandomizeArgs,
}

#[derive(Args)]
struct DbStatsArgs {
    /// Database snapshot
    #[arg(long, value_name = "FILE")]
    db: PathBuf,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct QueryArgs {
    /// Database snapshot
    #[arg(long, value_name = "FILE")]
    db: PathBuf,
    /// One flow: a literal record line, or a path to a file holding
    /// exactly one
    #[arg(long, value_name = "RECORD")]
    flow: String,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Database snapshot
    #[arg(long, value_name = "FILE")]
    db: PathBuf,
    /// Line-delimited flow records to classify
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Answer backend
    #[arg(long, value_enum, default_value_t = BackendChoice::Mock)]
    backend: BackendChoice,
    /// Ask the backend to reason step by step before answering
    #[arg(long)]
    reasoning: bool,
    /// Results file, one line per flow; stdout when omitted
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Prompt template file; the built-in template when omitted
    #[arg(long, value_name = "FILE")]
    template: Option<PathBuf>,
    /// Drop the decision-guidance segment from prompts
    #[arg(long)]
    ablate_guidance: bool,
    /// Worker-thread cap for classification
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    randomize: RandomizeArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset: a records file, `synthetic`, or `synthetic:key=value,...`
    /// (keys: classes, novel, flows, sep, seed)
    #[arg(long, value_name = "SPEC", value_parser = DatasetSource::parse)]
    dataset: DatasetSource,
    /// Test-partition regime
    #[arg(long, value_parser = EvalMode::from_str, default_value = "known")]
    mode: EvalMode,
    /// Pipeline variant
    #[arg(long, value_parser = Ablation::from_str, default_value = "full")]
    ablation: Ablation,
    /// Comma-separated split seeds
    #[arg(long, value_name = "S1,S2,...", value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Answer backend
    #[arg(long, value_enum, default_value_t = BackendChoice::Mock)]
    backend: BackendChoice,
    /// Report file; stdout when omitted
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Emit the report as JSON instead of text
    #[arg(long)]
    json: bool,
    /// Fraction of each class/protocol group placed in the database
    #[arg(long, value_name = "F", default_value_t = 0.8)]
    db_fraction: f64,
    /// Labels held out of the database and scored as novel (file datasets
    /// in open-set mode)
    #[arg(long, value_name = "L1,L2,...", value_delimiter = ',')]
    novel_labels: Vec<String>,
    /// Score backend failures as wrong answers instead of excluding them
    #[arg(long)]
    errors_as_wrong: bool,
    /// Ask the backend to reason step by step before answering
    #[arg(long)]
    reasoning: bool,
    /// Worker-thread cap for classification
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    randomize: RandomizeArgs,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

macro_rules! from_core_error {
    ($($ty:ty),* $(,)?) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

from_core_error!(
    Error,
    ConfigError,
    DbError,
    EvalError,
    IngestError,
    LlmError,
    PromptError,
    RetrievalError,
);

fn exit_code(err: &CliError) -> u8 {
    match err {
        CliError::Io(_) => 1,
        CliError::Core(core) => match core {
            // A missing or malformed backend configuration is the
            // operator's problem, not the backend's.
            Error::Llm(LlmError::Config(_)) => 1,
            Error::Llm(_) => 2,
            Error::Retrieval(_) => 3,
            Error::Prompt(
                PromptError::UnknownEvidenceLabel { .. } | PromptError::UnknownEvidenceFlow { .. },
            ) => 3,
            _ => 1,
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildDb(args) => cmd_build_db(args),
        Command::DbStats(args) => cmd_db_stats(args),
        Command::Query(args) => cmd_query(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn cmd_build_db(args: BuildDbArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let flows = load_dataset(&args.input, args.randomize.policy().as_ref())?;
    let outcome = build_database(&flows, &cfg.norm)?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    save_snapshot(&outcome.database, &args.out)?;
    eprintln!(
        "built database: {} flow(s), {} class(es) -> {}",
        outcome.database.len(),
        outcome.database.label_set.len(),
        args.out.display()
    );
    Ok(())
}

fn stats_mode_name(mode: StatsMode) -> &'static str {
    match mode {
        StatsMode::IncludeSelf => "include_self",
        StatsMode::ExcludeSelf => "exclude_self",
    }
}

fn cmd_db_stats(args: DbStatsArgs) -> Result<(), CliError> {
    let db = load_snapshot(&args.db)?;
    if args.json {
        let groups: Vec<serde_json::Value> = db
            .stats
            .iter()
            .map(|(key, s)| {
                serde_json::json!({
                    "class": key.class_label,
                    "level": key.level.to_string(),
                    "protocol": key.protocol,
                    "view": key.view.as_str(),
                    "count": s.sample_count,
                    "mean_dist": s.mean_dist,
                    "std_dist": s.std_dist,
                })
            })
            .collect();
        let doc = serde_json::json!({
            "flows": db.len(),
            "labels": db.label_set,
            "stats_mode": stats_mode_name(db.stats_mode),
            "norm": serde_json::to_value(&db.norm_config).expect("norm config serializes"),
            "groups": groups,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("stats document serializes");
        text.push('\n');
        return emit(&text);
    }
    let mut text = format!(
        "flows={} classes={} stats_mode={}\n",
        db.len(),
        db.label_set.len(),
        stats_mode_name(db.stats_mode)
    );
    let n = &db.norm_config;
    text.push_str(&format!(
        "norm: L_pay={} L_len={} L_time={} W_seg={}\n",
        n.l_pay, n.l_len, n.l_time, n.w_seg
    ));
    text.push_str(&format!("labels: {}\n", db.label_set.join(", ")));
    let rows: Vec<Vec<String>> = db
        .stats
        .iter()
        .map(|(key, s)| {
            vec![
                key.class_label.clone(),
                key.level.to_string(),
                key.protocol.clone(),
                key.view.as_str().to_string(),
                s.sample_count.to_string(),
                format!("{:.6}", s.mean_dist),
                format!("{:.6}", s.std_dist),
            ]
        })
        .collect();
    text.push_str(&render_table(
        &["class", "level", "protocol", "view", "count", "mean", "std"],
        &rows,
    ));
    emit(&text)
}

fn cmd_query(args: QueryArgs) -> Result<(), CliError> {
    let db = load_snapshot(&args.db)?;
    let cfg = args.config.resolve()?;
    warn_on_norm_mismatch(&args.config, &cfg, &db);
    let flow = read_single_record(&args.flow)?;
    let views = normalize_flow(&flow, &db.norm_config);
    let retrieved = coverage_enhanced_retrieval(&db, &views, &flow.proto_fine, &cfg.retrieval);
    let evidence = adaptive_prune(&retrieved, &db, &cfg.retrieval)?;
    if args.json {
        let doc = serde_json::json!({
            "flow_id": flow.flow_id,
            "proto_fine": flow.proto_fine,
            "k": cfg.retrieval.k,
            "alpha": cfg.retrieval.alpha,
            "evidence": serde_json::to_value(&evidence).expect("evidence serializes"),
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("query document serializes");
        text.push('\n');
        return emit(&text);
    }
    let mut rows = Vec::new();
    for view in View::ALL {
        for item in &evidence.per_view[&view] {
            rows.push(vec![
                view.as_str().to_string(),
                item.flow_id.clone(),
                item.class_label.clone(),
                item.protocol_level.to_string(),
                item.protocol.clone(),
                format!("{:.6}", item.distance),
                format!("{:.6}", item.threshold),
                (if item.kept { "yes" } else { "no" }).to_string(),
            ]);
        }
    }
    let mut text = render_table(
        &[
            "view",
            "flow_id",
            "class",
            "level",
            "protocol",
            "distance",
            "threshold",
            "kept",
        ],
        &rows,
    );
    text.push_str(&format!("pool: {} kept item(s)\n", evidence.pool.len()));
    emit(&text)
}

fn cmd_classify(args: ClassifyArgs) -> Result<(), CliError> {
    let db = load_snapshot(&args.db)?;
    let cfg = args.config.resolve()?;
    warn_on_norm_mismatch(&args.config, &cfg, &db);
    let template = match &args.template {
        Some(path) => PromptTemplate::load(path)?,
        None => PromptTemplate::builtin(),
    };
    let ablation = if args.ablate_guidance {
        Ablation::NoGp
    } else {
        Ablation::Full
    };
    let engine = Engine::new(
        db,
        cfg.retrieval,
        args.backend.config()?,
        template,
        args.reasoning,
        ablation,
    )?;
    let flows = load_dataset(&args.input, args.randomize.policy().as_ref())?;
    let results = classify_batch(&engine, &flows, args.jobs)?;

    let mut lines = String::new();
    for (flow, result) in flows.iter().zip(results) {
        let c = result?;
        let mut fields = vec![
            format!("\"flow_id\":{}", json_str(&flow.flow_id)),
            format!("\"predicted\":{}", json_str(&c.verdict.label)),
        ];
        if let Some(truth) = &flow.label {
            fields.push(format!("\"true_label\":{}", json_str(truth)));
        }
        fields.push(format!(
            "\"reasoning_sha256\":{}",
            json_str(&c.verdict.provenance.response_sha256())
        ));
        fields.push(format!(
            "\"evidence_sha256\":{}",
            json_str(&c.verdict.provenance.evidence_sha256)
        ));
        lines.push_str(&format!("{{{}}}\n", fields.join(",")));
    }
    match &args.out {
        Some(path) => {
            fs::write(path, &lines)?;
            eprintln!("classified {} flow(s) -> {}", flows.len(), path.display());
            Ok(())
        }
        None => emit(&lines),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file_cfg = args.config.resolve()?;
    let mut cfg = ExperimentConfig::new(args.mode, args.dataset);
    cfg.ablation = args.ablation;
    cfg.split.seeds = args.seeds;
    cfg.split.db_fraction = args.db_fraction;
    cfg.norm = file_cfg.norm;
    cfg.retrieval = file_cfg.retrieval;
    cfg.backend = args.backend.config()?;
    cfg.reasoning = args.reasoning;
    cfg.novel_labels = args.novel_labels;
    cfg.errors_as_wrong = args.errors_as_wrong;
    cfg.jobs = args.jobs;
    cfg.randomization = args.randomize.policy();
    let report = run_experiment(&cfg)?;
    let rendered = if args.json {
        let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
        s.push('\n');
        s
    } else {
        report.render_text()
    };
    match &args.report {
        Some(path) => {
            fs::write(path, &rendered)?;
            eprintln!("wrote report to {}", path.display());
            Ok(())
        }
        None => emit(&rendered),
    }
}

/// JSON string literal for `s` (quotes and escapes included).
fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Writes primary output to stdout. A consumer that stops reading early
/// (`malrag db-stats | head`) closes the pipe; that is not an error.
fn emit(content: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match out.write_all(content.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn warn_on_norm_mismatch(args: &ConfigArgs, cfg: &FileConfig, db: &TrafficDatabase) {
    if args.norm_requested() && cfg.norm != db.norm_config {
        let (r, s) = (&cfg.norm, &db.norm_config);
        eprintln!(
            "warning: requested normalization (L_pay={} L_len={} L_time={} W_seg={}) differs \
             from the snapshot's (L_pay={} L_len={} L_time={} W_seg={}); the snapshot settings \
             apply",
            r.l_pay, r.l_len, r.l_time, r.w_seg, s.l_pay, s.l_len, s.l_time, s.w_seg
        );
    }
}

/// Reads the `--flow` argument: a literal record line when it looks like
/// one, otherwise the contents of the named file.
fn read_single_record(arg: &str) -> Result<FlowRecord, CliError> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg)?
    };
    let mut records = parse_records(&text, None)?;
    match records.len() {
        1 => Ok(records.pop().expect("length checked")),
        n => Err(EvalError::Validation(format!(
            "--flow must supply exactly one record, got {n}"
        ))
        .into()),
    }
}

/// Left-aligned two-space-separated table.
fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let mut render = |cells: &[&str]| {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{:<width$}", cell, width = widths[i]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    };
    render(header);
    for row in rows {
        let cells: Vec<&str> = row.iter().map(|s| s.as_str()).collect();
        render(&cells);
    }
    out
}
