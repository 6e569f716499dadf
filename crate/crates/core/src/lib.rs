//! Retrieval-augmented malicious traffic classification.
//!
//! The pipeline normalizes each flow into multi-view vectors (raw payload
//! bytes plus time- and frequency-domain packet-length and inter-arrival
//! sequences), retrieves the nearest labeled neighbors per view under a
//! hierarchical protocol filter, prunes them against class-conditioned
//! distance thresholds, renders the survivors into a four-segment prompt,
//! and asks a pluggable chat backend for the verdict. Held-out classes are
//! handled open-set style: when no evidence survives, the reserved label
//! `novel` is on the table.
//!
//! Modules mirror the stages: [`flow`] (records and ingestion), [`norm`]
//! (multi-view normalization), [`db`] (the traffic knowledge database),
//! [`retrieval`] (coverage-enhanced retrieval and adaptive pruning),
//! [`prompt`] (templates and rendering), [`llm`] (backends and verdict
//! parsing), [`pipeline`] (the engine), and [`eval`] (splits, metrics,
//! synthetic data, experiments).

pub mod config;
pub mod db;
pub mod error;
pub mod eval;
pub mod flow;
pub mod llm;
pub mod norm;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;

mod util;

pub use config::{load_config, parse_config, FileConfig};
pub use db::{
    build_database, build_database_with, load_snapshot, save_snapshot, ClassProtocolStats,
    DbEntry, ProtoLevel, StatsKey, StatsMode, TrafficDatabase, NOVEL_LABEL,
};
pub use error::{
    ConfigError, DbError, Error, EvalError, IngestError, LlmError, PromptError, RetrievalError,
};
pub use eval::{
    evaluate_known, evaluate_openset, generate_synthetic_openset, run_experiment, DatasetSource,
    EvalMode, ExperimentConfig, ExperimentReport, MetricsReport, OpenSetMetrics, SplitSpec,
    SynthSpec,
};
pub use flow::{
    load_dataset, parse_records, record_to_line, FlowRecord, RandomizationPolicy, StrongField,
    StrongSpan,
};
pub use llm::{BackendConfig, BackendKind, Provenance, Verdict};
pub use norm::{normalize_flow, NormConfig, NormalizedViews, View, ViewSet};
pub use pipeline::{classify_batch, Ablation, Classification, Engine};
pub use prompt::{build_prompt, PromptTemplate, RenderedPrompt, Segment};
pub use retrieval::{
    adaptive_prune, coverage_enhanced_retrieval, keep_all_evidence, EvidenceItem, EvidenceSet,
    RetrievalConfig, RetrievedNeighbor,
};
