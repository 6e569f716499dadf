//! Experiment driver: sources a dataset, runs one split per seed through the
//! pipeline, scores the verdicts, and assembles a multi-seed report.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::db::{build_database, NOVEL_LABEL};
use crate::error::{Error, EvalError};
use crate::eval::metrics::{evaluate_known, evaluate_openset, MetricsReport, OpenSetMetrics};
use crate::eval::split::{stratified_split, SplitSpec};
use crate::eval::synth::{generate_synthetic_openset, SynthSpec};
use crate::flow::{load_dataset, FlowRecord, RandomizationPolicy};
use crate::llm::BackendConfig;
use crate::norm::NormConfig;
use crate::pipeline::{Ablation, Engine};
use crate::prompt::PromptTemplate;
use crate::retrieval::RetrievalConfig;
use crate::util::run_in_pool;

/// What the test partition may contain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Every test flow belongs to a database class.
    Known,
    /// Test flows from held-out classes are scored against the novel label.
    OpenSet,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Known => "known",
            EvalMode::OpenSet => "openset",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "known" => Ok(EvalMode::Known),
            "openset" => Ok(EvalMode::OpenSet),
            other => Err(format!(
                "unknown mode {other:?} (expected known or openset)"
            )),
        }
    }
}

/// Where the flows come from: a record file on disk, or the built-in
/// generator.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    File(PathBuf),
    Synthetic(SynthSpec),
}

impl DatasetSource {
    /// Parses a `--dataset` argument: `synthetic[:key=value,...]` selects
    /// the generator, anything else names a file.
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            return Ok(DatasetSource::Synthetic(SynthSpec::parse(rest)?));
        }
        if s == "synthetic" {
            return Ok(DatasetSource::Synthetic(SynthSpec::default()));
        }
        Ok(DatasetSource::File(PathBuf::from(s)))
    }

    pub fn description(&self) -> String {
        match self {
            DatasetSource::File(path) => path.display().to_string(),
            DatasetSource::Synthetic(spec) => spec.to_string(),
        }
    }
}

/// Everything one experiment needs. `new` fills in defaults (full pipeline,
/// mock backend, default split/normalization/retrieval, no randomization).
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub mode: EvalMode,
    pub source: DatasetSource,
    pub ablation: Ablation,
    pub split: SplitSpec,
    pub norm: NormConfig,
    pub retrieval: RetrievalConfig,
    pub backend: BackendConfig,
    pub reasoning: bool,
    /// Class labels held out as novel. File datasets only; the generator
    /// designates its own novel classes.
    pub novel_labels: Vec<String>,
    /// Score backend failures as wrong answers instead of excluding them.
    pub errors_as_wrong: bool,
    /// Worker threads for classification; `None` uses the global pool.
    pub jobs: Option<usize>,
    /// Strong-feature randomization applied to file datasets at load time.
    pub randomization: Option<RandomizationPolicy>,
}

impl ExperimentConfig {
    pub fn new(mode: EvalMode, source: DatasetSource) -> Self {
        Self {
            mode,
            source,
            ablation: Ablation::Full,
            split: SplitSpec::default(),
            norm: NormConfig::default(),
            retrieval: RetrievalConfig::default(),
            backend: BackendConfig::mock(),
            reasoning: false,
            novel_labels: Vec::new(),
            errors_as_wrong: false,
            jobs: None,
            randomization: None,
        }
    }
}

/// A classification the backend could not complete.
#[derive(Clone, Debug, Serialize)]
pub struct FlowFailure {
    pub flow_id: String,
    pub true_label: String,
    pub message: String,
}

/// One seed's scored run.
#[derive(Clone, Debug, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub db_size: usize,
    pub test_size: usize,
    pub metrics: MetricsReport,
    pub failures: Vec<FlowFailure>,
    /// Failures excluded from scoring (zero when `errors_as_wrong` is set).
    pub excluded: usize,
    pub warnings: Vec<String>,
}

/// Arithmetic means of the headline metrics over seeds.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MeanSummary {
    pub seeds: usize,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub open_set: Option<OpenSetMetrics>,
}

/// The full multi-seed result.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub mode: String,
    pub ablation: String,
    pub dataset: String,
    pub backend: String,
    pub db_fraction: f64,
    pub per_seed: Vec<SeedReport>,
    pub mean: MeanSummary,
}

fn open_set_line(os: &OpenSetMetrics) -> String {
    format!(
        "PRE-K={:.4} RCL-K={:.4} PRE-N={:.4} RCL-N={:.4} NA={:.4}",
        os.pre_k, os.rcl_k, os.pre_n, os.rcl_n, os.normalized_accuracy
    )
}

fn per_class_table(out: &mut String, metrics: &MetricsReport) {
    let name_w = metrics
        .label_space
        .iter()
        .map(|l| l.len())
        .max()
        .unwrap_or(5)
        .max(5);
    out.push_str(&format!(
        "  {:<name_w$}      PRE      RCL       F1  support\n",
        "class"
    ));
    for label in &metrics.label_space {
        let m = &metrics.per_class[label];
        out.push_str(&format!(
            "  {label:<name_w$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7}\n",
            m.precision, m.recall, m.f1, m.support
        ));
    }
}

fn confusion_table(out: &mut String, metrics: &MetricsReport) {
    let cell_w = metrics
        .label_space
        .iter()
        .map(|l| l.len())
        .chain(
            metrics
                .confusion
                .iter()
                .flatten()
                .map(|n| n.to_string().len()),
        )
        .max()
        .unwrap_or(1);
    let name_w = metrics
        .label_space
        .iter()
        .map(|l| l.len())
        .max()
        .unwrap_or(1);
    out.push_str("  confusion (rows = true, columns = predicted):\n");
    out.push_str(&format!("  {:<name_w$}", ""));
    for label in &metrics.label_space {
        out.push_str(&format!("  {label:>cell_w$}"));
    }
    out.push('\n');
    for (i, label) in metrics.label_space.iter().enumerate() {
        out.push_str(&format!("  {label:<name_w$}"));
        for count in &metrics.confusion[i] {
            out.push_str(&format!("  {count:>cell_w$}"));
        }
        out.push('\n');
    }
}

impl ExperimentReport {
    /// A human-readable rendering: a header, one block per seed with its
    /// per-class table and confusion matrix, and a closing mean block.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "mode={} ablation={} backend={}\ndataset={} db_fraction={}\n",
            self.mode, self.ablation, self.backend, self.dataset, self.db_fraction
        ));
        for s in &self.per_seed {
            out.push_str(&format!(
                "\n== seed {} ==\ndb={} test={} scored={} excluded={}\n",
                s.seed, s.db_size, s.test_size, s.metrics.scored, s.excluded
            ));
            out.push_str(&format!(
                "PRE={:.4} RCL={:.4} F1={:.4}\n",
                s.metrics.macro_precision, s.metrics.macro_recall, s.metrics.macro_f1
            ));
            if let Some(os) = &s.metrics.open_set {
                out.push_str(&open_set_line(os));
                out.push('\n');
            }
            for warning in &s.warnings {
                out.push_str(&format!("warning: {warning}\n"));
            }
            if !s.failures.is_empty() {
                out.push_str(&format!(
                    "failures: {} (first: {} — {})\n",
                    s.failures.len(),
                    s.failures[0].flow_id,
                    s.failures[0].message
                ));
            }
            per_class_table(&mut out, &s.metrics);
            confusion_table(&mut out, &s.metrics);
        }
        out.push_str(&format!(
            "\n== mean over {} seed(s) ==\nPRE={:.4} RCL={:.4} F1={:.4}\n",
            self.mean.seeds,
            self.mean.macro_precision,
            self.mean.macro_recall,
            self.mean.macro_f1,
        ));
        if let Some(os) = &self.mean.open_set {
            out.push_str(&open_set_line(os));
            out.push('\n');
        }
        out
    }
}

/// The materialized dataset: known-class flows (split into db/test) and
/// novel-class flows (test-only, truth scored as novel).
struct Materialized {
    known: Vec<FlowRecord>,
    novel: Vec<FlowRecord>,
}

fn materialize(cfg: &ExperimentConfig) -> Result<Materialized, Error> {
    match &cfg.source {
        DatasetSource::Synthetic(spec) => {
            if !cfg.novel_labels.is_empty() {
                return Err(EvalError::Validation(
                    "synthetic datasets designate their own novel classes; \
                     --novel-labels applies to file datasets only"
                        .into(),
                )
                .into());
            }
            let data = generate_synthetic_openset(spec)?;
            Ok(Materialized {
                known: data.known,
                // Known-class evaluation simply never queries these.
                novel: data.novel,
            })
        }
        DatasetSource::File(path) => {
            let flows = load_dataset(path, cfg.randomization.as_ref())?;
            if cfg.mode == EvalMode::Known && !cfg.novel_labels.is_empty() {
                return Err(EvalError::Validation(
                    "known-class evaluation cannot hold out novel labels".into(),
                )
                .into());
            }
            let mut known = Vec::new();
            let mut novel = Vec::new();
            for flow in flows {
                let label = flow.label.as_deref().ok_or_else(|| {
                    EvalError::Validation(format!(
                        "flow {:?} is unlabeled; evaluation needs ground truth",
                        flow.flow_id
                    ))
                })?;
                if cfg.novel_labels.iter().any(|l| l == label) {
                    novel.push(flow);
                } else {
                    known.push(flow);
                }
            }
            if cfg.mode == EvalMode::OpenSet {
                if cfg.novel_labels.is_empty() {
                    return Err(EvalError::Validation(
                        "open-set evaluation over a file dataset needs --novel-labels".into(),
                    )
                    .into());
                }
                if novel.is_empty() {
                    return Err(EvalError::Validation(
                        "no flow carries any of the requested novel labels".into(),
                    )
                    .into());
                }
            }
            Ok(Materialized { known, novel })
        }
    }
}


enum FlowOutcome {
    Scored { truth: String, predicted: String },
    Failed(FlowFailure),
}

/// Runs the experiment: one stratified split, database build, and scored
/// classification pass per seed, then a mean over seeds.
///
/// Backend failures (transport, status, parse) are recorded per flow; by
/// default they are excluded from scoring with a count, while
/// `errors_as_wrong` scores each as a guaranteed-wrong in-space prediction.
/// Any other pipeline error aborts the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, Error> {
    cfg.split.validate()?;
    cfg.norm.validate()?;
    cfg.retrieval.validate()?;
    cfg.backend.validate()?;

    if cfg.mode == EvalMode::OpenSet {
        if let DatasetSource::Synthetic(spec) = &cfg.source {
            if spec.novel_classes == 0 {
                return Err(EvalError::Validation(
                    "open-set evaluation needs at least one novel class (novel=0 given)".into(),
                )
                .into());
            }
        }
    }

    let data = materialize(cfg)?;
    if data.known.is_empty() {
        return Err(EvalError::Validation(
            "the dataset has no known-class flows left to split".into(),
        )
        .into());
    }

    let mut per_seed = Vec::with_capacity(cfg.split.seeds.len());
    for &seed in &cfg.split.seeds {
        per_seed.push(run_seed(cfg, &data, seed)?);
    }

    let n = per_seed.len() as f64;
    let mean_of = |f: &dyn Fn(&SeedReport) -> f64| per_seed.iter().map(|s| f(s)).sum::<f64>() / n;
    let open_set = per_seed
        .iter()
        .all(|s| s.metrics.open_set.is_some())
        .then(|| {
            let os = |f: &dyn Fn(&OpenSetMetrics) -> f64| {
                mean_of(&|s: &SeedReport| f(s.metrics.open_set.as_ref().unwrap()))
            };
            OpenSetMetrics {
                pre_k: os(&|m| m.pre_k),
                rcl_k: os(&|m| m.rcl_k),
                pre_n: os(&|m| m.pre_n),
                rcl_n: os(&|m| m.rcl_n),
                normalized_accuracy: os(&|m| m.normalized_accuracy),
            }
        });
    let mean = MeanSummary {
        seeds: per_seed.len(),
        macro_precision: mean_of(&|s| s.metrics.macro_precision),
        macro_recall: mean_of(&|s| s.metrics.macro_recall),
        macro_f1: mean_of(&|s| s.metrics.macro_f1),
        open_set,
    };

    Ok(ExperimentReport {
        mode: cfg.mode.to_string(),
        ablation: cfg.ablation.to_string(),
        dataset: cfg.source.description(),
        backend: cfg.backend.identity(),
        db_fraction: cfg.split.db_fraction,
        per_seed,
        mean,
    })
}

fn run_seed(cfg: &ExperimentConfig, data: &Materialized, seed: u64) -> Result<SeedReport, Error> {
    let split = stratified_split(&data.known, &cfg.split, seed)?;
    let built = build_database(&split.db_part, &cfg.norm)?;
    let mut warnings = split.warnings;
    warnings.extend(built.warnings);
    let db_size = built.database.len();
    let label_set = built.database.label_set.clone();

    let engine = Engine::new(
        built.database,
        cfg.retrieval,
        cfg.backend.clone(),
        PromptTemplate::builtin(),
        cfg.reasoning,
        cfg.ablation,
    )?;

    // (truth, flow) for every test query; novel-class flows score against
    // the reserved label. Sorted by flow id so runs are order-independent.
    let mut test: Vec<(String, &FlowRecord)> = split
        .test_part
        .iter()
        .map(|f| (f.label.clone().expect("known flows are labeled"), f))
        .collect();
    if cfg.mode == EvalMode::OpenSet {
        test.extend(data.novel.iter().map(|f| (NOVEL_LABEL.to_string(), f)));
    }
    test.sort_by(|a, b| a.1.flow_id.cmp(&b.1.flow_id));
    let test_size = test.len();

    let outcomes: Vec<FlowOutcome> = run_in_pool(cfg.jobs, || {
        test.par_iter()
            .map(|(truth, flow)| match engine.classify_flow(flow) {
                Ok(c) => Ok(FlowOutcome::Scored {
                    truth: truth.clone(),
                    predicted: c.verdict.label,
                }),
                Err(Error::Llm(e)) => Ok(FlowOutcome::Failed(FlowFailure {
                    flow_id: flow.flow_id.clone(),
                    true_label: truth.clone(),
                    message: e.to_string(),
                })),
                Err(other) => Err(other),
            })
            .collect::<Result<Vec<_>, Error>>()
    })??;

    let mut pairs: Vec<(String, String)> = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    let mut excluded = 0usize;
    for outcome in outcomes {
        match outcome {
            FlowOutcome::Scored { truth, predicted } => pairs.push((truth, predicted)),
            FlowOutcome::Failed(failure) => {
                if cfg.errors_as_wrong {
                    // A guaranteed-wrong in-space stand-in keeps the
                    // confusion matrix square: known truths score as novel,
                    // novel truths as the first known class.
                    let wrong = if failure.true_label == NOVEL_LABEL {
                        label_set[0].clone()
                    } else {
                        NOVEL_LABEL.to_string()
                    };
                    pairs.push((failure.true_label.clone(), wrong));
                } else {
                    excluded += 1;
                }
                failures.push(failure);
            }
        }
    }

    let metrics = match cfg.mode {
        EvalMode::Known => evaluate_known(&pairs, &label_set)?,
        EvalMode::OpenSet => evaluate_openset(&pairs, &label_set)?,
    };

    Ok(SeedReport {
        seed,
        db_size,
        test_size,
        metrics,
        failures,
        excluded,
        warnings,
    })
}
