//! The end-to-end classification engine: normalize, retrieve, prune, render
//! the prompt, run the backend, and parse its verdict.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::db::TrafficDatabase;
use crate::error::Error;
use crate::flow::FlowRecord;
use crate::llm::{generate, parse_verdict, BackendConfig, Provenance, Verdict};
use crate::norm::normalize_flow;
use crate::prompt::{
    ablate_template, build_prompt, AblationMode, PromptTemplate, RenderedPrompt,
    DEFAULT_DISPLAY_CAP,
};
use crate::retrieval::{
    adaptive_prune, coverage_enhanced_retrieval, keep_all_evidence, EvidenceSet, RetrievalConfig,
};

/// Pipeline variants: the full engine, plus three ablations that each sever
/// one stage while leaving the rest untouched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Skip retrieval entirely; the backend sees an empty evidence pool.
    NoCer,
    /// Retrieve but never prune; thresholds are still computed and recorded.
    NoTap,
    /// Drop the guidance prose (evidence notes, decision guidance, and the
    /// reasoning suffixes) from the prompt; retrieval is unchanged.
    NoGp,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoCer,
        Ablation::NoTap,
        Ablation::NoGp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCer => "no-cer",
            Ablation::NoTap => "no-tap",
            Ablation::NoGp => "no-gp",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-cer" => Ok(Ablation::NoCer),
            "no-tap" => Ok(Ablation::NoTap),
            "no-gp" => Ok(Ablation::NoGp),
            other => Err(format!(
                "unknown ablation {other:?} (expected full, no-cer, no-tap, or no-gp)"
            )),
        }
    }
}

/// The full outcome of classifying one flow, kept together so callers can
/// audit any decision after the fact.
#[derive(Clone, Debug)]
pub struct Classification {
    pub flow_id: String,
    pub verdict: Verdict,
    pub evidence: EvidenceSet,
    pub prompt: RenderedPrompt,
}

/// A database bound to a retrieval configuration, a prompt template, and a
/// backend. Engines are immutable once built and safe to share across
/// threads.
#[derive(Clone, Debug)]
pub struct Engine {
    db: TrafficDatabase,
    retrieval: RetrievalConfig,
    backend: BackendConfig,
    template: PromptTemplate,
    reasoning: bool,
    ablation: Ablation,
    display_cap: usize,
}

impl Engine {
    pub fn new(
        db: TrafficDatabase,
        retrieval: RetrievalConfig,
        backend: BackendConfig,
        template: PromptTemplate,
        reasoning: bool,
        ablation: Ablation,
    ) -> Result<Self, Error> {
        retrieval.validate()?;
        backend.validate()?;
        let template = match ablation {
            Ablation::NoGp => ablate_template(&template, AblationMode::NoGuidance),
            _ => template,
        };
        Ok(Self {
            db,
            retrieval,
            backend,
            template,
            reasoning,
            ablation,
            display_cap: DEFAULT_DISPLAY_CAP,
        })
    }

    /// Overrides how many raw values each prompt line may show.
    pub fn with_display_cap(mut self, cap: usize) -> Self {
        self.display_cap = cap;
        self
    }

    pub fn db(&self) -> &TrafficDatabase {
        &self.db
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn backend(&self) -> &BackendConfig {
        &self.backend
    }

    /// Runs the whole pipeline for one query flow.
    pub fn classify_flow(&self, flow: &FlowRecord) -> Result<Classification, Error> {
        let views = normalize_flow(flow, &self.db.norm_config);

        let evidence = match self.ablation {
            Ablation::NoCer => EvidenceSet::empty(),
            Ablation::NoTap => {
                let retrieved =
                    coverage_enhanced_retrieval(&self.db, &views, &flow.proto_fine, &self.retrieval);
                keep_all_evidence(&retrieved, &self.db, &self.retrieval)?
            }
            Ablation::Full | Ablation::NoGp => {
                let retrieved =
                    coverage_enhanced_retrieval(&self.db, &views, &flow.proto_fine, &self.retrieval);
                adaptive_prune(&retrieved, &self.db, &self.retrieval)?
            }
        };

        let prompt = build_prompt(
            flow,
            &views,
            &evidence,
            &self.db,
            self.reasoning,
            &self.template,
            self.display_cap,
        )?;

        let raw = generate(&prompt, &evidence, &self.backend)?;
        let parsed = parse_verdict(&raw, &prompt.label_space, self.reasoning)?;

        Ok(Classification {
            flow_id: flow.flow_id.clone(),
            verdict: Verdict {
                label: parsed.label,
                reasoning: parsed.reasoning,
                provenance: Provenance {
                    prompt_sha256: prompt.digest(),
                    evidence_sha256: evidence.digest(),
                    backend: self.backend.identity(),
                    raw_response: raw,
                },
            },
            evidence,
            prompt,
        })
    }
}

/// Classifies a batch of flows, one result per input in input order. `jobs`
/// caps the worker threads; `None` classifies on the global pool.
pub fn classify_batch(
    engine: &Engine,
    flows: &[FlowRecord],
    jobs: Option<usize>,
) -> Result<Vec<Result<Classification, Error>>, Error> {
    crate::util::run_in_pool(jobs, || {
        flows.par_iter().map(|f| engine.classify_flow(f)).collect()
    })
}
