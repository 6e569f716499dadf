//! Prompt templates and the four-segment prompt renderer.
//!
//! A template file is a sequence of `[[MARKER]]` lines, each starting the
//! named section; the built-in template ships with the crate. Rendering
//! stitches four segments in fixed order — task instruction, traffic
//! information, retrieved samples, decision guidance — and records the byte
//! range of each so callers can audit exactly what the backend saw.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use crate::db::TrafficDatabase;
use crate::error::PromptError;
use crate::flow::FlowRecord;
use crate::norm::{NormalizedViews, View};
use crate::retrieval::{EvidenceItem, EvidenceSet};
use crate::util::sha256_hex;

/// The built-in template text.
pub const DEFAULT_TEMPLATE: &str = include_str!("default_template.txt");

/// Substitution slot for the answer space, filled at render time.
pub const LABEL_SET_SLOT: &str = "{LABEL_SET}";

/// Default cap on how many vector elements are printed per sample.
pub const DEFAULT_DISPLAY_CAP: usize = 64;

/// A parsed prompt template.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub task_instruction: String,
    pub evidence_notes: BTreeMap<View, String>,
    pub no_evidence_placeholder: String,
    pub decision_guidance: String,
    pub reasoning_suffix_on: String,
    pub reasoning_suffix_off: String,
}

const MARKER_TASK: &str = "TASK";
const MARKER_NOTE_PAYLOAD: &str = "NOTE:payload";
const MARKER_NOTE_LENGTH: &str = "NOTE:length";
const MARKER_NOTE_TIME: &str = "NOTE:time";
const MARKER_NO_EVIDENCE: &str = "NO_EVIDENCE";
const MARKER_GUIDANCE: &str = "GUIDANCE";
const MARKER_REASONING_ON: &str = "REASONING_ON";
const MARKER_REASONING_OFF: &str = "REASONING_OFF";

const ALL_MARKERS: [&str; 8] = [
    MARKER_TASK,
    MARKER_NOTE_PAYLOAD,
    MARKER_NOTE_LENGTH,
    MARKER_NOTE_TIME,
    MARKER_NO_EVIDENCE,
    MARKER_GUIDANCE,
    MARKER_REASONING_ON,
    MARKER_REASONING_OFF,
];

impl PromptTemplate {
    /// Parses a template from its marker-delimited text form. Every marker
    /// must appear exactly once; nothing but blank lines may precede the
    /// first marker.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut sections: BTreeMap<&'static str, String> = BTreeMap::new();
        let mut current: Option<&'static str> = None;
        let mut buf = String::new();

        let flush = |current: Option<&'static str>,
                     buf: &mut String,
                     sections: &mut BTreeMap<&'static str, String>|
         -> Result<(), PromptError> {
            match current {
                Some(name) => {
                    sections.insert(name, std::mem::take(buf));
                }
                None if !buf.trim().is_empty() => {
                    return Err(PromptError::Template(
                        "content before the first marker".into(),
                    ));
                }
                None => buf.clear(),
            }
            Ok(())
        };

        for line in text.lines() {
            let trimmed = line.trim_end();
            if trimmed.starts_with("[[") && trimmed.ends_with("]]") {
                let inner = &trimmed[2..trimmed.len() - 2];
                let name = ALL_MARKERS
                    .iter()
                    .find(|m| **m == inner)
                    .copied()
                    .ok_or_else(|| {
                        PromptError::Template(format!("unknown marker [[{inner}]]"))
                    })?;
                flush(current, &mut buf, &mut sections)?;
                if sections.contains_key(name) {
                    return Err(PromptError::Template(format!(
                        "duplicate marker [[{name}]]"
                    )));
                }
                current = Some(name);
            } else {
                buf.push_str(line);
                buf.push('\n');
            }
        }
        flush(current, &mut buf, &mut sections)?;

        let mut take = |name: &'static str| -> Result<String, PromptError> {
            sections
                .remove(name)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| PromptError::Template(format!("missing marker [[{name}]]")))
        };

        let task_instruction = take(MARKER_TASK)?;
        let mut evidence_notes = BTreeMap::new();
        evidence_notes.insert(View::Payload, take(MARKER_NOTE_PAYLOAD)?);
        evidence_notes.insert(View::Length, take(MARKER_NOTE_LENGTH)?);
        evidence_notes.insert(View::Time, take(MARKER_NOTE_TIME)?);

        Ok(Self {
            task_instruction,
            evidence_notes,
            no_evidence_placeholder: take(MARKER_NO_EVIDENCE)?,
            decision_guidance: take(MARKER_GUIDANCE)?,
            reasoning_suffix_on: take(MARKER_REASONING_ON)?,
            reasoning_suffix_off: take(MARKER_REASONING_OFF)?,
        })
    }

    /// The built-in template.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("the built-in template is well-formed")
    }

    /// Loads and parses a template file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            PromptError::Template(format!("read {}: {e}", path.as_ref().display()))
        })?;
        Self::parse(&text)
    }
}

/// Prompt-level ablation switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    Full,
    /// Strip the analyst-authored guidance: evidence notes, decision
    /// guidance, and the reasoning suffixes all become empty, so the
    /// rendered prompt keeps only the task instruction and the raw
    /// evidence blocks.
    NoGuidance,
}

/// Applies an ablation to a template.
pub fn ablate_template(template: &PromptTemplate, mode: AblationMode) -> PromptTemplate {
    match mode {
        AblationMode::Full => template.clone(),
        AblationMode::NoGuidance => {
            let mut out = template.clone();
            for note in out.evidence_notes.values_mut() {
                note.clear();
            }
            out.decision_guidance.clear();
            out.reasoning_suffix_on.clear();
            out.reasoning_suffix_off.clear();
            out
        }
    }
}

/// Names of the four prompt segments, in render order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    TaskInstruction,
    TrafficInformation,
    RetrievedSamples,
    DecisionGuidance,
}

/// A rendered prompt with its segment map and the answer space it offers.
#[derive(Clone, Debug, Serialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Byte ranges of the segments actually present, in render order.
    pub segments: Vec<(Segment, Range<usize>)>,
    /// Known class labels plus the reserved novel label, last.
    pub label_space: Vec<String>,
}

impl RenderedPrompt {
    /// SHA-256 of the prompt text.
    pub fn digest(&self) -> String {
        sha256_hex(self.text.as_bytes())
    }
}

fn view_heading(view: View) -> &'static str {
    match view {
        View::Payload => "Payload view",
        View::Length => "Packet-length view",
        View::Time => "Inter-arrival-time view",
    }
}

/// Formats a numeric vector as `[a, b, c]`, eliding elements past `cap`
/// as `... (N more)`.
fn fmt_values<T: std::fmt::Display>(vals: &[T], cap: usize) -> String {
    let shown = vals.len().min(cap);
    let mut parts: Vec<String> = vals[..shown].iter().map(|v| v.to_string()).collect();
    if vals.len() > shown {
        parts.push(format!("... ({} more)", vals.len() - shown));
    }
    format!("[{}]", parts.join(", "))
}

/// Substitutes the label-set slot.
fn fill_labels(text: &str, label_space: &[String]) -> String {
    text.replace(LABEL_SET_SLOT, &label_space.join(", "))
}

/// Rejects any remaining `{UPPER_CASE}` slot after substitution.
fn check_unfilled(text: &str, segment: &'static str) -> Result<(), PromptError> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_uppercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'}' && j > i + 1 {
                return Err(PromptError::UnfilledSlot {
                    slot: text[i + 1..j].to_string(),
                    segment,
                });
            }
        }
        i += 1;
    }
    Ok(())
}

/// Renders the four-segment prompt for one query.
///
/// - Views absent from the query leave their traffic-information field
///   empty.
/// - Views with no sample in the whole database are omitted from the
///   retrieved-samples segment.
/// - A view present in the database whose kept evidence list is empty
///   renders the template's no-evidence placeholder.
/// - The decision-guidance segment carries the reasoning suffix selected by
///   `reasoning`; when the template's guidance and suffixes are all empty
///   (the no-guidance ablation) the segment is omitted entirely.
pub fn build_prompt(
    flow: &FlowRecord,
    views: &NormalizedViews,
    evidence: &EvidenceSet,
    db: &TrafficDatabase,
    reasoning: bool,
    template: &PromptTemplate,
    display_cap: usize,
) -> Result<RenderedPrompt, PromptError> {
    let label_space = db.label_space();

    let task = fill_labels(&template.task_instruction, &label_space);
    check_unfilled(&task, "task instruction")?;

    let mut bodies: Vec<(Segment, String)> = Vec::with_capacity(4);
    bodies.push((
        Segment::TaskInstruction,
        format!("## Task Instruction\n\n{task}\n"),
    ));

    let mut info = String::from("## Traffic Information\n\n");
    info.push_str(&format!("Protocol: {}\n", flow.proto_fine));
    let payload_field = if views.views_present.contains(View::Payload) {
        format!(" {}", fmt_values(&views.payload_vec, display_cap))
    } else {
        String::new()
    };
    info.push_str(&format!("Payload bytes:{payload_field}\n"));
    let length_field = if views.views_present.contains(View::Length) {
        format!(" {}", fmt_values(&views.len_time_vec, display_cap))
    } else {
        String::new()
    };
    info.push_str(&format!("Packet lengths:{length_field}\n"));
    let time_field = if views.views_present.contains(View::Time) {
        format!(" {}", fmt_values(&views.iat_time_vec, display_cap))
    } else {
        String::new()
    };
    info.push_str(&format!("Inter-arrival times (s):{time_field}\n"));
    bodies.push((Segment::TrafficInformation, info));

    let mut samples = String::from("## Retrieved Samples\n");
    for view in View::ALL {
        if !db.view_in_db(view) {
            continue;
        }
        samples.push_str(&format!("\n### {}\n\n", view_heading(view)));
        let note = template
            .evidence_notes
            .get(&view)
            .map(String::as_str)
            .unwrap_or("");
        if !note.is_empty() {
            check_unfilled(note, "evidence note")?;
            samples.push_str(note);
            samples.push_str("\n\n");
        }
        let kept: Vec<&EvidenceItem> = evidence.kept_in_view(view).collect();
        if kept.is_empty() {
            check_unfilled(&template.no_evidence_placeholder, "no-evidence placeholder")?;
            samples.push_str(&template.no_evidence_placeholder);
            samples.push('\n');
        } else {
            for (i, item) in kept.iter().enumerate() {
                if !db.label_set.iter().any(|l| l == &item.class_label) {
                    return Err(PromptError::UnknownEvidenceLabel {
                        label: item.class_label.clone(),
                    });
                }
                let entry = db.entry_by_id(&item.flow_id).ok_or_else(|| {
                    PromptError::UnknownEvidenceFlow {
                        flow_id: item.flow_id.clone(),
                    }
                })?;
                let values = match view {
                    View::Payload => fmt_values(&entry.views.payload_vec, display_cap),
                    View::Length => fmt_values(&entry.views.len_time_vec, display_cap),
                    View::Time => fmt_values(&entry.views.iat_time_vec, display_cap),
                };
                samples.push_str(&format!(
                    "Sample {}: class={}, distance={:.6}, values={}\n",
                    i + 1,
                    item.class_label,
                    item.distance,
                    values
                ));
            }
        }
    }
    bodies.push((Segment::RetrievedSamples, samples));

    let guidance = fill_labels(&template.decision_guidance, &label_space);
    check_unfilled(&guidance, "decision guidance")?;
    let suffix = if reasoning {
        &template.reasoning_suffix_on
    } else {
        &template.reasoning_suffix_off
    };
    check_unfilled(suffix, "reasoning suffix")?;
    if !guidance.is_empty() || !suffix.is_empty() {
        let mut g = String::from("## Decision Guidance\n\n");
        match (guidance.is_empty(), suffix.is_empty()) {
            (false, false) => g.push_str(&format!("{guidance}\n\n{suffix}\n")),
            (false, true) => g.push_str(&format!("{guidance}\n")),
            (true, false) => g.push_str(&format!("{suffix}\n")),
            (true, true) => unreachable!(),
        }
        bodies.push((Segment::DecisionGuidance, g));
    }

    let mut text = String::new();
    let mut segments = Vec::with_capacity(bodies.len());
    for (i, (segment, body)) in bodies.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        let start = text.len();
        text.push_str(body);
        segments.push((*segment, start..text.len()));
    }

    Ok(RenderedPrompt {
        text,
        segments,
        label_space,
    })
}
