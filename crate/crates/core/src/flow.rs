//! Flow records: the JSON-lines wire format, record invariants, and
//! deterministic strong-feature randomization.
//!
//! A dataset is a UTF-8 file with one JSON object per line. Recognised keys:
//!
//! - `flow_id`: unique non-empty string
//! - `label`: class label string, or `null` for unlabeled flows
//! - `proto_fine`: protocol tag such as `"TCP|TLS1.2"`; the coarse protocol
//!   is the part before the first `|`
//! - `payload_hex`: hex-encoded application payload (may be empty)
//! - `pkt_lengths`: packet lengths in bytes, capture order
//! - `iat_seconds`: inter-arrival gaps; exactly one fewer entry than
//!   `pkt_lengths` (empty when the flow has fewer than two packets)
//! - `strong_spans` (optional): byte ranges of strong identifier fields in
//!   the payload, each `[start, end, kind]` with half-open `[start, end)`

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FieldViolation, IngestError};
use crate::util::sha256_bytes;

/// Kinds of strong identifier fields that may appear inside a payload.
///
/// These fields pin a flow to a concrete capture environment (addresses,
/// ports, sequence numbers, server names) rather than to a traffic class,
/// so they can be replaced with random bytes before the flow is stored or
/// queried.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongField {
    IpAddresses,
    Ports,
    TcpSeq,
    TlsSni,
}

impl StrongField {
    pub const ALL: [StrongField; 4] = [
        StrongField::IpAddresses,
        StrongField::Ports,
        StrongField::TcpSeq,
        StrongField::TlsSni,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrongField::IpAddresses => "ip_addresses",
            StrongField::Ports => "ports",
            StrongField::TcpSeq => "tcp_seq",
            StrongField::TlsSni => "tls_sni",
        }
    }
}

impl fmt::Display for StrongField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrongField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ip_addresses" => Ok(StrongField::IpAddresses),
            "ports" => Ok(StrongField::Ports),
            "tcp_seq" => Ok(StrongField::TcpSeq),
            "tls_sni" => Ok(StrongField::TlsSni),
            other => Err(format!("unknown strong field kind {other:?}")),
        }
    }
}

/// Half-open byte range `[start, end)` of a strong field within the payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrongSpan {
    pub start: usize,
    pub end: usize,
    pub kind: StrongField,
}

/// One captured flow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowRecord {
    pub flow_id: String,
    /// Class label; `None` for unlabeled query flows.
    pub label: Option<String>,
    /// Fine protocol tag, e.g. `"TCP|TLS1.2"`.
    pub proto_fine: String,
    /// Coarse protocol tag, derived as the part of `proto_fine` before the
    /// first `|` (the whole tag when there is no `|`).
    pub proto_coarse: String,
    pub payload: Vec<u8>,
    pub pkt_lengths: Vec<u64>,
    pub iat_seconds: Vec<f64>,
    pub strong_spans: Vec<StrongSpan>,
}

/// Returns the coarse component of a fine protocol tag.
pub fn coarse_protocol(proto_fine: &str) -> &str {
    proto_fine.split('|').next().unwrap_or(proto_fine)
}

impl FlowRecord {
    /// Builds a record, enforcing every record-level invariant.
    pub fn new(
        flow_id: impl Into<String>,
        label: Option<String>,
        proto_fine: impl Into<String>,
        payload: Vec<u8>,
        pkt_lengths: Vec<u64>,
        iat_seconds: Vec<f64>,
        strong_spans: Vec<StrongSpan>,
    ) -> Result<Self, FieldViolation> {
        let flow_id = flow_id.into();
        let proto_fine = proto_fine.into();

        if flow_id.is_empty() {
            return Err(FieldViolation::new("flow_id", "must be non-empty"));
        }
        if proto_fine.is_empty() {
            return Err(FieldViolation::new("proto_fine", "must be non-empty"));
        }
        if let Some(label) = &label {
            if label.is_empty() {
                return Err(FieldViolation::new(
                    "label",
                    "must be non-empty or null, not an empty string",
                ));
            }
        }
        let expected_iats = pkt_lengths.len().saturating_sub(1);
        if iat_seconds.len() != expected_iats {
            return Err(FieldViolation::new(
                "iat_seconds",
                format!(
                    "expected {} inter-arrival gap(s) for {} packet(s), got {}",
                    expected_iats,
                    pkt_lengths.len(),
                    iat_seconds.len()
                ),
            ));
        }
        for (i, &gap) in iat_seconds.iter().enumerate() {
            if !gap.is_finite() || gap < 0.0 {
                return Err(FieldViolation::new(
                    "iat_seconds",
                    format!("gap {i} is {gap}; gaps must be finite and non-negative"),
                ));
            }
        }
        for (i, span) in strong_spans.iter().enumerate() {
            if span.start > span.end {
                return Err(FieldViolation::new(
                    "strong_spans",
                    format!(
                        "span {i} has start {} after end {}",
                        span.start, span.end
                    ),
                ));
            }
        }

        let proto_coarse = coarse_protocol(&proto_fine).to_string();
        Ok(Self {
            flow_id,
            label,
            proto_fine,
            proto_coarse,
            payload,
            pkt_lengths,
            iat_seconds,
            strong_spans,
        })
    }
}

/// Which strong-feature kinds to overwrite, and the seed driving the
/// replacement bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomizationPolicy {
    pub seed: u64,
    pub fields: BTreeSet<StrongField>,
}

impl RandomizationPolicy {
    /// Randomize every strong-field kind.
    pub fn all(seed: u64) -> Self {
        Self {
            seed,
            fields: StrongField::ALL.into_iter().collect(),
        }
    }
}

/// Overwrites the payload bytes of every flagged strong span with bytes from
/// a stream derived only from `(policy.seed, flow_id)`. Bytes outside the
/// flagged spans are never touched, so two seeds can only differ inside the
/// spans selected by the policy. Spans are clamped to the payload length;
/// spans starting at or beyond the end are skipped.
pub fn randomize_strong_features(rec: &FlowRecord, policy: &RandomizationPolicy) -> FlowRecord {
    let mut out = rec.clone();
    if policy.fields.is_empty() || rec.strong_spans.is_empty() {
        return out;
    }
    let tag = format!("malrag.strong.v1|{}|{}", policy.seed, rec.flow_id);
    let mut rng = ChaCha20Rng::from_seed(sha256_bytes(tag.as_bytes()));
    for span in &rec.strong_spans {
        if !policy.fields.contains(&span.kind) {
            continue;
        }
        let start = span.start.min(out.payload.len());
        let end = span.end.min(out.payload.len());
        if start >= end {
            continue;
        }
        rng.fill_bytes(&mut out.payload[start..end]);
    }
    out
}

/// On-the-wire shape of one record line.
#[derive(Serialize, Deserialize)]
struct FlowLine {
    flow_id: String,
    label: Option<String>,
    proto_fine: String,
    payload_hex: String,
    pkt_lengths: Vec<u64>,
    iat_seconds: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    strong_spans: Vec<(u64, u64, String)>,
}

fn line_to_record(line: FlowLine) -> Result<FlowRecord, FieldViolation> {
    let payload = hex::decode(&line.payload_hex)
        .map_err(|e| FieldViolation::new("payload_hex", format!("invalid hex: {e}")))?;
    let mut spans = Vec::with_capacity(line.strong_spans.len());
    for (start, end, kind) in line.strong_spans {
        let start = usize::try_from(start)
            .map_err(|_| FieldViolation::new("strong_spans", "span offset too large"))?;
        let end = usize::try_from(end)
            .map_err(|_| FieldViolation::new("strong_spans", "span offset too large"))?;
        let kind = kind
            .parse::<StrongField>()
            .map_err(|e| FieldViolation::new("strong_spans", e))?;
        spans.push(StrongSpan { start, end, kind });
    }
    FlowRecord::new(
        line.flow_id,
        line.label,
        line.proto_fine,
        payload,
        line.pkt_lengths,
        line.iat_seconds,
        spans,
    )
}

/// Serializes a record back to its one-line wire form.
pub fn record_to_line(rec: &FlowRecord) -> String {
    let line = FlowLine {
        flow_id: rec.flow_id.clone(),
        label: rec.label.clone(),
        proto_fine: rec.proto_fine.clone(),
        payload_hex: hex::encode(&rec.payload),
        pkt_lengths: rec.pkt_lengths.clone(),
        iat_seconds: rec.iat_seconds.clone(),
        strong_spans: rec
            .strong_spans
            .iter()
            .map(|s| (s.start as u64, s.end as u64, s.kind.as_str().to_string()))
            .collect(),
    };
    serde_json::to_string(&line).expect("flow line serialization cannot fail")
}

/// Parses a single record line (reported as line 1 on error).
pub fn parse_record_line(text: &str) -> Result<FlowRecord, IngestError> {
    parse_line_at(text, 1)
}

fn parse_line_at(text: &str, line_no: usize) -> Result<FlowRecord, IngestError> {
    let line: FlowLine = serde_json::from_str(text).map_err(|e| IngestError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    line_to_record(line).map_err(|violation| IngestError::Validation {
        line: line_no,
        violation,
    })
}

/// Parses a whole dataset held in memory. Blank lines are skipped; every
/// record is validated, `flow_id`s must be unique, and the randomization
/// policy (if any) is applied to each record.
pub fn parse_records(
    text: &str,
    policy: Option<&RandomizationPolicy>,
) -> Result<Vec<FlowRecord>, IngestError> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())), policy)
}

/// Loads a dataset from a JSON-lines file. See [`parse_records`].
pub fn load_dataset(
    path: impl AsRef<Path>,
    policy: Option<&RandomizationPolicy>,
) -> Result<Vec<FlowRecord>, IngestError> {
    let file = File::open(path)?;
    parse_lines(BufReader::new(file).lines(), policy)
}

fn parse_lines(
    lines: impl Iterator<Item = std::io::Result<String>>,
    policy: Option<&RandomizationPolicy>,
) -> Result<Vec<FlowRecord>, IngestError> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let mut rec = parse_line_at(&line, line_no)?;
        if !seen.insert(rec.flow_id.clone()) {
            return Err(IngestError::DuplicateFlowId {
                line: line_no,
                flow_id: rec.flow_id,
            });
        }
        if let Some(policy) = policy {
            rec = randomize_strong_features(&rec, policy);
        }
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_line() -> String {
        concat!(
            r#"{"flow_id":"f-001","label":"Htbot","proto_fine":"TCP|TLS1.2","#,
            r#""payload_hex":"16030100a1deadbeef","pkt_lengths":[517,1460,1460,318],"#,
            r#""iat_seconds":[0.012,0.0003,0.041],"#,
            r#""strong_spans":[[4,8,"tcp_seq"]]}"#
        )
        .to_string()
    }

    #[test]
    fn parses_a_full_record() {
        let rec = parse_record_line(&sample_line()).unwrap();
        assert_eq!(rec.flow_id, "f-001");
        assert_eq!(rec.label.as_deref(), Some("Htbot"));
        assert_eq!(rec.proto_fine, "TCP|TLS1.2");
        assert_eq!(rec.proto_coarse, "TCP");
        assert_eq!(rec.payload.len(), 9);
        assert_eq!(rec.payload[0], 0x16);
        assert_eq!(rec.pkt_lengths, vec![517, 1460, 1460, 318]);
        assert_eq!(rec.iat_seconds.len(), 3);
        assert_eq!(
            rec.strong_spans,
            vec![StrongSpan {
                start: 4,
                end: 8,
                kind: StrongField::TcpSeq
            }]
        );
    }

    #[test]
    fn absent_and_null_labels_both_parse_to_none() {
        let null = r#"{"flow_id":"a","label":null,"proto_fine":"UDP|DNS","payload_hex":"","pkt_lengths":[60],"iat_seconds":[]}"#;
        let rec = parse_record_line(null).unwrap();
        assert_eq!(rec.label, None);
    }

    #[test]
    fn iat_count_must_be_one_less_than_packet_count() {
        let bad = r#"{"flow_id":"a","label":null,"proto_fine":"TCP","payload_hex":"","pkt_lengths":[60,60,60],"iat_seconds":[0.1,0.1,0.1]}"#;
        let err = parse_record_line(bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("iat_seconds"), "got: {msg}");
        assert!(msg.contains("expected 2"), "got: {msg}");
    }

    #[test]
    fn negative_or_nan_gaps_are_rejected() {
        let neg = FlowRecord::new("a", None, "TCP", vec![], vec![10, 20], vec![-0.5], vec![]);
        assert!(neg.unwrap_err().to_string().contains("iat_seconds"));
        let nan = FlowRecord::new("a", None, "TCP", vec![], vec![10, 20], vec![f64::NAN], vec![]);
        assert!(nan.is_err());
    }

    #[test]
    fn unknown_strong_field_kind_is_a_field_error() {
        let bad = r#"{"flow_id":"a","label":null,"proto_fine":"TCP","payload_hex":"00","pkt_lengths":[60],"iat_seconds":[],"strong_spans":[[0,1,"mac_addr"]]}"#;
        let err = parse_record_line(bad).unwrap_err();
        assert!(err.to_string().contains("strong_spans"));
        assert!(err.to_string().contains("mac_addr"));
    }

    #[test]
    fn inverted_span_is_rejected() {
        let rec = FlowRecord::new(
            "a",
            None,
            "TCP",
            vec![0; 8],
            vec![60],
            vec![],
            vec![StrongSpan {
                start: 5,
                end: 2,
                kind: StrongField::Ports,
            }],
        );
        assert!(rec.unwrap_err().to_string().contains("strong_spans"));
    }

    #[test]
    fn coarse_protocol_is_the_first_component() {
        assert_eq!(coarse_protocol("TCP|TLS1.2"), "TCP");
        assert_eq!(coarse_protocol("UDP"), "UDP");
        assert_eq!(coarse_protocol("A|B|C"), "A");
    }

    #[test]
    fn duplicate_flow_ids_are_rejected_with_the_line_number() {
        let text = format!("{}\n\n{}\n", sample_line(), sample_line());
        let err = parse_records(&text, None).unwrap_err();
        match err {
            IngestError::DuplicateFlowId { line, flow_id } => {
                assert_eq!(line, 3);
                assert_eq!(flow_id, "f-001");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_gives_an_empty_dataset() {
        assert!(parse_records("", None).unwrap().is_empty());
        assert!(parse_records("\n  \n", None).unwrap().is_empty());
    }

    #[test]
    fn randomization_is_deterministic_per_seed_and_flow() {
        let rec = parse_record_line(&sample_line()).unwrap();
        let policy = RandomizationPolicy::all(42);
        let a = randomize_strong_features(&rec, &policy);
        let b = randomize_strong_features(&rec, &policy);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ_only_inside_flagged_spans() {
        let rec = parse_record_line(&sample_line()).unwrap();
        let a = randomize_strong_features(&rec, &RandomizationPolicy::all(1));
        let b = randomize_strong_features(&rec, &RandomizationPolicy::all(2));
        assert_ne!(a.payload[4..8], b.payload[4..8], "span bytes should change");
        assert_eq!(a.payload[..4], b.payload[..4]);
        assert_eq!(a.payload[8..], b.payload[8..]);
        assert_eq!(a.payload[..4], rec.payload[..4]);
        assert_eq!(a.pkt_lengths, rec.pkt_lengths);
        assert_eq!(a.iat_seconds, rec.iat_seconds);
        assert_eq!(a.proto_fine, rec.proto_fine);
    }

    #[test]
    fn unflagged_kinds_are_left_alone() {
        let rec = parse_record_line(&sample_line()).unwrap();
        let policy = RandomizationPolicy {
            seed: 7,
            fields: [StrongField::TlsSni].into_iter().collect(),
        };
        let out = randomize_strong_features(&rec, &policy);
        assert_eq!(out, rec);
    }

    #[test]
    fn spans_beyond_the_payload_are_clamped_or_skipped() {
        let rec = FlowRecord::new(
            "a",
            None,
            "TCP",
            vec![0xAA; 4],
            vec![60],
            vec![],
            vec![
                StrongSpan {
                    start: 2,
                    end: 100,
                    kind: StrongField::Ports,
                },
                StrongSpan {
                    start: 50,
                    end: 60,
                    kind: StrongField::Ports,
                },
            ],
        )
        .unwrap();
        let out = randomize_strong_features(&rec, &RandomizationPolicy::all(3));
        assert_eq!(out.payload.len(), 4);
        assert_eq!(out.payload[..2], rec.payload[..2]);
    }

    fn record_strategy() -> impl Strategy<Value = FlowRecord> {
        (
            "[a-z0-9-]{1,12}",
            proptest::option::of("[A-Za-z]{1,8}"),
            prop_oneof![
                Just("TCP|TLS1.2".to_string()),
                Just("UDP|DNS".to_string()),
                Just("TCP".to_string())
            ],
            proptest::collection::vec(any::<u8>(), 0..48),
            proptest::collection::vec(1u64..2000, 0..8),
        )
            .prop_map(|(flow_id, label, proto, payload, pkts)| {
                let iats = vec![0.01; pkts.len().saturating_sub(1)];
                let spans = if payload.len() >= 4 {
                    vec![StrongSpan {
                        start: 1,
                        end: 3,
                        kind: StrongField::IpAddresses,
                    }]
                } else {
                    vec![]
                };
                FlowRecord::new(flow_id, label, proto, payload, pkts, iats, spans).unwrap()
            })
    }

    proptest! {
        #[test]
        fn wire_round_trip_preserves_records(rec in record_strategy()) {
            let line = record_to_line(&rec);
            let back = parse_record_line(&line).unwrap();
            prop_assert_eq!(back, rec);
        }
    }
}
