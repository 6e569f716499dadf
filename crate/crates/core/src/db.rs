//! The traffic knowledge database: normalized entries, cached intra-class
//! distance statistics, hierarchical protocol filtering, and a checksummed
//! snapshot format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DbError;
use crate::flow::FlowRecord;
use crate::norm::{normalize_flow, NormConfig, NormalizedViews, View, ViewSet};
use crate::retrieval::view_distance;

/// Reserved verdict label for flows outside the known classes. It is not a
/// class, so database entries may never carry it.
pub const NOVEL_LABEL: &str = "novel";

/// Protocol filter level: exact fine tag, or its coarse fallback.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtoLevel {
    Fine,
    Coarse,
}

impl fmt::Display for ProtoLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtoLevel::Fine => "fine",
            ProtoLevel::Coarse => "coarse",
        })
    }
}

/// One stored flow, already normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbEntry {
    pub flow_id: String,
    pub class_label: String,
    pub proto_fine: String,
    pub proto_coarse: String,
    pub views: NormalizedViews,
}

/// Key of one cached statistics group.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StatsKey {
    pub class_label: String,
    pub level: ProtoLevel,
    pub protocol: String,
    pub view: View,
}

/// Mean and standard deviation of the intra-group pairwise distances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProtocolStats {
    pub mean_dist: f64,
    pub std_dist: f64,
    pub sample_count: usize,
}

/// Which pairs enter the statistics.
///
/// `IncludeSelf` averages over all ordered pairs, self-pairs included, so the
/// normalizer is `n²`; this is the default. `ExcludeSelf` drops the zero
/// self-distances and normalizes by `n·(n-1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    #[default]
    IncludeSelf,
    ExcludeSelf,
}

/// The retrieval database.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficDatabase {
    pub entries: Vec<DbEntry>,
    pub stats: BTreeMap<StatsKey, ClassProtocolStats>,
    /// Sorted, deduplicated class labels present in the entries.
    pub label_set: Vec<String>,
    pub norm_config: NormConfig,
    pub stats_mode: StatsMode,
    views_union: ViewSet,
}

/// A built database plus non-fatal build diagnostics.
#[derive(Debug)]
pub struct BuildOutcome {
    pub database: TrafficDatabase,
    pub warnings: Vec<String>,
}

/// The candidate entries selected for one query view, and the filter level
/// that produced them.
#[derive(Debug)]
pub struct Candidates<'a> {
    pub level: ProtoLevel,
    pub protocol: String,
    pub entries: Vec<&'a DbEntry>,
}

impl TrafficDatabase {
    /// The answer space: every known class label plus the reserved
    /// novel label, in that order.
    pub fn label_space(&self) -> Vec<String> {
        let mut space = self.label_set.clone();
        space.push(NOVEL_LABEL.to_string());
        space
    }

    pub fn entry_by_id(&self, flow_id: &str) -> Option<&DbEntry> {
        self.entries.iter().find(|e| e.flow_id == flow_id)
    }

    /// Whether any stored entry carries this view.
    pub fn view_in_db(&self, view: View) -> bool {
        self.views_union.contains(view)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Builds a database with the default statistics mode.
pub fn build_database(flows: &[FlowRecord], cfg: &NormConfig) -> Result<BuildOutcome, DbError> {
    build_database_with(flows, cfg, StatsMode::default())
}

/// Builds a database: normalizes every flow, collects the label set, and
/// caches distance statistics for every (class, protocol, view) group at
/// both filter levels. Every flow must be labeled with a unique `flow_id`,
/// and the reserved novel label is rejected.
pub fn build_database_with(
    flows: &[FlowRecord],
    cfg: &NormConfig,
    mode: StatsMode,
) -> Result<BuildOutcome, DbError> {
    if flows.is_empty() {
        return Err(DbError::Empty);
    }

    let mut entries = Vec::with_capacity(flows.len());
    let mut seen = std::collections::BTreeSet::new();
    let mut labels = std::collections::BTreeSet::new();
    let mut views_union = ViewSet::default();

    for flow in flows {
        let label = flow.label.clone().ok_or_else(|| DbError::Unlabeled {
            flow_id: flow.flow_id.clone(),
        })?;
        if label == NOVEL_LABEL {
            return Err(DbError::ReservedLabel {
                flow_id: flow.flow_id.clone(),
            });
        }
        if !seen.insert(flow.flow_id.clone()) {
            return Err(DbError::DuplicateFlowId {
                flow_id: flow.flow_id.clone(),
            });
        }
        let views = normalize_flow(flow, cfg);
        for v in views.views_present.iter() {
            views_union.insert(v);
        }
        labels.insert(label.clone());
        entries.push(DbEntry {
            flow_id: flow.flow_id.clone(),
            class_label: label,
            proto_fine: flow.proto_fine.clone(),
            proto_coarse: flow.proto_coarse.clone(),
            views,
        });
    }

    let mut groups: BTreeMap<StatsKey, Vec<usize>> = BTreeMap::new();
    for (idx, entry) in entries.iter().enumerate() {
        for view in View::ALL {
            if !entry.views.views_present.contains(view) {
                continue;
            }
            for (level, tag) in [
                (ProtoLevel::Fine, &entry.proto_fine),
                (ProtoLevel::Coarse, &entry.proto_coarse),
            ] {
                let key = StatsKey {
                    class_label: entry.class_label.clone(),
                    level,
                    protocol: tag.clone(),
                    view,
                };
                groups.entry(key).or_default().push(idx);
            }
        }
    }

    let mut stats = BTreeMap::new();
    let mut warnings = Vec::new();
    for (key, idxs) in groups {
        let group: Vec<&NormalizedViews> = idxs.iter().map(|&i| &entries[i].views).collect();
        let s = compute_stats(&group, key.view, mode);
        if s.sample_count == 1 {
            warnings.push(format!(
                "class {:?} protocol {:?} ({}) view {} has a single sample; \
                 its pruning threshold admits exact matches only",
                key.class_label, key.protocol, key.level, key.view
            ));
        }
        stats.insert(key, s);
    }

    Ok(BuildOutcome {
        database: TrafficDatabase {
            entries,
            stats,
            label_set: labels.into_iter().collect(),
            norm_config: *cfg,
            stats_mode: mode,
            views_union,
        },
        warnings,
    })
}

/// Distance statistics over one group of normalized flows, all of one class
/// under one protocol tag, compared through one view.
///
/// With [`StatsMode::IncludeSelf`] the mean and variance run over all `n²`
/// ordered pairs (self-pairs contribute distance 0); a singleton group
/// therefore yields `(0, 0)`.
pub fn compute_stats(group: &[&NormalizedViews], view: View, mode: StatsMode) -> ClassProtocolStats {
    let n = group.len();
    assert!(n > 0, "stats require a non-empty group");

    // Unordered pair distances; symmetry supplies the ordered double-count.
    let mut pair_dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pair_dists.push(view_distance(view, group[i], group[j]));
        }
    }
    let pair_sum: f64 = pair_dists.iter().sum();

    let (mean, var) = match mode {
        StatsMode::IncludeSelf => {
            let denom = (n * n) as f64;
            let mean = 2.0 * pair_sum / denom;
            let sq_dev: f64 = pair_dists.iter().map(|d| (d - mean) * (d - mean)).sum();
            let var = (2.0 * sq_dev + n as f64 * mean * mean) / denom;
            (mean, var)
        }
        StatsMode::ExcludeSelf => {
            if n == 1 {
                (0.0, 0.0)
            } else {
                let denom = (n * (n - 1)) as f64;
                let mean = 2.0 * pair_sum / denom;
                let sq_dev: f64 = pair_dists.iter().map(|d| (d - mean) * (d - mean)).sum();
                (mean, 2.0 * sq_dev / denom)
            }
        }
    };

    ClassProtocolStats {
        mean_dist: mean,
        std_dist: var.max(0.0).sqrt(),
        sample_count: n,
    }
}

/// Selects the candidate entries for one query view.
///
/// Tries the exact fine protocol tag first; when no stored entry matches it
/// (with the view present), falls back to the coarse tag. Returns `None`
/// when neither level has a match.
pub fn candidate_set<'a>(
    db: &'a TrafficDatabase,
    proto_fine: &str,
    view: View,
) -> Option<Candidates<'a>> {
    let fine: Vec<&DbEntry> = db
        .entries
        .iter()
        .filter(|e| e.proto_fine == proto_fine && e.views.views_present.contains(view))
        .collect();
    if !fine.is_empty() {
        return Some(Candidates {
            level: ProtoLevel::Fine,
            protocol: proto_fine.to_string(),
            entries: fine,
        });
    }

    let coarse_tag = crate::flow::coarse_protocol(proto_fine);
    let coarse: Vec<&DbEntry> = db
        .entries
        .iter()
        .filter(|e| e.proto_coarse == coarse_tag && e.views.views_present.contains(view))
        .collect();
    if !coarse.is_empty() {
        return Some(Candidates {
            level: ProtoLevel::Coarse,
            protocol: coarse_tag.to_string(),
            entries: coarse,
        });
    }
    None
}

const SNAPSHOT_MAGIC: [u8; 4] = *b"MRDB";
const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_HEADER_LEN: usize = 4 + 4 + 8;
const SNAPSHOT_DIGEST_LEN: usize = 32;

/// Writes a snapshot: magic, format version, payload length, bincode
/// payload, and a SHA-256 checksum of the payload.
pub fn save_snapshot(db: &TrafficDatabase, path: impl AsRef<Path>) -> Result<(), DbError> {
    let payload = bincode::serialize(db).map_err(|e| DbError::Decode(e.to_string()))?;
    let mut bytes = Vec::with_capacity(SNAPSHOT_HEADER_LEN + payload.len() + SNAPSHOT_DIGEST_LEN);
    bytes.extend_from_slice(&SNAPSHOT_MAGIC);
    bytes.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&Sha256::digest(&payload));
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a snapshot back, verifying magic, version, length, and checksum.
pub fn load_snapshot(path: impl AsRef<Path>) -> Result<TrafficDatabase, DbError> {
    let bytes = fs::read(path)?;
    if bytes.len() < SNAPSHOT_HEADER_LEN {
        return Err(DbError::Truncated);
    }
    if bytes[..4] != SNAPSHOT_MAGIC {
        return Err(DbError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SNAPSHOT_VERSION {
        return Err(DbError::VersionMismatch {
            found: version,
            expected: SNAPSHOT_VERSION,
        });
    }
    let payload_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected_total = SNAPSHOT_HEADER_LEN
        .checked_add(payload_len)
        .and_then(|v| v.checked_add(SNAPSHOT_DIGEST_LEN))
        .ok_or(DbError::Truncated)?;
    if bytes.len() < expected_total {
        return Err(DbError::Truncated);
    }
    let payload = &bytes[SNAPSHOT_HEADER_LEN..SNAPSHOT_HEADER_LEN + payload_len];
    let digest = &bytes[SNAPSHOT_HEADER_LEN + payload_len..expected_total];
    if Sha256::digest(payload).as_slice() != digest {
        return Err(DbError::ChecksumMismatch);
    }
    bincode::deserialize(payload).map_err(|e| DbError::Decode(e.to_string()))
}
