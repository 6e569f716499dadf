//! Two-stage adaptive evidence retrieval.
//!
//! Stage one retrieves, per view, the top-k nearest stored flows among the
//! protocol-filtered candidates (coverage across views keeps weakly-covered
//! queries usable). Stage two prunes each view's list with a class- and
//! protocol-conditioned distance threshold `τ = mean + α·std`, derived from
//! the database's cached intra-class statistics, and pools the survivors.

use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::db::{candidate_set, ProtoLevel, StatsKey, TrafficDatabase};
use crate::error::RetrievalError;
use crate::norm::{NormalizedViews, View};
use crate::util::sha256_hex;

/// Retrieval knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Neighbours retrieved per view.
    pub k: usize,
    /// Width multiplier on the pruning threshold.
    pub alpha: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 5, alpha: 1.0 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), crate::error::ConfigError> {
        if self.k == 0 {
            return Err(crate::error::ConfigError::Invalid(
                "k must be at least 1".into(),
            ));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(crate::error::ConfigError::Invalid(
                "alpha must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One stage-one neighbour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedNeighbor {
    pub flow_id: String,
    pub class_label: String,
    pub view: View,
    pub protocol_level: ProtoLevel,
    pub protocol: String,
    pub distance: f64,
}

/// One stage-two item: a neighbour plus its pruning verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub flow_id: String,
    pub class_label: String,
    pub view: View,
    pub protocol_level: ProtoLevel,
    pub protocol: String,
    pub distance: f64,
    /// The threshold this item was compared against.
    pub threshold: f64,
    /// Whether the item survived pruning (always true when pruning is
    /// disabled).
    pub kept: bool,
}

/// The full retrieval outcome for one query.
///
/// `per_view` holds every retrieved item with its pruning verdict, in
/// ascending distance order; views absent from the query or the database map
/// to empty lists. `pool` holds only the kept items, view order first
/// (payload, length, time), distance order within a view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub per_view: BTreeMap<View, Vec<EvidenceItem>>,
    pub pool: Vec<EvidenceItem>,
}

impl EvidenceSet {
    /// An evidence set with no retrieved items in any view.
    pub fn empty() -> Self {
        let mut per_view = BTreeMap::new();
        for view in View::ALL {
            per_view.insert(view, Vec::new());
        }
        Self {
            per_view,
            pool: Vec::new(),
        }
    }

    /// Kept items of one view, ascending by distance.
    pub fn kept_in_view(&self, view: View) -> impl Iterator<Item = &EvidenceItem> {
        self.per_view
            .get(&view)
            .into_iter()
            .flatten()
            .filter(|i| i.kept)
    }

    /// Canonical JSON form; byte-identical across runs for identical
    /// retrieval outcomes.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("evidence serialization cannot fail")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

/// Fraction of positions at which two equal-length byte vectors disagree;
/// always in `[0, 1]`.
pub fn payload_distance(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len(), "payload vectors must have equal length");
    if a.is_empty() {
        return 0.0;
    }
    let mismatches = a.iter().zip(b).filter(|(x, y)| x != y).count();
    mismatches as f64 / a.len() as f64
}

/// Euclidean distance between two equal-length frequency-domain vectors.
pub fn spectral_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spectral vectors must have equal length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Distance between two flows through one view: Hamming fraction on payload
/// bytes, Euclidean on the frequency-domain profiles otherwise.
pub fn view_distance(view: View, a: &NormalizedViews, b: &NormalizedViews) -> f64 {
    match view {
        View::Payload => payload_distance(&a.payload_vec, &b.payload_vec),
        View::Length => spectral_distance(&a.len_freq_vec, &b.len_freq_vec),
        View::Time => spectral_distance(&a.iat_freq_vec, &b.iat_freq_vec),
    }
}

/// Max-heap entry ordered by (distance, flow id); the heap root is the worst
/// candidate currently held, so pushing and popping keeps the best k.
struct HeapCand<'a> {
    distance: f64,
    flow_id: &'a str,
    idx: usize,
}

impl PartialEq for HeapCand<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.distance.total_cmp(&other.distance).is_eq() && self.flow_id == other.flow_id
    }
}
impl Eq for HeapCand<'_> {}
impl PartialOrd for HeapCand<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapCand<'_> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then_with(|| self.flow_id.cmp(other.flow_id))
    }
}

/// Stage one: per-view top-k retrieval over the protocol-filtered
/// candidates.
///
/// Every view gets an entry in the returned map. A view missing from the
/// query, or with no candidates at either protocol level, maps to an empty
/// list. Within a view, results are in ascending distance order; ties break
/// on the flow id, so the outcome is a deterministic function of the inputs.
pub fn coverage_enhanced_retrieval(
    db: &TrafficDatabase,
    query: &NormalizedViews,
    proto_fine: &str,
    cfg: &RetrievalConfig,
) -> BTreeMap<View, Vec<RetrievedNeighbor>> {
    let mut out = BTreeMap::new();
    for view in View::ALL {
        let mut items = Vec::new();
        if query.views_present.contains(view) {
            if let Some(cands) = candidate_set(db, proto_fine, view) {
                let mut heap: BinaryHeap<HeapCand> = BinaryHeap::with_capacity(cfg.k + 1);
                for (idx, entry) in cands.entries.iter().enumerate() {
                    let distance = view_distance(view, query, &entry.views);
                    heap.push(HeapCand {
                        distance,
                        flow_id: &entry.flow_id,
                        idx,
                    });
                    if heap.len() > cfg.k {
                        heap.pop();
                    }
                }
                items = heap
                    .into_sorted_vec()
                    .into_iter()
                    .map(|c| {
                        let entry = cands.entries[c.idx];
                        RetrievedNeighbor {
                            flow_id: entry.flow_id.clone(),
                            class_label: entry.class_label.clone(),
                            view,
                            protocol_level: cands.level,
                            protocol: cands.protocol.clone(),
                            distance: c.distance,
                        }
                    })
                    .collect();
            }
        }
        out.insert(view, items);
    }
    out
}

/// Stage two: marks every retrieved item against its class-conditioned
/// threshold `τ = mean + α·std` and pools the survivors.
pub fn adaptive_prune(
    retrieved: &BTreeMap<View, Vec<RetrievedNeighbor>>,
    db: &TrafficDatabase,
    cfg: &RetrievalConfig,
) -> Result<EvidenceSet, RetrievalError> {
    assemble(retrieved, db, cfg, true)
}

/// Stage-two bypass: thresholds are still computed and recorded, but every
/// retrieved item is kept.
pub fn keep_all_evidence(
    retrieved: &BTreeMap<View, Vec<RetrievedNeighbor>>,
    db: &TrafficDatabase,
    cfg: &RetrievalConfig,
) -> Result<EvidenceSet, RetrievalError> {
    assemble(retrieved, db, cfg, false)
}

fn assemble(
    retrieved: &BTreeMap<View, Vec<RetrievedNeighbor>>,
    db: &TrafficDatabase,
    cfg: &RetrievalConfig,
    prune: bool,
) -> Result<EvidenceSet, RetrievalError> {
    let mut per_view: BTreeMap<View, Vec<EvidenceItem>> = BTreeMap::new();
    for view in View::ALL {
        let mut items = Vec::new();
        for n in retrieved.get(&view).into_iter().flatten() {
            let key = StatsKey {
                class_label: n.class_label.clone(),
                level: n.protocol_level,
                protocol: n.protocol.clone(),
                view,
            };
            let stats = db
                .stats
                .get(&key)
                .ok_or_else(|| RetrievalError::MissingStats {
                    class: n.class_label.clone(),
                    protocol: n.protocol.clone(),
                    view,
                    level: n.protocol_level,
                })?;
            let threshold = stats.mean_dist + cfg.alpha * stats.std_dist;
            items.push(EvidenceItem {
                flow_id: n.flow_id.clone(),
                class_label: n.class_label.clone(),
                view,
                protocol_level: n.protocol_level,
                protocol: n.protocol.clone(),
                distance: n.distance,
                threshold,
                kept: !prune || n.distance <= threshold,
            });
        }
        per_view.insert(view, items);
    }

    let pool = View::ALL
        .iter()
        .flat_map(|v| per_view[v].iter().filter(|i| i.kept).cloned())
        .collect();

    Ok(EvidenceSet { per_view, pool })
}
