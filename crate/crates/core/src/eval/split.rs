//! Class- and protocol-stratified dataset splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::flow::FlowRecord;

/// Split parameters. Stratification is always by (class, coarse protocol).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of each stratum that populates the database partition.
    pub db_fraction: f64,
    /// One independent split (and experiment run) per seed.
    pub seeds: Vec<u64>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            db_fraction: 0.8,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.db_fraction > 0.0 && self.db_fraction < 1.0) {
            return Err(EvalError::Validation(format!(
                "db_fraction must lie strictly between 0 and 1, got {}",
                self.db_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(EvalError::Validation("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// One split with its diagnostics.
#[derive(Debug)]
pub struct SplitOutcome {
    pub db_part: Vec<FlowRecord>,
    pub test_part: Vec<FlowRecord>,
    pub warnings: Vec<String>,
}

/// Splits labeled flows into database and test partitions, stratified by
/// (class label, coarse protocol).
///
/// Within each stratum the flows are shuffled deterministically by `seed`
/// and `round(db_fraction·n)` of them (clamped so both partitions get at
/// least one flow) go to the database side. A singleton stratum cannot be
/// split; its lone flow goes to the database side with a warning.
pub fn stratified_split(
    flows: &[FlowRecord],
    spec: &SplitSpec,
    seed: u64,
) -> Result<SplitOutcome, EvalError> {
    spec.validate()?;
    if flows.is_empty() {
        return Err(EvalError::Validation("cannot split an empty flow set".into()));
    }

    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, flow) in flows.iter().enumerate() {
        let label = flow.label.clone().ok_or_else(|| {
            EvalError::Validation(format!(
                "flow {:?} is unlabeled; splits need labeled flows",
                flow.flow_id
            ))
        })?;
        groups
            .entry((label, flow.proto_coarse.clone()))
            .or_default()
            .push(i);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut db_idx = Vec::new();
    let mut test_idx = Vec::new();

    for ((label, proto), mut idxs) in groups {
        idxs.shuffle(&mut rng);
        let n = idxs.len();
        if n == 1 {
            warnings.push(format!(
                "class {label:?} protocol {proto:?} has a single flow; \
                 assigned to the database partition"
            ));
            db_idx.push(idxs[0]);
            continue;
        }
        let n_db = ((spec.db_fraction * n as f64).round() as usize).clamp(1, n - 1);
        db_idx.extend_from_slice(&idxs[..n_db]);
        test_idx.extend_from_slice(&idxs[n_db..]);
    }

    db_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitOutcome {
        db_part: db_idx.iter().map(|&i| flows[i].clone()).collect(),
        test_part: test_idx.iter().map(|&i| flows[i].clone()).collect(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(id: &str, label: &str, proto: &str) -> FlowRecord {
        FlowRecord::new(
            id,
            Some(label.to_string()),
            proto,
            vec![1, 2, 3],
            vec![60, 70],
            vec![0.01],
            vec![],
        )
        .unwrap()
    }

    fn spec(fraction: f64) -> SplitSpec {
        SplitSpec {
            db_fraction: fraction,
            seeds: vec![1],
        }
    }

    #[test]
    fn ten_flows_one_group_fraction_08_gives_8_and_2() {
        let flows: Vec<FlowRecord> = (0..10)
            .map(|i| flow(&format!("f{i}"), "A", "TCP"))
            .collect();
        let out = stratified_split(&flows, &spec(0.8), 7).unwrap();
        assert_eq!(out.db_part.len(), 8);
        assert_eq!(out.test_part.len(), 2);
    }

    #[test]
    fn every_group_of_five_splits_four_one() {
        let mut flows = Vec::new();
        for class in ["A", "B"] {
            for proto in ["TCP|TLS1.2", "UDP|DNS"] {
                for i in 0..5 {
                    flows.push(flow(&format!("{class}-{proto}-{i}"), class, proto));
                }
            }
        }
        let out = stratified_split(&flows, &spec(0.8), 3).unwrap();
        assert_eq!(out.db_part.len(), 16);
        assert_eq!(out.test_part.len(), 4);
        // Each of the four groups contributes exactly one test flow.
        for class in ["A", "B"] {
            for coarse in ["TCP", "UDP"] {
                let count = out
                    .test_part
                    .iter()
                    .filter(|f| f.label.as_deref() == Some(class) && f.proto_coarse == coarse)
                    .count();
                assert_eq!(count, 1, "group {class}/{coarse}");
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_partitions_and_seeds_differ() {
        let flows: Vec<FlowRecord> = (0..40)
            .map(|i| flow(&format!("f{i:02}"), if i % 2 == 0 { "A" } else { "B" }, "TCP"))
            .collect();
        let a = stratified_split(&flows, &spec(0.8), 5).unwrap();
        let b = stratified_split(&flows, &spec(0.8), 5).unwrap();
        assert_eq!(a.db_part, b.db_part);
        assert_eq!(a.test_part, b.test_part);

        let c = stratified_split(&flows, &spec(0.8), 6).unwrap();
        assert_ne!(
            a.test_part, c.test_part,
            "a different seed reshuffles 20-flow strata with near certainty"
        );
    }

    #[test]
    fn union_is_exhaustive_and_disjoint() {
        let flows: Vec<FlowRecord> = (0..23)
            .map(|i| flow(&format!("f{i:02}"), ["A", "B", "C"][i % 3], "TCP"))
            .collect();
        let out = stratified_split(&flows, &spec(0.7), 11).unwrap();
        let mut ids: Vec<&str> = out
            .db_part
            .iter()
            .chain(&out.test_part)
            .map(|f| f.flow_id.as_str())
            .collect();
        ids.sort_unstable();
        let mut want: Vec<String> = (0..23).map(|i| format!("f{i:02}")).collect();
        want.sort();
        assert_eq!(ids, want.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn two_flow_groups_land_on_both_sides() {
        let flows = vec![flow("a", "A", "TCP"), flow("b", "A", "TCP")];
        let out = stratified_split(&flows, &spec(0.9), 1).unwrap();
        assert_eq!(out.db_part.len(), 1, "round(1.8)=2 clamps to n-1=1");
        assert_eq!(out.test_part.len(), 1);
    }

    #[test]
    fn singleton_groups_go_to_db_with_a_warning() {
        let flows = vec![
            flow("a", "A", "TCP"),
            flow("b", "B", "TCP"),
            flow("c", "B", "TCP"),
        ];
        let out = stratified_split(&flows, &spec(0.8), 1).unwrap();
        assert!(out.warnings.iter().any(|w| w.contains("\"A\"")));
        assert!(out.db_part.iter().any(|f| f.flow_id == "a"));
        assert!(out.test_part.iter().all(|f| f.flow_id != "a"));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let flows = vec![flow("a", "A", "TCP")];
        assert!(stratified_split(&flows, &spec(0.0), 1).is_err());
        assert!(stratified_split(&flows, &spec(1.0), 1).is_err());
        assert!(stratified_split(&[], &spec(0.5), 1).is_err());

        let unlabeled =
            FlowRecord::new("u", None, "TCP", vec![1], vec![60], vec![], vec![]).unwrap();
        assert!(stratified_split(&[unlabeled], &spec(0.5), 1).is_err());
    }
}
