//! Change-group stratification by present-to-future whole-tumor Dice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How strongly a case's tumor changed between present and future.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeGroup {
    /// Lowest decile of Dice(B, C): the most pronounced changes.
    Large,
    /// Below the mean but not in the lowest decile.
    Moderate,
    /// At or above the mean: little change.
    Small,
}

impl ChangeGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ChangeGroup::Large => "large",
            ChangeGroup::Moderate => "moderate",
            ChangeGroup::Small => "small",
        }
    }
}

impl std::fmt::Display for ChangeGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stratification result, with the thresholds it was computed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangeGroups {
    /// Dice value of the largest member of the large-change group.
    pub large_threshold: f64,
    /// Mean Dice(B, C) over all cases.
    pub mean_change: f64,
    pub membership: BTreeMap<String, ChangeGroup>,
    pub n_large: usize,
    pub n_moderate: usize,
    pub n_small: usize,
    /// Set when no case falls strictly below the mean (moderate group empty).
    pub degenerate: bool,
}

impl ChangeGroups {
    pub fn group_of(&self, case_id: &str) -> Option<ChangeGroup> {
        self.membership.get(case_id).copied()
    }

    pub fn cases_in(&self, group: ChangeGroup) -> Vec<String> {
        self.membership
            .iter()
            .filter(|(_, &g)| g == group)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Stratify cases by their Dice(B, C) change values: the lowest decile is the
/// large-change group, values below the mean (but not large) are moderate,
/// the rest small. Requires at least 10 cases for the decile to make sense.
pub fn stratify(changes: &[(String, f64)]) -> Result<ChangeGroups> {
    let n = changes.len();
    if n < 10 {
        return Err(Error::Stats(format!(
            "stratification needs at least 10 cases for a decile, got {n}"
        )));
    }
    if changes.iter().any(|(_, v)| !v.is_finite()) {
        return Err(Error::Stats("change values must be finite".into()));
    }

    let mut sorted: Vec<(String, f64)> = changes.to_vec();
    sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(a.0.cmp(&b.0)));
    let n_large = n / 10;
    let mean_change = sorted.iter().map(|(_, v)| v).sum::<f64>() / n as f64;
    let large_threshold = sorted[n_large - 1].1;

    let mut membership = BTreeMap::new();
    let mut n_moderate = 0;
    let mut n_small = 0;
    // tolerance guards against accumulation noise when values equal the mean
    let below_mean =
        |v: f64| v < mean_change && (mean_change - v) > 1e-12 * mean_change.abs().max(1.0);
    for (rank, (id, value)) in sorted.iter().enumerate() {
        let group = if rank < n_large {
            ChangeGroup::Large
        } else if below_mean(*value) {
            n_moderate += 1;
            ChangeGroup::Moderate
        } else {
            n_small += 1;
            ChangeGroup::Small
        };
        membership.insert(id.clone(), group);
    }

    Ok(ChangeGroups {
        large_threshold,
        mean_change,
        membership,
        n_large,
        n_moderate,
        n_small,
        degenerate: n_moderate == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arithmetic_cases() -> Vec<(String, f64)> {
        (1..=20).map(|k| (format!("case-{k:02}"), 0.05 * k as f64)).collect()
    }

    #[test]
    fn arithmetic_sequence_hand_computed() {
        let groups = stratify(&arithmetic_cases()).unwrap();
        // mean of 0.05..=1.00 is 0.525; lowest decile of 20 = 2 cases
        assert_eq!(groups.n_large, 2);
        assert!((groups.mean_change - 0.525).abs() < 1e-12);
        assert!((groups.large_threshold - 0.10).abs() < 1e-12);
        assert_eq!(groups.group_of("case-01"), Some(ChangeGroup::Large));
        assert_eq!(groups.group_of("case-02"), Some(ChangeGroup::Large));
        // 0.15 ..= 0.50 are moderate: cases 3..=10
        for k in 3..=10 {
            assert_eq!(
                groups.group_of(&format!("case-{k:02}")),
                Some(ChangeGroup::Moderate),
                "case {k}"
            );
        }
        assert_eq!(groups.n_moderate, 8);
        // 0.55 and beyond are small
        for k in 11..=20 {
            assert_eq!(groups.group_of(&format!("case-{k:02}")), Some(ChangeGroup::Small));
        }
        assert!(!groups.degenerate);
    }

    #[test]
    fn identical_values_set_the_degenerate_flag() {
        let cases: Vec<(String, f64)> =
            (0..12).map(|k| (format!("c{k}"), 0.7)).collect();
        let groups = stratify(&cases).unwrap();
        assert_eq!(groups.n_moderate, 0);
        assert!(groups.degenerate);
        assert_eq!(groups.n_large, 1);
    }

    #[test]
    fn stratify_is_invariant_under_reordering() {
        let mut cases = arithmetic_cases();
        let forward = stratify(&cases).unwrap();
        cases.reverse();
        let backward = stratify(&cases).unwrap();
        assert_eq!(forward.membership, backward.membership);
        assert_eq!(forward.large_threshold, backward.large_threshold);
    }

    #[test]
    fn fewer_than_ten_cases_is_an_error() {
        let cases: Vec<(String, f64)> = (0..9).map(|k| (format!("c{k}"), k as f64)).collect();
        assert!(matches!(stratify(&cases), Err(Error::Stats(_))));
    }
}
