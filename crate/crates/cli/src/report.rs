//! `report.json` and `timing.json` layouts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub mode: String,
    /// Resolved configuration, minus the output directory.
    pub config: BTreeMap<String, String>,
    /// Test images passed over because the model already got them wrong.
    pub skipped_misclassified: usize,
    pub attacks: Vec<AttackRow>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub id: usize,
    /// Position in the test set.
    pub image_index: usize,
    pub original_label: usize,
    pub target: Option<usize>,
    pub success: bool,
    pub adversarial_label: usize,
    pub l2: f64,
    pub final_c: f64,
    pub iterations: usize,
    pub batch: usize,
    pub first_valid_iteration: Option<usize>,
    pub queries: Queries,
    pub c_trials: Vec<CTrialRow>,
    pub stage_switches: Vec<StageSwitchRow>,
    pub files: Files,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Queries {
    pub estimator: u64,
    pub initial: u64,
    pub iterate: u64,
    pub stage: u64,
    pub total: u64,
    /// Growth of the oracle's own counter over the attack.
    pub oracle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CTrialRow {
    pub c: f64,
    pub success: bool,
    pub l2: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSwitchRow {
    pub iteration: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Artifact paths relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Files {
    pub original: String,
    pub noise: String,
    pub adversarial: String,
    /// Lossless copy of the adversarial image (IDX, f64).
    pub adversarial_tensor: String,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub attacks: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
    /// Over successful attacks only.
    pub mean_l2: Option<f64>,
    pub mean_queries: Option<f64>,
}

impl Summary {
    pub fn from_rows(rows: &[AttackRow]) -> Self {
        let n = rows.len();
        let wins: Vec<&AttackRow> = rows.iter().filter(|r| r.success).collect();
        let mean = |sum: f64, count: usize| (count > 0).then(|| sum / count as f64);
        Summary {
            attacks: n,
            successes: wins.len(),
            success_rate: mean(wins.len() as f64, n),
            mean_l2: mean(wins.iter().map(|r| r.l2).sum(), wins.len()),
            mean_queries: mean(rows.iter().map(|r| r.queries.total as f64).sum(), n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds_per_attack: Vec<f64>,
    pub mean_seconds: Option<f64>,
}

impl Timing {
    pub fn new(seconds_per_attack: Vec<f64>) -> Self {
        let n = seconds_per_attack.len();
        let mean_seconds = (n > 0).then(|| seconds_per_attack.iter().sum::<f64>() / n as f64);
        Self {
            seconds_per_attack,
            mean_seconds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(success: bool, l2: f64, total: u64) -> AttackRow {
        AttackRow {
            id: 0,
            image_index: 3,
            original_label: 1,
            target: None,
            success,
            adversarial_label: 0,
            l2,
            final_c: 0.1,
            iterations: 10,
            batch: 2,
            first_valid_iteration: success.then_some(4),
            queries: Queries {
                estimator: 40,
                initial: 1,
                iterate: 10,
                stage: 0,
                total,
                oracle: total,
            },
            c_trials: vec![CTrialRow {
                c: 0.1,
                success,
                l2,
                iterations: 10,
            }],
            stage_switches: vec![],
            files: Files {
                original: "a".into(),
                noise: "b".into(),
                adversarial: "c".into(),
                adversarial_tensor: "d".into(),
                trace: "e".into(),
            },
        }
    }

    #[test]
    fn summary_examples() {
        let empty = Summary::from_rows(&[]);
        assert_eq!((empty.attacks, empty.success_rate, empty.mean_l2), (0, None, None));

        let one = Summary::from_rows(&[row(true, 1.5, 51)]);
        assert_eq!(one.mean_l2, Some(1.5));
        assert_eq!(one.success_rate, Some(1.0));

        let mixed = Summary::from_rows(&[row(true, 1.0, 10), row(false, 9.0, 20), row(true, 2.0, 30), row(false, 0.0, 40)]);
        assert_eq!(mixed.successes, 2);
        assert_eq!(mixed.success_rate, Some(0.5));
        assert_eq!(mixed.mean_l2, Some(1.5));
        assert_eq!(mixed.mean_queries, Some(25.0));
    }

    #[test]
    fn report_json_round_trips_byte_exact() {
        let rows = vec![row(true, 0.1 + 0.2, 51), row(false, 1.0 / 3.0, 7)];
        let report = CampaignReport {
            mode: "untargeted".into(),
            config: [("seed".to_string(), "0".to_string())].into(),
            skipped_misclassified: 2,
            summary: Summary::from_rows(&rows),
            attacks: rows,
        };
        let text = serde_json::to_string_pretty(&report).unwrap();
        let back: CampaignReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }
}
