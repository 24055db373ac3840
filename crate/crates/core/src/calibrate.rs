//! Threshold selection at a target false-negative rate, and the joint
//! trigger/filter budget sweep behind the trade-off curves.
//!
//! Blocking is strict-less: a score equal to the threshold passes. All
//! emitted thresholds are observed scores (or the infinity markers), so
//! budget guarantees hold by counting, not by interpolation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{ScoredDataset, ScoredGeneration};

/// Deterministic vetoes applied before the filter score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardRules {
    #[serde(default)]
    pub block_non_compilable: bool,
}

impl HardRules {
    /// Name of the first rule that fires, if any.
    pub fn hit(&self, compilable: bool) -> Option<&'static str> {
        if self.block_non_compilable && !compilable {
            Some("non_compilable")
        } else {
            None
        }
    }
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            (if *v > 0.0 { "inf" } else { "-inf" }).serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Marker(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Marker(m) => match m.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad threshold marker {other}"))),
            },
        }
    }
}

/// A (trigger threshold, filter threshold, hard rules) triple; fully
/// determines gating. Scores strictly below a threshold are blocked, so
/// `(0, 0, no rules)` passes everything. The `inf` marker blocks all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    #[serde(with = "threshold_serde")]
    pub trigger_threshold: f64,
    #[serde(with = "threshold_serde")]
    pub filter_threshold: f64,
    #[serde(default)]
    pub hard_rules: HardRules,
}

impl ThresholdPolicy {
    pub fn pass_all() -> Self {
        Self {
            trigger_threshold: 0.0,
            filter_threshold: 0.0,
            hard_rules: HardRules::default(),
        }
    }

    pub fn passes_trigger(&self, score: f64) -> bool {
        score >= self.trigger_threshold
    }

    pub fn passes_filter(&self, score: f64, compilable: bool) -> bool {
        self.hard_rules.hit(compilable).is_none() && score >= self.filter_threshold
    }
}

/// Policy artifact with provenance, written as `policy.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    #[serde(flatten)]
    pub policy: ThresholdPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<PolicyProvenance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyProvenance {
    pub trigger_model_hash: String,
    pub filter_model_hash: String,
    pub target_fnr: f64,
    pub grid_pct: f64,
}

pub fn write_policy(path: &Path, policy: &PolicyFile) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, policy)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<PolicyFile> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// False-negative budget at a target rate: `allowed_fn` positives may be
/// blocked in total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnrBudget {
    pub target_fnr: f64,
    pub total_positives: usize,
    pub allowed_fn: usize,
}

impl FnrBudget {
    pub fn new(target_fnr: f64, total_positives: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&target_fnr) {
            return Err(Error::InvalidConfig(format!(
                "target_fnr must be in [0,1], got {target_fnr}"
            )));
        }
        Ok(Self {
            target_fnr,
            total_positives,
            allowed_fn: (target_fnr * total_positives as f64).floor() as usize,
        })
    }
}

/// Largest threshold, drawn from the observed scores (or +inf), that
/// blocks at most `floor(target_fnr * P)` positives under strict-less
/// blocking.
pub fn threshold_at_fnr(positive_scores: &[f64], target_fnr: f64) -> Result<f64> {
    if positive_scores.is_empty() {
        return Err(Error::EmptyPositives(
            "threshold_at_fnr needs at least one positive score".to_string(),
        ));
    }
    let budget = FnrBudget::new(target_fnr, positive_scores.len())?.allowed_fn;
    Ok(threshold_for_budget(positive_scores, budget))
}

/// Count-form variant: block at most `allowed_fn` of the given positives.
pub fn threshold_for_budget(positive_scores: &[f64], allowed_fn: usize) -> f64 {
    if allowed_fn >= positive_scores.len() {
        return f64::INFINITY;
    }
    let mut sorted = positive_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // count(< sorted[k]) <= k, and any larger observed score blocks more
    sorted[allowed_fn]
}

/// Fraction of positives blocked anywhere in the two-stage gate. The
/// trigger-blocked and filter-blocked sets are disjoint by construction:
/// only trigger survivors reach the filter.
pub fn combined_fnr(policy: &ThresholdPolicy, scored: &ScoredDataset) -> Result<f64> {
    let counts = fn_counts(policy, scored);
    if counts.positives == 0 {
        return Err(Error::EmptyPositives(
            "combined_fnr needs at least one positive".to_string(),
        ));
    }
    Ok((counts.trigger_fn + counts.filter_fn) as f64 / counts.positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FnCounts {
    pub positives: usize,
    pub trigger_fn: usize,
    /// Positives passing the trigger but blocked by a hard rule or the
    /// filter threshold.
    pub filter_fn: usize,
}

pub fn fn_counts(policy: &ThresholdPolicy, scored: &ScoredDataset) -> FnCounts {
    let mut positives = 0;
    let mut trigger_fn = 0;
    let mut filter_fn = 0;
    for g in scored {
        if !g.label.is_positive() {
            continue;
        }
        positives += 1;
        if !policy.passes_trigger(g.trigger_score) {
            trigger_fn += 1;
        } else if !policy.passes_filter(g.filter_score, g.compilable) {
            filter_fn += 1;
        }
    }
    FnCounts {
        positives,
        trigger_fn,
        filter_fn,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Requested percentage of generations blocked by the trigger.
    pub grid_pct: f64,
    pub feasible: bool,
    /// Present iff feasible.
    pub policy: Option<ThresholdPolicy>,
    /// Exact combined FNR on the calibration data; for infeasible points
    /// this is the trigger-only FNR that already overruns the budget.
    pub realized_fnr: f64,
    pub trigger_fn: usize,
    pub filter_fn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub target_fnr: f64,
    pub total_positives: usize,
    pub allowed_fn: usize,
    pub points: Vec<SweepPoint>,
}

pub fn write_sweep(path: &Path, sweep: &SweepResult) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, sweep)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<SweepResult> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// The default sweep grid: 0..60 percent in steps of 5.
pub fn default_grid() -> Vec<f64> {
    (0..=12).map(|i| i as f64 * 5.0).collect()
}

/// Joint FNR-budget sweep.
///
/// For each grid point g, the trigger threshold is set at the g-th
/// percentile of trigger scores over all generations, the trigger's false
/// negatives are charged against the budget, and the filter receives
/// whatever remains. Rule-blocked positives count against the filter's
/// share, so the realized combined FNR never exceeds the target on the
/// calibration data.
pub fn sweep_joint(
    scored: &ScoredDataset,
    target_fnr: f64,
    grid: &[f64],
    hard_rules: HardRules,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".to_string()));
    }
    if grid.iter().any(|&g| !(0.0..100.0).contains(&g)) {
        return Err(Error::InvalidConfig(
            "grid percentages must be in [0, 100)".to_string(),
        ));
    }
    let positives: Vec<&ScoredGeneration> =
        scored.iter().filter(|g| g.label.is_positive()).collect();
    if positives.is_empty() {
        return Err(Error::EmptyPositives("sweep needs positives".to_string()));
    }
    let budget = FnrBudget::new(target_fnr, positives.len())?;

    let mut trigger_scores: Vec<f64> = scored.iter().map(|g| g.trigger_score).collect();
    trigger_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut points = Vec::with_capacity(grid.len());
    for &g in grid {
        let k = (g / 100.0 * trigger_scores.len() as f64).floor() as usize;
        let trigger_threshold = if k == 0 {
            // block nothing: any score >= the minimum passes
            0.0
        } else {
            trigger_scores[k.min(trigger_scores.len() - 1)]
        };

        let trigger_fn = positives
            .iter()
            .filter(|p| p.trigger_score < trigger_threshold)
            .count();
        if trigger_fn > budget.allowed_fn {
            let point_policy = ThresholdPolicy {
                trigger_threshold,
                filter_threshold: 0.0,
                hard_rules,
            };
            let realized = combined_fnr(&point_policy, scored)?;
            points.push(SweepPoint {
                grid_pct: g,
                feasible: false,
                policy: None,
                realized_fnr: realized.min(trigger_fn as f64 / positives.len() as f64),
                trigger_fn,
                filter_fn: 0,
            });
            continue;
        }

        // survivors of trigger and hard rules compete for the remaining budget
        let mut remaining = budget.allowed_fn - trigger_fn;
        let mut surviving_scores = Vec::new();
        for p in &positives {
            if p.trigger_score < trigger_threshold {
                continue;
            }
            if hard_rules.hit(p.compilable).is_some() {
                remaining = match remaining.checked_sub(1) {
                    Some(r) => r,
                    None => {
                        remaining = usize::MAX; // marker: rules alone overrun
                        break;
                    }
                };
            } else {
                surviving_scores.push(p.filter_score);
            }
        }
        if remaining == usize::MAX {
            let point_policy = ThresholdPolicy {
                trigger_threshold,
                filter_threshold: 0.0,
                hard_rules,
            };
            points.push(SweepPoint {
                grid_pct: g,
                feasible: false,
                policy: None,
                realized_fnr: combined_fnr(&point_policy, scored)?,
                trigger_fn,
                filter_fn: 0,
            });
            continue;
        }

        let filter_threshold = if surviving_scores.is_empty() {
            0.0
        } else {
            threshold_for_budget(&surviving_scores, remaining)
        };
        let policy = ThresholdPolicy {
            trigger_threshold,
            filter_threshold,
            hard_rules,
        };
        let counts = fn_counts(&policy, scored);
        let realized = (counts.trigger_fn + counts.filter_fn) as f64 / counts.positives as f64;
        debug_assert!(counts.trigger_fn + counts.filter_fn <= budget.allowed_fn);
        points.push(SweepPoint {
            grid_pct: g,
            feasible: true,
            policy: Some(policy),
            realized_fnr: realized,
            trigger_fn: counts.trigger_fn,
            filter_fn: counts.filter_fn,
        });
    }

    Ok(SweepResult {
        target_fnr,
        total_positives: positives.len(),
        allowed_fn: budget.allowed_fn,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Label, Outcome, ShownAction};
    use proptest::prelude::*;

    fn scored(
        label: Label,
        trigger_score: f64,
        filter_score: f64,
        compilable: bool,
    ) -> ScoredGeneration {
        ScoredGeneration {
            event_id: format!("e{trigger_score}-{filter_score}"),
            user_id: "u".to_string(),
            label,
            outcome: if label.is_positive() {
                Outcome::Shown(ShownAction::Accepted)
            } else {
                Outcome::Shown(ShownAction::Ignored)
            },
            completion_length: 5,
            compilable,
            trigger_score,
            filter_score,
        }
    }

    #[test]
    fn threshold_examples_from_contract() {
        let positives: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        // zero budget: threshold sits at the minimum, blocking nothing
        assert_eq!(threshold_at_fnr(&positives, 0.0).unwrap(), 0.1);
        // full budget: the +inf marker may block everything
        assert_eq!(threshold_at_fnr(&positives, 1.0).unwrap(), f64::INFINITY);
        // 10% of 10 positives: exactly one (0.1) may fall below
        assert_eq!(threshold_at_fnr(&positives, 0.10).unwrap(), 0.2);
        assert!(threshold_at_fnr(&[], 0.1).is_err());
    }

    #[test]
    fn threshold_respects_budget_with_ties() {
        let positives = vec![0.2, 0.2, 0.2, 0.7];
        let t = threshold_at_fnr(&positives, 0.25).unwrap();
        // budget 1, but blocking any of the tied 0.2s means blocking all
        // three; strict-less blocking at 0.2 blocks none
        assert_eq!(t, 0.2);
        let blocked = positives.iter().filter(|&&s| s < t).count();
        assert!(blocked <= 1);
    }

    #[test]
    fn combined_fnr_hand_fixture() {
        let data = vec![
            scored(Label::Positive, 0.9, 0.9, true),
            scored(Label::Positive, 0.1, 0.9, true), // trigger-blocked below
            scored(Label::Positive, 0.9, 0.1, true), // filter-blocked below
            scored(Label::Negative, 0.5, 0.5, true),
        ];
        let pass_all = ThresholdPolicy::pass_all();
        assert_eq!(combined_fnr(&pass_all, &data).unwrap(), 0.0);

        let block_everything = ThresholdPolicy {
            trigger_threshold: f64::INFINITY,
            filter_threshold: 0.0,
            hard_rules: HardRules::default(),
        };
        assert_eq!(combined_fnr(&block_everything, &data).unwrap(), 1.0);

        // trigger at 0.2 blocks the second positive; filter at 0.2 blocks
        // the third; 2/3 total — then relax the filter for exactly 1/3
        let policy = ThresholdPolicy {
            trigger_threshold: 0.2,
            filter_threshold: 0.05,
            hard_rules: HardRules::default(),
        };
        let fnr = combined_fnr(&policy, &data).unwrap();
        assert!((fnr - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_fn_sets() {
        // a positive blocked by the trigger is never double-counted by the
        // filter, even when its filter score is also below threshold
        let data = vec![
            scored(Label::Positive, 0.1, 0.1, true),
            scored(Label::Positive, 0.9, 0.9, true),
        ];
        let policy = ThresholdPolicy {
            trigger_threshold: 0.5,
            filter_threshold: 0.5,
            hard_rules: HardRules::default(),
        };
        let counts = fn_counts(&policy, &data);
        assert_eq!(counts.trigger_fn, 1);
        assert_eq!(counts.filter_fn, 0);
    }

    #[test]
    fn hard_rule_blocks_count_toward_fnr() {
        let data = vec![
            scored(Label::Positive, 0.9, 0.9, false),
            scored(Label::Positive, 0.9, 0.9, true),
        ];
        let policy = ThresholdPolicy {
            trigger_threshold: 0.0,
            filter_threshold: 0.0,
            hard_rules: HardRules { block_non_compilable: true },
        };
        let fnr = combined_fnr(&policy, &data).unwrap();
        assert_eq!(fnr, 0.5);
    }

    fn synthetic_scored(n: usize, seed: u64) -> ScoredDataset {
        use rand::Rng;
        let mut rng = crate::util::derived_rng(seed, "cal-fixture");
        (0..n)
            .map(|i| {
                let quality: f64 = rng.gen();
                let label = if rng.gen_bool(quality * 0.4) {
                    Label::Positive
                } else {
                    Label::Negative
                };
                let mut g = scored(
                    label,
                    (quality + rng.gen::<f64>()) / 2.0,
                    (quality * 2.0 + rng.gen::<f64>()) / 3.0,
                    rng.gen_bool(0.9),
                );
                g.event_id = format!("e{i}");
                g
            })
            .collect()
    }

    #[test]
    fn sweep_budget_safety_and_monotonicity() {
        let data = synthetic_scored(4000, 1);
        for &target in &[0.01, 0.05, 0.10, 0.20] {
            let sweep = sweep_joint(&data, target, &default_grid(), HardRules::default()).unwrap();
            let mut last_trigger_fn = 0usize;
            for point in &sweep.points {
                if point.feasible {
                    let policy = point.policy.unwrap();
                    let realized = combined_fnr(&policy, &data).unwrap();
                    assert!(
                        realized <= target + 1e-12,
                        "target {target} grid {} realized {realized}",
                        point.grid_pct
                    );
                    assert_eq!(realized, point.realized_fnr);
                }
                assert!(point.trigger_fn >= last_trigger_fn, "monotone trigger FNs");
                last_trigger_fn = point.trigger_fn;
            }
        }
    }

    #[test]
    fn sweep_thresholds_live_on_observed_scores() {
        let data = synthetic_scored(500, 2);
        let sweep = sweep_joint(&data, 0.10, &default_grid(), HardRules::default()).unwrap();
        let trigger_scores: Vec<f64> = data.iter().map(|g| g.trigger_score).collect();
        let filter_scores: Vec<f64> = data.iter().map(|g| g.filter_score).collect();
        for point in sweep.points.iter().filter(|p| p.feasible) {
            let p = point.policy.unwrap();
            assert!(
                p.trigger_threshold == 0.0
                    || p.trigger_threshold.is_infinite()
                    || trigger_scores.contains(&p.trigger_threshold),
                "trigger threshold {} off-grid",
                p.trigger_threshold
            );
            assert!(
                p.filter_threshold == 0.0
                    || p.filter_threshold.is_infinite()
                    || filter_scores.contains(&p.filter_threshold),
                "filter threshold {} off-grid",
                p.filter_threshold
            );
        }
    }

    #[test]
    fn sweep_zero_grid_point_is_filter_only() {
        let data = synthetic_scored(800, 3);
        let sweep = sweep_joint(&data, 0.10, &[0.0], HardRules::default()).unwrap();
        let point = &sweep.points[0];
        assert!(point.feasible);
        let policy = point.policy.unwrap();
        assert_eq!(policy.trigger_threshold, 0.0, "all budget goes to the filter");
        assert_eq!(point.trigger_fn, 0);

        // equal to calibrating the filter alone on the same positives
        let positives: Vec<f64> = data
            .iter()
            .filter(|g| g.label.is_positive())
            .map(|g| g.filter_score)
            .collect();
        let direct = threshold_at_fnr(&positives, 0.10).unwrap();
        assert_eq!(policy.filter_threshold, direct);
    }

    #[test]
    fn adversarial_trigger_goes_infeasible() {
        // trigger ranks every positive at the very bottom: past the budget
        // the grid point cannot be saved by the filter
        let mut data = Vec::new();
        for i in 0..100 {
            let positive = i < 20;
            data.push(scored(
                if positive { Label::Positive } else { Label::Negative },
                if positive { i as f64 / 1000.0 } else { 0.5 + i as f64 / 1000.0 },
                0.5,
                true,
            ));
        }
        let sweep = sweep_joint(&data, 0.10, &default_grid(), HardRules::default()).unwrap();
        // budget is 2 positives; grid point g blocks the g% lowest trigger
        // scores, all positives: infeasible once more than 2 are blocked
        let onset = sweep.points.iter().find(|p| !p.feasible).expect("infeasible onset");
        assert!(onset.grid_pct <= 5.0, "infeasible from {} on", onset.grid_pct);
        for point in &sweep.points {
            let expected_blocked =
                (point.grid_pct / 100.0 * data.len() as f64).floor() as usize;
            let expected_feasible = expected_blocked.min(20) <= 2;
            assert_eq!(point.feasible, expected_feasible, "grid {}", point.grid_pct);
        }
    }

    #[test]
    fn policy_json_round_trips_including_inf() {
        let policy = PolicyFile {
            policy: ThresholdPolicy {
                trigger_threshold: 0.25,
                filter_threshold: f64::INFINITY,
                hard_rules: HardRules { block_non_compilable: true },
            },
            provenance: Some(PolicyProvenance {
                trigger_model_hash: "abc".to_string(),
                filter_model_hash: "def".to_string(),
                target_fnr: 0.1,
                grid_pct: 20.0,
            }),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        write_policy(&path, &policy).unwrap();
        let loaded = read_policy(&path).unwrap();
        assert_eq!(loaded.policy, policy.policy);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"inf\""), "infinity marker serialized: {text}");
    }

    proptest! {
        #[test]
        fn budget_safety_holds_for_random_data(seed in 0u64..50, target in 0.0f64..0.5) {
            let data = synthetic_scored(300, seed);
            if data.iter().any(|g| g.label.is_positive()) {
                let sweep = sweep_joint(&data, target, &default_grid(), HardRules::default()).unwrap();
                for point in sweep.points.iter().filter(|p| p.feasible) {
                    prop_assert!(point.realized_fnr <= target + 1e-12);
                }
                // surviving-positive count non-increasing along the grid
                let mut last_survivors = usize::MAX;
                for point in &sweep.points {
                    let survivors = sweep.total_positives - point.trigger_fn;
                    prop_assert!(survivors <= last_survivors);
                    last_survivors = survivors;
                }
            }
        }
    }
}
