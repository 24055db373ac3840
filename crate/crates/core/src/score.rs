//! Bridges datasets and models: turns logged events into scored
//! generations that calibration and replay consume.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{CompletionEvent, Dataset, FeatureBag, GenerationRecord, Label, Outcome, label_of};
use crate::features::Stage;
use crate::gbdt::Ensemble;
use crate::hybrid::HybridModel;

/// The full filter-view bag: trigger features plus generation-time
/// features, with the record's dedicated fields injected under their
/// schema names.
pub fn full_bag(event: &CompletionEvent, record: &GenerationRecord) -> FeatureBag {
    let mut bag = event.trigger_features.merged(&record.filter_features);
    bag.set_scalar("completion_length", record.completion_length as f64);
    bag.set_flag("compilable", record.compilable);
    bag
}

/// Anything that can score trigger opportunities and generated completions.
pub trait Scorer {
    fn score_trigger(&self, event: &CompletionEvent) -> Result<f64>;
    fn score_filter(&self, event: &CompletionEvent, record: &GenerationRecord) -> Result<f64>;
}

impl Scorer for Ensemble {
    fn score_trigger(&self, event: &CompletionEvent) -> Result<f64> {
        if self.stage != Stage::Trigger {
            return Err(Error::InvalidConfig(
                "filter-stage model asked for a trigger score".to_string(),
            ));
        }
        self.score_bag(&event.trigger_features)
    }

    fn score_filter(&self, event: &CompletionEvent, record: &GenerationRecord) -> Result<f64> {
        if self.stage != Stage::Filter {
            return Err(Error::InvalidConfig(
                "trigger-stage model asked for a filter score".to_string(),
            ));
        }
        self.score_bag(&full_bag(event, record))
    }
}

impl Scorer for HybridModel {
    fn score_trigger(&self, event: &CompletionEvent) -> Result<f64> {
        if self.stage != Stage::Trigger {
            return Err(Error::InvalidConfig(
                "filter-stage model asked for a trigger score".to_string(),
            ));
        }
        self.score_bag(&event.trigger_features, event.context.as_deref())
    }

    fn score_filter(&self, event: &CompletionEvent, record: &GenerationRecord) -> Result<f64> {
        if self.stage != Stage::Filter {
            return Err(Error::InvalidConfig(
                "trigger-stage model asked for a filter score".to_string(),
            ));
        }
        self.score_bag(&full_bag(event, record), event.context.as_deref())
    }
}

/// Oracle scorer backed by ground-truth probabilities, keyed by event id.
/// Used by closed-loop simulation and tests that need a model-free gate.
pub struct GroundTruthScorer {
    by_event: HashMap<String, (f64, f64)>,
}

impl GroundTruthScorer {
    /// `entries`: (event_id, p_positive, p_accept_given_shown)
    pub fn new(entries: impl IntoIterator<Item = (String, f64, f64)>) -> Self {
        Self {
            by_event: entries
                .into_iter()
                .map(|(id, p_pos, p_acc)| (id, (p_pos, p_acc)))
                .collect(),
        }
    }
}

impl Scorer for GroundTruthScorer {
    fn score_trigger(&self, event: &CompletionEvent) -> Result<f64> {
        self.by_event
            .get(&event.event_id)
            .map(|&(p_pos, _)| p_pos)
            .ok_or_else(|| Error::DanglingReference(event.event_id.clone()))
    }

    fn score_filter(&self, event: &CompletionEvent, _record: &GenerationRecord) -> Result<f64> {
        self.by_event
            .get(&event.event_id)
            .map(|&(_, p_acc)| p_acc)
            .ok_or_else(|| Error::DanglingReference(event.event_id.clone()))
    }
}

/// One generation with everything gating decisions need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGeneration {
    pub event_id: String,
    pub user_id: String,
    pub label: Label,
    pub outcome: Outcome,
    pub completion_length: u32,
    pub compilable: bool,
    pub trigger_score: f64,
    pub filter_score: f64,
}

pub type ScoredDataset = Vec<ScoredGeneration>;

/// Scores every generation with both models. Events without generations
/// (possible in closed-loop logs) are skipped; dangling generations error.
pub fn score_dataset(
    dataset: &Dataset,
    trigger: &dyn Scorer,
    filter: &dyn Scorer,
) -> Result<ScoredDataset> {
    let joined = dataset.joined()?;
    let mut out = Vec::with_capacity(joined.len());
    for (event, record) in joined {
        out.push(ScoredGeneration {
            event_id: event.event_id.clone(),
            user_id: event.user_id.clone(),
            label: label_of(record),
            outcome: record.outcome,
            completion_length: record.completion_length,
            compilable: record.compilable,
            trigger_score: trigger.score_trigger(event)?,
            filter_score: filter.score_filter(event, record)?,
        });
    }
    Ok(out)
}
