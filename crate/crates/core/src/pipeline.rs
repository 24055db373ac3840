//! End-to-end training pipelines: dataset in, model artifact out.
//!
//! The trigger task trains on every generation (never-shown completions
//! are negatives); the filter task trains on shown completions only.
//! Training vectors use out-of-fold categorical encodings; the stored
//! deployment encoding uses all-data statistics.

use crate::error::{Error, Result};
use crate::events::{label_of, Dataset, Label, Split};
use crate::features::{
    fit_encoder, impute_missing, transform_out_of_fold, FeatureSchema, Stage,
};
use crate::gbdt::{train, Ensemble, Matrix, TrainConfig, TrainTrace};
use crate::hybrid::{tokenize_context, train_hybrid, EpochReport, HybridConfig, HybridModel};
use crate::score::full_bag;

pub const DEFAULT_FOLDS: usize = 5;

/// Rows for one training task: feature bags + labels (+ context).
struct TaskRows {
    bags: Vec<crate::events::FeatureBag>,
    labels: Vec<Label>,
    contexts: Vec<Option<String>>,
}

fn task_rows(dataset: &Dataset, stage: Stage) -> Result<TaskRows> {
    let joined = dataset.joined()?;
    let mut bags = Vec::new();
    let mut labels = Vec::new();
    let mut contexts = Vec::new();
    for (event, record) in joined {
        if stage == Stage::Filter && !record.outcome.was_shown() {
            continue;
        }
        bags.push(match stage {
            Stage::Trigger => event.trigger_features.clone(),
            Stage::Filter => full_bag(event, record),
        });
        labels.push(label_of(record));
        contexts.push(event.context.clone());
    }
    if bags.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no training rows for the {stage:?} task"
        )));
    }
    Ok(TaskRows { bags, labels, contexts })
}

fn class_balance(labels: &[Label]) -> (usize, usize) {
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    (pos, labels.len() - pos)
}

/// Trains a boosted model for one stage. When `auto_class_weight` is set,
/// `positive_class_weight` is overridden with the observed negatives per
/// positive.
pub fn fit_gbdt(
    dataset: &Dataset,
    schema: &FeatureSchema,
    stage: Stage,
    mut config: TrainConfig,
    folds: usize,
    split: Split,
    auto_class_weight: bool,
) -> Result<(Ensemble, TrainTrace)> {
    let rows = task_rows(dataset, stage)?;
    let refs: Vec<&crate::events::FeatureBag> = rows.bags.iter().collect();
    let encoder = fit_encoder(&refs, &rows.labels, schema, folds, config.seed, split)?;

    let vectors: Vec<Vec<f64>> = rows
        .bags
        .iter()
        .enumerate()
        .map(|(i, bag)| transform_out_of_fold(bag, i, &encoder, stage))
        .collect();
    let matrix = Matrix::from_rows(vectors)?;
    if auto_class_weight {
        let (pos, neg) = class_balance(&rows.labels);
        if pos > 0 {
            config.positive_class_weight = (neg as f64 / pos as f64).max(1.0);
        }
    }
    let weights = vec![1.0; matrix.rows()];
    let (booster, trace) = train(&matrix, &rows.labels, &weights, &config)?;
    Ok((Ensemble::assemble(booster, encoder, stage), trace))
}

/// Trains the hybrid model for one stage. Every participating record must
/// carry context text.
pub fn fit_hybrid(
    dataset: &Dataset,
    schema: &FeatureSchema,
    stage: Stage,
    config: &HybridConfig,
    folds: usize,
    split: Split,
) -> Result<(HybridModel, Vec<EpochReport>)> {
    let rows = task_rows(dataset, stage)?;
    let refs: Vec<&crate::events::FeatureBag> = rows.bags.iter().collect();
    let encoder = fit_encoder(&refs, &rows.labels, schema, folds, config.seed, split)?;

    let mut tokens = Vec::with_capacity(rows.bags.len());
    for (i, context) in rows.contexts.iter().enumerate() {
        match context {
            Some(text) => tokens.push(tokenize_context(text, config.vocab_buckets)),
            None => {
                // find the offending event id for the error message
                let joined = dataset.joined()?;
                let missing = joined
                    .iter()
                    .filter(|(_, r)| stage == Stage::Trigger || r.outcome.was_shown())
                    .nth(i)
                    .map(|(e, _)| e.event_id.clone())
                    .unwrap_or_else(|| format!("row {i}"));
                return Err(Error::MissingContext(missing));
            }
        }
    }
    let vectors: Vec<Vec<f64>> = rows
        .bags
        .iter()
        .enumerate()
        .map(|(i, bag)| impute_missing(&transform_out_of_fold(bag, i, &encoder, stage)))
        .collect();
    let matrix = Matrix::from_rows(vectors)?;
    train_hybrid(&tokens, &matrix, &rows.labels, encoder, stage, config)
}
