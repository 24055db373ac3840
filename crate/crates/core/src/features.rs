//! Schema-driven feature encoding.
//!
//! Categorical features get smoothed target encoding fitted with k-fold
//! statistics so training-time vectors never see a record's own label
//! through its category. Scalars are quantile-mapped to [0,1]. Missing
//! values stay missing (NaN marker) for the tree path; the MLP path
//! imputes the quantile midpoint.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{FeatureBag, Label, Split};
use crate::util::{sha256_hex, splitmix64};

pub const SCHEMA_VERSION: &str = "cgate-schema/1";

/// Smoothing mass for target encoding; pseudo-counts of the global prior.
pub const SMOOTHING_M: f64 = 10.0;

/// Cut points per scalar quantile grid.
pub const QUANTILE_POINTS: usize = 64;

/// Marker for a missing value in a dense vector. Trees route it through
/// the learned default branch; the MLP path imputes [`impute_missing`].
pub fn missing_marker() -> f64 {
    f64::NAN
}

pub fn is_missing(x: f64) -> bool {
    x.is_nan()
}

/// Replaces missing markers with the quantile midpoint for models that
/// cannot branch on missingness.
pub fn impute_missing(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if is_missing(x) { 0.5 } else { x }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Trigger,
    Filter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Scalar { unit: String },
    Categorical { domain: Vec<String> },
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub name: String,
    pub stage: Stage,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

/// Ordered feature declaration. Trigger-stage entries come first so the
/// trigger view is a prefix of the full vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: String,
    pub entries: Vec<SchemaEntry>,
}

impl FeatureSchema {
    pub fn entry(&self, name: &str) -> Option<&SchemaEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entries visible in a view: trigger view sees trigger-stage entries
    /// only, filter view sees everything.
    pub fn view_entries(&self, view: Stage) -> Vec<&SchemaEntry> {
        self.entries
            .iter()
            .filter(|e| view == Stage::Filter || e.stage == Stage::Trigger)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate schema entry {}",
                    e.name
                )));
            }
        }
        let first_filter = self.entries.iter().position(|e| e.stage == Stage::Filter);
        if let Some(i) = first_filter {
            if self.entries[i..].iter().any(|e| e.stage == Stage::Trigger) {
                return Err(Error::InvalidConfig(
                    "trigger-stage entries must precede all filter-stage entries".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Lowercase hex SHA-256 of the canonical (sorted-key, no-whitespace)
    /// JSON form.
    pub fn canonical_hash(&self) -> String {
        // serde_json's Map is sorted; re-parsing through Value canonicalizes
        // key order regardless of struct field order.
        let value: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(self).expect("schema serializes"))
                .expect("schema reparses");
        sha256_hex(serde_json::to_string(&value).expect("canonical form").as_bytes())
    }
}

pub fn read_schema(path: &Path) -> Result<FeatureSchema> {
    let file = File::open(path)?;
    let schema: FeatureSchema = serde_json::from_reader(BufReader::new(file))?;
    schema.validate()?;
    Ok(schema)
}

pub fn write_schema(path: &Path, schema: &FeatureSchema) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, schema)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

/// The desk-scale schema: ~20 named trigger-time features plus the
/// filter-time features about the generated completion.
pub fn default_schema() -> FeatureSchema {
    fn scalar(name: &str, stage: Stage, unit: &str) -> SchemaEntry {
        SchemaEntry {
            name: name.to_string(),
            stage,
            kind: FeatureKind::Scalar { unit: unit.to_string() },
        }
    }
    fn categorical(name: &str, stage: Stage, domain: &[&str]) -> SchemaEntry {
        SchemaEntry {
            name: name.to_string(),
            stage,
            kind: FeatureKind::Categorical {
                domain: domain.iter().map(|s| s.to_string()).collect(),
            },
        }
    }
    fn flag(name: &str, stage: Stage) -> SchemaEntry {
        SchemaEntry {
            name: name.to_string(),
            stage,
            kind: FeatureKind::Flag,
        }
    }

    use Stage::{Filter, Trigger};
    FeatureSchema {
        version: SCHEMA_VERSION.to_string(),
        entries: vec![
            scalar("typing_speed", Trigger, "chars_per_sec"),
            scalar("ms_since_last_keystroke", Trigger, "ms"),
            scalar("prefix_length", Trigger, "chars"),
            scalar("caret_line", Trigger, "lines"),
            scalar("caret_col", Trigger, "chars"),
            scalar("line_length", Trigger, "chars"),
            scalar("indent_level", Trigger, "levels"),
            scalar("same_line_edit_count", Trigger, "count"),
            scalar("session_accept_count", Trigger, "count"),
            scalar("session_cancel_count", Trigger, "count"),
            scalar("events_in_session", Trigger, "count"),
            scalar("time_in_session_ms", Trigger, "ms"),
            categorical(
                "node_kind",
                Trigger,
                &[
                    "identifier",
                    "call_expr",
                    "member_access",
                    "string_lit",
                    "comment",
                    "block",
                    "param_list",
                    "import",
                    "binary_expr",
                    "literal",
                ],
            ),
            categorical(
                "last_action",
                Trigger,
                &["typing", "backspace", "newline", "paste", "navigate", "delete"],
            ),
            categorical("file_extension", Trigger, &["kt", "py", "php", "cs", "java", "rs"]),
            categorical(
                "hour_bucket",
                Trigger,
                &["night", "morning", "afternoon", "evening"],
            ),
            flag("in_comment", Trigger),
            flag("in_string", Trigger),
            scalar("generation_latency_ms", Filter, "ms"),
            scalar("mean_token_logprob", Filter, "logprob"),
            scalar("context_token_count", Filter, "tokens"),
            scalar("completion_length", Filter, "symbols"),
            scalar("completion_line_count", Filter, "lines"),
            flag("compilable", Filter),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalStats {
    /// Global prior: overall positive rate on the fitting data.
    pub prior: f64,
    /// category -> (positives, count), all folds pooled.
    pub totals: BTreeMap<String, (f64, f64)>,
    /// Per-fold category -> (positives, count); subtracted out for
    /// out-of-fold encoding during training.
    pub fold_counts: Vec<BTreeMap<String, (f64, f64)>>,
}

impl CategoricalStats {
    fn encode_from(&self, pos: f64, count: f64) -> f64 {
        (pos + self.prior * SMOOTHING_M) / (count + SMOOTHING_M)
    }

    /// Deployment encoding: all-data statistics.
    pub fn encode(&self, category: &str) -> f64 {
        match self.totals.get(category) {
            Some(&(pos, count)) => self.encode_from(pos, count),
            None => self.prior,
        }
    }

    /// Training-time encoding for a record assigned to `fold`.
    pub fn encode_out_of_fold(&self, category: &str, fold: usize) -> f64 {
        let (total_pos, total_count) = match self.totals.get(category) {
            Some(&t) => t,
            None => return self.prior,
        };
        let (fold_pos, fold_count) = self
            .fold_counts
            .get(fold)
            .and_then(|m| m.get(category))
            .copied()
            .unwrap_or((0.0, 0.0));
        self.encode_from(total_pos - fold_pos, total_count - fold_count)
    }
}

/// Fitted preprocessing state, embedded into model artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub schema: FeatureSchema,
    pub schema_hash: String,
    pub folds: usize,
    pub fold_seed: u64,
    pub categorical: BTreeMap<String, CategoricalStats>,
    /// Strictly increasing cut points per scalar.
    pub quantiles: BTreeMap<String, Vec<f64>>,
}

impl EncoderState {
    pub fn fold_of(&self, record_index: usize) -> usize {
        fold_assignment(self.fold_seed, record_index, self.folds)
    }

    pub fn view_len(&self, view: Stage) -> usize {
        self.schema.view_entries(view).len()
    }
}

fn fold_assignment(seed: u64, index: usize, folds: usize) -> usize {
    (splitmix64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)) % folds as u64) as usize
}

fn quantile_grid(values: &mut Vec<f64>) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let mut grid = Vec::with_capacity(QUANTILE_POINTS);
    for i in 1..=QUANTILE_POINTS {
        let q = i as f64 / (QUANTILE_POINTS + 1) as f64;
        let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
        let cut = values[idx];
        if grid.last().map_or(true, |&last| cut > last) {
            grid.push(cut);
        }
    }
    grid
}

/// Fits target-encoding and quantile state on training data.
///
/// Categorical encoding of category c for a record in fold j uses
/// statistics from all folds except j; the stored deployment encoding uses
/// all-data statistics. Refuses test-tagged input outright.
pub fn fit_encoder(
    records: &[&FeatureBag],
    labels: &[Label],
    schema: &FeatureSchema,
    folds: usize,
    seed: u64,
    split: Split,
) -> Result<EncoderState> {
    if split == Split::Test {
        return Err(Error::Leakage(
            "refusing to fit the encoder on test-tagged data".to_string(),
        ));
    }
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("folds must be >= 2, got {folds}")));
    }
    if records.len() < folds {
        return Err(Error::InvalidConfig(format!(
            "need at least one record per fold: {} records, {folds} folds",
            records.len()
        )));
    }
    if records.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: records.len(),
            found: labels.len(),
        });
    }
    schema.validate()?;

    let positives = labels.iter().filter(|l| l.is_positive()).count();
    let prior = positives as f64 / labels.len() as f64;

    let mut categorical = BTreeMap::new();
    let mut quantiles = BTreeMap::new();
    for entry in &schema.entries {
        match &entry.kind {
            FeatureKind::Categorical { .. } => {
                let mut totals: BTreeMap<String, (f64, f64)> = BTreeMap::new();
                let mut fold_counts = vec![BTreeMap::new(); folds];
                for (i, (bag, label)) in records.iter().zip(labels).enumerate() {
                    let Some(cat) = bag.categoricals.get(&entry.name) else {
                        continue;
                    };
                    let y = if label.is_positive() { 1.0 } else { 0.0 };
                    let t = totals.entry(cat.clone()).or_insert((0.0, 0.0));
                    t.0 += y;
                    t.1 += 1.0;
                    let fold = fold_assignment(seed, i, folds);
                    let f: &mut (f64, f64) =
                        fold_counts[fold].entry(cat.clone()).or_insert((0.0, 0.0));
                    f.0 += y;
                    f.1 += 1.0;
                }
                categorical.insert(
                    entry.name.clone(),
                    CategoricalStats {
                        prior,
                        totals,
                        fold_counts,
                    },
                );
            }
            FeatureKind::Scalar { .. } => {
                let mut values: Vec<f64> = records
                    .iter()
                    .filter_map(|bag| bag.scalars.get(&entry.name).copied())
                    .collect();
                quantiles.insert(entry.name.clone(), quantile_grid(&mut values));
            }
            FeatureKind::Flag => {}
        }
    }

    Ok(EncoderState {
        schema: schema.clone(),
        schema_hash: schema.canonical_hash(),
        folds,
        fold_seed: seed,
        categorical,
        quantiles,
    })
}

fn encode_scalar(grid: &[f64], x: f64) -> f64 {
    if grid.is_empty() {
        return 0.5;
    }
    let below = grid.partition_point(|&cut| cut <= x);
    below as f64 / grid.len() as f64
}

enum CatMode {
    Deploy,
    OutOfFold(usize),
}

fn transform_inner(
    bag: &FeatureBag,
    state: &EncoderState,
    view: Stage,
    mode: CatMode,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(state.view_len(view));
    for entry in state.schema.view_entries(view) {
        let value = match &entry.kind {
            FeatureKind::Scalar { .. } => bag
                .scalars
                .get(&entry.name)
                .map(|&x| encode_scalar(&state.quantiles[&entry.name], x)),
            FeatureKind::Categorical { .. } => bag.categoricals.get(&entry.name).map(|cat| {
                let stats = &state.categorical[&entry.name];
                match mode {
                    CatMode::Deploy => stats.encode(cat),
                    CatMode::OutOfFold(fold) => stats.encode_out_of_fold(cat, fold),
                }
            }),
            FeatureKind::Flag => bag.flags.get(&entry.name).map(|&b| if b { 1.0 } else { 0.0 }),
        };
        out.push(value.unwrap_or_else(missing_marker));
    }
    out
}

/// Dense numeric vector for one record under the deployment encoding.
/// Scalars land in [0,1], flags in {0,1}, categoricals in [0,1]; missing
/// values surface as the missing marker.
pub fn transform(bag: &FeatureBag, state: &EncoderState, view: Stage) -> Result<Vec<f64>> {
    Ok(transform_inner(bag, state, view, CatMode::Deploy))
}

/// Training-time vector: categorical statistics exclude the record's own
/// fold so its label does not leak into its own encoding.
pub fn transform_out_of_fold(
    bag: &FeatureBag,
    record_index: usize,
    state: &EncoderState,
    view: Stage,
) -> Vec<f64> {
    let fold = state.fold_of(record_index);
    transform_inner(bag, state, view, CatMode::OutOfFold(fold))
}

/// Guard for artifact use: the dataset schema must hash to what the
/// encoder was fitted on.
pub fn check_schema_hash(state: &EncoderState, schema_hash: &str) -> Result<()> {
    if state.schema_hash != schema_hash {
        return Err(Error::SchemaHashMismatch {
            expected: state.schema_hash.clone(),
            found: schema_hash.to_string(),
        });
    }
    Ok(())
}
