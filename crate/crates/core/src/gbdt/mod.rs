//! Histogram gradient-boosted decision trees for binary classification
//! with logistic loss. This is the engine behind both the trigger and the
//! filter model; it favors cheap, deterministic inference over training
//! bells and whistles.
//!
//! Training is second-order (Newton) boosting: each tree greedily
//! maximizes the usual gain
//! `0.5 * (GL^2/(HL+l2) + GR^2/(HR+l2) - G^2/(H+l2))`
//! over histogram bins, missing values are routed through a learned
//! default branch, and leaf values are `-lr * G/(H+l2)`. All accumulation
//! happens in a fixed order so artifacts reproduce bit-for-bit.

mod train;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::FeatureBag;
use crate::features::{self, EncoderState, Stage};
use crate::util::sigmoid;

pub use train::{train, Booster, TrainTrace};

pub const GBDT_FORMAT: &str = "cgate-gbdt/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub bins: usize,
    pub min_child_weight: f64,
    pub l2_leaf: f64,
    /// Extra multiplicative weight on positive rows; set it near the label
    /// imbalance to rebalance the loss.
    pub positive_class_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trees: 200,
            max_depth: 6,
            learning_rate: 0.1,
            bins: 256,
            min_child_weight: 1.0,
            l2_leaf: 1.0,
            positive_class_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0
            || self.max_depth == 0
            || self.learning_rate <= 0.0
            || self.bins < 2
            || self.min_child_weight <= 0.0
            || self.l2_leaf <= 0.0
            || self.positive_class_weight <= 0.0
        {
            return Err(Error::InvalidConfig(
                "gbdt config fields must be positive (bins >= 2)".to_string(),
            ));
        }
        if self.bins > 256 {
            return Err(Error::InvalidConfig(format!(
                "bins must be <= 256, got {}",
                self.bins
            )));
        }
        Ok(())
    }
}

/// Row-major dense matrix of already-encoded feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * cols);
        for row in &rows {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { data, rows: n, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        /// Raw feature value; rows with `x < threshold` go left.
        threshold: f64,
        missing_left: bool,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf { value: f64 },
}

/// Array-encoded tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Margin contribution for one raw feature vector.
    pub fn evaluate(&self, v: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                    ..
                } => {
                    let x = v[*feature];
                    let go_left = if features::is_missing(x) {
                        *missing_left
                    } else {
                        x < *threshold
                    };
                    idx = if go_left { *left } else { *right };
                }
            }
        }
    }
}

/// A trained boosting model plus the preprocessing it was fitted with.
/// `prediction = sigmoid(base_score + sum of leaf values)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub format_version: String,
    pub stage: Stage,
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub encoder: EncoderState,
    pub schema_hash: String,
}

impl Ensemble {
    pub fn assemble(booster: Booster, encoder: EncoderState, stage: Stage) -> Self {
        let schema_hash = encoder.schema_hash.clone();
        Self {
            format_version: GBDT_FORMAT.to_string(),
            stage,
            base_score: booster.base_score,
            trees: booster.trees,
            encoder,
            schema_hash,
        }
    }

    pub fn input_len(&self) -> usize {
        self.encoder.view_len(self.stage)
    }

    /// Raw margin (log-odds) for an encoded vector, fixed-order summation.
    pub fn predict_margin(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.input_len() {
            return Err(Error::LengthMismatch {
                expected: self.input_len(),
                found: v.len(),
            });
        }
        let mut margin = self.base_score;
        for tree in &self.trees {
            margin += tree.evaluate(v);
        }
        Ok(margin)
    }

    pub fn predict_proba(&self, v: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.predict_margin(v)?))
    }

    /// Encode a feature bag with the embedded encoder, then predict.
    pub fn score_bag(&self, bag: &FeatureBag) -> Result<f64> {
        let v = features::transform(bag, &self.encoder, self.stage)?;
        self.predict_proba(&v)
    }

    /// Total-gain attribution per feature name; constant (never split)
    /// features get 0.
    pub fn feature_importance(&self) -> BTreeMap<String, f64> {
        let names: Vec<String> = self
            .encoder
            .schema
            .view_entries(self.stage)
            .iter()
            .map(|e| e.name.clone())
            .collect();
        let mut importance: BTreeMap<String, f64> =
            names.iter().map(|n| (n.clone(), 0.0)).collect();
        for tree in &self.trees {
            for node in &tree.nodes {
                if let Node::Split { feature, gain, .. } = node {
                    if let Some(name) = names.get(*feature) {
                        *importance.get_mut(name).unwrap() += gain;
                    }
                }
            }
        }
        importance
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, self)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let model: Ensemble = serde_json::from_reader(BufReader::new(file))?;
        if model.format_version != GBDT_FORMAT {
            return Err(Error::VersionMismatch {
                found: model.format_version,
            });
        }
        if model.schema_hash != model.encoder.schema_hash {
            return Err(Error::SchemaHashMismatch {
                expected: model.schema_hash,
                found: model.encoder.schema_hash,
            });
        }
        Ok(model)
    }
}
