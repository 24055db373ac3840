//! Histogram boosting trainer. Single-threaded on purpose: fixed iteration
//! and summation order make retraining reproducible down to the bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::Label;
use crate::features::is_missing;
use crate::util::{logistic_loss, sigmoid};

use super::{Matrix, Node, TrainConfig, Tree};

const MISSING_BIN: u16 = u16::MAX;
const MIN_GAIN: f64 = 1e-12;

/// Trees plus base score, before the encoder is attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Booster {
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

/// Weighted training loss before any tree and after each boosting round.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub round_losses: Vec<f64>,
}

struct BinnedData {
    /// row-major bin ids, MISSING_BIN for missing
    bins: Vec<u16>,
    /// per feature: strictly increasing split thresholds (raw values)
    edges: Vec<Vec<f64>>,
    rows: usize,
    cols: usize,
}

impl BinnedData {
    fn bin(&self, row: usize, col: usize) -> u16 {
        self.bins[row * self.cols + col]
    }
}

fn build_bins(matrix: &Matrix, max_bins: usize) -> BinnedData {
    let rows = matrix.rows();
    let cols = matrix.cols();
    let mut edges = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut values: Vec<f64> = (0..rows)
            .map(|i| matrix.get(i, j))
            .filter(|x| !is_missing(*x))
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Thresholds are observed values routed as `x < cut`; the global
        // minimum can never split anything, so it is excluded.
        let mut cuts: Vec<f64> = Vec::new();
        if !values.is_empty() {
            let min = values[0];
            let mut distinct: Vec<f64> = values.clone();
            distinct.dedup();
            if distinct.len() <= max_bins {
                cuts.extend(distinct.into_iter().skip(1));
            } else {
                for k in 1..max_bins {
                    let q = k as f64 / max_bins as f64;
                    let idx =
                        ((q * values.len() as f64).ceil() as usize).clamp(1, values.len()) - 1;
                    let cut = values[idx];
                    if cut > min && cuts.last().map_or(true, |&last| cut > last) {
                        cuts.push(cut);
                    }
                }
            }
        }
        edges.push(cuts);
    }
    let mut bins = vec![0u16; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let x = matrix.get(i, j);
            bins[i * cols + j] = if is_missing(x) {
                MISSING_BIN
            } else {
                edges[j].partition_point(|&cut| cut <= x) as u16
            };
        }
    }
    BinnedData { bins, edges, rows, cols }
}

#[derive(Clone, Copy, Default)]
struct GradPair {
    g: f64,
    h: f64,
}

struct SplitChoice {
    feature: usize,
    bin: usize,
    missing_left: bool,
    gain: f64,
}

fn leaf_objective(g: f64, h: f64, l2: f64) -> f64 {
    g * g / (h + l2)
}

/// Best histogram split for one node, or None when nothing clears the
/// minimum gain / child weight constraints.
fn best_split(
    binned: &BinnedData,
    rows: &[u32],
    grad: &[f64],
    hess: &[f64],
    config: &TrainConfig,
) -> Option<SplitChoice> {
    let mut total = GradPair::default();
    for &r in rows {
        total.g += grad[r as usize];
        total.h += hess[r as usize];
    }
    let parent_obj = leaf_objective(total.g, total.h, config.l2_leaf);

    let mut best: Option<SplitChoice> = None;
    let mut hist: Vec<GradPair> = Vec::new();
    for feature in 0..binned.cols {
        let n_edges = binned.edges[feature].len();
        if n_edges == 0 {
            continue;
        }
        hist.clear();
        hist.resize(n_edges + 1, GradPair::default());
        let mut missing = GradPair::default();
        for &r in rows {
            let b = binned.bin(r as usize, feature);
            let gp = GradPair {
                g: grad[r as usize],
                h: hess[r as usize],
            };
            if b == MISSING_BIN {
                missing.g += gp.g;
                missing.h += gp.h;
            } else {
                let slot = &mut hist[b as usize];
                slot.g += gp.g;
                slot.h += gp.h;
            }
        }
        let mut left = GradPair::default();
        for bin in 0..n_edges {
            left.g += hist[bin].g;
            left.h += hist[bin].h;
            let right = GradPair {
                g: total.g - missing.g - left.g,
                h: total.h - missing.h - left.h,
            };
            for &missing_left in &[true, false] {
                let (lg, lh, rg, rh) = if missing_left {
                    (left.g + missing.g, left.h + missing.h, right.g, right.h)
                } else {
                    (left.g, left.h, right.g + missing.g, right.h + missing.h)
                };
                if lh < config.min_child_weight || rh < config.min_child_weight {
                    continue;
                }
                let gain = 0.5
                    * (leaf_objective(lg, lh, config.l2_leaf)
                        + leaf_objective(rg, rh, config.l2_leaf)
                        - parent_obj);
                if gain > MIN_GAIN && best.as_ref().map_or(true, |b| gain > b.gain) {
                    best = Some(SplitChoice {
                        feature,
                        bin,
                        missing_left,
                        gain,
                    });
                }
            }
        }
    }
    best
}

struct PendingNode {
    slot: usize,
    rows: Vec<u32>,
    depth: usize,
}

fn grow_tree(
    binned: &BinnedData,
    grad: &[f64],
    hess: &[f64],
    config: &TrainConfig,
    leaf_updates: &mut Vec<(Vec<u32>, f64)>,
) -> Tree {
    let mut nodes: Vec<Node> = vec![Node::Leaf { value: 0.0 }];
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(PendingNode {
        slot: 0,
        rows: (0..binned.rows as u32).collect(),
        depth: 0,
    });

    while let Some(node) = queue.pop_front() {
        let split = if node.depth < config.max_depth {
            best_split(binned, &node.rows, grad, hess, config)
        } else {
            None
        };
        match split {
            None => {
                let mut g = 0.0;
                let mut h = 0.0;
                for &r in &node.rows {
                    g += grad[r as usize];
                    h += hess[r as usize];
                }
                let value = -config.learning_rate * g / (h + config.l2_leaf);
                nodes[node.slot] = Node::Leaf { value };
                leaf_updates.push((node.rows, value));
            }
            Some(choice) => {
                let mut left_rows = Vec::new();
                let mut right_rows = Vec::new();
                for &r in &node.rows {
                    let b = binned.bin(r as usize, choice.feature);
                    let go_left = if b == MISSING_BIN {
                        choice.missing_left
                    } else {
                        (b as usize) <= choice.bin
                    };
                    if go_left {
                        left_rows.push(r);
                    } else {
                        right_rows.push(r);
                    }
                }
                let left_slot = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                let right_slot = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[node.slot] = Node::Split {
                    feature: choice.feature,
                    threshold: binned.edges[choice.feature][choice.bin],
                    missing_left: choice.missing_left,
                    left: left_slot,
                    right: right_slot,
                    gain: choice.gain,
                };
                queue.push_back(PendingNode {
                    slot: left_slot,
                    rows: left_rows,
                    depth: node.depth + 1,
                });
                queue.push_back(PendingNode {
                    slot: right_slot,
                    rows: right_rows,
                    depth: node.depth + 1,
                });
            }
        }
    }
    Tree { nodes }
}

/// Newton histogram boosting with logistic loss. Deterministic given
/// inputs; requires at least one example of each class.
pub fn train(
    matrix: &Matrix,
    labels: &[Label],
    weights: &[f64],
    config: &TrainConfig,
) -> Result<(Booster, TrainTrace)> {
    config.validate()?;
    if matrix.rows() != labels.len() || matrix.rows() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: matrix.rows(),
            found: labels.len().min(weights.len()),
        });
    }
    let y: Vec<f64> = labels
        .iter()
        .map(|l| if l.is_positive() { 1.0 } else { 0.0 })
        .collect();
    let w: Vec<f64> = labels
        .iter()
        .zip(weights)
        .map(|(l, &wi)| {
            if l.is_positive() {
                wi * config.positive_class_weight
            } else {
                wi
            }
        })
        .collect();

    let pos_w: f64 = y.iter().zip(&w).map(|(&yi, &wi)| yi * wi).sum();
    let total_w: f64 = w.iter().sum();
    let neg_w = total_w - pos_w;
    if pos_w <= 0.0 || neg_w <= 0.0 {
        return Err(Error::DegenerateLabels);
    }
    let base_score = (pos_w / neg_w).ln();

    let binned = build_bins(matrix, config.bins);
    let n = matrix.rows();
    let mut scores = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let loss = |scores: &[f64]| -> f64 {
        scores
            .iter()
            .zip(&y)
            .zip(&w)
            .map(|((&s, &yi), &wi)| wi * logistic_loss(s, yi))
            .sum()
    };

    let mut trees = Vec::with_capacity(config.trees);
    let mut round_losses = Vec::with_capacity(config.trees + 1);
    round_losses.push(loss(&scores));

    for _ in 0..config.trees {
        for i in 0..n {
            let p = sigmoid(scores[i]);
            grad[i] = w[i] * (p - y[i]);
            hess[i] = w[i] * p * (1.0 - p);
        }
        let mut leaf_updates = Vec::new();
        let tree = grow_tree(&binned, &grad, &hess, config, &mut leaf_updates);
        for (rows, value) in leaf_updates {
            for r in rows {
                scores[r as usize] += value;
            }
        }
        trees.push(tree);
        round_losses.push(loss(&scores));
    }

    Ok((Booster { base_score, trees }, TrainTrace { round_losses }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_routes_like_thresholds() {
        // equivalence of "bin <= b" and "x < edges[b]" on ties
        let matrix = Matrix::from_rows(vec![
            vec![1.0],
            vec![2.0],
            vec![2.0],
            vec![3.0],
            vec![f64::NAN],
        ])
        .unwrap();
        let binned = build_bins(&matrix, 4);
        let edges = &binned.edges[0];
        for i in 0..matrix.rows() {
            let x = matrix.get(i, 0);
            let b = binned.bin(i, 0);
            if x.is_nan() {
                assert_eq!(b, MISSING_BIN);
                continue;
            }
            for (e_idx, &t) in edges.iter().enumerate() {
                assert_eq!((b as usize) <= e_idx, x < t, "x={x} t={t}");
            }
        }
    }

    #[test]
    fn edges_are_strictly_increasing() {
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|i| vec![(i % 7) as f64, i as f64])
            .collect();
        let matrix = Matrix::from_rows(rows).unwrap();
        let binned = build_bins(&matrix, 256);
        for edges in &binned.edges {
            for w in edges.windows(2) {
                assert!(w[0] < w[1]);
            }
            assert!(edges.len() <= 255);
        }
    }

    #[test]
    fn all_missing_column_never_splits() {
        let matrix = Matrix::from_rows(vec![vec![f64::NAN, 0.0], vec![f64::NAN, 1.0]]).unwrap();
        let binned = build_bins(&matrix, 16);
        assert!(binned.edges[0].is_empty());
    }
}
