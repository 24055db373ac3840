//! Hybrid context + tabular classifier.
//!
//! The code context is hashed into token buckets, embedded, and
//! mean-pooled; tabular features go through a small MLP; the two halves
//! are concatenated and fed to a classification head. Weights live in one
//! flat parameter vector so gradients can be checked index-by-index
//! against finite differences.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{FeatureBag, Label};
use crate::features::{self, EncoderState, Stage};
use crate::gbdt::Matrix;
use crate::util::{auc, derived_rng, fnv1a64, logistic_loss, sigmoid};

pub const HYBRID_FORMAT: &str = "cgate-hybrid/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub vocab_buckets: usize,
    pub embed_dim: usize,
    pub tabular_hidden: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            vocab_buckets: 1 << 15,
            embed_dim: 32,
            tabular_hidden: 32,
            head_hidden: 32,
            epochs: 6,
            batch_size: 256,
            step_size: 1e-2,
            seed: 0,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_buckets == 0 || !self.vocab_buckets.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "vocab_buckets must be a power of two, got {}",
                self.vocab_buckets
            )));
        }
        if self.embed_dim == 0
            || self.tabular_hidden == 0
            || self.head_hidden == 0
            || self.batch_size == 0
            || self.step_size <= 0.0
        {
            return Err(Error::InvalidConfig(
                "hybrid dims, batch_size and step_size must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Splits lowercased text on non-alphanumeric boundaries and hashes each
/// token into a bucket. Empty text gives an empty list.
pub fn tokenize_context(text: &str, vocab_buckets: usize) -> Vec<usize> {
    debug_assert!(vocab_buckets.is_power_of_two());
    let mask = (vocab_buckets - 1) as u64;
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (fnv1a64(t.as_bytes()) & mask) as usize)
        .collect()
}

/// Flat-parameter layout of the network. The head input dimension is
/// exactly `embed_dim + tabular_hidden` — the concatenation seam.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    vocab: usize,
    embed_dim: usize,
    tab_in: usize,
    tab_hidden: usize,
    head_hidden: usize,
}

impl Layout {
    fn embed(&self) -> Range<usize> {
        0..self.vocab * self.embed_dim
    }
    fn w1(&self) -> Range<usize> {
        let s = self.embed().end;
        s..s + self.tab_in * self.tab_hidden
    }
    fn b1(&self) -> Range<usize> {
        let s = self.w1().end;
        s..s + self.tab_hidden
    }
    fn w2(&self) -> Range<usize> {
        let s = self.b1().end;
        s..s + self.tab_hidden * self.tab_hidden
    }
    fn b2(&self) -> Range<usize> {
        let s = self.w2().end;
        s..s + self.tab_hidden
    }
    fn head_in(&self) -> usize {
        self.embed_dim + self.tab_hidden
    }
    fn hw1(&self) -> Range<usize> {
        let s = self.b2().end;
        s..s + self.head_in() * self.head_hidden
    }
    fn hb1(&self) -> Range<usize> {
        let s = self.hw1().end;
        s..s + self.head_hidden
    }
    fn hw2(&self) -> Range<usize> {
        let s = self.hb1().end;
        s..s + self.head_hidden
    }
    fn hb2(&self) -> usize {
        self.hw2().end
    }
    fn len(&self) -> usize {
        self.hb2() + 1
    }
}

/// Named parameter groups, for gradient diagnostics.
pub const PARAM_GROUPS: &[&str] = &["embed", "w1", "b1", "w2", "b2", "hw1", "hb1", "hw2", "hb2"];

#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub vocab_buckets: usize,
    pub embed_dim: usize,
    pub tabular_hidden: usize,
    pub head_hidden: usize,
    pub stage: Stage,
    pub encoder: EncoderState,
    params: Vec<f64>,
    layout: Layout,
}

struct Forward {
    ctx: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
    u: Vec<f64>,
    logit: f64,
}

impl HybridModel {
    /// Deterministic initialization: small uniform weights, zero biases,
    /// zero final layer (so an untrained model outputs exactly
    /// `sigmoid(head bias) = 0.5`).
    pub fn init(config: &HybridConfig, encoder: EncoderState, stage: Stage) -> Result<Self> {
        config.validate()?;
        let tab_in = encoder.view_len(stage);
        let layout = Layout {
            vocab: config.vocab_buckets,
            embed_dim: config.embed_dim,
            tab_in,
            tab_hidden: config.tabular_hidden,
            head_hidden: config.head_hidden,
        };
        let mut params = vec![0.0; layout.len()];
        let mut rng = derived_rng(config.seed, "hybrid-init");
        let mut uniform = |range: Range<usize>, scale: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            for i in range {
                params[i] = rng.gen_range(-scale..scale);
            }
        };
        uniform(layout.embed(), 0.05, &mut rng);
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(layout.w1(), xavier(tab_in, config.tabular_hidden), &mut rng);
        uniform(
            layout.w2(),
            xavier(config.tabular_hidden, config.tabular_hidden),
            &mut rng,
        );
        uniform(
            layout.hw1(),
            xavier(layout.head_in(), config.head_hidden),
            &mut rng,
        );
        // biases and the final layer stay zero
        Ok(Self {
            vocab_buckets: config.vocab_buckets,
            embed_dim: config.embed_dim,
            tabular_hidden: config.tabular_hidden,
            head_hidden: config.head_hidden,
            stage,
            encoder,
            params,
            layout,
        })
    }

    pub fn tabular_input_len(&self) -> usize {
        self.layout.tab_in
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, i: usize) -> f64 {
        self.params[i]
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        self.params[i] = v;
    }

    /// Flat index ranges per named group (`PARAM_GROUPS` order).
    pub fn group_ranges(&self) -> Vec<(&'static str, Range<usize>)> {
        let l = &self.layout;
        vec![
            ("embed", l.embed()),
            ("w1", l.w1()),
            ("b1", l.b1()),
            ("w2", l.w2()),
            ("b2", l.b2()),
            ("hw1", l.hw1()),
            ("hb1", l.hb1()),
            ("hw2", l.hw2()),
            ("hb2", l.hb2()..l.hb2() + 1),
        ]
    }

    fn forward(&self, tokens: &[usize], tabular: &[f64]) -> Forward {
        let l = &self.layout;
        let p = &self.params;
        // mean-pooled context embedding; empty context = zero vector
        let mut ctx = vec![0.0; l.embed_dim];
        if !tokens.is_empty() {
            for &t in tokens {
                let base = l.embed().start + t * l.embed_dim;
                for d in 0..l.embed_dim {
                    ctx[d] += p[base + d];
                }
            }
            let inv = 1.0 / tokens.len() as f64;
            for v in ctx.iter_mut() {
                *v *= inv;
            }
        }
        // tabular MLP: two tanh layers
        let mut t1 = vec![0.0; l.tab_hidden];
        for j in 0..l.tab_hidden {
            let mut acc = p[l.b1().start + j];
            for (i, &x) in tabular.iter().enumerate() {
                acc += x * p[l.w1().start + i * l.tab_hidden + j];
            }
            t1[j] = acc.tanh();
        }
        let mut t2 = vec![0.0; l.tab_hidden];
        for j in 0..l.tab_hidden {
            let mut acc = p[l.b2().start + j];
            for (i, &x) in t1.iter().enumerate() {
                acc += x * p[l.w2().start + i * l.tab_hidden + j];
            }
            t2[j] = acc.tanh();
        }
        // head over [ctx ++ t2]
        let mut u = vec![0.0; l.head_hidden];
        for j in 0..l.head_hidden {
            let mut acc = p[l.hb1().start + j];
            for (i, &x) in ctx.iter().chain(t2.iter()).enumerate() {
                acc += x * p[l.hw1().start + i * l.head_hidden + j];
            }
            u[j] = acc.tanh();
        }
        let mut logit = p[l.hb2()];
        for j in 0..l.head_hidden {
            logit += u[j] * p[l.hw2().start + j];
        }
        Forward { ctx, t1, t2, u, logit }
    }

    /// Mean logistic loss over a batch plus the full gradient, laid out
    /// like the parameter vector.
    pub fn loss_and_grad(
        &self,
        tokens: &[Vec<usize>],
        tabular: &Matrix,
        labels: &[Label],
        rows: &[usize],
    ) -> (f64, Vec<f64>) {
        let l = &self.layout;
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let mut loss = 0.0;
        let inv_n = 1.0 / rows.len() as f64;
        for &r in rows {
            let toks = &tokens[r];
            let x = tabular.row(r);
            let f = self.forward(toks, x);
            let y = if labels[r].is_positive() { 1.0 } else { 0.0 };
            loss += logistic_loss(f.logit, y) * inv_n;
            let dlogit = (sigmoid(f.logit) - y) * inv_n;

            // head output layer
            grad[l.hb2()] += dlogit;
            let mut du = vec![0.0; l.head_hidden];
            for j in 0..l.head_hidden {
                grad[l.hw2().start + j] += dlogit * f.u[j];
                du[j] = dlogit * p[l.hw2().start + j] * (1.0 - f.u[j] * f.u[j]);
            }
            // head hidden layer -> ctx and t2 halves
            let mut dcat = vec![0.0; l.head_in()];
            for j in 0..l.head_hidden {
                grad[l.hb1().start + j] += du[j];
                for (i, &x_in) in f.ctx.iter().chain(f.t2.iter()).enumerate() {
                    grad[l.hw1().start + i * l.head_hidden + j] += du[j] * x_in;
                    dcat[i] += du[j] * p[l.hw1().start + i * l.head_hidden + j];
                }
            }
            let (dctx, dt2) = dcat.split_at(l.embed_dim);
            // context half: mean pooling spreads gradient over tokens
            if !toks.is_empty() {
                let inv_t = 1.0 / toks.len() as f64;
                for &t in toks {
                    let base = l.embed().start + t * l.embed_dim;
                    for d in 0..l.embed_dim {
                        grad[base + d] += dctx[d] * inv_t;
                    }
                }
            }
            // tabular half, back through the two tanh layers
            let mut dt1 = vec![0.0; l.tab_hidden];
            for j in 0..l.tab_hidden {
                let dz = dt2[j] * (1.0 - f.t2[j] * f.t2[j]);
                grad[l.b2().start + j] += dz;
                for i in 0..l.tab_hidden {
                    grad[l.w2().start + i * l.tab_hidden + j] += dz * f.t1[i];
                    dt1[i] += dz * p[l.w2().start + i * l.tab_hidden + j];
                }
            }
            for j in 0..l.tab_hidden {
                let dz = dt1[j] * (1.0 - f.t1[j] * f.t1[j]);
                grad[l.b1().start + j] += dz;
                for (i, &x_in) in x.iter().enumerate() {
                    grad[l.w1().start + i * l.tab_hidden + j] += dz * x_in;
                }
            }
        }
        (loss, grad)
    }

    /// Probability for a tokenized context and an imputed tabular vector.
    pub fn predict_tokens(&self, tokens: &[usize], tabular: &[f64]) -> Result<f64> {
        if tabular.len() != self.layout.tab_in {
            return Err(Error::LengthMismatch {
                expected: self.layout.tab_in,
                found: tabular.len(),
            });
        }
        Ok(sigmoid(self.forward(tokens, tabular).logit))
    }

    /// Probability for raw context text and an encoded (possibly
    /// missing-marked) vector; missing entries are imputed for the MLP.
    pub fn predict(&self, context: &str, vector: &[f64]) -> Result<f64> {
        let tokens = tokenize_context(context, self.vocab_buckets);
        let imputed = features::impute_missing(vector);
        self.predict_tokens(&tokens, &imputed)
    }

    /// Encode a feature bag and score it with optional context.
    pub fn score_bag(&self, bag: &FeatureBag, context: Option<&str>) -> Result<f64> {
        let v = features::transform(bag, &self.encoder, self.stage)?;
        self.predict(context.unwrap_or(""), &v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let artifact = HybridArtifact::from_model(self);
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, &artifact)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let artifact: HybridArtifact = serde_json::from_reader(BufReader::new(file))?;
        artifact.into_model()
    }
}

fn encode_blob(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_blob(blob: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(blob)
        .map_err(|e| Error::InvalidConfig(format!("bad weight blob: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::LengthMismatch {
            expected: expected * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// On-disk form: one base64 little-endian f32 blob per parameter group.
#[derive(Serialize, Deserialize)]
struct HybridArtifact {
    format_version: String,
    stage: Stage,
    vocab_buckets: usize,
    embed_dim: usize,
    tabular_hidden: usize,
    head_hidden: usize,
    schema_hash: String,
    encoder: EncoderState,
    weights: std::collections::BTreeMap<String, String>,
}

impl HybridArtifact {
    fn from_model(model: &HybridModel) -> Self {
        let mut weights = std::collections::BTreeMap::new();
        for (name, range) in model.group_ranges() {
            weights.insert(name.to_string(), encode_blob(&model.params[range]));
        }
        Self {
            format_version: HYBRID_FORMAT.to_string(),
            stage: model.stage,
            vocab_buckets: model.vocab_buckets,
            embed_dim: model.embed_dim,
            tabular_hidden: model.tabular_hidden,
            head_hidden: model.head_hidden,
            schema_hash: model.encoder.schema_hash.clone(),
            encoder: model.encoder.clone(),
            weights,
        }
    }

    fn into_model(self) -> Result<HybridModel> {
        if self.format_version != HYBRID_FORMAT {
            return Err(Error::VersionMismatch {
                found: self.format_version,
            });
        }
        if self.schema_hash != self.encoder.schema_hash {
            return Err(Error::SchemaHashMismatch {
                expected: self.schema_hash,
                found: self.encoder.schema_hash,
            });
        }
        let config = HybridConfig {
            vocab_buckets: self.vocab_buckets,
            embed_dim: self.embed_dim,
            tabular_hidden: self.tabular_hidden,
            head_hidden: self.head_hidden,
            ..HybridConfig::default()
        };
        let mut model = HybridModel::init(&config, self.encoder, self.stage)?;
        for (name, range) in model.group_ranges() {
            let blob = self
                .weights
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing weight group {name}")))?;
            let values = decode_blob(blob, range.len())?;
            model.params[range].copy_from_slice(&values);
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_auc: Option<f64>,
}

/// Adam state over the flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    step: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, step: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            step,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.step * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Trains the hybrid model with minibatch Adam. Deterministic given the
/// config seed: initialization, batch order, and the 10% validation slice
/// all derive from it. Records without context must be rejected by the
/// caller before tokenization (see `pipeline::fit_hybrid`).
pub fn train_hybrid(
    tokens: &[Vec<usize>],
    tabular: &Matrix,
    labels: &[Label],
    encoder: EncoderState,
    stage: Stage,
    config: &HybridConfig,
) -> Result<(HybridModel, Vec<EpochReport>)> {
    config.validate()?;
    let n = labels.len();
    if tokens.len() != n || tabular.rows() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: tokens.len().min(tabular.rows()),
        });
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    if pos == 0 || pos == n {
        return Err(Error::DegenerateLabels);
    }
    if tabular.cols() != encoder.view_len(stage) {
        return Err(Error::LengthMismatch {
            expected: encoder.view_len(stage),
            found: tabular.cols(),
        });
    }

    let mut model = HybridModel::init(config, encoder, stage)?;
    let mut adam = Adam::new(model.param_len(), config.step_size);

    // deterministic shuffle; last tenth is the per-epoch validation slice
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = derived_rng(config.seed, "hybrid-valsplit");
        order.shuffle(&mut rng);
    }
    let val_len = (n / 10).min(n.saturating_sub(1));
    let (train_rows, val_rows) = order.split_at(n - val_len);
    let mut train_rows = train_rows.to_vec();

    let mut reports = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        {
            use rand::seq::SliceRandom;
            let mut rng = derived_rng(config.seed, &format!("hybrid-epoch-{epoch}"));
            train_rows.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in train_rows.chunks(config.batch_size) {
            let (loss, grad) = model.loss_and_grad(tokens, tabular, labels, batch);
            adam.update(&mut model.params, &grad);
            epoch_loss += loss;
            batches += 1;
        }
        let validation_auc = if val_rows.is_empty() {
            None
        } else {
            let scores: Vec<f64> = val_rows
                .iter()
                .map(|&r| sigmoid(model.forward(&tokens[r], tabular.row(r)).logit))
                .collect();
            let bools: Vec<bool> = val_rows.iter().map(|&r| labels[r].is_positive()).collect();
            auc(&scores, &bools)
        };
        let report = EpochReport {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            validation_auc,
        };
        log::info!(
            "hybrid epoch {}: train_loss {:.4} validation_auc {:?}",
            report.epoch,
            report.train_loss,
            report.validation_auc
        );
        reports.push(report);
    }
    Ok((model, reports))
}
