//! Gating toolkit for LLM-powered inline code completion.
//!
//! Two lightweight classifiers sit around the completion LLM: a *trigger*
//! model decides whether to request a completion at all, and a *filter*
//! model decides whether a generated completion is shown. This crate holds
//! everything needed to train, calibrate, evaluate, and serve those
//! decisions on telemetry-style event logs:
//!
//! - [`events`]: domain types, labeling, dataset IO and validation
//! - [`features`]: schema-driven encoding (target encoding + quantile maps)
//! - [`gbdt`]: histogram gradient-boosted trees for binary classification
//! - [`hybrid`]: hashed-token context encoder fused with a tabular MLP
//! - [`synthgen`]: deterministic synthetic telemetry with known ground truth
//! - [`calibrate`]: FNR-budget threshold selection and joint sweeps
//! - [`eval`]: offline policy replay, trade-off curves, bootstrap A/B
//! - [`serve`]: newline-delimited JSON gating service and bench client

pub mod calibrate;
pub mod error;
pub mod eval;
pub mod events;
pub mod features;
pub mod gbdt;
pub mod hybrid;
pub mod pipeline;
pub mod score;
pub mod serve;
pub mod synthgen;
pub(crate) mod util;

pub use error::{Error, Result};
