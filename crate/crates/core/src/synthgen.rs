//! Deterministic synthetic completion telemetry with known ground truth.
//!
//! Users are drawn from a mixture of behavior profiles; each event's
//! acceptance log-odds combine per-feature effects, a per-user intercept,
//! and an optional context signal carried by synthetic token text. Profile
//! intercepts are solved numerically so the realized accept-per-show and
//! shown-per-generation rates hit the configured targets regardless of
//! feature noise.
//!
//! Closed-loop mode replays a gating policy over the same base stream:
//! every blocked completion spawns a Poisson number of follow-up
//! opportunities (the user keeps typing, creating new completion points),
//! recursively. Follow-up completions are never accepted — the user is
//! typing the content themselves — which both matches the "typing ahead"
//! story and makes accepted symbols pathwise monotone in the block rate.
//! Under a pass-all policy no follow-ups are drawn and the output is
//! byte-identical to the open-loop stream.
//!
//! Effect weights on the realized session counters
//! (`session_accept_count`, `session_cancel_count`) are ignored: those
//! features are filled in after outcomes are sampled.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::calibrate::ThresholdPolicy;
use crate::error::{Error, Result};
use crate::events::{
    dataset_stats, write_events, write_generations, write_manifest, CompletionEvent, Dataset,
    FeatureBag, GenerationRecord, Outcome, Provenance, ShownAction, Split,
};
use crate::features::{default_schema, write_schema, FeatureSchema};
use crate::score::Scorer;
use crate::util::{derived_rng, fnv1a64, sha256_hex, sigmoid};

/// Expected extra opportunities per blocked completion in the default
/// world. Solves `(1-q)/(1-q*b) = 1 - 0.138` at a 20% block rate, so the
/// default closed loop reduces generations per user by about 13.8%.
pub const DEFAULT_OPPORTUNITY_BOOST: f64 = 0.36;

const MAX_INJECTION_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorProfile {
    /// Mean accept probability over shown completions.
    pub base_accept_rate: f64,
    /// Mean probability that a generated completion is still valid and
    /// shown by the time inference returns.
    pub base_show_rate: f64,
    /// Probability that a shown, non-accepted completion is explicitly
    /// cancelled rather than ignored.
    pub cancel_propensity: f64,
    pub typing_speed_mean: f64,
    pub typing_speed_std: f64,
    /// Mean events per session (Poisson).
    pub session_length_mean: f64,
    /// Std of the per-user random intercept on the accept log-odds.
    pub user_intercept_std: f64,
    /// Log-odds contribution per feature name.
    pub feature_effect_weights: BTreeMap<String, f64>,
    /// Weight of the token-context signal on the accept log-odds.
    pub context_signal_strength: f64,
}

impl BehaviorProfile {
    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("base_accept_rate", self.base_accept_rate),
            ("base_show_rate", self.base_show_rate),
            ("cancel_propensity", self.cancel_propensity),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0,1), got {p}")));
            }
        }
        if self.typing_speed_std < 0.0 || self.user_intercept_std < 0.0 {
            return Err(Error::InvalidConfig("stds must be >= 0".to_string()));
        }
        if self.session_length_mean < 1.0 {
            return Err(Error::InvalidConfig("session_length_mean must be >= 1".to_string()));
        }
        if self.context_signal_strength < 0.0 {
            return Err(Error::InvalidConfig(
                "context_signal_strength must be >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileMix {
    pub profile: BehaviorProfile,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageMix {
    pub name: String,
    pub extension: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceModel {
    pub enabled: bool,
    /// Expected extra trigger opportunities per blocked completion; 0
    /// makes the closed loop behaviorally identical to the open loop.
    pub opportunity_boost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub user_count: usize,
    pub sessions_per_user: usize,
    pub profiles: Vec<ProfileMix>,
    pub languages: Vec<LanguageMix>,
    pub dependence: DependenceModel,
    pub seed: u64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.user_count == 0 {
            return Err(Error::InvalidConfig("user_count must be > 0".to_string()));
        }
        if self.sessions_per_user == 0 {
            return Err(Error::InvalidConfig("sessions_per_user must be > 0".to_string()));
        }
        if self.profiles.is_empty() || self.languages.is_empty() {
            return Err(Error::InvalidConfig(
                "need at least one profile and one language".to_string(),
            ));
        }
        let wsum: f64 = self.profiles.iter().map(|p| p.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "profile mix weights must sum to 1, got {wsum}"
            )));
        }
        if self.dependence.opportunity_boost < 0.0 {
            return Err(Error::InvalidConfig("opportunity_boost must be >= 0".to_string()));
        }
        for p in &self.profiles {
            p.profile.validate()?;
        }
        Ok(())
    }
}

pub fn read_world_config(path: &Path) -> Result<WorldConfig> {
    let file = File::open(path)?;
    let config: WorldConfig = serde_json::from_reader(BufReader::new(file))?;
    config.validate()?;
    Ok(config)
}

pub fn write_world_config(path: &Path, config: &WorldConfig) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, config)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

fn default_weights() -> BTreeMap<String, f64> {
    [
        ("typing_speed", -0.55),
        ("ms_since_last_keystroke", 0.45),
        ("in_comment", -0.90),
        ("in_string", -0.50),
        ("node_kind", 0.70),
        ("last_action", 0.50),
        ("prefix_length", 0.35),
        ("indent_level", 0.20),
        ("caret_col", -0.15),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// The default world: ~50k events over 200 users, tuned to reproduce the
/// production funnel shape (roughly 31% of generations shown, 31% of
/// shows accepted).
pub fn default_world(seed: u64) -> WorldConfig {
    let profile = |accept: f64, cancel: f64, speed: f64, intercept: f64| BehaviorProfile {
        base_accept_rate: accept,
        base_show_rate: 0.31,
        cancel_propensity: cancel,
        typing_speed_mean: speed,
        typing_speed_std: 0.5,
        session_length_mean: 62.0,
        user_intercept_std: intercept,
        feature_effect_weights: default_weights(),
        context_signal_strength: 0.0,
    };
    WorldConfig {
        user_count: 200,
        sessions_per_user: 4,
        profiles: vec![
            ProfileMix { profile: profile(0.27, 0.42, 2.6, 0.35), weight: 0.40 },
            ProfileMix { profile: profile(0.33, 0.38, 3.4, 0.30), weight: 0.45 },
            ProfileMix { profile: profile(0.36, 0.50, 3.0, 0.40), weight: 0.15 },
        ],
        languages: vec![
            LanguageMix { name: "kotlin".into(), extension: "kt".into(), weight: 0.40 },
            LanguageMix { name: "python".into(), extension: "py".into(), weight: 0.30 },
            LanguageMix { name: "php".into(), extension: "php".into(), weight: 0.15 },
            LanguageMix { name: "csharp".into(), extension: "cs".into(), weight: 0.15 },
        ],
        dependence: DependenceModel { enabled: false, opportunity_boost: DEFAULT_OPPORTUNITY_BOOST },
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub event_id: String,
    pub p_shown: f64,
    pub p_accept_given_shown: f64,
    /// p_shown * p_accept_given_shown: the probability the generation ends
    /// up accepted, which is what the trigger stage predicts.
    pub p_positive: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserStats {
    pub user_id: String,
    pub opportunities: u64,
    pub generations: u64,
    pub shown: u64,
    pub accepted: u64,
    pub symbols_completed: u64,
    pub symbols_typed: u64,
}

impl UserStats {
    /// Ratio of completed code: symbols inserted by completion over all
    /// symbols written. Needs the simulated typing totals, so it exists
    /// only for generator-backed runs.
    pub fn rocc(&self) -> f64 {
        let total = self.symbols_completed + self.symbols_typed;
        if total == 0 {
            0.0
        } else {
            self.symbols_completed as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub dataset: Dataset,
    pub ground_truth: Vec<GroundTruth>,
    pub user_stats: Vec<UserStats>,
    pub schema: FeatureSchema,
    /// Symbols the user meant to write at each opportunity; feeds the
    /// typed-symbol accounting, never serialized.
    pub intended_lens: BTreeMap<String, u32>,
}

const GOOD_TOKENS: &[&str] = &[
    "stream", "builder", "result", "config", "index", "buffer", "cache", "token", "parse",
    "fetch", "async", "await", "iter", "map", "filter", "write", "read", "spawn", "join", "lock",
];
const BAD_TOKENS: &[&str] = &[
    "legacy", "hack", "tmp", "misc", "stuff", "foo", "bar", "baz", "qux", "junk", "blob",
    "thing", "data2", "old", "copy", "test123", "aux", "zzz", "pad", "wip",
];

/// Stable per-category signal in [-1, 1].
fn cat_signal(category: &str) -> f64 {
    (fnv1a64(category.as_bytes()) % 2001) as f64 / 1000.0 - 1.0
}

fn clamp1(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

fn weighted_pick<'a, T>(items: &'a [(T, f64)], rng: &mut ChaCha8Rng) -> &'a T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut draw = rng.gen::<f64>() * total;
    for (item, w) in items {
        draw -= w;
        if draw <= 0.0 {
            return item;
        }
    }
    &items[items.len() - 1].0
}

fn poisson_count(lambda: f64, rng: &mut ChaCha8Rng) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive lambda").sample(rng) as u64
}

/// Solves mean(sigmoid(c + offset_i)) = target for c by bisection.
fn solve_intercept(offsets: &[f64], target: f64) -> f64 {
    if offsets.is_empty() {
        return crate::util::logit(target);
    }
    let mut lo = -15.0;
    let mut hi = 15.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let mean: f64 =
            offsets.iter().map(|&o| sigmoid(mid + o)).sum::<f64>() / offsets.len() as f64;
        if mean < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct UserSeed {
    user_id: String,
    profile_idx: usize,
    intercept: f64,
    typing_speed: f64,
    language: String,
    extension: String,
}

/// Everything sampled for one opportunity before outcomes are decided.
struct Draft {
    user_idx: usize,
    profile_idx: usize,
    event: CompletionEvent,
    session_event_index: usize,
    /// Accept log-odds offset: feature effects + user intercept + context.
    accept_offset: f64,
    show_offset: f64,
    latency_ms: f64,
    context_token_count: f64,
    completion_length: u32,
    intended_len: u32,
    // filled during outcome passes
    compilable: bool,
    mean_token_logprob: f64,
    p_shown: f64,
    shown: bool,
    p_accept: f64,
    outcome: Outcome,
}

fn hour_bucket(timestamp_ms: i64) -> &'static str {
    match (timestamp_ms / 3_600_000) % 24 {
        0..=5 => "night",
        6..=11 => "morning",
        12..=17 => "afternoon",
        _ => "evening",
    }
}

struct EventContext<'a> {
    user: &'a UserSeed,
    profile: &'a BehaviorProfile,
    session_id: &'a str,
    session_start_ms: i64,
    timestamp: i64,
    session_event_index: usize,
    first_in_session: bool,
}

/// Samples one opportunity's features, context text, and offsets from the
/// given stream. Shared by the base generator and closed-loop injection.
fn sample_draft(
    ctx: &EventContext<'_>,
    event_id: String,
    user_idx: usize,
    rng: &mut ChaCha8Rng,
) -> Draft {
    let profile = ctx.profile;
    let mut bag = FeatureBag::new();
    let mut accept_offset = ctx.user.intercept;
    let w = |name: &str| profile.feature_effect_weights.get(name).copied().unwrap_or(0.0);

    let typing_speed = (ctx.user.typing_speed + Normal::new(0.0, 0.25).unwrap().sample(rng))
        .max(0.2);
    bag.set_scalar("typing_speed", typing_speed);
    accept_offset += w("typing_speed") * clamp1((typing_speed - 3.2) / 1.5);

    if !ctx.first_in_session {
        let pause = LogNormal::new(400f64.ln(), 1.0)
            .unwrap()
            .sample(rng)
            .clamp(10.0, 60_000.0);
        bag.set_scalar("ms_since_last_keystroke", pause);
        accept_offset += w("ms_since_last_keystroke") * clamp1((pause.ln() - 400f64.ln()) / 1.2);
    }

    let prefix_length = LogNormal::new(12f64.ln(), 0.8)
        .unwrap()
        .sample(rng)
        .clamp(0.0, 500.0)
        .floor();
    bag.set_scalar("prefix_length", prefix_length);
    accept_offset += w("prefix_length") * clamp1(((prefix_length + 1.0).ln() - 13f64.ln()) / 1.0);

    bag.set_scalar("caret_line", rng.gen_range(1..400) as f64);
    let caret_col = LogNormal::new(20f64.ln(), 0.6)
        .unwrap()
        .sample(rng)
        .clamp(0.0, 200.0)
        .floor();
    bag.set_scalar("caret_col", caret_col);
    accept_offset += w("caret_col") * clamp1((caret_col - 20.0) / 40.0);

    bag.set_scalar(
        "line_length",
        LogNormal::new(35f64.ln(), 0.5).unwrap().sample(rng).clamp(0.0, 400.0).floor(),
    );
    let indent = poisson_count(2.0, rng) as f64;
    bag.set_scalar("indent_level", indent);
    accept_offset += w("indent_level") * clamp1((indent - 2.0) / 3.0);
    bag.set_scalar("same_line_edit_count", poisson_count(1.0, rng) as f64);

    let node_kinds: Vec<(&str, f64)> = vec![
        ("identifier", 0.30),
        ("call_expr", 0.20),
        ("member_access", 0.12),
        ("string_lit", 0.08),
        ("comment", 0.08),
        ("block", 0.07),
        ("param_list", 0.05),
        ("import", 0.04),
        ("binary_expr", 0.04),
        ("literal", 0.02),
    ];
    let node_kind = *weighted_pick(&node_kinds, rng);
    bag.set_categorical("node_kind", node_kind);
    accept_offset += w("node_kind") * cat_signal(node_kind);

    let actions: Vec<(&str, f64)> = vec![
        ("typing", 0.55),
        ("backspace", 0.12),
        ("newline", 0.12),
        ("navigate", 0.10),
        ("paste", 0.06),
        ("delete", 0.05),
    ];
    let last_action = *weighted_pick(&actions, rng);
    bag.set_categorical("last_action", last_action);
    accept_offset += w("last_action") * cat_signal(last_action);

    let in_comment = node_kind == "comment";
    let in_string = node_kind == "string_lit";
    bag.set_flag("in_comment", in_comment);
    bag.set_flag("in_string", in_string);
    accept_offset += w("in_comment") * if in_comment { 1.0 } else { 0.0 };
    accept_offset += w("in_string") * if in_string { 1.0 } else { 0.0 };

    bag.set_categorical("file_extension", &ctx.user.extension);
    bag.set_categorical("hour_bucket", hour_bucket(ctx.session_start_ms));
    bag.set_scalar("events_in_session", (ctx.session_event_index + 1) as f64);
    bag.set_scalar("time_in_session_ms", (ctx.timestamp - ctx.session_start_ms) as f64);
    // realized counters are written after outcomes are sampled
    bag.set_scalar("session_accept_count", 0.0);
    bag.set_scalar("session_cancel_count", 0.0);

    // context text: token mix encodes a latent signal
    let ctx_latent: f64 = rng.gen_range(-1.0..1.0);
    let mut text = String::new();
    for t in 0..18 {
        if t > 0 {
            text.push(if t % 5 == 0 { '.' } else { ' ' });
        }
        let list = if rng.gen_bool((1.0 + ctx_latent) / 2.0) { GOOD_TOKENS } else { BAD_TOKENS };
        text.push_str(list[rng.gen_range(0..list.len())]);
    }
    accept_offset += profile.context_signal_strength * ctx_latent;

    let show_noise = Normal::new(0.0, 0.5).unwrap().sample(rng);
    let show_offset = -0.5 * clamp1((typing_speed - 3.2) / 1.5) + show_noise;

    let empty = rng.gen_bool(0.008);
    let completion_length = if empty {
        0
    } else {
        1 + (LogNormal::new(14f64.ln(), 0.9).unwrap().sample(rng) as u32).min(199)
    };
    let intended_len = completion_length + 10 + poisson_count(30.0, rng) as u32;

    let latency_ms = LogNormal::new(180f64.ln(), 0.4).unwrap().sample(rng).clamp(20.0, 5_000.0);
    let context_token_count =
        LogNormal::new(900f64.ln(), 0.5).unwrap().sample(rng).clamp(16.0, 8_000.0).floor();

    Draft {
        user_idx,
        profile_idx: ctx.user.profile_idx,
        event: CompletionEvent {
            event_id,
            user_id: ctx.user.user_id.clone(),
            session_id: ctx.session_id.to_string(),
            timestamp: ctx.timestamp,
            language: ctx.user.language.clone(),
            context: Some(text),
            trigger_features: bag,
        },
        session_event_index: ctx.session_event_index,
        accept_offset,
        show_offset,
        latency_ms,
        context_token_count,
        completion_length,
        intended_len,
        compilable: true,
        mean_token_logprob: 0.0,
        p_shown: 0.0,
        shown: false,
        p_accept: 0.0,
        outcome: Outcome::NotShown,
    }
}

/// Per-profile constants solved on the generated population.
struct ProfileCalibration {
    c_show: Vec<f64>,
    c_accept: Vec<f64>,
    mean_offset: Vec<f64>,
}

struct BaseWorld {
    drafts: Vec<Draft>,
    users: Vec<UserSeed>,
    calibration: ProfileCalibration,
}

fn sample_users(config: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<UserSeed> {
    let profile_mix: Vec<(usize, f64)> = config
        .profiles
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.weight))
        .collect();
    let language_mix: Vec<(usize, f64)> = config
        .languages
        .iter()
        .enumerate()
        .map(|(i, l)| (i, l.weight))
        .collect();
    (0..config.user_count)
        .map(|u| {
            let profile_idx = *weighted_pick(&profile_mix, rng);
            let profile = &config.profiles[profile_idx].profile;
            let intercept = if profile.user_intercept_std > 0.0 {
                Normal::new(0.0, profile.user_intercept_std).unwrap().sample(rng)
            } else {
                0.0
            };
            let typing_speed = (profile.typing_speed_mean
                + if profile.typing_speed_std > 0.0 {
                    Normal::new(0.0, profile.typing_speed_std).unwrap().sample(rng)
                } else {
                    0.0
                })
            .max(0.3);
            let lang_idx = *weighted_pick(&language_mix, rng);
            UserSeed {
                user_id: format!("u{u:05}"),
                profile_idx,
                intercept,
                typing_speed,
                language: config.languages[lang_idx].name.clone(),
                extension: config.languages[lang_idx].extension.clone(),
            }
        })
        .collect()
}

fn build_base_world(config: &WorldConfig) -> Result<BaseWorld> {
    config.validate()?;
    let mut feature_rng = derived_rng(config.seed, "features");
    let users = sample_users(config, &mut feature_rng);

    // pass A: features and offsets
    let mut drafts: Vec<Draft> = Vec::new();
    for (user_idx, user) in users.iter().enumerate() {
        let profile = &config.profiles[user.profile_idx].profile;
        for s in 0..config.sessions_per_user {
            let session_id = format!("{}-s{s}", user.user_id);
            let session_start_ms: i64 = 1_735_000_000_000
                + (user_idx as i64 * 193 + s as i64 * 7919) * 60_000;
            let length = poisson_count(profile.session_length_mean, &mut feature_rng).max(1);
            let mut timestamp = session_start_ms;
            for e in 0..length {
                let event_id = format!("{}-{s}-{e:04}", user.user_id);
                let ctx = EventContext {
                    user,
                    profile,
                    session_id: &session_id,
                    session_start_ms,
                    timestamp,
                    session_event_index: e as usize,
                    first_in_session: e == 0,
                };
                drafts.push(sample_draft(&ctx, event_id, user_idx, &mut feature_rng));
                let gap = LogNormal::new(8_000f64.ln(), 1.0)
                    .unwrap()
                    .sample(&mut feature_rng)
                    .clamp(200.0, 600_000.0) as i64;
                timestamp += gap;
            }
        }
    }

    // pass B: per-profile show constants and mean offsets
    let n_profiles = config.profiles.len();
    let mut c_show = vec![0.0; n_profiles];
    let mut mean_offset = vec![0.0; n_profiles];
    for p in 0..n_profiles {
        let show_offsets: Vec<f64> = drafts
            .iter()
            .filter(|d| d.profile_idx == p)
            .map(|d| d.show_offset)
            .collect();
        c_show[p] = solve_intercept(&show_offsets, config.profiles[p].profile.base_show_rate);
        let offsets: Vec<f64> = drafts
            .iter()
            .filter(|d| d.profile_idx == p)
            .map(|d| d.accept_offset)
            .collect();
        if !offsets.is_empty() {
            mean_offset[p] = offsets.iter().sum::<f64>() / offsets.len() as f64;
        }
    }

    // pass C1: compilable, logprob, shown
    let mut outcome_rng = derived_rng(config.seed, "outcomes");
    for d in drafts.iter_mut() {
        let centered = d.accept_offset - mean_offset[d.profile_idx];
        d.compilable = outcome_rng.gen_bool(sigmoid(2.2 + 0.8 * centered));
        d.accept_offset += if d.compilable { 0.25 } else { -3.0 };
        d.mean_token_logprob = (-1.2
            + 0.35 * (d.accept_offset - mean_offset[d.profile_idx])
            + Normal::new(0.0, 0.15).unwrap().sample(&mut outcome_rng))
        .clamp(-8.0, -0.01);
        d.p_shown = if d.completion_length == 0 {
            0.0
        } else {
            sigmoid(c_show[d.profile_idx] + d.show_offset)
        };
        d.shown = d.completion_length > 0
            && outcome_rng.gen_bool(sigmoid(c_show[d.profile_idx] + d.show_offset));
    }

    // pass C2: accept constants over shown events
    let mut c_accept = vec![0.0; n_profiles];
    for p in 0..n_profiles {
        let offsets: Vec<f64> = drafts
            .iter()
            .filter(|d| d.profile_idx == p && d.shown)
            .map(|d| d.accept_offset)
            .collect();
        c_accept[p] = solve_intercept(&offsets, config.profiles[p].profile.base_accept_rate);
    }
    for d in drafts.iter_mut() {
        d.p_accept = sigmoid(c_accept[d.profile_idx] + d.accept_offset);
    }

    // pass C3: realized outcomes plus running session counters
    let mut accept_rng = derived_rng(config.seed, "accepts");
    let mut session_counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for d in drafts.iter_mut() {
        let counts = session_counts.entry(d.event.session_id.clone()).or_insert((0, 0));
        d.event
            .trigger_features
            .set_scalar("session_accept_count", counts.0 as f64);
        d.event
            .trigger_features
            .set_scalar("session_cancel_count", counts.1 as f64);
        if d.shown {
            let profile = &config.profiles[d.profile_idx].profile;
            if accept_rng.gen_bool(d.p_accept) {
                d.outcome = Outcome::Shown(ShownAction::Accepted);
                counts.0 += 1;
            } else if accept_rng.gen_bool(profile.cancel_propensity) {
                d.outcome = Outcome::Shown(ShownAction::ExplicitCancel);
                counts.1 += 1;
            } else {
                d.outcome = Outcome::Shown(ShownAction::Ignored);
            }
        } else {
            d.outcome = Outcome::NotShown;
        }
    }

    Ok(BaseWorld {
        drafts,
        users,
        calibration: ProfileCalibration { c_show, c_accept, mean_offset },
    })
}

fn generation_of(draft: &Draft) -> GenerationRecord {
    let mut filter_features = FeatureBag::new();
    filter_features.set_scalar("generation_latency_ms", draft.latency_ms);
    filter_features.set_scalar("mean_token_logprob", draft.mean_token_logprob);
    filter_features.set_scalar("context_token_count", draft.context_token_count);
    filter_features.set_scalar(
        "completion_line_count",
        1.0 + (draft.completion_length / 40) as f64,
    );
    GenerationRecord {
        event_id: draft.event.event_id.clone(),
        completion_length: draft.completion_length,
        filter_features,
        compilable: draft.compilable,
        outcome: draft.outcome,
    }
}

fn truth_of(draft: &Draft) -> GroundTruth {
    GroundTruth {
        event_id: draft.event.event_id.clone(),
        p_shown: draft.p_shown,
        p_accept_given_shown: draft.p_accept,
        p_positive: draft.p_shown * draft.p_accept,
    }
}

fn collect_stats(users: &[UserSeed], output: &mut SimOutput) {
    let mut by_user: BTreeMap<&str, UserStats> = users
        .iter()
        .map(|u| {
            (
                u.user_id.as_str(),
                UserStats { user_id: u.user_id.clone(), ..UserStats::default() },
            )
        })
        .collect();
    let gen_ids: std::collections::HashSet<&str> = output
        .dataset
        .generations
        .iter()
        .map(|g| g.event_id.as_str())
        .collect();
    let gen_by_id: BTreeMap<&str, &GenerationRecord> = output
        .dataset
        .generations
        .iter()
        .map(|g| (g.event_id.as_str(), g))
        .collect();
    for event in &output.dataset.events {
        let stats = by_user.get_mut(event.user_id.as_str()).expect("known user");
        stats.opportunities += 1;
        let intended = output.intended_lens.get(&event.event_id).copied().unwrap_or(0) as u64;
        if gen_ids.contains(event.event_id.as_str()) {
            stats.generations += 1;
            let gen = gen_by_id[event.event_id.as_str()];
            match gen.outcome {
                Outcome::Shown(ShownAction::Accepted) => {
                    stats.shown += 1;
                    stats.accepted += 1;
                    stats.symbols_completed += gen.completion_length as u64;
                    stats.symbols_typed += intended.saturating_sub(gen.completion_length as u64);
                }
                Outcome::Shown(_) => {
                    stats.shown += 1;
                    stats.symbols_typed += intended;
                }
                Outcome::NotShown => {
                    stats.symbols_typed += intended;
                }
            }
        } else {
            // blocked by the trigger: the user typed it all
            stats.symbols_typed += intended;
        }
    }
    output.user_stats = by_user.into_values().collect();
}

/// Open-loop generation: every opportunity gets a generation, outcomes are
/// sampled from the calibrated ground-truth probabilities, and the whole
/// world is a pure function of the config.
pub fn generate(config: &WorldConfig) -> Result<SimOutput> {
    let world = build_base_world(config)?;
    let mut output = SimOutput {
        dataset: Dataset::default(),
        ground_truth: Vec::with_capacity(world.drafts.len()),
        user_stats: Vec::new(),
        schema: default_schema(),
        intended_lens: BTreeMap::new(),
    };
    for draft in &world.drafts {
        output.dataset.generations.push(generation_of(draft));
        output.ground_truth.push(truth_of(draft));
        output
            .intended_lens
            .insert(draft.event.event_id.clone(), draft.intended_len);
        output.dataset.events.push(draft.event.clone());
    }
    collect_stats(&world.users, &mut output);
    Ok(output)
}

/// How the closed loop scores trigger opportunities.
pub enum TriggerScoreSource<'a> {
    /// A trained model (or any scorer) applied to event features.
    Model(&'a dyn Scorer),
    /// The simulator's own p_positive, for model-free experiments.
    GroundTruth,
}

impl TriggerScoreSource<'_> {
    fn score(&self, event: &CompletionEvent, truth_p_positive: f64) -> Result<f64> {
        match self {
            TriggerScoreSource::Model(scorer) => scorer.score_trigger(event),
            TriggerScoreSource::GroundTruth => Ok(truth_p_positive),
        }
    }
}

/// Closed-loop generation: replays `policy`'s trigger gate over the base
/// stream. Blocked completions spawn Poisson(opportunity_boost) follow-up
/// opportunities, recursively; follow-ups are gated too. Requires
/// `dependence.enabled`.
pub fn generate_closed_loop(
    config: &WorldConfig,
    policy: &ThresholdPolicy,
    source: &TriggerScoreSource<'_>,
) -> Result<SimOutput> {
    if !config.dependence.enabled {
        return Err(Error::InvalidConfig(
            "dependence is disabled: use generate".to_string(),
        ));
    }
    let world = build_base_world(config)?;
    let boost = config.dependence.opportunity_boost;

    let mut output = SimOutput {
        dataset: Dataset::default(),
        ground_truth: Vec::new(),
        user_stats: Vec::new(),
        schema: default_schema(),
        intended_lens: BTreeMap::new(),
    };

    for draft in &world.drafts {
        push_gated(draft, &world, config, policy, source, boost, 0, &mut output)?;
    }
    collect_stats(&world.users, &mut output);
    Ok(output)
}

/// Emits one opportunity, and recursively its follow-ups when blocked.
#[allow(clippy::too_many_arguments)]
fn push_gated(
    draft: &Draft,
    world: &BaseWorld,
    config: &WorldConfig,
    policy: &ThresholdPolicy,
    source: &TriggerScoreSource<'_>,
    boost: f64,
    depth: usize,
    output: &mut SimOutput,
) -> Result<()> {
    let truth = truth_of(draft);
    let score = source.score(&draft.event, truth.p_positive)?;
    let passes = policy.passes_trigger(score);

    output.dataset.events.push(draft.event.clone());
    output
        .intended_lens
        .insert(draft.event.event_id.clone(), draft.intended_len);
    output.ground_truth.push(truth);
    if passes {
        output.dataset.generations.push(generation_of(draft));
        return Ok(());
    }
    if depth >= MAX_INJECTION_DEPTH {
        return Ok(());
    }

    // the user keeps typing: extra opportunities appear in expectation
    // `boost` per block, each sampled from a stream keyed by the parent id
    let mut inject_rng = derived_rng(
        config.seed,
        &format!("inject/{}", draft.event.event_id),
    );
    let count = poisson_count(boost, &mut inject_rng);
    for i in 0..count {
        let child = sample_injected(draft, world, config, i, &mut inject_rng);
        push_gated(&child, world, config, policy, source, boost, depth + 1, output)?;
    }
    Ok(())
}

/// A follow-up opportunity right after a blocked completion. The user is
/// typing the content themselves, so the follow-up's completion is never
/// accepted; everything else looks like a normal event of that user.
fn sample_injected(
    parent: &Draft,
    world: &BaseWorld,
    config: &WorldConfig,
    index: u64,
    rng: &mut ChaCha8Rng,
) -> Draft {
    let user = &world.users[parent.user_idx];
    let profile = &config.profiles[user.profile_idx].profile;
    let ctx = EventContext {
        user,
        profile,
        session_id: &parent.event.session_id,
        session_start_ms: parent.event.timestamp
            - parent.event.trigger_features.scalars["time_in_session_ms"] as i64,
        timestamp: parent.event.timestamp,
        session_event_index: parent.session_event_index,
        first_in_session: false,
    };
    let mut child = sample_draft(
        &ctx,
        format!("{}-c{index}", parent.event.event_id),
        parent.user_idx,
        rng,
    );
    // carry the parent's realized counters
    for name in ["session_accept_count", "session_cancel_count"] {
        let v = parent.event.trigger_features.scalars[name];
        child.event.trigger_features.set_scalar(name, v);
    }
    let calib = &world.calibration;
    let centered = child.accept_offset - calib.mean_offset[child.profile_idx];
    child.compilable = rng.gen_bool(sigmoid(2.2 + 0.8 * centered));
    child.accept_offset += if child.compilable { 0.25 } else { -3.0 };
    child.mean_token_logprob = (-1.2
        + 0.35 * (child.accept_offset - calib.mean_offset[child.profile_idx])
        + Normal::new(0.0, 0.15).unwrap().sample(rng))
    .clamp(-8.0, -0.01);
    child.p_shown = if child.completion_length == 0 {
        0.0
    } else {
        sigmoid(calib.c_show[child.profile_idx] + child.show_offset)
    };
    child.p_accept = sigmoid(calib.c_accept[child.profile_idx] + child.accept_offset);
    child.shown = child.completion_length > 0
        && rng.gen_bool(sigmoid(calib.c_show[child.profile_idx] + child.show_offset));
    child.outcome = if child.shown {
        if rng.gen_bool(profile.cancel_propensity) {
            Outcome::Shown(ShownAction::ExplicitCancel)
        } else {
            Outcome::Shown(ShownAction::Ignored)
        }
    } else {
        Outcome::NotShown
    };
    child
}

/// Writes the dataset directory: events, generations, ground truth, user
/// stats, schema, and a manifest consistent with the data.
pub fn write_world(
    dir: &Path,
    output: &SimOutput,
    split: Split,
    collected_under: Provenance,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_events(&dir.join("events.jsonl"), &output.dataset.events)?;
    write_generations(&dir.join("generations.jsonl"), &output.dataset.generations)?;
    write_jsonl(&dir.join("ground_truth.jsonl"), &output.ground_truth)?;
    write_jsonl(&dir.join("user_stats.jsonl"), &output.user_stats)?;
    write_schema(&dir.join("schema.json"), &output.schema)?;
    let manifest = dataset_stats(&output.dataset, &output.schema, split, collected_under);
    write_manifest(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Hash of a serialized model artifact file, for policy provenance.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{label_of, validate_dataset};

    fn small_world(seed: u64) -> WorldConfig {
        let mut config = default_world(seed);
        config.user_count = 40;
        config.sessions_per_user = 2;
        for p in &mut config.profiles {
            p.profile.session_length_mean = 30.0;
        }
        config
    }

    #[test]
    fn zero_users_is_an_error() {
        let mut config = default_world(1);
        config.user_count = 0;
        assert!(generate(&config).is_err());
    }

    #[test]
    fn mix_weights_must_sum_to_one() {
        let mut config = default_world(1);
        config.profiles[0].weight = 0.9;
        assert!(matches!(generate(&config), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_world(7);
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let ja = serde_json::to_string(&a.ground_truth).unwrap();
        let jb = serde_json::to_string(&b.ground_truth).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn generated_dataset_validates_cleanly() {
        let config = small_world(3);
        let out = generate(&config).unwrap();
        let manifest = dataset_stats(
            &out.dataset,
            &out.schema,
            Split::Train,
            Provenance::GatesOff,
        );
        let report = validate_dataset(&out.dataset, &manifest, &out.schema);
        assert!(report.is_valid(), "violations: {:?}", &report.violations[..5.min(report.violations.len())]);
        assert_eq!(out.dataset.events.len(), out.dataset.generations.len());
        assert_eq!(out.dataset.events.len(), out.ground_truth.len());
    }

    #[test]
    fn empty_generations_are_never_shown() {
        let out = generate(&small_world(5)).unwrap();
        let mut empties = 0;
        for gen in &out.dataset.generations {
            if gen.completion_length == 0 {
                empties += 1;
                assert_eq!(gen.outcome, Outcome::NotShown);
            }
        }
        assert!(empties > 0, "fixture should contain some empty generations");
    }

    #[test]
    fn funnel_rates_match_configuration() {
        // default world at full size: accept-per-show and shown-per-generation
        let out = generate(&default_world(42)).unwrap();
        let n = out.dataset.generations.len();
        assert!(n >= 40_000, "default world is ~50k events, got {n}");
        let shown = out.dataset.generations.iter().filter(|g| g.outcome.was_shown()).count();
        let accepted = out
            .dataset
            .generations
            .iter()
            .filter(|g| label_of(g).is_positive())
            .count();
        let show_rate = shown as f64 / n as f64;
        let accept_per_show = accepted as f64 / shown as f64;
        assert!(
            (0.26..=0.36).contains(&show_rate),
            "shown-per-generation {show_rate}"
        );
        assert!(
            (0.28..=0.34).contains(&accept_per_show),
            "accept-per-show {accept_per_show}"
        );
    }

    #[test]
    fn outcomes_track_ground_truth_probability() {
        // bin realized accepts by true p_accept and compare to bin means
        let out = generate(&default_world(11)).unwrap();
        let truth: BTreeMap<&str, &GroundTruth> = out
            .ground_truth
            .iter()
            .map(|t| (t.event_id.as_str(), t))
            .collect();
        let mut bins = vec![(0.0f64, 0.0f64, 0u64); 10];
        for gen in &out.dataset.generations {
            if !gen.outcome.was_shown() {
                continue;
            }
            let p = truth[gen.event_id.as_str()].p_accept_given_shown;
            let b = ((p * 10.0) as usize).min(9);
            bins[b].0 += p;
            bins[b].1 += if label_of(gen).is_positive() { 1.0 } else { 0.0 };
            bins[b].2 += 1;
        }
        for (sum_p, accepted, count) in bins {
            if count < 200 {
                continue;
            }
            let expected = sum_p / count as f64;
            let observed = accepted / count as f64;
            assert!(
                (expected - observed).abs() < 0.05,
                "bin expected {expected:.3} observed {observed:.3} (n={count})"
            );
        }
    }

    #[test]
    fn closed_loop_requires_dependence() {
        let config = small_world(1);
        let policy = ThresholdPolicy::pass_all();
        let err = generate_closed_loop(&config, &policy, &TriggerScoreSource::GroundTruth)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn closed_loop_pass_all_is_byte_identical_to_open_loop() {
        let mut config = small_world(9);
        config.dependence.enabled = true;
        let open = generate(&{
            let mut c = config.clone();
            c.dependence.enabled = false;
            c
        })
        .unwrap();
        let closed = generate_closed_loop(
            &config,
            &ThresholdPolicy::pass_all(),
            &TriggerScoreSource::GroundTruth,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_world(&dir.path().join("open"), &open, Split::Train, Provenance::GatesOff).unwrap();
        write_world(&dir.path().join("closed"), &closed, Split::Train, Provenance::GatesOff)
            .unwrap();
        for name in ["events.jsonl", "generations.jsonl", "ground_truth.jsonl", "user_stats.jsonl"] {
            let a = std::fs::read(dir.path().join("open").join(name)).unwrap();
            let b = std::fs::read(dir.path().join("closed").join(name)).unwrap();
            assert_eq!(a, b, "{name} must be byte-identical under pass-all");
        }
    }

    fn percentile_threshold(out: &SimOutput, pct: f64) -> f64 {
        let mut scores: Vec<f64> = out.ground_truth.iter().map(|t| t.p_positive).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores[((pct / 100.0) * scores.len() as f64) as usize]
    }

    #[test]
    fn zero_boost_reduction_equals_block_rate_exactly() {
        let mut config = small_world(21);
        config.dependence = DependenceModel { enabled: true, opportunity_boost: 0.0 };
        let open = generate(&{
            let mut c = config.clone();
            c.dependence.enabled = false;
            c
        })
        .unwrap();
        let threshold = percentile_threshold(&open, 20.0);
        let policy = ThresholdPolicy {
            trigger_threshold: threshold,
            filter_threshold: 0.0,
            hard_rules: Default::default(),
        };
        let closed =
            generate_closed_loop(&config, &policy, &TriggerScoreSource::GroundTruth).unwrap();
        let blocked = open
            .ground_truth
            .iter()
            .filter(|t| t.p_positive < threshold)
            .count();
        assert_eq!(
            closed.dataset.generations.len(),
            open.dataset.generations.len() - blocked,
            "no feedback: the closed loop degenerates to the open loop"
        );
        assert_eq!(closed.dataset.events.len(), open.dataset.events.len());
    }

    #[test]
    fn default_boost_lands_near_the_production_gap() {
        let mut config = small_world(33);
        config.user_count = 80;
        config.dependence = DependenceModel {
            enabled: true,
            opportunity_boost: DEFAULT_OPPORTUNITY_BOOST,
        };
        let open = generate(&{
            let mut c = config.clone();
            c.dependence.enabled = false;
            c
        })
        .unwrap();
        let threshold = percentile_threshold(&open, 20.0);
        let policy = ThresholdPolicy {
            trigger_threshold: threshold,
            filter_threshold: 0.0,
            hard_rules: Default::default(),
        };
        let closed =
            generate_closed_loop(&config, &policy, &TriggerScoreSource::GroundTruth).unwrap();
        let reduction = 1.0
            - closed.dataset.generations.len() as f64 / open.dataset.generations.len() as f64;
        assert!(
            reduction < 0.20,
            "dependence must shrink the reduction below the block rate, got {reduction}"
        );
        assert!(
            (0.11..=0.17).contains(&reduction),
            "default boost should land near 13.8%, got {reduction}"
        );
    }

    #[test]
    fn accepted_symbols_monotone_in_block_rate() {
        let mut config = small_world(17);
        config.dependence = DependenceModel { enabled: true, opportunity_boost: 0.5 };
        let open = generate(&{
            let mut c = config.clone();
            c.dependence.enabled = false;
            c
        })
        .unwrap();
        let mut last = u64::MAX;
        for pct in [0.0, 10.0, 20.0, 40.0, 60.0] {
            let policy = ThresholdPolicy {
                trigger_threshold: if pct == 0.0 { 0.0 } else { percentile_threshold(&open, pct) },
                filter_threshold: 0.0,
                hard_rules: Default::default(),
            };
            let closed =
                generate_closed_loop(&config, &policy, &TriggerScoreSource::GroundTruth).unwrap();
            let accepted_symbols: u64 = closed
                .user_stats
                .iter()
                .map(|u| u.symbols_completed)
                .sum();
            assert!(
                accepted_symbols <= last,
                "block {pct}%: accepted symbols rose {last} -> {accepted_symbols}"
            );
            last = accepted_symbols;
        }
    }

    #[test]
    fn bayes_auc_matches_pair_count_expectation() {
        // empirical AUC of true probabilities against realized labels vs
        // its expectation from the probabilities alone, both by exhaustive
        // pair counting at n <= 5k
        let mut config = small_world(29);
        config.user_count = 30;
        let out = generate(&config).unwrap();
        let truth: BTreeMap<&str, f64> = out
            .ground_truth
            .iter()
            .map(|t| (t.event_id.as_str(), t.p_positive))
            .collect();
        let rows: Vec<(f64, bool)> = out
            .dataset
            .generations
            .iter()
            .take(5000)
            .map(|g| (truth[g.event_id.as_str()], label_of(g).is_positive()))
            .collect();

        let mut concordant = 0.0;
        let mut pairs = 0.0;
        let mut e_concordant = 0.0;
        let mut e_pairs = 0.0;
        for (pi, yi) in &rows {
            for (pj, yj) in &rows {
                let c = if pi > pj {
                    1.0
                } else if pi == pj {
                    0.5
                } else {
                    0.0
                };
                if *yi && !*yj {
                    pairs += 1.0;
                    concordant += c;
                }
                let w = pi * (1.0 - pj);
                e_pairs += w;
                e_concordant += w * c;
            }
        }
        let empirical = concordant / pairs;
        let analytic = e_concordant / e_pairs;
        assert!(
            (empirical - analytic).abs() <= 0.01,
            "bayes AUC {empirical:.4} vs analytic {analytic:.4}"
        );
    }

    #[test]
    fn world_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        let config = default_world(123);
        write_world_config(&path, &config).unwrap();
        let loaded = read_world_config(&path).unwrap();
        assert_eq!(loaded, config);
    }
}
