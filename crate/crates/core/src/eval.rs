//! Offline policy replay, trade-off curves, and the user-level bootstrap
//! A/B analyzer.
//!
//! Replay walks a gates-off log and decides, per event, whether the policy
//! would have let the completion through; accept/cancel status then comes
//! from the logged outcome. Events are treated as independent — the known
//! offline simplification; the closed-loop generator exists to quantify
//! what that assumption hides.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::{SweepResult, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::events::{label_of, Dataset, DatasetManifest, Outcome, Provenance, ShownAction};
use crate::score::{ScoredDataset, ScoredGeneration};
use crate::util::derived_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub symbols_completed: u64,
    pub shown: u64,
    pub accepted: u64,
    pub explicit_cancels: u64,
    /// Completions the policy would let the LLM generate.
    pub generations: u64,
    /// accepted / shown; undefined when nothing is shown.
    pub accept_rate: Option<f64>,
    pub cancel_rate: Option<f64>,
    /// Percentage of would-be generations blocked by the trigger.
    pub generations_filtered_pct: f64,
}

/// Replays a policy over a scored gates-off log.
///
/// An event counts as shown iff its trigger score passes, the logged
/// outcome was a show, no hard rule fires, and its filter score passes.
pub fn replay(scored: &ScoredDataset, policy: &ThresholdPolicy) -> MetricsReport {
    let mut report = MetricsReport {
        symbols_completed: 0,
        shown: 0,
        accepted: 0,
        explicit_cancels: 0,
        generations: 0,
        accept_rate: None,
        cancel_rate: None,
        generations_filtered_pct: 0.0,
    };
    let total = scored.len() as u64;
    for g in scored {
        if !policy.passes_trigger(g.trigger_score) {
            continue;
        }
        report.generations += 1;
        if !g.outcome.was_shown() {
            continue;
        }
        if !policy.passes_filter(g.filter_score, g.compilable) {
            continue;
        }
        report.shown += 1;
        match g.outcome {
            Outcome::Shown(ShownAction::Accepted) => {
                report.accepted += 1;
                report.symbols_completed += g.completion_length as u64;
            }
            Outcome::Shown(ShownAction::ExplicitCancel) => report.explicit_cancels += 1,
            _ => {}
        }
    }
    if report.shown > 0 {
        report.accept_rate = Some(report.accepted as f64 / report.shown as f64);
        report.cancel_rate = Some(report.explicit_cancels as f64 / report.shown as f64);
    }
    if total > 0 {
        report.generations_filtered_pct =
            100.0 * (total - report.generations) as f64 / total as f64;
    }
    report
}

/// Guard for replay inputs: logs collected under an active policy carry
/// biased labels and must be refused.
pub fn check_replay_provenance(manifest: &DatasetManifest) -> Result<()> {
    match &manifest.collected_under {
        Provenance::GatesOff => Ok(()),
        Provenance::Policy(desc) => Err(Error::Provenance(format!(
            "dataset was collected under an active policy ({desc}); replay needs gates-off logs"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub grid_pct: f64,
    pub feasible: bool,
    pub realized_fnr: f64,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub target_fnr: f64,
    pub points: Vec<CurvePoint>,
}

/// One replay per feasible sweep point; infeasible points are carried
/// through flagged. Errors when nothing is feasible.
pub fn curve(scored: &ScoredDataset, sweep: &SweepResult) -> Result<TradeoffCurve> {
    if sweep.points.iter().all(|p| !p.feasible) {
        return Err(Error::Infeasible(
            "no feasible sweep point at this target".to_string(),
        ));
    }
    let mut points: Vec<CurvePoint> = sweep
        .points
        .iter()
        .map(|p| CurvePoint {
            grid_pct: p.grid_pct,
            feasible: p.feasible,
            realized_fnr: p.realized_fnr,
            metrics: p.policy.as_ref().map(|policy| replay(scored, policy)),
        })
        .collect();
    points.sort_by(|a, b| a.grid_pct.partial_cmp(&b.grid_pct).unwrap());
    Ok(TradeoffCurve {
        target_fnr: sweep.target_fnr,
        points,
    })
}

fn rate_str(r: Option<f64>) -> String {
    match r {
        Some(v) => format!("{v}"),
        None => "nan".to_string(),
    }
}

fn parse_rate(s: &str) -> Result<Option<f64>> {
    if s == "nan" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::InvalidConfig(format!("bad rate field {s}: {e}")))
}

pub const CURVE_HEADER: &str =
    "grid_pct\tsymbols_completed\taccept_rate\tcancel_rate\trealized_fnr\tfeasible";

/// Writes the curve as TSV. Infeasible points keep their grid slot with
/// empty metrics.
pub fn export_curve(curve: &TradeoffCurve, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{CURVE_HEADER}")?;
    for p in &curve.points {
        let (symbols, ar, cr) = match &p.metrics {
            Some(m) => (
                m.symbols_completed.to_string(),
                rate_str(m.accept_rate),
                rate_str(m.cancel_rate),
            ),
            None => ("0".to_string(), "nan".to_string(), "nan".to_string()),
        };
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            p.grid_pct, symbols, ar, cr, p.realized_fnr, p.feasible
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reparses an exported TSV. Round-trips the fields the TSV carries;
/// detailed counts are not part of the file format.
pub fn parse_curve(path: &Path, target_fnr: f64) -> Result<TradeoffCurve> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    match lines.next() {
        Some(Ok(h)) if h == CURVE_HEADER => {}
        other => {
            return Err(Error::InvalidConfig(format!(
                "bad curve header: {other:?}"
            )))
        }
    }
    let mut points = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::InvalidConfig(format!(
                "curve row needs 6 fields, got {}",
                fields.len()
            )));
        }
        let feasible: bool = fields[5]
            .parse()
            .map_err(|_| Error::InvalidConfig("bad feasible flag".to_string()))?;
        let accept_rate = parse_rate(fields[2])?;
        let cancel_rate = parse_rate(fields[3])?;
        let symbols: u64 = fields[1]
            .parse()
            .map_err(|_| Error::InvalidConfig("bad symbols field".to_string()))?;
        let metrics = if feasible {
            // counts beyond the TSV schema are not round-tripped
            Some(MetricsReport {
                symbols_completed: symbols,
                shown: 0,
                accepted: 0,
                explicit_cancels: 0,
                generations: 0,
                accept_rate,
                cancel_rate,
                generations_filtered_pct: 0.0,
            })
        } else {
            None
        };
        points.push(CurvePoint {
            grid_pct: fields[0]
                .parse()
                .map_err(|_| Error::InvalidConfig("bad grid_pct".to_string()))?,
            feasible,
            realized_fnr: fields[4]
                .parse()
                .map_err(|_| Error::InvalidConfig("bad realized_fnr".to_string()))?,
            metrics,
        });
    }
    Ok(TradeoffCurve { target_fnr, points })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG with one polyline per metric (symbols completed, accept
/// rate, cancel rate), each normalized to its own [min, max] span. No
/// external assets.
pub fn plot_curve(curve: &TradeoffCurve, path: &Path) -> Result<()> {
    const W: f64 = 800.0;
    const H: f64 = 500.0;
    const MARGIN: f64 = 60.0;

    let feasible: Vec<&CurvePoint> = curve.points.iter().filter(|p| p.feasible).collect();
    let xs: Vec<f64> = feasible.iter().map(|p| p.grid_pct).collect();
    let (x_min, x_max) = (
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(0.0f64, f64::max),
    );
    let x_span = (x_max - x_min).max(1e-9);
    let to_x = |g: f64| MARGIN + (g - x_min) / x_span * (W - 2.0 * MARGIN);
    let to_y = |v: f64| H - MARGIN - v * (H - 2.0 * MARGIN);

    let series: [(&str, &str, Vec<(f64, Option<f64>)>); 3] = [
        (
            "symbols_completed",
            "#1f77b4",
            feasible
                .iter()
                .map(|p| {
                    (
                        p.grid_pct,
                        p.metrics.as_ref().map(|m| m.symbols_completed as f64),
                    )
                })
                .collect(),
        ),
        (
            "accept_rate",
            "#2ca02c",
            feasible
                .iter()
                .map(|p| (p.grid_pct, p.metrics.as_ref().and_then(|m| m.accept_rate)))
                .collect(),
        ),
        (
            "cancel_rate",
            "#d62728",
            feasible
                .iter()
                .map(|p| (p.grid_pct, p.metrics.as_ref().and_then(|m| m.cancel_rate)))
                .collect(),
        ),
    ];

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    ));
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"14\">% generations filtered by trigger (target FNR {})</text>\n",
        W / 2.0 - 140.0,
        H - 20.0,
        curve.target_fnr
    ));

    for (i, (name, color, points)) in series.iter().enumerate() {
        let values: Vec<f64> = points.iter().filter_map(|(_, v)| *v).collect();
        if values.is_empty() {
            continue;
        }
        let v_min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let v_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (v_max - v_min).max(1e-9);
        let coords: Vec<String> = points
            .iter()
            .filter_map(|(g, v)| v.map(|v| format!("{:.2},{:.2}", to_x(*g), to_y((v - v_min) / span))))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"13\" fill=\"{color}\">{}</text>\n",
            W - MARGIN - 160.0,
            MARGIN + 20.0 * i as f64,
            xml_escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbMetric {
    AcceptRate,
    CancelRate,
    SymbolsCompleted,
    Generations,
}

impl AbMetric {
    pub fn name(&self) -> &'static str {
        match self {
            AbMetric::AcceptRate => "accept_rate",
            AbMetric::CancelRate => "cancel_rate",
            AbMetric::SymbolsCompleted => "symbols_completed",
            AbMetric::Generations => "generations",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "accept_rate" | "ar" => Ok(AbMetric::AcceptRate),
            "cancel_rate" | "cr" => Ok(AbMetric::CancelRate),
            "symbols_completed" | "symbols" => Ok(AbMetric::SymbolsCompleted),
            "generations" => Ok(AbMetric::Generations),
            other => Err(Error::InvalidConfig(format!("unknown metric {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub metric: String,
    pub point_delta_pct: f64,
    pub ci_low_pct: f64,
    pub ci_high_pct: f64,
    /// CI excludes zero (two-sided p <= 0.05).
    pub significant: bool,
    pub resamples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbReport {
    pub resamples: usize,
    pub seed: u64,
    pub arm_a_users: usize,
    pub arm_b_users: usize,
    pub results: Vec<BootstrapResult>,
    /// Metrics skipped because a rate denominator was zero in an arm.
    pub skipped: Vec<String>,
}

pub fn write_ab_report(path: &Path, report: &AbReport) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, report)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

/// Per-user pooled metric values; the user is the exchangeable unit.
fn per_user_values(dataset: &Dataset, metric: AbMetric) -> Result<Vec<f64>> {
    struct Tally {
        shown: u64,
        accepted: u64,
        cancels: u64,
        symbols: u64,
        generations: u64,
    }
    let mut tallies: BTreeMap<&str, Tally> = BTreeMap::new();
    for event in &dataset.events {
        tallies.entry(event.user_id.as_str()).or_insert(Tally {
            shown: 0,
            accepted: 0,
            cancels: 0,
            symbols: 0,
            generations: 0,
        });
    }
    let index = dataset.event_index()?;
    for gen in &dataset.generations {
        let Some(&event_idx) = index.get(gen.event_id.as_str()) else {
            return Err(Error::DanglingReference(gen.event_id.clone()));
        };
        let user = dataset.events[event_idx].user_id.as_str();
        let tally = tallies.get_mut(user).expect("user seen in events");
        tally.generations += 1;
        if gen.outcome.was_shown() {
            tally.shown += 1;
        }
        match gen.outcome {
            Outcome::Shown(ShownAction::Accepted) => {
                tally.accepted += 1;
                tally.symbols += gen.completion_length as u64;
            }
            Outcome::Shown(ShownAction::ExplicitCancel) => tally.cancels += 1,
            _ => {}
        }
        debug_assert_eq!(label_of(gen).is_positive(), matches!(gen.outcome, Outcome::Shown(ShownAction::Accepted)));
    }
    Ok(tallies
        .values()
        .filter_map(|t| match metric {
            AbMetric::AcceptRate => {
                (t.shown > 0).then(|| t.accepted as f64 / t.shown as f64)
            }
            AbMetric::CancelRate => (t.shown > 0).then(|| t.cancels as f64 / t.shown as f64),
            AbMetric::SymbolsCompleted => Some(t.symbols as f64),
            AbMetric::Generations => Some(t.generations as f64),
        })
        .collect())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// User-level bootstrap A/B comparison.
///
/// Arm metric = unweighted mean of per-user metrics; delta is the relative
/// change of B over A in percent. Users are resampled with replacement
/// within each arm; significance is a 95% percentile interval excluding 0.
pub fn ab_compare(
    arm_a: &Dataset,
    arm_b: &Dataset,
    metrics: &[AbMetric],
    resamples: usize,
    seed: u64,
) -> Result<AbReport> {
    let users_a = arm_a.user_ids().len();
    let users_b = arm_b.user_ids().len();
    if users_a < 2 || users_b < 2 {
        return Err(Error::InvalidConfig(format!(
            "need >= 2 users per arm, got {users_a}/{users_b}"
        )));
    }
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for &metric in metrics {
        let a = per_user_values(arm_a, metric)?;
        let b = per_user_values(arm_b, metric)?;
        if a.is_empty() || b.is_empty() || mean(&a) == 0.0 {
            log::warn!(
                "metric {} skipped: zero denominator or no defined users",
                metric.name()
            );
            skipped.push(metric.name().to_string());
            continue;
        }
        let mean_a = mean(&a);
        let mean_b = mean(&b);
        let point_delta_pct = 100.0 * (mean_b - mean_a) / mean_a;

        let mut rng = derived_rng(seed, &format!("ab/{}", metric.name()));
        let mut deltas = Vec::with_capacity(resamples);
        for _ in 0..resamples {
            let ra = mean_resample(&a, &mut rng);
            let rb = mean_resample(&b, &mut rng);
            if ra == 0.0 {
                // degenerate resample; nearest defensible delta
                deltas.push(if rb == 0.0 { 0.0 } else { f64::INFINITY });
            } else {
                deltas.push(100.0 * (rb - ra) / ra);
            }
        }
        deltas.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let lo_idx = ((0.025 * resamples as f64).ceil() as usize).clamp(1, resamples) - 1;
        let hi_idx = ((0.975 * resamples as f64).ceil() as usize).clamp(1, resamples) - 1;
        let ci_low_pct = deltas[lo_idx];
        let ci_high_pct = deltas[hi_idx];
        results.push(BootstrapResult {
            metric: metric.name().to_string(),
            point_delta_pct,
            ci_low_pct,
            ci_high_pct,
            significant: !(ci_low_pct <= 0.0 && ci_high_pct >= 0.0),
            resamples,
        });
    }
    Ok(AbReport {
        resamples,
        seed,
        arm_a_users: users_a,
        arm_b_users: users_b,
        results,
        skipped,
    })
}

fn mean_resample(values: &[f64], rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let n = values.len();
    let mut sum = 0.0;
    for _ in 0..n {
        sum += values[rng.gen_range(0..n)];
    }
    sum / n as f64
}

/// Raw (pass-all) metrics straight from a dataset, for identity checks and
/// pooled reporting.
pub fn raw_metrics(scored: &ScoredDataset) -> MetricsReport {
    replay(scored, &ThresholdPolicy::pass_all())
}

/// Convenience for tests and pipelines: a scored dataset where the scores
/// are the logged label (1 for accepted, 0 otherwise). Replay with
/// pass-all ignores the scores entirely.
pub fn trivially_scored(dataset: &Dataset) -> Result<ScoredDataset> {
    let joined = dataset.joined()?;
    Ok(joined
        .into_iter()
        .map(|(event, record)| {
            let label = label_of(record);
            ScoredGeneration {
                event_id: event.event_id.clone(),
                user_id: event.user_id.clone(),
                label,
                outcome: record.outcome,
                completion_length: record.completion_length,
                compilable: record.compilable,
                trigger_score: if label.is_positive() { 1.0 } else { 0.0 },
                filter_score: if label.is_positive() { 1.0 } else { 0.0 },
            }
        })
        .collect())
}
