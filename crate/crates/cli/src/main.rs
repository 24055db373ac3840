//! `cgate` — train, calibrate, replay, and serve completion-gating models.
//!
//! Commands mirror the library pipeline: `gen` synthesizes telemetry,
//! `train`/`train-hybrid` fit models, `calibrate`/`sweep` pick thresholds
//! under an FNR budget, `replay`/`curve`/`plot` evaluate policies offline,
//! `ab` runs the user-level bootstrap, `serve`/`bench` cover the wire
//! protocol. Logging is controlled by `CGATE_LOG` (off|info|debug).
//! Every failure exits nonzero with an `error:<code>:` prefix on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use cgate_core::calibrate::{
    default_grid, read_policy, read_sweep, sweep_joint, write_policy, write_sweep, HardRules,
    PolicyFile, PolicyProvenance, ThresholdPolicy,
};
use cgate_core::error::{Error, Result};
use cgate_core::eval::{
    ab_compare, check_replay_provenance, curve, export_curve, parse_curve, plot_curve, replay,
    write_ab_report, AbMetric,
};
use cgate_core::events::{
    load_dataset, read_manifest, split_by_user, validate_dataset, Dataset, DatasetManifest,
    Provenance, Split,
};
use cgate_core::features::{read_schema, FeatureSchema, Stage};
use cgate_core::gbdt::{Ensemble, TrainConfig};
use cgate_core::hybrid::HybridConfig;
use cgate_core::pipeline::{fit_gbdt, fit_hybrid, DEFAULT_FOLDS};
use cgate_core::score::score_dataset;
use cgate_core::serve::{bench, GateService, Server};
use cgate_core::synthgen::{
    default_world, file_hash, generate, generate_closed_loop, read_world_config, write_world,
    write_world_config, TriggerScoreSource,
};

#[derive(Parser)]
#[command(name = "cgate", version, about = "Trigger/filter gating for LLM code completion")]
struct Cli {
    /// Override the seed used by the invoked command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory (events.jsonl, generations.jsonl, manifest.json,
    /// schema.json).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    trigger_model: PathBuf,
    #[arg(long)]
    filter_model: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic telemetry dataset.
    Gen {
        /// World config JSON; omit to use the built-in default world.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Gate the stream with this policy (closed loop; requires
        /// dependence.enabled in the config).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Score trigger opportunities with this model during closed-loop
        /// generation; defaults to the ground-truth oracle.
        #[arg(long)]
        trigger_model: Option<PathBuf>,
        /// Also write the effective world config here.
        #[arg(long)]
        emit_config: Option<PathBuf>,
    },
    /// Split a dataset into disjoint train/test user sets.
    Split {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        test_fraction: f64,
    },
    /// Validate a dataset directory against its manifest and schema.
    Validate {
        #[command(flatten)]
        data: DataArg,
    },
    /// Train a boosted trigger or filter model.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_parser = parse_stage)]
        task: Stage,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        trees: usize,
        #[arg(long, default_value_t = 6)]
        max_depth: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        /// Disable automatic positive-class reweighting by the observed
        /// imbalance.
        #[arg(long)]
        no_auto_class_weight: bool,
    },
    /// Train the hybrid context+tabular model.
    TrainHybrid {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_parser = parse_stage, default_value = "trigger")]
        task: Stage,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        epochs: usize,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-2)]
        step_size: f64,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
    },
    /// Pick a policy at one grid point under an FNR budget.
    Calibrate {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        fnr: f64,
        /// Percentage of generations the trigger should block.
        #[arg(long, default_value_t = 0.0)]
        grid_pct: f64,
        #[arg(long)]
        block_non_compilable: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep trigger/filter budget allocations across a grid.
    Sweep {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        fnr: f64,
        /// Grid as start:end:step percentages, e.g. 0:60:5.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        block_non_compilable: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay one policy over a gates-off log.
    Replay {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep plus replay: the full trade-off curve as TSV.
    Curve {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        fnr: f64,
        #[arg(long, value_parser = parse_grid)]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        block_non_compilable: bool,
        /// Reuse a sweep result instead of recalibrating.
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an exported curve as a standalone SVG.
    Plot {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        fnr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// User-level bootstrap A/B comparison of two datasets.
    Ab {
        #[arg(long)]
        arm_a: PathBuf,
        #[arg(long)]
        arm_b: PathBuf,
        /// Comma-separated: accept_rate,cancel_rate,symbols_completed,generations
        #[arg(long, default_value = "accept_rate,cancel_rate,symbols_completed,generations")]
        metrics: String,
        #[arg(long, default_value_t = 2000)]
        resamples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve gating decisions over newline-delimited JSON.
    Serve {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Benchmark a running gate service.
    Bench {
        #[arg(long)]
        addr: String,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, default_value_t = 10_000)]
        requests: usize,
        #[arg(long, default_value_t = 8)]
        concurrency: usize,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    match s {
        "trigger" => Ok(Stage::Trigger),
        "filter" => Ok(Stage::Filter),
        other => Err(format!("task must be trigger or filter, got {other}")),
    }
}

fn parse_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err("grid must be start:end:step".to_string());
    }
    let start: f64 = parts[0].parse().map_err(|_| "bad grid start")?;
    let end: f64 = parts[1].parse().map_err(|_| "bad grid end")?;
    let step: f64 = parts[2].parse().map_err(|_| "bad grid step")?;
    if step <= 0.0 || end < start {
        return Err("grid needs step > 0 and end >= start".to_string());
    }
    let mut grid = Vec::new();
    let mut g = start;
    while g <= end + 1e-9 {
        grid.push(g);
        g += step;
    }
    Ok(grid)
}

fn load_dir(dir: &Path) -> Result<(Dataset, DatasetManifest, FeatureSchema)> {
    let dataset = load_dataset(dir)?;
    let manifest = read_manifest(&dir.join("manifest.json"))?;
    let schema = read_schema(&dir.join("schema.json"))?;
    Ok((dataset, manifest, schema))
}

fn load_models(args: &ModelArgs) -> Result<(Ensemble, Ensemble)> {
    let trigger = Ensemble::load(&args.trigger_model)?;
    let filter = Ensemble::load(&args.filter_model)?;
    if trigger.stage != Stage::Trigger {
        return Err(Error::InvalidConfig(format!(
            "{} is not a trigger-stage model",
            args.trigger_model.display()
        )));
    }
    if filter.stage != Stage::Filter {
        return Err(Error::InvalidConfig(format!(
            "{} is not a filter-stage model",
            args.filter_model.display()
        )));
    }
    Ok((trigger, filter))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CGATE_LOG", "off")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error:{}: {err}", err.code());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed_override = cli.seed;
    match cli.command {
        Command::Gen {
            config,
            out,
            policy,
            trigger_model,
            emit_config,
        } => {
            let mut world = match config {
                Some(path) => read_world_config(&path)?,
                None => default_world(seed_override.unwrap_or(0)),
            };
            if let Some(seed) = seed_override {
                world.seed = seed;
            }
            if let Some(path) = emit_config {
                write_world_config(&path, &world)?;
            }
            let (output, provenance) = match policy {
                None => (generate(&world)?, Provenance::GatesOff),
                Some(policy_path) => {
                    let policy_file = read_policy(&policy_path)?;
                    let model;
                    let source = match trigger_model {
                        Some(path) => {
                            model = Ensemble::load(&path)?;
                            TriggerScoreSource::Model(&model)
                        }
                        None => TriggerScoreSource::GroundTruth,
                    };
                    let output = generate_closed_loop(&world, &policy_file.policy, &source)?;
                    let desc = format!(
                        "trigger_threshold={},filter_threshold={}",
                        policy_file.policy.trigger_threshold, policy_file.policy.filter_threshold
                    );
                    (output, Provenance::Policy(desc))
                }
            };
            write_world(&out, &output, Split::Train, provenance)?;
            println!(
                "wrote {} events, {} generations to {}",
                output.dataset.events.len(),
                output.dataset.generations.len(),
                out.display()
            );
        }
        Command::Split {
            data,
            out_train,
            out_test,
            test_fraction,
        } => {
            let (dataset, manifest, schema) = load_dir(&data.data)?;
            let seed = seed_override.unwrap_or(0);
            let (train_ds, test_ds) = split_by_user(&dataset, test_fraction, seed)?;
            for (dir, ds, split) in [
                (&out_train, &train_ds, Split::Train),
                (&out_test, &test_ds, Split::Test),
            ] {
                std::fs::create_dir_all(dir)?;
                cgate_core::events::write_events(&dir.join("events.jsonl"), &ds.events)?;
                cgate_core::events::write_generations(
                    &dir.join("generations.jsonl"),
                    &ds.generations,
                )?;
                cgate_core::features::write_schema(&dir.join("schema.json"), &schema)?;
                let m = cgate_core::events::dataset_stats(
                    ds,
                    &schema,
                    split,
                    manifest.collected_under.clone(),
                );
                cgate_core::events::write_manifest(&dir.join("manifest.json"), &m)?;
            }
            println!(
                "split {} users into {}/{} (seed {seed})",
                dataset.user_ids().len(),
                train_ds.user_ids().len(),
                test_ds.user_ids().len()
            );
        }
        Command::Validate { data } => {
            let (dataset, manifest, schema) = load_dir(&data.data)?;
            let report = validate_dataset(&dataset, &manifest, &schema);
            if report.is_valid() {
                println!("ok: {} events, {} generations", dataset.events.len(), dataset.generations.len());
            } else {
                for v in &report.violations {
                    println!("{v}");
                }
                return Err(Error::InvalidConfig(format!(
                    "{} violation(s)",
                    report.violations.len()
                )));
            }
        }
        Command::Train {
            data,
            task,
            out,
            trees,
            max_depth,
            learning_rate,
            folds,
            no_auto_class_weight,
        } => {
            let (dataset, manifest, schema) = load_dir(&data.data)?;
            let config = TrainConfig {
                trees,
                max_depth,
                learning_rate,
                seed: seed_override.unwrap_or(0),
                ..TrainConfig::default()
            };
            let (model, trace) = fit_gbdt(
                &dataset,
                &schema,
                task,
                config,
                folds,
                manifest.split,
                !no_auto_class_weight,
            )?;
            model.save(&out)?;
            println!(
                "trained {task:?} model: {} trees, loss {:.4} -> {:.4}, saved to {}",
                model.trees.len(),
                trace.round_losses.first().unwrap_or(&f64::NAN),
                trace.round_losses.last().unwrap_or(&f64::NAN),
                out.display()
            );
        }
        Command::TrainHybrid {
            data,
            task,
            out,
            epochs,
            batch_size,
            step_size,
            folds,
        } => {
            let (dataset, manifest, schema) = load_dir(&data.data)?;
            let config = HybridConfig {
                epochs,
                batch_size,
                step_size,
                seed: seed_override.unwrap_or(0),
                ..HybridConfig::default()
            };
            let (model, reports) =
                fit_hybrid(&dataset, &schema, task, &config, folds, manifest.split)?;
            model.save(&out)?;
            for r in &reports {
                println!(
                    "epoch {}: train_loss {:.4} validation_auc {}",
                    r.epoch,
                    r.train_loss,
                    r.validation_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
                );
            }
            println!("saved hybrid {task:?} model to {}", out.display());
        }
        Command::Calibrate {
            data,
            models,
            fnr,
            grid_pct,
            block_non_compilable,
            out,
        } => {
            let (dataset, _, _) = load_dir(&data.data)?;
            let (trigger, filter) = load_models(&models)?;
            let scored = score_dataset(&dataset, &trigger, &filter)?;
            let rules = HardRules { block_non_compilable };
            let sweep = sweep_joint(&scored, fnr, &[grid_pct], rules)?;
            let point = &sweep.points[0];
            let policy = point.policy.ok_or_else(|| {
                Error::Infeasible(format!(
                    "grid point {grid_pct}% needs more than the FNR budget {fnr}"
                ))
            })?;
            write_policy(
                &out,
                &PolicyFile {
                    policy,
                    provenance: Some(PolicyProvenance {
                        trigger_model_hash: file_hash(&models.trigger_model)?,
                        filter_model_hash: file_hash(&models.filter_model)?,
                        target_fnr: fnr,
                        grid_pct,
                    }),
                },
            )?;
            println!(
                "policy at grid {grid_pct}%: trigger {} filter {} realized FNR {:.4} -> {}",
                policy.trigger_threshold,
                policy.filter_threshold,
                point.realized_fnr,
                out.display()
            );
        }
        Command::Sweep {
            data,
            models,
            fnr,
            grid,
            block_non_compilable,
            out,
        } => {
            let (dataset, _, _) = load_dir(&data.data)?;
            let (trigger, filter) = load_models(&models)?;
            let scored = score_dataset(&dataset, &trigger, &filter)?;
            let grid = grid.unwrap_or_else(default_grid);
            let rules = HardRules { block_non_compilable };
            let sweep = sweep_joint(&scored, fnr, &grid, rules)?;
            write_sweep(&out, &sweep)?;
            let feasible = sweep.points.iter().filter(|p| p.feasible).count();
            println!(
                "sweep at FNR {fnr}: {feasible}/{} feasible points -> {}",
                sweep.points.len(),
                out.display()
            );
        }
        Command::Replay {
            data,
            models,
            policy,
            out,
        } => {
            let (dataset, manifest, _) = load_dir(&data.data)?;
            check_replay_provenance(&manifest)?;
            let (trigger, filter) = load_models(&models)?;
            let scored = score_dataset(&dataset, &trigger, &filter)?;
            let policy = read_policy(&policy)?.policy;
            let report = replay(&scored, &policy);
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(&path, format!("{json}\n"))?;
            }
            println!("{json}");
        }
        Command::Curve {
            data,
            models,
            fnr,
            grid,
            block_non_compilable,
            sweep,
            out,
        } => {
            let (dataset, manifest, _) = load_dir(&data.data)?;
            check_replay_provenance(&manifest)?;
            let (trigger, filter) = load_models(&models)?;
            let scored = score_dataset(&dataset, &trigger, &filter)?;
            let sweep_result = match sweep {
                Some(path) => read_sweep(&path)?,
                None => {
                    let grid = grid.unwrap_or_else(default_grid);
                    sweep_joint(&scored, fnr, &grid, HardRules { block_non_compilable })?
                }
            };
            let curve_result = curve(&scored, &sweep_result)?;
            export_curve(&curve_result, &out)?;
            println!(
                "curve at FNR {}: {} points -> {}",
                curve_result.target_fnr,
                curve_result.points.len(),
                out.display()
            );
        }
        Command::Plot { curve, fnr, out } => {
            let parsed = parse_curve(&curve, fnr)?;
            plot_curve(&parsed, &out)?;
            println!("plotted {} points -> {}", parsed.points.len(), out.display());
        }
        Command::Ab {
            arm_a,
            arm_b,
            metrics,
            resamples,
            out,
        } => {
            let (a, _, _) = load_dir(&arm_a)?;
            let (b, _, _) = load_dir(&arm_b)?;
            let metrics: Vec<AbMetric> = metrics
                .split(',')
                .map(|m| AbMetric::parse(m.trim()))
                .collect::<Result<_>>()?;
            let report = ab_compare(&a, &b, &metrics, resamples, seed_override.unwrap_or(0))?;
            write_ab_report(&out, &report)?;
            for r in &report.results {
                println!(
                    "{}: {:+.1}% [{:+.1}%, {:+.1}%]{}",
                    r.metric,
                    r.point_delta_pct,
                    r.ci_low_pct,
                    r.ci_high_pct,
                    if r.significant { "" } else { " (not significant)" }
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Serve {
            models,
            policy,
            bind,
        } => {
            let (trigger, filter) = load_models(&models)?;
            let policy = read_policy(&policy)?.policy;
            let service = Arc::new(GateService::new(trigger, filter, policy)?);
            let server = Server::spawn(service, bind.as_str())?;
            println!("serving on {}", server.addr);
            // run until killed
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::Bench {
            addr,
            models,
            requests,
            concurrency,
        } => {
            let (trigger, filter) = load_models(&models)?;
            let service = GateService::new(trigger, filter, ThresholdPolicy::pass_all())?;
            let report = bench(
                &addr,
                requests,
                concurrency,
                seed_override.unwrap_or(0),
                &service,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
