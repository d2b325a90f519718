//! Subcommand implementations.

use std::fs;
use std::path::Path;
use std::time::Instant;

use airmeta_core::metrics_bounds::trial_test_loss;
use airmeta_core::sweep::{run_point_trial, PointTrial};
use airmeta_core::{
    evaluate_bounds, meta_training_loss, run_suite, AggregateRow, BoundReport, ExperimentConfig, Pipeline,
    Simulator, SweepPoint, Trajectory, TrialBounds, TrialSummary, Vector, VerifyOptions,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::files::{self, FinalState, Manifest, Track};
use crate::{Failure, Format};

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn final_state(sim: &Simulator, traj: &Trajectory) -> Result<FinalState, Failure> {
    let (eta, alpha) = sim.schedule_at(traj.records.len());
    let theta = &traj.final_theta;
    Ok(FinalState {
        eta,
        alpha,
        grad_norm_sq: sim.oracle().grad(theta, alpha).norm_squared(),
        train_loss: meta_training_loss(sim.env(), theta, sim.datasets(), alpha).map_err(runtime)?,
        test_loss: trial_test_loss(sim, theta, alpha).map_err(runtime)?,
        theta: theta.iter().copied().collect(),
    })
}

#[derive(Debug, Serialize)]
struct TrialReport {
    summary: TrialSummary,
    bounds: Option<TrialBounds>,
    bound_error: Option<String>,
}

struct TrialRun {
    report: TrialReport,
    tracks: Vec<Track>,
    air: Trajectory,
}

fn run_one(cfg: &ExperimentConfig, trial: usize) -> Result<TrialRun, Failure> {
    let sim = Simulator::new(cfg, trial).map_err(runtime)?;
    let air = sim.run(Pipeline::Air, None).map_err(runtime)?;
    let ideal = if cfg.compare_ideal {
        Some(sim.run(Pipeline::Ideal, None).map_err(runtime)?)
    } else {
        None
    };
    let summary = airmeta_core::metrics_bounds::summarize_trial(&sim, &air, ideal.as_ref()).map_err(runtime)?;
    let (bounds, bound_error) = match evaluate_bounds(&sim, &air.records, &air.final_theta) {
        Ok(b) => (Some(b), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let mut tracks = vec![Track {
        trial,
        pipeline: Pipeline::Air,
        records: air.records.clone(),
        last: final_state(&sim, &air)?,
    }];
    if let Some(id) = &ideal {
        tracks.push(Track {
            trial,
            pipeline: Pipeline::Ideal,
            records: id.records.clone(),
            last: final_state(&sim, id)?,
        });
    }
    Ok(TrialRun {
        report: TrialReport {
            summary,
            bounds,
            bound_error,
        },
        tracks,
        air,
    })
}

#[derive(Debug, Serialize)]
struct RunSummary {
    trials: Vec<TrialReport>,
    aggregate: AggregateRow,
}

pub fn run(config: &Path, out_dir: &Path, seed: Option<u64>, format: Format) -> Result<(), Failure> {
    let cfg = files::load_experiment(config, seed)?;
    let start = Instant::now();
    for w in airmeta_core::step_condition_warnings(&cfg) {
        log::warn!("{w}");
    }
    let runs: Vec<TrialRun> = (0..cfg.trials)
        .into_par_iter()
        .map(|k| run_one(&cfg, k))
        .collect::<Result<_, _>>()?;
    create_dir(out_dir)?;

    let tracks: Vec<Track> = runs.iter().flat_map(|r| r.tracks.iter().cloned()).collect();
    let trajectory_name = match format {
        Format::Csv => {
            let snr = cfg.snr_db.unwrap_or(f64::NAN);
            files::write_trajectory_csv(&out_dir.join("trajectory.csv"), &tracks, snr)?;
            "trajectory.csv"
        }
        Format::Json => {
            files::write_trajectory_json(&out_dir.join("trajectory.json"), &tracks)?;
            "trajectory.json"
        }
    };
    let channels: Vec<(usize, &[_])> = runs.iter().map(|r| (r.air.trial, r.air.channels.as_slice())).collect();
    files::write_channels_csv(&out_dir.join("channels.csv"), &channels)?;

    let point = SweepPoint {
        axis_value: f64::NAN,
        trials: runs
            .iter()
            .map(|r| PointTrial {
                summary: r.report.summary.clone(),
                bounds: r.report.bounds.clone(),
            })
            .collect(),
    };
    let aggregate = point.aggregate();
    let aborted: Vec<String> = runs
        .iter()
        .filter_map(|r| {
            r.report
                .summary
                .aborted
                .as_ref()
                .map(|a| format!("trial {} aborted at round {}: {}", r.report.summary.trial, a.round, a.reason))
        })
        .collect();
    print_run_table(&runs);
    let summary = RunSummary {
        trials: runs.into_iter().map(|r| r.report).collect(),
        aggregate,
    };
    files::write_json(&out_dir.join("summary.json"), &summary)?;

    let seeds = summary.trials.iter().map(|t| t.summary.seed).collect();
    let mut manifest = Manifest::new("run", &cfg, cfg.master_seed, seeds);
    manifest.outputs = vec![
        trajectory_name.into(),
        "channels.csv".into(),
        "summary.json".into(),
        "manifest.json".into(),
    ];
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    files::write_json(&out_dir.join("manifest.json"), &manifest)?;

    if aborted.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(aborted.join("; ")))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "-".into())
}

fn print_run_table(runs: &[TrialRun]) {
    println!(
        "{:>5}  {:>11}  {:>11}  {:>11}  {:>11}  {:>11}",
        "trial", "conv_err", "train_loss", "test_loss", "gap", "conv_bound"
    );
    for r in runs {
        let s = &r.report.summary;
        let bound = r.report.bounds.as_ref().and_then(|b| b.convergence.as_ref()).map(|c| c.total);
        println!(
            "{:>5}  {:>11.4e}  {:>11.4e}  {:>11.4e}  {:>11.4e}  {:>11}",
            s.trial,
            s.convergence_error,
            s.final_train_loss,
            s.final_test_loss,
            s.generalization_gap,
            fmt_opt(bound)
        );
    }
}

#[derive(Debug, Serialize)]
struct PointFile<'a> {
    axis: &'a str,
    axis_value: f64,
    trials: &'a [PointTrial],
    aggregate: &'a AggregateRow,
}

pub fn sweep(config: &Path, out_dir: &Path, seed: Option<u64>, format: Format) -> Result<(), Failure> {
    let spec = files::load_sweep(config, seed)?;
    let start = Instant::now();
    create_dir(out_dir)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut outputs = Vec::new();
    for (p, &value) in spec.values.iter().enumerate() {
        let dir_name = format!("point_{p:02}");
        let dir = out_dir.join(&dir_name);
        create_dir(&dir)?;
        let result = spec.config_at(value).map_err(runtime).and_then(|cfg| {
            (0..cfg.trials)
                .into_par_iter()
                .map(|k| run_point_trial(&cfg, k, true).map_err(runtime))
                .collect::<Result<Vec<_>, _>>()
        });
        match result {
            Ok(trials) => {
                let point = SweepPoint {
                    axis_value: value,
                    trials,
                };
                let row = point.aggregate();
                let file = PointFile {
                    axis: spec.axis.name(),
                    axis_value: value,
                    trials: &point.trials,
                    aggregate: &row,
                };
                files::write_json(&dir.join("summary.json"), &file)?;
                outputs.push(format!("{dir_name}/summary.json"));
                if row.aborted > 0 {
                    failures.push(format!("{} = {value}: {} trial(s) aborted", spec.axis.name(), row.aborted));
                }
                rows.push(row);
            }
            Err(f) => {
                let msg = match &f {
                    Failure::Verify(m) | Failure::Usage(m) | Failure::Runtime(m) => m.clone(),
                };
                fs::write(dir.join("error.txt"), format!("{msg}\n")).map_err(runtime)?;
                outputs.push(format!("{dir_name}/error.txt"));
                failures.push(format!("{} = {value}: {msg}", spec.axis.name()));
            }
        }
    }

    let aggregate_name = match format {
        Format::Csv => {
            let path = out_dir.join("aggregate.csv");
            let mut w = csv::Writer::from_path(&path).map_err(runtime)?;
            for row in &rows {
                w.serialize(row).map_err(runtime)?;
            }
            w.flush().map_err(runtime)?;
            "aggregate.csv"
        }
        Format::Json => {
            files::write_json(&out_dir.join("aggregate.json"), &rows)?;
            "aggregate.json"
        }
    };
    outputs.push(aggregate_name.into());
    outputs.push("manifest.json".into());

    println!(
        "{:>12}  {:>6}  {:>11}  {:>11}  {:>11}  {:>11}",
        spec.axis.name(),
        "trials",
        "conv_err",
        "|gap|",
        "conv_bound",
        "gen_bound"
    );
    for r in &rows {
        println!(
            "{:>12}  {:>6}  {:>11.4e}  {:>11.4e}  {:>11}  {:>11}",
            r.axis_value,
            r.trials,
            r.convergence_error_mean,
            r.abs_generalization_gap_mean,
            fmt_opt(r.convergence_bound_mean),
            fmt_opt(r.generalization_bound_mean)
        );
    }

    let seeds = (0..spec.seeds)
        .map(|k| airmeta_core::trial_seed(spec.base.master_seed, k))
        .collect();
    let mut manifest = Manifest::new("sweep", &spec, spec.base.master_seed, seeds);
    manifest.outputs = outputs;
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    files::write_json(&out_dir.join("manifest.json"), &manifest)?;

    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(failures.join("; ")))
    }
}

pub fn verify(seed: Option<u64>, format: Format, memory_fault: Option<f64>) -> Result<(), Failure> {
    let mut opts = VerifyOptions::default();
    if let Some(s) = seed {
        opts.seed = s;
    }
    opts.memory_fault = memory_fault;
    let rows = run_suite(&opts);
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&rows).map_err(runtime)?),
        Format::Csv => {
            let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5);
            for r in &rows {
                println!(
                    "{:<width$}  {}  {:>7.2}s  {}",
                    r.name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.seconds,
                    r.detail
                );
            }
        }
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("failed checks: {}", failed.join(", "))))
    }
}

#[derive(Debug, Serialize)]
struct TrackBounds {
    trial: usize,
    pipeline: Pipeline,
    bounds: TrialBounds,
}

fn print_report(r: &BoundReport) {
    println!("  {} bound", r.kind);
    for t in &r.terms {
        println!("    {:<32} {:.6e}", t.name, t.value);
    }
    println!("    {:<32} {:.6e}", "total", r.total);
    if let Some(m) = r.measured {
        println!("    {:<32} {:.6e}", "measured", m);
    }
    for f in &r.flags {
        println!("    note: {f}");
    }
}

pub fn bounds(
    config: &Path,
    trajectory: &Path,
    seed: Option<u64>,
    out_dir: Option<&Path>,
    format: Format,
) -> Result<(), Failure> {
    let cfg = files::load_experiment(config, seed)?;
    let dir = trajectory.parent().unwrap_or(Path::new("."));
    let manifest_path = dir.join("manifest.json");
    let manifest = files::read_manifest(&manifest_path)?;
    let hash = files::config_hash(&cfg);
    if manifest.config_sha256 != hash {
        return Err(Failure::Usage(format!(
            "config does not match the run in {}: hash {} vs {}",
            dir.display(),
            hash,
            manifest.config_sha256
        )));
    }
    let tracks = files::read_trajectory(trajectory)?;
    let results: Vec<TrackBounds> = tracks
        .par_iter()
        .filter(|t| t.pipeline == Pipeline::Air)
        .map(|t| {
            let sim = Simulator::new(&cfg, t.trial).map_err(runtime)?;
            let theta = Vector::from_vec(t.last.theta.clone());
            let bounds = evaluate_bounds(&sim, &t.records, &theta).map_err(runtime)?;
            Ok(TrackBounds {
                trial: t.trial,
                pipeline: t.pipeline,
                bounds,
            })
        })
        .collect::<Result<_, Failure>>()?;

    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&results).map_err(runtime)?),
        Format::Csv => {
            for r in &results {
                println!("trial {}", r.trial);
                match &r.bounds.convergence {
                    Some(c) => print_report(c),
                    None => println!("  convergence bound unavailable"),
                }
                let g = &r.bounds.generalization;
                println!(
                    "  generalization bound {:.6e}{}",
                    g.value,
                    if g.infinite { " (infinite)" } else { "" }
                );
                for w in &r.bounds.warnings {
                    println!("  warning: {w}");
                }
            }
        }
    }
    let out = out_dir.unwrap_or(dir);
    create_dir(out)?;
    files::write_json(&out.join("bounds.json"), &results)
}
