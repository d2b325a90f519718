//! One-axis parameter sweeps with aggregated per-point statistics.
//!
//! Every point reuses the base master seed, so trial `k` sees the same device
//! tasks, datasets and fading draws at every axis value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics_bounds::{evaluate_bounds, mean_stderr, summarize_trial, TrialBounds, TrialSummary};
use crate::orchestrator::{ExperimentConfig, Pipeline, Schedule, Simulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SnrDb,
    MOverD,
    KOverD,
    NumDevices,
    Heterogeneity,
    LearningRate,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::MOverD => "m_over_d",
            SweepAxis::KOverD => "k_over_d",
            SweepAxis::NumDevices => "num_devices",
            SweepAxis::Heterogeneity => "heterogeneity",
            SweepAxis::LearningRate => "learning_rate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: usize,
    pub base: ExperimentConfig,
}

fn integer_of(v: f64, name: &'static str) -> Result<usize> {
    let r = v.round();
    if (v - r).abs() > 1e-9 || r < 1.0 {
        return Err(Error::invalid(name, format!("{v} does not give a positive integer")));
    }
    Ok(r as usize)
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("values", "must not be empty"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("values", "must be finite"));
        }
        let inc = self.values.windows(2).all(|w| w[1] > w[0]);
        let dec = self.values.windows(2).all(|w| w[1] < w[0]);
        if !(inc || dec) {
            return Err(Error::invalid("values", "must be strictly monotone"));
        }
        if self.seeds == 0 {
            return Err(Error::invalid("seeds", "must be at least 1"));
        }
        for &v in &self.values {
            self.config_at(v)?.validate()?;
        }
        Ok(())
    }

    /// Base config with the axis set to `value` and `trials = seeds`.
    pub fn config_at(&self, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        cfg.trials = self.seeds;
        let d = cfg.dim() as f64;
        match self.axis {
            SweepAxis::SnrDb => {
                cfg.snr_db = Some(value);
                cfg.noise_var = None;
            }
            SweepAxis::MOverD => cfg.channel_uses = integer_of(value * d, "m_over_d")?,
            SweepAxis::KOverD => cfg.sparsify_k = integer_of(value * d, "k_over_d")?,
            SweepAxis::NumDevices => cfg.n_devices = integer_of(value, "num_devices")?,
            SweepAxis::Heterogeneity => cfg.environment.task_spread = value,
            SweepAxis::LearningRate => match &mut cfg.schedule {
                Schedule::Constant { eta, .. } => *eta = value,
                Schedule::Adaptive { .. } => {
                    return Err(Error::invalid("axis", "learning_rate sweeps need a constant schedule"))
                }
            },
        }
        Ok(cfg)
    }
}

/// Per-trial outcome at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointTrial {
    pub summary: TrialSummary,
    pub bounds: Option<TrialBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis_value: f64,
    pub trials: Vec<PointTrial>,
}

/// Aggregate row: mean and standard error across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub axis_value: f64,
    pub trials: usize,
    pub aborted: usize,
    pub convergence_error_mean: f64,
    pub convergence_error_stderr: Option<f64>,
    pub generalization_gap_mean: f64,
    pub generalization_gap_stderr: Option<f64>,
    pub abs_generalization_gap_mean: f64,
    pub abs_generalization_gap_stderr: Option<f64>,
    pub convergence_bound_mean: Option<f64>,
    pub generalization_bound_mean: Option<f64>,
}

impl SweepPoint {
    pub fn aggregate(&self) -> AggregateRow {
        let conv: Vec<f64> = self.trials.iter().map(|t| t.summary.convergence_error).collect();
        let gap: Vec<f64> = self.trials.iter().map(|t| t.summary.generalization_gap).collect();
        let abs_gap: Vec<f64> = gap.iter().map(|g| g.abs()).collect();
        let (cm, cs) = mean_stderr(&conv);
        let (gm, gs) = mean_stderr(&gap);
        let (am, as_) = mean_stderr(&abs_gap);
        let bounds: Vec<&TrialBounds> = self.trials.iter().filter_map(|t| t.bounds.as_ref()).collect();
        let conv_bounds: Vec<f64> = bounds.iter().filter_map(|b| b.convergence.as_ref().map(|r| r.total)).collect();
        let gen_bounds: Vec<f64> = bounds.iter().map(|b| b.generalization.value).collect();
        let mean_opt = |v: &[f64]| (!v.is_empty()).then(|| mean_stderr(v).0);
        AggregateRow {
            axis_value: self.axis_value,
            trials: self.trials.len(),
            aborted: self.trials.iter().filter(|t| t.summary.aborted.is_some()).count(),
            convergence_error_mean: cm,
            convergence_error_stderr: cs,
            generalization_gap_mean: gm,
            generalization_gap_stderr: gs,
            abs_generalization_gap_mean: am,
            abs_generalization_gap_stderr: as_,
            convergence_bound_mean: mean_opt(&conv_bounds),
            generalization_bound_mean: mean_opt(&gen_bounds),
        }
    }
}

/// Runs one trial of `cfg` on the air pipeline and summarizes it.
pub fn run_point_trial(cfg: &ExperimentConfig, trial: usize, with_bounds: bool) -> Result<PointTrial> {
    let sim = Simulator::new(cfg, trial)?;
    let traj = sim.run(Pipeline::Air, None)?;
    let ideal = if cfg.compare_ideal {
        Some(sim.run(Pipeline::Ideal, None)?)
    } else {
        None
    };
    let summary = summarize_trial(&sim, &traj, ideal.as_ref())?;
    let bounds = if with_bounds {
        Some(evaluate_bounds(&sim, &traj.records, &traj.final_theta)?)
    } else {
        None
    };
    Ok(PointTrial { summary, bounds })
}

/// Runs every `(value, seed)` pair in parallel; results are ordered by axis value then trial.
pub fn run_sweep(spec: &SweepSpec, with_bounds: bool) -> Result<Vec<SweepPoint>> {
    spec.validate()?;
    let configs = spec
        .values
        .iter()
        .map(|&v| spec.config_at(v))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|p| (0..spec.seeds).map(move |k| (p, k)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(p, k)| run_point_trial(&configs[p], k, with_bounds))
        .collect::<Result<Vec<_>>>()?;
    let mut it = results.into_iter();
    Ok(spec
        .values
        .iter()
        .map(|&v| SweepPoint {
            axis_value: v,
            trials: it.by_ref().take(spec.seeds).collect(),
        })
        .collect())
}
