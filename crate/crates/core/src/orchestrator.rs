//! Round loop of the over-the-air protocol.
//!
//! Each round broadcasts `theta`, runs local MAML steps on a random subset
//! of devices, folds the model differences into the error-feedback
//! memories, scales and co-phases the sparse updates, passes them through
//! the compressed fading channel, and applies the server estimate.
//!
//! All randomness is keyed by `(trial seed, purpose, round, device)`, so the
//! records do not depend on how device work is scheduled across threads.

use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::airlink::{
    estimate, global_update, make_compression, noise_var_for_snr, sample_channel, transmit_mac, ChannelRound,
    CompressionKind, CompressionMatrix, EstimatorKind, FadingModel, TransmitPacket,
};
use crate::error::{Error, Result};
use crate::meta_learner::{ensure_finite, ideal_aggregate, local_rounds, LocalConfig};
use crate::metrics_bounds;
use crate::rng::{stream_rng, trial_seed, SimRng, Stream};
use crate::sparse_feedback::{memory_fold, phase_precompensate, power_scale, MemoryState, PowerPolicy, SparsifyMode};
use crate::task_model::{
    sample_dataset, sample_device, ClosedFormObjective, Dataset, DeviceDistribution, InputCovariance, Matrix,
    MetaOracle, SampledObjective, TaskEnvironment, TaskFamily, Vector,
};

/// Learning-rate schedule for the meta step `eta` and the inner step `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant { eta: f64, alpha: f64 },
    /// `eta_t = xi / (a + t)`, `alpha_t = min(xi_inner / (a_inner + t), 1 / L_G)`.
    Adaptive { xi: f64, a: f64, xi_inner: f64, a_inner: f64 },
}

impl Schedule {
    fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Constant { eta, alpha } => {
                if !(eta.is_finite() && eta >= 0.0) {
                    return Err(Error::invalid("eta", "must be finite and >= 0"));
                }
                if !(alpha.is_finite() && alpha >= 0.0) {
                    return Err(Error::invalid("alpha", "must be finite and >= 0"));
                }
            }
            Schedule::Adaptive { xi, a, xi_inner, a_inner } => {
                if !(xi > 0.0 && xi_inner > 0.0 && xi.is_finite() && xi_inner.is_finite()) {
                    return Err(Error::invalid("xi", "adaptive schedule needs positive xi and xi_inner"));
                }
                if !(a > 1.0 && a_inner > 1.0 && a.is_finite() && a_inner.is_finite()) {
                    return Err(Error::invalid("a", "adaptive schedule needs a > 1 and a_inner > 1"));
                }
            }
        }
        Ok(())
    }
}

/// `(eta_t, alpha_t)` at round `t`.
pub fn lr_schedule(t: usize, schedule: &Schedule, l_g: f64) -> (f64, f64) {
    match *schedule {
        Schedule::Constant { eta, alpha } => (eta, alpha),
        Schedule::Adaptive { xi, a, xi_inner, a_inner } => {
            let t = t as f64;
            let cap = if l_g > 0.0 { 1.0 / l_g } else { f64::INFINITY };
            (xi / (a + t), (xi_inner / (a_inner + t)).min(cap))
        }
    }
}

/// A scalar broadcast to every entry, or an explicit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Fill(f64),
    Explicit(Vec<f64>),
}

impl VectorSpec {
    pub fn resolve(&self, dim: usize, name: &'static str) -> Result<Vector> {
        match self {
            VectorSpec::Fill(v) => Ok(Vector::from_element(dim, *v)),
            VectorSpec::Explicit(v) if v.len() == dim => Ok(Vector::from_column_slice(v)),
            VectorSpec::Explicit(v) => Err(Error::invalid(name, format!("has {} entries, expected {dim}", v.len()))),
        }
    }
}

/// Input covariance: a scalar for `s * I`, a list for a diagonal, or a nested list for a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub family: TaskFamily,
    pub dim: usize,
    pub center: VectorSpec,
    pub task_spread: f64,
    pub input_cov: CovarianceSpec,
    pub label_noise: f64,
}

impl EnvironmentConfig {
    pub fn build(&self) -> Result<TaskEnvironment> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        let cov = match &self.input_cov {
            CovarianceSpec::Isotropic(s) => InputCovariance::isotropic(d, *s)?,
            CovarianceSpec::Diagonal(v) if v.len() == d => InputCovariance::diagonal(v)?,
            CovarianceSpec::Full(rows) if rows.len() == d && rows.iter().all(|r| r.len() == d) => {
                InputCovariance::full(Matrix::from_fn(d, d, |i, j| rows[i][j]))?
            }
            _ => return Err(Error::invalid("input_cov", format!("shape does not match dim = {d}"))),
        };
        TaskEnvironment::new(
            self.family,
            self.center.resolve(d, "center")?,
            self.task_spread,
            cov,
            self.label_noise,
        )
    }
}

fn one() -> usize {
    1
}
fn default_rho_cap() -> f64 {
    1e12
}
fn default_loss_clip() -> f64 {
    10.0
}
fn default_test_devices() -> usize {
    100
}
fn default_oracle_samples() -> usize {
    2000
}

/// Full description of an experiment. Physical quantities carry their unit in the field name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    #[serde(default = "one")]
    pub trials: usize,
    pub n_devices: usize,
    /// Fraction `r` of devices active per round; `r * n_devices` must be an integer.
    pub participation: f64,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub first_order: bool,
    pub samples_per_device: usize,
    pub train_samples: usize,
    pub schedule: Schedule,
    pub sparsify_k: usize,
    pub sparsify_mode: SparsifyMode,
    pub channel_uses: usize,
    pub compression: CompressionKind,
    pub power_per_use: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_power_per_use: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_var: Option<f64>,
    pub fading: FadingModel,
    pub estimator: EstimatorKind,
    pub environment: EnvironmentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_init: Option<VectorSpec>,
    #[serde(default = "default_rho_cap")]
    pub rho_cap: f64,
    /// Clip level `b` of the per-task loss used by the generalization bound.
    #[serde(default = "default_loss_clip")]
    pub loss_clip: f64,
    /// Held-out devices for Monte Carlo meta-test loss (families without a closed form).
    #[serde(default = "default_test_devices")]
    pub test_devices: usize,
    #[serde(default = "default_oracle_samples")]
    pub oracle_samples: usize,
    #[serde(default)]
    pub compare_ideal: bool,
}

impl ExperimentConfig {
    /// Quadratic defaults sized for convergence studies.
    pub fn default_convergence() -> Self {
        Self {
            master_seed: 2024,
            trials: 10,
            n_devices: 9,
            participation: 1.0 / 3.0,
            rounds: 200,
            local_steps: 5,
            batch_size: 32,
            first_order: false,
            samples_per_device: 128,
            train_samples: 32,
            schedule: Schedule::Constant { eta: 0.001, alpha: 0.4 },
            sparsify_k: 1,
            sparsify_mode: SparsifyMode::TopK,
            channel_uses: 8,
            compression: CompressionKind::PartialDft,
            power_per_use: 1.0,
            device_power_per_use: None,
            snr_db: Some(19.0),
            noise_var: None,
            fading: FadingModel::RayleighCn01,
            estimator: EstimatorKind::Lmmse,
            environment: EnvironmentConfig {
                family: TaskFamily::Quadratic,
                dim: 20,
                center: VectorSpec::Fill(1.0),
                task_spread: 0.25,
                input_cov: CovarianceSpec::Isotropic(1.0),
                label_noise: 0.25,
            },
            theta_init: None,
            rho_cap: default_rho_cap(),
            loss_clip: default_loss_clip(),
            test_devices: default_test_devices(),
            oracle_samples: default_oracle_samples(),
            compare_ideal: false,
        }
    }

    /// Quadratic defaults sized for generalization studies: one local step, all devices active.
    pub fn default_generalization() -> Self {
        Self {
            local_steps: 1,
            participation: 1.0,
            ..Self::default_convergence()
        }
    }

    pub fn dim(&self) -> usize {
        self.environment.dim
    }

    pub fn active_per_round(&self) -> Result<usize> {
        active_count(self.n_devices, self.participation)
    }

    pub fn validation_samples(&self) -> usize {
        self.samples_per_device.saturating_sub(self.train_samples)
    }

    /// Noise variance per real component, from `noise_var` or `snr_db`.
    pub fn resolved_noise_var(&self) -> Result<f64> {
        match (self.noise_var, self.snr_db) {
            (Some(v), None) => {
                if v.is_finite() && v >= 0.0 {
                    Ok(v)
                } else {
                    Err(Error::invalid("noise_var", "must be finite and >= 0"))
                }
            }
            (None, Some(db)) => {
                if db.is_finite() {
                    Ok(noise_var_for_snr(db, self.active_per_round()?, self.power_per_use, self.fading))
                } else {
                    Err(Error::invalid("snr_db", "must be finite"))
                }
            }
            (Some(_), Some(_)) => Err(Error::invalid("snr_db", "set either snr_db or noise_var, not both")),
            (None, None) => Err(Error::invalid("snr_db", "one of snr_db or noise_var is required")),
        }
    }

    pub fn power_policy(&self) -> Result<PowerPolicy> {
        let p = match &self.device_power_per_use {
            Some(v) if v.len() == self.n_devices => PowerPolicy {
                budgets: v.clone(),
                channel_uses: self.channel_uses,
                rho_cap: self.rho_cap,
            },
            Some(v) => {
                return Err(Error::invalid(
                    "device_power_per_use",
                    format!("has {} entries for {} devices", v.len(), self.n_devices),
                ))
            }
            None => PowerPolicy::uniform(self.n_devices, self.power_per_use, self.channel_uses, self.rho_cap)?,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks every structural constraint. Step-size conditions are reported by
    /// [`metrics_bounds::step_condition_warnings`] instead.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.n_devices == 0 {
            return Err(Error::invalid("n_devices", "must be at least 1"));
        }
        self.active_per_round()?;
        if self.local_steps == 0 {
            return Err(Error::invalid("local_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.train_samples < self.batch_size {
            return Err(Error::invalid("train_samples", "must be at least batch_size"));
        }
        if self.validation_samples() < 2 * self.batch_size {
            return Err(Error::invalid(
                "samples_per_device",
                "validation split must hold two disjoint mini-batches",
            ));
        }
        if self.sparsify_k == 0 || self.sparsify_k > d {
            return Err(Error::invalid("sparsify_k", format!("must satisfy 1 <= k <= d = {d}")));
        }
        if self.channel_uses == 0 || self.channel_uses > d {
            return Err(Error::invalid("channel_uses", format!("must satisfy 1 <= M <= d = {d}")));
        }
        if self.compression == CompressionKind::Identity && self.channel_uses != d {
            return Err(Error::invalid("compression", "identity compression requires channel_uses = dim"));
        }
        if self.estimator == EstimatorKind::MatchedIdentity && self.channel_uses != d {
            return Err(Error::invalid("estimator", "matched_identity requires channel_uses = dim"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("trials", "must be at least 1"));
        }
        if !(self.loss_clip.is_finite() && self.loss_clip > 0.0) {
            return Err(Error::invalid("loss_clip", "must be finite and > 0"));
        }
        if self.test_devices == 0 {
            return Err(Error::invalid("test_devices", "must be at least 1"));
        }
        self.schedule.validate()?;
        self.power_policy()?;
        self.resolved_noise_var()?;
        let env = self.environment.build()?;
        if let Some(t) = &self.theta_init {
            t.resolve(d, "theta_init")?;
        }
        let (_, alpha0) = lr_schedule(0, &self.schedule, smoothness(&env));
        LocalConfig {
            alpha: alpha0,
            local_steps: self.local_steps,
            batch_size: self.batch_size,
            first_order: self.first_order,
        }
        .validate(Some(smoothness(&env)))?;
        Ok(())
    }
}

/// `L_G`: largest eigenvalue of the input covariance, a quarter of it for the logistic loss.
pub fn smoothness(env: &TaskEnvironment) -> f64 {
    match env.family {
        TaskFamily::Quadratic => env.input_cov.lambda_max(),
        TaskFamily::Logistic => env.input_cov.lambda_max() / 4.0,
    }
}

fn active_count(n: usize, r: f64) -> Result<usize> {
    let rn = r * n as f64;
    let rounded = rn.round();
    if !(r > 0.0 && r <= 1.0) || (rn - rounded).abs() > 1e-9 * rn.max(1.0) || rounded < 1.0 {
        return Err(Error::invalid(
            "participation",
            format!("r * n = {rn} must be a positive integer with 0 < r <= 1"),
        ));
    }
    Ok(rounded as usize)
}

/// Uniform subset of `r * n` device ids, sorted ascending.
pub fn sample_active_set(n: usize, r: f64, rng: &mut SimRng) -> Result<Vec<usize>> {
    let k = active_count(n, r)?;
    let mut ids = index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Server-side aggregation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Sparsify, scale, compress and transmit over the fading channel.
    Air,
    /// Noiseless average of the model differences.
    Ideal,
}

/// Deliberate corruption of the memory update, used as a negative control.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryFault {
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub theta: Vector,
    pub memories: Vec<MemoryState>,
}

fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Per-round metrics. Model metrics are evaluated at the round's starting point `theta^(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub eta: f64,
    pub alpha: f64,
    pub grad_norm_sq: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    /// Power scale; NaN on the ideal pipeline (serialized as null).
    #[serde(deserialize_with = "nan_if_null")]
    pub rho: f64,
    pub v_model: f64,
    pub v_measured: f64,
    pub n_active: usize,
    pub sum_h_sq: f64,
    pub min_g_norm_sq: f64,
    pub max_g_norm_sq: f64,
    pub max_mem_norm_sq: f64,
    pub max_tx_power: f64,
    pub pseudo_inverse: bool,
    pub theta: Vec<f64>,
}

/// Full per-round internals, kept when tracing is enabled.
#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub active: Vec<usize>,
    pub deltas: Vec<Vector>,
    pub updates: Vec<Vector>,
    /// Local iterates `theta_i^(t,q)` per active device.
    pub iterates: Vec<Vec<Vector>>,
    pub gains_abs: Vec<f64>,
    pub rho: f64,
    pub eta: f64,
    pub mu_h: f64,
    /// Co-phased superposition `sum_i |h_i| sqrt(rho) / eta * g_i`.
    pub signal: Vector,
    /// `x_hat - signal`.
    pub estimation_error: Vector,
    pub tx_powers: Vec<f64>,
    pub memories_after: Vec<Vector>,
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub state: SimState,
    pub record: RoundRecord,
    pub channel: Option<ChannelRound>,
    pub trace: Option<RoundTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub round: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub trial: usize,
    pub seed: u64,
    pub pipeline: Pipeline,
    pub records: Vec<RoundRecord>,
    pub final_theta: Vector,
    pub final_memories: Vec<Vector>,
    /// Replay log: realised channel of every round (air pipeline only).
    pub channels: Vec<ChannelRound>,
    pub traces: Vec<RoundTrace>,
    pub abort: Option<AbortInfo>,
}

impl Trajectory {
    pub fn thetas(&self) -> Vec<Vector> {
        let mut out: Vec<Vector> = self.records.iter().map(|r| Vector::from_column_slice(&r.theta)).collect();
        out.push(self.final_theta.clone());
        out
    }
}

/// Everything fixed for one trial: devices, datasets, power policy and oracle.
pub struct Simulator {
    cfg: ExperimentConfig,
    trial: usize,
    seed: u64,
    env: Arc<TaskEnvironment>,
    devices: Vec<DeviceDistribution>,
    datasets: Vec<Dataset>,
    policy: PowerPolicy,
    noise_var: f64,
    n_active: usize,
    l_g: f64,
    oracle: Box<dyn MetaOracle>,
    record_trace: bool,
    fault: Option<MemoryFault>,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator")
            .field("trial", &self.trial)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl Simulator {
    pub fn new(cfg: &ExperimentConfig, trial: usize) -> Result<Self> {
        cfg.validate()?;
        let seed = trial_seed(cfg.master_seed, trial);
        let env = Arc::new(cfg.environment.build()?);
        let devices: Vec<DeviceDistribution> = (0..cfg.n_devices)
            .map(|i| sample_device(&env, &mut stream_rng(seed, Stream::DeviceTask, i as u64, 0)))
            .collect();
        let datasets = devices
            .iter()
            .enumerate()
            .map(|(i, dev)| {
                sample_dataset(
                    dev,
                    cfg.samples_per_device,
                    cfg.train_samples,
                    cfg.validation_samples(),
                    &mut stream_rng(seed, Stream::DeviceData, i as u64, 0),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        make_compression(
            cfg.compression,
            cfg.channel_uses,
            cfg.dim(),
            &mut stream_rng(seed, Stream::Compression, 0, 0),
        )?;
        let oracle: Box<dyn MetaOracle> = match env.family {
            TaskFamily::Quadratic => Box::new(ClosedFormObjective::new(&devices)?),
            TaskFamily::Logistic => Box::new(SampledObjective::new(
                &devices,
                cfg.oracle_samples,
                &mut stream_rng(seed, Stream::Oracle, 0, 0),
            )?),
        };
        Ok(Self {
            trial,
            seed,
            l_g: smoothness(&env),
            policy: cfg.power_policy()?,
            noise_var: cfg.resolved_noise_var()?,
            n_active: cfg.active_per_round()?,
            cfg: cfg.clone(),
            env,
            devices,
            datasets,
            oracle,
            record_trace: false,
            fault: None,
        })
    }

    pub fn with_trace(mut self, on: bool) -> Self {
        self.record_trace = on;
        self
    }

    #[doc(hidden)]
    pub fn with_memory_fault(mut self, fault: MemoryFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn env(&self) -> &Arc<TaskEnvironment> {
        &self.env
    }

    pub fn devices(&self) -> &[DeviceDistribution] {
        &self.devices
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    /// Compression matrix of round `t`; a fresh row selection every round.
    pub fn compression_at(&self, t: usize) -> Result<CompressionMatrix> {
        make_compression(
            self.cfg.compression,
            self.cfg.channel_uses,
            self.cfg.dim(),
            &mut stream_rng(self.seed, Stream::Compression, t as u64, 0),
        )
    }

    pub fn oracle(&self) -> &dyn MetaOracle {
        self.oracle.as_ref()
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn n_active(&self) -> usize {
        self.n_active
    }

    pub fn l_g(&self) -> f64 {
        self.l_g
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trial(&self) -> usize {
        self.trial
    }

    pub fn policy(&self) -> &PowerPolicy {
        &self.policy
    }

    pub fn initial_state(&self) -> Result<SimState> {
        let d = self.cfg.dim();
        let theta = match &self.cfg.theta_init {
            Some(spec) => spec.resolve(d, "theta_init")?,
            None => Vector::zeros(d),
        };
        Ok(SimState {
            theta,
            memories: vec![MemoryState::zeros(d); self.cfg.n_devices],
        })
    }

    pub fn schedule_at(&self, t: usize) -> (f64, f64) {
        lr_schedule(t, &self.cfg.schedule, self.l_g)
    }

    pub fn local_config(&self, alpha: f64) -> LocalConfig {
        LocalConfig {
            alpha,
            local_steps: self.cfg.local_steps,
            batch_size: self.cfg.batch_size,
            first_order: self.cfg.first_order,
        }
    }

    pub fn active_set(&self, t: usize) -> Result<Vec<usize>> {
        sample_active_set(
            self.cfg.n_devices,
            self.cfg.participation,
            &mut stream_rng(self.seed, Stream::ActiveSet, t as u64, 0),
        )
    }

    pub fn sample_round_channel(&self, t: usize, active: &[usize]) -> Result<ChannelRound> {
        sample_channel(
            active,
            self.cfg.fading,
            self.noise_var,
            self.cfg.channel_uses,
            &mut stream_rng(self.seed, Stream::Channel, t as u64, 0),
        )
    }

    fn base_record(&self, t: usize, theta: &Vector, eta: f64, alpha: f64) -> Result<RoundRecord> {
        let grad_norm_sq = self.oracle.grad(theta, alpha).norm_squared();
        let train_loss = metrics_bounds::meta_training_loss(&self.env, theta, &self.datasets, alpha)?;
        let test_loss = match self.env.family {
            TaskFamily::Quadratic => Some(self.env.expected_meta_test_loss(theta, alpha, self.cfg.train_samples)?),
            TaskFamily::Logistic => None,
        };
        Ok(RoundRecord {
            round: t,
            eta,
            alpha,
            grad_norm_sq,
            train_loss,
            test_loss,
            rho: f64::NAN,
            v_model: 0.0,
            v_measured: 0.0,
            n_active: 0,
            sum_h_sq: 0.0,
            min_g_norm_sq: 0.0,
            max_g_norm_sq: 0.0,
            max_mem_norm_sq: 0.0,
            max_tx_power: 0.0,
            pseudo_inverse: false,
            theta: theta.iter().copied().collect(),
        })
    }

    /// Executes round `t`. A supplied `replay` channel replaces the sampled one.
    pub fn run_round(
        &self,
        state: &SimState,
        t: usize,
        pipeline: Pipeline,
        replay: Option<&ChannelRound>,
    ) -> Result<RoundOutput> {
        ensure_finite(&state.theta, "theta")?;
        let (eta, alpha) = self.schedule_at(t);
        let mut record = self.base_record(t, &state.theta, eta, alpha)?;
        let lcfg = self.local_config(alpha);
        let mut active = self.active_set(t)?;

        let channel = match pipeline {
            Pipeline::Air => {
                let ch = match replay {
                    Some(ch) => ch.clone(),
                    None => self.sample_round_channel(t, &active)?,
                };
                active.retain(|id| ch.gains.get(id).is_some_and(|h| h.norm() > 0.0));
                Some(ch)
            }
            Pipeline::Ideal => None,
        };
        if active.is_empty() {
            return Err(Error::Aborted {
                round: t,
                reason: "every active device dropped out".into(),
            });
        }

        let k = self.cfg.sparsify_k;
        let mode = self.cfg.sparsify_mode;
        let seed = self.seed;
        let locals = active
            .par_iter()
            .map(|&id| {
                let mut rng = stream_rng(seed, Stream::LocalSgd, t as u64, id as u64);
                let out = local_rounds(&self.env, &state.theta, &self.datasets[id], &lcfg, eta, &mut rng)?;
                let folded = match pipeline {
                    Pipeline::Air => {
                        let mut srng = stream_rng(seed, Stream::Sparsify, t as u64, id as u64);
                        Some(memory_fold(&state.memories[id], &out.delta, k, mode, &mut srng)?)
                    }
                    Pipeline::Ideal => None,
                };
                Ok((out, folded))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut next = state.clone();
        record.n_active = active.len();

        let (theta_next, trace) = match (pipeline, channel.as_ref()) {
            (Pipeline::Ideal, _) | (_, None) => {
                let deltas: Vec<Vector> = locals.iter().map(|(o, _)| o.delta.clone()).collect();
                let theta = ideal_aggregate(&state.theta, &deltas)?;
                let trace = self.record_trace.then(|| RoundTrace {
                    active: active.clone(),
                    iterates: locals.iter().map(|(o, _)| o.iterates.clone()).collect(),
                    updates: deltas.clone(),
                    deltas,
                    gains_abs: vec![1.0; active.len()],
                    rho: f64::NAN,
                    eta,
                    mu_h: 1.0,
                    signal: Vector::zeros(self.cfg.dim()),
                    estimation_error: Vector::zeros(self.cfg.dim()),
                    tx_powers: Vec::new(),
                    memories_after: Vec::new(),
                });
                (theta, trace)
            }
            (Pipeline::Air, Some(ch)) => {
                let a = self.compression_at(t)?;
                self.air_step(state, &active, &locals, ch, &a, eta, &mut next, &mut record)?
            },
        };

        if theta_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Aborted {
                round: t,
                reason: "non-finite parameter after global update".into(),
            });
        }
        next.theta = theta_next;
        record.max_mem_norm_sq = next.memories.iter().map(|m| m.m.norm_squared()).fold(0.0, f64::max);
        Ok(RoundOutput {
            state: next,
            record,
            channel,
            trace,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn air_step(
        &self,
        state: &SimState,
        active: &[usize],
        locals: &[(crate::meta_learner::LocalOutcome, Option<(crate::sparse_feedback::SparseUpdate, MemoryState)>)],
        ch: &ChannelRound,
        a: &CompressionMatrix,
        eta: f64,
        next: &mut SimState,
        record: &mut RoundRecord,
    ) -> Result<(Vector, Option<RoundTrace>)> {
        let d = self.cfg.dim();
        let updates: Vec<&Vector> = locals
            .iter()
            .map(|(_, f)| &f.as_ref().expect("air pipeline folds memories").0.g)
            .collect();
        for (pos, &id) in active.iter().enumerate() {
            let mut m = locals[pos].1.as_ref().expect("folded").1.clone();
            if let Some(fault) = self.fault {
                m.m *= fault.scale;
            }
            next.memories[id] = m;
        }

        let pairs: Vec<(usize, &Vector)> = active.iter().copied().zip(updates.iter().copied()).collect();
        let rho = power_scale(&pairs, eta, &self.policy)?;

        let mut packets = Vec::with_capacity(active.len());
        let mut signal = Vector::zeros(d);
        let mut gains_abs = Vec::with_capacity(active.len());
        let mut tx_powers = Vec::with_capacity(active.len());
        let mut sum_g_sq = 0.0;
        for (&id, g) in active.iter().zip(&updates) {
            let h: Complex64 = ch.gains[&id];
            let xt = phase_precompensate(g, rho, eta, h)?;
            let packet = TransmitPacket {
                device_id: id,
                x: a.apply(&xt)?,
            };
            tx_powers.push(packet.power_per_use());
            packets.push(packet);
            if eta != 0.0 {
                signal.axpy(h.norm() * rho.sqrt() / eta, g, 1.0);
            }
            gains_abs.push(h.norm());
            sum_g_sq += g.norm_squared();
        }
        let y = transmit_mac(&packets, ch)?;
        let sigma_h_sq = self.cfg.fading.sigma_h_sq();
        let prior = if eta == 0.0 {
            0.0
        } else {
            sigma_h_sq * rho * sum_g_sq / (eta * eta * d as f64)
        };
        let est = estimate(&y, a, prior, ch.noise_var, self.cfg.estimator)?;
        let mu_h = self.cfg.fading.mu_h();
        let theta = global_update(&state.theta, &est.x_hat, eta, rho, mu_h, active.len())?;
        let error = &est.x_hat - &signal;

        let g_norms: Vec<f64> = updates.iter().map(|g| g.norm_squared()).collect();
        record.rho = rho;
        record.v_model = est.v;
        record.v_measured = error.norm_squared() / d as f64;
        record.sum_h_sq = gains_abs.iter().map(|h| h * h).sum();
        record.min_g_norm_sq = g_norms.iter().copied().fold(f64::INFINITY, f64::min);
        record.max_g_norm_sq = g_norms.iter().copied().fold(0.0, f64::max);
        record.max_tx_power = tx_powers.iter().copied().fold(0.0, f64::max);
        record.pseudo_inverse = est.pseudo_inverse;

        let trace = self.record_trace.then(|| RoundTrace {
            active: active.to_vec(),
            deltas: locals.iter().map(|(o, _)| o.delta.clone()).collect(),
            updates: updates.iter().map(|g| (*g).clone()).collect(),
            iterates: locals.iter().map(|(o, _)| o.iterates.clone()).collect(),
            gains_abs,
            rho,
            eta,
            mu_h,
            signal,
            estimation_error: error,
            tx_powers,
            memories_after: active.iter().map(|&id| next.memories[id].m.clone()).collect(),
        });
        Ok((theta, trace))
    }

    /// Runs `rounds` rounds. A non-finite update stops the run and is reported in `abort`.
    pub fn run(&self, pipeline: Pipeline, replay: Option<&[ChannelRound]>) -> Result<Trajectory> {
        let mut state = self.initial_state()?;
        let mut traj = Trajectory {
            trial: self.trial,
            seed: self.seed,
            pipeline,
            records: Vec::with_capacity(self.cfg.rounds),
            final_theta: state.theta.clone(),
            final_memories: Vec::new(),
            channels: Vec::new(),
            traces: Vec::new(),
            abort: None,
        };
        for t in 0..self.cfg.rounds {
            let ch = match replay {
                Some(log) => Some(log.get(t).ok_or(Error::MissingInput("replay channel for round"))?),
                None => None,
            };
            match self.run_round(&state, t, pipeline, ch) {
                Ok(out) => {
                    state = out.state;
                    traj.records.push(out.record);
                    if let Some(c) = out.channel {
                        traj.channels.push(c);
                    }
                    if let Some(tr) = out.trace {
                        traj.traces.push(tr);
                    }
                }
                Err(Error::Aborted { round, reason }) => {
                    traj.abort = Some(AbortInfo { round, reason });
                    break;
                }
                Err(Error::NonFinite(what)) => {
                    traj.abort = Some(AbortInfo {
                        round: t,
                        reason: format!("non-finite {what}"),
                    });
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(a) = &traj.abort {
            log::warn!("trial {} aborted at round {}: {}", self.trial, a.round, a.reason);
        }
        traj.final_theta = state.theta;
        traj.final_memories = state.memories.into_iter().map(|m| m.m).collect();
        Ok(traj)
    }
}

/// Result of one trial: the air trajectory, the optional ideal reference and summary metrics.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trajectory: Trajectory,
    pub ideal: Option<Trajectory>,
    pub summary: metrics_bounds::TrialSummary,
}

pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialOutcome> {
    let sim = Simulator::new(cfg, trial)?;
    let trajectory = sim.run(Pipeline::Air, None)?;
    let ideal = if cfg.compare_ideal {
        Some(sim.run(Pipeline::Ideal, None)?)
    } else {
        None
    };
    let summary = metrics_bounds::summarize_trial(&sim, &trajectory, ideal.as_ref())?;
    Ok(TrialOutcome {
        trajectory,
        ideal,
        summary,
    })
}

/// All trials of an experiment, run in parallel and returned in trial order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<TrialOutcome>> {
    cfg.validate()?;
    (0..cfg.trials).into_par_iter().map(|k| run_trial(cfg, k)).collect()
}
