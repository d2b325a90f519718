//! Empirical metrics and closed-form bound evaluators.
//!
//! Metrics cover the stationary convergence error, meta-training and
//! meta-test losses and the meta-generalization gap. The evaluators compute
//! the right-hand sides of the constant-rate and adaptive-rate convergence
//! bounds and of the mutual-information generalization bound, term by term,
//! from assumption constants that are either analytic (quadratic family) or
//! measured.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::SymmetricEigen;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::orchestrator::{smoothness, ExperimentConfig, RoundRecord, Schedule, Simulator, Trajectory};
use crate::rng::{stream_rng, SimRng, Stream};
use crate::task_model::{
    sample_dataset, sample_device, Dataset, DeviceDistribution, Matrix, TaskEnvironment, TaskFamily, Vector,
};

/// Meta-training loss for one device: validation loss after one
/// full-batch step on the training split.
pub fn per_task_training_loss(env: &TaskEnvironment, theta: &Vector, ds: &Dataset, alpha: f64) -> Result<f64> {
    let g = env.batch_grad(theta, ds.train())?;
    let phi = theta - g * alpha;
    env.batch_loss(&phi, ds.validation())
}

/// Average over devices of the per-task training loss.
pub fn meta_training_loss(env: &TaskEnvironment, theta: &Vector, datasets: &[Dataset], alpha: f64) -> Result<f64> {
    if datasets.is_empty() {
        return Err(Error::invalid("datasets", "need at least one device"));
    }
    let mut total = 0.0;
    for ds in datasets {
        total += per_task_training_loss(env, theta, ds, alpha)?;
    }
    Ok(total / datasets.len() as f64)
}

/// Same quantity accumulated point by point with explicit per-device weights.
pub fn meta_training_loss_by_points(
    env: &TaskEnvironment,
    theta: &Vector,
    datasets: &[Dataset],
    alpha: f64,
) -> Result<f64> {
    if datasets.is_empty() {
        return Err(Error::invalid("datasets", "need at least one device"));
    }
    let n = datasets.len() as f64;
    let mut total = 0.0;
    for ds in datasets {
        if ds.train().is_empty() || ds.validation().is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut step = Vector::zeros(theta.len());
        for z in ds.train() {
            step += env.grad(theta, z)?;
        }
        let phi = theta - step * (alpha / ds.train().len() as f64);
        let w = 1.0 / (n * ds.validation().len() as f64);
        for z in ds.validation() {
            total += w * env.loss(&phi, z)?;
        }
    }
    Ok(total)
}

/// `(1/T) sum_t |grad F(theta^(t))|^2` over the recorded rounds; zero for an empty run.
pub fn stationary_convergence_error(records: &[RoundRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.grad_norm_sq).sum::<f64>() / records.len() as f64
}

/// Recomputes the convergence error from parameter snapshots with the oracle.
pub fn stationary_convergence_error_from(
    thetas: &[Vector],
    alphas: &[f64],
    oracle: &dyn crate::task_model::MetaOracle,
) -> f64 {
    if thetas.is_empty() {
        return 0.0;
    }
    thetas
        .iter()
        .zip(alphas)
        .map(|(th, a)| oracle.grad(th, *a).norm_squared())
        .sum::<f64>()
        / thetas.len() as f64
}

/// Monte Carlo meta-test loss: fresh devices, fresh training sets of size `m_tr`
/// for adaptation and `m_eval` fresh points for evaluation.
pub fn meta_test_loss(
    theta: &Vector,
    env: &Arc<TaskEnvironment>,
    alpha: f64,
    n_test: usize,
    m_tr: usize,
    m_eval: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    if n_test == 0 {
        return Err(Error::invalid("n_test", "must be at least 1"));
    }
    let mut total = 0.0;
    for _ in 0..n_test {
        let dev = sample_device(env, rng);
        let ds = sample_dataset(&dev, m_tr + m_eval, m_tr, m_eval, rng)?;
        total += per_task_training_loss(env, theta, &ds, alpha)?;
    }
    Ok(total / n_test as f64)
}

/// Mean of per-trial gaps `test - train`, with a standard error when at least two trials exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationEstimate {
    pub mean: f64,
    pub stderr: Option<f64>,
    pub trials: usize,
    /// Set when fewer than two trials were available.
    pub flagged: bool,
}

pub fn meta_generalization_error(gaps: &[f64]) -> GeneralizationEstimate {
    let (mean, stderr) = mean_stderr(gaps);
    GeneralizationEstimate {
        mean,
        stderr,
        trials: gaps.len(),
        flagged: gaps.len() < 2,
    }
}

pub fn mean_stderr(xs: &[f64]) -> (f64, Option<f64>) {
    if xs.is_empty() {
        return (f64::NAN, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub value: f64,
    pub provenance: Provenance,
}

impl Constant {
    pub fn analytic(value: f64) -> Self {
        Self {
            value,
            provenance: Provenance::Analytic,
        }
    }
    pub fn empirical(value: f64) -> Self {
        Self {
            value,
            provenance: Provenance::Empirical,
        }
    }
}

/// Smoothness, variance, second-moment and heterogeneity constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    pub l_g: Constant,
    pub l_h: Constant,
    pub g_sq: Constant,
    pub sigma_g_sq: Constant,
    pub sigma_h_sq: Constant,
    pub gamma_g_sq: Constant,
    pub gamma_h_sq: Constant,
}

/// `E|x x' - s I|_2^2` for `x ~ N(0, s I_d)`.
pub fn isotropic_hessian_variance(d: usize, s: f64) -> f64 {
    let df = d as f64;
    let f2 = ChiSquared::new(df + 2.0).expect("positive degrees of freedom").cdf(2.0);
    let f4 = ChiSquared::new(df + 4.0).expect("positive degrees of freedom").cdf(2.0);
    s * s * (2.0 * df + (df - 1.0).powi(2) + 2.0 * df * f2 - df * (df + 2.0) * f4)
}

/// Per-sample gradient variance `E|grad l - grad f|^2` at offset `u = phi - w` (quadratic, Gaussian inputs).
pub fn quadratic_gradient_variance(env: &TaskEnvironment, u: &Vector) -> f64 {
    let sigma = env.input_cov.matrix();
    let su = sigma * u;
    let tr = sigma.trace();
    su.norm_squared() + tr * u.dot(&su) + env.label_noise * tr
}

/// Per-sample gradient second moment `E|grad l|^2` at offset `u` (quadratic, Gaussian inputs).
pub fn quadratic_gradient_second_moment(env: &TaskEnvironment, u: &Vector) -> f64 {
    let sigma = env.input_cov.matrix();
    let su = sigma * u;
    let tr = sigma.trace();
    2.0 * su.norm_squared() + tr * u.dot(&su) + env.label_noise * tr
}

fn spectral_norm_sym(m: &Matrix) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.amax()
}

/// Empirical `E|x x' - Sigma|_2^2` over `samples` inputs.
pub fn empirical_hessian_variance(env: &TaskEnvironment, samples: usize, rng: &mut SimRng) -> f64 {
    let sigma = env.input_cov.matrix();
    let mut acc = 0.0;
    for _ in 0..samples {
        let x = env.input_cov.sample(rng);
        acc += spectral_norm_sym(&(&x * x.transpose() - sigma)).powi(2);
    }
    acc / samples as f64
}

/// Probe offsets: every probe and its population-adapted point, per device.
fn probe_points(devices: &[DeviceDistribution], probes: &[Vector], alpha: f64) -> Result<Vec<(usize, Vector)>> {
    let mut pts = Vec::with_capacity(2 * probes.len() * devices.len());
    for th in probes {
        for (i, dev) in devices.iter().enumerate() {
            pts.push((i, th.clone()));
            let adapted = th - dev.population_grad(th)? * alpha;
            pts.push((i, adapted));
        }
    }
    Ok(pts)
}

/// Assumption constants for the given devices, maximised over `probes`.
///
/// The quadratic family uses closed forms; the logistic family uses `samples`
/// fresh points per probe and device.
pub fn estimate_constants(
    env: &TaskEnvironment,
    devices: &[DeviceDistribution],
    probes: &[Vector],
    alpha: f64,
    samples: usize,
    rng: &mut SimRng,
) -> Result<AssumptionConstants> {
    if probes.is_empty() {
        return Err(Error::invalid("probes", "need at least one probe point"));
    }
    if devices.is_empty() {
        return Err(Error::invalid("devices", "need at least one device"));
    }
    match env.family {
        TaskFamily::Quadratic => quadratic_constants(env, devices, probes, alpha, samples, rng),
        TaskFamily::Logistic => logistic_constants(env, devices, probes, alpha, samples, rng),
    }
}

fn quadratic_constants(
    env: &TaskEnvironment,
    devices: &[DeviceDistribution],
    probes: &[Vector],
    alpha: f64,
    samples: usize,
    rng: &mut SimRng,
) -> Result<AssumptionConstants> {
    let sigma = env.input_cov.matrix();
    let mut sigma_g_sq: f64 = 0.0;
    let mut g_sq: f64 = 0.0;
    for (i, phi) in probe_points(devices, probes, alpha)? {
        let u = phi - &devices[i].task;
        sigma_g_sq = sigma_g_sq.max(quadratic_gradient_variance(env, &u));
        g_sq = g_sq.max(quadratic_gradient_second_moment(env, &u));
    }
    let mut mean_task = Vector::zeros(env.dim());
    for dev in devices {
        mean_task += &dev.task;
    }
    mean_task /= devices.len() as f64;
    let gamma_g_sq = devices
        .iter()
        .map(|dev| (sigma * (&dev.task - &mean_task)).norm_squared())
        .fold(0.0, f64::max);
    let sigma_h_sq = match env.input_cov.isotropic_scale() {
        Some(s) => Constant::analytic(isotropic_hessian_variance(env.dim(), s)),
        None => Constant::empirical(empirical_hessian_variance(env, samples.max(1), rng)),
    };
    Ok(AssumptionConstants {
        l_g: Constant::analytic(env.input_cov.lambda_max()),
        l_h: Constant::analytic(0.0),
        g_sq: Constant::analytic(g_sq),
        sigma_g_sq: Constant::analytic(sigma_g_sq),
        sigma_h_sq,
        gamma_g_sq: Constant::analytic(gamma_g_sq),
        gamma_h_sq: Constant::analytic(0.0),
    })
}

fn logistic_constants(
    env: &TaskEnvironment,
    devices: &[DeviceDistribution],
    probes: &[Vector],
    alpha: f64,
    samples: usize,
    rng: &mut SimRng,
) -> Result<AssumptionConstants> {
    let samples = samples.max(2);
    let d = env.dim();
    let mut sigma_g_sq: f64 = 0.0;
    let mut g_sq: f64 = 0.0;
    let mut sigma_h_sq: f64 = 0.0;
    let mut gamma_g_sq: f64 = 0.0;
    let mut gamma_h_sq: f64 = 0.0;
    let mut cube_norm = 0.0;
    let mut cube_count = 0usize;
    let pools: Vec<Vec<crate::task_model::DataPoint>> = devices
        .iter()
        .map(|dev| (0..samples).map(|_| dev.sample_point(rng)).collect())
        .collect();
    for pool in &pools {
        for z in pool {
            cube_norm += z.x.norm().powi(3);
            cube_count += 1;
        }
    }
    for th in probes {
        let mut grads = Vec::with_capacity(devices.len());
        let mut hessians = Vec::with_capacity(devices.len());
        for pool in &pools {
            let g_theta = env.batch_grad(th, pool)?;
            for phi in [th.clone(), th - &g_theta * alpha] {
                let mean = env.batch_grad(&phi, pool)?;
                let mean_h = env.batch_hessian(&phi, pool)?;
                let mut var = 0.0;
                let mut second = 0.0;
                let mut hvar = 0.0;
                for z in pool {
                    let g = env.grad(&phi, z)?;
                    var += (&g - &mean).norm_squared();
                    second += g.norm_squared();
                    hvar += spectral_norm_sym(&(env.hessian(&phi, z)? - &mean_h)).powi(2);
                }
                let k = pool.len() as f64;
                sigma_g_sq = sigma_g_sq.max(var / k);
                g_sq = g_sq.max(second / k);
                sigma_h_sq = sigma_h_sq.max(hvar / k);
            }
            grads.push(g_theta);
            hessians.push(env.batch_hessian(th, pool)?);
        }
        let n = devices.len() as f64;
        let mut gbar = Vector::zeros(d);
        let mut hbar = Matrix::zeros(d, d);
        for (g, h) in grads.iter().zip(&hessians) {
            gbar += g;
            hbar += h;
        }
        gbar /= n;
        hbar /= n;
        for (g, h) in grads.iter().zip(&hessians) {
            gamma_g_sq = gamma_g_sq.max((g - &gbar).norm_squared());
            gamma_h_sq = gamma_h_sq.max(spectral_norm_sym(&(h - &hbar)).powi(2));
        }
    }
    let max_sigma_dd = 1.0 / (6.0 * 3f64.sqrt());
    Ok(AssumptionConstants {
        l_g: Constant::analytic(env.input_cov.lambda_max() / 4.0),
        l_h: Constant::empirical(max_sigma_dd * cube_norm / cube_count as f64),
        g_sq: Constant::empirical(g_sq),
        sigma_g_sq: Constant::empirical(sigma_g_sq),
        sigma_h_sq: Constant::empirical(sigma_h_sq),
        gamma_g_sq: Constant::empirical(gamma_g_sq),
        gamma_h_sq: Constant::empirical(gamma_h_sq),
    })
}

/// Constants of the meta-objective derived from the assumption constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub l_f: f64,
    pub sigma_f_sq: f64,
    pub gamma_f_sq: f64,
    pub lambda: f64,
    pub c: f64,
    pub big_lambda: f64,
    /// `(1 + alpha L_G)^2 + alpha^2 sigma_H^2 / m_B`.
    pub grad_factor: f64,
}

/// Midpoint `c = lambda / (2 (1 - lambda))` of the admissible interval.
pub fn default_c(lambda: f64) -> f64 {
    lambda / (2.0 * (1.0 - lambda))
}

/// `(1 - lambda)(1 + 1/c) / (1 - (1 - lambda)(1 + c))`, zero for lossless sparsification.
pub fn contraction_factor(lambda: f64, c: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid("lambda", "k/d must lie in (0, 1]"));
    }
    if lambda == 1.0 {
        return Ok(0.0);
    }
    if !(c > 0.0 && c < lambda / (1.0 - lambda)) {
        return Err(Error::invalid("c", format!("must lie in (0, {})", lambda / (1.0 - lambda))));
    }
    Ok((1.0 - lambda) * (1.0 + 1.0 / c) / (1.0 - (1.0 - lambda) * (1.0 + c)))
}

pub fn derived_constants(
    ac: &AssumptionConstants,
    alpha: f64,
    batch_size: usize,
    k: usize,
    d: usize,
    c: Option<f64>,
) -> Result<DerivedConstants> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    if k == 0 || k > d {
        return Err(Error::invalid("k", "must satisfy 1 <= k <= d"));
    }
    let l_g = ac.l_g.value;
    if l_g > 0.0 && alpha > 1.0 / l_g * (1.0 + 1e-12) {
        return Err(Error::invalid("alpha", "must not exceed 1/L_G"));
    }
    let m_b = batch_size as f64;
    let g_sq = ac.g_sq.value;
    let sh = ac.sigma_h_sq.value;
    let a2 = alpha * alpha;
    let l_f = 4.0 * l_g + alpha * ac.l_h.value * g_sq.sqrt();
    let sigma_f_sq = 12.0 * g_sq * sh * a2 / (4.0 * m_b)
        + 12.0 * ac.sigma_g_sq.value * ((1.0 + (alpha * l_g).powi(2)) / m_b) * (1.0 + sh * a2 / (4.0 * m_b));
    let gamma_f_sq = 3.0 * g_sq * a2 * ac.gamma_h_sq.value + 192.0 * ac.gamma_g_sq.value;
    let lambda = k as f64 / d as f64;
    let c = if lambda == 1.0 {
        c.unwrap_or(f64::INFINITY)
    } else {
        c.unwrap_or_else(|| default_c(lambda))
    };
    let big_lambda = contraction_factor(lambda, c)?;
    Ok(DerivedConstants {
        l_f,
        sigma_f_sq,
        gamma_f_sq,
        lambda,
        c,
        big_lambda,
        grad_factor: (1.0 + alpha * l_g).powi(2) + a2 * sh / m_b,
    })
}

/// Intermediate bounds used by the invariant checks.
pub mod lemmas {
    use super::{AssumptionConstants, DerivedConstants};

    /// Squared bias of the meta-gradient estimate: `4 alpha^2 L_G^2 sigma_G^2 / m_B`.
    pub fn bias_sq(ac: &AssumptionConstants, alpha: f64, batch_size: usize) -> f64 {
        4.0 * alpha * alpha * ac.l_g.value.powi(2) * ac.sigma_g_sq.value / batch_size as f64
    }

    /// Second moment of the meta-gradient estimate: `2 ((1 + alpha L_G)^2 + alpha^2 sigma_H^2 / m_B) G^2`.
    pub fn estimate_second_moment(ac: &AssumptionConstants, alpha: f64, batch_size: usize) -> f64 {
        let f = (1.0 + alpha * ac.l_g.value).powi(2) + alpha * alpha * ac.sigma_h_sq.value / batch_size as f64;
        2.0 * f * ac.g_sq.value
    }

    /// Local drift: `40 Q^2 eta^2 (sigma_F^2 + gamma_F^2) + 40 Q^2 eta^2 |grad F|^2`.
    pub fn local_drift(dc: &DerivedConstants, local_steps: usize, eta: f64, grad_norm_sq: f64) -> f64 {
        let q2e2 = (local_steps as f64 * eta).powi(2);
        40.0 * q2e2 * (dc.sigma_f_sq + dc.gamma_f_sq) + 40.0 * q2e2 * grad_norm_sq
    }

    /// Memory norm: `2 eta^2 Lambda Q^2 ((1 + alpha L_G)^2 + alpha^2 sigma_H^2 / m_B) G^2`.
    pub fn memory_norm_sq(dc: &DerivedConstants, ac: &AssumptionConstants, eta: f64, local_steps: usize) -> f64 {
        2.0 * eta * eta * dc.big_lambda * (local_steps as f64).powi(2) * dc.grad_factor * ac.g_sq.value
    }

    /// Lower bound on the power scale: `1/rho <= 4 Q^2 G^2 (Lambda + 1) (...) / (M P_min)`.
    pub fn inverse_rho(dc: &DerivedConstants, ac: &AssumptionConstants, local_steps: usize, m: usize, p_min: f64) -> f64 {
        4.0 * (local_steps as f64).powi(2) * ac.g_sq.value * (dc.big_lambda + 1.0) * dc.grad_factor
            / (m as f64 * p_min)
    }
}

/// Step-size condition for the constant-rate bound, with `x = eta Q L_F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCondition {
    pub satisfied: bool,
    pub eta_max: f64,
    pub x: f64,
}

/// Largest `x` with `60 x^2 + 160 x^3 + 4 x <= 1/8`.
pub fn step_condition_x_max() -> f64 {
    let f = |x: f64| 60.0 * x * x + 160.0 * x.powi(3) + 4.0 * x - 0.125;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub fn step_condition(eta: f64, local_steps: usize, l_f: f64) -> StepCondition {
    let q = local_steps as f64;
    let eta_max = (1.0 / (10.0 * q * l_f)).min(step_condition_x_max() / (q * l_f));
    let x = eta * q * l_f;
    StepCondition {
        satisfied: eta > 0.0 && eta <= 1.0 / (10.0 * q * l_f) && 60.0 * x * x + 160.0 * x.powi(3) + 4.0 * x <= 0.125,
        eta_max,
        x,
    }
}

/// Human-readable warnings when the configured rates violate the bound preconditions.
/// Smoothness is taken with `L_H = 0`; the logistic family therefore gets a lower estimate of `L_F`.
pub fn step_condition_warnings(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    let Ok(env) = cfg.environment.build() else {
        return out;
    };
    let l_g = smoothness(&env);
    let l_f = 4.0 * l_g;
    let (eta0, alpha0) = crate::orchestrator::lr_schedule(0, &cfg.schedule, l_g);
    if l_g > 0.0 && alpha0 > 1.0 / l_g {
        out.push(format!("alpha = {alpha0} exceeds 1/L_G = {}", 1.0 / l_g));
    }
    let sc = step_condition(eta0, cfg.local_steps, l_f);
    if !sc.satisfied {
        out.push(format!(
            "eta = {eta0} violates the constant-rate step condition (eta <= {:.6} for Q = {}, L_F = {l_f})",
            sc.eta_max, cfg.local_steps
        ));
    }
    if let Schedule::Adaptive { a, .. } = cfg.schedule {
        let lambda = cfg.sparsify_k as f64 / cfg.dim() as f64;
        if lambda < 1.0 && a * lambda <= 4.0 * cfg.local_steps as f64 {
            out.push(format!(
                "adaptive bound requires a * k/d > 4Q (a = {a}, k/d = {lambda}, Q = {})",
                cfg.local_steps
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: String,
    pub terms: Vec<BoundTerm>,
    pub total: f64,
    /// Measured left-hand side, when known.
    pub measured: Option<f64>,
    pub inputs: BTreeMap<String, f64>,
    pub flags: Vec<String>,
}

impl BoundReport {
    fn new(kind: &str, terms: Vec<(&str, f64)>, inputs: BTreeMap<String, f64>) -> Self {
        let terms: Vec<BoundTerm> = terms
            .into_iter()
            .map(|(n, v)| BoundTerm {
                name: n.to_string(),
                value: v,
            })
            .collect();
        let total = terms.iter().map(|t| t.value).sum();
        Self {
            kind: kind.to_string(),
            terms,
            total,
            measured: None,
            inputs,
            flags: Vec::new(),
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

/// Run-level inputs shared by the convergence bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceInputs {
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub participation: f64,
    pub n_devices: usize,
    pub channel_uses: usize,
    pub dim: usize,
    pub p_min: f64,
    /// Per-round model estimation-error variances.
    pub v: Vec<f64>,
    pub sigma_h_sq: f64,
    pub mu_h: f64,
    pub f0: f64,
    pub f_star: f64,
}

impl ConvergenceInputs {
    fn check(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::MissingInput("at least one round"));
        }
        if self.v.is_empty() || self.v.iter().any(|v| !v.is_finite()) {
            return Err(Error::MissingInput("estimation-error variance series"));
        }
        if !(self.f0.is_finite() && self.f_star.is_finite()) {
            return Err(Error::MissingInput("F(theta_0) and F*"));
        }
        if self.p_min.is_nan() || self.p_min <= 0.0 {
            return Err(Error::invalid("p_min", "must be > 0"));
        }
        Ok(())
    }

    fn estimation_factor(&self, v: f64) -> f64 {
        let rn = self.participation * self.n_devices as f64;
        let fading = 2.0 * self.sigma_h_sq / (self.mu_h * self.mu_h) - 2.0;
        self.dim as f64 / (rn * rn * self.channel_uses as f64 * self.p_min) * v + fading.max(0.0)
    }

    fn echo(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("rounds".into(), self.rounds as f64);
        m.insert("local_steps".into(), self.local_steps as f64);
        m.insert("batch_size".into(), self.batch_size as f64);
        m.insert("participation".into(), self.participation);
        m.insert("n_devices".into(), self.n_devices as f64);
        m.insert("channel_uses".into(), self.channel_uses as f64);
        m.insert("dim".into(), self.dim as f64);
        m.insert("p_min".into(), self.p_min);
        m.insert("sigma_h_sq".into(), self.sigma_h_sq);
        m.insert("mu_h".into(), self.mu_h);
        m.insert("f0".into(), self.f0);
        m.insert("f_star".into(), self.f_star);
        m
    }
}

/// Constant-rate bound: `C0/(eta T) + eta (C_n + C_v) + eta^2 (C_F + C_Lambda) + C_alpha`.
pub fn eval_convergence_bound_constant(
    dc: &DerivedConstants,
    ac: &AssumptionConstants,
    alpha: f64,
    eta: f64,
    inp: &ConvergenceInputs,
) -> Result<BoundReport> {
    inp.check()?;
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::invalid("eta", "must be > 0"));
    }
    let q = inp.local_steps as f64;
    let t = inp.rounds as f64;
    let r = inp.participation;
    let m_b = inp.batch_size as f64;
    let l_f = dc.l_f;
    let g_sq = ac.g_sq.value;
    let noise = dc.sigma_f_sq + dc.gamma_f_sq;
    let mean_v = inp.v.iter().sum::<f64>() / inp.v.len() as f64;

    let c0 = 8.0 * (inp.f0 - inp.f_star).max(0.0) / q;
    let c_alpha = 48.0 * alpha * alpha * ac.l_g.value.powi(2) * ac.sigma_g_sq.value / m_b;
    let c_lambda = 32.0 * q * q * l_f * l_f * dc.big_lambda / (r * r) * dc.grad_factor * g_sq;
    let c_v = 16.0 * l_f * q * g_sq * (dc.big_lambda + 1.0) * dc.grad_factor * inp.estimation_factor(mean_v);
    let c_n = 32.0 * q * l_f * noise;
    let c_f = (480.0 * q * q * l_f * l_f + 1280.0 * q.powi(3) * l_f * l_f) * noise;

    let mut inputs = inp.echo();
    inputs.insert("eta".into(), eta);
    inputs.insert("alpha".into(), alpha);
    inputs.insert("mean_v".into(), mean_v);
    for (k, v) in [
        ("C0", c0),
        ("C_alpha", c_alpha),
        ("C_Lambda", c_lambda),
        ("C_v", c_v),
        ("C_n", c_n),
        ("C_F", c_f),
    ] {
        inputs.insert(k.into(), v);
    }
    let mut report = BoundReport::new(
        "constant_rate",
        vec![
            ("initialization", c0 / (eta * t)),
            ("outer_sgd_heterogeneity", eta * c_n),
            ("estimation", eta * c_v),
            ("outer_sgd_heterogeneity_fast", eta * eta * c_f),
            ("sparsification", eta * eta * c_lambda),
            ("inner_sgd", c_alpha),
        ],
        inputs,
    );
    if !step_condition(eta, inp.local_steps, l_f).satisfied {
        report.flags.push("step size violates the constant-rate condition".into());
    }
    Ok(report)
}

/// Adaptive-rate bound `C_ada / (xi ln((T + a - 1)/a))` with `C` at its floor.
#[allow(clippy::too_many_arguments)]
pub fn eval_convergence_bound_adaptive(
    dc: &DerivedConstants,
    ac: &AssumptionConstants,
    xi: f64,
    a: f64,
    xi_inner: f64,
    a_inner: f64,
    inp: &ConvergenceInputs,
) -> Result<BoundReport> {
    inp.check()?;
    if !(a > 1.0 && a_inner > 1.0 && xi > 0.0 && xi_inner >= 0.0) {
        return Err(Error::invalid("a", "adaptive bound needs a, a_inner > 1 and xi > 0"));
    }
    let q = inp.local_steps as f64;
    let lambda = dc.lambda;
    if a * lambda <= 4.0 * q {
        return Err(Error::invalid("a", format!("requires a * lambda > 4Q, got {} <= {}", a * lambda, 4.0 * q)));
    }
    let l_g = ac.l_g.value;
    if l_g.is_nan() || l_g <= 0.0 {
        return Err(Error::invalid("L_G", "must be > 0 for the adaptive bound"));
    }
    let t = inp.rounds as f64;
    let log_term = ((t + a - 1.0) / a).ln();
    if log_term.is_nan() || log_term <= 0.0 {
        return Err(Error::invalid("rounds", "adaptive bound needs T >= 2"));
    }
    let r = inp.participation;
    let m_b = inp.batch_size as f64;
    let l_f = dc.l_f;
    let g_sq = ac.g_sq.value;
    let noise = dc.sigma_f_sq + dc.gamma_f_sq;
    let c = 4.0 * a * lambda * (1.0 - lambda * lambda) / (a * lambda - 4.0 * q);
    let hess = 1.0 + ac.sigma_h_sq.value / (l_g * l_g * m_b);
    let max_v = inp.v.iter().copied().fold(0.0, f64::max);

    let init = 8.0 * (inp.f0 - inp.f_star).max(0.0) / q;
    let inner = 48.0 * l_g * ac.sigma_g_sq.value / m_b * xi_inner * xi_inner / (a_inner - 1.0);
    let sparse = 64.0 * q * q * l_f * l_f * g_sq * c / (r * r * lambda * lambda) * hess * xi.powi(3) / (a - 1.0);
    let est = 4.0 * l_f * q * g_sq * hess * (c / (lambda * lambda) + 2.0) * xi * xi / (a - 1.0)
        * inp.estimation_factor(max_v);
    let outer_fast = (480.0 * q * q * l_f * l_f + 1280.0 * q.powi(3) * l_f * l_f) * noise * xi.powi(3)
        / ((a - 1.0) * (a - 1.0));
    let outer = 32.0 * q * l_f * xi * xi / (a - 1.0) * noise;

    let scale = 1.0 / (xi * log_term);
    let mut inputs = inp.echo();
    for (k, v) in [
        ("xi", xi),
        ("a", a),
        ("xi_inner", xi_inner),
        ("a_inner", a_inner),
        ("C", c),
        ("max_v", max_v),
    ] {
        inputs.insert(k.into(), v);
    }
    inputs.insert(
        "C_ada".into(),
        init + inner + sparse + est + outer_fast + outer,
    );
    Ok(BoundReport::new(
        "adaptive_rate",
        vec![
            ("initialization", init * scale),
            ("inner_sgd", inner * scale),
            ("sparsification", sparse * scale),
            ("estimation", est * scale),
            ("outer_sgd_heterogeneity_fast", outer_fast * scale),
            ("outer_sgd_heterogeneity", outer * scale),
        ],
        inputs,
    ))
}

/// Inputs of the mutual-information generalization bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationInputs {
    pub dim: usize,
    pub n_devices: usize,
    pub n_active: usize,
    pub channel_uses: usize,
    pub p_max: f64,
    /// Sub-Gaussian proxy of the clipped per-task loss, `b^2 / 4`.
    pub sigma_sq: f64,
    pub c_g: f64,
    pub eps_g: f64,
    /// Per round: `(sum_i |h_i|^2, v)`.
    pub rounds: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBound {
    pub value: f64,
    /// Set when some round has zero estimation-error variance.
    pub infinite: bool,
}

/// `C_g = 4 Q^2 G^2 (Lambda + 1) ((1 + alpha L_G)^2 + alpha^2 sigma_H^2 / m_B)`.
pub fn generalization_c_g(dc: &DerivedConstants, ac: &AssumptionConstants, local_steps: usize) -> f64 {
    4.0 * (local_steps as f64).powi(2) * ac.g_sq.value * (dc.big_lambda + 1.0) * dc.grad_factor
}

/// `sqrt((d sigma^2 / n) sum_t log(1 + M P_max rn C_g sum|h|^2 / (d v eps_g)))`.
pub fn eval_generalization_bound(inp: &GeneralizationInputs) -> GeneralizationBound {
    let d = inp.dim as f64;
    let mut sum = 0.0;
    for &(sum_h_sq, v) in &inp.rounds {
        if v <= 0.0 {
            return GeneralizationBound {
                value: f64::INFINITY,
                infinite: true,
            };
        }
        let snr = inp.channel_uses as f64 * inp.p_max * inp.n_active as f64 * inp.c_g * sum_h_sq
            / (d * v * inp.eps_g);
        sum += snr.ln_1p();
    }
    GeneralizationBound {
        value: (d * inp.sigma_sq / inp.n_devices as f64 * sum).sqrt(),
        infinite: false,
    }
}

/// Floor applied to the empirical `eps_g`.
pub const EPS_G_FLOOR: f64 = 1e-12;

/// Per-trial summary metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub rounds_completed: usize,
    pub convergence_error: f64,
    pub min_grad_norm_sq: f64,
    pub final_grad_norm_sq: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub generalization_gap: f64,
    /// Largest per-round relative gap between the air and ideal parameters.
    pub ideal_max_rel_diff: Option<f64>,
    pub ideal_convergence_error: Option<f64>,
    pub aborted: Option<crate::orchestrator::AbortInfo>,
}

/// Meta-test loss at `theta`: closed form for the quadratic family, Monte Carlo otherwise.
pub fn trial_test_loss(sim: &Simulator, theta: &Vector, alpha: f64) -> Result<f64> {
    let cfg = sim.config();
    let env = sim.env();
    match env.family {
        TaskFamily::Quadratic => env.expected_meta_test_loss(theta, alpha, cfg.train_samples),
        TaskFamily::Logistic => meta_test_loss(
            theta,
            env,
            alpha,
            cfg.test_devices,
            cfg.train_samples,
            cfg.validation_samples(),
            &mut stream_rng(sim.seed(), Stream::TestDevices, 0, 0),
        ),
    }
}

pub fn summarize_trial(sim: &Simulator, traj: &Trajectory, ideal: Option<&Trajectory>) -> Result<TrialSummary> {
    let t_end = traj.records.len();
    let (_, alpha) = sim.schedule_at(t_end);
    let theta = &traj.final_theta;
    let final_train_loss = meta_training_loss(sim.env(), theta, sim.datasets(), alpha)?;
    let final_test_loss = trial_test_loss(sim, theta, alpha)?;
    let ideal_max_rel_diff = ideal.map(|id| {
        traj.thetas()
            .iter()
            .zip(id.thetas())
            .map(|(a, b)| (a - &b).norm() / b.norm().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    });
    Ok(TrialSummary {
        trial: traj.trial,
        seed: traj.seed,
        rounds_completed: t_end,
        convergence_error: stationary_convergence_error(&traj.records),
        min_grad_norm_sq: traj.records.iter().map(|r| r.grad_norm_sq).fold(f64::INFINITY, f64::min),
        final_grad_norm_sq: sim.oracle().grad(theta, alpha).norm_squared(),
        final_train_loss,
        final_test_loss,
        generalization_gap: final_test_loss - final_train_loss,
        ideal_max_rel_diff,
        ideal_convergence_error: ideal.map(|i| stationary_convergence_error(&i.records)),
        aborted: traj.abort.clone(),
    })
}

/// Bound reports for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialBounds {
    pub constants: AssumptionConstants,
    pub derived: DerivedConstants,
    pub convergence: Option<BoundReport>,
    pub generalization: GeneralizationBound,
    pub measured_convergence_error: f64,
    pub measured_min_grad_norm_sq: f64,
    pub warnings: Vec<String>,
}

/// Probe points for constant estimation: every recorded parameter plus the final one.
pub fn trajectory_probes(records: &[RoundRecord], final_theta: &Vector) -> Vec<Vector> {
    let mut probes: Vec<Vector> = records.iter().map(|r| Vector::from_column_slice(&r.theta)).collect();
    probes.push(final_theta.clone());
    probes
}

/// Estimates constants on the trajectory and evaluates every applicable bound.
pub fn evaluate_bounds(sim: &Simulator, records: &[RoundRecord], final_theta: &Vector) -> Result<TrialBounds> {
    let cfg = sim.config();
    let (eta0, alpha0) = sim.schedule_at(0);
    let probes = trajectory_probes(records, final_theta);
    let probes = if sim.env().family == TaskFamily::Logistic {
        thin(&probes, 4)
    } else {
        probes
    };
    let ac = estimate_constants(
        sim.env(),
        sim.devices(),
        &probes,
        alpha0,
        2000,
        &mut stream_rng(sim.seed(), Stream::Probe, 0, 0),
    )?;
    let dc = derived_constants(&ac, alpha0, cfg.batch_size, cfg.sparsify_k, cfg.dim(), None)?;
    let mut warnings = step_condition_warnings(cfg);
    let inputs = ConvergenceInputs {
        rounds: records.len(),
        local_steps: cfg.local_steps,
        batch_size: cfg.batch_size,
        participation: cfg.participation,
        n_devices: cfg.n_devices,
        channel_uses: cfg.channel_uses,
        dim: cfg.dim(),
        p_min: sim.policy().min_budget(),
        v: records.iter().map(|r| r.v_model).collect(),
        sigma_h_sq: cfg.fading.sigma_h_sq(),
        mu_h: cfg.fading.mu_h(),
        f0: sim.oracle().value(&sim.initial_state()?.theta, alpha0),
        f_star: sim.oracle().minimum(alpha0),
    };
    let convergence = if records.is_empty() {
        None
    } else {
        let r = match cfg.schedule {
            Schedule::Constant { .. } => eval_convergence_bound_constant(&dc, &ac, alpha0, eta0, &inputs),
            Schedule::Adaptive { xi, a, xi_inner, a_inner } => {
                eval_convergence_bound_adaptive(&dc, &ac, xi, a, xi_inner, a_inner, &inputs)
            }
        };
        match r {
            Ok(mut rep) => {
                rep.measured = Some(match cfg.schedule {
                    Schedule::Constant { .. } => stationary_convergence_error(records),
                    Schedule::Adaptive { .. } => min_grad(records),
                });
                Some(rep)
            }
            Err(e) => {
                warnings.push(format!("convergence bound unavailable: {e}"));
                None
            }
        }
    };
    let generalization = eval_generalization_bound(&generalization_inputs(sim, records, &ac, &dc));
    Ok(TrialBounds {
        constants: ac,
        derived: dc,
        convergence,
        generalization,
        measured_convergence_error: stationary_convergence_error(records),
        measured_min_grad_norm_sq: min_grad(records),
        warnings,
    })
}

fn min_grad(records: &[RoundRecord]) -> f64 {
    records.iter().map(|r| r.grad_norm_sq).fold(f64::INFINITY, f64::min)
}

fn thin(v: &[Vector], keep: usize) -> Vec<Vector> {
    if v.len() <= keep {
        return v.to_vec();
    }
    (0..keep).map(|i| v[i * (v.len() - 1) / (keep - 1).max(1)].clone()).collect()
}

/// Gathers generalization-bound inputs from recorded rounds.
pub fn generalization_inputs(
    sim: &Simulator,
    records: &[RoundRecord],
    ac: &AssumptionConstants,
    dc: &DerivedConstants,
) -> GeneralizationInputs {
    let cfg = sim.config();
    let eps_g = records
        .iter()
        .filter(|r| r.eta > 0.0)
        .map(|r| r.min_g_norm_sq / (r.eta * r.eta))
        .fold(f64::INFINITY, f64::min);
    let eps_g = if eps_g.is_finite() { eps_g.max(EPS_G_FLOOR) } else { EPS_G_FLOOR };
    GeneralizationInputs {
        dim: cfg.dim(),
        n_devices: cfg.n_devices,
        n_active: sim.n_active(),
        channel_uses: cfg.channel_uses,
        p_max: sim.policy().max_budget(),
        sigma_sq: cfg.loss_clip * cfg.loss_clip / 4.0,
        c_g: generalization_c_g(dc, ac, cfg.local_steps),
        eps_g,
        rounds: records.iter().map(|r| (r.sum_h_sq, r.v_model)).collect(),
    }
}

/// Uniform draw helper kept here so Monte Carlo probes share one seeded stream.
pub fn random_probe(center: &Vector, radius: f64, rng: &mut SimRng) -> Vector {
    Vector::from_fn(center.len(), |i, _| center[i] + radius * (2.0 * rng.random::<f64>() - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::task_model::{DataPoint, InputCovariance};
    use proptest::prelude::*;

    fn quad_env(d: usize, spread: f64, noise: f64) -> Arc<TaskEnvironment> {
        Arc::new(
            TaskEnvironment::new(
                TaskFamily::Quadratic,
                Vector::from_element(d, 0.5),
                spread,
                InputCovariance::isotropic(d, 1.0).unwrap(),
                noise,
            )
            .unwrap(),
        )
    }

    fn sample_constants() -> AssumptionConstants {
        AssumptionConstants {
            l_g: Constant::analytic(1.0),
            l_h: Constant::analytic(0.0),
            g_sq: Constant::analytic(30.0),
            sigma_g_sq: Constant::analytic(25.0),
            sigma_h_sq: Constant::analytic(400.0),
            gamma_g_sq: Constant::analytic(0.5),
            gamma_h_sq: Constant::analytic(0.0),
        }
    }

    fn inputs() -> ConvergenceInputs {
        ConvergenceInputs {
            rounds: 100,
            local_steps: 5,
            batch_size: 32,
            participation: 1.0 / 3.0,
            n_devices: 9,
            channel_uses: 8,
            dim: 20,
            p_min: 1.0,
            v: vec![0.1; 100],
            sigma_h_sq: 1.0,
            mu_h: std::f64::consts::PI.sqrt() / 2.0,
            f0: 10.0,
            f_star: 1.0,
        }
    }

    #[test]
    fn lambda_golden() {
        assert_eq!(contraction_factor(0.5, 0.5).unwrap(), 6.0);
        assert_eq!(contraction_factor(1.0, f64::INFINITY).unwrap(), 0.0);
        assert!(contraction_factor(0.5, 1.0).is_err());
        assert!(contraction_factor(0.5, 0.0).is_err());
        assert_eq!(default_c(0.5), 0.5);
    }

    #[test]
    fn alpha_zero_reductions_are_exact() {
        let ac = sample_constants();
        let dc = derived_constants(&ac, 0.0, 32, 5, 20, None).unwrap();
        assert_eq!(dc.l_f, 4.0 * ac.l_g.value);
        assert_eq!(dc.gamma_f_sq, 192.0 * ac.gamma_g_sq.value);
        assert_eq!(dc.sigma_f_sq, 12.0 * ac.sigma_g_sq.value / 32.0);
        let rep = eval_convergence_bound_constant(&dc, &ac, 0.0, 0.001, &inputs()).unwrap();
        assert_eq!(rep.term("inner_sgd").unwrap(), 0.0);
    }

    #[test]
    fn zero_curvature_noise_makes_l_f_independent_of_g() {
        let mut ac = sample_constants();
        let a = derived_constants(&ac, 0.3, 32, 5, 20, None).unwrap();
        ac.g_sq.value *= 10.0;
        let b = derived_constants(&ac, 0.3, 32, 5, 20, None).unwrap();
        assert_eq!(a.l_f, b.l_f);
    }

    #[test]
    fn lossless_and_noiseless_terms_vanish() {
        let ac = sample_constants();
        let dc = derived_constants(&ac, 0.4, 32, 20, 20, None).unwrap();
        assert_eq!(dc.big_lambda, 0.0);
        let mut inp = inputs();
        inp.mu_h = 1.0;
        inp.v = vec![0.0; 100];
        let rep = eval_convergence_bound_constant(&dc, &ac, 0.4, 0.001, &inp).unwrap();
        assert_eq!(rep.term("sparsification").unwrap(), 0.0);
        assert_eq!(rep.term("estimation").unwrap(), 0.0);
        let sigma_free = AssumptionConstants {
            sigma_g_sq: Constant::analytic(0.0),
            ..ac
        };
        let rep = eval_convergence_bound_constant(&dc, &sigma_free, 0.4, 0.001, &inp).unwrap();
        assert_eq!(rep.term("inner_sgd").unwrap(), 0.0);
    }

    #[test]
    fn report_total_is_sum_of_terms() {
        let ac = sample_constants();
        let dc = derived_constants(&ac, 0.4, 32, 2, 20, None).unwrap();
        let rep = eval_convergence_bound_constant(&dc, &ac, 0.4, 0.001, &inputs()).unwrap();
        let s: f64 = rep.terms.iter().map(|t| t.value).sum();
        assert_eq!(rep.total, s);
        assert!(rep.terms.iter().all(|t| t.value >= 0.0));
    }

    #[test]
    fn missing_inputs_are_reported() {
        let ac = sample_constants();
        let dc = derived_constants(&ac, 0.4, 32, 2, 20, None).unwrap();
        let mut inp = inputs();
        inp.v.clear();
        assert!(matches!(
            eval_convergence_bound_constant(&dc, &ac, 0.4, 0.001, &inp),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn adaptive_bound_decays_and_checks_precondition() {
        let ac = sample_constants();
        let dc = derived_constants(&ac, 0.4, 32, 10, 20, None).unwrap();
        let mut inp = inputs();
        let short = eval_convergence_bound_adaptive(&dc, &ac, 0.01, 50.0, 0.5, 2.0, &inp).unwrap();
        inp.rounds = 1_000_000;
        let long = eval_convergence_bound_adaptive(&dc, &ac, 0.01, 50.0, 0.5, 2.0, &inp).unwrap();
        assert!(long.total < short.total);
        assert!(long.total < 0.3 * short.total);
        assert!(eval_convergence_bound_adaptive(&dc, &ac, 0.01, 10.0, 0.5, 2.0, &inp).is_err());
        let inner0 = eval_convergence_bound_adaptive(&dc, &ac, 0.01, 50.0, 0.0, 2.0, &inp).unwrap();
        assert_eq!(inner0.term("inner_sgd").unwrap(), 0.0);
    }

    #[test]
    fn generalization_bound_examples() {
        let base = GeneralizationInputs {
            dim: 20,
            n_devices: 9,
            n_active: 9,
            channel_uses: 8,
            p_max: 1.0,
            sigma_sq: 25.0,
            c_g: 10.0,
            eps_g: 1e-3,
            rounds: vec![],
        };
        assert_eq!(eval_generalization_bound(&base).value, 0.0);
        let mut one = base.clone();
        one.rounds = vec![(9.0, 0.1), (8.0, 0.2)];
        let b1 = eval_generalization_bound(&one);
        let mut twice = one.clone();
        twice.n_devices = 18;
        let b2 = eval_generalization_bound(&twice);
        assert!((b2.value - b1.value / 2f64.sqrt()).abs() < 1e-12);
        let mut zero_v = one.clone();
        zero_v.rounds.push((1.0, 0.0));
        let z = eval_generalization_bound(&zero_v);
        assert!(z.infinite && z.value.is_infinite());
    }

    #[test]
    fn isotropic_hessian_variance_matches_sampling() {
        let env = quad_env(5, 0.0, 0.0);
        let analytic = isotropic_hessian_variance(5, 1.0);
        let emp = empirical_hessian_variance(&env, 200_000, &mut stream_rng(1, Stream::Probe, 0, 0));
        assert!((emp - analytic).abs() < 0.02 * analytic, "{emp} vs {analytic}");
    }

    #[test]
    fn analytic_gradient_variance_matches_sampling() {
        let d = 4;
        let env = quad_env(d, 0.0, 0.5);
        let w = Vector::from_vec(vec![0.2, -0.1, 0.4, 0.0]);
        let phi = Vector::from_vec(vec![1.0, 0.5, -0.3, 0.2]);
        let u = &phi - &w;
        let dev = DeviceDistribution {
            task: w,
            env: Arc::clone(&env),
        };
        let mut rng = stream_rng(2, Stream::Probe, 0, 0);
        let n = 100_000;
        let mean = dev.population_grad(&phi).unwrap();
        let mut acc = 0.0;
        for _ in 0..n {
            let z = dev.sample_point(&mut rng);
            acc += (env.grad(&phi, &z).unwrap() - &mean).norm_squared();
        }
        let emp = acc / n as f64;
        let analytic = quadratic_gradient_variance(&env, &u);
        assert!((emp - analytic).abs() < 0.02 * analytic, "{emp} vs {analytic}");
    }

    #[test]
    fn homogeneous_devices_have_zero_heterogeneity() {
        let env = quad_env(3, 0.0, 0.1);
        let devs: Vec<DeviceDistribution> = (0..4)
            .map(|i| sample_device(&env, &mut stream_rng(i, Stream::DeviceTask, 0, 0)))
            .collect();
        let ac = estimate_constants(&env, &devs, &[Vector::zeros(3)], 0.3, 10, &mut stream_rng(0, Stream::Probe, 0, 0))
            .unwrap();
        assert_eq!(ac.gamma_g_sq.value, 0.0);
        assert_eq!(ac.gamma_h_sq.value, 0.0);
        assert_eq!(ac.l_g.value, 1.0);
        assert_eq!(ac.l_h.value, 0.0);
        assert_eq!(ac.l_g.provenance, Provenance::Analytic);
    }

    #[test]
    fn training_loss_two_ways_and_examples() {
        let env = quad_env(3, 1.0, 0.3);
        let datasets: Vec<Dataset> = (0..4)
            .map(|i| {
                let dev = sample_device(&env, &mut stream_rng(i, Stream::DeviceTask, 0, 0));
                sample_dataset(&dev, 11, 5, 6, &mut stream_rng(i, Stream::DeviceData, 0, 0)).unwrap()
            })
            .collect();
        let theta = Vector::from_vec(vec![0.1, -0.2, 0.3]);
        let a = meta_training_loss(&env, &theta, &datasets, 0.3).unwrap();
        let b = meta_training_loss_by_points(&env, &theta, &datasets, 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);
        let plain = meta_training_loss(&env, &theta, &datasets, 0.0).unwrap();
        let direct: f64 = datasets
            .iter()
            .map(|ds| env.batch_loss(&theta, ds.validation()).unwrap())
            .sum::<f64>()
            / 4.0;
        assert!((plain - direct).abs() < 1e-14);
    }

    #[test]
    fn training_loss_hand_example() {
        let env = quad_env(1, 0.0, 0.0);
        let pt = |x: f64, y: f64| DataPoint {
            x: Vector::from_vec(vec![x]),
            y,
        };
        let ds = Dataset::from_splits(vec![pt(1.0, 2.0), pt(2.0, 2.0)], vec![pt(1.0, 1.0), pt(-1.0, 0.0)]).unwrap();
        // grad at 0: mean(-(2)*1, -(2)*2) = -3; phi = 0.5 * 3 = 1.5
        // losses: 0.5 * (1 - 1.5)^2 = 0.125, 0.5 * (0 + 1.5)^2 = 1.125
        let l = meta_training_loss(&env, &Vector::zeros(1), &[ds], 0.5).unwrap();
        assert!((l - 0.625).abs() < 1e-15);
    }

    #[test]
    fn closed_form_test_loss_matches_monte_carlo() {
        let d = 3;
        let env = Arc::new(
            TaskEnvironment::new(
                TaskFamily::Quadratic,
                Vector::from_vec(vec![1.0, 0.0, -0.5]),
                0.4,
                InputCovariance::diagonal(&[1.0, 0.5, 0.8]).unwrap(),
                0.2,
            )
            .unwrap(),
        );
        let theta = Vector::from_vec(vec![0.3, 0.2, 0.1]);
        let alpha = 0.5;
        let m_tr = 4;
        let exact = env.expected_meta_test_loss(&theta, alpha, m_tr).unwrap();
        let mut rng = stream_rng(9, Stream::TestDevices, 0, 0);
        let n = 1000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let dev = sample_device(&env, &mut rng);
            let ds = sample_dataset(&dev, m_tr + 1, m_tr, 1, &mut rng).unwrap();
            let phi = &theta - env.batch_grad(&theta, ds.train()).unwrap() * alpha;
            vals.push(dev.population_loss(&phi).unwrap());
        }
        let (mean, se) = mean_stderr(&vals);
        assert!((mean - exact).abs() < 3.0 * se.unwrap(), "{mean} vs {exact}");
        let _ = d;
    }

    #[test]
    fn meta_test_loss_monotone_in_training_size() {
        let env = quad_env(4, 0.5, 0.3);
        let theta = Vector::zeros(4);
        let mut prev = f64::INFINITY;
        for m in [1usize, 2, 4, 8, 16, 64] {
            let v = env.expected_meta_test_loss(&theta, 0.5, m).unwrap();
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn perfect_adaptation_gives_zero_test_loss() {
        let env = Arc::new(
            TaskEnvironment::new(
                TaskFamily::Quadratic,
                Vector::from_element(2, 1.0),
                0.0,
                InputCovariance::isotropic(2, 1.0).unwrap(),
                0.0,
            )
            .unwrap(),
        );
        let theta = Vector::from_element(2, 1.0);
        let v = meta_test_loss(&theta, &env, 0.3, 10, 4, 4, &mut stream_rng(0, Stream::TestDevices, 0, 0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn generalization_estimate_flags_single_trial() {
        let g = meta_generalization_error(&[0.3]);
        assert!(g.flagged && g.stderr.is_none());
        let g = meta_generalization_error(&[0.1, 0.3]);
        assert!(!g.flagged);
        assert!((g.mean - 0.2).abs() < 1e-15);
    }

    #[test]
    fn step_condition_threshold() {
        let x = step_condition_x_max();
        assert!((60.0 * x * x + 160.0 * x.powi(3) + 4.0 * x - 0.125).abs() < 1e-12);
        assert!(x > 0.022 && x < 0.0235);
        assert!(step_condition(0.001, 5, 4.0).satisfied);
        assert!(!step_condition(0.4, 5, 4.0).satisfied);
    }

    #[test]
    fn random_probe_stays_in_box() {
        let mut rng = stream_rng(0, Stream::Probe, 0, 0);
        let c = Vector::from_element(3, 1.0);
        for _ in 0..100 {
            let p = random_probe(&c, 0.5, &mut rng);
            assert!((p - &c).amax() <= 0.5);
        }
    }

    fn const_strategy() -> impl Strategy<Value = AssumptionConstants> {
        (0.1f64..4.0, 0.0f64..100.0, 0.0f64..50.0, 0.0f64..500.0, 0.0f64..5.0).prop_map(|(l, g, sg, sh, gg)| {
            AssumptionConstants {
                l_g: Constant::analytic(l),
                l_h: Constant::analytic(0.0),
                g_sq: Constant::analytic(g),
                sigma_g_sq: Constant::analytic(sg),
                sigma_h_sq: Constant::analytic(sh),
                gamma_g_sq: Constant::analytic(gg),
                gamma_h_sq: Constant::analytic(0.0),
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn adaptive_terms_nonnegative(ac in const_strategy(), k in 1usize..=20, q in 1usize..4, xi in 0.001f64..1.0, xi_in in 0.0f64..1.0, a_in in 1.01f64..10.0) {
            let alpha = 0.5 / ac.l_g.value;
            let dc = derived_constants(&ac, alpha, 16, k, 20, None).unwrap();
            let lambda = k as f64 / 20.0;
            let a = 4.0 * q as f64 / lambda + 1.0;
            let mut inp = inputs();
            inp.local_steps = q;
            let rep = eval_convergence_bound_adaptive(&dc, &ac, xi, a, xi_in, a_in, &inp).unwrap();
            prop_assert!(rep.terms.iter().all(|t| t.value >= 0.0 && t.value.is_finite()));
        }

        #[test]
        fn estimation_term_nonincreasing_in_resources(ac in const_strategy(), m in 1usize..20, p in 0.1f64..10.0) {
            let dc = derived_constants(&ac, 0.5 / ac.l_g.value, 16, 2, 20, None).unwrap();
            let mut inp = inputs();
            inp.channel_uses = m;
            inp.p_min = p;
            let base = eval_convergence_bound_constant(&dc, &ac, 0.5 / ac.l_g.value, 1e-3, &inp).unwrap().term("estimation").unwrap();
            let mut more_m = inp.clone();
            more_m.channel_uses = m + 1;
            let mut more_p = inp.clone();
            more_p.p_min = p * 1.5;
            let mut more_n = inp.clone();
            more_n.n_devices = 18;
            for other in [more_m, more_p, more_n] {
                let v = eval_convergence_bound_constant(&dc, &ac, 0.5 / ac.l_g.value, 1e-3, &other).unwrap().term("estimation").unwrap();
                prop_assert!(v <= base * (1.0 + 1e-12));
            }
        }

        #[test]
        fn sparsification_term_nonincreasing_in_k(ac in const_strategy(), k in 1usize..20) {
            let alpha = 0.5 / ac.l_g.value;
            let a = derived_constants(&ac, alpha, 16, k, 20, None).unwrap();
            let b = derived_constants(&ac, alpha, 16, k + 1, 20, None).unwrap();
            let ra = eval_convergence_bound_constant(&a, &ac, alpha, 1e-3, &inputs()).unwrap().term("sparsification").unwrap();
            let rb = eval_convergence_bound_constant(&b, &ac, alpha, 1e-3, &inputs()).unwrap().term("sparsification").unwrap();
            prop_assert!(rb <= ra * (1.0 + 1e-12));
        }

        #[test]
        fn generalization_bound_monotone(m in 1usize..20, p in 0.1f64..10.0, v in 1e-4f64..1.0, c_g in 1e-2f64..100.0, h in 0.1f64..20.0) {
            let base = GeneralizationInputs {
                dim: 20, n_devices: 9, n_active: 9, channel_uses: m, p_max: p,
                sigma_sq: 25.0, c_g, eps_g: 1e-2, rounds: vec![(h, v); 5],
            };
            let b0 = eval_generalization_bound(&base).value;
            let mut more_m = base.clone();
            more_m.channel_uses = m + 1;
            let mut more_p = base.clone();
            more_p.p_max = p * 1.5;
            let mut less_v = base.clone();
            less_v.rounds = vec![(h, v / 2.0); 5];
            for other in [more_m, more_p, less_v] {
                prop_assert!(eval_generalization_bound(&other).value > b0);
            }
        }
    }
}
