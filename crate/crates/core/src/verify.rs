//! Invariant suite: sparsifier contraction, transmit power, fading moments,
//! aggregation unbiasedness, the virtual-sequence identity, memory and drift
//! bounds, and validity of the constant-rate convergence bound.

use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::airlink::{
    estimate, global_update, make_compression, sample_channel, transmit_mac, CompressionKind, EstimatorKind,
    FadingModel, TransmitPacket,
};
use crate::error::Result;
use crate::metrics_bounds::{
    derived_constants, estimate_constants, eval_convergence_bound_constant, lemmas, trajectory_probes,
    ConvergenceInputs,
};
use crate::orchestrator::{ExperimentConfig, MemoryFault, Pipeline, Schedule, Simulator, Trajectory};
use crate::rng::{stream_rng, Stream};
use crate::sparse_feedback::{comp_k, phase_precompensate, power_scale, PowerPolicy, SparsifyMode};
use crate::task_model::Vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Scales every folded memory; any value other than 1 breaks the virtual-sequence identity.
    pub memory_fault: Option<f64>,
    /// Seeds for the bound-validity check.
    pub bound_trials: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            memory_fault: None,
            bound_trials: 3,
        }
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckRow {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckRow {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Contraction of top-k on every draw and of rand-k on the mean (99% one-sided margin).
pub fn check_contraction(seed: u64, d: usize, draws: usize) -> Result<(bool, String)> {
    let mut rng = stream_rng(seed, Stream::Probe, 1, 0);
    let mut ks = vec![1, d / 4, d / 2, d];
    ks.retain(|&k| k >= 1);
    ks.dedup();
    let mut ok = true;
    let mut worst_top: f64 = f64::NEG_INFINITY;
    let mut worst_rand: f64 = f64::NEG_INFINITY;
    for &k in &ks {
        let lambda = k as f64 / d as f64;
        let mut ratios = Vec::with_capacity(draws);
        for _ in 0..draws {
            let x = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let nx = x.norm_squared();
            let top = comp_k(&x, k, SparsifyMode::TopK, &mut rng)?;
            let excess = (&x - &top.g).norm_squared() - (1.0 - lambda) * nx;
            worst_top = worst_top.max(excess);
            ok &= excess <= 1e-12 * nx;
            let rnd = comp_k(&x, k, SparsifyMode::RandK, &mut rng)?;
            ratios.push((&x - &rnd.g).norm_squared() / nx);
        }
        let (mean, se) = crate::metrics_bounds::mean_stderr(&ratios);
        let margin = mean - (1.0 - lambda) - 2.576 * se.unwrap_or(0.0);
        worst_rand = worst_rand.max(margin);
        ok &= margin <= 1e-12;
    }
    Ok((
        ok,
        format!("k in {ks:?}; worst top-k excess {worst_top:.3e}, worst rand-k margin {worst_rand:.3e}"),
    ))
}

/// Every transmitted packet respects its per-use power budget.
pub fn check_power_constraint(cfg: &ExperimentConfig) -> Result<(bool, String)> {
    let sim = Simulator::new(cfg, 0)?.with_trace(true);
    let traj = sim.run(Pipeline::Air, None)?;
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    for tr in &traj.traces {
        for (&id, &p) in tr.active.iter().zip(&tr.tx_powers) {
            worst = worst.max(p - sim.policy().budgets[id]);
            count += 1;
        }
    }
    Ok((worst <= 1e-12, format!("{count} packets, max excess {worst:.3e}")))
}

/// `E|h|` and `E|h|^2` of Rayleigh fading within 1%.
pub fn check_rayleigh_moments(seed: u64, draws: usize) -> Result<(bool, String)> {
    let mut rng = stream_rng(seed, Stream::Probe, 2, 0);
    let fading = FadingModel::RayleighCn01;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let h = fading.sample(&mut rng).norm();
        s1 += h;
        s2 += h * h;
    }
    let m1 = s1 / draws as f64;
    let m2 = s2 / draws as f64;
    let e1 = (m1 / fading.mu_h() - 1.0).abs();
    let e2 = (m2 / fading.sigma_h_sq() - 1.0).abs();
    Ok((e1 <= 0.01 && e2 <= 0.01, format!("E|h| = {m1:.5}, E|h|^2 = {m2:.5}")))
}

/// Effective update over fading and noise draws, for fixed device updates.
///
/// Returns the per-draw effective updates and the target `(1/rn) sum g_i`.
pub fn aggregation_draws(seed: u64, d: usize, n: usize, snr_db: f64, draws: usize) -> Result<(Vec<Vector>, Vector)> {
    let mut rng = stream_rng(seed, Stream::Probe, 3, 0);
    let gs: Vec<Vector> = (0..n)
        .map(|_| Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let target = gs.iter().fold(Vector::zeros(d), |a, g| a + g) / n as f64;
    let fading = FadingModel::RayleighCn01;
    let policy = PowerPolicy::uniform(n, 1.0, d, 1e12)?;
    let noise_var = crate::airlink::noise_var_for_snr(snr_db, n, 1.0, fading);
    let a = make_compression(CompressionKind::Identity, d, d, &mut rng)?;
    let eta = 0.1;
    let ids: Vec<usize> = (0..n).collect();
    let pairs: Vec<(usize, &Vector)> = ids.iter().copied().zip(gs.iter()).collect();
    let rho = power_scale(&pairs, eta, &policy)?;
    let zero = Vector::zeros(d);
    let mut out = Vec::with_capacity(draws);
    for _ in 0..draws {
        let ch = sample_channel(&ids, fading, noise_var, d, &mut rng)?;
        let packets = ids
            .iter()
            .map(|&id| {
                let h: Complex64 = ch.gains[&id];
                Ok(TransmitPacket {
                    device_id: id,
                    x: a.apply(&phase_precompensate(&gs[id], rho, eta, h)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let y = transmit_mac(&packets, &ch)?;
        let est = estimate(&y, &a, 0.0, noise_var, EstimatorKind::MatchedIdentity)?;
        out.push(-global_update(&zero, &est.x_hat, eta, rho, fading.mu_h(), n)?);
    }
    Ok((out, target))
}

/// Mean effective update within three standard errors of the ideal average, per component.
pub fn check_unbiasedness(seed: u64, draws: usize) -> Result<(bool, String)> {
    let d = 20;
    let (samples, target) = aggregation_draws(seed, d, 4, 10.0, draws)?;
    let mut worst: f64 = 0.0;
    for j in 0..d {
        let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        let (mean, se) = crate::metrics_bounds::mean_stderr(&col);
        worst = worst.max((mean - target[j]).abs() / se.unwrap_or(f64::MIN_POSITIVE));
    }
    Ok((worst <= 3.0, format!("{draws} draws, worst |z| = {worst:.2}")))
}

/// Per-round residual `|theta - theta_hat - (1/rn) sum_i m_i|`, with `theta_hat`
/// rebuilt from the recorded updates, fading magnitudes and estimation errors.
pub fn virtual_sequence_residuals(traj: &Trajectory, n_devices: usize) -> Vec<f64> {
    let thetas = traj.thetas();
    let Some(first) = thetas.first() else {
        return Vec::new();
    };
    let d = first.len();
    let mut theta_hat = first.clone();
    let mut memories = vec![Vector::zeros(d); n_devices];
    let mut out = Vec::with_capacity(traj.traces.len());
    for (t, tr) in traj.traces.iter().enumerate() {
        let rn = tr.active.len() as f64;
        for (pos, _) in tr.active.iter().enumerate() {
            theta_hat -= &tr.deltas[pos] / rn;
            theta_hat -= &tr.updates[pos] * ((tr.gains_abs[pos] / tr.mu_h - 1.0) / rn);
        }
        if tr.eta != 0.0 {
            theta_hat -= &tr.estimation_error * (tr.eta / (tr.mu_h * rn * tr.rho.sqrt()));
        }
        for (pos, &id) in tr.active.iter().enumerate() {
            memories[id] = tr.memories_after[pos].clone();
        }
        let mem_sum = memories.iter().fold(Vector::zeros(d), |a, m| a + m);
        out.push((&thetas[t + 1] - &theta_hat - mem_sum / rn).norm());
    }
    out
}

pub fn check_virtual_sequence(cfg: &ExperimentConfig, fault: Option<f64>) -> Result<(bool, String)> {
    let mut sim = Simulator::new(cfg, 0)?.with_trace(true);
    if let Some(scale) = fault {
        sim = sim.with_memory_fault(MemoryFault { scale });
    }
    let traj = sim.run(Pipeline::Air, None)?;
    let res = virtual_sequence_residuals(&traj, cfg.n_devices);
    let worst = res.iter().copied().fold(0.0, f64::max);
    Ok((
        worst <= 1e-8 && res.len() == cfg.rounds,
        format!("{} rounds, max residual {worst:.3e}", res.len()),
    ))
}

fn constants_for(sim: &Simulator, traj: &Trajectory) -> Result<(crate::AssumptionConstants, crate::DerivedConstants)> {
    let cfg = sim.config();
    let (_, alpha) = sim.schedule_at(0);
    let ac = estimate_constants(
        sim.env(),
        sim.devices(),
        &trajectory_probes(&traj.records, &traj.final_theta),
        alpha,
        2000,
        &mut stream_rng(sim.seed(), Stream::Probe, 0, 0),
    )?;
    let dc = derived_constants(&ac, alpha, cfg.batch_size, cfg.sparsify_k, cfg.dim(), None)?;
    Ok((ac, dc))
}

/// Mean squared memory norm stays below its bound.
pub fn check_memory_bound(cfg: &ExperimentConfig) -> Result<(bool, String)> {
    let sim = Simulator::new(cfg, 0)?.with_trace(true);
    let traj = sim.run(Pipeline::Air, None)?;
    let (ac, dc) = constants_for(&sim, &traj)?;
    let mut ok = true;
    let mut worst_ratio: f64 = 0.0;
    for (tr, rec) in traj.traces.iter().zip(&traj.records) {
        let mean = tr.memories_after.iter().map(|m| m.norm_squared()).sum::<f64>() / tr.memories_after.len() as f64;
        let bound = lemmas::memory_norm_sq(&dc, &ac, rec.eta, cfg.local_steps);
        worst_ratio = worst_ratio.max(mean / bound);
        ok &= mean <= bound;
    }
    Ok((ok, format!("max mean/bound ratio {worst_ratio:.3e}")))
}

/// Mean squared local drift per round stays below its bound.
pub fn check_local_drift(cfg: &ExperimentConfig) -> Result<(bool, String)> {
    let sim = Simulator::new(cfg, 0)?.with_trace(true);
    let traj = sim.run(Pipeline::Air, None)?;
    let (_, dc) = constants_for(&sim, &traj)?;
    let mut ok = true;
    let mut worst_ratio: f64 = 0.0;
    for (tr, rec) in traj.traces.iter().zip(&traj.records) {
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for its in &tr.iterates {
            for th in its {
                acc += (th - &its[0]).norm_squared();
                cnt += 1;
            }
        }
        let bound = lemmas::local_drift(&dc, cfg.local_steps, rec.eta, rec.grad_norm_sq);
        let mean = acc / cnt.max(1) as f64;
        worst_ratio = worst_ratio.max(mean / bound);
        ok &= mean <= bound;
    }
    Ok((ok, format!("max mean/bound ratio {worst_ratio:.3e}")))
}

/// Constant-rate bound evaluation for one trial: `(measured, bound total)`.
pub fn constant_rate_bound_check(cfg: &ExperimentConfig, trial: usize) -> Result<(f64, crate::BoundReport)> {
    let sim = Simulator::new(cfg, trial)?;
    let traj = sim.run(Pipeline::Air, None)?;
    let (ac, dc) = constants_for(&sim, &traj)?;
    let (eta, alpha) = match cfg.schedule {
        Schedule::Constant { eta, alpha } => (eta, alpha),
        Schedule::Adaptive { .. } => sim.schedule_at(0),
    };
    let inputs = ConvergenceInputs {
        rounds: traj.records.len(),
        local_steps: cfg.local_steps,
        batch_size: cfg.batch_size,
        participation: cfg.participation,
        n_devices: cfg.n_devices,
        channel_uses: cfg.channel_uses,
        dim: cfg.dim(),
        p_min: sim.policy().min_budget(),
        v: traj.records.iter().map(|r| r.v_model).collect(),
        sigma_h_sq: cfg.fading.sigma_h_sq(),
        mu_h: cfg.fading.mu_h(),
        f0: sim.oracle().value(&sim.initial_state()?.theta, alpha),
        f_star: sim.oracle().minimum(alpha),
    };
    let mut rep = eval_convergence_bound_constant(&dc, &ac, alpha, eta, &inputs)?;
    let measured = crate::metrics_bounds::stationary_convergence_error(&traj.records);
    rep.measured = Some(measured);
    Ok((measured, rep))
}

pub fn check_bound_validity(cfg: &ExperimentConfig, trials: usize) -> Result<(bool, String)> {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for k in 0..trials {
        let (measured, rep) = constant_rate_bound_check(cfg, k)?;
        ok &= measured <= rep.total && rep.flags.is_empty();
        worst = worst.max(measured / rep.total);
    }
    Ok((ok, format!("{trials} trials, max measured/bound {worst:.3e}")))
}

/// Runs the full suite on the quadratic defaults.
pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckRow> {
    let mut base = ExperimentConfig::default_convergence();
    base.master_seed = opts.seed;
    let mut full = base.clone();
    full.participation = 1.0;
    full.rounds = 100;
    vec![
        timed("contraction", || check_contraction(opts.seed, 20, 1000)),
        timed("power_constraint", || check_power_constraint(&base)),
        timed("rayleigh_moments", || check_rayleigh_moments(opts.seed, 1_000_000)),
        timed("aggregation_unbiasedness", || check_unbiasedness(opts.seed, 10_000)),
        timed("virtual_sequence", || check_virtual_sequence(&full, opts.memory_fault)),
        timed("memory_bound", || check_memory_bound(&base)),
        timed("local_drift", || check_local_drift(&base)),
        timed("bound_validity", || check_bound_validity(&base, opts.bound_trials)),
    ]
}
