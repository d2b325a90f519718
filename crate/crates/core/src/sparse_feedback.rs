//! Sparsification with error-feedback memory, and transmit power scaling.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::SimRng;
use crate::task_model::Vector;

pub type CVector = DVector<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifyMode {
    TopK,
    RandK,
}

/// A vector with at most `k` nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    pub g: Vector,
    pub k: usize,
}

impl SparseUpdate {
    pub fn nnz(&self) -> usize {
        self.g.iter().filter(|v| **v != 0.0).count()
    }
}

/// Keeps `k` entries of `x` and zeroes the rest.
///
/// `TopK` keeps the largest magnitudes, breaking ties towards the lower index.
/// `RandK` keeps a uniformly random subset without rescaling.
pub fn comp_k(x: &Vector, k: usize, mode: SparsifyMode, rng: &mut SimRng) -> Result<SparseUpdate> {
    let d = x.len();
    if k == 0 || k > d {
        return Err(Error::invalid("k", format!("must satisfy 1 <= k <= d = {d}, got {k}")));
    }
    if k == d {
        return Ok(SparseUpdate { g: x.clone(), k });
    }
    let keep: Vec<usize> = match mode {
        SparsifyMode::TopK => {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.select_nth_unstable_by(k - 1, |&a, &b| {
                x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b))
            });
            idx.truncate(k);
            idx
        }
        SparsifyMode::RandK => index::sample(rng, d, k).into_vec(),
    };
    let mut g = Vector::zeros(d);
    for i in keep {
        g[i] = x[i];
    }
    Ok(SparseUpdate { g, k })
}

/// Accumulated sparsification residual of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub m: Vector,
}

impl MemoryState {
    pub fn zeros(dim: usize) -> Self {
        Self { m: Vector::zeros(dim) }
    }
}

/// `g = comp_k(m + delta)`, `m' = m + delta - g`.
pub fn memory_fold(
    mem: &MemoryState,
    delta: &Vector,
    k: usize,
    mode: SparsifyMode,
    rng: &mut SimRng,
) -> Result<(SparseUpdate, MemoryState)> {
    check_dim(mem.m.len(), delta.len())?;
    let acc = &mem.m + delta;
    let g = comp_k(&acc, k, mode, rng)?;
    let m = acc - &g.g;
    Ok((g, MemoryState { m }))
}

/// Per-device power budgets per channel use and the number of channel uses per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPolicy {
    pub budgets: Vec<f64>,
    pub channel_uses: usize,
    /// Scale used when every update is zero.
    pub rho_cap: f64,
}

impl PowerPolicy {
    pub fn uniform(n: usize, power_per_use: f64, channel_uses: usize, rho_cap: f64) -> Result<Self> {
        let p = Self {
            budgets: vec![power_per_use; n],
            channel_uses,
            rho_cap,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::invalid("power_per_use", "budgets must be finite and > 0"));
        }
        if self.channel_uses == 0 {
            return Err(Error::invalid("channel_uses", "must be at least 1"));
        }
        if !(self.rho_cap.is_finite() && self.rho_cap > 0.0) {
            return Err(Error::invalid("rho_cap", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn min_budget(&self) -> f64 {
        self.budgets.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_budget(&self) -> f64 {
        self.budgets.iter().copied().fold(0.0, f64::max)
    }
}

/// Common scale `rho = min_i eta^2 M P_i / |g_i|^2` over active devices `(id, g_i)`.
pub fn power_scale(active: &[(usize, &Vector)], eta: f64, policy: &PowerPolicy) -> Result<f64> {
    let mut rho = f64::INFINITY;
    for &(id, g) in active {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse update"));
        }
        let p = *policy
            .budgets
            .get(id)
            .ok_or_else(|| Error::invalid("device_id", format!("no power budget for device {id}")))?;
        let norm_sq = g.norm_squared();
        if norm_sq > 0.0 {
            rho = rho.min(eta * eta * policy.channel_uses as f64 * p / norm_sq);
        }
    }
    if rho.is_infinite() {
        return Ok(policy.rho_cap);
    }
    if rho <= 0.0 {
        return Err(Error::invalid("eta", "nonzero update with eta = 0 cannot be scaled"));
    }
    Ok(rho)
}

/// `x = sqrt(rho) * exp(-j arg h) / eta * g`, so that `h x = |h| sqrt(rho) / eta * g`.
pub fn phase_precompensate(g: &Vector, rho: f64, eta: f64, h: Complex64) -> Result<CVector> {
    if h.norm() == 0.0 {
        return Err(Error::invalid("h", "zero channel gain; device drops out this round"));
    }
    if g.iter().all(|v| *v == 0.0) {
        return Ok(CVector::zeros(g.len()));
    }
    if eta == 0.0 {
        return Err(Error::invalid("eta", "must be nonzero for a nonzero update"));
    }
    let rot = Complex64::from_polar(rho.sqrt() / eta, -h.arg());
    Ok(g.map(|v| rot * v))
}
