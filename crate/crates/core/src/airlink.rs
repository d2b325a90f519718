//! Compression, fading multiple-access superposition and server-side estimation.
//!
//! Devices send `x_i = A * xt_i` where `xt_i` is the phase pre-compensated
//! sparse update. The server receives `y = sum_i h_i x_i + n` and estimates
//! the co-phased superposition `s = sum_i |h_i| sqrt(rho) / eta * g_i`.
//! Noise is circularly symmetric with variance `noise_var` on each real
//! component; when `A` is real only the real part of `y` carries signal and
//! the imaginary part is discarded.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SVD};
use num_complex::Complex64;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::SimRng;
use crate::sparse_feedback::CVector;
use crate::task_model::{Matrix, Vector};

pub type CMatrix = DMatrix<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionKind {
    PartialDft,
    RowSubsetUnitary,
    Identity,
}

#[derive(Debug, Clone)]
pub struct CompressionMatrix {
    kind: CompressionKind,
    a: CMatrix,
    rows: Vec<usize>,
    is_real: bool,
}

impl CompressionMatrix {
    pub fn kind(&self) -> CompressionKind {
        self.kind
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.a
    }

    pub fn channel_uses(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    /// Rows of the parent unitary matrix that were kept.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn is_real(&self) -> bool {
        self.is_real
    }

    pub fn spectral_norm(&self) -> f64 {
        SVD::new(self.a.clone(), false, false).singular_values.max()
    }

    /// `max |A A^H - I|`.
    pub fn gram_error(&self) -> f64 {
        let m = self.a.nrows();
        let gram = &self.a * self.a.adjoint();
        (gram - CMatrix::identity(m, m)).iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn apply(&self, x: &CVector) -> Result<CVector> {
        check_dim(self.dim(), x.len())?;
        Ok(&self.a * x)
    }

    /// Real stacked form `[Re A; Im A]`; the imaginary block is omitted for real `A`.
    pub fn real_form(&self) -> Matrix {
        let re = self.a.map(|c| c.re);
        if self.is_real {
            return re;
        }
        let (m, d) = self.a.shape();
        let mut out = Matrix::zeros(2 * m, d);
        out.rows_mut(0, m).copy_from(&re);
        out.rows_mut(m, m).copy_from(&self.a.map(|c| c.im));
        out
    }

    fn real_observation(&self, y: &CVector) -> Vector {
        let m = y.len();
        if self.is_real {
            return y.map(|c| c.re);
        }
        Vector::from_fn(2 * m, |i, _| if i < m { y[i].re } else { y[i - m].im })
    }
}

pub fn make_compression(kind: CompressionKind, m: usize, d: usize, rng: &mut SimRng) -> Result<CompressionMatrix> {
    if d == 0 || m == 0 {
        return Err(Error::invalid("channel_uses", "M and d must be at least 1"));
    }
    if m > d {
        return Err(Error::invalid("channel_uses", format!("M = {m} exceeds d = {d}")));
    }
    let (a, rows) = match kind {
        CompressionKind::Identity => {
            if m != d {
                return Err(Error::invalid("channel_uses", "identity compression requires M = d"));
            }
            (CMatrix::identity(d, d), (0..d).collect())
        }
        CompressionKind::PartialDft => {
            let rows = sorted_rows(rng, d, m);
            let scale = 1.0 / (d as f64).sqrt();
            let a = CMatrix::from_fn(m, d, |i, j| {
                let phase = -2.0 * std::f64::consts::PI * ((rows[i] * j) % d) as f64 / d as f64;
                Complex64::from_polar(scale, phase)
            });
            (a, rows)
        }
        CompressionKind::RowSubsetUnitary => {
            let q = haar_orthogonal(d, rng);
            let rows = sorted_rows(rng, d, m);
            let a = CMatrix::from_fn(m, d, |i, j| Complex64::new(q[(rows[i], j)], 0.0));
            (a, rows)
        }
    };
    let is_real = a.iter().all(|c| c.im == 0.0);
    let out = CompressionMatrix { kind, a, rows, is_real };
    let norm = out.spectral_norm();
    if norm > 1.0 + 1e-8 {
        return Err(Error::invalid("compression", format!("spectral norm {norm} exceeds 1")));
    }
    Ok(out)
}

fn sorted_rows(rng: &mut SimRng, d: usize, m: usize) -> Vec<usize> {
    let mut rows = index::sample(rng, d, m).into_vec();
    rows.sort_unstable();
    rows
}

/// Haar-distributed orthogonal matrix from the sign-corrected QR of a Gaussian matrix.
fn haar_orthogonal(d: usize, rng: &mut SimRng) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingModel {
    /// `h ~ CN(0, 1)`.
    RayleighCn01,
    FixedUnit,
}

impl FadingModel {
    /// `E|h|`.
    pub fn mu_h(self) -> f64 {
        match self {
            FadingModel::RayleighCn01 => std::f64::consts::PI.sqrt() / 2.0,
            FadingModel::FixedUnit => 1.0,
        }
    }

    /// `E|h|^2`.
    pub fn sigma_h_sq(self) -> f64 {
        1.0
    }

    pub fn sample(self, rng: &mut SimRng) -> Complex64 {
        match self {
            FadingModel::RayleighCn01 => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                Complex64::new(
                    s * rng.sample::<f64, _>(StandardNormal),
                    s * rng.sample::<f64, _>(StandardNormal),
                )
            }
            FadingModel::FixedUnit => Complex64::new(1.0, 0.0),
        }
    }
}

/// Noise variance per real component that realises `snr = rn P sigma_h^2 / noise_var`.
pub fn noise_var_for_snr(snr_db: f64, n_active: usize, power_per_use: f64, fading: FadingModel) -> f64 {
    n_active as f64 * power_per_use * fading.sigma_h_sq() / 10f64.powf(snr_db / 10.0)
}

/// Realised channel state of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRound {
    pub gains: BTreeMap<usize, Complex64>,
    pub noise_var: f64,
    pub noise: CVector,
    pub fading: FadingModel,
}

pub fn sample_channel(
    active: &[usize],
    fading: FadingModel,
    noise_var: f64,
    channel_uses: usize,
    rng: &mut SimRng,
) -> Result<ChannelRound> {
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::invalid("noise_var", "must be finite and >= 0"));
    }
    let mut ids = active.to_vec();
    ids.sort_unstable();
    let gains = ids.into_iter().map(|id| (id, fading.sample(rng))).collect();
    let sd = noise_var.sqrt();
    let noise = CVector::from_fn(channel_uses, |_, _| {
        Complex64::new(
            sd * rng.sample::<f64, _>(StandardNormal),
            sd * rng.sample::<f64, _>(StandardNormal),
        )
    });
    Ok(ChannelRound {
        gains,
        noise_var,
        noise,
        fading,
    })
}

/// Compressed transmit signal of one device.
#[derive(Debug, Clone)]
pub struct TransmitPacket {
    pub device_id: usize,
    pub x: CVector,
}

impl TransmitPacket {
    /// `(1/M) |x|^2`.
    pub fn power_per_use(&self) -> f64 {
        self.x.norm_squared() / self.x.len() as f64
    }
}

/// `y = sum_i h_i x_i + n`, summed in ascending device order.
pub fn transmit_mac(packets: &[TransmitPacket], ch: &ChannelRound) -> Result<CVector> {
    let m = ch.noise.len();
    let mut sorted: Vec<&TransmitPacket> = packets.iter().collect();
    sorted.sort_by_key(|p| p.device_id);
    let mut y = CVector::zeros(m);
    for p in sorted {
        check_dim(m, p.x.len())?;
        let h = *ch
            .gains
            .get(&p.device_id)
            .ok_or_else(|| Error::invalid("device_id", format!("no channel gain for device {}", p.device_id)))?;
        y.axpy(h, &p.x, Complex64::new(1.0, 0.0));
    }
    Ok(y + &ch.noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    MatchedIdentity,
    Lmmse,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub x_hat: Vector,
    /// Model error variance per component.
    pub v: f64,
    /// Set when a noiseless rank-deficient system fell back to the pseudo-inverse.
    pub pseudo_inverse: bool,
}

/// Estimates the real superposition from `y`.
///
/// The LMMSE estimator uses a zero-mean prior with per-component variance
/// `prior_power`. Its reported `v` is the posterior error covariance trace over `d`.
pub fn estimate(
    y: &CVector,
    a: &CompressionMatrix,
    prior_power: f64,
    noise_var: f64,
    kind: EstimatorKind,
) -> Result<Estimate> {
    check_dim(a.channel_uses(), y.len())?;
    let d = a.dim();
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::invalid("noise_var", "must be finite and >= 0"));
    }
    match kind {
        EstimatorKind::MatchedIdentity => {
            if a.channel_uses() != d {
                return Err(Error::invalid("estimator", "matched identity requires M = d"));
            }
            let x_hat = (a.matrix().adjoint() * y).map(|c| c.re);
            Ok(Estimate {
                x_hat,
                v: noise_var,
                pseudo_inverse: false,
            })
        }
        EstimatorKind::Lmmse => {
            if !(prior_power.is_finite() && prior_power >= 0.0) {
                return Err(Error::invalid("prior_power", "must be finite and >= 0"));
            }
            if prior_power == 0.0 {
                return Ok(Estimate {
                    x_hat: Vector::zeros(d),
                    v: 0.0,
                    pseudo_inverse: false,
                });
            }
            let ar = a.real_form();
            let yr = a.real_observation(y);
            if noise_var == 0.0 {
                return Ok(noiseless_inverse(&ar, &yr, prior_power));
            }
            let mut gram = ar.transpose() * &ar;
            for i in 0..d {
                gram[(i, i)] += noise_var / prior_power;
            }
            let chol = gram
                .cholesky()
                .ok_or(Error::NonFinite("LMMSE normal equations"))?;
            let x_hat = chol.solve(&(ar.transpose() * yr));
            let v = noise_var * chol.inverse().trace() / d as f64;
            Ok(Estimate {
                x_hat,
                v,
                pseudo_inverse: false,
            })
        }
    }
}

fn noiseless_inverse(ar: &Matrix, yr: &Vector, prior_power: f64) -> Estimate {
    let d = ar.ncols();
    let svd = SVD::new(ar.clone(), true, true);
    let tol = 1e-10 * svd.singular_values.max().max(1.0);
    let rank = svd.rank(tol);
    let x_hat = svd.solve(yr, tol).expect("u and v were computed");
    Estimate {
        x_hat,
        v: prior_power * (d - rank) as f64 / d as f64,
        pseudo_inverse: rank < d,
    }
}

/// `theta' = theta - eta / (mu_h sqrt(rho) rn) * x_hat`.
pub fn global_update(theta: &Vector, x_hat: &Vector, eta: f64, rho: f64, mu_h: f64, n_active: usize) -> Result<Vector> {
    check_dim(theta.len(), x_hat.len())?;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid("rho", "must be finite and > 0"));
    }
    if n_active == 0 {
        return Err(Error::invalid("n_active", "must be at least 1"));
    }
    if mu_h <= 0.0 {
        return Err(Error::invalid("mu_h", "must be > 0"));
    }
    Ok(theta - x_hat * (eta / (mu_h * rho.sqrt() * n_active as f64)))
}
