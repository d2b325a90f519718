//! Synthetic task environments with exact oracles.
//!
//! Each device draws a task vector `w_i ~ N(w0, spread * I)` and generates
//! data `(x, y)` with `x ~ N(0, Sigma)`. The quadratic family uses
//! `y = <w_i, x> + eps` with squared loss; the logistic family uses a
//! Bernoulli label with a logistic link and cross-entropy loss.
//!
//! For the quadratic family the population quantities are closed form:
//!
//! ```text
//! f_i(phi)   = 1/2 (phi - w_i)' Sigma (phi - w_i) + 1/2 s_y^2
//! F_i(theta) = f_i(theta - alpha grad f_i(theta))
//! grad F_i   = (I - alpha Sigma) Sigma (I - alpha Sigma) (theta - w_i)
//! ```

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::SimRng;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Quadratic,
    Logistic,
}

/// Covariance of the device inputs, stored with a square-root factor for sampling.
#[derive(Debug, Clone)]
pub struct InputCovariance {
    cov: Matrix,
    factor: Matrix,
    eigenvalues: Vector,
    isotropic: Option<f64>,
}

impl InputCovariance {
    pub fn isotropic(dim: usize, scale: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::invalid("input_cov", "scale must be finite and >= 0"));
        }
        Ok(Self {
            cov: Matrix::identity(dim, dim) * scale,
            factor: Matrix::identity(dim, dim) * scale.sqrt(),
            eigenvalues: Vector::from_element(dim, scale),
            isotropic: Some(scale),
        })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if diag.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("input_cov", "diagonal entries must be finite and >= 0"));
        }
        let d = Vector::from_column_slice(diag);
        let isotropic = diag.iter().all(|v| *v == diag[0]).then_some(diag[0]);
        Ok(Self {
            cov: Matrix::from_diagonal(&d),
            factor: Matrix::from_diagonal(&d.map(f64::sqrt)),
            eigenvalues: d,
            isotropic,
        })
    }

    /// Full symmetric PSD matrix. Eigenvalues down to `-1e-12 * scale` are clamped to zero.
    pub fn full(cov: Matrix) -> Result<Self> {
        if cov.nrows() == 0 || cov.nrows() != cov.ncols() {
            return Err(Error::invalid("input_cov", "must be a non-empty square matrix"));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input_cov"));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::invalid("input_cov", "matrix is not symmetric"));
        }
        let eig = SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.min() < -1e-12 * scale {
            return Err(Error::invalid("input_cov", "matrix is not positive semi-definite"));
        }
        let eigenvalues = eig.eigenvalues.map(|v| v.max(0.0));
        let factor = &eig.eigenvectors * Matrix::from_diagonal(&eigenvalues.map(f64::sqrt));
        Ok(Self {
            cov,
            factor,
            eigenvalues,
            isotropic: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.cov
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.max()
    }

    pub fn eigenvalues(&self) -> &Vector {
        &self.eigenvalues
    }

    /// `Some(s)` when the covariance is `s * I`.
    pub fn isotropic_scale(&self) -> Option<f64> {
        self.isotropic
    }

    pub fn sample(&self, rng: &mut SimRng) -> Vector {
        let z = Vector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        match self.isotropic {
            Some(s) => z * s.sqrt(),
            None => &self.factor * z,
        }
    }
}

/// Distribution over devices: task centre, spread, input law and label noise.
#[derive(Debug, Clone)]
pub struct TaskEnvironment {
    pub family: TaskFamily,
    pub center: Vector,
    pub task_spread: f64,
    pub input_cov: InputCovariance,
    pub label_noise: f64,
}

impl TaskEnvironment {
    pub fn new(
        family: TaskFamily,
        center: Vector,
        task_spread: f64,
        input_cov: InputCovariance,
        label_noise: f64,
    ) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        check_dim(center.len(), input_cov.dim())?;
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("center"));
        }
        if !(task_spread.is_finite() && task_spread >= 0.0) {
            return Err(Error::invalid("task_spread", "must be finite and >= 0"));
        }
        if !(label_noise.is_finite() && label_noise >= 0.0) {
            return Err(Error::invalid("label_noise", "must be finite and >= 0"));
        }
        Ok(Self {
            family,
            center,
            task_spread,
            input_cov,
            label_noise,
        })
    }

    /// Quadratic family, `d = 20`, `Sigma = I`, centre of ones.
    pub fn quadratic_default() -> Self {
        let d = 20;
        Self::new(
            TaskFamily::Quadratic,
            Vector::from_element(d, 1.0),
            0.25,
            InputCovariance::isotropic(d, 1.0).expect("valid"),
            0.25,
        )
        .expect("valid default environment")
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn loss(&self, phi: &Vector, z: &DataPoint) -> Result<f64> {
        check_dim(self.dim(), phi.len())?;
        check_dim(self.dim(), z.x.len())?;
        let s = phi.dot(&z.x);
        Ok(match self.family {
            TaskFamily::Quadratic => 0.5 * (z.y - s).powi(2),
            TaskFamily::Logistic => softplus(s) - z.y * s,
        })
    }

    pub fn grad(&self, phi: &Vector, z: &DataPoint) -> Result<Vector> {
        check_dim(self.dim(), phi.len())?;
        check_dim(self.dim(), z.x.len())?;
        Ok(&z.x * self.grad_coeff(phi, z))
    }

    pub fn hessian(&self, phi: &Vector, z: &DataPoint) -> Result<Matrix> {
        check_dim(self.dim(), phi.len())?;
        check_dim(self.dim(), z.x.len())?;
        Ok(&z.x * z.x.transpose() * self.hessian_weight(phi, z))
    }

    /// Scalar `c` with `grad = c * x`.
    fn grad_coeff(&self, phi: &Vector, z: &DataPoint) -> f64 {
        let s = phi.dot(&z.x);
        match self.family {
            TaskFamily::Quadratic => s - z.y,
            TaskFamily::Logistic => sigmoid(s) - z.y,
        }
    }

    /// Scalar `w` with `hessian = w * x x'`.
    fn hessian_weight(&self, phi: &Vector, z: &DataPoint) -> f64 {
        match self.family {
            TaskFamily::Quadratic => 1.0,
            TaskFamily::Logistic => {
                let p = sigmoid(phi.dot(&z.x));
                p * (1.0 - p)
            }
        }
    }

    /// Mean gradient over `batch`.
    pub fn batch_grad<'a, I>(&self, phi: &Vector, batch: I) -> Result<Vector>
    where
        I: IntoIterator<Item = &'a DataPoint>,
    {
        let mut acc = Vector::zeros(self.dim());
        let mut count = 0usize;
        for z in batch {
            check_dim(self.dim(), z.x.len())?;
            acc.axpy(self.grad_coeff(phi, z), &z.x, 1.0);
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(acc / count as f64)
    }

    /// Mean Hessian over `batch` applied to `v`, without forming the matrix.
    pub fn batch_hvp<'a, I>(&self, phi: &Vector, batch: I, v: &Vector) -> Result<Vector>
    where
        I: IntoIterator<Item = &'a DataPoint>,
    {
        let mut acc = Vector::zeros(self.dim());
        let mut count = 0usize;
        for z in batch {
            check_dim(self.dim(), z.x.len())?;
            acc.axpy(self.hessian_weight(phi, z) * z.x.dot(v), &z.x, 1.0);
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(acc / count as f64)
    }

    pub fn batch_hessian<'a, I>(&self, phi: &Vector, batch: I) -> Result<Matrix>
    where
        I: IntoIterator<Item = &'a DataPoint>,
    {
        let d = self.dim();
        let mut acc = Matrix::zeros(d, d);
        let mut count = 0usize;
        for z in batch {
            check_dim(d, z.x.len())?;
            acc.ger(self.hessian_weight(phi, z), &z.x, &z.x, 1.0);
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(acc / count as f64)
    }

    pub fn batch_loss<'a, I>(&self, phi: &Vector, batch: I) -> Result<f64>
    where
        I: IntoIterator<Item = &'a DataPoint>,
    {
        let mut acc = 0.0;
        let mut count = 0usize;
        for z in batch {
            acc += self.loss(phi, z)?;
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(acc / count as f64)
    }

    /// `(I - alpha Sigma) Sigma (I - alpha Sigma)`, the Hessian of every `F_i` (quadratic).
    pub fn meta_curvature(&self, alpha: f64) -> Result<Matrix> {
        self.require_quadratic("meta curvature")?;
        let sigma = self.input_cov.matrix();
        let d = self.dim();
        let shrink = Matrix::identity(d, d) - sigma * alpha;
        Ok(&shrink * sigma * &shrink)
    }

    /// Closed-form expected meta-test loss of a fresh device whose base learner
    /// takes one full-batch step on `m_tr` fresh samples (quadratic family).
    pub fn expected_meta_test_loss(&self, theta: &Vector, alpha: f64, m_tr: usize) -> Result<f64> {
        self.require_quadratic("expected meta-test loss")?;
        check_dim(self.dim(), theta.len())?;
        if m_tr == 0 {
            return Err(Error::invalid("m_tr", "must be positive"));
        }
        let k = self.adapted_loss_kernel(alpha, m_tr);
        let sigma = self.input_cov.matrix();
        let tr_sigma_sq = (sigma * sigma).trace();
        let u = theta - &self.center;
        let quad = u.dot(&(&k * &u)) + self.task_spread * k.trace();
        let noise = alpha * alpha * self.label_noise * tr_sigma_sq / m_tr as f64;
        Ok(0.5 * (quad + noise) + 0.5 * self.label_noise)
    }

    /// `E[(I - alpha S) Sigma (I - alpha S)]` for a sample covariance `S` of `m` Gaussian points.
    fn adapted_loss_kernel(&self, alpha: f64, m: usize) -> Matrix {
        let sigma = self.input_cov.matrix();
        let s2 = sigma * sigma;
        let s3 = &s2 * sigma;
        let m = m as f64;
        sigma - &s2 * (2.0 * alpha)
            + &s3 * (alpha * alpha * (1.0 + 1.0 / m))
            + sigma * (alpha * alpha * s2.trace() / m)
    }

    pub(crate) fn require_quadratic(&self, what: &'static str) -> Result<()> {
        match self.family {
            TaskFamily::Quadratic => Ok(()),
            TaskFamily::Logistic => Err(Error::NoClosedForm(what)),
        }
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// One device's data-generating distribution.
#[derive(Debug, Clone)]
pub struct DeviceDistribution {
    pub task: Vector,
    pub env: Arc<TaskEnvironment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub x: Vector,
    pub y: f64,
}

/// Local dataset; the first `train_len` points form the training split.
#[derive(Debug, Clone)]
pub struct Dataset {
    points: Vec<DataPoint>,
    train_len: usize,
}

impl Dataset {
    pub fn from_splits(train: Vec<DataPoint>, validation: Vec<DataPoint>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("m_tr", "training split must be non-empty"));
        }
        if validation.is_empty() {
            return Err(Error::invalid("m_va", "validation split must be non-empty"));
        }
        let train_len = train.len();
        let mut points = train;
        points.extend(validation);
        Ok(Self { points, train_len })
    }

    pub fn train(&self) -> &[DataPoint] {
        &self.points[..self.train_len]
    }

    pub fn validation(&self) -> &[DataPoint] {
        &self.points[self.train_len..]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn sample_device(env: &Arc<TaskEnvironment>, rng: &mut SimRng) -> DeviceDistribution {
    let spread = env.task_spread.sqrt();
    let task = Vector::from_fn(env.dim(), |i, _| {
        env.center[i] + spread * rng.sample::<f64, _>(StandardNormal)
    });
    DeviceDistribution {
        task,
        env: Arc::clone(env),
    }
}

impl DeviceDistribution {
    pub fn sample_point(&self, rng: &mut SimRng) -> DataPoint {
        let env = &self.env;
        let x = env.input_cov.sample(rng);
        let s = self.task.dot(&x);
        let y = match env.family {
            TaskFamily::Quadratic => {
                s + env.label_noise.sqrt() * rng.sample::<f64, _>(StandardNormal)
            }
            TaskFamily::Logistic => {
                if rng.random::<f64>() < sigmoid(s) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        DataPoint { x, y }
    }

    /// Exact population loss `f_i` (quadratic family).
    pub fn population_loss(&self, phi: &Vector) -> Result<f64> {
        self.env.require_quadratic("population loss")?;
        check_dim(self.env.dim(), phi.len())?;
        let u = phi - &self.task;
        Ok(0.5 * u.dot(&(self.env.input_cov.matrix() * &u)) + 0.5 * self.env.label_noise)
    }

    pub fn population_grad(&self, phi: &Vector) -> Result<Vector> {
        self.env.require_quadratic("population gradient")?;
        check_dim(self.env.dim(), phi.len())?;
        Ok(self.env.input_cov.matrix() * (phi - &self.task))
    }
}

pub fn sample_dataset(
    dist: &DeviceDistribution,
    m: usize,
    m_tr: usize,
    m_va: usize,
    rng: &mut SimRng,
) -> Result<Dataset> {
    if m_tr == 0 {
        return Err(Error::invalid("m_tr", "base learner needs at least one training point"));
    }
    if m_va == 0 {
        return Err(Error::invalid("m_va", "validation split needs at least one point"));
    }
    if m != m_tr + m_va {
        return Err(Error::invalid("m", format!("{m} != m_tr + m_va = {}", m_tr + m_va)));
    }
    let points: Vec<DataPoint> = (0..m).map(|_| dist.sample_point(rng)).collect();
    Ok(Dataset {
        points,
        train_len: m_tr,
    })
}

/// `F_i(theta) = f_i(theta - alpha grad f_i(theta))` (quadratic family).
pub fn population_meta_loss(theta: &Vector, dist: &DeviceDistribution, alpha: f64) -> Result<f64> {
    let step = dist.population_grad(theta)?;
    dist.population_loss(&(theta - step * alpha))
}

/// `grad F_i(theta) = (I - alpha Sigma) Sigma (I - alpha Sigma)(theta - w_i)` (quadratic family).
pub fn population_meta_grad(theta: &Vector, dist: &DeviceDistribution, alpha: f64) -> Result<Vector> {
    check_dim(dist.env.dim(), theta.len())?;
    Ok(dist.env.meta_curvature(alpha)? * (theta - &dist.task))
}

/// Oracle for the averaged meta-objective `F = (1/n) sum_i F_i` over the training devices.
pub trait MetaOracle: Send + Sync {
    fn value(&self, theta: &Vector, alpha: f64) -> f64;
    fn grad(&self, theta: &Vector, alpha: f64) -> Vector;
    /// Per-device gradients `grad F_i`.
    fn device_grads(&self, theta: &Vector, alpha: f64) -> Vec<Vector>;
    /// `min F` at the given inner step size.
    fn minimum(&self, alpha: f64) -> f64;
}

/// Exact oracle for the quadratic family.
#[derive(Debug, Clone)]
pub struct ClosedFormObjective {
    env: Arc<TaskEnvironment>,
    tasks: Vec<Vector>,
    mean_task: Vector,
}

impl ClosedFormObjective {
    pub fn new(devices: &[DeviceDistribution]) -> Result<Self> {
        let first = devices
            .first()
            .ok_or_else(|| Error::invalid("devices", "need at least one device"))?;
        first.env.require_quadratic("meta-objective")?;
        let tasks: Vec<Vector> = devices.iter().map(|d| d.task.clone()).collect();
        let mut mean_task = Vector::zeros(first.env.dim());
        for w in &tasks {
            mean_task += w;
        }
        mean_task /= tasks.len() as f64;
        Ok(Self {
            env: Arc::clone(&first.env),
            tasks,
            mean_task,
        })
    }

    pub fn minimizer(&self) -> &Vector {
        &self.mean_task
    }
}

impl MetaOracle for ClosedFormObjective {
    fn value(&self, theta: &Vector, alpha: f64) -> f64 {
        let k = self.env.meta_curvature(alpha).expect("quadratic");
        let quad: f64 = self
            .tasks
            .iter()
            .map(|w| {
                let u = theta - w;
                u.dot(&(&k * &u))
            })
            .sum();
        0.5 * quad / self.tasks.len() as f64 + 0.5 * self.env.label_noise
    }

    fn grad(&self, theta: &Vector, alpha: f64) -> Vector {
        self.env.meta_curvature(alpha).expect("quadratic") * (theta - &self.mean_task)
    }

    fn device_grads(&self, theta: &Vector, alpha: f64) -> Vec<Vector> {
        let k = self.env.meta_curvature(alpha).expect("quadratic");
        self.tasks.iter().map(|w| &k * (theta - w)).collect()
    }

    fn minimum(&self, alpha: f64) -> f64 {
        self.value(&self.mean_task, alpha)
    }
}

/// Large-sample oracle for families without a closed form. Each device gets a
/// fixed reference sample; `F_i` and its gradient are the full-sample versions
/// of the MAML objective.
#[derive(Debug, Clone)]
pub struct SampledObjective {
    env: Arc<TaskEnvironment>,
    samples: Vec<Vec<DataPoint>>,
    minimum_iters: usize,
}

impl SampledObjective {
    pub fn new(devices: &[DeviceDistribution], samples_per_device: usize, rng: &mut SimRng) -> Result<Self> {
        let first = devices
            .first()
            .ok_or_else(|| Error::invalid("devices", "need at least one device"))?;
        if samples_per_device == 0 {
            return Err(Error::invalid("samples_per_device", "must be positive"));
        }
        let samples = devices
            .iter()
            .map(|d| (0..samples_per_device).map(|_| d.sample_point(rng)).collect())
            .collect();
        Ok(Self {
            env: Arc::clone(&first.env),
            samples,
            minimum_iters: 2000,
        })
    }

    fn device_value(&self, pts: &[DataPoint], theta: &Vector, alpha: f64) -> f64 {
        let g = self.env.batch_grad(theta, pts).expect("non-empty");
        self.env.batch_loss(&(theta - g * alpha), pts).expect("non-empty")
    }

    fn device_grad(&self, pts: &[DataPoint], theta: &Vector, alpha: f64) -> Vector {
        let g = self.env.batch_grad(theta, pts).expect("non-empty");
        let outer = self.env.batch_grad(&(theta - g * alpha), pts).expect("non-empty");
        let hv = self.env.batch_hvp(theta, pts, &outer).expect("non-empty");
        outer - hv * alpha
    }
}

impl MetaOracle for SampledObjective {
    fn value(&self, theta: &Vector, alpha: f64) -> f64 {
        let n = self.samples.len() as f64;
        self.samples
            .iter()
            .map(|pts| self.device_value(pts, theta, alpha))
            .sum::<f64>()
            / n
    }

    fn grad(&self, theta: &Vector, alpha: f64) -> Vector {
        let mut acc = Vector::zeros(self.env.dim());
        for g in self.device_grads(theta, alpha) {
            acc += g;
        }
        acc / self.samples.len() as f64
    }

    fn device_grads(&self, theta: &Vector, alpha: f64) -> Vec<Vector> {
        self.samples
            .iter()
            .map(|pts| self.device_grad(pts, theta, alpha))
            .collect()
    }

    /// Full-batch gradient descent from the task centre.
    fn minimum(&self, alpha: f64) -> f64 {
        let lr = 1.0 / (4.0 * self.env.input_cov.lambda_max().max(1e-12));
        let mut theta = self.env.center.clone();
        for _ in 0..self.minimum_iters {
            let g = self.grad(&theta, alpha);
            if g.norm() < 1e-10 {
                break;
            }
            theta -= g * lr;
        }
        self.value(&theta, alpha)
    }
}

/// Writes datasets as CSV: `device_id,split,x_0..x_{d-1},y`.
pub fn write_datasets_csv<W: Write>(mut out: W, datasets: &[Dataset]) -> io::Result<()> {
    let d = datasets
        .iter()
        .find_map(|ds| ds.points.first().map(|p| p.x.len()))
        .unwrap_or(0);
    write!(out, "device_id,split")?;
    for j in 0..d {
        write!(out, ",x_{j}")?;
    }
    writeln!(out, ",y")?;
    for (id, ds) in datasets.iter().enumerate() {
        for (split, pts) in [("train", ds.train()), ("validation", ds.validation())] {
            for p in pts {
                write!(out, "{id},{split}")?;
                for v in p.x.iter() {
                    write!(out, ",{v}")?;
                }
                writeln!(out, ",{}", p.y)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn env_with(spread: f64, noise: f64, d: usize) -> Arc<TaskEnvironment> {
        Arc::new(
            TaskEnvironment::new(
                TaskFamily::Quadratic,
                Vector::from_fn(d, |i, _| i as f64 + 1.0),
                spread,
                InputCovariance::isotropic(d, 1.0).unwrap(),
                noise,
            )
            .unwrap(),
        )
    }

    #[test]
    fn zero_spread_device_equals_center() {
        let env = env_with(0.0, 0.0, 2);
        let dev = sample_device(&env, &mut stream_rng(1, Stream::DeviceTask, 0, 0));
        assert_eq!(dev.task.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn device_sampling_is_seeded() {
        let env = env_with(1.0, 0.0, 3);
        let a = sample_device(&env, &mut stream_rng(9, Stream::DeviceTask, 4, 0));
        let b = sample_device(&env, &mut stream_rng(9, Stream::DeviceTask, 4, 0));
        assert_eq!(a.task, b.task);
    }

    #[test]
    fn device_sample_mean_within_three_standard_errors() {
        let env = env_with(1.0, 0.0, 2);
        let mut rng = stream_rng(3, Stream::DeviceTask, 0, 0);
        let n = 100_000;
        let mut mean = Vector::zeros(2);
        for _ in 0..n {
            mean += sample_device(&env, &mut rng).task;
        }
        mean /= n as f64;
        let se = (1.0 / n as f64).sqrt();
        for i in 0..2 {
            assert!((mean[i] - env.center[i]).abs() < 3.0 * se, "{mean}");
        }
    }

    #[test]
    fn dataset_split_sizes_and_rejections() {
        let env = env_with(0.5, 0.1, 3);
        let dev = sample_device(&env, &mut stream_rng(1, Stream::DeviceTask, 0, 0));
        let mut rng = stream_rng(1, Stream::DeviceData, 0, 0);
        let ds = sample_dataset(&dev, 4, 2, 2, &mut rng).unwrap();
        assert_eq!(ds.train().len(), 2);
        assert_eq!(ds.validation().len(), 2);
        assert!(ds.train().iter().all(|p| !ds.validation().contains(p)));
        assert!(sample_dataset(&dev, 4, 0, 4, &mut rng).is_err());
        assert!(sample_dataset(&dev, 4, 4, 0, &mut rng).is_err());
        assert!(sample_dataset(&dev, 5, 2, 2, &mut rng).is_err());
    }

    #[test]
    fn noiseless_labels_are_exact() {
        let env = env_with(0.5, 0.0, 4);
        let dev = sample_device(&env, &mut stream_rng(2, Stream::DeviceTask, 0, 0));
        let ds = sample_dataset(&dev, 50, 25, 25, &mut stream_rng(2, Stream::DeviceData, 0, 0)).unwrap();
        for p in ds.train().iter().chain(ds.validation()) {
            assert!((p.y - dev.task.dot(&p.x)).abs() < 1e-12);
            assert_eq!(env.loss(&dev.task, p).unwrap(), 0.0);
            assert!(env.grad(&dev.task, p).unwrap().norm() < 1e-12);
        }
    }

    #[test]
    fn residual_variance_matches_label_noise() {
        let env = env_with(0.5, 1.0, 3);
        let dev = sample_device(&env, &mut stream_rng(5, Stream::DeviceTask, 0, 0));
        let mut rng = stream_rng(5, Stream::DeviceData, 0, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let p = dev.sample_point(&mut rng);
            let r = p.y - dev.task.dot(&p.x);
            sum += r;
            sum_sq += r * r;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.02, "var = {var}");
    }

    #[test]
    fn quadratic_loss_examples() {
        let env = env_with(0.0, 0.0, 2);
        let z = DataPoint {
            x: Vector::from_vec(vec![1.0, 0.0]),
            y: 2.0,
        };
        assert_eq!(env.loss(&Vector::zeros(2), &z).unwrap(), 2.0);
        assert!(matches!(
            env.loss(&Vector::zeros(3), &z),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn quadratic_hessian_independent_of_phi() {
        let env = env_with(0.0, 0.0, 3);
        let z = DataPoint {
            x: Vector::from_vec(vec![1.0, -2.0, 0.5]),
            y: 0.3,
        };
        let h1 = env.hessian(&Vector::zeros(3), &z).unwrap();
        let h2 = env.hessian(&Vector::from_element(3, 7.0), &z).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn meta_grad_closed_form_examples() {
        let env = env_with(0.0, 0.0, 2);
        let dev = DeviceDistribution {
            task: Vector::from_vec(vec![1.0, 2.0]),
            env: Arc::clone(&env),
        };
        let theta = &dev.task + Vector::from_vec(vec![1.0, 0.0]);
        let g = population_meta_grad(&theta, &dev, 0.5).unwrap();
        assert!((g - Vector::from_vec(vec![0.25, 0.0])).norm() < 1e-15);
        assert_eq!(population_meta_grad(&dev.task, &dev, 0.5).unwrap().norm(), 0.0);
        let plain = population_meta_grad(&theta, &dev, 0.0).unwrap();
        assert_eq!(plain, dev.population_grad(&theta).unwrap());
    }

    #[test]
    fn logistic_has_no_closed_form() {
        let env = Arc::new(
            TaskEnvironment::new(
                TaskFamily::Logistic,
                Vector::zeros(2),
                1.0,
                InputCovariance::isotropic(2, 1.0).unwrap(),
                0.0,
            )
            .unwrap(),
        );
        let dev = sample_device(&env, &mut stream_rng(1, Stream::DeviceTask, 0, 0));
        assert!(matches!(
            population_meta_grad(&Vector::zeros(2), &dev, 0.1),
            Err(Error::NoClosedForm(_))
        ));
    }

    #[test]
    fn full_covariance_validation() {
        let bad = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(InputCovariance::full(bad).is_err());
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(InputCovariance::full(asym).is_err());
        let ok = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let cov = InputCovariance::full(ok.clone()).unwrap();
        let mut rng = stream_rng(4, Stream::Probe, 0, 0);
        let n = 50_000;
        let mut acc = Matrix::zeros(2, 2);
        for _ in 0..n {
            let x = cov.sample(&mut rng);
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        assert!((acc - ok).amax() < 0.05);
    }

    #[test]
    fn dataset_csv_layout() {
        let env = env_with(0.0, 0.0, 2);
        let dev = sample_device(&env, &mut stream_rng(1, Stream::DeviceTask, 0, 0));
        let ds = sample_dataset(&dev, 3, 2, 1, &mut stream_rng(1, Stream::DeviceData, 0, 0)).unwrap();
        let mut buf = Vec::new();
        write_datasets_csv(&mut buf, &[ds]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "device_id,split,x_0,x_1,y");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("0,validation,"));
    }
}
