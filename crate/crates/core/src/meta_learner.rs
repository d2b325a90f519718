//! Per-device MAML computations.
//!
//! A local step adapts `theta` on a training mini-batch `B`, evaluates the
//! gradient of the adapted model on a validation mini-batch `B'`, and
//! corrects it with the Hessian of a third batch `B''`:
//!
//! ```text
//! phi  = theta - alpha * grad(theta; B)
//! step = (I - alpha * H(theta; B'')) * grad(phi; B')
//! ```
//!
//! `B` is drawn from the training split; `B'` and `B''` are disjoint
//! subsets of the validation split.

use std::ops::Deref;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::SimRng;
use crate::task_model::{Dataset, TaskEnvironment, Vector};

/// Parameter vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperVector(Vector);

impl HyperVector {
    pub fn new(values: Vector) -> Result<Self> {
        ensure_finite(&values, "hyper vector")?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(Vector::zeros(dim))
    }

    pub fn into_inner(self) -> Vector {
        self.0
    }
}

impl Deref for HyperVector {
    type Target = Vector;
    fn deref(&self) -> &Vector {
        &self.0
    }
}

pub(crate) fn ensure_finite(v: &Vector, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub alpha: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub first_order: bool,
}

impl LocalConfig {
    /// Checks ranges; when `l_g` is known also enforces `alpha <= 1 / l_g`.
    pub fn validate(&self, l_g: Option<f64>) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid("alpha", "must be finite and >= 0"));
        }
        if let Some(l) = l_g.filter(|l| *l > 0.0) {
            if self.alpha > 1.0 / l * (1.0 + 1e-12) {
                return Err(Error::invalid("alpha", format!("{} exceeds 1/L_G = {}", self.alpha, 1.0 / l)));
            }
        }
        if self.local_steps == 0 {
            return Err(Error::invalid("local_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// `phi = theta - alpha * mean grad` over the batch.
pub fn inner_adapt<'a, I>(env: &TaskEnvironment, theta: &Vector, batch: I, alpha: f64) -> Result<Vector>
where
    I: IntoIterator<Item = &'a crate::task_model::DataPoint>,
{
    check_dim(env.dim(), theta.len())?;
    let g = env.batch_grad(theta, batch)?;
    Ok(theta - g * alpha)
}

/// Indices of the three mini-batches used by one local step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDraw {
    /// Indices into the training split.
    pub inner: Vec<usize>,
    /// Indices into the validation split, for the outer gradient.
    pub outer: Vec<usize>,
    /// Indices into the validation split, for the Hessian. Disjoint from `outer`.
    pub hessian: Vec<usize>,
}

pub fn draw_batches(dataset: &Dataset, batch_size: usize, rng: &mut SimRng) -> Result<BatchDraw> {
    let m_tr = dataset.train().len();
    let m_va = dataset.validation().len();
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    if m_tr < batch_size {
        return Err(Error::DatasetTooSmall {
            pool: "train",
            needed: batch_size,
            available: m_tr,
        });
    }
    if m_va < 2 * batch_size {
        return Err(Error::DatasetTooSmall {
            pool: "validation",
            needed: 2 * batch_size,
            available: m_va,
        });
    }
    let inner = index::sample(rng, m_tr, batch_size).into_vec();
    let mut va = index::sample(rng, m_va, 2 * batch_size).into_vec();
    let hessian = va.split_off(batch_size);
    Ok(BatchDraw {
        inner,
        outer: va,
        hessian,
    })
}

/// Meta-gradient estimate on an explicit batch draw.
pub fn meta_grad_on_batches(
    env: &TaskEnvironment,
    theta: &Vector,
    dataset: &Dataset,
    draw: &BatchDraw,
    alpha: f64,
    first_order: bool,
) -> Result<Vector> {
    let train = dataset.train();
    let val = dataset.validation();
    let phi = inner_adapt(env, theta, draw.inner.iter().map(|&i| &train[i]), alpha)?;
    let outer = env.batch_grad(&phi, draw.outer.iter().map(|&i| &val[i]))?;
    if first_order || alpha == 0.0 {
        return Ok(outer);
    }
    let hv = env.batch_hvp(theta, draw.hessian.iter().map(|&i| &val[i]), &outer)?;
    Ok(outer - hv * alpha)
}

pub fn meta_grad_estimate(
    env: &TaskEnvironment,
    theta: &Vector,
    dataset: &Dataset,
    cfg: &LocalConfig,
    rng: &mut SimRng,
) -> Result<Vector> {
    let draw = draw_batches(dataset, cfg.batch_size, rng)?;
    meta_grad_on_batches(env, theta, dataset, &draw, cfg.alpha, cfg.first_order)
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub theta_end: Vector,
    /// `theta_start - theta_end`.
    pub delta: Vector,
    /// `theta^(q)` for `q = 0..=Q`.
    pub iterates: Vec<Vector>,
}

/// `Q` local SGD steps on the meta-objective.
pub fn local_rounds(
    env: &TaskEnvironment,
    theta_start: &Vector,
    dataset: &Dataset,
    cfg: &LocalConfig,
    eta: f64,
    rng: &mut SimRng,
) -> Result<LocalOutcome> {
    check_dim(env.dim(), theta_start.len())?;
    ensure_finite(theta_start, "theta")?;
    let mut iterates = Vec::with_capacity(cfg.local_steps + 1);
    let mut theta = theta_start.clone();
    iterates.push(theta.clone());
    for _ in 0..cfg.local_steps {
        let g = meta_grad_estimate(env, &theta, dataset, cfg, rng)?;
        theta.axpy(-eta, &g, 1.0);
        iterates.push(theta.clone());
    }
    Ok(LocalOutcome {
        delta: theta_start - &theta,
        theta_end: theta,
        iterates,
    })
}

/// `theta - mean(deltas)`.
pub fn ideal_aggregate(theta: &Vector, deltas: &[Vector]) -> Result<Vector> {
    if deltas.is_empty() {
        return Err(Error::invalid("deltas", "need at least one model difference"));
    }
    let mut acc = Vector::zeros(theta.len());
    for d in deltas {
        check_dim(theta.len(), d.len())?;
        acc += d;
    }
    Ok(theta - acc / deltas.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::task_model::{
        population_meta_grad, sample_dataset, DataPoint, DeviceDistribution, InputCovariance, TaskFamily,
    };
    use proptest::prelude::*;
    use std::sync::Arc;

    fn env(d: usize) -> Arc<TaskEnvironment> {
        Arc::new(
            TaskEnvironment::new(
                TaskFamily::Quadratic,
                Vector::zeros(d),
                1.0,
                InputCovariance::isotropic(d, 1.0).unwrap(),
                0.1,
            )
            .unwrap(),
        )
    }

    fn device(env: &Arc<TaskEnvironment>, seed: u64) -> DeviceDistribution {
        crate::task_model::sample_device(env, &mut stream_rng(seed, Stream::DeviceTask, 0, 0))
    }

    /// Batch of `sqrt(d) e_j` inputs with noiseless labels: its empirical covariance is exactly `I`.
    fn design_points(task: &Vector) -> Vec<DataPoint> {
        let d = task.len();
        (0..d)
            .map(|j| {
                let mut x = Vector::zeros(d);
                x[j] = (d as f64).sqrt();
                DataPoint { y: task.dot(&x), x }
            })
            .collect()
    }

    #[test]
    fn inner_adapt_examples() {
        let e = env(2);
        let batch = [DataPoint {
            x: Vector::from_vec(vec![1.0, 0.0]),
            y: 0.0,
        }];
        let theta = Vector::from_vec(vec![1.0, 0.0]);
        assert_eq!(inner_adapt(&e, &theta, &batch, 0.0).unwrap(), theta);
        let phi = inner_adapt(&e, &theta, &batch, 0.5).unwrap();
        assert_eq!(phi.as_slice(), &[0.5, 0.0]);
        assert!(matches!(inner_adapt(&e, &theta, &[], 0.5), Err(Error::EmptyBatch)));
    }

    #[test]
    fn inner_adapt_matches_literal_sum() {
        let e = env(3);
        let dev = device(&e, 1);
        let ds = sample_dataset(&dev, 10, 5, 5, &mut stream_rng(1, Stream::DeviceData, 0, 0)).unwrap();
        let theta = Vector::from_vec(vec![0.3, -0.2, 0.9]);
        let phi = inner_adapt(&e, &theta, ds.train(), 0.3).unwrap();
        let mut manual = [0.0; 3];
        for p in ds.train() {
            let r = p.y - (0..3).map(|j| theta[j] * p.x[j]).sum::<f64>();
            for j in 0..3 {
                manual[j] += -r * p.x[j];
            }
        }
        for j in 0..3 {
            let want = theta[j] - 0.3 / 5.0 * manual[j];
            assert!((phi[j] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn full_design_batches_recover_closed_form() {
        let d = 2;
        let e = Arc::new(
            TaskEnvironment::new(
                TaskFamily::Quadratic,
                Vector::zeros(d),
                0.0,
                InputCovariance::isotropic(d, 1.0).unwrap(),
                0.0,
            )
            .unwrap(),
        );
        let dev = DeviceDistribution {
            task: Vector::from_vec(vec![1.0, 2.0]),
            env: Arc::clone(&e),
        };
        let pts = design_points(&dev.task);
        let mut val = pts.clone();
        val.extend(pts.clone());
        let ds = Dataset::from_splits(pts, val).unwrap();
        let draw = BatchDraw {
            inner: (0..d).collect(),
            outer: (0..d).collect(),
            hessian: (d..2 * d).collect(),
        };
        let theta = &dev.task + Vector::from_vec(vec![1.0, 0.0]);
        let g = meta_grad_on_batches(&e, &theta, &ds, &draw, 0.5, false).unwrap();
        assert!((&g - Vector::from_vec(vec![0.25, 0.0])).norm() < 1e-14);
        let exact = population_meta_grad(&theta, &dev, 0.5).unwrap();
        assert!((g - exact).norm() < 1e-14);
    }

    #[test]
    fn alpha_zero_is_plain_batch_gradient() {
        let e = env(3);
        let dev = device(&e, 2);
        let ds = sample_dataset(&dev, 12, 4, 8, &mut stream_rng(2, Stream::DeviceData, 0, 0)).unwrap();
        let mut rng = stream_rng(2, Stream::LocalSgd, 0, 0);
        let draw = draw_batches(&ds, 4, &mut rng).unwrap();
        let theta = Vector::from_vec(vec![0.5, 0.1, -0.4]);
        let g = meta_grad_on_batches(&e, &theta, &ds, &draw, 0.0, false).unwrap();
        let plain = e
            .batch_grad(&theta, draw.outer.iter().map(|&i| &ds.validation()[i]))
            .unwrap();
        assert_eq!(g, plain);
    }

    #[test]
    fn batch_draw_size_errors() {
        let e = env(2);
        let dev = device(&e, 3);
        let ds = sample_dataset(&dev, 10, 4, 6, &mut stream_rng(3, Stream::DeviceData, 0, 0)).unwrap();
        let mut rng = stream_rng(3, Stream::LocalSgd, 0, 0);
        assert!(draw_batches(&ds, 3, &mut rng).is_ok());
        assert!(matches!(
            draw_batches(&ds, 4, &mut rng),
            Err(Error::DatasetTooSmall { pool: "validation", .. })
        ));
        assert!(matches!(
            draw_batches(&ds, 5, &mut rng),
            Err(Error::DatasetTooSmall { pool: "train", .. })
        ));
    }

    #[test]
    fn local_rounds_examples() {
        let e = env(3);
        let dev = device(&e, 4);
        let ds = sample_dataset(&dev, 12, 4, 8, &mut stream_rng(4, Stream::DeviceData, 0, 0)).unwrap();
        let cfg = LocalConfig {
            alpha: 0.3,
            local_steps: 1,
            batch_size: 2,
            first_order: false,
        };
        let theta = Vector::from_vec(vec![0.2, 0.2, 0.2]);
        let out = local_rounds(&e, &theta, &ds, &cfg, 0.1, &mut stream_rng(4, Stream::LocalSgd, 0, 0)).unwrap();
        let g = meta_grad_estimate(&e, &theta, &ds, &cfg, &mut stream_rng(4, Stream::LocalSgd, 0, 0)).unwrap();
        assert!((out.delta - g * 0.1).norm() < 1e-15);

        let still = local_rounds(&e, &theta, &ds, &cfg, 0.0, &mut stream_rng(4, Stream::LocalSgd, 0, 0)).unwrap();
        assert_eq!(still.delta.norm(), 0.0);
    }

    #[test]
    fn local_rounds_replay_step_by_step() {
        let e = env(4);
        let dev = device(&e, 5);
        let ds = sample_dataset(&dev, 30, 10, 20, &mut stream_rng(5, Stream::DeviceData, 0, 0)).unwrap();
        let cfg = LocalConfig {
            alpha: 0.2,
            local_steps: 3,
            batch_size: 4,
            first_order: false,
        };
        let theta = Vector::from_element(4, 0.7);
        let out = local_rounds(&e, &theta, &ds, &cfg, 0.05, &mut stream_rng(5, Stream::LocalSgd, 1, 2)).unwrap();

        let mut rng = stream_rng(5, Stream::LocalSgd, 1, 2);
        let mut t = theta.clone();
        for q in 0..3 {
            let draw = draw_batches(&ds, 4, &mut rng).unwrap();
            let g = meta_grad_on_batches(&e, &t, &ds, &draw, 0.2, false).unwrap();
            t -= g * 0.05;
            assert_eq!(t, out.iterates[q + 1]);
        }
        assert_eq!(theta - t, out.delta);
    }

    #[test]
    fn ideal_aggregate_examples() {
        let theta = Vector::from_vec(vec![1.0, 2.0]);
        assert_eq!(ideal_aggregate(&theta, &[Vector::zeros(2)]).unwrap(), theta);
        let v = Vector::from_vec(vec![0.5, -1.0]);
        assert_eq!(ideal_aggregate(&theta, std::slice::from_ref(&v)).unwrap(), &theta - &v);
        let ds = [
            Vector::from_vec(vec![1.0, 0.0]),
            Vector::from_vec(vec![0.0, 3.0]),
            Vector::from_vec(vec![2.0, 0.0]),
        ];
        let got = ideal_aggregate(&theta, &ds).unwrap();
        assert_eq!(got.as_slice(), &[0.0, 1.0]);
        assert!(ideal_aggregate(&theta, &[]).is_err());
    }

    #[test]
    fn hyper_vector_rejects_nan() {
        assert!(HyperVector::new(Vector::from_vec(vec![1.0, f64::NAN])).is_err());
        assert!(HyperVector::new(Vector::from_vec(vec![1.0, f64::INFINITY])).is_err());
        assert_eq!(HyperVector::zeros(3).len(), 3);
    }

    #[test]
    fn alpha_bound_enforced_when_smoothness_known() {
        let cfg = LocalConfig {
            alpha: 0.6,
            local_steps: 1,
            batch_size: 1,
            first_order: false,
        };
        assert!(cfg.validate(None).is_ok());
        assert!(cfg.validate(Some(1.0)).is_ok());
        assert!(cfg.validate(Some(2.0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn local_rounds_deterministic(seed in 0u64..1000, q in 1usize..4) {
            let e = env(3);
            let dev = device(&e, seed);
            let ds = sample_dataset(&dev, 18, 6, 12, &mut stream_rng(seed, Stream::DeviceData, 0, 0)).unwrap();
            let cfg = LocalConfig { alpha: 0.2, local_steps: q, batch_size: 3, first_order: seed % 2 == 0 };
            let theta = Vector::from_element(3, 0.1);
            let a = local_rounds(&e, &theta, &ds, &cfg, 0.1, &mut stream_rng(seed, Stream::LocalSgd, 0, 0)).unwrap();
            let b = local_rounds(&e, &theta, &ds, &cfg, 0.1, &mut stream_rng(seed, Stream::LocalSgd, 0, 0)).unwrap();
            prop_assert_eq!(a.delta, b.delta);
        }

        #[test]
        fn batches_are_disjoint_and_in_range(seed in 0u64..1000, b in 1usize..5) {
            let e = env(2);
            let dev = device(&e, seed);
            let ds = sample_dataset(&dev, 30, 10, 20, &mut stream_rng(seed, Stream::DeviceData, 0, 0)).unwrap();
            let draw = draw_batches(&ds, b, &mut stream_rng(seed, Stream::LocalSgd, 0, 0)).unwrap();
            prop_assert_eq!(draw.inner.len(), b);
            prop_assert!(draw.inner.iter().all(|&i| i < 10));
            prop_assert!(draw.outer.iter().chain(&draw.hessian).all(|&i| i < 20));
            prop_assert!(draw.outer.iter().all(|i| !draw.hessian.contains(i)));
        }
    }
}
