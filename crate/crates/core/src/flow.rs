//! Straight-path flow matching: training targets, loss and the Euler sampler.
//!
//! The path is `a_τ = τ·a* + (1−τ)·z` with `z ~ N(0, I)`; its velocity is
//! `a* − z`, which is the regression target. Sampling starts from noise at
//! `τ = 0` and integrates forward with a fixed step.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ConditioningBundle, HrdtModel, TAU_MAX};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub tau: T,
    pub z: Tensor<T>,
    pub a_star: Tensor<T>,
    pub a_tau: Tensor<T>,
    pub u_target: Tensor<T>,
}

impl<T: Scalar> FlowSample<T> {
    /// Builds the interpolant and target for a given `tau` and noise `z`.
    pub fn at(a_star: &Tensor<T>, tau: T, z: Tensor<T>) -> Result<Self> {
        if a_star.shape() != z.shape() {
            return Err(Error::shape("flow_sample", a_star.shape(), z.shape()));
        }
        let one_minus = T::one() - tau;
        let a_tau = a_star.zip_map(&z, |a, n| tau * a + one_minus * n)?;
        let u_target = a_star.zip_map(&z, |a, n| a - n)?;
        Ok(Self {
            tau,
            z,
            a_star: a_star.clone(),
            a_tau,
            u_target,
        })
    }
}

pub fn sample_noise<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Draws `τ ~ U[0, 0.999]` and fresh noise, then builds the sample.
pub fn make_flow_sample<T: Scalar>(
    a_star: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<FlowSample<T>> {
    if !a_star.is_finite() {
        return Err(Error::Precondition("target chunk must be finite".into()));
    }
    let tau = T::lit(rng.random_range(0.0..=TAU_MAX));
    let z = sample_noise(a_star.shape(), rng);
    FlowSample::at(a_star, tau, z)
}

/// Mean squared error over all entries.
pub fn fm_loss<T: Scalar>(v_pred: &Tensor<T>, u_target: &Tensor<T>) -> Result<T> {
    if v_pred.shape() != u_target.shape() {
        return Err(Error::shape("fm_loss", v_pred.shape(), u_target.shape()));
    }
    let sq: T = v_pred
        .data()
        .iter()
        .zip(u_target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sq / T::lit(v_pred.numel() as f64))
}

/// Tape version of [`fm_loss`].
pub fn fm_loss_on<T: Scalar>(tape: &mut Tape<T>, v_pred: Var, u_target: Var) -> Result<Var> {
    let d = tape.sub(v_pred, u_target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub tau_max: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            tau_max: TAU_MAX,
        }
    }
}

impl SamplerConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

/// Anything that predicts a velocity for an action chunk.
pub trait VelocityField<T: Scalar> {
    /// `(horizon, action_dim)`
    fn chunk_shape(&self) -> (usize, usize);
    fn velocity(&self, a: &Tensor<T>, tau: T, c: &ConditioningBundle<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> VelocityField<T> for HrdtModel<T> {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.config().horizon, self.config().action_dim)
    }

    fn velocity(&self, a: &Tensor<T>, tau: T, c: &ConditioningBundle<T>) -> Result<Tensor<T>> {
        self.forward(a, tau, c)
    }
}

/// Counts velocity evaluations of the wrapped field.
pub struct Counting<F> {
    pub inner: F,
    calls: Cell<usize>,
}

impl<F> Counting<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<T: Scalar, F: VelocityField<T>> VelocityField<T> for Counting<F> {
    fn chunk_shape(&self) -> (usize, usize) {
        self.inner.chunk_shape()
    }

    fn velocity(&self, a: &Tensor<T>, tau: T, c: &ConditioningBundle<T>) -> Result<Tensor<T>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.velocity(a, tau, c)
    }
}

/// Fixed-step Euler integration from `a_0 ~ N(0, I)`:
/// `a ← a + Δt·v(a, k·Δt, c)` for `k = 0..steps`, with `Δt = 1/steps`.
pub fn euler_sample<T: Scalar, F: VelocityField<T> + ?Sized>(
    field: &F,
    c: &ConditioningBundle<T>,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    if cfg.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let (h, da) = field.chunk_shape();
    let mut a = sample_noise::<T>(&[h, da], rng);
    let dt = T::lit(cfg.step_size());
    for k in 0..cfg.steps {
        let tau = T::lit((k as f64 * cfg.step_size()).min(cfg.tau_max));
        let v = field.velocity(&a, tau, c)?;
        if v.shape() != a.shape() {
            return Err(Error::shape("euler_sample", v.shape(), a.shape()));
        }
        a = a.zip_map(&v, |x, vx| x + dt * vx)?;
    }
    Ok(a)
}
