//! Rectified flow: linear interpolation between data and noise, the
//! velocity target `ε − x0`, time samplers and ODE samplers with
//! classifier-free guidance.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::model::DiTMoE;
use crate::tensor::Tensor;

/// Probability of replacing a label with the null class during training.
pub const LABEL_DROP: f64 = 0.1;

/// `α_t = 1 − t`.
pub fn alpha(t: f64) -> f64 {
    1.0 - t
}

/// `σ_t = t`.
pub fn sigma(t: f64) -> f64 {
    t
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Sampler(format!("time {t} outside [0, 1]")))
    }
}

/// `x_t = α_t·x0 + σ_t·ε`.
pub fn forward_noise(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("forward_noise", x0.shape(), eps.shape()));
    }
    x0.zip_with(eps, |a, e| alpha(t) * a + sigma(t) * e)
}

/// Velocity target `ε − x0`.
pub fn rf_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("rf_target", x0.shape(), eps.shape()));
    }
    x0.zip_with(eps, |a, e| e - a)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeSampler {
    Uniform,
    LogitNormal { mu: f64, sigma: f64 },
}

impl TimeSampler {
    pub const LOGIT_NORMAL: TimeSampler = TimeSampler::LogitNormal {
        mu: -0.8,
        sigma: 0.8,
    };

    /// Draws `t` strictly inside `(0, 1)`.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            TimeSampler::Uniform => Open01.sample(rng),
            TimeSampler::LogitNormal { mu, sigma } => {
                let n = Normal::new(mu, sigma).expect("finite logit-normal parameters");
                loop {
                    let t = sigmoid(n.sample(rng));
                    if t > 0.0 && t < 1.0 {
                        break t;
                    }
                }
            }
        }
    }
}

impl Default for TimeSampler {
    fn default() -> Self {
        TimeSampler::LOGIT_NORMAL
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    #[default]
    Heun,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
        })
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            other => Err(Error::Sampler(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub steps: usize,
    pub cfg_scale: f64,
    /// Guidance applies only while `lo ≤ t ≤ hi`.
    pub cfg_interval: Option<(f64, f64)>,
    /// Multiplier on the initial noise.
    pub noise_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Heun,
            steps: 50,
            cfg_scale: 1.0,
            cfg_interval: None,
            noise_scale: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Sampler("steps must be at least 1".into()));
        }
        if !self.cfg_scale.is_finite() || self.cfg_scale < 1.0 {
            return Err(Error::Sampler(format!("cfg scale {} below 1", self.cfg_scale)));
        }
        if let Some((lo, hi)) = self.cfg_interval {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                return Err(Error::Sampler(format!("invalid cfg interval [{lo}, {hi}]")));
            }
        }
        if !self.noise_scale.is_finite() || self.noise_scale <= 0.0 {
            return Err(Error::Sampler(format!("noise scale {}", self.noise_scale)));
        }
        Ok(())
    }

    /// Whether the guidance term is active at time `t`.
    pub fn guided_at(&self, t: f64) -> bool {
        self.cfg_scale != 1.0 && self.cfg_interval.is_none_or(|(lo, hi)| lo <= t && t <= hi)
    }
}

/// Anything that predicts a velocity for a batch `[B × ...]`.
pub trait VelocityField {
    fn velocity(&mut self, x: &Tensor, t: &[f64], classes: &[usize]) -> Result<Tensor>;

    /// Label used for the unconditional branch of guidance.
    fn null_class(&self) -> usize;
}

impl VelocityField for DiTMoE {
    fn velocity(&mut self, x: &Tensor, t: &[f64], classes: &[usize]) -> Result<Tensor> {
        Ok(self.forward(x, t, classes)?.prediction)
    }

    fn null_class(&self) -> usize {
        self.config().num_classes
    }
}

/// Adapts a closure `(x, t) → v` that ignores labels.
pub struct FnField<F>(pub F);

impl<F: FnMut(&Tensor, f64) -> Tensor> VelocityField for FnField<F> {
    fn velocity(&mut self, x: &Tensor, t: &[f64], _classes: &[usize]) -> Result<Tensor> {
        Ok((self.0)(x, t[0]))
    }

    fn null_class(&self) -> usize {
        0
    }
}

fn guided(
    field: &mut impl VelocityField,
    x: &Tensor,
    t: f64,
    classes: &[usize],
    config: &SamplerConfig,
) -> Result<Tensor> {
    let batch = classes.len();
    let ts = vec![t; batch];
    let cond = field.velocity(x, &ts, classes)?;
    if !config.guided_at(t) {
        return Ok(cond);
    }
    let null = vec![field.null_class(); batch];
    let uncond = field.velocity(x, &ts, &null)?;
    let s = config.cfg_scale;
    uncond.zip_with(&cond, |u, c| u + s * (c - u))
}

fn axpy(x: &Tensor, a: f64, v: &Tensor) -> Result<Tensor> {
    x.zip_with(v, |xi, vi| xi + a * vi)
}

/// Integrates from `x1` at `t = 1` down to `t = 0` on a uniform grid.
pub fn integrate(
    field: &mut impl VelocityField,
    x1: &Tensor,
    classes: &[usize],
    config: &SamplerConfig,
) -> Result<Tensor> {
    config.validate()?;
    let n = config.steps;
    let dt = 1.0 / n as f64;
    let mut x = x1.clone();
    for i in 0..n {
        let t = 1.0 - i as f64 / n as f64;
        let t_next = 1.0 - (i + 1) as f64 / n as f64;
        let v = guided(field, &x, t, classes, config)?;
        x = match config.solver {
            Solver::Euler => axpy(&x, -dt, &v)?,
            Solver::Heun => {
                let pred = axpy(&x, -dt, &v)?;
                let v2 = guided(field, &pred, t_next, classes, config)?;
                let avg = v.zip_with(&v2, |a, b| 0.5 * (a + b))?;
                axpy(&x, -dt, &avg)?
            }
        };
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at t={t_next}")));
        }
    }
    Ok(x)
}

/// Draws `x1 ~ N(0, noise_scale²)` of shape `[B × image...]` and integrates.
pub fn sample(
    field: &mut impl VelocityField,
    classes: &[usize],
    image_shape: &[usize],
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    config.validate()?;
    if classes.is_empty() {
        return Err(Error::Sampler("no labels to sample".into()));
    }
    let mut shape = vec![classes.len()];
    shape.extend_from_slice(image_shape);
    let x1 = Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * config.noise_scale
    });
    integrate(field, &x1, classes, config)
}

/// One noised training batch.
#[derive(Clone, Debug)]
pub struct RfBatch {
    pub x_t: Tensor,
    pub t: Vec<f64>,
    pub classes: Vec<usize>,
    pub target: Tensor,
}

/// Draws per-sample times and noise for `x0: [B × ...]` and drops labels to
/// `null_class` with probability `label_drop`.
pub fn rf_batch(
    x0: &Tensor,
    classes: &[usize],
    sampler: &TimeSampler,
    label_drop: f64,
    noise_scale: f64,
    null_class: usize,
    rng: &mut impl Rng,
) -> Result<RfBatch> {
    let b = x0.shape()[0];
    if classes.len() != b {
        return Err(Error::InvalidShape(format!(
            "{b} images with {} labels",
            classes.len()
        )));
    }
    let per = x0.numel() / b;
    let t: Vec<f64> = (0..b).map(|_| sampler.sample(rng)).collect();
    let eps = Tensor::from_fn(x0.shape().to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * noise_scale
    });
    let classes = classes
        .iter()
        .map(|&c| if rng.gen::<f64>() < label_drop { null_class } else { c })
        .collect();
    let target = rf_target(x0, &eps)?;
    let mut x_t = x0.clone();
    for (i, v) in x_t.data_mut().iter_mut().enumerate() {
        let ti = t[i / per];
        *v = alpha(ti) * *v + sigma(ti) * eps.data()[i];
    }
    Ok(RfBatch {
        x_t,
        t,
        classes,
        target,
    })
}

/// Mean squared error between the field's prediction and the target.
pub fn rf_loss(field: &mut impl VelocityField, batch: &RfBatch) -> Result<f64> {
    let pred = field.velocity(&batch.x_t, &batch.t, &batch.classes)?;
    if pred.shape() != batch.target.shape() {
        return Err(Error::shape("rf_loss", pred.shape(), batch.target.shape()));
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(batch.target.data())
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(sq / pred.numel() as f64)
}
