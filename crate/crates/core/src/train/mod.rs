//! Training loop: synthetic data, rectified-flow loss, AdamW, EMA, router
//! bias updates, metrics and checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod metrics;
pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::{rf_batch, TimeSampler};
use crate::graph::Graph;
use crate::model::DiTMoE;
use crate::moe::{load_std, DEFAULT_BIAS_RATE};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, RngState};
pub use dataset::{flip_horizontal, SyntheticDataset};
pub use metrics::MetricsWriter;
pub use optim::{AdamW, Ema};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub ema_decay: f64,
    pub label_drop: f64,
    pub seed: u64,
    pub bias_rate: f64,
    /// Metrics rows are flushed to disk every this many steps.
    pub flush_every: u64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    pub time_sampler: TimeSampler,
    pub flip_prob: f64,
    pub noise_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            steps: 500,
            ema_decay: 0.9999,
            label_drop: crate::flow::LABEL_DROP,
            seed: 0,
            bias_rate: DEFAULT_BIAS_RATE,
            flush_every: 10,
            grad_clip: None,
            time_sampler: TimeSampler::Uniform,
            flip_prob: 0.5,
            noise_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema decay {} outside [0, 1)", self.ema_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.label_drop) || !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.flush_every == 0 {
            return bad("flush cadence must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Standard deviation of the per-expert load, one entry per MoE layer.
    pub load_std: Vec<f64>,
    /// Fraction of routed experts (over all MoE layers) that saw a token.
    pub experts_active_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DiTMoE,
    pub optimizer: AdamW,
    pub ema: Ema,
    pub config: TrainConfig,
    pub dataset: SyntheticDataset,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = DiTMoE::new(model_config, config.seed)?;
        model.set_bias_rate(config.bias_rate);
        let params = model.params().tensors();
        let optimizer = AdamW::new(params, config.lr, config.beta1, config.beta2, config.weight_decay);
        let ema = Ema::new(params, config.ema_decay);
        let mc = model.config();
        let (h, w) = mc.image_size();
        let dataset = SyntheticDataset::new(mc.num_classes, mc.in_channels, h, w, config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            optimizer,
            ema,
            config,
            dataset,
            rng,
            step: 0,
        })
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    /// Model copy carrying the EMA weights (router biases from the live model).
    pub fn ema_model(&self) -> Result<DiTMoE> {
        let mut m = self.model.clone();
        let table: Vec<(String, Tensor)> = m
            .params()
            .names()
            .iter()
            .cloned()
            .zip(self.ema.shadow().iter().cloned())
            .collect();
        m.params_mut().assign(&table)?;
        Ok(m)
    }

    /// Draws the next batch from the dataset and trains on it.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let (mut x0, classes) = self.dataset.batch(self.config.batch_size, &mut self.rng)?;
        for b in 0..classes.len() {
            if self.rng.gen::<f64>() < self.config.flip_prob {
                flip_horizontal(&mut x0, b);
            }
        }
        self.train_step(&x0, &classes)
    }

    /// One forward/backward/update on a given clean batch `[B×C×H×W]`.
    pub fn train_step(&mut self, x0: &Tensor, classes: &[usize]) -> Result<StepMetrics> {
        let null = self.model.config().num_classes;
        let batch = rf_batch(
            x0,
            classes,
            &self.config.time_sampler,
            self.config.label_drop,
            self.config.noise_scale,
            null,
            &mut self.rng,
        )?;
        let mut g = Graph::new();
        let vars = self.model.params().bind(&mut g, true);
        let (pred, _) = self
            .model
            .forward_graph(&mut g, &vars, &batch.x_t, &batch.t, &batch.classes)?;
        let target = g.constant(batch.target);
        let loss_var = g.mse(pred, target)?;
        let loss = g.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(self.non_finite_report(&g, &vars));
        }
        g.backward(loss_var)?;

        let mut grads: Vec<Tensor> = vars
            .iter()
            .zip(self.model.params().tensors())
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        let grad_norm = grads.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(self.non_finite_report(&g, &vars));
        }
        if let Some(clip) = self.config.grad_clip {
            if grad_norm > clip {
                let s = clip / grad_norm;
                grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }
        self.optimizer.update(self.model.params_mut().tensors_mut(), &grads)?;
        self.ema.update(self.model.params().tensors());

        let mut load_stds = Vec::new();
        let (mut active, mut total) = (0usize, 0usize);
        for r in self.model.routers() {
            load_stds.push(load_std(r.loads()));
            active += r.loads().iter().filter(|&&l| l > 0).count();
            total += r.routed();
        }
        self.model.update_router_biases();
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss,
            grad_norm,
            load_std: load_stds,
            experts_active_fraction: if total == 0 { 1.0 } else { active as f64 / total as f64 },
        })
    }

    fn non_finite_report(&self, g: &Graph, vars: &[crate::graph::Var]) -> Error {
        let what = match g.first_non_finite() {
            Some((node, op)) => match vars.iter().position(|v| v.id() == node) {
                Some(i) => format!("parameter {}", self.model.params().names()[i]),
                None => format!("node {node} ({op})"),
            },
            None => "gradient".to_string(),
        };
        Error::NonFinite(format!(
            "loss diverged at step {}; first non-finite tensor: {what}",
            self.step + 1
        ))
    }

    pub fn to_bundle(&self) -> CheckpointBundle {
        let (m, v) = self.optimizer.moments();
        CheckpointBundle {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            weights: self.model.state_table(),
            opt_step: self.optimizer.step_count(),
            opt_m: m.to_vec(),
            opt_v: v.to_vec(),
            ema: self.ema.shadow().to_vec(),
            step: self.step,
            rng: self.rng_state(),
        }
    }

    /// Loads a bundle into this trainer; the bundle must match its layout.
    pub fn restore(&mut self, bundle: &CheckpointBundle) -> Result<()> {
        self.model.load_state(&bundle.weights)?;
        self.optimizer
            .restore(bundle.opt_step, bundle.opt_m.clone(), bundle.opt_v.clone())?;
        self.ema.restore(bundle.ema.clone())?;
        let mut rng = ChaCha8Rng::from_seed(bundle.rng.seed);
        rng.set_stream(bundle.rng.stream);
        rng.set_word_pos(bundle.rng.word_pos);
        self.rng = rng;
        self.step = bundle.step;
        Ok(())
    }

    /// Rebuilds a trainer from a bundle's own configs.
    pub fn from_bundle(bundle: &CheckpointBundle) -> Result<Self> {
        let mut t = Trainer::new(bundle.model_config.clone(), bundle.train_config.clone())?;
        t.restore(bundle)?;
        Ok(t)
    }
}
