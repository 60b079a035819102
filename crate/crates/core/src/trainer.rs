//! Seeded training loop with loss-component and temperature logging.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Graph};
use crate::context::{LixpConfig, StaleBuffer};
use crate::data::PairedData;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub warmup_steps: usize,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub tau_ctx_init: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            grad_clip_norm: 1.0,
            warmup_steps: 100,
            optimizer: Optimizer::AdamW,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            seed: 0,
            tau_ctx_init: 1.0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, lixp: &LixpConfig) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if lixp.enabled && lixp.self_mask && !lixp.separate_context_batch && self.batch_size < 2 {
            return Err(Error::SelfMaskTooSmall(self.batch_size));
        }
        if !(self.grad_clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "grad_clip_norm must be positive and weight_decay non-negative".into(),
            ));
        }
        if !(self.tau_ctx_init > 0.0) {
            return Err(Error::Config("tau_ctx_init must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    /// `lr · min(1, (t + 1) / warmup)`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// One logged step. Temperatures are realized (`exp` of the parameters)
/// values at the start of the step; `grad_norm` is measured before clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub base_term: f64,
    pub ctx_term: Option<f64>,
    pub total: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau_ctx: f64,
    pub bias: f64,
    pub grad_norm: f64,
}

pub const LOG_COLUMNS: [&str; 9] = [
    "step",
    "base_term",
    "ctx_term",
    "total",
    "tau1",
    "tau2",
    "tau_ctx",
    "bias",
    "grad_norm",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    /// Fixed column order; a disabled contextual term is an empty field.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(LOG_COLUMNS)?;
        for r in &self.records {
            out.write_record([
                r.step.to_string(),
                r.base_term.to_string(),
                r.ctx_term.map(|c| c.to_string()).unwrap_or_default(),
                r.total.to_string(),
                r.tau1.to_string(),
                r.tau2.to_string(),
                r.tau_ctx.to_string(),
                r.bias.to_string(),
                r.grad_norm.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone)]
enum OptState {
    Sgd,
    AdamW { m: Vec<Array2>, v: Vec<Array2> },
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .fold(0.0, |acc, x| acc + x * x)
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

fn sample_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

/// Runs `cfg.steps` iterations of sample → encode → objective → backward →
/// clip → update. Deterministic given the seeds in `cfg` and the model
/// config. A non-finite loss or gradient norm aborts with the step index and
/// the last record.
pub fn train(
    mut model: Model,
    data: &PairedData,
    lixp: &LixpConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    cfg.validate(lixp)?;
    lixp.validate()?;
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok((model, log));
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch("train"));
    }
    let mut batch_rng = seed::derived_rng(cfg.seed, seed::purpose::BATCH, 0);
    let mut subset_rng = seed::derived_rng(cfg.seed, seed::purpose::SUBSET, 0);
    let mut context_rng = seed::derived_rng(cfg.seed, seed::purpose::CONTEXT_BATCH, 0);
    let mut stale = StaleBuffer::new(lixp.stale_buffer_size);
    let mut opt = match cfg.optimizer {
        Optimizer::Sgd => OptState::Sgd,
        Optimizer::AdamW => {
            let zeros: Vec<Array2> = model
                .store
                .iter()
                .map(|p| Array2::zeros(p.value.rows(), p.value.cols()))
                .collect();
            OptState::AdamW {
                m: zeros.clone(),
                v: zeros,
            }
        }
    };

    for step in 0..cfg.steps {
        let idx = sample_indices(&mut batch_rng, data.len(), cfg.batch_size);
        let images = data.images.select_rows(&idx);
        let texts = data.texts.select_rows(&idx);
        let context_images = (lixp.enabled && lixp.separate_context_batch).then(|| {
            let cidx = sample_indices(&mut context_rng, data.len(), cfg.batch_size);
            data.images.select_rows(&cidx)
        });

        let mut g = Graph::new();
        let nodes = model.register(&mut g);
        let stale_ref = (lixp.stale_buffer_size > 0).then_some(&stale);
        let (terms, img) = model.loss(
            &mut g,
            &nodes,
            &images,
            &texts,
            context_images.as_ref(),
            stale_ref,
            lixp,
            &mut subset_rng,
        )?;
        let total = g.value(terms.total).data()[0];
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last: log.last().copied().map(Box::new),
            });
        }
        g.backward(terms.total)?;
        let mut grads: Vec<Array2> = nodes
            .params
            .as_slice()
            .iter()
            .map(|&n| g.grad(n).clone())
            .collect();
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteGradient {
                step,
                last: log.last().copied().map(Box::new),
            });
        }

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let t = nodes.temps.values(&g);
            log.records.push(LogRecord {
                step,
                base_term: terms.base_term,
                ctx_term: terms.ctx_term,
                total,
                tau1: t.tau1(),
                tau2: t.tau2(),
                tau_ctx: t.tau_ctx(),
                bias: t.bias,
                grad_norm,
            });
        }
        if lixp.stale_buffer_size > 0 {
            stale.push_batch(&img.to_batch(&g));
        }

        let lr = cfg.learning_rate_at(step);
        match &mut opt {
            OptState::Sgd => {
                for (p, grad) in model.store.iter_mut().zip(&grads) {
                    let decay = if p.decay { cfg.weight_decay } else { 0.0 };
                    for (w, &gr) in p.value.data_mut().iter_mut().zip(grad.data()) {
                        *w -= lr * (gr + decay * *w);
                    }
                }
            }
            OptState::AdamW { m, v } => {
                let t = (step + 1) as i32;
                let c1 = 1.0 - cfg.adam_beta1.powi(t);
                let c2 = 1.0 - cfg.adam_beta2.powi(t);
                for ((p, grad), (m, v)) in model
                    .store
                    .iter_mut()
                    .zip(&grads)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    let decay = if p.decay { cfg.weight_decay } else { 0.0 };
                    let it = p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                    for ((w, &gr), (mk, vk)) in it {
                        *mk = cfg.adam_beta1 * *mk + (1.0 - cfg.adam_beta1) * gr;
                        *vk = cfg.adam_beta2 * *vk + (1.0 - cfg.adam_beta2) * gr * gr;
                        let update = (*mk / c1) / ((*vk / c2).sqrt() + cfg.adam_eps);
                        *w -= lr * (update + decay * *w);
                    }
                }
            }
        }
    }
    Ok((model, log))
}

/// One training run per τ_ctx initialization, everything else shared.
/// Runs are independent and execute in parallel; output order follows
/// `inits`.
pub fn tau_ctx_sweep(
    model: &ModelConfig,
    data: &PairedData,
    lixp: &LixpConfig,
    cfg: &TrainConfig,
    inits: &[f64],
) -> Result<Vec<TrainLog>> {
    if let Some(bad) = inits.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Config(format!(
            "tau_ctx init {bad} must be positive"
        )));
    }
    inits
        .par_iter()
        .map(|&init| {
            let mut mc = model.clone();
            mc.temperatures.log_tau_ctx = init.ln();
            let m = Model::new(mc, lixp)?;
            let cfg = TrainConfig {
                tau_ctx_init: init,
                ..cfg.clone()
            };
            train(m, data, lixp, &cfg).map(|(_, log)| log)
        })
        .collect()
}
