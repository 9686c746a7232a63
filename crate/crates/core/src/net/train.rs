use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CondTokens, NetConfig, ParamSet, ScoreNet, TrainSample, EMB};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::world::{Vec2, World};

/// Which labels condition the training samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// The singleton label of the generating component.
    FineGrained,
    /// A uniformly chosen multi-component label covering the component.
    General,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" | "fine_grained" | "fine-grained" => Ok(TrainMode::FineGrained),
            "general" => Ok(TrainMode::General),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Per-epoch multiplicative learning-rate decay after warmup.
    pub decay_gamma: f64,
    pub epochs: usize,
    pub cond_drop_prob: f64,
    pub seed: u64,
    pub dataset_size: usize,
    pub net: NetConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            learning_rate: 1e-4,
            warmup_steps: 500,
            decay_gamma: 0.99,
            epochs: 250,
            cond_drop_prob: 0.5,
            seed: 0,
            dataset_size: 100_000,
            net: NetConfig::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if self.dataset_size == 0 {
            return Err(Error::EmptyRequest("training dataset is empty"));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return bad("learning_rate must be positive and decay_gamma in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return bad("cond_drop_prob must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    /// Learning rate for global step `step` taken during epoch `epoch`.
    pub fn learning_rate_at(&self, step: usize, epoch: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        self.learning_rate * warm * self.decay_gamma.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub steps: usize,
    pub wall_time_secs: f64,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            for (((pi, gi), mi), vi) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(&mut m.data)
                .zip(&mut v.data)
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Labels a training sample from `component` may carry under `mode`.
fn candidate_labels(world: &World, mode: TrainMode, component: usize) -> Vec<&str> {
    world
        .vocabulary
        .entries()
        .iter()
        .filter(|(_, set)| set.contains(&component))
        .filter(|(_, set)| match mode {
            TrainMode::FineGrained => set.len() == 1,
            TrainMode::General => set.len() >= 2,
        })
        .map(|(l, _)| l.as_str())
        .collect()
}

/// Trains a noise-prediction network on draws from `world`.
pub fn train(
    world: &World,
    mode: TrainMode,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(ScoreNet, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let data = world.mixture.sample_labeled(cfg.dataset_size, &mut rng)?;
    let mut net = ScoreNet::init(cfg.net.clone(), world.vocabulary.tokens(), &mut rng)?;

    // Encoded label choices per component.
    let choices: Vec<Vec<CondTokens>> = (0..world.mixture.len())
        .map(|c| {
            let labels = candidate_labels(world, mode, c);
            if labels.is_empty() {
                return Err(Error::InvalidWorld(format!(
                    "component {c} has no {mode:?} label to train with"
                )));
            }
            labels.into_iter().map(|l| net.encode(Some(l))).collect()
        })
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(net.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let t_max = schedule.len();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    let (x0, comp) = data[i];
                    let t = rng.random_range(0..t_max);
                    let eps = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                    let options = &choices[comp];
                    let pick = if options.len() == 1 {
                        0
                    } else {
                        rng.random_range(0..options.len())
                    };
                    let drop = rng.random::<f64>() < cfg.cond_drop_prob;
                    let cond = if drop {
                        CondTokens::null()
                    } else {
                        options[pick].clone()
                    };
                    TrainSample { x0, t, eps, cond }
                })
                .collect();
            let (loss, mut grads) = net.loss_and_gradients(&batch, schedule)?;
            let d = grads.tensors[EMB].shape[1];
            grads.tensors[EMB].data[..d].fill(0.0);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss diverged at step {step}")));
            }
            weighted += loss * batch.len() as f64;
            adam.step(net.params_mut(), &grads, cfg.learning_rate_at(step, epoch));
            step += 1;
        }
        let mean = weighted / data.len() as f64;
        log::debug!("{mode:?} epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }

    if !net.params().is_finite() {
        return Err(Error::Numerical(format!("parameters diverged by step {step}")));
    }
    let final_loss = *epoch_losses.last().expect("epochs >= 1");
    Ok((
        net,
        TrainReport {
            mode,
            epoch_losses,
            final_loss,
            steps: step,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}
