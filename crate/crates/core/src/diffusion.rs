//! DDPM noise schedule, forward noising, closed-form noised mixtures and the
//! exact score of the noised world.
//!
//! Steps are indexed `0..T`. Step `t` has cumulative signal level
//! `ᾱ_t = Π_{u≤t} (1 − β_u)`; the boundary "before step 0" has `ᾱ = 1`.
//! Score fields return `∇ₓ log p_t(x)`; a noise prediction converts as
//! `ε̂ = −√(1 − ᾱ_t) · s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{GaussianComponent, Mat2, Mixture, Vec2, World};

/// Linear-beta schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linearly interpolated betas and their cumulative products.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::BadSchedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::BadSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t])
    }

    /// `ᾱ_{t−1}`, with 1 before the first step.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    /// Position of step `t` on the continuous [0, 1) time scale.
    pub fn normalized_time(&self, t: usize) -> f64 {
        t as f64 / self.len() as f64
    }

    /// Multiplier turning a score into a noise prediction: `−√(1 − ᾱ_t)`.
    pub fn eps_from_score_factor(&self, t: usize) -> f64 {
        -(1.0 - self.alpha_bars[t]).sqrt()
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε` for an explicit signal level.
pub fn forward_noise_at(x0: Vec2, alpha_bar: f64, eps: Vec2) -> Vec2 {
    alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps
}

pub fn forward_noise(x0: Vec2, t: usize, eps: Vec2, s: &NoiseSchedule) -> Result<Vec2> {
    Ok(forward_noise_at(x0, s.alpha_bar(t)?, eps))
}

/// The mixture after forward noising with signal level `alpha_bar`.
pub fn noised_mixture_at(m: &Mixture, alpha_bar: f64) -> Mixture {
    let sa = alpha_bar.sqrt();
    let iso = Mat2::scaled_identity(1.0 - alpha_bar);
    let components = m
        .components()
        .iter()
        .map(|c| GaussianComponent {
            mean: sa * c.mean,
            cov: c.cov.scale(alpha_bar).add(&iso),
        })
        .collect();
    Mixture::new(components, m.weights().to_vec()).expect("noising preserves validity")
}

pub fn noised_mixture(m: &Mixture, s: &NoiseSchedule, t: usize) -> Result<Mixture> {
    Ok(noised_mixture_at(m, s.alpha_bar(t)?))
}

/// Exact `∇ₓ log p_t(x | condition)` for the world.
pub fn analytic_score(
    world: &World,
    s: &NoiseSchedule,
    x: Vec2,
    t: usize,
    condition: Option<&str>,
) -> Result<Vec2> {
    let m = world.for_condition(condition)?;
    Ok(noised_mixture(&m, s, t)?.score(x))
}

/// Anything that can report a score for a batch of points at one step.
pub trait ScoreField {
    /// Scores of `xs` at step `t`; `condition = None` is unconditional.
    fn score_batch(&self, xs: &[Vec2], t: usize, condition: Option<&str>) -> Result<Vec<Vec2>>;

    /// Whether `condition` can be evaluated.
    fn supports(&self, condition: &str) -> bool;

    fn score(&self, x: Vec2, t: usize, condition: Option<&str>) -> Result<Vec2> {
        Ok(self.score_batch(&[x], t, condition)?[0])
    }

    /// Short identifier for sample manifests.
    fn describe(&self) -> String;
}

/// Exact score oracle backed by the world's closed-form noised densities.
#[derive(Debug, Clone)]
pub struct AnalyticField<'a> {
    pub world: &'a World,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> AnalyticField<'a> {
    pub fn new(world: &'a World, schedule: &'a NoiseSchedule) -> Self {
        AnalyticField { world, schedule }
    }

    /// `log p_t(x | condition)`.
    pub fn log_density(&self, x: Vec2, t: usize, condition: Option<&str>) -> Result<f64> {
        let m = self.world.for_condition(condition)?;
        Ok(noised_mixture(&m, self.schedule, t)?.log_density(x))
    }
}

impl ScoreField for AnalyticField<'_> {
    fn score_batch(&self, xs: &[Vec2], t: usize, condition: Option<&str>) -> Result<Vec<Vec2>> {
        let m = self.world.for_condition(condition)?;
        let pm = noised_mixture(&m, self.schedule, t)?.prepared();
        Ok(xs.iter().map(|&x| pm.score(x)).collect())
    }

    fn supports(&self, condition: &str) -> bool {
        self.world.vocabulary.contains(condition)
    }

    fn describe(&self) -> String {
        "analytic".into()
    }
}
