//! Guidance rules on score vectors: classifier-free guidance, the OR/AND
//! composition operators, APG, CADS and interval guidance, plus oracle
//! prompt expansion.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{noised_mixture, NoiseSchedule, ScoreField};
use crate::error::{Error, Result};
use crate::world::{pick_weighted, softmax_in_place, ConceptVocabulary, Mixture, Vec2, World};

/// Guidance rule applied on top of a conditional/unconditional score pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuidanceConfig {
    Cfg {
        omega: f64,
    },
    Apg {
        eta: f64,
        rescale_r: f64,
        momentum_beta: f64,
        omega: f64,
    },
    Cads {
        tau1: f64,
        tau2: f64,
        noise_scale: f64,
        mix_phi: f64,
        omega: f64,
    },
    Interval {
        tau_lo: f64,
        tau_hi: f64,
        omega: f64,
    },
}

/// Published hyperparameter columns for the advanced guidance methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidancePreset {
    Ldm15,
    LdmXl,
    Ldm35M,
    Ldm35L,
}

impl GuidancePreset {
    pub fn apg(self, omega: f64) -> GuidanceConfig {
        let (r, beta) = match self {
            GuidancePreset::Ldm15 => (7.5, -0.75),
            GuidancePreset::LdmXl => (15.0, -0.5),
            GuidancePreset::Ldm35M | GuidancePreset::Ldm35L => (10.0, -0.5),
        };
        GuidanceConfig::Apg {
            eta: 0.0,
            rescale_r: r,
            momentum_beta: beta,
            omega,
        }
    }

    pub fn interval(self, omega: f64) -> GuidanceConfig {
        let (lo, hi) = match self {
            GuidancePreset::Ldm15 | GuidancePreset::LdmXl => (0.08, 0.81),
            GuidancePreset::Ldm35M | GuidancePreset::Ldm35L => (0.3, 0.95),
        };
        GuidanceConfig::Interval {
            tau_lo: lo,
            tau_hi: hi,
            omega,
        }
    }

    pub fn cads(self, omega: f64) -> GuidanceConfig {
        let (tau1, tau2, s) = match self {
            GuidancePreset::Ldm15 => (0.8, 1.3, 0.1),
            GuidancePreset::LdmXl => (0.6, 1.0, 0.3),
            GuidancePreset::Ldm35M | GuidancePreset::Ldm35L => (0.85, 1.25, 0.3),
        };
        GuidanceConfig::Cads {
            tau1,
            tau2,
            noise_scale: s,
            mix_phi: 1.0,
            omega,
        }
    }
}

/// Which raw scores a guidance rule consumes at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub conditional: bool,
    pub unconditional: bool,
}

impl Needs {
    fn for_omega(omega: f64) -> Needs {
        Needs {
            conditional: omega != 0.0,
            unconditional: omega != 1.0,
        }
    }
}

/// Per-trajectory mutable guidance state.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GuidanceState {
    pub momentum: Vec2,
}

impl GuidanceConfig {
    pub fn cfg(omega: f64) -> Self {
        GuidanceConfig::Cfg { omega }
    }

    pub fn omega(&self) -> f64 {
        match *self {
            GuidanceConfig::Cfg { omega }
            | GuidanceConfig::Apg { omega, .. }
            | GuidanceConfig::Cads { omega, .. }
            | GuidanceConfig::Interval { omega, .. } => omega,
        }
    }

    /// The same rule at a different guidance scale.
    pub fn with_omega(mut self, value: f64) -> Self {
        match &mut self {
            GuidanceConfig::Cfg { omega }
            | GuidanceConfig::Apg { omega, .. }
            | GuidanceConfig::Cads { omega, .. }
            | GuidanceConfig::Interval { omega, .. } => *omega = value,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGuidance(m));
        let omega = self.omega();
        if !(omega.is_finite() && omega >= 0.0) {
            return bad(format!("omega must be finite and >= 0, got {omega}"));
        }
        match *self {
            GuidanceConfig::Cfg { .. } => {}
            GuidanceConfig::Apg {
                eta,
                rescale_r,
                momentum_beta,
                ..
            } => {
                if !eta.is_finite() || !momentum_beta.is_finite() {
                    return bad("APG eta and beta must be finite".into());
                }
                if rescale_r.is_nan() || rescale_r <= 0.0 {
                    return bad(format!("APG rescale threshold must be > 0, got {rescale_r}"));
                }
            }
            GuidanceConfig::Cads {
                tau1,
                tau2,
                noise_scale,
                mix_phi,
                ..
            } => {
                if !(tau1.is_finite() && tau2.is_finite()) || tau1 > tau2 {
                    return bad(format!("CADS needs tau1 <= tau2, got {tau1}, {tau2}"));
                }
                if !(noise_scale.is_finite() && noise_scale >= 0.0) {
                    return bad(format!("CADS noise scale must be >= 0, got {noise_scale}"));
                }
                if !(0.0..=1.0).contains(&mix_phi) {
                    return bad(format!("CADS mixing factor must lie in [0, 1], got {mix_phi}"));
                }
            }
            GuidanceConfig::Interval { tau_lo, tau_hi, .. } => {
                if !(tau_lo.is_finite() && tau_hi.is_finite()) || tau_lo > tau_hi {
                    return bad(format!("interval needs tau_lo <= tau_hi, got {tau_lo}, {tau_hi}"));
                }
            }
        }
        Ok(())
    }

    /// Scores required at normalized time `t_norm`.
    pub fn needs(&self, t_norm: f64) -> Needs {
        match *self {
            GuidanceConfig::Cfg { omega } | GuidanceConfig::Cads { omega, .. } => {
                Needs::for_omega(omega)
            }
            GuidanceConfig::Apg { omega, .. } => Needs {
                conditional: true,
                unconditional: omega != 1.0,
            },
            GuidanceConfig::Interval {
                tau_lo,
                tau_hi,
                omega,
            } => {
                if interval_open(t_norm, tau_lo, tau_hi) {
                    Needs::for_omega(omega)
                } else {
                    Needs {
                        conditional: false,
                        unconditional: true,
                    }
                }
            }
        }
    }

    /// Whether this rule draws corruption noise at `t_norm`.
    pub fn uses_noise(&self, t_norm: f64) -> bool {
        match *self {
            GuidanceConfig::Cads {
                tau1,
                tau2,
                noise_scale,
                omega,
                ..
            } => omega != 0.0 && noise_scale != 0.0 && cads_condition_weight(t_norm, tau1, tau2) < 1.0,
            _ => false,
        }
    }

    /// Guided score from whichever raw scores [`Self::needs`] requested.
    /// `noise` must be supplied whenever [`Self::uses_noise`] is true.
    pub fn combine(
        &self,
        t_norm: f64,
        s_c: Option<Vec2>,
        s_u: Option<Vec2>,
        state: &mut GuidanceState,
        noise: Option<Vec2>,
    ) -> Vec2 {
        let need = |v: Option<Vec2>| v.expect("score requested by `needs`");
        match *self {
            GuidanceConfig::Cfg { omega } => cfg_combine_opt(s_c, s_u, omega),
            GuidanceConfig::Interval {
                tau_lo,
                tau_hi,
                omega,
            } => {
                if interval_open(t_norm, tau_lo, tau_hi) {
                    cfg_combine_opt(s_c, s_u, omega)
                } else {
                    need(s_u)
                }
            }
            GuidanceConfig::Apg { omega, .. } => {
                if omega == 1.0 {
                    return need(s_c);
                }
                apg_guided_score(state, need(s_c), need(s_u), self)
            }
            GuidanceConfig::Cads {
                tau1,
                tau2,
                noise_scale,
                mix_phi,
                omega,
            } => {
                if omega == 0.0 {
                    return need(s_u);
                }
                let gamma = cads_condition_weight(t_norm, tau1, tau2);
                let s_c = need(s_c);
                let eff = if self.uses_noise(t_norm) {
                    cads_effective_condition(s_c, gamma, noise_scale, mix_phi, need(noise))
                } else {
                    s_c
                };
                cfg_combine_opt(Some(eff), s_u, omega)
            }
        }
    }
}

fn cfg_combine_opt(s_c: Option<Vec2>, s_u: Option<Vec2>, omega: f64) -> Vec2 {
    if omega == 0.0 {
        return s_u.expect("unconditional score requested");
    }
    if omega == 1.0 {
        return s_c.expect("conditional score requested");
    }
    cfg_combine(s_c.expect("conditional score"), s_u.expect("unconditional score"), omega)
}

/// `s_u + ω(s_c − s_u)`, written as `s_c + (ω − 1)(s_c − s_u)` so that
/// ω = 1 returns `s_c` exactly; ω = 0 returns `s_u` exactly.
pub fn cfg_combine(s_c: Vec2, s_u: Vec2, omega: f64) -> Vec2 {
    if omega == 0.0 {
        return s_u;
    }
    s_c + (omega - 1.0) * (s_c - s_u)
}

/// Classifier-free guidance evaluated through a field.
pub fn cfg_score(
    field: &dyn ScoreField,
    x: Vec2,
    t: usize,
    condition: &str,
    omega: f64,
) -> Result<Vec2> {
    if !field.supports(condition) {
        return Err(Error::UnknownConcept(condition.to_string()));
    }
    let s_c = field.score(x, t, Some(condition))?;
    let s_u = field.score(x, t, None)?;
    Ok(cfg_combine(s_c, s_u, omega))
}

fn interval_open(t_norm: f64, lo: f64, hi: f64) -> bool {
    lo <= t_norm && t_norm <= hi
}

/// Interval guidance: CFG inside `[tau_lo, tau_hi]`, unconditional outside.
pub fn interval_guided_score(
    field: &dyn ScoreField,
    schedule: &NoiseSchedule,
    x: Vec2,
    t: usize,
    condition: &str,
    cfg: &GuidanceConfig,
) -> Result<Vec2> {
    let GuidanceConfig::Interval {
        tau_lo,
        tau_hi,
        omega,
    } = *cfg
    else {
        return Err(Error::InvalidGuidance("expected an interval config".into()));
    };
    if interval_open(schedule.normalized_time(t), tau_lo, tau_hi) {
        cfg_score(field, x, t, condition, omega)
    } else {
        field.score(x, t, None)
    }
}

/// One APG update. Keeps a momentum of the guidance difference, damps its
/// component parallel to `s_c` by `eta`, caps its norm at `rescale_r`, and
/// applies it with weight `ω − 1`.
pub fn apg_guided_score(state: &mut GuidanceState, s_c: Vec2, s_u: Vec2, cfg: &GuidanceConfig) -> Vec2 {
    let GuidanceConfig::Apg {
        eta,
        rescale_r,
        momentum_beta,
        omega,
    } = *cfg
    else {
        panic!("apg_guided_score called with {cfg:?}");
    };
    let diff = s_c - s_u;
    let m = if momentum_beta == 0.0 {
        diff
    } else {
        diff + momentum_beta * state.momentum
    };
    state.momentum = m;

    let mut update = if eta == 1.0 {
        m
    } else {
        let norm_sq = s_c.norm_sq();
        let parallel = if norm_sq.sqrt() < 1e-12 {
            Vec2::ZERO
        } else {
            (m.dot(s_c) / norm_sq) * s_c
        };
        (m - parallel) + eta * parallel
    };
    if rescale_r.is_finite() {
        let n = update.norm();
        if n > rescale_r {
            update = (rescale_r / n) * update;
        }
    }
    s_c + (omega - 1.0) * update
}

/// CADS annealing weight γ(t): 1 up to τ₁, linear down to 0 at τ₂, 0 beyond.
pub fn cads_condition_weight(t_norm: f64, tau1: f64, tau2: f64) -> f64 {
    if t_norm <= tau1 {
        1.0
    } else if t_norm >= tau2 {
        0.0
    } else {
        (tau2 - t_norm) / (tau2 - tau1)
    }
}

/// Corrupted conditional score `√γ·s_c + s·√(1−γ)·n`.
pub fn cads_corrupt(s_c: Vec2, gamma: f64, noise_scale: f64, noise: Vec2) -> Vec2 {
    gamma.sqrt() * s_c + (noise_scale * (1.0 - gamma).sqrt()) * noise
}

/// Corruption followed by rescaling to the clean score's norm, mixed with
/// the raw corrupted value by `phi` (φ = 1: fully rescaled).
pub fn cads_effective_condition(s_c: Vec2, gamma: f64, noise_scale: f64, phi: f64, noise: Vec2) -> Vec2 {
    if noise_scale == 0.0 || gamma >= 1.0 {
        return s_c;
    }
    let corrupted = cads_corrupt(s_c, gamma, noise_scale, noise);
    let n = corrupted.norm();
    let rescaled = if n > 0.0 {
        (s_c.norm() / n) * corrupted
    } else {
        corrupted
    };
    if phi == 1.0 {
        rescaled
    } else {
        phi * rescaled + (1.0 - phi) * corrupted
    }
}

/// CADS-guided score at one point.
pub fn cads_guided_score<R: Rng + ?Sized>(
    field: &dyn ScoreField,
    schedule: &NoiseSchedule,
    x: Vec2,
    t: usize,
    condition: &str,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<Vec2> {
    if !matches!(cfg, GuidanceConfig::Cads { .. }) {
        return Err(Error::InvalidGuidance("expected a CADS config".into()));
    }
    let t_norm = schedule.normalized_time(t);
    let needs = cfg.needs(t_norm);
    let s_c = if needs.conditional {
        Some(field.score(x, t, Some(condition))?)
    } else {
        None
    };
    let s_u = if needs.unconditional {
        Some(field.score(x, t, None)?)
    } else {
        None
    };
    let noise = cfg.uses_noise(t_norm).then(|| standard_normal2(rng));
    Ok(cfg.combine(t_norm, s_c, s_u, &mut GuidanceState::default(), noise))
}

pub(crate) fn standard_normal2<R: Rng + ?Sized>(rng: &mut R) -> Vec2 {
    Vec2::new(
        rng.sample(rand_distr::StandardNormal),
        rng.sample(rand_distr::StandardNormal),
    )
}

impl fmt::Display for GuidanceConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GuidanceConfig::Cfg { omega } => write!(f, "cfg:{omega}"),
            GuidanceConfig::Apg {
                eta,
                rescale_r,
                momentum_beta,
                omega,
            } => write!(f, "apg:{eta},{rescale_r},{momentum_beta},{omega}"),
            GuidanceConfig::Cads {
                tau1,
                tau2,
                noise_scale,
                mix_phi,
                omega,
            } => write!(f, "cads:{tau1},{tau2},{noise_scale},{mix_phi},{omega}"),
            GuidanceConfig::Interval {
                tau_lo,
                tau_hi,
                omega,
            } => write!(f, "interval:{tau_lo},{tau_hi},{omega}"),
        }
    }
}

fn parse_numbers(args: &str, expected: usize, kind: &str) -> Result<Vec<f64>> {
    let vals = args
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidGuidance(format!("bad number `{p}` in {kind} spec")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != expected {
        return Err(Error::InvalidGuidance(format!(
            "{kind} takes {expected} values, got {}",
            vals.len()
        )));
    }
    Ok(vals)
}

impl FromStr for GuidanceConfig {
    type Err = Error;

    /// `cfg:ω`, `apg:η,r,β,ω`, `cads:τ1,τ2,s,φ,ω`, `interval:τlo,τhi,ω`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidGuidance(format!("missing `:` in `{s}`")))?;
        let g = match kind.trim() {
            "cfg" => {
                let v = parse_numbers(args, 1, "cfg")?;
                GuidanceConfig::Cfg { omega: v[0] }
            }
            "apg" => {
                let v = parse_numbers(args, 4, "apg")?;
                GuidanceConfig::Apg {
                    eta: v[0],
                    rescale_r: v[1],
                    momentum_beta: v[2],
                    omega: v[3],
                }
            }
            "cads" => {
                let v = parse_numbers(args, 5, "cads")?;
                GuidanceConfig::Cads {
                    tau1: v[0],
                    tau2: v[1],
                    noise_scale: v[2],
                    mix_phi: v[3],
                    omega: v[4],
                }
            }
            "interval" => {
                let v = parse_numbers(args, 3, "interval")?;
                GuidanceConfig::Interval {
                    tau_lo: v[0],
                    tau_hi: v[1],
                    omega: v[2],
                }
            }
            other => return Err(Error::InvalidGuidance(format!("unknown guidance `{other}`"))),
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeOp {
    Or,
    And,
}

/// How OR composition weighs its constituents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Posterior responsibilities from the exact noised densities.
    ExactLikelihood,
    /// Equal weights 1/K.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionSpec {
    pub op: ComposeOp,
    pub labels: Vec<String>,
    pub weighting: Weighting,
}

impl CompositionSpec {
    pub fn or(labels: &[&str], weighting: Weighting) -> Self {
        CompositionSpec {
            op: ComposeOp::Or,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            weighting,
        }
    }

    pub fn and(labels: &[&str]) -> Self {
        CompositionSpec {
            op: ComposeOp::And,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            weighting: Weighting::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min = match self.op {
            ComposeOp::Or => 2,
            ComposeOp::And => 1,
        };
        if self.labels.len() < min {
            return Err(Error::InvalidGuidance(format!(
                "{:?} composition needs at least {min} labels",
                self.op
            )));
        }
        if self.labels.iter().any(|l| l.trim().is_empty()) {
            return Err(Error::InvalidGuidance("empty label in composition".into()));
        }
        Ok(())
    }
}

impl fmt::Display for CompositionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head = match (self.op, self.weighting) {
            (ComposeOp::Or, Weighting::ExactLikelihood) => "or-exact",
            (ComposeOp::Or, Weighting::Uniform) => "or-uniform",
            (ComposeOp::And, _) => "and",
        };
        write!(f, "{head}:{}", self.labels.join(","))
    }
}

impl FromStr for CompositionSpec {
    type Err = Error;

    /// `or-exact:L1,L2,…`, `or-uniform:L1,L2,…` or `and:L1,L2,…`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidGuidance(format!("missing `:` in `{s}`")))?;
        let (op, weighting) = match head.trim() {
            "or-exact" => (ComposeOp::Or, Weighting::ExactLikelihood),
            "or-uniform" => (ComposeOp::Or, Weighting::Uniform),
            "and" => (ComposeOp::And, Weighting::Uniform),
            other => return Err(Error::InvalidGuidance(format!("unknown composition `{other}`"))),
        };
        let spec = CompositionSpec {
            op,
            labels: rest.split(',').map(|l| l.trim().to_string()).collect(),
            weighting,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Σᵢ wᵢ·sᵢ.
pub fn or_combine(scores: &[Vec2], weights: &[f64]) -> Vec2 {
    scores
        .iter()
        .zip(weights)
        .fold(Vec2::ZERO, |acc, (s, w)| acc + *w * *s)
}

/// `s₁ + Σ_{i≥2}(sᵢ − s_u)`, i.e. `s_u + Σᵢ(sᵢ − s_u)` arranged so a single
/// constituent returns its own score exactly.
pub fn and_combine(s_u: Vec2, scores: &[Vec2]) -> Vec2 {
    let mut acc = scores[0];
    for s in &scores[1..] {
        acc += *s - s_u;
    }
    acc
}

/// Exact-likelihood OR weights: posterior over constituents given `x_t`,
/// `wᵢ ∝ πᵢ·p_t(x | cᵢ)` with πᵢ the prior mass of constituent `i`.
#[derive(Debug, Clone)]
pub struct OrWeights {
    log_priors: Vec<f64>,
    noised: Vec<crate::world::PreparedMixture>,
}

impl OrWeights {
    pub fn new(world: &World, schedule: &NoiseSchedule, labels: &[String], t: usize) -> Result<Self> {
        let mut log_priors = Vec::with_capacity(labels.len());
        let mut noised = Vec::with_capacity(labels.len());
        for l in labels {
            log_priors.push(world.prior(l)?.ln());
            noised.push(noised_mixture(&world.conditional(l)?, schedule, t)?.prepared());
        }
        Ok(OrWeights { log_priors, noised })
    }

    pub fn at(&self, x: Vec2) -> Vec<f64> {
        let mut logits: Vec<f64> = self
            .log_priors
            .iter()
            .zip(&self.noised)
            .map(|(lp, m)| lp + m.log_density(x))
            .collect();
        softmax_in_place(&mut logits);
        logits
    }
}

/// Source of OR composition weights.
#[derive(Debug, Clone, Copy)]
pub enum WeightSource<'a> {
    /// Exact posterior from the world's noised densities; `None` means no
    /// oracle is available.
    Exact(Option<(&'a World, &'a NoiseSchedule)>),
    Uniform,
}

/// OR composition of per-label scores at one point.
pub fn or_compose(
    field: &dyn ScoreField,
    labels: &[String],
    weights: WeightSource<'_>,
    x: Vec2,
    t: usize,
) -> Result<Vec2> {
    if labels.len() < 2 {
        return Err(Error::InvalidGuidance("OR composition needs at least 2 labels".into()));
    }
    let scores = labels
        .iter()
        .map(|l| field.score(x, t, Some(l)))
        .collect::<Result<Vec<_>>>()?;
    let w = match weights {
        WeightSource::Uniform => vec![1.0 / labels.len() as f64; labels.len()],
        WeightSource::Exact(Some((world, schedule))) => {
            OrWeights::new(world, schedule, labels, t)?.at(x)
        }
        WeightSource::Exact(None) => {
            return Err(Error::WeightSourceUnavailable(
                "exact OR weights need a mixture oracle",
            ))
        }
    };
    Ok(or_combine(&scores, &w))
}

/// AND composition `s_u + Σᵢ (s(x|cᵢ) − s_u)` at one point.
pub fn and_compose(field: &dyn ScoreField, labels: &[String], x: Vec2, t: usize) -> Result<Vec2> {
    if labels.is_empty() {
        return Err(Error::InvalidGuidance("AND composition needs at least 1 label".into()));
    }
    let s_u = field.score(x, t, None)?;
    let scores = labels
        .iter()
        .map(|l| field.score(x, t, Some(l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(and_combine(s_u, &scores))
}

/// Replaces a general label by one of its fine-grained refinements, drawn in
/// proportion to the prior weight of the covered components.
pub fn oracle_prompt_expand<R: Rng + ?Sized>(
    label: &str,
    vocab: &ConceptVocabulary,
    mixture: &Mixture,
    rng: &mut R,
) -> Result<String> {
    let set = vocab.get(label)?;
    if set.len() < 2 {
        return Err(Error::AlreadyFineGrained(label.to_string()));
    }
    let comps: Vec<usize> = set.iter().copied().collect();
    let weights: Vec<f64> = comps.iter().map(|&i| mixture.weights()[i]).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Degenerate(format!("`{label}` carries zero prior mass")));
    }
    let k = comps[pick_weighted(&weights, rng.random::<f64>())];
    vocab
        .fine_label_for(k)
        .map(str::to_string)
        .ok_or_else(|| Error::InvalidWorld(format!("component {k} has no fine-grained label")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{AnalyticField, ScheduleConfig};
    use crate::world::{quadrant_world, GaussianComponent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    #[test]
    fn cfg_special_cases() {
        let (u, c) = (v(1.0, 0.0), v(3.0, 0.0));
        assert_eq!(cfg_combine(c, u, 1.0), c);
        assert_eq!(cfg_combine(c, u, 0.0), u);
        assert_eq!(cfg_combine(c, u, 5.0), v(11.0, 0.0));
        let odd = (v(0.1, -7.3), v(2.2, 0.7));
        assert_eq!(cfg_combine(odd.1, odd.0, 1.0), odd.1);
        assert_eq!(cfg_combine(odd.1, odd.0, 0.0), odd.0);
    }

    #[test]
    fn cfg_score_unknown_condition() {
        let w = quadrant_world();
        let s = ScheduleConfig::default().build().unwrap();
        let f = AnalyticField::new(&w, &s);
        assert!(matches!(
            cfg_score(&f, v(0.0, 0.0), 5, "zebra", 3.0),
            Err(Error::UnknownConcept(_))
        ));
    }

    #[test]
    fn apg_degenerates_to_cfg() {
        let cfg = GuidanceConfig::Apg {
            eta: 1.0,
            rescale_r: f64::INFINITY,
            momentum_beta: 0.0,
            omega: 3.5,
        };
        let mut st = GuidanceState::default();
        for (c, u) in [(v(0.3, -1.2), v(2.0, 0.1)), (v(-4.0, 1.0), v(0.5, 0.5))] {
            assert_eq!(apg_guided_score(&mut st, c, u, &cfg), cfg_combine(c, u, 3.5));
        }
    }

    #[test]
    fn apg_suppresses_parallel_update() {
        let cfg = GuidanceConfig::Apg {
            eta: 0.0,
            rescale_r: f64::INFINITY,
            momentum_beta: 0.0,
            omega: 4.0,
        };
        let s_c = v(1.5, -2.0);
        let s_u = s_c - 0.7 * s_c; // difference parallel to s_c
        let out = apg_guided_score(&mut GuidanceState::default(), s_c, s_u, &cfg);
        assert!((out - s_c).norm() < 1e-14);
    }

    #[test]
    fn apg_rescale_saturates() {
        let cfg = GuidanceConfig::Apg {
            eta: 1.0,
            rescale_r: 0.5,
            momentum_beta: 0.0,
            omega: 3.0,
        };
        let (c, u) = (v(4.0, 1.0), v(-3.0, 2.0));
        let out = apg_guided_score(&mut GuidanceState::default(), c, u, &cfg);
        let update = (1.0 / (3.0 - 1.0)) * (out - c);
        assert!((update.norm() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn apg_momentum_accumulates() {
        let cfg = GuidanceConfig::Apg {
            eta: 1.0,
            rescale_r: f64::INFINITY,
            momentum_beta: -0.5,
            omega: 2.0,
        };
        let mut st = GuidanceState::default();
        let (c, u) = (v(1.0, 0.0), v(0.0, 0.0));
        apg_guided_score(&mut st, c, u, &cfg);
        assert_eq!(st.momentum, v(1.0, 0.0));
        let out = apg_guided_score(&mut st, c, u, &cfg);
        assert_eq!(st.momentum, v(0.5, 0.0));
        assert_eq!(out, v(1.5, 0.0));
    }

    #[test]
    fn apg_zero_conditional_score_is_all_orthogonal() {
        let cfg = GuidanceConfig::Apg {
            eta: 0.0,
            rescale_r: f64::INFINITY,
            momentum_beta: 0.0,
            omega: 2.0,
        };
        let out = apg_guided_score(&mut GuidanceState::default(), Vec2::ZERO, v(1.0, 1.0), &cfg);
        assert_eq!(out, v(-1.0, -1.0));
    }

    #[test]
    fn cads_weight_schedule() {
        assert_eq!(cads_condition_weight(0.0, 0.85, 1.25), 1.0);
        assert!((cads_condition_weight(1.0, 0.85, 1.25) - 0.625).abs() < 1e-15);
        assert_eq!(cads_condition_weight(0.99, 0.6, 0.95), 0.0);
        assert_eq!(cads_condition_weight(0.5, 0.5, 0.5), 1.0);
        assert_eq!(cads_condition_weight(0.51, 0.5, 0.5), 0.0);
    }

    #[test]
    fn cads_without_corruption_is_cfg() {
        let (c, u) = (v(0.4, 2.0), v(-1.0, 0.3));
        for (gamma_t, s) in [(0.2, 0.0), (0.99, 0.0), (0.1, 0.3)] {
            let cfg = GuidanceConfig::Cads {
                tau1: 0.3,
                tau2: 0.9,
                noise_scale: s,
                mix_phi: 1.0,
                omega: 3.0,
            };
            // γ = 1 at t = 0.1 and s = 0 everywhere
            let out = cfg.combine(gamma_t, Some(c), Some(u), &mut GuidanceState::default(), Some(v(9.0, 9.0)));
            assert_eq!(out, cfg_combine(c, u, 3.0));
        }
    }

    #[test]
    fn cads_corruption_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (s_c, gamma, s) = (v(2.0, -1.0), 0.36, 0.3);
        let n = 10_000;
        let draws: Vec<Vec2> = (0..n)
            .map(|_| cads_corrupt(s_c, gamma, s, standard_normal2(&mut rng)) - gamma.sqrt() * s_c)
            .collect();
        let mean = (1.0 / n as f64) * draws.iter().fold(Vec2::ZERO, |a, d| a + *d);
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for d in &draws {
            let e = *d - mean;
            vx += e.x * e.x;
            vy += e.y * e.y;
            cxy += e.x * e.y;
        }
        let k = 1.0 / (n - 1) as f64;
        let target = s * s * (1.0 - gamma);
        assert!((vx * k / target - 1.0).abs() < 0.05);
        assert!((vy * k / target - 1.0).abs() < 0.05);
        assert!((cxy * k).abs() < 0.05 * target);
    }

    #[test]
    fn cads_rescale_preserves_norm() {
        let s_c = v(3.0, 4.0);
        let out = cads_effective_condition(s_c, 0.2, 1.0, 1.0, v(0.5, -2.0));
        assert!((out.norm() - 5.0).abs() < 1e-12);
        assert_ne!(out, s_c);
    }

    #[test]
    fn interval_gate() {
        let w = quadrant_world();
        let s = ScheduleConfig::default().build().unwrap();
        let f = AnalyticField::new(&w, &s);
        let cfg = GuidanceConfig::Interval {
            tau_lo: 0.3,
            tau_hi: 0.95,
            omega: 3.0,
        };
        let x = v(0.5, 1.0);
        let inside = interval_guided_score(&f, &s, x, 500, "cat", &cfg).unwrap();
        assert_eq!(inside, cfg_score(&f, x, 500, "cat", 3.0).unwrap());
        let outside = interval_guided_score(&f, &s, x, 100, "cat", &cfg).unwrap();
        assert_eq!(outside, f.score(x, 100, None).unwrap());
    }

    #[test]
    fn or_exact_saturates_and_uniform_averages() {
        let w = quadrant_world();
        let s = ScheduleConfig::default().build().unwrap();
        let f = AnalyticField::new(&w, &s);
        let labels = vec!["white cat".to_string(), "black cat".to_string()];
        let weights = OrWeights::new(&w, &s, &labels, 5).unwrap().at(v(3.0, 3.0));
        assert!((weights[0] - 1.0).abs() < 1e-6 && weights[1] < 1e-6);

        let mid = v(3.0, 0.0);
        let got = or_compose(&f, &labels, WeightSource::Uniform, mid, 40).unwrap();
        let a = f.score(mid, 40, Some("white cat")).unwrap();
        let b = f.score(mid, 40, Some("black cat")).unwrap();
        assert!((got - 0.5 * (a + b)).norm() < 1e-14);

        assert!(matches!(
            or_compose(&f, &labels, WeightSource::Exact(None), mid, 40),
            Err(Error::WeightSourceUnavailable(_))
        ));
    }

    #[test]
    fn and_single_label_is_conditional() {
        let w = quadrant_world();
        let s = ScheduleConfig::default().build().unwrap();
        let f = AnalyticField::new(&w, &s);
        let x = v(-1.0, 2.0);
        let got = and_compose(&f, &["dog".to_string()], x, 300).unwrap();
        assert_eq!(got, f.score(x, 300, Some("dog")).unwrap());
        assert_eq!(got, cfg_score(&f, x, 300, "dog", 1.0).unwrap());
    }

    #[test]
    fn and_of_copies_is_cfg_with_omega_m() {
        let w = quadrant_world();
        let s = ScheduleConfig::default().build().unwrap();
        let f = AnalyticField::new(&w, &s);
        let x = v(0.7, -2.5);
        for m in 1..=4usize {
            let labels = vec!["white".to_string(); m];
            let and = and_compose(&f, &labels, x, 200).unwrap();
            let cfg = cfg_score(&f, x, 200, "white", m as f64).unwrap();
            assert!((and - cfg).norm() <= 1e-12 * cfg.norm().max(1.0));
        }
    }

    #[test]
    fn expansion_rejects_fine_labels() {
        let w = quadrant_world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            oracle_prompt_expand("white cat", &w.vocabulary, &w.mixture, &mut rng),
            Err(Error::AlreadyFineGrained(_))
        ));
        assert!(oracle_prompt_expand("zebra", &w.vocabulary, &w.mixture, &mut rng).is_err());
    }

    #[test]
    fn expansion_frequencies() {
        let w = quadrant_world();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let white = (0..n)
            .filter(|_| {
                oracle_prompt_expand("cat", &w.vocabulary, &w.mixture, &mut rng).unwrap() == "white cat"
            })
            .count();
        // Binomial(10⁴, ½): σ = 50, ±200 is 4σ.
        assert!((4800..=5200).contains(&white), "{white}");

        // Skewed pair: 0.9 / 0.1 prior over the cat components.
        let comps: Vec<GaussianComponent> = w.mixture.components().to_vec();
        let mut weights = vec![0.0; 4];
        weights[crate::world::quadrant::WHITE_CAT] = 0.9;
        weights[crate::world::quadrant::BLACK_CAT] = 0.1;
        let skew = Mixture::new(comps, weights).unwrap();
        let white = (0..n)
            .filter(|_| oracle_prompt_expand("cat", &w.vocabulary, &skew, &mut rng).unwrap() == "white cat")
            .count();
        let ratio = white as f64 / (n - white) as f64;
        assert!((ratio / 9.0 - 1.0).abs() < 0.10, "{ratio}");
    }

    #[test]
    fn spec_strings_roundtrip() {
        for s in [
            "cfg:3",
            "apg:0,10,-0.5,3",
            "apg:1,inf,0,3",
            "cads:0.85,1.25,0.3,1,3",
            "interval:0.3,0.95,3",
        ] {
            let g: GuidanceConfig = s.parse().unwrap();
            assert_eq!(g.to_string().parse::<GuidanceConfig>().unwrap(), g);
        }
        for bad in ["cfg", "cfg:x", "apg:1,2", "interval:0.9,0.1,3", "cads:0.1,0.2,-1,1,3", "cfg:-1", "nope:1"] {
            assert!(bad.parse::<GuidanceConfig>().is_err(), "{bad}");
        }
        let c: CompositionSpec = "or-exact:white cat,black cat".parse().unwrap();
        assert_eq!(c.labels, vec!["white cat", "black cat"]);
        assert_eq!(c.to_string(), "or-exact:white cat,black cat");
        assert!("or-uniform:cat".parse::<CompositionSpec>().is_err());
        assert!("and:white".parse::<CompositionSpec>().is_ok());
        assert!("xor:a,b".parse::<CompositionSpec>().is_err());
    }

    #[test]
    fn presets_match_published_tables() {
        let GuidanceConfig::Apg { eta, rescale_r, momentum_beta, .. } = GuidancePreset::Ldm35L.apg(3.0) else {
            unreachable!()
        };
        assert_eq!((eta, rescale_r, momentum_beta), (0.0, 10.0, -0.5));
        let GuidanceConfig::Cads { tau1, tau2, noise_scale, mix_phi, .. } = GuidancePreset::Ldm15.cads(3.0) else {
            unreachable!()
        };
        assert_eq!((tau1, tau2, noise_scale, mix_phi), (0.8, 1.3, 0.1, 1.0));
        assert_eq!(
            GuidancePreset::LdmXl.interval(3.0),
            GuidanceConfig::Interval { tau_lo: 0.08, tau_hi: 0.81, omega: 3.0 }
        );
    }

    mod props {
        use super::*;
        use crate::sampler::{ancestral_sample, Conditioning, SampleRequest};
        use proptest::prelude::*;

        fn vec2() -> impl Strategy<Value = Vec2> {
            (-20.0f64..20.0, -20.0f64..20.0).prop_map(|(x, y)| v(x, y))
        }

        fn skewed_world(raw: [f64; 4]) -> World {
            let w = quadrant_world();
            let total: f64 = raw.iter().sum();
            let weights = raw.iter().map(|r| r / total).collect();
            World::new(Mixture::new(w.mixture.components().to_vec(), weights).unwrap(), w.vocabulary).unwrap()
        }

        fn refinements(w: &World, label: &str) -> Vec<String> {
            w.vocabulary
                .get(label)
                .unwrap()
                .iter()
                .map(|&i| w.vocabulary.fine_label_for(i).unwrap().to_string())
                .collect()
        }

        proptest! {
            #[test]
            fn degenerate_variants_are_cfg(
                steps in proptest::collection::vec((vec2(), vec2(), vec2(), 0.0f64..=1.0), 1..8),
                omega in 0.0f64..8.0,
                tau1 in 0.0f64..1.0,
                phi in 0.0f64..=1.0,
            ) {
                let apg = GuidanceConfig::Apg { eta: 1.0, rescale_r: f64::INFINITY, momentum_beta: 0.0, omega };
                let cads_quiet = GuidanceConfig::Cads { tau1, tau2: tau1 + 0.5, noise_scale: 0.0, mix_phi: phi, omega };
                let cads_gated = GuidanceConfig::Cads { tau1: 1.0, tau2: 1.5, noise_scale: 0.7, mix_phi: phi, omega };
                let interval = GuidanceConfig::Interval { tau_lo: 0.0, tau_hi: 1.0, omega };
                for g in [apg, cads_quiet, cads_gated, interval] {
                    let mut state = GuidanceState::default();
                    for &(c, u, n, t_norm) in &steps {
                        let got = g.combine(t_norm, Some(c), Some(u), &mut state, Some(n));
                        prop_assert_eq!(got, cfg_combine(c, u, omega), "{}", g);
                    }
                }
            }

            #[test]
            fn exact_or_recovers_general_score(
                raw in proptest::array::uniform4(0.01f64..1.0),
                label in prop::sample::select(vec!["cat", "dog", "white", "black"]),
                x in -6.0f64..6.0, y in -6.0f64..6.0,
                t in 0usize..1000,
            ) {
                let w = skewed_world(raw);
                let s = ScheduleConfig::default().build().unwrap();
                let f = AnalyticField::new(&w, &s);
                let p = v(x, y);
                let fine = refinements(&w, label);
                let got = or_compose(&f, &fine, WeightSource::Exact(Some((&w, &s))), p, t).unwrap();
                let want = f.score(p, t, Some(label)).unwrap();
                prop_assert!((got - want).norm() <= 1e-8 * want.norm().max(1.0), "{} vs {}", got, want);
            }

            #[test]
            fn and_of_copies_matches_cfg(
                label in prop::sample::select(vec!["cat", "black", "white dog"]),
                m in 1usize..7,
                x in -8.0f64..8.0, y in -8.0f64..8.0,
                t in 0usize..1000,
            ) {
                let w = quadrant_world();
                let s = ScheduleConfig::default().build().unwrap();
                let f = AnalyticField::new(&w, &s);
                let p = v(x, y);
                let and = and_compose(&f, &vec![label.to_string(); m], p, t).unwrap();
                let cfg = cfg_score(&f, p, t, label, m as f64).unwrap();
                prop_assert!((and - cfg).norm() <= 1e-12 * cfg.norm().max(1.0) * m as f64, "{} vs {}", and, cfg);
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]
            #[test]
            fn trajectories_repeat_per_seed(
                seed in any::<u64>(),
                variant in 0usize..4,
            ) {
                let w = quadrant_world();
                let s = ScheduleConfig::default().build().unwrap();
                let f = AnalyticField::new(&w, &s);
                let guidance = match variant {
                    0 => GuidanceConfig::cfg(3.0),
                    1 => GuidancePreset::Ldm35L.apg(3.0),
                    2 => GuidancePreset::Ldm15.cads(3.0),
                    _ => GuidancePreset::LdmXl.interval(3.0),
                };
                let req = SampleRequest::new(Conditioning::Label("cat".into()), guidance, 3, seed);
                let a = ancestral_sample(&f, &s, &req, Some(&w)).unwrap();
                let b = ancestral_sample(&f, &s, &req, Some(&w)).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
