//! DDPM ancestral sampling under a guidance rule.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, ScoreField};
use crate::error::{Error, Result};
use crate::guidance::{
    and_combine, oracle_prompt_expand, or_combine, standard_normal2, ComposeOp, CompositionSpec,
    GuidanceConfig, GuidanceState, OrWeights, Weighting,
};
use crate::world::{SampleMeta, SampleSet, Vec2, World};

/// Variance of the noise injected at each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// σ²_t = β_t.
    #[default]
    Beta,
    /// σ²_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t).
    BetaTilde,
}

/// What the conditional score of a trajectory is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Unconditional,
    Label(String),
    Composite(CompositionSpec),
}

impl Conditioning {
    pub fn describe(&self) -> Option<String> {
        match self {
            Conditioning::Unconditional => None,
            Conditioning::Label(l) => Some(l.clone()),
            Conditioning::Composite(c) => Some(c.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub conditioning: Conditioning,
    pub guidance: GuidanceConfig,
    /// Replace a general label by an oracle-drawn fine-grained one per
    /// trajectory.
    pub expand_oracle: bool,
    pub n: usize,
    pub seed: u64,
    pub variance: PosteriorVariance,
}

impl SampleRequest {
    pub fn new(conditioning: Conditioning, guidance: GuidanceConfig, n: usize, seed: u64) -> Self {
        SampleRequest {
            conditioning,
            guidance,
            expand_oracle: false,
            n,
            seed,
            variance: PosteriorVariance::Beta,
        }
    }
}

// Stream ids within each trajectory's seed.
const STREAM_PATH: u64 = 0;
const STREAM_GUIDANCE: u64 = 1;
const STREAM_EXPAND: u64 = 2;

fn trajectory_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-step evaluation plan for the conditional part of the guided score.
enum Plan {
    Unconditional,
    /// Groups of trajectory indices sharing a label.
    Labels(BTreeMap<String, Vec<usize>>),
    Or {
        labels: Vec<String>,
        exact: bool,
    },
    And(Vec<String>),
}

fn gather(xs: &[Vec2], idx: &[usize]) -> Vec<Vec2> {
    idx.iter().map(|&i| xs[i]).collect()
}

/// Draws `req.n` samples by ancestral sampling from `x_T ~ N(0, I)`.
///
/// Trajectory `i` uses seed `req.seed + i`; its path noise, guidance noise and
/// prompt expansion come from separate streams of that seed, so results do
/// not depend on how trajectories are batched. `oracle` supplies the world
/// for exact OR weights and prompt expansion.
pub fn ancestral_sample(
    field: &dyn ScoreField,
    schedule: &NoiseSchedule,
    req: &SampleRequest,
    oracle: Option<&World>,
) -> Result<SampleSet> {
    ancestral_sample_observed(field, schedule, req, oracle, &mut |_, _| {})
}

/// [`ancestral_sample`] that reports every state: `observe(T, x)` with the
/// initial noise, then `observe(t, x)` after the reverse step at index `t`,
/// down to `t = 0`.
pub fn ancestral_sample_observed(
    field: &dyn ScoreField,
    schedule: &NoiseSchedule,
    req: &SampleRequest,
    oracle: Option<&World>,
    observe: &mut dyn FnMut(usize, &[Vec2]),
) -> Result<SampleSet> {
    if req.n == 0 {
        return Err(Error::EmptyRequest("sample count must be at least 1"));
    }
    req.guidance.validate()?;
    let n = req.n;
    let seeds: Vec<u64> = (0..n as u64).map(|i| req.seed.wrapping_add(i)).collect();

    let check = |label: &str| -> Result<()> {
        if field.supports(label) {
            Ok(())
        } else {
            Err(Error::UnknownConcept(label.to_string()))
        }
    };

    let plan = match &req.conditioning {
        Conditioning::Unconditional => {
            if req.expand_oracle {
                return Err(Error::InvalidGuidance("prompt expansion needs a label".into()));
            }
            Plan::Unconditional
        }
        Conditioning::Label(label) => {
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            if req.expand_oracle {
                let world = oracle.ok_or(Error::WeightSourceUnavailable(
                    "prompt expansion needs a mixture oracle",
                ))?;
                for (i, &s) in seeds.iter().enumerate() {
                    let mut rng = trajectory_rng(s, STREAM_EXPAND);
                    let fine = oracle_prompt_expand(label, &world.vocabulary, &world.mixture, &mut rng)?;
                    groups.entry(fine).or_default().push(i);
                }
            } else {
                groups.insert(label.clone(), (0..n).collect());
            }
            for l in groups.keys() {
                check(l)?;
            }
            Plan::Labels(groups)
        }
        Conditioning::Composite(spec) => {
            if req.expand_oracle {
                return Err(Error::InvalidGuidance(
                    "prompt expansion does not apply to compositions".into(),
                ));
            }
            spec.validate()?;
            for l in &spec.labels {
                check(l)?;
            }
            match spec.op {
                ComposeOp::Or => {
                    let exact = spec.weighting == Weighting::ExactLikelihood;
                    if exact && oracle.is_none() {
                        return Err(Error::WeightSourceUnavailable(
                            "exact OR weights need a mixture oracle",
                        ));
                    }
                    Plan::Or {
                        labels: spec.labels.clone(),
                        exact,
                    }
                }
                ComposeOp::And => Plan::And(spec.labels.clone()),
            }
        }
    };

    let mut xs: Vec<Vec2> = Vec::with_capacity(n);
    let mut path_rngs: Vec<ChaCha8Rng> = Vec::with_capacity(n);
    for &s in &seeds {
        let mut rng = trajectory_rng(s, STREAM_PATH);
        xs.push(standard_normal2(&mut rng));
        path_rngs.push(rng);
    }
    let mut guide_rngs: Vec<ChaCha8Rng> =
        seeds.iter().map(|&s| trajectory_rng(s, STREAM_GUIDANCE)).collect();
    let mut states = vec![GuidanceState::default(); n];
    let mut s_c: Vec<Option<Vec2>> = vec![None; n];
    observe(schedule.len(), &xs);

    for t in (0..schedule.len()).rev() {
        let t_norm = schedule.normalized_time(t);
        let needs = req.guidance.needs(t_norm);
        let needs_cond = needs.conditional && !matches!(plan, Plan::Unconditional);
        let needs_uncond = needs.unconditional
            || matches!(plan, Plan::Unconditional)
            || (needs_cond && matches!(plan, Plan::And(_)));

        let s_u = if needs_uncond {
            Some(field.score_batch(&xs, t, None)?)
        } else {
            None
        };

        s_c.iter_mut().for_each(|v| *v = None);
        if needs_cond {
            match &plan {
                Plan::Unconditional => unreachable!(),
                Plan::Labels(groups) => {
                    for (label, idx) in groups {
                        let pts = if groups.len() == 1 { xs.clone() } else { gather(&xs, idx) };
                        let scores = field.score_batch(&pts, t, Some(label))?;
                        for (&i, s) in idx.iter().zip(scores) {
                            s_c[i] = Some(s);
                        }
                    }
                }
                Plan::Or { labels, exact } => {
                    let per_label = labels
                        .iter()
                        .map(|l| field.score_batch(&xs, t, Some(l)))
                        .collect::<Result<Vec<_>>>()?;
                    let weights = if *exact {
                        Some(OrWeights::new(oracle.expect("checked above"), schedule, labels, t)?)
                    } else {
                        None
                    };
                    let uniform = vec![1.0 / labels.len() as f64; labels.len()];
                    let mut scores = vec![Vec2::ZERO; labels.len()];
                    for (i, x) in xs.iter().enumerate() {
                        for (k, s) in per_label.iter().enumerate() {
                            scores[k] = s[i];
                        }
                        let w = match &weights {
                            Some(ow) => ow.at(*x),
                            None => uniform.clone(),
                        };
                        s_c[i] = Some(or_combine(&scores, &w));
                    }
                }
                Plan::And(labels) => {
                    let per_label = labels
                        .iter()
                        .map(|l| field.score_batch(&xs, t, Some(l)))
                        .collect::<Result<Vec<_>>>()?;
                    let s_u = s_u.as_ref().expect("AND needs the unconditional score");
                    let mut scores = vec![Vec2::ZERO; labels.len()];
                    for i in 0..n {
                        for (k, s) in per_label.iter().enumerate() {
                            scores[k] = s[i];
                        }
                        s_c[i] = Some(and_combine(s_u[i], &scores));
                    }
                }
            }
        }

        let beta = schedule.betas()[t];
        let inv_sqrt_alpha = 1.0 / schedule.alphas()[t].sqrt();
        let sigma = if t == 0 {
            0.0
        } else {
            match req.variance {
                PosteriorVariance::Beta => beta.sqrt(),
                PosteriorVariance::BetaTilde => {
                    (beta * (1.0 - schedule.alpha_bars()[t - 1]) / (1.0 - schedule.alpha_bars()[t])).sqrt()
                }
            }
        };
        let uses_noise = req.guidance.uses_noise(t_norm);

        for i in 0..n {
            let su = s_u.as_ref().map(|v| v[i]);
            let g = if matches!(plan, Plan::Unconditional) {
                su.expect("unconditional score")
            } else {
                let noise = (uses_noise && needs_cond).then(|| standard_normal2(&mut guide_rngs[i]));
                req.guidance.combine(t_norm, s_c[i], su, &mut states[i], noise)
            };
            let mut x = inv_sqrt_alpha * (xs[i] + beta * g);
            if t > 0 {
                x += sigma * standard_normal2(&mut path_rngs[i]);
            }
            if !x.is_finite() {
                return Err(Error::Numerical(format!("trajectory {i} diverged at step {t}")));
            }
            xs[i] = x;
        }
        observe(t, &xs);
    }

    Ok(SampleSet {
        points: xs,
        meta: SampleMeta {
            condition: req.conditioning.describe(),
            guidance: req.guidance.to_string(),
            seed: req.seed,
            sampler: format!(
                "ddpm-ancestral/{}/{:?}/T={}{}",
                field.describe(),
                req.variance,
                schedule.len(),
                if req.expand_oracle { "/expand-oracle" } else { "" }
            ),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{AnalyticField, ScheduleConfig};
    use crate::world::{quadrant_world, ConceptVocabulary, Mat2, Mixture};

    fn schedule() -> NoiseSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    fn label(l: &str) -> Conditioning {
        Conditioning::Label(l.into())
    }

    #[test]
    fn single_gaussian_moments() {
        let mu = Vec2::new(1.0, -2.0);
        let cov = Mat2::new(0.8, 0.3, 0.3, 0.5);
        let mixture = Mixture::gaussian(mu, cov).unwrap();
        let vocab = ConceptVocabulary::new([("only".to_string(), [0].into())].into(), 1).unwrap();
        let world = World::new(mixture, vocab).unwrap();
        let s = schedule();
        let f = AnalyticField::new(&world, &s);
        let req = SampleRequest::new(label("only"), GuidanceConfig::cfg(1.0), 10_000, 7);
        let out = ancestral_sample(&f, &s, &req, None).unwrap();
        let n = out.len() as f64;
        let mean = (1.0 / n) * out.points.iter().fold(Vec2::ZERO, |a, p| a + *p);
        assert!((mean - mu).norm() < 0.05, "{mean}");
        let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
        for p in &out.points {
            let e = *p - mean;
            a += e.x * e.x;
            b += e.x * e.y;
            d += e.y * e.y;
        }
        let k = 1.0 / (n - 1.0);
        assert!((a * k - 0.8).abs() < 0.1 && (b * k - 0.3).abs() < 0.1 && (d * k - 0.5).abs() < 0.1);
    }

    #[test]
    fn black_dog_lands_in_its_quadrant() {
        let w = quadrant_world();
        let s = schedule();
        let f = AnalyticField::new(&w, &s);
        let req = SampleRequest::new(label("black dog"), GuidanceConfig::cfg(1.0), 2000, 3);
        let out = ancestral_sample(&f, &s, &req, Some(&w)).unwrap();
        let inside = out.points.iter().filter(|p| p.x < 0.0 && p.y < 0.0).count();
        assert!(inside as f64 >= 0.99 * out.len() as f64, "{inside}");
    }

    #[test]
    fn deterministic_and_batch_independent() {
        let w = quadrant_world();
        let s = ScheduleConfig {
            steps: 50,
            ..ScheduleConfig::default()
        }
        .build()
        .unwrap();
        let f = AnalyticField::new(&w, &s);
        let g: GuidanceConfig = "cads:0.2,0.9,0.3,1,3".parse().unwrap();
        let req = SampleRequest::new(label("cat"), g, 20, 11);
        let a = ancestral_sample(&f, &s, &req, Some(&w)).unwrap();
        assert_eq!(a, ancestral_sample(&f, &s, &req, Some(&w)).unwrap());
        // Trajectory 5 of the batch equals a lone trajectory with seed 16.
        let lone = ancestral_sample(&f, &s, &SampleRequest { n: 1, seed: 16, ..req.clone() }, Some(&w)).unwrap();
        assert_eq!(lone.points[0], a.points[5]);
    }

    #[test]
    fn request_validation() {
        let w = quadrant_world();
        let s = ScheduleConfig {
            steps: 10,
            ..ScheduleConfig::default()
        }
        .build()
        .unwrap();
        let f = AnalyticField::new(&w, &s);
        let base = SampleRequest::new(label("cat"), GuidanceConfig::cfg(3.0), 4, 0);
        assert!(matches!(
            ancestral_sample(&f, &s, &SampleRequest { n: 0, ..base.clone() }, None),
            Err(Error::EmptyRequest(_))
        ));
        assert!(matches!(
            ancestral_sample(&f, &s, &SampleRequest { guidance: GuidanceConfig::cfg(-1.0), ..base.clone() }, None),
            Err(Error::InvalidGuidance(_))
        ));
        assert!(matches!(
            ancestral_sample(&f, &s, &SampleRequest { conditioning: label("zebra"), ..base.clone() }, None),
            Err(Error::UnknownConcept(_))
        ));
        let or = Conditioning::Composite("or-exact:white cat,black cat".parse().unwrap());
        assert!(matches!(
            ancestral_sample(&f, &s, &SampleRequest { conditioning: or, ..base.clone() }, None),
            Err(Error::WeightSourceUnavailable(_))
        ));
        assert!(ancestral_sample(&f, &s, &SampleRequest { expand_oracle: true, ..base.clone() }, None).is_err());
        let fine = SampleRequest {
            expand_oracle: true,
            conditioning: label("white cat"),
            ..base
        };
        assert!(matches!(
            ancestral_sample(&f, &s, &fine, Some(&w)),
            Err(Error::AlreadyFineGrained(_))
        ));
    }

    #[test]
    fn beta_tilde_variant_runs() {
        let w = quadrant_world();
        let s = schedule();
        let f = AnalyticField::new(&w, &s);
        let req = SampleRequest {
            variance: PosteriorVariance::BetaTilde,
            ..SampleRequest::new(label("white cat"), GuidanceConfig::cfg(1.0), 500, 1)
        };
        let out = ancestral_sample(&f, &s, &req, Some(&w)).unwrap();
        let inside = out.points.iter().filter(|p| p.x > 0.0 && p.y > 0.0).count();
        assert!(inside >= 490);
    }
}
