//! Nonconformity scores from normalized label probabilities.
//!
//! A score provider hands back a probability distribution over the day's label
//! space; the score of a label is `1 - p(label)`, clamped to `[0, 1]`. Raw
//! provider outputs are normalized first and labels that are not in the space
//! are dropped.
//!
//! The synthetic oracle stands in for a model head in simulations: it puts an
//! expected `truth_mass` on the ground truth and spreads the rest over the other
//! labels with a kernel that decays with distance in label order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution as _};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{LabelSpace, PredictionSet};
use crate::schedule::{drifted, Drift};
use crate::AgentRng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("no positive probability mass on any label in the space")]
    DegenerateDistribution,
    #[error("probability mass for `{0}` is negative or not finite")]
    InvalidMass(String),
    #[error("label index {0} is outside the distribution")]
    UnknownLabel(usize),
    #[error("distribution has {got} entries, label space has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("invalid oracle settings: {0}")]
    InvalidSpec(String),
    #[error("external provider failed: {0}")]
    Provider(String),
}

/// Probability vector aligned with a label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Accepts a vector that is already a distribution (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self, ScoreError> {
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(ScoreError::InvalidMass(i.to_string()));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ScoreError::DegenerateDistribution);
        }
        Ok(Self(probs))
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, label: usize) -> Option<f64> {
        self.0.get(label).copied()
    }

    pub fn scores(&self) -> ScoreVector {
        ScoreVector(self.0.iter().map(|p| (1.0 - p).clamp(0.0, 1.0)).collect())
    }
}

/// Drops labels outside `space`, then rescales to unit mass.
///
/// Labels in the space with no raw entry get probability zero; repeated
/// entries for one label are summed.
pub fn normalize_probabilities<I, K>(raw: I, space: &LabelSpace) -> Result<Distribution, ScoreError>
where
    I: IntoIterator<Item = (K, f64)>,
    K: AsRef<str>,
{
    let mut mass = vec![0.0; space.len()];
    for (label, value) in raw {
        let label = label.as_ref();
        if !value.is_finite() || value < 0.0 {
            return Err(ScoreError::InvalidMass(label.to_string()));
        }
        if let Ok(i) = space.index_of(label) {
            mass[i] += value;
        }
    }
    normalize_vector(mass)
}

fn normalize_vector(mut mass: Vec<f64>) -> Result<Distribution, ScoreError> {
    let total: f64 = mass.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(ScoreError::DegenerateDistribution);
    }
    for m in &mut mass {
        *m /= total;
    }
    Ok(Distribution(mass))
}

/// `1 - p(label)`, clamped to `[0, 1]`.
pub fn score_from_distribution(p: &Distribution, label: usize) -> Result<f64, ScoreError> {
    p.get(label)
        .map(|q| (1.0 - q).clamp(0.0, 1.0))
        .ok_or(ScoreError::UnknownLabel(label))
}

/// Per-label nonconformity scores, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    /// Clamps finite scores into `[0, 1]`; NaN is rejected.
    pub fn new(scores: Vec<f64>) -> Result<Self, ScoreError> {
        scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if s.is_nan() {
                    Err(ScoreError::InvalidMass(i.to_string()))
                } else {
                    Ok(s.clamp(0.0, 1.0))
                }
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Parameters of the synthetic probability oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributionSpec {
    /// Expected probability on the ground truth, in (0, 1].
    pub truth_mass: f64,
    /// Decay rate of the remaining mass over labels ranked by distance from
    /// the truth (ties broken at random). `inf` puts it all on one nearest
    /// label.
    pub concentration: f64,
    /// Relative spread of the truth mass, in [0, 1). The truth mass is drawn
    /// from a Beta with mean `truth_mass` and variance `noise² · m(1-m)`.
    pub noise: f64,
    pub noise_seed: u64,
    pub drift: Option<Drift>,
    /// Fraction of mass moved uniformly onto the human's latest set.
    pub human_boost: f64,
}

impl Default for DistributionSpec {
    fn default() -> Self {
        Self {
            truth_mass: 0.6,
            concentration: 0.5,
            noise: 0.5,
            noise_seed: 0,
            drift: None,
            human_boost: 0.0,
        }
    }
}

impl DistributionSpec {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let bad = |msg: &str| Err(ScoreError::InvalidSpec(msg.into()));
        if !(self.truth_mass > 0.0 && self.truth_mass <= 1.0) {
            return bad("truth_mass must be in (0, 1]");
        }
        if self.concentration.is_nan() || self.concentration < 0.0 {
            return bad("concentration must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad("noise must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.human_boost) {
            return bad("human_boost must be in [0, 1]");
        }
        if let Some(Drift::Step { value, .. } | Drift::Linear { value, .. }) = &self.drift {
            if !(*value > 0.0 && *value <= 1.0) {
                return bad("drifted truth_mass must be in (0, 1]");
            }
        }
        Ok(())
    }

    pub fn truth_mass_at(&self, day: u64) -> f64 {
        drifted(self.truth_mass, self.drift.as_ref(), day).clamp(0.0, 1.0)
    }
}

/// What a score provider may look at when producing a distribution.
#[derive(Debug, Clone, Copy)]
pub struct OracleContext<'a> {
    pub day_index: u64,
    pub label_space: &'a LabelSpace,
    pub ground_truth: usize,
    pub human_sets: &'a [PredictionSet],
}

/// Draws a synthetic distribution concentrated around the ground truth.
pub fn synthetic_distribution(
    spec: &DistributionSpec,
    ctx: &OracleContext<'_>,
    rng: &mut AgentRng,
) -> Result<Distribution, ScoreError> {
    let k = ctx.label_space.len();
    let truth = ctx.ground_truth;
    if truth >= k {
        return Err(ScoreError::UnknownLabel(truth));
    }
    let mean = spec.truth_mass_at(ctx.day_index);
    let truth_mass = if spec.noise > 0.0 && mean > 0.0 && mean < 1.0 {
        let precision = 1.0 / (spec.noise * spec.noise) - 1.0;
        Beta::new(mean * precision, (1.0 - mean) * precision)
            .map_err(|e| ScoreError::InvalidSpec(e.to_string()))?
            .sample(rng)
    } else {
        mean
    };

    // Remaining mass decays with rank by distance from the truth; ties are
    // broken at random so one nearest label can dominate.
    let mut others: Vec<usize> = (0..k).filter(|&j| j != truth).collect();
    others.shuffle(rng);
    others.sort_by_key(|&j| truth.abs_diff(j));
    let mut probs = vec![0.0; k];
    if others.is_empty() {
        probs[truth] = 1.0;
    } else {
        let mut total = 0.0;
        for (rank, &j) in others.iter().enumerate() {
            let kernel = if spec.concentration.is_infinite() {
                if rank == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (-spec.concentration * rank as f64).exp()
            };
            let jitter = if spec.noise > 0.0 {
                rng.random_range(1.0 - spec.noise..=1.0 + spec.noise)
            } else {
                1.0
            };
            probs[j] = kernel * jitter;
            total += probs[j];
        }
        for &j in &others {
            probs[j] *= (1.0 - truth_mass) / total;
        }
        probs[truth] = truth_mass;
    }

    if spec.human_boost > 0.0 {
        if let Some(latest) = ctx.human_sets.last().filter(|h| !h.is_empty()) {
            let share = spec.human_boost / latest.len() as f64;
            for p in &mut probs {
                *p *= 1.0 - spec.human_boost;
            }
            for j in latest.iter().filter(|&j| j < k) {
                probs[j] += share;
            }
        }
    }
    normalize_vector(probs)
}

/// Source of per-round label distributions for the AI side.
pub trait ScoreProvider: Send {
    fn distribution(
        &mut self,
        ctx: &OracleContext<'_>,
        rng: &mut AgentRng,
    ) -> Result<Distribution, ScoreError>;
}

#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    pub spec: DistributionSpec,
}

impl ScoreProvider for SyntheticOracle {
    fn distribution(
        &mut self,
        ctx: &OracleContext<'_>,
        rng: &mut AgentRng,
    ) -> Result<Distribution, ScoreError> {
        synthetic_distribution(&self.spec, ctx, rng)
    }
}

/// Puts zero mass on the truth, so the truth always has score 1.
#[derive(Debug, Clone, Default)]
pub struct AdversarialOracle;

impl ScoreProvider for AdversarialOracle {
    fn distribution(
        &mut self,
        ctx: &OracleContext<'_>,
        rng: &mut AgentRng,
    ) -> Result<Distribution, ScoreError> {
        let k = ctx.label_space.len();
        if k == 1 {
            return Ok(Distribution(vec![1.0]));
        }
        let raw: Vec<f64> = (0..k)
            .map(|j| {
                if j == ctx.ground_truth {
                    0.0
                } else {
                    rng.random_range(0.01..1.0)
                }
            })
            .collect();
        normalize_vector(raw)
    }
}

/// Request sent to an external distribution provider.
#[derive(Debug, Clone, Serialize)]
pub struct ProviderRequest {
    pub endpoint: Option<String>,
    pub day_index: u64,
    pub labels: Vec<String>,
    pub human_sets: Vec<Vec<String>>,
}

/// A remote model that returns raw, possibly unnormalized and possibly
/// hallucinated label masses.
pub trait ExternalProvider: Send {
    fn query(
        &mut self,
        request: &ProviderRequest,
        ctx: &OracleContext<'_>,
        rng: &mut AgentRng,
    ) -> Result<BTreeMap<String, f64>, ScoreError>;
}

/// Normalizes whatever an [`ExternalProvider`] returns.
pub struct AdapterOracle<P> {
    pub endpoint: Option<String>,
    pub provider: P,
}

impl<P: ExternalProvider> ScoreProvider for AdapterOracle<P> {
    fn distribution(
        &mut self,
        ctx: &OracleContext<'_>,
        rng: &mut AgentRng,
    ) -> Result<Distribution, ScoreError> {
        let request = ProviderRequest {
            endpoint: self.endpoint.clone(),
            day_index: ctx.day_index,
            labels: ctx.label_space.labels().to_vec(),
            human_sets: ctx
                .human_sets
                .iter()
                .map(|h| ctx.label_space.names(h))
                .collect(),
        };
        let raw = self.provider.query(&request, ctx, rng)?;
        normalize_probabilities(raw, ctx.label_space)
    }
}

/// Offline stand-in for a model endpoint: synthetic masses scaled by an
/// arbitrary factor plus one hallucinated label outside the space.
#[derive(Debug, Clone)]
pub struct MockProvider {
    pub spec: DistributionSpec,
    pub scale: f64,
}

impl ExternalProvider for MockProvider {
    fn query(
        &mut self,
        _request: &ProviderRequest,
        ctx: &OracleContext<'_>,
        rng: &mut AgentRng,
    ) -> Result<BTreeMap<String, f64>, ScoreError> {
        let p = synthetic_distribution(&self.spec, ctx, rng)?;
        let mut raw: BTreeMap<String, f64> = ctx
            .label_space
            .labels()
            .iter()
            .zip(p.probs())
            .map(|(l, &q)| (l.clone(), q * self.scale))
            .collect();
        raw.insert("<hallucinated>".into(), self.scale);
        Ok(raw)
    }
}
