//! Simulated human participants.
//!
//! The calibrator treats the human as a black box that hands over prediction
//! sets. These policies generate such sets for simulations: a stochastic
//! proposer that adopts AI suggestions with some probability, an interval
//! proposer for counting tasks, and an adversary that targets the error
//! indicators directly.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{DayRecord, LabelSpace, PredictionSet, Thresholds};
use crate::schedule::{drifted, Drift};
use crate::AgentRng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("set size {set_size} exceeds label space of {labels}")]
    SetTooLarge { set_size: usize, labels: usize },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// Everything an agent is handed at a turn. Honest policies only use the
/// ground truth to draw their initial proposal with the configured accuracy.
#[derive(Debug, Clone, Copy)]
pub struct DayView<'a> {
    pub day_index: u64,
    pub label_space: &'a LabelSpace,
    pub ground_truth: usize,
    pub thresholds: Thresholds,
    /// 1-based index of the round being played.
    pub round: usize,
}

/// The human's reaction to an AI set.
#[derive(Debug, Clone, PartialEq)]
pub struct Revision {
    pub set: PredictionSet,
    pub proceed: bool,
}

pub trait HumanAgent: Send {
    fn propose(
        &mut self,
        view: &DayView<'_>,
        rng: &mut AgentRng,
    ) -> Result<PredictionSet, AgentError>;

    fn revise(
        &mut self,
        view: &DayView<'_>,
        current: &PredictionSet,
        ai_set: &PredictionSet,
        rng: &mut AgentRng,
    ) -> Revision;

    /// Free-text message attached to a proposal.
    fn message(&self, _view: &DayView<'_>) -> String {
        String::new()
    }
}

/// Fixed-size proposer with tunable accuracy, trust and stubbornness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanPolicy {
    pub set_size: usize,
    pub initial_accuracy: f64,
    pub trust: f64,
    pub stubbornness: f64,
    pub max_rounds: usize,
    pub stop_on_agreement: bool,
    /// Drift of `initial_accuracy` over days.
    pub drift: Option<Drift>,
}

impl Default for HumanPolicy {
    fn default() -> Self {
        Self {
            set_size: 2,
            initial_accuracy: 0.6,
            trust: 0.5,
            stubbornness: 0.3,
            max_rounds: 6,
            stop_on_agreement: true,
            drift: None,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<(), AgentError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(AgentError::InvalidPolicy(format!(
            "{name} = {v} not in [0, 1]"
        )))
    }
}

impl HumanPolicy {
    /// The trusting profile: adopts most AI suggestions, rarely sticks.
    pub fn trusting() -> Self {
        Self {
            trust: 0.8,
            stubbornness: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.set_size == 0 {
            return Err(AgentError::InvalidPolicy(
                "set_size must be positive".into(),
            ));
        }
        if self.max_rounds == 0 {
            return Err(AgentError::InvalidPolicy(
                "max_rounds must be positive".into(),
            ));
        }
        check_unit("initial_accuracy", self.initial_accuracy)?;
        check_unit("trust", self.trust)?;
        check_unit("stubbornness", self.stubbornness)
    }

    pub fn accuracy_at(&self, day: u64) -> f64 {
        drifted(self.initial_accuracy, self.drift.as_ref(), day).clamp(0.0, 1.0)
    }
}

/// Draws a set of exactly `set_size` labels that contains `ground_truth` with
/// probability `accuracy`.
///
/// When `set_size` equals the space size the set is the whole space.
pub fn initial_proposal(
    set_size: usize,
    accuracy: f64,
    label_space: &LabelSpace,
    ground_truth: usize,
    rng: &mut AgentRng,
) -> Result<PredictionSet, AgentError> {
    let k = label_space.len();
    if set_size > k {
        return Err(AgentError::SetTooLarge {
            set_size,
            labels: k,
        });
    }
    let include = set_size == k || (set_size > 0 && rng.random_bool(accuracy.clamp(0.0, 1.0)));
    let others: Vec<usize> = (0..k).filter(|&j| j != ground_truth).collect();
    let extra = if include { set_size - 1 } else { set_size };
    let mut set: PredictionSet = others.choose_multiple(rng, extra).copied().collect();
    if include {
        set.insert(ground_truth);
    }
    Ok(set)
}

/// One revision step of [`HumanPolicy`].
///
/// With probability `stubbornness` the set is kept. Otherwise every AI label
/// the human does not hold is considered in random order and, with
/// probability `trust`, swapped in for a held label the AI did not endorse.
/// The set size never changes. The human stops when `stop_on_agreement` holds
/// and the current set lies inside the AI set, or when the round budget runs
/// out.
pub fn revise(
    policy: &HumanPolicy,
    current: &PredictionSet,
    ai_set: &PredictionSet,
    round: usize,
    rng: &mut AgentRng,
) -> Revision {
    let agreed = policy.stop_on_agreement && current.is_subset(ai_set);
    let proceed = !agreed && round < policy.max_rounds;
    if rng.random_bool(policy.stubbornness) {
        return Revision {
            set: current.clone(),
            proceed,
        };
    }
    let mut candidates: Vec<usize> = ai_set.iter().filter(|&y| !current.contains(y)).collect();
    let mut replaceable: Vec<usize> = current.iter().filter(|&y| !ai_set.contains(y)).collect();
    candidates.shuffle(rng);
    replaceable.shuffle(rng);
    let mut set = current.clone();
    for label in candidates {
        if replaceable.is_empty() {
            break;
        }
        if rng.random_bool(policy.trust) {
            let out = replaceable.pop().expect("nonempty");
            set.remove(out);
            set.insert(label);
        }
    }
    Revision { set, proceed }
}

impl HumanAgent for HumanPolicy {
    fn propose(
        &mut self,
        view: &DayView<'_>,
        rng: &mut AgentRng,
    ) -> Result<PredictionSet, AgentError> {
        initial_proposal(
            self.set_size,
            self.accuracy_at(view.day_index),
            view.label_space,
            view.ground_truth,
            rng,
        )
    }

    fn revise(
        &mut self,
        view: &DayView<'_>,
        current: &PredictionSet,
        ai_set: &PredictionSet,
        rng: &mut AgentRng,
    ) -> Revision {
        revise(self, current, ai_set, view.round, rng)
    }
}

/// Contiguous-range proposer for counting tasks over an ordered label space.
///
/// The human perceives `truth + N(0, perception_noise)` (in label steps) and
/// proposes the `set_size` consecutive labels centered there. On revision the
/// human either keeps the range, re-centers on the AI set (with probability
/// `trust`), or takes a second, noisier look.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntervalPolicy {
    pub set_size: usize,
    pub perception_noise: f64,
    /// Noise multiplier for a second look at the stimulus.
    pub second_look_factor: f64,
    pub trust: f64,
    pub stubbornness: f64,
    pub max_rounds: usize,
    pub stop_on_agreement: bool,
}

impl Default for IntervalPolicy {
    fn default() -> Self {
        Self {
            set_size: 3,
            perception_noise: 2.5,
            second_look_factor: 1.4,
            trust: 0.6,
            stubbornness: 0.2,
            max_rounds: 2,
            stop_on_agreement: false,
        }
    }
}

impl IntervalPolicy {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.set_size == 0 || self.max_rounds == 0 {
            return Err(AgentError::InvalidPolicy(
                "set_size and max_rounds must be positive".into(),
            ));
        }
        if !(self.perception_noise >= 0.0 && self.second_look_factor >= 0.0) {
            return Err(AgentError::InvalidPolicy(
                "noise must be nonnegative".into(),
            ));
        }
        check_unit("trust", self.trust)?;
        check_unit("stubbornness", self.stubbornness)
    }

    fn look(&self, k: usize, truth: usize, noise: f64, rng: &mut AgentRng) -> PredictionSet {
        let offset = if noise > 0.0 {
            Normal::new(0.0, noise)
                .expect("noise checked")
                .sample(rng)
                .round() as i64
        } else {
            0
        };
        window(k, self.set_size, truth as i64 + offset)
    }
}

/// `size` consecutive label indices centered on `center`, shifted to fit.
pub fn window(k: usize, size: usize, center: i64) -> PredictionSet {
    let size = size.min(k);
    let half = (size as i64 - 1) / 2;
    let start = (center - half).clamp(0, (k - size) as i64) as usize;
    (start..start + size).collect()
}

impl HumanAgent for IntervalPolicy {
    fn propose(
        &mut self,
        view: &DayView<'_>,
        rng: &mut AgentRng,
    ) -> Result<PredictionSet, AgentError> {
        let k = view.label_space.len();
        if self.set_size > k {
            return Err(AgentError::SetTooLarge {
                set_size: self.set_size,
                labels: k,
            });
        }
        Ok(self.look(k, view.ground_truth, self.perception_noise, rng))
    }

    fn revise(
        &mut self,
        view: &DayView<'_>,
        current: &PredictionSet,
        ai_set: &PredictionSet,
        rng: &mut AgentRng,
    ) -> Revision {
        let k = view.label_space.len();
        let agreed = self.stop_on_agreement && current.is_subset(ai_set);
        let proceed = !agreed && view.round < self.max_rounds;
        let set = if rng.random_bool(self.stubbornness) {
            current.clone()
        } else if !ai_set.is_empty() && rng.random_bool(self.trust) {
            let members: Vec<usize> = ai_set.iter().collect();
            window(k, self.set_size, members[members.len() / 2] as i64)
        } else {
            self.look(
                k,
                view.ground_truth,
                self.perception_noise * self.second_look_factor,
                rng,
            )
        };
        Revision { set, proceed }
    }
}

/// A human that steers its proposals against the calibrator.
///
/// It reads the current thresholds and the ground truth. While `tau < 1` it
/// keeps the truth in its set on every round but the last (inviting harm
/// errors); while `lambda < 1` it drops the truth on the final round (inviting
/// complementarity errors). It always plays `max_rounds` rounds. After
/// `flip_at_day` it swaps which rounds carry the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialPolicy {
    pub set_size: usize,
    pub max_rounds: usize,
    pub flip_at_day: Option<u64>,
}

impl Default for AdversarialPolicy {
    fn default() -> Self {
        Self {
            set_size: 2,
            max_rounds: 3,
            flip_at_day: None,
        }
    }
}

impl AdversarialPolicy {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.set_size == 0 || self.max_rounds == 0 {
            return Err(AgentError::InvalidPolicy(
                "set_size and max_rounds must be positive".into(),
            ));
        }
        Ok(())
    }

    fn wants_truth(&self, view: &DayView<'_>, round: usize) -> bool {
        let last = round >= self.max_rounds;
        let flipped = self.flip_at_day.is_some_and(|d| view.day_index >= d);
        let harm_round = if flipped { last } else { !last };
        let harm_possible = view.thresholds.tau < 1.0;
        if harm_round {
            harm_possible
        } else {
            // Dropping the truth only pays while complementarity errors can occur.
            view.thresholds.lambda >= 1.0 && harm_possible
        }
    }

    fn set_for(
        &self,
        view: &DayView<'_>,
        round: usize,
        rng: &mut AgentRng,
    ) -> Result<PredictionSet, AgentError> {
        let accuracy = if self.wants_truth(view, round) {
            1.0
        } else {
            0.0
        };
        initial_proposal(
            self.set_size,
            accuracy,
            view.label_space,
            view.ground_truth,
            rng,
        )
    }
}

impl HumanAgent for AdversarialPolicy {
    fn propose(
        &mut self,
        view: &DayView<'_>,
        rng: &mut AgentRng,
    ) -> Result<PredictionSet, AgentError> {
        self.set_for(view, 1, rng)
    }

    fn revise(
        &mut self,
        view: &DayView<'_>,
        current: &PredictionSet,
        _ai_set: &PredictionSet,
        rng: &mut AgentRng,
    ) -> Revision {
        let proceed = view.round < self.max_rounds;
        let set = self
            .set_for(view, view.round + 1, rng)
            .unwrap_or_else(|_| current.clone());
        Revision { set, proceed }
    }
}

/// Whether the human held the truth at the start and at the end of a day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AgentOutcome {
    pub initial_had_truth: bool,
    pub final_had_truth: bool,
    pub gt_loss: bool,
    pub gt_gain: bool,
}

impl AgentOutcome {
    pub fn new(initial_had_truth: bool, final_had_truth: bool) -> Self {
        Self {
            initial_had_truth,
            final_had_truth,
            gt_loss: initial_had_truth && !final_had_truth,
            gt_gain: !initial_had_truth && final_had_truth,
        }
    }

    /// Outcome of a finalized day: first proposal vs final answer.
    pub fn of_day(day: &DayRecord) -> Option<Self> {
        let truth = day.ground_truth()?;
        let first = day.rounds().first()?;
        let last = day.final_answer()?;
        Some(Self::new(
            first.human_set.contains(truth),
            last.contains(truth),
        ))
    }
}
