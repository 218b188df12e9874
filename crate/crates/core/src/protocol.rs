//! Domain types for the day/round interaction protocol.
//!
//! A day is one problem instance. Within a day the human and the AI alternate:
//! the human proposes a set (plus an opaque message), the AI answers with its
//! own set (plus an opaque message). The human decides when to stop. After the
//! last round the ground truth is revealed and the day is closed.
//!
//! The only legal turn sequence per day is `(human, AI)^N` followed by
//! finalization. [`DayRecord`] enforces that automaton.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Errors raised by the protocol automaton and by label validation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("label space must contain at least one label")]
    EmptyLabelSpace,
    #[error("duplicate label `{0}` in label space")]
    DuplicateLabel(String),
    #[error("label `{0}` is not in the day's label space")]
    LabelOutOfSpace(String),
    #[error("label index {0} is outside a label space of size {1}")]
    IndexOutOfSpace(usize, usize),
    #[error("protocol order violated: {0}")]
    ProtocolOrder(&'static str),
    #[error("day is already finalized")]
    AlreadyFinal,
    #[error("day is not finalized yet")]
    NotFinal,
}

/// Ordered collection of distinct labels for one day.
///
/// Cloning is cheap: the labels are shared behind an `Arc`.
#[derive(Clone)]
pub struct LabelSpace {
    labels: Arc<[String]>,
    index: Arc<HashMap<String, usize>>,
}

impl LabelSpace {
    pub fn new<I, S>(labels: I) -> Result<Self, ProtocolError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(ProtocolError::EmptyLabelSpace);
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if index.insert(label.clone(), i).is_some() {
                return Err(ProtocolError::DuplicateLabel(label.clone()));
            }
        }
        Ok(Self {
            labels: labels.into(),
            index: Arc::new(index),
        })
    }

    /// Integer labels `lo..=hi`, in increasing order.
    pub fn integer_range(lo: i64, hi: i64) -> Result<Self, ProtocolError> {
        Self::new((lo..=hi).map(|v| v.to_string()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Result<usize, ProtocolError> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| ProtocolError::LabelOutOfSpace(label.to_string()))
    }

    /// Builds a prediction set from label identifiers, rejecting unknown labels.
    pub fn set_of<I, S>(&self, labels: I) -> Result<PredictionSet, ProtocolError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        labels
            .into_iter()
            .map(|l| self.index_of(l.as_ref()))
            .collect::<Result<BTreeSet<_>, _>>()
            .map(PredictionSet)
    }

    pub fn full_set(&self) -> PredictionSet {
        PredictionSet((0..self.len()).collect())
    }

    /// Label identifiers of `set`, in label-space order.
    pub fn names(&self, set: &PredictionSet) -> Vec<String> {
        set.iter()
            .filter_map(|i| self.label(i).map(str::to_string))
            .collect()
    }
}

impl PartialEq for LabelSpace {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.labels, &other.labels) || self.labels == other.labels
    }
}

impl Eq for LabelSpace {}

impl fmt::Debug for LabelSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.labels.iter()).finish()
    }
}

/// A subset of a label space, stored as label indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PredictionSet(BTreeSet<usize>);

impl PredictionSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.0.contains(&label)
    }

    pub fn insert(&mut self, label: usize) -> bool {
        self.0.insert(label)
    }

    pub fn remove(&mut self, label: usize) -> bool {
        self.0.remove(&label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn is_subset(&self, other: &PredictionSet) -> bool {
        self.0.is_subset(&other.0)
    }

    /// True when every member indexes into a space of `size` labels.
    pub fn fits(&self, size: usize) -> bool {
        self.0.last().is_none_or(|&max| max < size)
    }

    fn check_fits(&self, space: &LabelSpace) -> Result<(), ProtocolError> {
        match self.0.last() {
            Some(&max) if max >= space.len() => {
                Err(ProtocolError::IndexOutOfSpace(max, space.len()))
            }
            _ => Ok(()),
        }
    }
}

impl FromIterator<usize> for PredictionSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// The threshold pair applied to one day.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Thresholds {
    pub tau: f64,
    pub lambda: f64,
}

/// The AI half of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct AiTurn {
    pub set: PredictionSet,
    pub message: String,
    /// Per-label scores the set was built from, when recorded.
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub human_set: PredictionSet,
    pub human_message: String,
    pub ai: Option<AiTurn>,
}

impl Round {
    pub fn ai_set(&self) -> Option<&PredictionSet> {
        self.ai.as_ref().map(|a| &a.set)
    }
}

/// Error indicators and rule triggers realized on a closed day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DayErrors {
    pub e_ch: bool,
    pub e_comp: bool,
    /// Whether the harm rule triggered at any round for the true label.
    pub ch_triggered: bool,
    /// Whether the complementarity rule triggered at any round for the true label.
    pub comp_triggered: bool,
}

/// Full record of one day: transcript, thresholds, truth and realized errors.
#[derive(Debug, Clone, PartialEq)]
pub struct DayRecord {
    pub day_index: u64,
    pub problem_id: String,
    pub label_space: LabelSpace,
    rounds: Vec<Round>,
    /// Thresholds frozen for this day; set when the first AI set is built.
    pub thresholds: Option<Thresholds>,
    /// Human's final assessment after the last AI response, if given.
    final_set: Option<PredictionSet>,
    ground_truth: Option<usize>,
    errors: Option<DayErrors>,
}

impl DayRecord {
    /// Opens a day with no rounds.
    pub fn new(
        day_index: u64,
        problem_id: impl Into<String>,
        label_space: LabelSpace,
    ) -> Result<Self, ProtocolError> {
        if label_space.is_empty() {
            return Err(ProtocolError::EmptyLabelSpace);
        }
        Ok(Self {
            day_index,
            problem_id: problem_id.into(),
            label_space,
            rounds: Vec::new(),
            thresholds: None,
            final_set: None,
            ground_truth: None,
            errors: None,
        })
    }

    pub fn rounds(&self) -> &[Round] {
        &self.rounds
    }

    /// Number of rounds so far; equals N_t once the day is closed.
    pub fn stopping_round(&self) -> usize {
        self.rounds.len()
    }

    pub fn ground_truth(&self) -> Option<usize> {
        self.ground_truth
    }

    pub fn errors(&self) -> Option<DayErrors> {
        self.errors
    }

    pub fn is_final(&self) -> bool {
        self.ground_truth.is_some()
    }

    pub fn final_set(&self) -> Option<&PredictionSet> {
        self.final_set.as_ref()
    }

    /// The human's final answer: the explicit final set, else the last proposal.
    pub fn final_answer(&self) -> Option<&PredictionSet> {
        self.final_set
            .as_ref()
            .or_else(|| self.rounds.last().map(|r| &r.human_set))
    }

    pub fn human_sets(&self) -> Vec<PredictionSet> {
        self.rounds.iter().map(|r| r.human_set.clone()).collect()
    }

    /// True when a human turn is waiting for the AI response.
    pub fn awaiting_ai(&self) -> bool {
        self.rounds.last().is_some_and(|r| r.ai.is_none())
    }

    pub fn append_human_turn(
        &mut self,
        human_set: PredictionSet,
        human_message: impl Into<String>,
    ) -> Result<&Round, ProtocolError> {
        if self.is_final() {
            return Err(ProtocolError::AlreadyFinal);
        }
        if self.awaiting_ai() {
            return Err(ProtocolError::ProtocolOrder(
                "human turn while the previous round awaits the AI response",
            ));
        }
        human_set.check_fits(&self.label_space)?;
        self.rounds.push(Round {
            human_set,
            human_message: human_message.into(),
            ai: None,
        });
        Ok(self.rounds.last().expect("just pushed"))
    }

    pub fn append_ai_turn(&mut self, turn: AiTurn) -> Result<&Round, ProtocolError> {
        if self.is_final() {
            return Err(ProtocolError::AlreadyFinal);
        }
        if !self.awaiting_ai() {
            return Err(ProtocolError::ProtocolOrder(
                "AI turn without a pending human turn",
            ));
        }
        turn.set.check_fits(&self.label_space)?;
        let round = self.rounds.last_mut().expect("awaiting_ai implies a round");
        round.ai = Some(turn);
        Ok(round)
    }

    /// Records the human's final assessment. Only legal after a complete round.
    pub fn set_final_answer(&mut self, set: PredictionSet) -> Result<(), ProtocolError> {
        if self.is_final() {
            return Err(ProtocolError::AlreadyFinal);
        }
        if self.rounds.is_empty() || self.awaiting_ai() {
            return Err(ProtocolError::ProtocolOrder(
                "final answer before a complete round",
            ));
        }
        set.check_fits(&self.label_space)?;
        self.final_set = Some(set);
        Ok(())
    }

    /// Reveals the ground truth and closes the day.
    pub fn finalize(&mut self, ground_truth: usize) -> Result<(), ProtocolError> {
        if self.is_final() {
            return Err(ProtocolError::AlreadyFinal);
        }
        if ground_truth >= self.label_space.len() {
            return Err(ProtocolError::IndexOutOfSpace(
                ground_truth,
                self.label_space.len(),
            ));
        }
        if self.rounds.is_empty() {
            return Err(ProtocolError::ProtocolOrder("finalize before any round"));
        }
        if self.awaiting_ai() {
            return Err(ProtocolError::ProtocolOrder(
                "finalize with an incomplete last round",
            ));
        }
        self.ground_truth = Some(ground_truth);
        Ok(())
    }

    /// Finalizes by label identifier.
    pub fn finalize_label(&mut self, ground_truth: &str) -> Result<(), ProtocolError> {
        let idx = self.label_space.index_of(ground_truth)?;
        self.finalize(idx)
    }

    /// Attaches realized errors to a finalized day.
    pub fn record_errors(&mut self, errors: DayErrors) -> Result<(), ProtocolError> {
        if !self.is_final() {
            return Err(ProtocolError::NotFinal);
        }
        self.errors = Some(errors);
        Ok(())
    }

    /// Drops recorded AI scores, keeping the sets.
    pub fn clear_scores(&mut self) {
        for round in &mut self.rounds {
            if let Some(ai) = &mut round.ai {
                ai.scores = None;
            }
        }
    }

    /// Reassembles a closed day from its parts; used by the log reader.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        day_index: u64,
        problem_id: String,
        label_space: LabelSpace,
        rounds: Vec<Round>,
        thresholds: Thresholds,
        final_set: Option<PredictionSet>,
        ground_truth: usize,
        errors: DayErrors,
    ) -> Result<Self, ProtocolError> {
        let mut day = Self::new(day_index, problem_id, label_space)?;
        for round in rounds {
            let ai = round.ai.ok_or(ProtocolError::ProtocolOrder(
                "logged round without an AI response",
            ))?;
            day.append_human_turn(round.human_set, round.human_message)?;
            day.append_ai_turn(ai)?;
        }
        if let Some(set) = final_set {
            day.set_final_answer(set)?;
        }
        day.thresholds = Some(thresholds);
        day.finalize(ground_truth)?;
        day.errors = Some(errors);
        Ok(day)
    }
}
