//! Append-only run log: one closed day per line, plus replay.
//!
//! Each line is a self-contained JSON object with stable field names
//! (`day_index`, `problem_id`, `labels`, `rounds`, `ground_truth`, `tau`,
//! `lambda`, `e_ch`, `e_comp`, ...). `tau`/`lambda` are the stream thresholds
//! before that day's update. When a day's AI sets were built with different
//! (stale) thresholds, those are logged as `tau_used`/`lambda_used`.
//! Every line also carries the run parameters so a log can be audited and
//! replayed on its own.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrator::{
    activations, construct_set, evaluate_day_errors, projected_step, CalibrationError,
    CalibratorState,
};
use crate::protocol::{AiTurn, DayErrors, DayRecord, LabelSpace, ProtocolError, Round, Thresholds};
use crate::rules::RuleRegistry;
use crate::scores::ScoreVector;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: run parameters differ from earlier lines")]
    MixedParams { line: usize },
    #[error("day {day_index} is not finalized and cannot be logged")]
    OpenDay { day_index: u64 },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters shared by every day of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub epsilon: f64,
    pub delta: f64,
    pub eta: f64,
    pub rule_ch: String,
    pub rule_comp: String,
    /// Starting thresholds, in `[0, 1]`; omitted from the log when zero.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub initial_tau: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub initial_lambda: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl RunParams {
    /// Fresh calibrator state at the run's starting thresholds.
    pub fn initial_state(&self) -> Result<CalibratorState, CalibrationError> {
        let mut state = CalibratorState::new(self.epsilon, self.delta, self.eta)?;
        for v in [self.initial_tau, self.initial_lambda] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CalibrationError::InvalidParameter(format!(
                    "initial threshold {v} not in [0, 1]"
                )));
            }
        }
        state.tau = self.initial_tau;
        state.lambda = self.initial_lambda;
        Ok(state)
    }
}

/// A closed day plus the stream thresholds it was committed against.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub day: DayRecord,
    pub stream: Thresholds,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    params: Option<RunParams>,
    entries: Vec<LogEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoundLine {
    human_set: Vec<String>,
    #[serde(default)]
    human_message: String,
    ai_set: Vec<String>,
    #[serde(default)]
    ai_message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DayLine {
    day_index: u64,
    problem_id: String,
    labels: Vec<String>,
    rounds: Vec<RoundLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_set: Option<Vec<String>>,
    ground_truth: String,
    tau: f64,
    lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_used: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda_used: Option<f64>,
    e_ch: u8,
    e_comp: u8,
    ch_triggered: bool,
    comp_triggered: bool,
    #[serde(flatten)]
    params: RunParams,
}

impl RunLog {
    pub fn new(params: RunParams) -> Self {
        Self {
            params: Some(params),
            entries: Vec::new(),
        }
    }

    pub fn params(&self) -> Option<&RunParams> {
        self.params.as_ref()
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [LogEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn days(&self) -> impl Iterator<Item = &DayRecord> {
        self.entries.iter().map(|e| &e.day)
    }

    /// Appends a closed day committed against `stream` thresholds.
    pub fn push(&mut self, day: DayRecord, stream: Thresholds) -> Result<(), LogError> {
        if !day.is_final() || day.errors().is_none() {
            return Err(LogError::OpenDay {
                day_index: day.day_index,
            });
        }
        self.entries.push(LogEntry { day, stream });
        Ok(())
    }

    /// Concatenates `other` after `self`; parameters must agree.
    pub fn extend(&mut self, other: RunLog) -> Result<(), LogError> {
        match (&self.params, &other.params) {
            (Some(a), Some(b)) if a != b => {
                return Err(LogError::MixedParams {
                    line: self.entries.len() + 1,
                })
            }
            (None, _) => self.params = other.params.clone(),
            _ => {}
        }
        self.entries.extend(other.entries);
        Ok(())
    }

    /// Stream thresholds after the last logged update.
    pub fn next_thresholds(&self) -> Option<Thresholds> {
        let params = self.params.as_ref()?;
        let last = self.entries.last()?;
        let e = last.day.errors().unwrap_or_default();
        Some(Thresholds {
            tau: projected_step(last.stream.tau, params.eta, e.e_ch, params.epsilon),
            lambda: projected_step(last.stream.lambda, params.eta, e.e_comp, params.delta),
        })
    }

    /// Serializes one entry as a single JSON line (no trailing newline).
    pub fn entry_line(entry: &LogEntry, params: &RunParams) -> Result<String, LogError> {
        let day = &entry.day;
        let space = &day.label_space;
        let truth = day.ground_truth().ok_or(LogError::OpenDay {
            day_index: day.day_index,
        })?;
        let errors = day.errors().ok_or(LogError::OpenDay {
            day_index: day.day_index,
        })?;
        let used = day.thresholds.unwrap_or(entry.stream);
        let rounds = day
            .rounds()
            .iter()
            .map(|r| {
                let ai = r.ai.as_ref().ok_or(LogError::OpenDay {
                    day_index: day.day_index,
                })?;
                Ok(RoundLine {
                    human_set: space.names(&r.human_set),
                    human_message: r.human_message.clone(),
                    ai_set: space.names(&ai.set),
                    ai_message: ai.message.clone(),
                    scores: ai.scores.clone(),
                })
            })
            .collect::<Result<Vec<_>, LogError>>()?;
        let line = DayLine {
            day_index: day.day_index,
            problem_id: day.problem_id.clone(),
            labels: space.labels().to_vec(),
            rounds,
            final_set: day.final_set().map(|s| space.names(s)),
            ground_truth: space.label(truth).unwrap_or_default().to_string(),
            tau: entry.stream.tau,
            lambda: entry.stream.lambda,
            tau_used: (used.tau != entry.stream.tau).then_some(used.tau),
            lambda_used: (used.lambda != entry.stream.lambda).then_some(used.lambda),
            e_ch: errors.e_ch.into(),
            e_comp: errors.e_comp.into(),
            ch_triggered: errors.ch_triggered,
            comp_triggered: errors.comp_triggered,
            params: params.clone(),
        };
        serde_json::to_string(&line).map_err(|e| LogError::Parse {
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), LogError> {
        if let Some(params) = &self.params {
            for entry in &self.entries {
                writeln!(out, "{}", Self::entry_line(entry, params)?)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String, LogError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }

    /// Parses a log; blank lines are skipped, errors carry 1-based line numbers.
    pub fn read_from<R: BufRead>(input: R) -> Result<Self, LogError> {
        let mut log = RunLog::default();
        for (i, line) in input.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: DayLine = serde_json::from_str(&line).map_err(|e| LogError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let (entry, params) = parse_day(parsed).map_err(|message| LogError::Parse {
                line: line_no,
                message,
            })?;
            match &log.params {
                Some(p) if *p != params => return Err(LogError::MixedParams { line: line_no }),
                Some(_) => {}
                None => log.params = Some(params),
            }
            log.entries.push(entry);
        }
        Ok(log)
    }

    pub fn parse_str(text: &str) -> Result<Self, LogError> {
        Self::read_from(text.as_bytes())
    }
}

fn parse_day(line: DayLine) -> Result<(LogEntry, RunParams), String> {
    let space = LabelSpace::new(line.labels).map_err(|e| e.to_string())?;
    let set = |names: &[String]| {
        space
            .set_of(names)
            .map_err(|e: ProtocolError| e.to_string())
    };
    let rounds = line
        .rounds
        .iter()
        .map(|r| {
            Ok(Round {
                human_set: set(&r.human_set)?,
                human_message: r.human_message.clone(),
                ai: Some(AiTurn {
                    set: set(&r.ai_set)?,
                    message: r.ai_message.clone(),
                    scores: r.scores.clone(),
                }),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let final_set = line.final_set.as_deref().map(set).transpose()?;
    let truth = space
        .index_of(&line.ground_truth)
        .map_err(|e| e.to_string())?;
    let bit = |v: u8, name: &str| match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(format!("{name} must be 0 or 1, got {v}")),
    };
    let errors = DayErrors {
        e_ch: bit(line.e_ch, "e_ch")?,
        e_comp: bit(line.e_comp, "e_comp")?,
        ch_triggered: line.ch_triggered,
        comp_triggered: line.comp_triggered,
    };
    let stream = Thresholds {
        tau: line.tau,
        lambda: line.lambda,
    };
    let used = Thresholds {
        tau: line.tau_used.unwrap_or(line.tau),
        lambda: line.lambda_used.unwrap_or(line.lambda),
    };
    let day = DayRecord::from_parts(
        line.day_index,
        line.problem_id,
        space,
        rounds,
        used,
        final_set,
        truth,
        errors,
    )
    .map_err(|e| e.to_string())?;
    Ok((LogEntry { day, stream }, line.params))
}

/// First place where a replay disagrees with the log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    /// 1-based position of the day in the log.
    pub position: usize,
    pub day_index: u64,
    pub field: String,
    pub logged: String,
    pub recomputed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub days_checked: usize,
    pub divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.divergence.is_none()
    }
}

/// Recomputes every day's AI sets (where scores were logged), errors and the
/// threshold trajectory from the transcripts, starting at the run's initial
/// thresholds.
pub fn replay(log: &RunLog, registry: &RuleRegistry) -> Result<ReplayReport, LogError> {
    let Some(params) = log.params() else {
        return Ok(ReplayReport {
            days_checked: 0,
            divergence: None,
        });
    };
    let rule_ch = registry
        .parse(&params.rule_ch)
        .map_err(CalibrationError::from)?;
    let rule_comp = registry
        .parse(&params.rule_comp)
        .map_err(CalibrationError::from)?;
    let mut state = params.initial_state()?;

    for (i, entry) in log.entries().iter().enumerate() {
        let day = &entry.day;
        let diverge = |field: &str, logged: String, recomputed: String| ReplayReport {
            days_checked: i + 1,
            divergence: Some(Divergence {
                position: i + 1,
                day_index: day.day_index,
                field: field.to_string(),
                logged,
                recomputed,
            }),
        };
        for (name, logged, replayed) in [
            ("tau", entry.stream.tau, state.tau),
            ("lambda", entry.stream.lambda, state.lambda),
        ] {
            if logged != replayed {
                return Ok(diverge(name, logged.to_string(), replayed.to_string()));
            }
        }

        let used = day.thresholds.unwrap_or(entry.stream);
        let sets = day.human_sets();
        for (r, round) in day.rounds().iter().enumerate() {
            let Some(ai) = &round.ai else { continue };
            let Some(scores) = &ai.scores else { continue };
            let scores = ScoreVector::new(scores.clone()).map_err(|e| LogError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let (ch, comp) = activations(&rule_ch, &rule_comp, day.label_space.len(), &sets[..=r])
                .map_err(CalibrationError::from)?;
            let rebuilt = construct_set(&scores, &ch, &comp, used);
            if rebuilt != ai.set {
                return Ok(diverge(
                    &format!("rounds[{r}].ai_set"),
                    format!("{:?}", day.label_space.names(&ai.set)),
                    format!("{:?}", day.label_space.names(&rebuilt)),
                ));
            }
        }

        let logged = day.errors().unwrap_or_default();
        let recomputed = evaluate_day_errors(day, &rule_ch, &rule_comp)?;
        for (name, a, b) in [
            ("e_ch", logged.e_ch, recomputed.e_ch),
            ("e_comp", logged.e_comp, recomputed.e_comp),
            ("ch_triggered", logged.ch_triggered, recomputed.ch_triggered),
            (
                "comp_triggered",
                logged.comp_triggered,
                recomputed.comp_triggered,
            ),
        ] {
            if a != b {
                return Ok(diverge(
                    name,
                    u8::from(a).to_string(),
                    u8::from(b).to_string(),
                ));
            }
        }
        crate::calibrator::update_thresholds(
            &mut state,
            day.day_index,
            recomputed.e_ch,
            recomputed.e_comp,
        );
    }
    Ok(ReplayReport {
        days_checked: log.len(),
        divergence: None,
    })
}
