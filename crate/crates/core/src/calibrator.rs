//! Online threshold calibration for AI prediction sets.
//!
//! At round `r` of day `t` the AI includes label `y` iff
//!
//! ```text
//! s(y) <= tau_t * act_ch(y) + lambda_t * act_comp(y)
//! ```
//!
//! where `act_*` are the online activations of the two rules on the human-set
//! prefix. `(tau_t, lambda_t)` stay frozen for the whole day. After the truth
//! is revealed, the day's errors are evaluated post hoc with the original rules
//! and both thresholds take a projected step:
//!
//! ```text
//! tau_{t+1}    = max(0, tau_t    + eta * (E_ch_t   - epsilon))
//! lambda_{t+1} = max(0, lambda_t + eta * (E_comp_t - delta))
//! ```
//!
//! Starting from zero, scores in `[0, 1]` keep `tau_t <= 1 + eta`, and for every
//! horizon `T` the average error is at most `target + (1 + eta) / (eta * T)`.
//! [`audit_bounds`] and [`check_trajectory`] check both facts on a run log.

use serde::Serialize;
use thiserror::Error;

use crate::protocol::{AiTurn, DayErrors, DayRecord, PredictionSet, ProtocolError, Thresholds};
use crate::rules::{Rule, RuleError};
use crate::runlog::RunLog;
use crate::scores::ScoreVector;

/// Slack on real-valued bound comparisons.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error("invalid calibration parameter: {0}")]
    InvalidParameter(String),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("score vector has {got} entries, label space has {expected}")]
    ScoreLength { got: usize, expected: usize },
    #[error("log parameters {logged} do not match audit parameters {requested}")]
    ParameterMismatch { logged: String, requested: String },
}

/// Calibration state of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CalibratorState {
    pub tau: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub eta: f64,
    pub day_counter: u64,
    pub cumulative_ch_errors: u64,
    pub cumulative_comp_errors: u64,
}

impl CalibratorState {
    /// Fresh state with `tau = lambda = 0`.
    pub fn new(epsilon: f64, delta: f64, eta: f64) -> Result<Self, CalibrationError> {
        validate_params(epsilon, delta, eta)?;
        Ok(Self {
            tau: 0.0,
            lambda: 0.0,
            epsilon,
            delta,
            eta,
            day_counter: 0,
            cumulative_ch_errors: 0,
            cumulative_comp_errors: 0,
        })
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            tau: self.tau,
            lambda: self.lambda,
        }
    }
}

pub(crate) fn validate_params(epsilon: f64, delta: f64, eta: f64) -> Result<(), CalibrationError> {
    let unit = |v: f64| v > 0.0 && v < 1.0;
    if !unit(epsilon) {
        return Err(CalibrationError::InvalidParameter(format!(
            "epsilon {epsilon} not in (0, 1)"
        )));
    }
    if !unit(delta) {
        return Err(CalibrationError::InvalidParameter(format!(
            "delta {delta} not in (0, 1)"
        )));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(CalibrationError::InvalidParameter(format!(
            "eta {eta} must be positive"
        )));
    }
    Ok(())
}

/// One application of the projected update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdUpdateTrace {
    pub day_index: u64,
    pub tau_before: f64,
    pub tau_after: f64,
    pub lambda_before: f64,
    pub lambda_after: f64,
    pub e_ch: bool,
    pub e_comp: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub eta: f64,
}

/// Finite-sample bound check at one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundAudit {
    pub horizon: u64,
    pub ch_errors: u64,
    pub comp_errors: u64,
    pub avg_ch: f64,
    pub avg_comp: f64,
    pub bound_ch: f64,
    pub bound_comp: f64,
    pub pass: bool,
}

/// `{y : s(y) <= tau * ch(y) + lambda * comp(y)}` with an inclusive comparison.
pub fn construct_set(
    scores: &ScoreVector,
    ch_active: &[bool],
    comp_active: &[bool],
    thresholds: Thresholds,
) -> PredictionSet {
    scores
        .as_slice()
        .iter()
        .enumerate()
        .filter(|&(y, &s)| {
            let gate = if ch_active.get(y).copied().unwrap_or(false) {
                thresholds.tau
            } else {
                0.0
            } + if comp_active.get(y).copied().unwrap_or(false) {
                thresholds.lambda
            } else {
                0.0
            };
            s <= gate
        })
        .map(|(y, _)| y)
        .collect()
}

/// Post-hoc errors of a finalized day under the original (not online) rules.
pub fn evaluate_day_errors(
    day: &DayRecord,
    rule_ch: &Rule,
    rule_comp: &Rule,
) -> Result<DayErrors, CalibrationError> {
    let truth = day.ground_truth().ok_or(ProtocolError::NotFinal)?;
    let sets = day.human_sets();
    let mut errors = DayErrors::default();
    for (i, round) in day.rounds().iter().enumerate() {
        let r = i + 1;
        let ai_set = round
            .ai_set()
            .ok_or(ProtocolError::ProtocolOrder("round without an AI set"))?;
        let missed = !ai_set.contains(truth);
        if rule_ch.evaluate(truth, &sets, r)? {
            errors.ch_triggered = true;
            errors.e_ch |= missed;
        }
        if rule_comp.evaluate(truth, &sets, r)? {
            errors.comp_triggered = true;
            errors.e_comp |= missed;
        }
    }
    Ok(errors)
}

/// Projected step on both thresholds; bumps the day and error counters.
pub fn update_thresholds(
    state: &mut CalibratorState,
    day_index: u64,
    e_ch: bool,
    e_comp: bool,
) -> ThresholdUpdateTrace {
    let tau_before = state.tau;
    let lambda_before = state.lambda;
    state.tau = projected_step(state.tau, state.eta, e_ch, state.epsilon);
    state.lambda = projected_step(state.lambda, state.eta, e_comp, state.delta);
    state.day_counter += 1;
    state.cumulative_ch_errors += u64::from(e_ch);
    state.cumulative_comp_errors += u64::from(e_comp);
    ThresholdUpdateTrace {
        day_index,
        tau_before,
        tau_after: state.tau,
        lambda_before,
        lambda_after: state.lambda,
        e_ch,
        e_comp,
        epsilon: state.epsilon,
        delta: state.delta,
        eta: state.eta,
    }
}

/// `max(0, value + eta * (error - target))`.
pub fn projected_step(value: f64, eta: f64, error: bool, target: f64) -> f64 {
    (value + eta * (f64::from(u8::from(error)) - target)).max(0.0)
}

/// `target + (1 + eta) / (eta * T)`.
pub fn theoretical_bound(target: f64, eta: f64, horizon: u64) -> Result<f64, CalibrationError> {
    if horizon == 0 {
        return Err(CalibrationError::ZeroHorizon);
    }
    if eta.is_nan() || eta <= 0.0 {
        return Err(CalibrationError::InvalidParameter(format!(
            "eta {eta} must be positive"
        )));
    }
    Ok(target + (1.0 + eta) / (eta * horizon as f64))
}

/// Computes activations from the human prefix and builds the AI set of the
/// pending round, then records it with its scores.
///
/// The day's thresholds are frozen from `state` on its first round.
pub fn run_round(
    state: &CalibratorState,
    day: &mut DayRecord,
    scores: ScoreVector,
    rule_ch: &Rule,
    rule_comp: &Rule,
    ai_message: impl Into<String>,
) -> Result<PredictionSet, CalibrationError> {
    if day.is_final() {
        return Err(ProtocolError::AlreadyFinal.into());
    }
    if !day.awaiting_ai() {
        return Err(ProtocolError::ProtocolOrder("AI turn without a pending human turn").into());
    }
    let k = day.label_space.len();
    if scores.len() != k {
        return Err(CalibrationError::ScoreLength {
            got: scores.len(),
            expected: k,
        });
    }
    let thresholds = *day.thresholds.get_or_insert(state.thresholds());
    let prefix = day.human_sets();
    let (ch, comp) = activations(rule_ch, rule_comp, k, &prefix)?;
    let set = construct_set(&scores, &ch, &comp, thresholds);
    day.append_ai_turn(AiTurn {
        set: set.clone(),
        message: ai_message.into(),
        scores: Some(scores.into_vec()),
    })?;
    Ok(set)
}

/// Per-label online activations of both rules on `prefix`.
pub fn activations(
    rule_ch: &Rule,
    rule_comp: &Rule,
    labels: usize,
    prefix: &[PredictionSet],
) -> Result<(Vec<bool>, Vec<bool>), RuleError> {
    let ch = (0..labels)
        .map(|y| rule_ch.activation(y, prefix))
        .collect::<Result<Vec<_>, _>>()?;
    let comp = (0..labels)
        .map(|y| rule_comp.activation(y, prefix))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((ch, comp))
}

/// Finalizes `day`, evaluates its errors, records them and updates `state`.
pub fn close_day(
    state: &mut CalibratorState,
    day: &mut DayRecord,
    ground_truth: usize,
    rule_ch: &Rule,
    rule_comp: &Rule,
) -> Result<ThresholdUpdateTrace, CalibrationError> {
    day.finalize(ground_truth)?;
    let errors = evaluate_day_errors(day, rule_ch, rule_comp)?;
    day.record_errors(errors)?;
    if day.thresholds.is_none() {
        day.thresholds = Some(state.thresholds());
    }
    Ok(update_thresholds(
        state,
        day.day_index,
        errors.e_ch,
        errors.e_comp,
    ))
}

/// Per-prefix bound audits for `T = 1..=len(log)`.
pub fn audit_bounds(
    log: &RunLog,
    epsilon: f64,
    delta: f64,
    eta: f64,
) -> Result<Vec<BoundAudit>, CalibrationError> {
    if let Some(params) = log.params() {
        let same = |a: f64, b: f64| (a - b).abs() <= f64::EPSILON * a.abs().max(b.abs());
        if !(same(params.epsilon, epsilon) && same(params.delta, delta) && same(params.eta, eta)) {
            return Err(CalibrationError::ParameterMismatch {
                logged: format!(
                    "(epsilon={}, delta={}, eta={})",
                    params.epsilon, params.delta, params.eta
                ),
                requested: format!("(epsilon={epsilon}, delta={delta}, eta={eta})"),
            });
        }
    }
    let errors: Vec<(bool, bool)> = log
        .entries()
        .iter()
        .map(|e| {
            let d = e.day.errors().unwrap_or_default();
            (d.e_ch, d.e_comp)
        })
        .collect();
    audit_error_sequence(&errors, epsilon, delta, eta)
}

/// Bound audits for a raw sequence of `(e_ch, e_comp)` indicators.
pub fn audit_error_sequence(
    errors: &[(bool, bool)],
    epsilon: f64,
    delta: f64,
    eta: f64,
) -> Result<Vec<BoundAudit>, CalibrationError> {
    let (mut ch, mut comp) = (0u64, 0u64);
    errors
        .iter()
        .enumerate()
        .map(|(i, &(e_ch, e_comp))| {
            let horizon = i as u64 + 1;
            ch += u64::from(e_ch);
            comp += u64::from(e_comp);
            let bound_ch = theoretical_bound(epsilon, eta, horizon)?;
            let bound_comp = theoretical_bound(delta, eta, horizon)?;
            let avg_ch = ch as f64 / horizon as f64;
            let avg_comp = comp as f64 / horizon as f64;
            Ok(BoundAudit {
                horizon,
                ch_errors: ch,
                comp_errors: comp,
                avg_ch,
                avg_comp,
                bound_ch,
                bound_comp,
                pass: avg_ch <= bound_ch + BOUND_SLACK && avg_comp <= bound_comp + BOUND_SLACK,
            })
        })
        .collect()
}

/// A threshold-trajectory fact that failed on a log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryViolation {
    pub day_index: u64,
    pub what: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryReport {
    pub max_tau: f64,
    pub max_lambda: f64,
    pub violations: Vec<TrajectoryViolation>,
}

impl TrajectoryReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the stream trajectory in `log`: nonnegativity, the `1 + eta` cap,
/// and the one-step inequality `next >= prev + eta * (E - target)` with
/// equality whenever the right side is nonnegative.
pub fn check_trajectory(log: &RunLog) -> TrajectoryReport {
    let mut report = TrajectoryReport {
        max_tau: 0.0,
        max_lambda: 0.0,
        violations: Vec::new(),
    };
    let Some(params) = log.params() else {
        return report;
    };
    let eta = params.eta;
    let cap = 1.0 + eta;
    let mut flag = |day: u64, what: String| {
        report.violations.push(TrajectoryViolation {
            day_index: day,
            what,
        })
    };
    let mut points: Vec<(u64, Thresholds, DayErrors)> = log
        .entries()
        .iter()
        .map(|e| {
            (
                e.day.day_index,
                e.stream,
                e.day.errors().unwrap_or_default(),
            )
        })
        .collect();
    if let Some(next) = log.next_thresholds() {
        points.push((u64::MAX, next, DayErrors::default()));
    }
    let mut max_tau: f64 = 0.0;
    let mut max_lambda: f64 = 0.0;
    for (i, (day, th, _)) in points.iter().enumerate() {
        max_tau = max_tau.max(th.tau);
        max_lambda = max_lambda.max(th.lambda);
        if th.tau < 0.0 || th.lambda < 0.0 {
            flag(*day, format!("negative threshold {th:?}"));
        }
        if th.tau > cap || th.lambda > cap {
            flag(*day, format!("threshold {th:?} above cap {cap}"));
        }
        if i + 1 < points.len() {
            let errs = points[i].2;
            let next = points[i + 1].1;
            let checks = [
                ("tau", th.tau, next.tau, errs.e_ch, params.epsilon),
                ("lambda", th.lambda, next.lambda, errs.e_comp, params.delta),
            ];
            for (name, prev, after, e, target) in checks {
                let rhs = prev + eta * (f64::from(u8::from(e)) - target);
                if after < rhs - BOUND_SLACK {
                    flag(*day, format!("{name} step {after} below {rhs}"));
                } else if rhs >= 0.0 && (after - rhs).abs() > BOUND_SLACK {
                    flag(*day, format!("{name} step {after} differs from {rhs}"));
                }
            }
        }
    }
    report.max_tau = max_tau;
    report.max_lambda = max_lambda;
    report
}
