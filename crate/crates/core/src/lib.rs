//! Online calibration of AI prediction sets for multi-round human-AI
//! collaboration.
//!
//! Each day a human and an AI exchange prediction sets over several rounds.
//! The AI's set includes a label when its nonconformity score is below a
//! threshold built from two rule activations: a counterfactual-harm rule
//! (weighted by `tau`) and a complementarity rule (weighted by `lambda`).
//! After each day the realized errors move both weights with a projected
//! online step so that long-run error rates track the targets.
//!
//! The modules, bottom up:
//!
//! - [`protocol`]: label spaces, prediction sets and the day record.
//! - [`rules`]: rule predicates, the registry and the dominance checker.
//! - [`scores`]: probability normalization, score oracles and providers.
//! - [`calibrator`]: set construction, the threshold update and bound audits.
//! - [`runlog`]: the JSON-lines day log and deterministic replay.
//! - [`agents`]: simulated human policies.
//! - [`harness`]: run configuration, streams, sweeps and output files.

pub mod agents;
pub mod calibrator;
pub mod harness;
pub mod protocol;
pub mod rules;
pub mod runlog;
pub mod schedule;
pub mod scores;

/// Generator used by every simulated agent and oracle.
pub type AgentRng = rand_chacha::ChaCha8Rng;

pub use calibrator::{
    audit_bounds, close_day, construct_set, evaluate_day_errors, run_round, theoretical_bound,
    update_thresholds, BoundAudit, CalibrationError, CalibratorState,
};
pub use harness::{run_stream, RunConfig, RunSummary};
pub use protocol::{DayErrors, DayRecord, LabelSpace, PredictionSet, Thresholds};
pub use rules::{check_dominance, Rule, RuleRegistry};
pub use runlog::{replay, RunLog, RunParams};
pub use scores::{normalize_probabilities, score_from_distribution, Distribution, ScoreVector};
