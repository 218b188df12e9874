//! Request and response bodies. Field names follow the run-log schema where
//! the two overlap (`human_set`, `ai_set`, `final_set`, `e_ch`, `tau`, ...).

use serde::{Deserialize, Serialize};

use crate::config::{StreamConfig, TaskSpec};
use crate::task::Stimulus;

/// A label as sent by a client: counts may arrive as numbers or strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Int(i64),
    Text(String),
}

impl LabelValue {
    pub fn as_label(&self) -> String {
        match self {
            LabelValue::Int(i) => i.to_string(),
            LabelValue::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub tau: f64,
    pub lambda: f64,
}

impl From<tandem_core::protocol::Thresholds> for ThresholdPair {
    fn from(t: tandem_core::protocol::Thresholds) -> Self {
        Self {
            tau: t.tau,
            lambda: t.lambda,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamCreated {
    pub stream_id: String,
    pub config: StreamConfig,
    pub thresholds: ThresholdPair,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub stream_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub days_completed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub stream_id: String,
    pub created_at: u64,
    pub days_completed: u64,
    pub open_day: Option<u64>,
    /// Completed rounds of the open day.
    pub rounds_done: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DayOpened {
    pub day_id: u64,
    pub session_id: String,
    pub stream_id: String,
    pub labels: Vec<String>,
    pub set_size: Option<usize>,
    pub contiguous: bool,
    pub max_rounds: usize,
    /// Completed rounds so far; 0 on a fresh day.
    pub round: usize,
    pub task: TaskSpec,
    pub stimulus: Option<Stimulus>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRequest {
    pub set: Vec<LabelValue>,
    #[serde(default)]
    pub message: String,
    /// Round this turn is meant for. Repeating a completed round with the
    /// same set returns the stored reply instead of adding a turn.
    #[serde(default)]
    pub round: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReply {
    pub day_id: u64,
    pub round: usize,
    pub human_set: Vec<String>,
    pub ai_set: Vec<String>,
    pub ai_message: String,
    /// Thresholds frozen for this day.
    pub thresholds: ThresholdPair,
    pub rounds_left: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalizeRequest {
    /// The human's last answer; defaults to the last submitted set.
    #[serde(default)]
    pub final_set: Option<Vec<LabelValue>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFlags {
    pub initial_had_truth: bool,
    pub final_had_truth: bool,
    pub gt_loss: bool,
    pub gt_gain: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundSummary {
    pub human_set: Vec<String>,
    pub ai_set: Vec<String>,
    pub ai_had_truth: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalizeReply {
    pub day_id: u64,
    pub ground_truth: String,
    pub final_set: Vec<String>,
    pub e_ch: u8,
    pub e_comp: u8,
    pub ch_triggered: bool,
    pub comp_triggered: bool,
    pub outcome: OutcomeFlags,
    pub rounds: Vec<RoundSummary>,
    pub thresholds_used: ThresholdPair,
    /// Stream thresholds this day's update was applied to.
    pub previous_thresholds: ThresholdPair,
    pub new_thresholds: ThresholdPair,
    /// 1-based position of this day in the stream's commit order.
    pub commit_index: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamStateView {
    pub stream_id: String,
    pub tau: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub eta: f64,
    pub days: u64,
    pub cumulative_ch_errors: u64,
    pub cumulative_comp_errors: u64,
    pub avg_ch: Option<f64>,
    pub avg_comp: Option<f64>,
    pub rule_ch: String,
    pub rule_comp: String,
    pub open_days: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditView {
    pub stream_id: String,
    pub horizon: u64,
    pub avg_ch: Option<f64>,
    pub avg_comp: Option<f64>,
    pub bound_ch: Option<f64>,
    pub bound_comp: Option<f64>,
    /// Every prefix `1..=horizon` satisfies both bounds.
    pub pass: bool,
    pub failing_prefixes: Vec<u64>,
    pub max_tau: f64,
    pub max_lambda: f64,
    pub cap: f64,
    pub trajectory_ok: bool,
    /// Days whose AI sets used thresholds older than the stream value they
    /// were committed against.
    pub stale_days: usize,
    pub replay_matches: bool,
}
