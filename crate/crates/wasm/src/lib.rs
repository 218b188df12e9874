//! Browser entry points. Every export takes and returns JSON text so the page
//! needs no generated type glue beyond strings.
//!
//! The `*_json` functions hold the logic and are plain Rust; the exported
//! wrappers only turn errors into JavaScript exceptions.

use serde::{Deserialize, Serialize};
use tandem_core::calibrator::{activations, construct_set, theoretical_bound};
use tandem_core::harness::{run_stream, RunConfig};
use tandem_core::protocol::{LabelSpace, PredictionSet, Thresholds};
use tandem_core::rules::{check_dominance, RuleRegistry};
use tandem_core::scores::ScoreVector;
use wasm_bindgen::prelude::*;

/// Bundled run configurations, by name.
pub const PRESETS: [(&str, &str); 4] = [
    (
        "stationary",
        include_str!("../../../configs/stationary.toml"),
    ),
    ("trusting", include_str!("../../../configs/trusting.toml")),
    ("drift", include_str!("../../../configs/drift.toml")),
    (
        "adversarial",
        include_str!("../../../configs/adversarial.toml"),
    ),
];

/// Largest enumeration the page may request; keeps the tab responsive.
const BROWSER_CAP: u128 = 200_000;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    pub preset: Option<String>,
    /// Full TOML config; takes precedence over `preset`.
    pub config: Option<String>,
    pub days: Option<u64>,
    pub seed: Option<u64>,
    pub eta: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    /// Curves are thinned to at most this many points.
    #[serde(default = "default_points")]
    pub max_points: usize,
}

fn default_points() -> usize {
    600
}

#[derive(Debug, Serialize)]
pub struct Curves {
    pub days: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub eta: f64,
    pub t: Vec<u64>,
    pub avg_ch: Vec<f64>,
    pub avg_comp: Vec<f64>,
    pub bound_ch: Vec<f64>,
    pub bound_comp: Vec<f64>,
    pub tau: Vec<f64>,
    pub lambda: Vec<f64>,
    pub audit_pass: bool,
    pub trajectory_ok: bool,
    pub max_tau: f64,
    pub max_lambda: f64,
    pub gt_loss_rate: Option<f64>,
    pub gt_gain_rate: Option<f64>,
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

pub fn simulate_json(request: &str) -> Result<String, String> {
    let req: SimulateRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let text = match (&req.config, &req.preset) {
        (Some(text), _) => text.as_str(),
        (None, Some(name)) => preset(name).ok_or_else(|| format!("unknown preset {name:?}"))?,
        (None, None) => preset("stationary").expect("bundled"),
    };
    let mut config = RunConfig::from_toml_str(text).map_err(|e| e.to_string())?;
    config.sweep = None;
    config.output_dir = None;
    config.record_scores = false;
    if let Some(d) = req.days {
        config.days = d.clamp(1, 20_000);
    }
    if let Some(s) = req.seed {
        config.seed = s;
    }
    if let Some(v) = req.eta {
        config.targets.eta = v;
    }
    if let Some(v) = req.epsilon {
        config.targets.epsilon = v;
    }
    if let Some(v) = req.delta {
        config.targets.delta = v;
    }
    config.validate().map_err(|e| e.to_string())?;
    let (log, summary) = run_stream(&config).map_err(|e| e.to_string())?;

    let n = summary.avg_ch.len();
    let step = n.div_ceil(req.max_points.max(2)).max(1);
    let mut idx: Vec<usize> = (0..n).step_by(step).collect();
    if idx.last() != Some(&(n - 1)) {
        idx.push(n - 1);
    }
    let entries = log.entries();
    let bound = |target: f64, t: u64| theoretical_bound(target, summary.eta, t).unwrap_or(f64::NAN);
    let curves = Curves {
        days: summary.days,
        epsilon: summary.epsilon,
        delta: summary.delta,
        eta: summary.eta,
        t: idx.iter().map(|&i| i as u64 + 1).collect(),
        avg_ch: idx.iter().map(|&i| summary.avg_ch[i]).collect(),
        avg_comp: idx.iter().map(|&i| summary.avg_comp[i]).collect(),
        bound_ch: idx
            .iter()
            .map(|&i| bound(summary.epsilon, i as u64 + 1))
            .collect(),
        bound_comp: idx
            .iter()
            .map(|&i| bound(summary.delta, i as u64 + 1))
            .collect(),
        tau: idx.iter().map(|&i| entries[i].stream.tau).collect(),
        lambda: idx.iter().map(|&i| entries[i].stream.lambda).collect(),
        audit_pass: summary.audit_pass,
        trajectory_ok: summary.trajectory_ok,
        max_tau: summary.max_tau,
        max_lambda: summary.max_lambda,
        gt_loss_rate: summary.gt_loss_rate,
        gt_gain_rate: summary.gt_gain_rate,
    };
    serde_json::to_string(&curves).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreRequest {
    /// Nonconformity score per label; clamped into `[0, 1]`.
    pub scores: Vec<f64>,
    /// Human sets so far, as label indices; the last one is the current round.
    pub human_sets: Vec<Vec<usize>>,
    pub rule_ch: String,
    pub rule_comp: String,
    pub tau: f64,
    pub lambda: f64,
}

#[derive(Debug, Serialize)]
pub struct LabelGate {
    pub score: f64,
    pub ch: bool,
    pub comp: bool,
    /// `tau * ch + lambda * comp`; the label is kept when `score <= gate`.
    pub gate: f64,
    pub included: bool,
}

#[derive(Debug, Serialize)]
pub struct Explored {
    pub labels: Vec<LabelGate>,
    pub set: Vec<usize>,
}

pub fn explore_json(request: &str) -> Result<String, String> {
    let req: ExploreRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let k = req.scores.len();
    if req.human_sets.is_empty() {
        return Err("at least one human set is needed".into());
    }
    let scores = ScoreVector::new(req.scores.clone()).map_err(|e| e.to_string())?;
    let sets: Vec<PredictionSet> = req
        .human_sets
        .iter()
        .map(|h| match h.iter().find(|&&y| y >= k) {
            Some(y) => Err(format!("label {y} outside 0..{k}")),
            None => Ok(h.iter().copied().collect()),
        })
        .collect::<Result<_, _>>()?;
    let registry = RuleRegistry::default();
    let rule_ch = registry.parse(&req.rule_ch).map_err(|e| e.to_string())?;
    let rule_comp = registry.parse(&req.rule_comp).map_err(|e| e.to_string())?;
    let (ch, comp) = activations(&rule_ch, &rule_comp, k, &sets).map_err(|e| e.to_string())?;
    let thresholds = Thresholds {
        tau: req.tau,
        lambda: req.lambda,
    };
    let set = construct_set(&scores, &ch, &comp, thresholds);
    let labels = (0..k)
        .map(|y| {
            let gate = if ch[y] { req.tau } else { 0.0 } + if comp[y] { req.lambda } else { 0.0 };
            LabelGate {
                score: scores.as_slice()[y],
                ch: ch[y],
                comp: comp[y],
                gate,
                included: set.contains(y),
            }
        })
        .collect();
    serde_json::to_string(&Explored {
        labels,
        set: set.iter().collect(),
    })
    .map_err(|e| e.to_string())
}

pub fn check_rule_json(rule: &str, labels: usize, rounds: usize) -> Result<String, String> {
    if labels == 0 || rounds == 0 {
        return Err("labels and rounds must be positive".into());
    }
    let rule = RuleRegistry::default()
        .parse(rule)
        .map_err(|e| e.to_string())?;
    let space = LabelSpace::new((0..labels).map(|i| format!("y{i}"))).map_err(|e| e.to_string())?;
    let mut report =
        check_dominance(&rule, &space, rounds, labels, BROWSER_CAP).map_err(|e| e.to_string())?;
    report.counterexamples.truncate(5);
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

/// Runs one simulated stream; see [`SimulateRequest`] for the JSON fields.
#[wasm_bindgen]
pub fn simulate(request: &str) -> Result<String, JsValue> {
    simulate_json(request).map_err(|e| JsValue::from_str(&e))
}

/// Builds one AI set and explains each label's gate.
#[wasm_bindgen]
pub fn explore_set(request: &str) -> Result<String, JsValue> {
    explore_json(request).map_err(|e| JsValue::from_str(&e))
}

/// Exhaustive dominance check of a rule against its online activation.
#[wasm_bindgen]
pub fn check_rule(rule: &str, labels: usize, rounds: usize) -> Result<String, JsValue> {
    check_rule_json(rule, labels, rounds).map_err(|e| JsValue::from_str(&e))
}

/// Names of the bundled configurations.
#[wasm_bindgen]
pub fn presets() -> String {
    serde_json::to_string(&PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>())
        .expect("strings serialize")
}
