//! Simulation harness: run configuration, day loop, streams and sweeps.
//!
//! A stream is `T` sequential days played against one calibrator state. Seeds
//! split hierarchically (stream seed, then day seed, then one generator per
//! role), so any single day can be regenerated without replaying the stream.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_distr::Distribution as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    AdversarialPolicy, AgentError, AgentOutcome, DayView, HumanAgent, HumanPolicy, IntervalPolicy,
};
use crate::calibrator::{
    audit_bounds, check_trajectory, close_day, run_round, theoretical_bound, validate_params,
    CalibrationError, CalibratorState, ThresholdUpdateTrace,
};
use crate::protocol::{DayRecord, LabelSpace, ProtocolError};
use crate::rules::{Rule, RuleError, RuleRegistry};
use crate::runlog::{LogError, RunLog, RunParams};
use crate::scores::{
    AdapterOracle, AdversarialOracle, DistributionSpec, MockProvider, OracleContext, ScoreError,
    ScoreProvider, SyntheticOracle,
};
use crate::AgentRng;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelSpec {
    /// `count` labels named `{prefix}{i}` for `i = 1..=count`.
    Indexed {
        count: usize,
        #[serde(default = "default_prefix")]
        prefix: String,
    },
    /// Integer labels `lo..=hi`.
    Range {
        lo: i64,
        hi: i64,
    },
    List {
        labels: Vec<String>,
    },
}

fn default_prefix() -> String {
    "y".into()
}

impl LabelSpec {
    pub fn build(&self) -> Result<LabelSpace, HarnessError> {
        let space = match self {
            LabelSpec::Indexed { count, prefix } => {
                LabelSpace::new((1..=*count).map(|i| format!("{prefix}{i}")))
            }
            LabelSpec::Range { lo, hi } => LabelSpace::integer_range(*lo, *hi),
            LabelSpec::List { labels } => LabelSpace::new(labels.iter().cloned()),
        }?;
        Ok(space)
    }
}

/// How each day's ground truth is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    #[default]
    Uniform,
    /// Weight `1 / i^exponent` on the `i`-th label.
    Zipf { exponent: f64 },
    /// Explicit per-label weights.
    Weights { weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleSpec {
    pub ch: String,
    pub comp: String,
}

impl Default for RuleSpec {
    fn default() -> Self {
        Self {
            ch: "ch_current_round".into(),
            comp: "comp_final_round".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Targets {
    pub epsilon: f64,
    pub delta: f64,
    pub eta: f64,
}

impl Default for Targets {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            delta: 0.5,
            eta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    Synthetic(DistributionSpec),
    /// Zero probability on the truth, every day.
    Adversarial,
    /// External-provider adapter; served by the offline mock provider.
    External {
        endpoint: Option<String>,
        #[serde(default)]
        spec: DistributionSpec,
        #[serde(default = "default_scale")]
        scale: f64,
    },
}

fn default_scale() -> f64 {
    100.0
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec::Synthetic(DistributionSpec::default())
    }
}

impl OracleSpec {
    pub fn build(&self) -> Result<Box<dyn ScoreProvider>, HarnessError> {
        Ok(match self {
            OracleSpec::Synthetic(spec) => {
                spec.validate()?;
                Box::new(SyntheticOracle { spec: spec.clone() })
            }
            OracleSpec::Adversarial => Box::new(AdversarialOracle),
            OracleSpec::External {
                endpoint,
                spec,
                scale,
            } => {
                spec.validate()?;
                Box::new(AdapterOracle {
                    endpoint: endpoint.clone(),
                    provider: MockProvider {
                        spec: spec.clone(),
                        scale: *scale,
                    },
                })
            }
        })
    }

    fn noise_seed(&self) -> u64 {
        match self {
            OracleSpec::Synthetic(s) | OracleSpec::External { spec: s, .. } => s.noise_seed,
            OracleSpec::Adversarial => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HumanSpec {
    Stochastic(HumanPolicy),
    Interval(IntervalPolicy),
    Adversarial(AdversarialPolicy),
}

impl Default for HumanSpec {
    fn default() -> Self {
        HumanSpec::Stochastic(HumanPolicy::default())
    }
}

impl HumanSpec {
    pub fn build(&self) -> Result<Box<dyn HumanAgent>, HarnessError> {
        Ok(match self {
            HumanSpec::Stochastic(p) => {
                p.validate()?;
                Box::new(p.clone())
            }
            HumanSpec::Interval(p) => {
                p.validate()?;
                Box::new(p.clone())
            }
            HumanSpec::Adversarial(p) => {
                p.validate()?;
                Box::new(p.clone())
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub epsilon: Vec<f64>,
    pub delta: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// One simulation run, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub days: u64,
    pub seed: u64,
    pub labels: LabelSpec,
    pub truth: TruthSpec,
    pub rules: RuleSpec,
    pub targets: Targets,
    pub oracle: OracleSpec,
    pub human: HumanSpec,
    /// Keep per-round scores in the log so replay can rebuild AI sets.
    pub record_scores: bool,
    /// Hard cap on rounds per day, whatever the human policy says.
    pub max_rounds_cap: usize,
    pub sweep: Option<SweepGrid>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            days: 5000,
            seed: 0,
            labels: LabelSpec::Indexed {
                count: 49,
                prefix: default_prefix(),
            },
            truth: TruthSpec::default(),
            rules: RuleSpec::default(),
            targets: Targets::default(),
            oracle: OracleSpec::default(),
            human: HumanSpec::default(),
            record_scores: true,
            max_rounds_cap: 64,
            sweep: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.days == 0 {
            return Err(HarnessError::Config("days must be at least 1".into()));
        }
        if self.max_rounds_cap == 0 {
            return Err(HarnessError::Config(
                "max_rounds_cap must be positive".into(),
            ));
        }
        validate_params(self.targets.epsilon, self.targets.delta, self.targets.eta)?;
        if let Some(grid) = &self.sweep {
            for &e in &grid.epsilon {
                validate_params(e, self.targets.delta, self.targets.eta)?;
            }
            for &d in &grid.delta {
                validate_params(self.targets.epsilon, d, self.targets.eta)?;
            }
        }
        Ok(())
    }

    pub fn params(&self) -> RunParams {
        RunParams {
            epsilon: self.targets.epsilon,
            delta: self.targets.delta,
            eta: self.targets.eta,
            rule_ch: self.rules.ch.clone(),
            rule_comp: self.rules.comp.clone(),
            ..RunParams::default()
        }
    }
}

/// SplitMix64 finalizer over `parent` and `tag`.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    let mut z = parent
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TRUTH_STREAM: u64 = 1;
const HUMAN_STREAM: u64 = 2;
const ORACLE_STREAM: u64 = 3;

enum TruthSampler {
    Uniform(usize),
    Weighted(WeightedIndex<f64>),
}

impl TruthSampler {
    fn new(spec: &TruthSpec, k: usize) -> Result<Self, HarnessError> {
        let weighted = |w: Vec<f64>| {
            WeightedIndex::new(w)
                .map(TruthSampler::Weighted)
                .map_err(|e| HarnessError::Config(format!("truth weights: {e}")))
        };
        match spec {
            TruthSpec::Uniform => Ok(TruthSampler::Uniform(k)),
            TruthSpec::Zipf { exponent } => {
                weighted((1..=k).map(|i| (i as f64).powf(-exponent)).collect())
            }
            TruthSpec::Weights { weights } => {
                if weights.len() != k {
                    return Err(HarnessError::Config(format!(
                        "{} truth weights for {k} labels",
                        weights.len()
                    )));
                }
                weighted(weights.clone())
            }
        }
    }

    fn sample(&self, rng: &mut AgentRng) -> usize {
        match self {
            TruthSampler::Uniform(k) => rng.random_range(0..*k),
            TruthSampler::Weighted(w) => w.sample(rng),
        }
    }
}

/// A configured stream: agents, rules and calibration state.
pub struct Simulation {
    config: RunConfig,
    space: LabelSpace,
    rule_ch: Rule,
    rule_comp: Rule,
    human: Box<dyn HumanAgent>,
    oracle: Box<dyn ScoreProvider>,
    truth: TruthSampler,
    pub state: CalibratorState,
}

impl Simulation {
    pub fn new(config: RunConfig, registry: &RuleRegistry) -> Result<Self, HarnessError> {
        config.validate()?;
        let space = config.labels.build()?;
        let truth = TruthSampler::new(&config.truth, space.len())?;
        Ok(Self {
            rule_ch: registry.parse(&config.rules.ch)?,
            rule_comp: registry.parse(&config.rules.comp)?,
            human: config.human.build()?,
            oracle: config.oracle.build()?,
            state: CalibratorState::new(
                config.targets.epsilon,
                config.targets.delta,
                config.targets.eta,
            )?,
            truth,
            space,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.space
    }

    /// Plays one full day against the current state and applies the update.
    pub fn run_day_loop(
        &mut self,
        day_index: u64,
    ) -> Result<(DayRecord, ThresholdUpdateTrace), HarnessError> {
        let day_seed = derive_seed(self.config.seed, day_index);
        let mut truth_rng = AgentRng::seed_from_u64(derive_seed(day_seed, TRUTH_STREAM));
        let mut human_rng = AgentRng::seed_from_u64(derive_seed(day_seed, HUMAN_STREAM));
        let mut oracle_rng = AgentRng::seed_from_u64(derive_seed(
            derive_seed(day_seed, ORACLE_STREAM),
            self.config.oracle.noise_seed(),
        ));

        let truth = self.truth.sample(&mut truth_rng);
        let mut day = DayRecord::new(day_index, format!("day-{day_index}"), self.space.clone())?;
        let thresholds = self.state.thresholds();
        let mut view = DayView {
            day_index,
            label_space: &self.space,
            ground_truth: truth,
            thresholds,
            round: 1,
        };
        let first = self.human.propose(&view, &mut human_rng)?;
        day.append_human_turn(first, self.human.message(&view))?;

        loop {
            let human_sets = day.human_sets();
            let ctx = OracleContext {
                day_index,
                label_space: &self.space,
                ground_truth: truth,
                human_sets: &human_sets,
            };
            let scores = self.oracle.distribution(&ctx, &mut oracle_rng)?.scores();
            let ai_set = run_round(
                &self.state,
                &mut day,
                scores,
                &self.rule_ch,
                &self.rule_comp,
                "",
            )?;
            let current = &human_sets[human_sets.len() - 1];
            let revision = self.human.revise(&view, current, &ai_set, &mut human_rng);
            if !revision.proceed || view.round >= self.config.max_rounds_cap {
                day.set_final_answer(revision.set)?;
                break;
            }
            view.round += 1;
            day.append_human_turn(revision.set, self.human.message(&view))?;
        }

        if !self.config.record_scores {
            day.clear_scores();
        }
        let trace = close_day(
            &mut self.state,
            &mut day,
            truth,
            &self.rule_ch,
            &self.rule_comp,
        )?;
        Ok((day, trace))
    }

    /// Runs `config.days` days from the current state.
    pub fn run(&mut self) -> Result<RunLog, HarnessError> {
        let mut log = RunLog::new(self.config.params());
        for t in 1..=self.config.days {
            let before = self.state.thresholds();
            let (day, _) = self.run_day_loop(t)?;
            log.push(day, before)?;
        }
        Ok(log)
    }
}

/// Runs a whole stream with the default rule registry.
pub fn run_stream(config: &RunConfig) -> Result<(RunLog, RunSummary), HarnessError> {
    run_stream_with(config, &RuleRegistry::default())
}

pub fn run_stream_with(
    config: &RunConfig,
    registry: &RuleRegistry,
) -> Result<(RunLog, RunSummary), HarnessError> {
    let mut sim = Simulation::new(config.clone(), registry)?;
    let log = sim.run()?;
    let summary = summarize(&log)?;
    Ok((log, summary))
}

/// A conditional frequency; absent when its condition never occurred.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rate {
    pub rate: f64,
    pub hits: u64,
    pub count: u64,
}

impl Rate {
    fn from_counts(hits: u64, count: u64) -> Option<Self> {
        (count > 0).then(|| Self {
            rate: hits as f64 / count as f64,
            hits,
            count,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct ConditionedOutcomes {
    /// GT loss among initially-correct days with a harm error.
    pub loss_given_ch_error: Option<Rate>,
    /// GT loss among initially-correct days without a harm error.
    pub loss_given_no_ch_error: Option<Rate>,
    /// GT gain among initially-wrong days where the complementarity rule
    /// triggered and the AI covered the truth.
    pub gain_given_comp_satisfied: Option<Rate>,
    /// GT gain among initially-wrong days with a complementarity error.
    pub gain_given_comp_error: Option<Rate>,
}

/// Outcome rates split by whether the AI committed each error type.
pub fn conditioned_outcomes(log: &RunLog) -> ConditionedOutcomes {
    let mut counts = [(0u64, 0u64); 4];
    for day in log.days() {
        let (Some(outcome), Some(errors)) = (AgentOutcome::of_day(day), day.errors()) else {
            continue;
        };
        let mut bump = |slot: usize, hit: bool| {
            counts[slot].0 += u64::from(hit);
            counts[slot].1 += 1;
        };
        if outcome.initial_had_truth {
            bump(if errors.e_ch { 0 } else { 1 }, outcome.gt_loss);
        } else if errors.e_comp {
            bump(3, outcome.gt_gain);
        } else if errors.comp_triggered {
            bump(2, outcome.gt_gain);
        }
    }
    ConditionedOutcomes {
        loss_given_ch_error: Rate::from_counts(counts[0].0, counts[0].1),
        loss_given_no_ch_error: Rate::from_counts(counts[1].0, counts[1].1),
        gain_given_comp_satisfied: Rate::from_counts(counts[2].0, counts[2].1),
        gain_given_comp_error: Rate::from_counts(counts[3].0, counts[3].1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub days: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub eta: f64,
    /// Running average of harm errors after each day.
    #[serde(skip)]
    pub avg_ch: Vec<f64>,
    #[serde(skip)]
    pub avg_comp: Vec<f64>,
    pub final_avg_ch: f64,
    pub final_avg_comp: f64,
    pub final_tau: f64,
    pub final_lambda: f64,
    pub max_tau: f64,
    pub max_lambda: f64,
    /// GT loss among days whose first proposal held the truth.
    pub gt_loss_rate: Option<f64>,
    /// GT gain among days whose first proposal missed the truth.
    pub gt_gain_rate: Option<f64>,
    pub conditioned: ConditionedOutcomes,
    pub audit_pass: bool,
    pub audit_failures: usize,
    pub trajectory_ok: bool,
    pub mean_rounds: f64,
    pub mean_ai_set_size: f64,
}

/// Everything in a [`RunSummary`] is recomputed from the log alone.
pub fn summarize(log: &RunLog) -> Result<RunSummary, HarnessError> {
    let params = log
        .params()
        .cloned()
        .ok_or_else(|| HarnessError::Config("cannot summarize an empty log".into()))?;
    let audits = audit_bounds(log, params.epsilon, params.delta, params.eta)?;
    let trajectory = check_trajectory(log);
    let avg_ch: Vec<f64> = audits.iter().map(|a| a.avg_ch).collect();
    let avg_comp: Vec<f64> = audits.iter().map(|a| a.avg_comp).collect();

    let (mut loss, mut had, mut gain, mut missed) = (0u64, 0u64, 0u64, 0u64);
    let (mut rounds, mut ai_sizes, mut ai_sets) = (0usize, 0usize, 0usize);
    for day in log.days() {
        if let Some(o) = AgentOutcome::of_day(day) {
            if o.initial_had_truth {
                had += 1;
                loss += u64::from(o.gt_loss);
            } else {
                missed += 1;
                gain += u64::from(o.gt_gain);
            }
        }
        rounds += day.stopping_round();
        for r in day.rounds() {
            if let Some(set) = r.ai_set() {
                ai_sizes += set.len();
                ai_sets += 1;
            }
        }
    }
    let next = log.next_thresholds().unwrap_or_default();
    let n = log.len().max(1) as f64;
    Ok(RunSummary {
        days: log.len() as u64,
        epsilon: params.epsilon,
        delta: params.delta,
        eta: params.eta,
        final_avg_ch: avg_ch.last().copied().unwrap_or(0.0),
        final_avg_comp: avg_comp.last().copied().unwrap_or(0.0),
        avg_ch,
        avg_comp,
        final_tau: next.tau,
        final_lambda: next.lambda,
        max_tau: trajectory.max_tau,
        max_lambda: trajectory.max_lambda,
        gt_loss_rate: Rate::from_counts(loss, had).map(|r| r.rate),
        gt_gain_rate: Rate::from_counts(gain, missed).map(|r| r.rate),
        conditioned: conditioned_outcomes(log),
        audit_pass: audits.iter().all(|a| a.pass),
        audit_failures: audits.iter().filter(|a| !a.pass).count(),
        trajectory_ok: trajectory.ok(),
        mean_rounds: rounds as f64 / n,
        mean_ai_set_size: ai_sizes as f64 / ai_sets.max(1) as f64,
    })
}

/// One cell of a target sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
    pub summary: RunSummary,
}

/// Seeds to use for a sweep: the grid's list, or the config seed alone.
fn sweep_cells(config: &RunConfig, grid: &SweepGrid) -> Vec<(f64, f64, u64)> {
    let eps = if grid.epsilon.is_empty() {
        vec![config.targets.epsilon]
    } else {
        grid.epsilon.clone()
    };
    let deltas = if grid.delta.is_empty() {
        vec![config.targets.delta]
    } else {
        grid.delta.clone()
    };
    let seeds = if grid.seeds.is_empty() {
        vec![config.seed]
    } else {
        grid.seeds.clone()
    };
    let mut cells = Vec::new();
    for &e in &eps {
        for &d in &deltas {
            for &s in &seeds {
                cells.push((e, d, s));
            }
        }
    }
    cells
}

/// Runs one independent stream per `(epsilon, delta, seed)` cell.
///
/// `jobs = None` uses the available parallelism. Results come back in grid
/// order regardless of execution order.
pub fn sweep(
    config: &RunConfig,
    grid: &SweepGrid,
    jobs: Option<usize>,
) -> Result<Vec<SweepCell>, HarnessError> {
    let cells = sweep_cells(config, grid);
    if cells.is_empty() {
        return Err(HarnessError::Config("empty sweep grid".into()));
    }
    let run_cell = |&(epsilon, delta, seed): &(f64, f64, u64)| -> Result<SweepCell, HarnessError> {
        let mut cfg = config.clone();
        cfg.targets.epsilon = epsilon;
        cfg.targets.delta = delta;
        cfg.seed = seed;
        cfg.sweep = None;
        let (_, summary) = run_stream(&cfg)?;
        Ok(SweepCell {
            epsilon,
            delta,
            seed,
            summary,
        })
    };
    run_parallel(&cells, jobs, run_cell)
}

#[cfg(feature = "parallel")]
fn run_parallel<T, R, F>(items: &[T], jobs: Option<usize>, f: F) -> Result<Vec<R>, HarnessError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, HarnessError> + Sync,
{
    use rayon::prelude::*;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_parallel<T, R, F>(items: &[T], _jobs: Option<usize>, f: F) -> Result<Vec<R>, HarnessError>
where
    F: Fn(&T) -> Result<R, HarnessError>,
{
    items.iter().map(f).collect()
}

/// Seed-averaged view of a sweep, one row per `(epsilon, delta)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub delta: f64,
    pub seeds: usize,
    pub mean_avg_ch: f64,
    pub mean_avg_comp: f64,
    pub mean_gt_loss_rate: f64,
    pub mean_gt_gain_rate: f64,
    pub all_audits_pass: bool,
}

pub fn aggregate(cells: &[SweepCell]) -> Vec<SweepRow> {
    let mut groups: BTreeMap<(u64, u64), Vec<&SweepCell>> = BTreeMap::new();
    for c in cells {
        groups
            .entry((c.epsilon.to_bits(), c.delta.to_bits()))
            .or_default()
            .push(c);
    }
    let mut rows: Vec<SweepRow> = groups
        .into_values()
        .map(|group| {
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&RunSummary) -> f64| {
                group.iter().map(|c| f(&c.summary)).sum::<f64>() / n
            };
            SweepRow {
                epsilon: group[0].epsilon,
                delta: group[0].delta,
                seeds: group.len(),
                mean_avg_ch: mean(&|s| s.final_avg_ch),
                mean_avg_comp: mean(&|s| s.final_avg_comp),
                mean_gt_loss_rate: mean(&|s| s.gt_loss_rate.unwrap_or(0.0)),
                mean_gt_gain_rate: mean(&|s| s.gt_gain_rate.unwrap_or(0.0)),
                all_audits_pass: group.iter().all(|c| c.summary.audit_pass),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.epsilon
            .total_cmp(&b.epsilon)
            .then(a.delta.total_cmp(&b.delta))
    });
    rows
}

/// Plot-ready CSV: `t,avg_ch,bound_ch,avg_comp,bound_comp`.
pub fn convergence_csv(summary: &RunSummary) -> String {
    let mut out = String::from("t,avg_ch,bound_ch,avg_comp,bound_comp\n");
    for (i, (ch, comp)) in summary.avg_ch.iter().zip(&summary.avg_comp).enumerate() {
        let t = i as u64 + 1;
        let bch = theoretical_bound(summary.epsilon, summary.eta, t).unwrap_or(f64::NAN);
        let bcomp = theoretical_bound(summary.delta, summary.eta, t).unwrap_or(f64::NAN);
        out.push_str(&format!("{t},{ch},{bch},{comp},{bcomp}\n"));
    }
    out
}

/// Full audit table: `t,tau,lambda,e_ch,e_comp,avg_ch,avg_comp,bound_ch,bound_comp`.
pub fn audit_table_csv(log: &RunLog) -> Result<String, HarnessError> {
    let Some(params) = log.params() else {
        return Ok(String::from(
            "t,tau,lambda,e_ch,e_comp,avg_ch,avg_comp,bound_ch,bound_comp\n",
        ));
    };
    let audits = audit_bounds(log, params.epsilon, params.delta, params.eta)?;
    let mut out = String::from("t,tau,lambda,e_ch,e_comp,avg_ch,avg_comp,bound_ch,bound_comp\n");
    for (entry, a) in log.entries().iter().zip(&audits) {
        let e = entry.day.errors().unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            a.horizon,
            entry.stream.tau,
            entry.stream.lambda,
            u8::from(e.e_ch),
            u8::from(e.e_comp),
            a.avg_ch,
            a.avg_comp,
            a.bound_ch,
            a.bound_comp
        ));
    }
    Ok(out)
}

/// File names written by [`write_outputs`].
pub const LOG_FILE: &str = "runlog.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONVERGENCE_FILE: &str = "convergence.csv";

/// Writes the day log, the summary and the convergence CSV into `dir`.
pub fn write_outputs(
    dir: &Path,
    log: &RunLog,
    summary: &RunSummary,
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let log_path = dir.join(LOG_FILE);
    let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    log.write_to(std::io::BufWriter::new(file))?;

    let summary_path = dir.join(SUMMARY_FILE);
    let mut json = serde_json::to_string_pretty(summary).expect("summary serializes");
    json.push('\n');
    fs::write(&summary_path, json).map_err(io_err(&summary_path))?;

    let csv_path = dir.join(CONVERGENCE_FILE);
    let mut f = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    f.write_all(convergence_csv(summary).as_bytes())
        .map_err(io_err(&csv_path))?;
    Ok(vec![log_path, summary_path, csv_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runlog::replay;

    fn small(days: u64) -> RunConfig {
        RunConfig {
            days,
            labels: LabelSpec::Indexed {
                count: 10,
                prefix: "dx".into(),
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_parses_from_toml() {
        let text = r#"
            days = 200
            seed = 9
            [labels]
            kind = "range"
            lo = 3
            hi = 50
            [rules]
            ch = "ch_current_round"
            comp = "comp_final_round"
            [targets]
            epsilon = 0.3
            delta = 0.5
            eta = 0.1
            [oracle]
            kind = "synthetic"
            truth_mass = 0.7
            [human]
            kind = "interval"
            set_size = 3
            [sweep]
            epsilon = [0.05, 0.3]
            seeds = [1, 2]
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.days, 200);
        assert_eq!(cfg.labels.build().unwrap().len(), 48);
        assert!(matches!(cfg.human, HumanSpec::Interval(ref p) if p.set_size == 3));
        assert!(matches!(cfg.oracle, OracleSpec::Synthetic(ref s) if s.truth_mass == 0.7));
    }

    #[test]
    fn bad_configs_rejected() {
        for text in [
            "days = 0",
            "[targets]\nepsilon = 1.5",
            "[targets]\neta = 0.0",
            "bogus = 1",
            "[oracle]\nkind = \"synthetic\"\nwhat = 1",
        ] {
            assert!(RunConfig::from_toml_str(text).is_err(), "{text}");
        }
        let mut cfg = small(5);
        cfg.rules.ch = "nope".into();
        assert!(matches!(
            Simulation::new(cfg, &RuleRegistry::default()),
            Err(HarnessError::Rule(_))
        ));
    }

    #[test]
    fn one_round_when_policy_stops_immediately() {
        let mut cfg = small(20);
        cfg.human = HumanSpec::Stochastic(HumanPolicy {
            max_rounds: 1,
            ..HumanPolicy::default()
        });
        let (log, _) = run_stream(&cfg).unwrap();
        assert!(log.days().all(|d| d.stopping_round() == 1));
    }

    #[test]
    fn never_stopping_policy_hits_round_budget() {
        let mut cfg = small(20);
        cfg.human = HumanSpec::Stochastic(HumanPolicy {
            max_rounds: 6,
            stop_on_agreement: false,
            ..HumanPolicy::default()
        });
        let (log, _) = run_stream(&cfg).unwrap();
        assert!(log.days().all(|d| d.stopping_round() == 6));
    }

    #[test]
    fn single_day_replays_from_seed() {
        let cfg = small(30);
        let mut sim = Simulation::new(cfg.clone(), &RuleRegistry::default()).unwrap();
        let log = sim.run().unwrap();
        let target = &log.entries()[17];
        let mut fresh = Simulation::new(cfg, &RuleRegistry::default()).unwrap();
        fresh.state.tau = target.stream.tau;
        fresh.state.lambda = target.stream.lambda;
        let (day, _) = fresh.run_day_loop(target.day.day_index).unwrap();
        assert_eq!(day, target.day);
    }

    #[test]
    fn stream_is_deterministic_and_replayable() {
        let cfg = small(300);
        let (a, sa) = run_stream(&cfg).unwrap();
        let (b, _) = run_stream(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(sa.audit_pass && sa.trajectory_ok);
        assert!(replay(&a, &RuleRegistry::default()).unwrap().matches());
    }

    #[test]
    fn summary_matches_log_recount() {
        let (log, summary) = run_stream(&small(400)).unwrap();
        let mut ch = 0u64;
        for (i, day) in log.days().enumerate() {
            ch += u64::from(day.errors().unwrap().e_ch);
            assert!((summary.avg_ch[i] - ch as f64 / (i + 1) as f64).abs() < 1e-12);
        }
        assert!(summary.avg_ch.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn conditioned_rates_absent_without_condition() {
        let mut cfg = small(50);
        // The harm rule doubles as the complementarity rule, so the
        // complementarity-based conditions only see initially-correct days.
        cfg.rules.comp = "ch_current_round".into();
        cfg.human = HumanSpec::Stochastic(HumanPolicy {
            initial_accuracy: 1.0,
            ..HumanPolicy::default()
        });
        let (log, _) = run_stream(&cfg).unwrap();
        let c = conditioned_outcomes(&log);
        assert!(c.gain_given_comp_satisfied.is_none());
        assert!(c.gain_given_comp_error.is_none());
    }

    #[test]
    fn sweep_cells_are_order_independent() {
        let cfg = small(150);
        let grid = SweepGrid {
            epsilon: vec![0.05, 0.3],
            delta: vec![0.5],
            seeds: vec![1, 2],
        };
        let parallel = sweep(&cfg, &grid, Some(4)).unwrap();
        let serial = sweep(&cfg, &grid, Some(1)).unwrap();
        assert_eq!(parallel, serial);
        let reversed = SweepGrid {
            epsilon: vec![0.3, 0.05],
            ..grid
        };
        let rev = sweep(&cfg, &reversed, Some(2)).unwrap();
        for cell in &parallel {
            let twin = rev
                .iter()
                .find(|c| c.epsilon == cell.epsilon && c.seed == cell.seed)
                .unwrap();
            assert_eq!(twin.summary, cell.summary);
        }
        assert_eq!(aggregate(&parallel).len(), 2);
    }

    #[test]
    fn outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        let (log, summary) = run_stream(&small(25)).unwrap();
        let files = write_outputs(dir.path(), &log, &summary).unwrap();
        assert_eq!(files.len(), 3);
        let csv = fs::read_to_string(dir.path().join(CONVERGENCE_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 26);
        let table = audit_table_csv(&log).unwrap();
        assert!(table.starts_with("t,tau,lambda,e_ch,e_comp,avg_ch,avg_comp,bound_ch,bound_comp"));
        let back = RunLog::read_from(std::io::BufReader::new(
            fs::File::open(dir.path().join(LOG_FILE)).unwrap(),
        ))
        .unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn derive_seed_spreads() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
