//! Service and stream configuration.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tandem_core::harness::{OracleSpec, RuleSpec};
use tandem_core::protocol::{LabelSpace, ProtocolError};
use tandem_core::runlog::RunParams;
use tandem_core::scores::DistributionSpec;

use crate::error::ApiError;

pub const PORT_ENV: &str = "TANDEM_PORT";
pub const DATA_DIR_ENV: &str = "TANDEM_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Where streams persist their logs and snapshots. `None` keeps
    /// everything in memory.
    pub data_dir: Option<PathBuf>,
    /// Open days idle longer than this are discarded without an update.
    pub day_timeout_secs: u64,
    /// Streams created at startup unless already present on disk.
    pub streams: Vec<StreamConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: None,
            day_timeout_secs: 1800,
            streams: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Applies `TANDEM_PORT` and `TANDEM_DATA_DIR` on top of the file values.
    pub fn with_env_overrides(mut self) -> Result<Self, String> {
        self.apply_overrides(
            std::env::var(PORT_ENV).ok().as_deref(),
            std::env::var(DATA_DIR_ENV).ok().as_deref(),
        )?;
        Ok(self)
    }

    pub fn apply_overrides(
        &mut self,
        port: Option<&str>,
        data_dir: Option<&str>,
    ) -> Result<(), String> {
        if let Some(p) = port {
            self.port = p
                .trim()
                .parse()
                .map_err(|_| format!("{PORT_ENV}={p} is not a port number"))?;
        }
        if let Some(d) = data_dir.filter(|d| !d.is_empty()) {
            self.data_dir = Some(PathBuf::from(d));
        }
        Ok(())
    }

    pub fn addr(&self) -> Result<SocketAddr, String> {
        format!("{}:{}", self.host, self.port)
            .parse()
            .map_err(|e| format!("bad listen address {}:{}: {e}", self.host, self.port))
    }

    pub fn day_timeout(&self) -> Duration {
        Duration::from_secs(self.day_timeout_secs)
    }
}

/// What a day looks like to the human.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Count the target shapes in a briefly shown field of shapes. Labels
    /// are the integer counts `min_count..=max_count`; answers are contiguous
    /// ranges of `set_size` counts.
    Counting {
        #[serde(default = "default_min_count")]
        min_count: i64,
        #[serde(default = "default_max_count")]
        max_count: i64,
        #[serde(default = "default_range_size")]
        set_size: usize,
        #[serde(default = "default_counting_rounds")]
        max_rounds: usize,
        /// Shape kinds; the first one of each day's pair is the target.
        #[serde(default = "default_shapes")]
        shapes: Vec<String>,
    },
    /// Plain labels with an optional fixed answer size and no stimulus.
    Labels {
        labels: Vec<String>,
        set_size: Option<usize>,
        #[serde(default = "default_label_rounds")]
        max_rounds: usize,
    },
}

fn default_min_count() -> i64 {
    3
}
fn default_max_count() -> i64 {
    50
}
fn default_range_size() -> usize {
    3
}
fn default_counting_rounds() -> usize {
    2
}
fn default_label_rounds() -> usize {
    6
}
fn default_shapes() -> Vec<String> {
    ["triangle", "circle", "square", "star"]
        .map(String::from)
        .to_vec()
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Counting {
            min_count: default_min_count(),
            max_count: default_max_count(),
            set_size: default_range_size(),
            max_rounds: default_counting_rounds(),
            shapes: default_shapes(),
        }
    }
}

impl TaskSpec {
    pub fn label_space(&self) -> Result<LabelSpace, ProtocolError> {
        match self {
            TaskSpec::Counting {
                min_count,
                max_count,
                ..
            } => LabelSpace::integer_range(*min_count, *max_count),
            TaskSpec::Labels { labels, .. } => LabelSpace::new(labels.iter().cloned()),
        }
    }

    pub fn set_size(&self) -> Option<usize> {
        match self {
            TaskSpec::Counting { set_size, .. } => Some(*set_size),
            TaskSpec::Labels { set_size, .. } => *set_size,
        }
    }

    pub fn max_rounds(&self) -> usize {
        match self {
            TaskSpec::Counting { max_rounds, .. } | TaskSpec::Labels { max_rounds, .. } => {
                *max_rounds
            }
        }
    }

    /// Counting answers must be runs of consecutive counts.
    pub fn requires_contiguous(&self) -> bool {
        matches!(self, TaskSpec::Counting { .. })
    }
}

/// Body of `POST /streams`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Stream name; generated when absent.
    pub id: Option<String>,
    pub seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub eta: f64,
    /// Starting thresholds in `[0, 1]`.
    pub initial_tau: f64,
    pub initial_lambda: f64,
    pub rules: RuleSpec,
    pub task: TaskSpec,
    pub oracle: OracleSpec,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            id: None,
            seed: 0,
            epsilon: 0.05,
            delta: 0.5,
            eta: 0.1,
            initial_tau: 0.0,
            initial_lambda: 0.0,
            rules: RuleSpec::default(),
            task: TaskSpec::default(),
            oracle: OracleSpec::Synthetic(DistributionSpec {
                truth_mass: 0.5,
                concentration: 1.0,
                ..DistributionSpec::default()
            }),
        }
    }
}

impl StreamConfig {
    pub fn params(&self) -> RunParams {
        RunParams {
            epsilon: self.epsilon,
            delta: self.delta,
            eta: self.eta,
            rule_ch: self.rules.ch.clone(),
            rule_comp: self.rules.comp.clone(),
            initial_tau: self.initial_tau,
            initial_lambda: self.initial_lambda,
        }
    }

    pub fn validate(&self) -> Result<(), ApiError> {
        let bad = |m: String| Err(ApiError::BadConfig(m));
        if let Some(id) = &self.id {
            let ok = !id.is_empty()
                && id.len() <= 64
                && id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !ok {
                return bad(format!(
                    "stream id {id:?} must be 1-64 characters of [A-Za-z0-9_-]"
                ));
            }
        }
        self.params()
            .initial_state()
            .map_err(|e| ApiError::BadConfig(e.to_string()))?;
        let space = self
            .task
            .label_space()
            .map_err(|e| ApiError::BadConfig(e.to_string()))?;
        if let Some(k) = self.task.set_size() {
            if k == 0 || k > space.len() {
                return bad(format!("set_size {k} does not fit {} labels", space.len()));
            }
        }
        if self.task.max_rounds() == 0 {
            return bad("max_rounds must be positive".into());
        }
        if let TaskSpec::Counting {
            min_count, shapes, ..
        } = &self.task
        {
            if *min_count < 0 {
                return bad("min_count must be nonnegative".into());
            }
            if shapes.len() < 2 {
                return bad("counting needs at least two shape kinds".into());
            }
        }
        Ok(())
    }
}
