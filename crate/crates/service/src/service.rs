//! Session and stream logic, independent of HTTP.
//!
//! Lock order is always session before stream. A stream's mutex covers AI set
//! construction and the commit of a finalized day, so commits are totally
//! ordered and the persisted log is the commit order.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use tandem_core::agents::AgentOutcome;
use tandem_core::calibrator::{
    audit_bounds, check_trajectory, close_day, run_round, CalibratorState,
};
use tandem_core::harness::derive_seed;
use tandem_core::protocol::{DayRecord, LabelSpace, PredictionSet, Thresholds};
use tandem_core::rules::{Rule, RuleRegistry};
use tandem_core::runlog::{replay, LogEntry, RunLog, RunParams};
use tandem_core::scores::{OracleContext, ScoreProvider};
use tandem_core::AgentRng;
use uuid::Uuid;

use crate::config::{ServiceConfig, StreamConfig};
use crate::error::ApiError;
use crate::store::{Snapshot, StreamStore};
use crate::task::{draw_truth, is_contiguous, stimulus};
use crate::wire::*;

const TRUTH_STREAM: u64 = 11;
const ORACLE_STREAM: u64 = 12;

struct StreamInner {
    state: CalibratorState,
    oracle: Box<dyn ScoreProvider>,
    log: RunLog,
    next_day_index: u64,
    store: Option<StreamStore>,
}

pub struct Stream {
    id: String,
    config: StreamConfig,
    space: LabelSpace,
    rule_ch: Rule,
    rule_comp: Rule,
    params: RunParams,
    inner: Mutex<StreamInner>,
}

impl Stream {
    fn build(
        id: String,
        config: StreamConfig,
        registry: &RuleRegistry,
        log: RunLog,
        next_day_index: u64,
        store: Option<StreamStore>,
    ) -> Result<Self, ApiError> {
        config.validate()?;
        let bad = |e: &dyn std::fmt::Display| ApiError::BadConfig(e.to_string());
        let space = config.task.label_space().map_err(|e| bad(&e))?;
        let rule_ch = registry.parse(&config.rules.ch).map_err(|e| bad(&e))?;
        let rule_comp = registry.parse(&config.rules.comp).map_err(|e| bad(&e))?;
        let oracle = config.oracle.build().map_err(|e| bad(&e))?;
        let params = config.params();
        if let Some(logged) = log.params() {
            if *logged != params {
                return Err(ApiError::Storage(format!(
                    "stream {id}: log parameters {logged:?} differ from config"
                )));
            }
        }
        let mut state = params.initial_state().map_err(|e| bad(&e))?;
        if let Some(next) = log.next_thresholds() {
            state.tau = next.tau;
            state.lambda = next.lambda;
        }
        for day in log.days() {
            let e = day.errors().unwrap_or_default();
            state.day_counter += 1;
            state.cumulative_ch_errors += u64::from(e.e_ch);
            state.cumulative_comp_errors += u64::from(e.e_comp);
        }
        let after_log = log.days().map(|d| d.day_index + 1).max().unwrap_or(1);
        let log = if log.params().is_some() {
            log
        } else {
            RunLog::new(params.clone())
        };
        Ok(Self {
            id,
            space,
            rule_ch,
            rule_comp,
            params,
            inner: Mutex::new(StreamInner {
                state,
                oracle,
                log,
                next_day_index: next_day_index.max(after_log),
                store,
            }),
            config,
        })
    }

    fn lock(&self) -> MutexGuard<'_, StreamInner> {
        // A panic while holding the lock leaves no partial commit behind:
        // state is only replaced after the log line is durable.
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn thresholds(&self) -> Thresholds {
        self.lock().state.thresholds()
    }

    pub fn state(&self) -> CalibratorState {
        self.lock().state.clone()
    }

    /// Copy of the committed log.
    pub fn log(&self) -> RunLog {
        self.lock().log.clone()
    }
}

struct OpenDay {
    day: DayRecord,
    truth: usize,
    oracle_rng: AgentRng,
    replies: Vec<TurnReply>,
    last_activity: Instant,
}

struct Session {
    stream: Arc<Stream>,
    created_at: u64,
    open: Option<OpenDay>,
    days_completed: u64,
}

pub struct Service {
    registry: RuleRegistry,
    data_dir: Option<PathBuf>,
    day_timeout: Duration,
    streams: RwLock<HashMap<String, Arc<Stream>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Service {
    /// Opens the service: recovers persisted streams, then creates configured
    /// streams that are not on disk yet.
    pub fn open(config: &ServiceConfig) -> Result<Self, ApiError> {
        Self::open_with_registry(config, RuleRegistry::default())
    }

    pub fn open_with_registry(
        config: &ServiceConfig,
        registry: RuleRegistry,
    ) -> Result<Self, ApiError> {
        let service = Self {
            registry,
            data_dir: config.data_dir.clone(),
            day_timeout: config.day_timeout(),
            streams: RwLock::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
        };
        if let Some(dir) = &config.data_dir {
            for loaded in StreamStore::load_all(dir)? {
                let id = loaded.config.id.clone().unwrap_or_else(|| {
                    loaded
                        .store
                        .dir()
                        .file_name()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned()
                });
                if let Some(tail) = &loaded.dropped_tail {
                    tracing::warn!(stream = %id, bytes = tail.len(), "dropped torn final log line");
                }
                let next = loaded.snapshot.as_ref().map_or(1, |s| s.next_day_index);
                let days = loaded.log.len();
                let stream = Stream::build(
                    id.clone(),
                    loaded.config,
                    &service.registry,
                    loaded.log,
                    next,
                    Some(loaded.store),
                )?;
                if let Some(snap) = &loaded.snapshot {
                    let inner = stream.lock();
                    if snap.state != inner.state {
                        tracing::warn!(stream = %id, "snapshot behind log; state rebuilt from log");
                    }
                }
                tracing::info!(stream = %id, days, "recovered stream");
                service.write_streams().insert(id, Arc::new(stream));
            }
        }
        for cfg in &config.streams {
            if cfg.id.is_none() {
                return Err(ApiError::BadConfig(
                    "streams created at startup need an id".into(),
                ));
            }
            let exists = cfg
                .id
                .as_ref()
                .is_some_and(|id| service.read_streams().contains_key(id));
            if !exists {
                service.create_stream(cfg.clone())?;
            }
        }
        Ok(service)
    }

    fn read_streams(&self) -> std::sync::RwLockReadGuard<'_, HashMap<String, Arc<Stream>>> {
        self.streams.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write_streams(&self) -> std::sync::RwLockWriteGuard<'_, HashMap<String, Arc<Stream>>> {
        self.streams.write().unwrap_or_else(|p| p.into_inner())
    }

    fn sessions(&self) -> MutexGuard<'_, HashMap<String, Arc<Mutex<Session>>>> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn stream(&self, id: &str) -> Result<Arc<Stream>, ApiError> {
        self.read_streams()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownStream(id.to_string()))
    }

    pub fn stream_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.read_streams().keys().cloned().collect();
        ids.sort();
        ids
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    pub fn create_stream(&self, mut config: StreamConfig) -> Result<StreamCreated, ApiError> {
        config.validate()?;
        let id = config
            .id
            .clone()
            .unwrap_or_else(|| format!("stream-{}", &Uuid::new_v4().simple().to_string()[..12]));
        config.id = Some(id.clone());
        let mut streams = self.write_streams();
        if streams.contains_key(&id) {
            return Err(ApiError::StreamExists(id));
        }
        let store = match &self.data_dir {
            Some(dir) => Some(StreamStore::create(dir, &id, &config)?),
            None => None,
        };
        let stream = Stream::build(
            id.clone(),
            config.clone(),
            &self.registry,
            RunLog::default(),
            1,
            store,
        )?;
        let thresholds = stream.thresholds().into();
        streams.insert(id.clone(), Arc::new(stream));
        tracing::info!(stream = %id, "created stream");
        Ok(StreamCreated {
            stream_id: id,
            config,
            thresholds,
        })
    }

    pub fn create_session(&self, stream_id: &str) -> Result<SessionCreated, ApiError> {
        let stream = self.stream(stream_id)?;
        let id = Uuid::new_v4().simple().to_string();
        let created_at = now_secs();
        self.sessions().insert(
            id.clone(),
            Arc::new(Mutex::new(Session {
                stream,
                created_at,
                open: None,
                days_completed: 0,
            })),
        );
        Ok(SessionCreated {
            session_id: id,
            stream_id: stream_id.to_string(),
            created_at,
            days_completed: 0,
        })
    }

    pub fn session_view(&self, session_id: &str) -> Result<SessionView, ApiError> {
        let session = self.session(session_id)?;
        let s = session.lock().unwrap_or_else(|p| p.into_inner());
        Ok(SessionView {
            session_id: session_id.to_string(),
            stream_id: s.stream.id.clone(),
            created_at: s.created_at,
            days_completed: s.days_completed,
            open_day: s.open.as_ref().map(|d| d.day.day_index),
            rounds_done: s.open.as_ref().map_or(0, |d| d.replies.len()),
        })
    }

    pub fn begin_day(&self, session_id: &str) -> Result<DayOpened, ApiError> {
        let session = self.session(session_id)?;
        let mut session = session.lock().unwrap_or_else(|p| p.into_inner());
        if session.open.is_some() {
            return Err(ApiError::DayOpen);
        }
        let stream = session.stream.clone();
        let day_index = {
            let mut inner = stream.lock();
            let d = inner.next_day_index;
            // Persist the counter first so a day opened before a restart
            // never shares its id (and stimulus) with a later one.
            if let Some(store) = &inner.store {
                store.write_snapshot(&Snapshot {
                    state: inner.state.clone(),
                    next_day_index: d + 1,
                })?;
            }
            inner.next_day_index += 1;
            d
        };
        let day_seed = derive_seed(stream.config.seed, day_index);
        let mut truth_rng = AgentRng::seed_from_u64(derive_seed(day_seed, TRUTH_STREAM));
        let truth = draw_truth(&stream.space, &mut truth_rng);
        let stimulus = stimulus(
            &stream.config.task,
            &stream.space,
            truth,
            day_seed,
            &mut truth_rng,
        );
        let problem_id = format!("{}-{day_index}", stream.id);
        let day = DayRecord::new(day_index, problem_id, stream.space.clone())
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        session.open = Some(OpenDay {
            day,
            truth,
            oracle_rng: AgentRng::seed_from_u64(derive_seed(day_seed, ORACLE_STREAM)),
            replies: Vec::new(),
            last_activity: Instant::now(),
        });
        let task = &stream.config.task;
        Ok(DayOpened {
            day_id: day_index,
            session_id: session_id.to_string(),
            stream_id: stream.id.clone(),
            labels: stream.space.labels().to_vec(),
            set_size: task.set_size(),
            contiguous: task.requires_contiguous(),
            max_rounds: task.max_rounds(),
            round: 0,
            task: task.clone(),
            stimulus,
        })
    }

    fn parse_set(stream: &Stream, raw: &[LabelValue]) -> Result<PredictionSet, ApiError> {
        let mut set = PredictionSet::empty();
        for value in raw {
            let label = value.as_label();
            let idx = stream
                .space
                .index_of(&label)
                .map_err(|_| ApiError::UnknownLabel(label.clone()))?;
            if !set.insert(idx) {
                return Err(ApiError::BadRequest(format!("label {label:?} repeated")));
            }
        }
        let task = &stream.config.task;
        if let Some(k) = task.set_size() {
            if set.len() != k {
                return Err(ApiError::SetSize {
                    expected: k,
                    got: set.len(),
                });
            }
        }
        let indices: Vec<usize> = set.iter().collect();
        if task.requires_contiguous() && !is_contiguous(&indices) {
            return Err(ApiError::NotContiguous(stream.space.names(&set)));
        }
        Ok(set)
    }

    pub fn submit_turn(&self, session_id: &str, req: TurnRequest) -> Result<TurnReply, ApiError> {
        let session = self.session(session_id)?;
        let mut session = session.lock().unwrap_or_else(|p| p.into_inner());
        let stream = session.stream.clone();
        let finished_any = session.days_completed > 0;
        let Some(open) = session.open.as_mut() else {
            return Err(if finished_any {
                ApiError::DayClosed
            } else {
                ApiError::NoOpenDay
            });
        };
        let set = Self::parse_set(&stream, &req.set)?;
        let done = open.replies.len();
        let names = stream.space.names(&set);
        if let Some(r) = req.round {
            if r >= 1 && r <= done && open.replies[r - 1].human_set == names {
                open.last_activity = Instant::now();
                return Ok(open.replies[r - 1].clone());
            }
            if r != done + 1 {
                return Err(ApiError::RoundMismatch {
                    expected: done + 1,
                    got: r,
                });
            }
        }
        let max_rounds = stream.config.task.max_rounds();
        if done >= max_rounds {
            return Err(ApiError::RoundLimit(max_rounds));
        }

        let mut inner = stream.lock();
        let mut day = open.day.clone();
        day.append_human_turn(set, req.message)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        let human_sets = day.human_sets();
        let ctx = OracleContext {
            day_index: day.day_index,
            label_space: &stream.space,
            ground_truth: open.truth,
            human_sets: &human_sets,
        };
        let scores = inner
            .oracle
            .distribution(&ctx, &mut open.oracle_rng)
            .map_err(|e| ApiError::Internal(e.to_string()))?
            .scores();
        let ai_set = run_round(
            &inner.state,
            &mut day,
            scores,
            &stream.rule_ch,
            &stream.rule_comp,
            "",
        )
        .map_err(|e| ApiError::Internal(e.to_string()))?;
        drop(inner);

        let thresholds = day.thresholds.unwrap_or_default();
        let ai_names = stream.space.names(&ai_set);
        let ai_message = if ai_names.is_empty() {
            "No label clears my thresholds.".to_string()
        } else {
            format!("I would keep: {}.", ai_names.join(", "))
        };
        let reply = TurnReply {
            day_id: day.day_index,
            round: done + 1,
            human_set: names,
            ai_set: ai_names,
            ai_message,
            thresholds: thresholds.into(),
            rounds_left: max_rounds - (done + 1),
        };
        open.day = day;
        open.replies.push(reply.clone());
        open.last_activity = Instant::now();
        Ok(reply)
    }

    pub fn finalize(
        &self,
        session_id: &str,
        req: FinalizeRequest,
    ) -> Result<FinalizeReply, ApiError> {
        let session = self.session(session_id)?;
        let mut session = session.lock().unwrap_or_else(|p| p.into_inner());
        let stream = session.stream.clone();
        let Some(open) = session.open.as_ref() else {
            return Err(if session.days_completed > 0 {
                ApiError::DayClosed
            } else {
                ApiError::NoOpenDay
            });
        };
        if open.replies.is_empty() {
            return Err(ApiError::NoCompletedRound);
        }
        let mut day = open.day.clone();
        let final_set = match &req.final_set {
            Some(raw) => Self::parse_set(&stream, raw)?,
            None => day
                .rounds()
                .last()
                .map(|r| r.human_set.clone())
                .unwrap_or_default(),
        };
        day.set_final_answer(final_set)
            .map_err(|e| ApiError::Internal(e.to_string()))?;

        let mut inner = stream.lock();
        let before = inner.state.thresholds();
        let mut state = inner.state.clone();
        close_day(
            &mut state,
            &mut day,
            open.truth,
            &stream.rule_ch,
            &stream.rule_comp,
        )
        .map_err(|e| ApiError::Internal(e.to_string()))?;
        let entry = LogEntry {
            day: day.clone(),
            stream: before,
        };
        if let Some(store) = &inner.store {
            let line = RunLog::entry_line(&entry, &stream.params)
                .map_err(|e| ApiError::Internal(e.to_string()))?;
            let snapshot = Snapshot {
                state: state.clone(),
                next_day_index: inner.next_day_index,
            };
            store.commit(&line, &snapshot)?;
        }
        inner
            .log
            .push(entry.day, entry.stream)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        inner.state = state;
        let after = inner.state.thresholds();
        let commit_index = inner.state.day_counter;
        drop(inner);

        session.open = None;
        session.days_completed += 1;

        let space = &stream.space;
        let errors = day.errors().unwrap_or_default();
        let truth = day.ground_truth().unwrap_or_default();
        let outcome = AgentOutcome::of_day(&day).unwrap_or_default();
        Ok(FinalizeReply {
            day_id: day.day_index,
            ground_truth: space.label(truth).unwrap_or_default().to_string(),
            final_set: day.final_set().map(|s| space.names(s)).unwrap_or_default(),
            e_ch: errors.e_ch.into(),
            e_comp: errors.e_comp.into(),
            ch_triggered: errors.ch_triggered,
            comp_triggered: errors.comp_triggered,
            outcome: OutcomeFlags {
                initial_had_truth: outcome.initial_had_truth,
                final_had_truth: outcome.final_had_truth,
                gt_loss: outcome.gt_loss,
                gt_gain: outcome.gt_gain,
            },
            rounds: day
                .rounds()
                .iter()
                .map(|r| RoundSummary {
                    human_set: space.names(&r.human_set),
                    ai_set: r.ai_set().map(|s| space.names(s)).unwrap_or_default(),
                    ai_had_truth: r.ai_set().is_some_and(|s| s.contains(truth)),
                })
                .collect(),
            thresholds_used: day.thresholds.unwrap_or(before).into(),
            previous_thresholds: before.into(),
            new_thresholds: after.into(),
            commit_index,
        })
    }

    pub fn stream_state(&self, stream_id: &str) -> Result<StreamStateView, ApiError> {
        let stream = self.stream(stream_id)?;
        let state = stream.state();
        let open_days = self
            .sessions()
            .values()
            .filter(|s| {
                let s = s.lock().unwrap_or_else(|p| p.into_inner());
                s.open.is_some() && s.stream.id == stream.id
            })
            .count();
        let avg = |n: u64| (state.day_counter > 0).then(|| n as f64 / state.day_counter as f64);
        Ok(StreamStateView {
            stream_id: stream.id.clone(),
            tau: state.tau,
            lambda: state.lambda,
            epsilon: state.epsilon,
            delta: state.delta,
            eta: state.eta,
            days: state.day_counter,
            cumulative_ch_errors: state.cumulative_ch_errors,
            cumulative_comp_errors: state.cumulative_comp_errors,
            avg_ch: avg(state.cumulative_ch_errors),
            avg_comp: avg(state.cumulative_comp_errors),
            rule_ch: stream.params.rule_ch.clone(),
            rule_comp: stream.params.rule_comp.clone(),
            open_days,
        })
    }

    pub fn audit(&self, stream_id: &str) -> Result<AuditView, ApiError> {
        let stream = self.stream(stream_id)?;
        let log = stream.log();
        let p = &stream.params;
        let audits = audit_bounds(&log, p.epsilon, p.delta, p.eta)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        let trajectory = check_trajectory(&log);
        let replay_matches = replay(&log, &self.registry)
            .map(|r| r.matches())
            .unwrap_or(false);
        let last = audits.last();
        Ok(AuditView {
            stream_id: stream.id.clone(),
            horizon: log.len() as u64,
            avg_ch: last.map(|a| a.avg_ch),
            avg_comp: last.map(|a| a.avg_comp),
            bound_ch: last.map(|a| a.bound_ch),
            bound_comp: last.map(|a| a.bound_comp),
            pass: audits.iter().all(|a| a.pass),
            failing_prefixes: audits
                .iter()
                .filter(|a| !a.pass)
                .map(|a| a.horizon)
                .collect(),
            max_tau: trajectory.max_tau,
            max_lambda: trajectory.max_lambda,
            cap: 1.0 + p.eta,
            trajectory_ok: trajectory.ok(),
            stale_days: log
                .entries()
                .iter()
                .filter(|e| e.day.thresholds.is_some_and(|t| t != e.stream))
                .count(),
            replay_matches,
        })
    }

    /// Discards open days idle for longer than the day timeout. Their
    /// thresholds never reach the stream. Returns how many were dropped.
    pub fn reap_expired(&self, now: Instant) -> usize {
        let sessions: Vec<Arc<Mutex<Session>>> = self.sessions().values().cloned().collect();
        let mut dropped = 0;
        for s in sessions {
            let mut s = s.lock().unwrap_or_else(|p| p.into_inner());
            let expired = s
                .open
                .as_ref()
                .is_some_and(|d| now.saturating_duration_since(d.last_activity) > self.day_timeout);
            if expired {
                if let Some(d) = s.open.take() {
                    tracing::info!(stream = %s.stream.id, day = d.day.day_index, "discarded idle day");
                }
                dropped += 1;
            }
        }
        dropped
    }

    pub fn day_timeout(&self) -> Duration {
        self.day_timeout
    }
}
