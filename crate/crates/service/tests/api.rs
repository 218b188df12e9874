use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tandem_service::{router, Service, ServiceConfig};
use tower::ServiceExt;

fn app_with(config: ServiceConfig) -> (Arc<Service>, Router) {
    let svc = Arc::new(Service::open(&config).unwrap());
    (svc.clone(), router(svc))
}

fn app() -> (Arc<Service>, Router) {
    app_with(ServiceConfig::default())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes)
        .unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(body)).await
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

async fn ok(app: &Router, uri: &str, body: Value) -> Value {
    let (status, v) = post(app, uri, body).await;
    assert!(status.is_success(), "{uri}: {status} {v}");
    v
}

async fn session(app: &Router, stream: &str) -> String {
    ok(app, &format!("/streams/{stream}/sessions"), json!({})).await["session_id"]
        .as_str()
        .unwrap()
        .to_string()
}

fn counting_stream(id: &str) -> Value {
    json!({ "id": id, "seed": 7, "task": { "kind": "counting" } })
}

fn label_stream(id: &str) -> Value {
    json!({
        "id": id,
        "seed": 3,
        "task": { "kind": "labels", "labels": ["a", "b", "c", "d", "e"], "set_size": null, "max_rounds": 3 }
    })
}

/// Three consecutive counts around what the stimulus shows, kept inside the
/// label range.
fn perceived_range(day: &Value, offset: i64) -> Vec<i64> {
    let stim = &day["stimulus"];
    let target = stim["target_shape"].as_str().unwrap();
    let n = stim["shapes"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["kind"] == target)
        .count() as i64;
    let lo = (n - 1 + offset).clamp(3, 48);
    vec![lo, lo + 1, lo + 2]
}

fn keys_mentioning_truth(v: &Value, path: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let p = format!("{path}.{k}");
                if k.contains("truth") {
                    out.push(p.clone());
                }
                keys_mentioning_truth(child, &p, out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                keys_mentioning_truth(child, &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

fn no_truth(v: &Value) {
    let mut hits = Vec::new();
    keys_mentioning_truth(v, "", &mut hits);
    assert!(hits.is_empty(), "truth leaked at {hits:?} in {v}");
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let (_, app) = app();
    let (status, body) = post(&app, "/streams/nope/sessions", json!({})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_stream");
    let (status, body) = post(&app, "/sessions/nope/days", json!({})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_session");
    assert_eq!(
        get(&app, "/streams/nope/state").await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        get(&app, "/streams/nope/audit").await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn stream_creation_validates_and_rejects_duplicates() {
    let (_, app) = app();
    let (status, body) = post(&app, "/streams", counting_stream("alg-A")).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["stream_id"], "alg-A");
    assert_eq!(body["thresholds"], json!({ "tau": 0.0, "lambda": 0.0 }));

    let (status, body) = post(&app, "/streams", counting_stream("alg-A")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "stream_exists");

    for bad in [
        json!({ "id": "x", "epsilon": 1.5 }),
        json!({ "id": "bad id" }),
        json!({ "id": "x", "initial_tau": 2.0 }),
        json!({ "id": "x", "rules": { "ch": "no_such_rule", "comp": "comp_final_round" } }),
    ] {
        let (status, body) = post(&app, "/streams", bad.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad} -> {body}");
    }
    let (status, body) = post(&app, "/streams", json!({ "id": "x", "mystery": 1 })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "bad_request");

    let (_, list) = get(&app, "/streams").await;
    assert_eq!(list["streams"], json!(["alg-A"]));
}

#[tokio::test]
async fn counting_protocol_two_rounds() {
    let (_, app) = app();
    ok(&app, "/streams", counting_stream("count")).await;
    let s = session(&app, "count").await;

    let day = ok(&app, &format!("/sessions/{s}/days"), json!({})).await;
    no_truth(&day);
    assert_eq!(day["round"], 0);
    assert_eq!(day["set_size"], 3);
    assert_eq!(day["contiguous"], true);
    assert_eq!(day["max_rounds"], 2);
    let labels = day["labels"].as_array().unwrap();
    assert_eq!(labels.first().unwrap(), "3");
    assert_eq!(labels.last().unwrap(), "50");
    assert_eq!(day["stimulus"]["exposures_ms"], json!([1000, 500]));

    let (status, body) = post(&app, &format!("/sessions/{s}/days"), json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "day_open");

    let (status, body) = post(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": [4, 5] }),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "set_size");
    let (status, body) = post(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": [4, 6, 7] }),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "not_contiguous");
    let (status, body) = post(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": [1, 2, 3] }),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "unknown_label");

    let first = perceived_range(&day, 1);
    let r1 = ok(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": first, "message": "about this many" }),
    )
    .await;
    no_truth(&r1);
    assert_eq!(r1["round"], 1);
    assert_eq!(r1["rounds_left"], 1);
    assert_eq!(
        r1["human_set"],
        json!(first.iter().map(|c| c.to_string()).collect::<Vec<_>>())
    );

    let second = perceived_range(&day, 0);
    let r2 = ok(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": second }),
    )
    .await;
    no_truth(&r2);
    assert_eq!(r2["round"], 2);
    assert_eq!(r2["rounds_left"], 0);
    assert_eq!(
        r1["thresholds"], r2["thresholds"],
        "thresholds freeze within a day"
    );

    let (status, body) = post(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": second }),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "round_limit");

    let fin = ok(
        &app,
        &format!("/sessions/{s}/finalize"),
        json!({ "final_set": second }),
    )
    .await;
    let truth: i64 = fin["ground_truth"].as_str().unwrap().parse().unwrap();
    assert!((3..=50).contains(&truth));
    assert_eq!(fin["rounds"].as_array().unwrap().len(), 2);
    assert_eq!(fin["commit_index"], 1);
    let e_ch = fin["e_ch"].as_f64().unwrap();
    let expected_tau = (0.1 * (e_ch - 0.05)).max(0.0);
    assert!((fin["new_thresholds"]["tau"].as_f64().unwrap() - expected_tau).abs() < 1e-12);
    let first_had = first.contains(&truth);
    let final_had = second.contains(&truth);
    assert_eq!(fin["outcome"]["initial_had_truth"], first_had);
    assert_eq!(fin["outcome"]["final_had_truth"], final_had);
    assert_eq!(fin["outcome"]["gt_loss"], first_had && !final_had);

    let (status, body) = post(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": second }),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "day_closed");

    let (_, state) = get(&app, "/streams/count/state").await;
    assert_eq!(state["days"], 1);
    assert_eq!(state["tau"], fin["new_thresholds"]["tau"]);
    assert_eq!(state["open_days"], 0);
    let (_, view) = get(&app, &format!("/sessions/{s}")).await;
    assert_eq!(view["days_completed"], 1);
    assert_eq!(view["open_day"], Value::Null);
}

#[tokio::test]
async fn turns_and_finalize_need_an_open_day_and_a_round() {
    let (_, app) = app();
    ok(&app, "/streams", label_stream("l")).await;
    let s = session(&app, "l").await;
    let (status, body) = post(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": ["a"] }),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "no_open_day");
    ok(&app, &format!("/sessions/{s}/days"), json!({})).await;
    let (status, body) = post(&app, &format!("/sessions/{s}/finalize"), json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "no_completed_round");
    let (status, body) = post(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": ["a"], "bogus": 1 }),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "bad_request");
}

#[tokio::test]
async fn threshold_update_from_warm_start() {
    let (_, app) = app();
    ok(
        &app,
        "/streams",
        json!({
            "id": "warm",
            "epsilon": 0.05,
            "eta": 0.1,
            "initial_tau": 0.2,
            "oracle": { "kind": "adversarial" },
            "task": { "kind": "labels", "labels": ["a", "b", "c"], "set_size": null, "max_rounds": 2 }
        }),
    )
    .await;
    let s = session(&app, "warm").await;
    ok(&app, &format!("/sessions/{s}/days"), json!({})).await;
    // The whole space always holds the truth, so the current-round rule
    // triggers; the oracle gives the truth score 1, which 0.2 cannot admit.
    let turn = ok(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": ["a", "b", "c"] }),
    )
    .await;
    assert_eq!(turn["thresholds"]["tau"], 0.2);
    let fin = ok(&app, &format!("/sessions/{s}/finalize"), json!({})).await;
    assert_eq!(fin["e_ch"], 1);
    assert_eq!(fin["previous_thresholds"]["tau"], 0.2);
    assert!((fin["new_thresholds"]["tau"].as_f64().unwrap() - 0.295).abs() < 1e-12);

    let (_, audit) = get(&app, "/streams/warm/audit").await;
    assert_eq!(audit["replay_matches"], true);
    assert_eq!(audit["trajectory_ok"], true);
}

#[tokio::test]
async fn retried_turn_returns_the_stored_reply() {
    let (_, app) = app();
    ok(&app, "/streams", label_stream("r")).await;
    let s = session(&app, "r").await;
    ok(&app, &format!("/sessions/{s}/days"), json!({})).await;
    let a = ok(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": ["b"], "round": 1 }),
    )
    .await;
    let b = ok(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": ["b"], "round": 1 }),
    )
    .await;
    assert_eq!(a, b);
    let (status, body) = post(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": ["c"], "round": 1 }),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "round_mismatch");
    let (_, view) = get(&app, &format!("/sessions/{s}")).await;
    assert_eq!(view["rounds_done"], 1);
}

#[tokio::test]
async fn idle_day_is_discarded_after_timeout() {
    let (svc, app) = app_with(ServiceConfig {
        day_timeout_secs: 30,
        ..ServiceConfig::default()
    });
    ok(&app, "/streams", label_stream("idle")).await;
    let s = session(&app, "idle").await;
    ok(&app, &format!("/sessions/{s}/days"), json!({})).await;
    ok(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": ["a", "b"] }),
    )
    .await;
    assert_eq!(get(&app, "/streams/idle/state").await.1["open_days"], 1);

    assert_eq!(
        svc.reap_expired(Instant::now() + Duration::from_secs(31)),
        1
    );
    let (status, body) = post(&app, &format!("/sessions/{s}/finalize"), json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "no_open_day");
    let (_, state) = get(&app, "/streams/idle/state").await;
    assert_eq!(state["days"], 0);
    assert_eq!(state["tau"], 0.0);
    assert_eq!(state["open_days"], 0);

    // A fresh day gets a new id; the discarded one is never reused.
    let day = ok(&app, &format!("/sessions/{s}/days"), json!({})).await;
    assert_eq!(day["day_id"], 2);
}

/// Plays one day to the end through HTTP with a fixed human strategy.
async fn play_day(app: &Router, s: &str, pick: &[&str]) -> Value {
    ok(app, &format!("/sessions/{s}/days"), json!({})).await;
    ok(app, &format!("/sessions/{s}/turns"), json!({ "set": pick })).await;
    ok(app, &format!("/sessions/{s}/finalize"), json!({})).await
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_finalizations_serialize() {
    let (svc, app) = app();
    ok(&app, "/streams", label_stream("shared")).await;
    let mut sessions = Vec::new();
    for _ in 0..12 {
        let s = session(&app, "shared").await;
        ok(&app, &format!("/sessions/{s}/days"), json!({})).await;
        ok(
            &app,
            &format!("/sessions/{s}/turns"),
            json!({ "set": ["a", "b"] }),
        )
        .await;
        sessions.push(s);
    }
    let finals = futures_join(&app, &sessions).await;

    let mut by_commit: Vec<&Value> = finals.iter().collect();
    by_commit.sort_by_key(|f| f["commit_index"].as_u64().unwrap());
    let order: Vec<u64> = by_commit
        .iter()
        .map(|f| f["commit_index"].as_u64().unwrap())
        .collect();
    assert_eq!(order, (1..=12).collect::<Vec<_>>());
    for pair in by_commit.windows(2) {
        assert_eq!(pair[0]["new_thresholds"], pair[1]["previous_thresholds"]);
    }

    let (_, audit) = get(&app, "/streams/shared/audit").await;
    assert_eq!(audit["horizon"], 12);
    assert_eq!(audit["replay_matches"], true, "{audit}");
    assert_eq!(audit["trajectory_ok"], true, "{audit}");
    let log = svc.stream("shared").unwrap().log();
    let positions: Vec<u64> = log.days().map(|d| d.day_index).collect();
    let mut sorted = positions.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 12, "distinct day ids");
}

async fn futures_join(app: &Router, sessions: &[String]) -> Vec<Value> {
    let handles: Vec<_> = sessions
        .iter()
        .map(|s| {
            let app = app.clone();
            let s = s.clone();
            tokio::spawn(
                async move { ok(&app, &format!("/sessions/{s}/finalize"), json!({})).await },
            )
        })
        .collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn interleaved_sessions_share_one_trajectory() {
    let (_, app) = app();
    ok(&app, "/streams", label_stream("mix")).await;
    let a = session(&app, "mix").await;
    let b = session(&app, "mix").await;
    for _ in 0..15 {
        ok(&app, &format!("/sessions/{a}/days"), json!({})).await;
        ok(&app, &format!("/sessions/{b}/days"), json!({})).await;
        ok(
            &app,
            &format!("/sessions/{b}/turns"),
            json!({ "set": ["c"] }),
        )
        .await;
        ok(
            &app,
            &format!("/sessions/{a}/turns"),
            json!({ "set": ["a", "b", "c"] }),
        )
        .await;
        ok(&app, &format!("/sessions/{b}/finalize"), json!({})).await;
        ok(&app, &format!("/sessions/{a}/finalize"), json!({})).await;
    }
    let (_, audit) = get(&app, "/streams/mix/audit").await;
    assert_eq!(audit["horizon"], 30);
    assert_eq!(audit["replay_matches"], true);
    assert_eq!(audit["trajectory_ok"], true);
    let (_, state) = get(&app, "/streams/mix/state").await;
    assert_eq!(state["days"], 30);
}

#[tokio::test]
async fn restart_resumes_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let before_state;
    {
        let (_, app) = app_with(config.clone());
        ok(&app, "/streams", label_stream("durable")).await;
        let s = session(&app, "durable").await;
        for i in 0..8 {
            play_day(&app, &s, if i % 2 == 0 { &["a"] } else { &["b", "c", "d"] }).await;
        }
        // An open day at shutdown is lost but keeps its id.
        ok(&app, &format!("/sessions/{s}/days"), json!({})).await;
        before_state = get(&app, "/streams/durable/state").await.1;
    }

    let (_, app) = app_with(config.clone());
    let (_, after_state) = get(&app, "/streams/durable/state").await;
    for key in [
        "tau",
        "lambda",
        "days",
        "cumulative_ch_errors",
        "cumulative_comp_errors",
    ] {
        assert_eq!(before_state[key], after_state[key], "{key}");
    }
    let s = session(&app, "durable").await;
    let day = ok(&app, &format!("/sessions/{s}/days"), json!({})).await;
    assert_eq!(day["day_id"], 10);
    ok(
        &app,
        &format!("/sessions/{s}/turns"),
        json!({ "set": ["e"] }),
    )
    .await;
    ok(&app, &format!("/sessions/{s}/finalize"), json!({})).await;
    for _ in 0..6 {
        play_day(&app, &s, &["a", "e"]).await;
    }
    let (_, audit) = get(&app, "/streams/durable/audit").await;
    assert_eq!(audit["horizon"], 15);
    assert_eq!(audit["pass"], true, "{audit}");
    assert_eq!(audit["replay_matches"], true, "{audit}");
    assert_eq!(audit["trajectory_ok"], true, "{audit}");
    drop(app);

    // The file on disk is a plain run log covering both lifetimes.
    let text = std::fs::read_to_string(dir.path().join("streams/durable/runlog.jsonl")).unwrap();
    let log = tandem_core::RunLog::parse_str(&text).unwrap();
    assert_eq!(log.len(), 15);
    let report = tandem_core::replay(&log, &tandem_core::RuleRegistry::default()).unwrap();
    assert!(report.matches(), "{report:?}");

    // A crash mid-append leaves a torn last line; recovery drops it.
    let path = dir.path().join("streams/durable/runlog.jsonl");
    let mut torn = text.clone();
    torn.push_str("{\"day_index\": 99, \"prob");
    std::fs::write(&path, torn).unwrap();
    let (_, app) = app_with(config);
    let (_, state) = get(&app, "/streams/durable/state").await;
    assert_eq!(state["days"], 15);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
}

#[tokio::test]
async fn configured_streams_are_created_once() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
data_dir = "{}"
[[streams]]
id = "alg-A"
seed = 1
[streams.task]
kind = "counting"
"#,
        dir.path().display()
    );
    let path = dir.path().join("service.toml");
    std::fs::write(&path, text).unwrap();
    let config = ServiceConfig::load(&path).unwrap();
    {
        let (_, app) = app_with(config.clone());
        let s = session(&app, "alg-A").await;
        let day = ok(&app, &format!("/sessions/{s}/days"), json!({})).await;
        ok(
            &app,
            &format!("/sessions/{s}/turns"),
            json!({ "set": perceived_range(&day, 0) }),
        )
        .await;
        ok(&app, &format!("/sessions/{s}/finalize"), json!({})).await;
    }
    let (_, app) = app_with(config);
    assert_eq!(get(&app, "/streams/alg-A/state").await.1["days"], 1);

    let unnamed = ServiceConfig {
        streams: vec![Default::default()],
        ..ServiceConfig::default()
    };
    assert!(Service::open(&unnamed).is_err());
}
