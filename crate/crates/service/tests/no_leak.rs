//! Nothing a client sees before finalizing names the day's truth.

use proptest::prelude::*;
use serde_json::Value;
use tandem_service::wire::{FinalizeRequest, LabelValue, TurnRequest};
use tandem_service::{Service, ServiceConfig, StreamConfig, TaskSpec};

fn leaks(v: &Value) -> bool {
    match v {
        Value::Object(m) => m
            .iter()
            .any(|(k, c)| k.contains("truth") || k == "scores" || leaks(c)),
        Value::Array(a) => a.iter().any(leaks),
        _ => false,
    }
}

fn task(counting: bool) -> TaskSpec {
    if counting {
        TaskSpec::default()
    } else {
        TaskSpec::Labels {
            labels: (0..6).map(|i| format!("l{i}")).collect(),
            set_size: Some(2),
            max_rounds: 3,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pre_finalize_bodies_hide_truth(seed in any::<u64>(), counting in any::<bool>(), picks in prop::collection::vec(0usize..4, 1..4)) {
        let svc = Service::open(&ServiceConfig::default()).unwrap();
        let cfg = StreamConfig { id: Some("p".into()), seed, task: task(counting), ..StreamConfig::default() };
        svc.create_stream(cfg.clone()).unwrap();
        let s = svc.create_session("p").unwrap().session_id;
        for _ in 0..3 {
            let day = svc.begin_day(&s).unwrap();
            prop_assert!(!leaks(&serde_json::to_value(&day).unwrap()));
            let rounds = picks.len().min(cfg.task.max_rounds());
            for &p in &picks[..rounds] {
                let set: Vec<LabelValue> = day.labels[p..p + cfg.task.set_size().unwrap()]
                    .iter()
                    .map(|l| LabelValue::Text(l.clone()))
                    .collect();
                let reply = svc.submit_turn(&s, TurnRequest { set, ..Default::default() }).unwrap();
                prop_assert!(!leaks(&serde_json::to_value(&reply).unwrap()));
            }
            let view = svc.session_view(&s).unwrap();
            prop_assert!(!leaks(&serde_json::to_value(&view).unwrap()));
            let state = svc.stream_state("p").unwrap();
            prop_assert!(!leaks(&serde_json::to_value(&state).unwrap()));
            let fin = svc.finalize(&s, FinalizeRequest::default()).unwrap();
            prop_assert!(day.labels.contains(&fin.ground_truth));
        }
    }
}
