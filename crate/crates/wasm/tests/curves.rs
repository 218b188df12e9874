use serde_json::Value;
use tandem_wasm::simulate_json;

#[test]
fn curves_are_thinned_and_end_on_the_last_day() {
    let out =
        simulate_json(r#"{"preset":"stationary","days":1000,"seed":4,"max_points":100}"#).unwrap();
    let v: Value = serde_json::from_str(&out).unwrap();
    let t = v["t"].as_array().unwrap();
    assert!(t.len() <= 101);
    assert_eq!(t.first().unwrap(), 1);
    assert_eq!(t.last().unwrap(), 1000);
    for key in [
        "avg_ch",
        "avg_comp",
        "bound_ch",
        "bound_comp",
        "tau",
        "lambda",
    ] {
        assert_eq!(v[key].as_array().unwrap().len(), t.len(), "{key}");
    }
    assert_eq!(v["audit_pass"], true);
    let cap = 1.0 + v["eta"].as_f64().unwrap();
    assert!(v["max_tau"].as_f64().unwrap() <= cap);
}

#[test]
fn overrides_apply_and_bad_requests_fail() {
    let out = simulate_json(r#"{"preset":"drift","days":200,"eta":1.0,"epsilon":0.3}"#).unwrap();
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["eta"], 1.0);
    assert_eq!(v["epsilon"], 0.3);
    assert!(simulate_json(r#"{"preset":"nope"}"#).is_err());
    assert!(simulate_json(r#"{"days":10,"epsilon":2.0}"#).is_err());
    assert!(simulate_json(r#"{"config":"days = \"x\""}"#).is_err());
}

#[test]
fn same_seed_same_curves() {
    let req = r#"{"preset":"adversarial","days":300,"seed":9}"#;
    assert_eq!(simulate_json(req).unwrap(), simulate_json(req).unwrap());
}
