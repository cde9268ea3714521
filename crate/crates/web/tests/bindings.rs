use hammersim_web::{bypass_run, flip_surface, optimal_set, profiles};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn lists_every_preset() {
    let v = parse(profiles());
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), 9);
    let h = list.iter().find(|p| p["name"] == "mf-H").unwrap();
    assert!(h["classification"].as_str().unwrap().starts_with("Bypass"));
    assert!(h["onset_hc"].as_f64().unwrap() > 0.0);
}

#[test]
fn surface_shape_and_detection() {
    let v = parse(flip_surface("mf-H", 2e6, 1e7, 8));
    let s = v["s"].as_array().unwrap();
    assert_eq!(s.len(), 9);
    assert_eq!(v["expected"].as_array().unwrap().len(), 9);
    assert_eq!(v["expected"][0][0], 0.0);
    // the last T column is above t_mac on every row
    assert!(v["detected"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r[8] == true));
}

#[test]
fn bypass_run_headline() {
    let v = parse(bypass_run("mf-H-table", 1.6e6, 1.6e6, 2e6, 0));
    assert_eq!(v["detected"], false);
    assert_eq!(v["flips"], 970);
    let v = parse(bypass_run("mf-H", 0.0, 2e6, 2e6, 0));
    assert_eq!(v["detected"], true);
}

#[test]
fn optimal_and_errors() {
    let v = parse(optimal_set("mf-C", 970.0, 1e7, 24));
    assert!(v["s"].as_u64().unwrap() > 0 && v["t"].as_u64().unwrap() > 0);
    assert!(v["total_ratio"].as_f64().unwrap() > 0.0);
    assert!(parse(optimal_set("mf-C", 1e12, 1e7, 8)).is_null());
    assert!(parse(flip_surface("nope", 1.0, 100.0, 4))["error"].is_string());
}
