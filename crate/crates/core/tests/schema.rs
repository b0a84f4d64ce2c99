use std::collections::BTreeSet;

use serde_json::Value;
use v2g_core::scenario::{from_json, generate, GeneratorConfig};

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../schemas/scenario.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn names(v: &Value) -> BTreeSet<String> {
    v.as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect()
}

#[test]
fn schema_matches_serialized_scenarios() {
    let s = schema();
    let sc = serde_json::to_value(generate(&GeneratorConfig::default()).unwrap()).unwrap();
    assert_eq!(keys(&sc), keys(&s["properties"]));
    assert!(names(&s["required"]).is_subset(&keys(&sc)));
    let charger = &s["$defs"]["charger"];
    assert_eq!(keys(&sc["chargers"][0]), keys(&charger["properties"]));
    assert_eq!(names(&charger["required"]), keys(&charger["properties"]));
    let session = &s["$defs"]["session"];
    assert_eq!(keys(&sc["sessions"][0]), keys(&session["properties"]));
    assert_eq!(names(&session["required"]), keys(&session["properties"]));
}

#[test]
fn loader_rejects_what_the_schema_rejects() {
    let mut sc = serde_json::to_value(generate(&GeneratorConfig::default()).unwrap()).unwrap();
    sc["surprise"] = Value::Bool(true);
    assert!(from_json("x.json".as_ref(), &sc.to_string()).is_err());
    let mut sc = serde_json::to_value(generate(&GeneratorConfig::default()).unwrap()).unwrap();
    sc.as_object_mut().unwrap().remove("id");
    assert!(from_json("x.json".as_ref(), &sc.to_string()).is_ok());
}
