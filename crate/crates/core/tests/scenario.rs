use impulse_core::scenario::{gallery, list_presets, Scenario, ScenarioError};
use serde_json::{json, Value};

fn base() -> Value {
    json!({
        "dimension": 1,
        "f": ["0"],
        "g": [["x1"]],
        "atoms": [{"tau": 0, "c": 1, "shape": "tent"}],
        "domain": {"t": [-1, 1], "x": [[-10, 10]]},
        "t0": -0.5,
        "x0": 1,
        "horizon": 0.5,
        "task": {"kind": "solve"}
    })
}

fn load(v: &Value) -> Result<Scenario, ScenarioError> {
    Scenario::from_json(&v.to_string())
}

fn pointer_of(err: ScenarioError) -> String {
    match err {
        ScenarioError::Schema { pointer, .. } | ScenarioError::Field { pointer, .. } => pointer,
        other => panic!("expected a located error, got {other}"),
    }
}

#[test]
fn unknown_fields_are_rejected_with_their_location() {
    let mut v = base();
    v["atoms"][0]["colour"] = json!("red");
    assert_eq!(pointer_of(load(&v).err().unwrap()), "/atoms/0/colour");
    let mut v = base();
    v["task"]["gird"] = json!([0.1]);
    assert!(pointer_of(load(&v).err().unwrap()).starts_with("/task"));
}

#[test]
fn expression_errors_point_at_the_offending_entry() {
    let mut v = base();
    v["g"][0][0] = json!("x1 * x2");
    let err = load(&v).err().unwrap();
    assert!(err.to_string().contains("x2"), "{err}");
    assert_eq!(pointer_of(err), "/g/0/0");

    let mut v = base();
    v["atoms"][0]["shape"] = json!("1 + 3*");
    assert_eq!(pointer_of(load(&v).err().unwrap()), "/atoms/0/shape");
}

#[test]
fn shapes_must_integrate_to_one() {
    let mut v = base();
    v["atoms"][0]["shape"] = json!("2");
    let err = load(&v).err().unwrap();
    assert!(err.to_string().contains("integrates to 2"), "{err}");

    let mut v = base();
    v["atoms"][0]["shape"] =
        json!({"samples": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17], "normalize": true});
    assert!(load(&v).is_ok());
}

#[test]
fn dimensions_are_checked() {
    let mut v = base();
    v["x0"] = json!([1, 2]);
    assert_eq!(pointer_of(load(&v).err().unwrap()), "/x0");
    let mut v = base();
    v["f"] = json!(["0", "1"]);
    assert_eq!(pointer_of(load(&v).err().unwrap()), "/f");
}

#[test]
fn malformed_json_is_reported() {
    assert!(matches!(
        Scenario::from_json("{\"dimension\": "),
        Err(ScenarioError::Json(_))
    ));
}

#[test]
fn overrides_replace_tolerances() {
    let sc = load(&base()).unwrap().with_overrides(Some(1e-6), Some(128));
    assert_eq!(sc.opts.tol, 1e-6);
    assert_eq!(sc.opts.jump_steps, 128);
    let out = sc.run().unwrap();
    let jump = &out.report["trajectory"]["jumps"][0]["x_plus"][0];
    assert!((jump.as_f64().unwrap() - std::f64::consts::E).abs() < 1e-8);
}

#[test]
fn every_run_emits_trajectory_and_fast_curves() {
    let out = load(&base()).unwrap().run().unwrap();
    let names: Vec<&str> = out.tables.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["trajectory.csv", "fast_1.csv"]);
    let traj = &out.tables[0];
    assert_eq!(traj.header, ["t", "side", "x_1"]);
    let sides: Vec<&str> = traj.rows.iter().map(|r| r[1].as_str()).collect();
    assert!(sides.contains(&"-") && sides.contains(&"+"));
    assert!(out.tables[1].rows.len() > 64);
}

#[test]
fn presets_list_shapes_and_bundled_scenarios() {
    let p = list_presets();
    assert_eq!(p.shapes.len(), 4);
    assert!(p.shapes.iter().all(|(_, i)| (i - 1.0).abs() < 1e-12));
    assert_eq!(p.scenarios.len(), gallery().len());
}

#[test]
fn bundled_scenarios_conform_to_the_published_schema() {
    let schema: Value = serde_json::from_str(include_str!("../../../docs/scenario.schema.json")).unwrap();
    let tasks: Vec<&str> = schema["$defs"]["task"]["oneOf"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["properties"]["kind"]["const"].as_str().unwrap())
        .collect();
    let top: Vec<&String> = schema["properties"].as_object().unwrap().keys().collect();
    for entry in gallery() {
        let v: Value = serde_json::from_str(entry.source).unwrap();
        for key in v.as_object().unwrap().keys() {
            assert!(top.contains(&key), "{}: `{key}` missing from schema", entry.name);
        }
        assert!(tasks.contains(&v["task"]["kind"].as_str().unwrap()), "{}", entry.name);
    }
}
