use std::path::Path;

use failsafe::recipe::{run_recipe, ExperimentRecipe};
use failsafe::Error;

const BASE: &str = r#"
name = "mini"
kind = "sweep"
model = "../models/llama70b.toml"
cluster = "../clusters/h100x8.toml"
requests = "../traces/mooncake.csv"
window = 25
factors = [1.0, 0.5]
"#;

fn recipes_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/recipes"))
}

#[test]
fn duplicate_system_names_are_rejected() {
    let text = format!(
        "{BASE}{}",
        r#"
[[systems]]
name = "a"
placement = "hybrid"
scheduler = "adaptive"
policy = "flexible"

[[systems]]
name = "a"
placement = "naive"
scheduler = "fifo"
policy = "flexible"
"#
    );
    let r = ExperimentRecipe::parse(&text).unwrap();
    assert!(matches!(r.validate(), Err(Error::Validation { .. })));
}

#[test]
fn failing_system_is_named() {
    let text = format!(
        "{BASE}{}",
        r#"
[[systems]]
name = "too-big"
placement = "hybrid"
scheduler = "adaptive"
policy = "flexible"
alive = 12
"#
    );
    let r = ExperimentRecipe::parse(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    match run_recipe(&r, recipes_dir(), dir.path()) {
        Err(Error::Recipe { system, .. }) => assert_eq!(system, "too-big"),
        other => panic!("expected a recipe error, got {other:?}"),
    }
}

#[test]
fn sweep_writes_deterministic_reports() {
    let text = format!(
        "{BASE}{}",
        r#"
[[systems]]
name = "flexible"
placement = "hybrid"
scheduler = "adaptive"
policy = "flexible"
"#
    );
    let r = ExperimentRecipe::parse(&text).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_recipe(&r, recipes_dir(), a.path()).unwrap();
    run_recipe(&r, recipes_dir(), b.path()).unwrap();
    assert_eq!(ra.rows.len(), 2);
    for f in &ra.files {
        let name = f.file_name().unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name:?}");
    }
    let csv = std::fs::read_to_string(a.path().join("summary.csv")).unwrap();
    assert!(csv.starts_with("system,stage,factor"));
}
