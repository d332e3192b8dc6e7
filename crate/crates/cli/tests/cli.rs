use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn papyrus(project: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_papyrus"))
        .arg("-C")
        .arg(project)
        .args(args)
        .output()
        .unwrap()
}

fn ok(project: &Path, args: &[&str]) -> String {
    let out = papyrus(project, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const HUMAN: &str = "Please divide by the summed capacities, not the path count.";

/// The dry-run script, except that the utilization fix only arrives
/// after a person asks for it.
fn escalating_setup(root: &Path) {
    let text = std::fs::read_to_string(fixtures().join("dryrun/script.json")).unwrap();
    let mut script: Vec<Value> = serde_json::from_str(&text).unwrap();
    let is_fix = |e: &Value| e["regex"].as_str().is_some_and(|r| r.contains("produces the wrong result"));
    let fix = script.iter().find(|e| is_fix(e)).unwrap()["reply"].clone();
    script.retain(|e| !is_fix(e));
    let broken = "```python\ndef utilization(allocation: list[float], capacities: list[float]) -> float:\n    return sum(allocation) / len(capacities)\n```";
    script.push(json!({"match": "divide by the summed capacities", "reply": fix}));
    script.push(json!({"match": "[CODE]", "reply": broken, "repeat": true}));
    script.push(json!({"match": "produces the wrong result", "reply": broken, "repeat": true}));
    std::fs::write(root.join("script.json"), serde_json::to_string_pretty(&script).unwrap()).unwrap();
    std::fs::copy(fixtures().join("dryrun/config.toml"), root.join("config.toml")).unwrap();
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
                continue;
            }
            let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            // repair records carry sandbox wall-clock timings
            if rel != ".lock" && !rel.starts_with("repairs/") {
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn dry_run_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("proj");
    let bundle = fixtures().join("flowsplit");
    let config = fixtures().join("dryrun/config.toml");
    ok(&p, &["init", "--bundle", bundle.to_str().unwrap(), "--config", config.to_str().unwrap()]);
    let again = papyrus(&p, &["init", "--bundle", bundle.to_str().unwrap(), "--config", config.to_str().unwrap()]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("resume"));

    let out = papyrus(&p, &["run", "funcgen"]);
    assert!(!out.status.success());
    ok(&p, &["run", "extract"]);
    ok(&p, &["approve-division"]);
    for stage in ["scaffold", "funcgen", "integrate", "test"] {
        ok(&p, &["run", stage]);
    }
    assert!(ok(&p, &["resume"]).contains("stage     Done"));
    let state: Value = serde_json::from_str(&ok(&p, &["status", "--json"])).unwrap();
    assert_eq!(state["stage"], "Done");

    let csv = ok(&p, &["metrics", "--format", "csv"]);
    assert!(csv.starts_with("category,name,metric,value\n"));
    assert_eq!(std::fs::read_to_string(p.join("metrics/metrics.csv")).unwrap(), csv);
    let json: Value = serde_json::from_str(&ok(&p, &["metrics", "--format", "json"])).unwrap();
    assert_eq!(json["episodes"], 1);
}

#[test]
fn timer_and_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("proj");
    let missing = papyrus(&p, &["status"]);
    assert!(!missing.status.success());
    ok(
        &p,
        &[
            "init",
            "--bundle",
            fixtures().join("flowsplit").to_str().unwrap(),
            "--config",
            fixtures().join("dryrun/config.toml").to_str().unwrap(),
        ],
    );
    assert!(!papyrus(&p, &["timer", "paper-reading", "stop"]).status.success());
    ok(&p, &["timer", "paper-reading", "start", "--at-ms", "0"]);
    let out = ok(&p, &["timer", "paper-reading", "stop", "--at-ms", "600000"]);
    assert!(out.contains("10.0 min"), "{out}");
    assert!(!papyrus(&p, &["repair", "--episode", "E001", "-m", "x"]).status.success());
}

fn post(base: &str, path: &str, body: Option<Value>) -> u16 {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let resp = match body {
        Some(b) => agent.post(&format!("{base}{path}")).content_type("application/json").send(b.to_string()),
        None => agent.post(&format!("{base}{path}")).send_empty(),
    };
    resp.unwrap().status().as_u16()
}

#[test]
fn command_line_and_api_write_the_same_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        escalating_setup(d);
    }
    let bundle = fixtures().join("flowsplit");
    let init = |d: &Path| {
        let config = d.join("config.toml");
        ok(&d.join("proj"), &["init", "--bundle", bundle.to_str().unwrap(), "--config", config.to_str().unwrap()]);
    };
    init(a.path());
    init(b.path());

    let cli = a.path().join("proj");
    ok(&cli, &["run", "extract"]);
    ok(&cli, &["approve-division"]);
    for stage in ["scaffold", "funcgen", "integrate"] {
        ok(&cli, &["run", stage]);
    }
    assert!(ok(&cli, &["status"]).contains("Repairing"));
    assert!(ok(&cli, &["repair", "--episode", "E001", "-m", HUMAN]).contains("resolved"));
    ok(&cli, &["timer", "paper-reading", "start", "--at-ms", "10"]);

    let project = papyrus_core::workbench::Project::open(&b.path().join("proj")).unwrap();
    let handle = papyrus_core::workbench::api::serve(project, 0).unwrap();
    let base = format!("http://{}", handle.addr);
    assert_eq!(post(&base, "/stages/extract/run", None), 200);
    assert_eq!(post(&base, "/division/approve", None), 200);
    for stage in ["scaffold", "funcgen", "integrate"] {
        assert_eq!(post(&base, &format!("/stages/{stage}/run"), None), 200);
    }
    assert_eq!(post(&base, "/repairs/E001/human-prompt", Some(json!({ "text": HUMAN }))), 200);
    assert_eq!(post(&base, "/timers/paper-reading", Some(json!({"action": "start", "at_ms": 10}))), 200);
    handle.shutdown().unwrap();

    let (fa, fb) = (files(&cli), files(&b.path().join("proj")));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        // the config snapshot holds each project's absolute stub path
        if k == "config.toml" {
            continue;
        }
        assert!(v == &fb[k], "{k} differs");
    }
}
