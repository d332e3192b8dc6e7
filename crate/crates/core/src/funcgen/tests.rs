use serde_json::json;

use super::*;
use crate::scaffold::code::PythonAdapter;
use crate::scaffold::{framework_unit, Annotation};
use crate::testutil::StubHarness;

const FRAMEWORK: &str = "\
def split_demand(demand: float, num_paths: int) -> list[float]:
    return []


def total_load(demands: list[float]) -> float:
    return 0.0
";

const SECOT: &str = "\
Data Flow:
1. demand <- input: the demand volume
2. num_paths <- input: the number of candidate paths
3. share <- demand, num_paths: divide the volume by the path count
Control Flow:
1. If `num_paths` is zero, return an empty list
2. Otherwise repeat `share` once per path and return the list
Summary: equal split of one demand";

const BODY: &str = "\
```python
import itertools

def split_demand(demand: float, num_paths: int) -> list[float]:
    if num_paths == 0:
        return []
    return [demand / num_paths] * num_paths
```";

fn unit() -> CodeUnit {
    let mut u = framework_unit("demand_split", FRAMEWORK, &PythonAdapter).unwrap();
    u.set_annotation(
        &PythonAdapter,
        "split_demand",
        Annotation {
            requirement: Fact::Known("Divide one demand into equal shares.".into()),
            original_text: Fact::Unknown,
            verified: false,
        },
    );
    u
}

fn spec(inputs: Fact<Vec<NamedItem>>, outputs: Fact<Vec<NamedItem>>) -> ModuleSpec {
    ModuleSpec {
        name: "demand_split".into(),
        brief_description: Fact::Unknown,
        detailed_description: Fact::Unknown,
        inputs,
        outputs,
        paper_refs: Fact::Unknown,
        depends_on: Vec::new(),
    }
}

#[test]
fn secot_is_parsed_and_validated() {
    let mut h = StubHarness::new(json!([{"match": "(SeCoT)", "reply": SECOT}]));
    let mut s = h.session("secot");
    let got = generate_secot(&unit(), "split_demand", &mut s, &h.kit, 3).unwrap();
    assert_eq!(got.data_flow.len(), 3);
    assert_eq!(got.control_flow.len(), 2);
    let prompt = &s.transcript().records[0].rendered_text;
    assert!(prompt.contains("Divide one demand into equal shares."));
    assert!(prompt.contains("def split_demand(demand: float, num_paths: int) -> list[float]:"));
}

#[test]
fn empty_control_flow_and_undeclared_values_are_sent_back() {
    let empty = "Data Flow:\n1. x <- input: x\nControl Flow:\nSummary: s";
    let undeclared = SECOT.replace("repeat `share`", "repeat `tmp`");
    let mut h = StubHarness::new(json!([
        {"match": "(SeCoT)", "reply": empty},
        {"match": "[FEEDBACK]", "reply": undeclared},
        {"match": "[FEEDBACK]", "reply": SECOT}
    ]));
    let mut s = h.session("secot");
    generate_secot(&unit(), "split_demand", &mut s, &h.kit, 3).unwrap();
    let records = &s.transcript().records;
    assert_eq!(records.len(), 3);
    assert!(records[2].rendered_text.contains("tmp"));
}

#[test]
fn implementation_replaces_the_placeholder() {
    let mut h = StubHarness::new(json!([{"match": "Implement the function below", "reply": BODY}]));
    let mut s = h.session("funcgen");
    let mut u = unit();
    let secot = secot::parse_secot(SECOT).unwrap();
    let extras = generate_function(&mut u, "split_demand", &secot, &mut s, &h.kit, &PythonAdapter, 3).unwrap();
    assert!(extras.is_empty());
    assert_eq!(u.function("split_demand").unwrap().body, BodyKind::Implemented);
    let text = &u.files[0].text;
    assert!(text.starts_with("import itertools\n"));
    assert!(text.contains("# [VERIFIED] no, needs review\ndef split_demand("));
    assert!(!text.contains("fill: split_demand"));
    assert!(text.contains("fill: total_load"));
}

#[test]
fn renamed_parameter_is_signature_drift() {
    let renamed = BODY.replace("num_paths: int)", "k: int)");
    let mut h = StubHarness::new(json!([{"match": "Implement the function below", "reply": renamed}]));
    let mut s = h.session("funcgen");
    let mut u = unit();
    let secot = secot::parse_secot(SECOT).unwrap();
    let err = generate_function(&mut u, "split_demand", &secot, &mut s, &h.kit, &PythonAdapter, 3).unwrap_err();
    match err {
        FuncgenError::SignatureDrift { expected, got } => {
            assert!(expected.contains("num_paths: int"));
            assert!(got.contains("k: int"));
        }
        other => panic!("{other}"),
    }
    assert_eq!(u, unit());
}

#[test]
fn extra_functions_are_dropped_and_flagged() {
    let two = BODY.replace("```python\n", "```python\ndef helper(x: int) -> int:\n    return x\n\n");
    let mut h = StubHarness::new(json!([{"match": "Implement the function below", "reply": two}]));
    let mut s = h.session("funcgen");
    let mut u = unit();
    let secot = secot::parse_secot(SECOT).unwrap();
    let extras = generate_function(&mut u, "split_demand", &secot, &mut s, &h.kit, &PythonAdapter, 3).unwrap();
    assert_eq!(extras.len(), 1);
    assert!(!u.files[0].text.contains("def helper"));
    assert_eq!(u.function("split_demand").unwrap().flags, extras);
}

#[test]
fn io_compliance_compares_shapes() {
    let u = unit();
    let d = u.function("split_demand").unwrap();
    let matching = spec(
        Fact::Known(vec![NamedItem::new("demand", "float"), NamedItem::new("num_paths", "integer")]),
        Fact::Known(vec![NamedItem::new("shares", "list of float")]),
    );
    assert!(check_io_compliance(d, &matching).is_empty());

    let t = u.function("total_load").unwrap();
    let scalar = spec(Fact::Known(vec![NamedItem::new("demands", "float")]), Fact::Known(vec![]));
    let report = check_io_compliance(t, &scalar);
    assert_eq!(report.with_code("io-mismatch").count(), 1);
    assert!(!report.has_errors());

    let flows = spec(Fact::Known(vec![NamedItem::new("demand", "list of flows")]), Fact::Known(vec![]));
    assert_eq!(check_io_compliance(d, &flows).with_code("io-mismatch").count(), 1);

    let unknown = spec(Fact::Unknown, Fact::Unknown);
    let report = check_io_compliance(d, &unknown);
    assert_eq!(report.with_code("io-mismatch").count(), 0);
    assert!(report.with_code("io-unknown").count() > 0);
}

#[test]
fn tests_with_the_wrong_arity_are_dropped() {
    let reply = json!({"cases": [
        {"name": "even", "input": [6.0, 3], "expected_output": [2.0, 2.0, 2.0]},
        {"name": "one path", "input": [5.0, 1], "expected_output": [5.0]},
        {"name": "short", "input": [5.0], "expected_output": [5.0]},
        {"name": "many", "input": [1.0, 1000], "predicate": "a list of 1000 equal shares"}
    ]})
    .to_string();
    let mut h = StubHarness::new(json!([{"match": "Write unit test cases", "reply": reply}]));
    let mut s = h.session("tests");
    let got = generate_tests(&unit(), "split_demand", &mut s, &h.kit, &PythonAdapter, 3).unwrap();
    assert_eq!(got.cases.len(), 3);
    assert_eq!(got.rejected, ["short"]);
    let u = unit();
    let sig = &u.function("split_demand").unwrap().signature;
    assert!(got.cases.iter().all(|c| c.arity_matches(sig) && c.kind == TestKind::Generated));
    assert_eq!(got.cases[2].harness_case().expected, None);
    assert_eq!(got.cases[0].harness_case().expected.as_deref(), Some("[2.0,2.0,2.0]"));
}

#[test]
fn no_usable_tests_fails_the_stage() {
    let mut h = StubHarness::new(json!([{"match": "Write unit test cases", "reply": "{\"cases\": []}", "repeat": true}]));
    let mut s = h.session("tests");
    let err = generate_tests(&unit(), "split_demand", &mut s, &h.kit, &PythonAdapter, 2).unwrap_err();
    assert!(matches!(err, FuncgenError::Stage(StageError::Failed { .. })));
    assert_eq!(s.transcript().records.len(), 3);
}

fn filled() -> CodeUnit {
    let mut u = unit();
    u.replace_function(
        &PythonAdapter,
        "split_demand",
        "def split_demand(demand: float, num_paths: int) -> list[float]:\n    return [demand / num_paths] * num_paths",
    );
    u.function_mut("split_demand").unwrap().body = BodyKind::Implemented;
    u
}

#[test]
fn integrate_requires_every_placeholder_filled_or_waived() {
    let cfg = ToolchainConfig::python();
    match integrate(filled(), &BTreeSet::new(), &PythonAdapter, &cfg) {
        Err(FuncgenError::UnfilledPlaceholders(names)) => assert_eq!(names, ["total_load"]),
        other => panic!("{other:?}"),
    }
    let waived = integrate(filled(), &BTreeSet::from(["total_load".to_string()]), &PythonAdapter, &cfg).unwrap();
    assert_eq!(waived.function("total_load").unwrap().body, BodyKind::Waived);
    assert!(waived.files[0].text.contains("# waived: total_load"));
    assert!(!waived.files[0].text.contains("fill:"));
}

#[test]
fn integrated_unit_that_does_not_build_is_reported() {
    let mut u = filled();
    u.replace_function(&PythonAdapter, "total_load", "def total_load(demands: list[float]) -> float:\n    return sum(demands))");
    u.function_mut("total_load").unwrap().body = BodyKind::Implemented;
    match integrate(u, &BTreeSet::new(), &PythonAdapter, &ToolchainConfig::python()) {
        Err(FuncgenError::BuildFailed(report)) => assert!(report.stderr.contains("SyntaxError")),
        other => panic!("{other:?}"),
    }
}
