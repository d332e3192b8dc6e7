use serde_json::json;

use super::code::PythonAdapter;
use super::*;
use crate::extraction::NamedItem;
use crate::golden::assert_golden;
use crate::testutil::{fixture_bundle, StubHarness};

const SCOT: &str = "\
Input: demands: list[float], paths: list[int]
Output: shares: list[float]
1. Loop: for each demand in demands
   1.1. Step: divide the demand into equal shares, one per candidate path
End Loop
2. Step: return the shares";

const FRAMEWORK: &str = "\
```python
import math


def split_demand(demand: float, num_paths: int) -> list[float]:
    # equal shares of one demand
    return [demand / num_paths] * num_paths


def split_all(demands: list[float], paths: list[int]) -> list[float]:
    out = []
    for d, k in zip(demands, paths):
        out.extend(split_demand(d, k))
    return out
```";

fn spec() -> ModuleSpec {
    ModuleSpec {
        name: "demand_split".into(),
        brief_description: Fact::Known("divide demands into equal shares".into()),
        detailed_description: Fact::Known("one share per candidate path".into()),
        inputs: Fact::Known(vec![NamedItem::new("demands", "list[float]"), NamedItem::new("paths", "list[int]")]),
        outputs: Fact::Known(vec![NamedItem::new("shares", "list[float]")]),
        paper_refs: Fact::Known(vec!["4 Design".into()]),
        depends_on: Vec::new(),
    }
}

fn scot() -> Scot {
    scot::parse_scot(SCOT).unwrap()
}

fn framework(h: &mut StubHarness) -> CodeUnit {
    let mut s = h.session("framework");
    generate_framework(&spec(), &scot(), &mut s, &h.kit, &PythonAdapter, &ToolchainConfig::python(), 2).unwrap()
}

#[test]
fn scot_is_accepted_when_valid() {
    let mut h = StubHarness::new(json!([{"match": "(SCoT)", "reply": SCOT}]));
    let mut s = h.session("scot");
    let got = generate_scot(&spec(), &mut s, &h.kit, 3).unwrap();
    assert_eq!(got.io.inputs.len(), 2);
    let text = &s.transcript().records[0].rendered_text;
    assert!(text.contains("Module: demand_split"));
    assert!(text.contains("### Example 2"));
}

#[test]
fn invalid_scot_is_sent_back_with_the_violation() {
    let bad = SCOT.replace("1.1. Step: divide", "1.1. Step: goto the split and divide");
    let mut h = StubHarness::new(json!([
        {"match": "(SCoT)", "reply": bad},
        {"match": "[FEEDBACK]", "reply": SCOT}
    ]));
    let mut s = h.session("scot");
    generate_scot(&spec(), &mut s, &h.kit, 3).unwrap();
    let records = &s.transcript().records;
    assert_eq!(records.len(), 2);
    assert!(records[1].rendered_text.contains("goto"));
}

#[test]
fn framework_bodies_become_placeholders() {
    let mut h = StubHarness::new(json!([{"match": "framework-level", "reply": FRAMEWORK}]));
    let unit = framework(&mut h);
    assert_eq!(unit.functions.len(), 2);
    assert!(unit.functions.iter().all(|f| f.body == BodyKind::Placeholder));
    let text = &unit.files[0].text;
    assert_eq!(unit.files[0].path, "demand_split/demand_split.py");
    assert!(text.starts_with("import math\n"));
    assert!(text.contains("    # [REQUIREMENT] fill: split_all\n    return []\n"));
    // comments inside the old body go with it
    assert!(!text.contains("equal shares of one demand"));
    assert!(unit.flags.is_empty(), "{:?}", unit.flags);
}

#[test]
fn untyped_framework_is_sent_back() {
    let untyped = FRAMEWORK.replace("num_paths: int)", "num_paths)");
    let mut h = StubHarness::new(json!([
        {"match": "framework-level", "reply": untyped},
        {"match": "[FEEDBACK]", "reply": FRAMEWORK}
    ]));
    let mut s = h.session("framework");
    generate_framework(&spec(), &scot(), &mut s, &h.kit, &PythonAdapter, &ToolchainConfig::python(), 2).unwrap();
    let second = &s.transcript().records[1].rendered_text;
    assert!(second.contains("parameter `num_paths` of `split_demand` has no type annotation"));
}

#[test]
fn framework_that_does_not_compile_is_sent_back_with_diagnostics() {
    let broken = FRAMEWORK.replace("import math", "import math\nx = = 1");
    let mut h = StubHarness::new(json!([
        {"match": "framework-level", "reply": broken},
        {"match": "[FEEDBACK]", "reply": FRAMEWORK}
    ]));
    let mut s = h.session("framework");
    generate_framework(&spec(), &scot(), &mut s, &h.kit, &PythonAdapter, &ToolchainConfig::python(), 2).unwrap();
    assert!(s.transcript().records[1].rendered_text.contains("SyntaxError"));
}

#[test]
fn framework_without_functions_fails_the_stage() {
    let mut h = StubHarness::new(json!([{"match": "framework-level", "reply": "```python\nX = 1\n```", "repeat": true}]));
    let mut s = h.session("framework");
    let err = generate_framework(&spec(), &scot(), &mut s, &h.kit, &PythonAdapter, &ToolchainConfig::python(), 1)
        .unwrap_err();
    assert!(err.to_string().contains("defines no function"), "{err}");
    assert_eq!(s.transcript().records.len(), 2);
}

#[test]
fn functions_unrelated_to_module_io_are_flagged() {
    let extra = FRAMEWORK.replace("\n```", "\n\n\ndef banner(width: int) -> str:\n    return '-' * width\n```");
    let mut h = StubHarness::new(json!([{"match": "framework-level", "reply": extra}]));
    let unit = framework(&mut h);
    assert_eq!(unit.functions.len(), 3);
    assert_eq!(unit.flags.len(), 1);
    assert!(unit.function("banner").unwrap().flags[0].contains("not tied"));
}

#[test]
fn compile_check_rejects_an_empty_unit() {
    let unit = CodeUnit {
        module_name: "m".into(),
        language: "python".into(),
        files: Vec::new(),
        functions: Vec::new(),
        flags: Vec::new(),
    };
    assert!(matches!(
        compile_check(&unit, &PythonAdapter, &ToolchainConfig::python()),
        Err(ScaffoldError::RejectedUnit(_))
    ));
}

fn content_map(requirement: &str, original: &str) -> String {
    json!({"requirement": requirement, "original_text": original}).to_string()
}

#[test]
fn paper_content_is_annotated_and_verified() {
    let mut h = StubHarness::new(json!([
        {"match": "framework-level", "reply": FRAMEWORK},
        {"match": "def split_demand(", "reply": content_map(
            "Divide one demand into equal shares, one per candidate path.",
            "Each demand of volume d with k candidate paths is divided into k equal shares of size d/k.")},
        {"match": "def split_all(", "reply": content_map(
            "Split every demand.",
            "Every demand is split evenly over its paths.")}
    ]));
    let mut unit = framework(&mut h);
    let mut s = h.session("content-map");
    map_paper_content(&mut unit, &spec(), &fixture_bundle(), &mut s, &h.kit, &PythonAdapter, 2).unwrap();
    let prompt = &s.transcript().records[0].rendered_text;
    assert!(prompt.contains("## 4 Design"));
    assert!(!prompt.contains("## 5 Evaluation"));

    let first = unit.function("split_demand").unwrap();
    assert!(first.annotation.as_ref().unwrap().verified);
    assert!(first.flags.is_empty());
    let second = unit.function("split_all").unwrap();
    assert!(!second.annotation.as_ref().unwrap().verified);
    assert!(second.flags[0].contains("needs review"));
    assert_golden("annotations/demand_split.py", &unit.files[0].text);
}

#[test]
fn annotations_are_replaced_not_stacked() {
    let mut h = StubHarness::new(json!([{"match": "framework-level", "reply": FRAMEWORK}]));
    let mut unit = framework(&mut h);
    let ann = |r: &str| Annotation {
        requirement: Fact::Known(r.into()),
        original_text: Fact::Unknown,
        verified: false,
    };
    unit.set_annotation(&PythonAdapter, "split_all", ann("first"));
    unit.set_annotation(&PythonAdapter, "split_all", ann("second"));
    let text = &unit.files[0].text;
    assert_eq!(text.matches("# [ORIGINAL TEXT]").count(), 1);
    assert!(text.contains("# [REQUIREMENT] second\n# [ORIGINAL TEXT] UNKNOWN\n# [VERIFIED] no, needs review\ndef split_all("));
}

#[test]
fn function_replacement_keeps_neighbours_and_hoists_imports() {
    let mut h = StubHarness::new(json!([{"match": "framework-level", "reply": FRAMEWORK}]));
    let mut unit = framework(&mut h);
    let body = "def split_demand(demand: float, num_paths: int) -> list[float]:\n    return [demand / num_paths] * num_paths";
    assert!(unit.replace_function(&PythonAdapter, "split_demand", body));
    assert!(!unit.replace_function(&PythonAdapter, "missing", body));
    unit.hoist_imports(&PythonAdapter, "demand_split/demand_split.py", &["import math".into(), "from functools import reduce".into()]);
    let text = &unit.files[0].text;
    assert!(text.starts_with("import math\nfrom functools import reduce\n"));
    assert_eq!(unit.function_source(&PythonAdapter, "split_demand").unwrap(), body);
    assert!(text.contains("# [REQUIREMENT] fill: split_all"));
    let report = compile_check(&unit, &PythonAdapter, &ToolchainConfig::python()).unwrap();
    assert!(report.success(), "{}", report.diagnostics());
}
