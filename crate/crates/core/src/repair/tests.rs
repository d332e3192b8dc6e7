use serde_json::json;

use super::*;
use crate::extraction::SystemMetadata;
use crate::gateway::LogicalClock;
use crate::sandbox::Phase;
use crate::scaffold::code::PythonAdapter;
use crate::scaffold::framework_unit;
use crate::testutil::StubHarness;

const FRAMEWORK: &str = "\
def allocate(share: float, capacity: float) -> float:
    return 0.0


def utilization(allocated: list[float], capacities: list[float]) -> float:
    return 0.0
";

const ALLOCATE: &str = "def allocate(share: float, capacity: float) -> float:\n    return min(share, capacity)";
const GOOD: &str = "def utilization(allocated: list[float], capacities: list[float]) -> float:\n    return sum(allocated) / sum(capacities)";
const WRONG: &str = "def utilization(allocated: list[float], capacities: list[float]) -> float:\n    return sum(allocated) / len(capacities)";
const MISSPELT: &str = "def utilization(allocated: list[float], capacities: list[float]) -> float:\n    return sum(alocated) / sum(capacities)";

fn fenced(code: &str) -> String {
    format!("```python\n{code}\n```")
}

fn unit_with(utilization: &str) -> CodeUnit {
    let mut u = framework_unit("path_alloc", FRAMEWORK, &PythonAdapter).unwrap();
    assert!(u.replace_function(&PythonAdapter, "allocate", ALLOCATE));
    assert!(u.replace_function(&PythonAdapter, "utilization", utilization));
    for f in &mut u.functions {
        f.body = BodyKind::Implemented;
    }
    u
}

fn check_case() -> CheckCase {
    CheckCase {
        module: "path_alloc".into(),
        function: "utilization".into(),
        case: HarnessCase {
            name: "half".into(),
            stdin: json!({"module": "path_alloc", "function": "utilization", "args": [[1.0, 2.0], [2.0, 4.0]]}).to_string(),
            expected: Some("0.5".into()),
        },
    }
}

fn report(phase: Phase, exit: Option<i32>, stderr: &str) -> ExecutionReport {
    ExecutionReport {
        phase,
        exit_code: exit,
        killed: exit.is_none(),
        stdout: String::new(),
        stderr: stderr.into(),
        stdout_truncated: false,
        stderr_truncated: false,
        duration_ms: 1,
        timed_out: false,
    }
}

#[derive(serde::Deserialize)]
struct Labeled {
    id: String,
    phase: Phase,
    exit_code: i32,
    stderr: String,
    label: ErrorClass,
}

fn corpus() -> Vec<Labeled> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/diagnostics/corpus.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn classification_agrees_with_the_labeled_corpus() {
    let table = PatternTable::builtin();
    let corpus = corpus();
    assert_eq!(corpus.len(), 20);
    for r in &corpus {
        let got = table.classify(&report(r.phase, Some(r.exit_code), &r.stderr));
        assert_eq!(got, r.label, "{}", r.id);
    }
}

#[test]
fn phase_rules_decide_the_fallbacks() {
    let table = PatternTable::builtin();
    // a wrong answer with a clean exit is a logic error whatever it prints
    let mut wrong = report(Phase::Test, Some(0), "NameError: name 'x' is not defined");
    assert_eq!(table.classify(&wrong), ErrorClass::Logical);
    wrong.exit_code = None;
    wrong.timed_out = true;
    assert_eq!(table.classify(&wrong), ErrorClass::Logical);
    assert_eq!(table.classify(&report(Phase::Compile, Some(1), "weird failure")), ErrorClass::OtherSyntax);
    assert_eq!(table.classify(&report(Phase::Run, Some(1), "KeyError: 'volume'")), ErrorClass::Logical);
    // invocation patterns never apply at build time
    let build = report(Phase::Compile, Some(1), "f() missing 1 required positional argument: 'x'");
    assert_eq!(table.classify(&build), ErrorClass::OtherSyntax);
}

#[test]
fn error_class_wire_form_round_trips() {
    for c in ErrorClass::ALL {
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ErrorClass>(&s).unwrap(), c);
    }
    assert_eq!(ErrorClass::VariableAccess.to_string(), "Syntactic/VariableAccess");
    assert_eq!(ErrorClass::Invocation.to_string(), "Semantic/Invocation");
    assert!("Semantic/VariableAccess".parse::<ErrorClass>().is_err());
}

#[test]
fn bad_pattern_tables_are_rejected() {
    let logical = "[[pattern]]\nclass = \"Semantic/Logical\"\nregex = \"x\"\n";
    assert!(matches!(PatternTable::from_toml(logical), Err(classify::PatternError::LogicalPattern { index: 0 })));
    let regex = "[[pattern]]\nclass = \"Syntactic/DataFormat\"\nregex = \"(\"\n";
    assert!(matches!(PatternTable::from_toml(regex), Err(classify::PatternError::Regex { .. })));
    let class = "[[pattern]]\nclass = \"Syntactic/Typo\"\nregex = \"x\"\n";
    assert!(matches!(PatternTable::from_toml(class), Err(classify::PatternError::Class { .. })));
    let extra = "[[pattern]]\nclass = \"Syntactic/DataFormat\"\nregex = \"x\"\nweight = 2\n";
    assert!(PatternTable::from_toml(extra).is_err());
}

fn failing(code: &str) -> Failure {
    let unit = unit_with(code);
    let mut check = SandboxRecheck {
        system: &[],
        adapter: &PythonAdapter,
        toolchain: &ToolchainConfig::python(),
        cases: vec![check_case()],
    };
    check.recheck(&unit).unwrap().expect("the case fails")
}

#[test]
fn prompts_follow_the_class() {
    let kit = PromptKit::builtin("python");
    let ctx = RepairContext::from_units(&[unit_with(GOOD)]);

    let build = Failure::Build {
        report: report(Phase::Compile, Some(1), "path_alloc/path_alloc.py:5: SyntaxError: invalid syntax"),
    };
    let (p, target) = build_repair_prompt(ErrorClass::OtherSyntax, &unit_with(GOOD), &PythonAdapter, &build, &ctx, &kit).unwrap();
    assert_eq!(p.template_id, "T7");
    assert!(p.text.contains("path_alloc/path_alloc.py:5: SyntaxError: invalid syntax"));
    assert_eq!(target.as_deref(), Some("utilization"));

    let (p, _) = build_repair_prompt(ErrorClass::Invocation, &unit_with(GOOD), &PythonAdapter, &build, &ctx, &kit).unwrap();
    assert_eq!(p.template_id, "T8");
    assert!(p.text.contains("path_alloc: def allocate(share: float, capacity: float) -> float:"));

    let wrong = failing(WRONG);
    let (p, target) = build_repair_prompt(ErrorClass::Logical, &unit_with(WRONG), &PythonAdapter, &wrong, &ctx, &kit).unwrap();
    assert_eq!(p.template_id, "T9");
    assert_eq!(target.as_deref(), Some("utilization"));
    assert!(p.text.contains("expected: 0.5\nactual: 1.5"));
    assert!(p.text.contains("\"args\":[[1.0,2.0],[2.0,4.0]]"));
    assert!(p.text.contains("len(capacities)"));
}

#[test]
fn traceback_blames_the_innermost_unit_frame() {
    let f = failing(MISSPELT);
    assert_eq!(classify(&f, &PatternTable::builtin()), ErrorClass::VariableAccess);
    assert_eq!(blamed_function(&unit_with(MISSPELT), &PythonAdapter, &f).as_deref(), Some("utilization"));
    assert!(f.report().stderr.contains("{workspace}/path_alloc/path_alloc.py"));
}

#[test]
fn patches_keep_signatures() {
    let mut u = unit_with(WRONG);
    apply_patch(&mut u, &PythonAdapter, GOOD, Some("utilization"), false).unwrap();
    assert!(u.files[0].text.contains("sum(capacities)"));

    let renamed = GOOD.replace("def utilization(", "def usage(");
    let err = apply_patch(&mut u, &PythonAdapter, &renamed, Some("utilization"), false).unwrap_err();
    assert!(matches!(err, RepairError::SignatureDrift { ref got, .. } if got.starts_with("def usage(")));
    let retyped = GOOD.replace("-> float", "-> int");
    assert!(matches!(
        apply_patch(&mut u, &PythonAdapter, &retyped, None, false),
        Err(RepairError::SignatureDrift { .. })
    ));
    assert!(matches!(
        apply_patch(&mut u, &PythonAdapter, "x = 1", None, false),
        Err(RepairError::ContractViolation(_))
    ));
    let kit = PromptKit::builtin("python");
    assert!(kit.parse("T7", "just use sum(capacities)").is_err());
}

#[test]
fn whole_file_patches_need_every_function() {
    let mut u = unit_with(WRONG);
    let file = format!("import math\n\n{ALLOCATE}\n\n\n{GOOD}\n");
    apply_patch(&mut u, &PythonAdapter, &file, None, true).unwrap();
    assert_eq!(u.files[0].text, file);
    let partial = format!("{GOOD}\n");
    assert!(matches!(
        apply_patch(&mut u, &PythonAdapter, &partial, None, true),
        Err(RepairError::SignatureDrift { .. })
    ));
}

struct Run {
    episode: RepairEpisode,
    unit: CodeUnit,
    records: usize,
}

fn run_loop(start: &str, script: serde_json::Value, cfg: RepairConfig) -> Run {
    let mut h = StubHarness::new(script);
    let mut s = h.session("repair");
    let mut unit = unit_with(start);
    let trigger = failing(start);
    let ctx = RepairContext::from_units(std::slice::from_ref(&unit));
    let toolchain = ToolchainConfig::python();
    let mut check = SandboxRecheck {
        system: &[],
        adapter: &PythonAdapter,
        toolchain: &toolchain,
        cases: vec![check_case()],
    };
    let episode = repair_loop(
        &mut unit,
        "e1",
        EpisodeTag::Unit,
        trigger,
        &ctx,
        &mut s,
        &h.kit,
        &PythonAdapter,
        &PatternTable::builtin(),
        &mut check,
        &cfg,
        &LogicalClock::default(),
    )
    .unwrap();
    Run {
        episode,
        unit,
        records: s.transcript().records.len(),
    }
}

#[test]
fn cooperative_stub_resolves_on_the_second_attempt() {
    let run = run_loop(
        WRONG,
        json!([
            {"match": "produces the wrong result", "reply": fenced(WRONG)},
            {"match": "produces the wrong result", "reply": fenced(GOOD)}
        ]),
        RepairConfig::default(),
    );
    let e = &run.episode;
    assert_eq!(e.class, ErrorClass::Logical);
    assert!(e.resolved && !e.escalated);
    assert_eq!(e.attempts.len(), 2);
    assert_eq!(e.automatic_prompt_count as usize + e.human_prompt_count as usize, run.records);
    assert!(run.unit.files[0].text.contains("sum(capacities)"));
}

#[test]
fn never_fixing_stub_stops_at_the_bound() {
    for (start, reply, bound) in [(WRONG, WRONG, 3), (MISSPELT, MISSPELT, 5)] {
        let run = run_loop(
            start,
            json!([{"regex": "wrong result|syntactic error", "reply": fenced(reply), "repeat": true}]),
            RepairConfig::default(),
        );
        let e = &run.episode;
        assert_eq!(e.max_attempts, bound);
        assert_eq!(e.attempts.len() as u32, bound);
        assert!(!e.resolved && e.escalated);
        assert_eq!(run.records, bound as usize);
    }
}

#[test]
fn rejected_patches_use_an_attempt_and_are_fed_back() {
    let renamed = GOOD.replace("allocated:", "alloc:");
    let run = run_loop(
        WRONG,
        json!([
            {"match": "produces the wrong result", "reply": fenced(&renamed)},
            {"match": "[FEEDBACK]", "reply": fenced(GOOD)}
        ]),
        RepairConfig::default(),
    );
    let e = &run.episode;
    assert!(e.resolved);
    assert!(!e.attempts[0].patch_applied);
    assert!(e.attempts[0].rejection.as_deref().unwrap().contains("signature drift"));
}

#[test]
fn passing_trigger_needs_no_attempt() {
    let mut h = StubHarness::new(json!([]));
    let mut s = h.session("repair");
    let mut unit = unit_with(GOOD);
    let toolchain = ToolchainConfig::python();
    let mut check = SandboxRecheck {
        system: &[],
        adapter: &PythonAdapter,
        toolchain: &toolchain,
        cases: vec![check_case()],
    };
    let e = repair_loop(
        &mut unit,
        "e0",
        EpisodeTag::Unit,
        failing(WRONG),
        &RepairContext::default(),
        &mut s,
        &h.kit,
        &PythonAdapter,
        &PatternTable::builtin(),
        &mut check,
        &RepairConfig::default(),
        &LogicalClock::default(),
    )
    .unwrap();
    assert!(e.resolved);
    assert!(e.attempts.is_empty());
    assert!(s.transcript().records.is_empty());
}

#[test]
fn human_step_after_escalation() {
    let mut h = StubHarness::new(json!([
        {"match": "produces the wrong result", "reply": fenced(WRONG), "repeat": true},
        {"match": "divide by the summed capacities", "reply": fenced(GOOD)}
    ]));
    let mut s = h.session("repair");
    let mut unit = unit_with(WRONG);
    let toolchain = ToolchainConfig::python();
    let table = PatternTable::builtin();
    let clock = LogicalClock::default();
    let cfg = RepairConfig::default();
    let mut check = SandboxRecheck {
        system: &[],
        adapter: &PythonAdapter,
        toolchain: &toolchain,
        cases: vec![check_case()],
    };
    let mut e = repair_loop(
        &mut unit,
        "e2",
        EpisodeTag::Unit,
        failing(WRONG),
        &RepairContext::default(),
        &mut s,
        &h.kit,
        &PythonAdapter,
        &table,
        &mut check,
        &cfg,
        &clock,
    )
    .unwrap();
    assert!(e.escalated);
    let err = human_repair_step(&mut e, &mut unit, "  ", &mut s, &h.kit, &PythonAdapter, &table, &mut check, &cfg, &clock);
    assert!(matches!(err, Err(RepairError::EmptyPrompt)));

    human_repair_step(
        &mut e,
        &mut unit,
        "Line 2 should divide by the summed capacities, not their count.",
        &mut s,
        &h.kit,
        &PythonAdapter,
        &table,
        &mut check,
        &cfg,
        &clock,
    )
    .unwrap();
    assert!(e.resolved && !e.escalated);
    assert_eq!(e.human_prompt_count, 1);
    assert_eq!(e.automatic_prompt_count, 3);
    let records = &s.transcript().records;
    assert_eq!(records.len(), 4);
    assert_eq!(records[3].origin, Origin::Human);
    assert_eq!(e.human_steps[0].record, 3);
    assert!(records[3].rendered_text.contains("len(capacities)"));

    let again = human_repair_step(&mut e, &mut unit, "more", &mut s, &h.kit, &PythonAdapter, &table, &mut check, &cfg, &clock);
    assert!(matches!(again, Err(RepairError::EpisodeResolved(id)) if id == "e2"));
}

#[test]
fn later_human_steps_see_the_newest_failure() {
    let mut h = StubHarness::new(json!([
        {"match": "produces the wrong result", "reply": fenced(WRONG), "repeat": true},
        {"match": "first hint", "reply": fenced(MISSPELT)},
        {"match": "second hint", "reply": fenced(GOOD)}
    ]));
    let mut s = h.session("repair");
    let mut unit = unit_with(WRONG);
    let toolchain = ToolchainConfig::python();
    let (table, clock, cfg) = (PatternTable::builtin(), LogicalClock::default(), RepairConfig::default());
    let mut check = SandboxRecheck {
        system: &[],
        adapter: &PythonAdapter,
        toolchain: &toolchain,
        cases: vec![check_case()],
    };
    let mut e = repair_loop(
        &mut unit,
        "e3",
        EpisodeTag::Unit,
        failing(WRONG),
        &RepairContext::default(),
        &mut s,
        &h.kit,
        &PythonAdapter,
        &table,
        &mut check,
        &cfg,
        &clock,
    )
    .unwrap();
    for hint in ["first hint", "second hint"] {
        human_repair_step(&mut e, &mut unit, hint, &mut s, &h.kit, &PythonAdapter, &table, &mut check, &cfg, &clock)
            .unwrap();
    }
    assert_eq!(e.human_steps[0].class, ErrorClass::Logical);
    assert_eq!(e.human_steps[1].class, ErrorClass::VariableAccess);
    assert!(e.resolved);
}

const SPLIT: &str = "\
def split_demand(demand: float, num_paths: int) -> list[float]:
    return [demand / num_paths] * num_paths
";

fn metadata() -> SystemMetadata {
    serde_json::from_value(json!({
        "sub_domain": "Traffic Engineering", "system_name": "FlowSplit", "deployment_type": "UNKNOWN",
        "problem_statement": "UNKNOWN", "system_inputs": [{"name": "demands", "type": "list"}],
        "system_outputs": ["allocation"], "architecture_features": "UNKNOWN"
    }))
    .unwrap()
}

fn system(utilization: &str) -> Vec<CodeUnit> {
    let mut split = framework_unit("demand_split", SPLIT, &PythonAdapter).unwrap();
    split.replace_function(&PythonAdapter, "split_demand", SPLIT);
    split.functions[0].body = BodyKind::Implemented;
    vec![split, unit_with(utilization)]
}

fn chain(expected: serde_json::Value) -> String {
    json!({"cases": [{
        "name": "split then measure",
        "calls": [
            {"module": "demand_split", "function": "split_demand", "args": [6.0, 2]},
            {"module": "path_alloc", "function": "utilization", "args": ["$prev", [3.0, 3.0]]}
        ],
        "expected_output": expected
    }]})
    .to_string()
}

fn integrate_with(units: &[CodeUnit], reply: String) -> Result<IntegrationReport, RepairError> {
    let mut h = StubHarness::new(json!([{"match": "Write integration tests", "reply": reply}]));
    let mut s = h.session("integration");
    let dir = tempfile::tempdir().unwrap();
    integration_test(units, &metadata(), dir.path(), &mut s, &h.kit, &PythonAdapter, &ToolchainConfig::python(), 2)
}

#[test]
fn compatible_modules_pass_integration() {
    let r = integrate_with(&system(GOOD), chain(json!(1.0))).unwrap();
    assert!(r.passed(), "{:?}", r.outcomes);
    assert_eq!(r.cases[0].calls.len(), 2);
}

#[test]
fn mismatched_interfaces_open_a_logical_failure() {
    // the consumer reads a field the producer never emits
    let consumer = "def utilization(allocated: list[float], capacities: list[float]) -> float:\n    return sum(a[\"volume\"] for a in allocated) / sum(capacities)";
    let units = system(consumer);
    let r = integrate_with(&units, chain(json!(1.0))).unwrap();
    assert_eq!(r.failures.len(), 1);
    let f = &r.failures[0];
    assert_eq!(classify(f, &PatternTable::builtin()), ErrorClass::DataFormat);
    assert_eq!(failing_module(f, &units).as_deref(), Some("path_alloc"));

    let wrong = integrate_with(&system(WRONG), chain(json!(1.0))).unwrap();
    assert_eq!(classify(&wrong.failures[0], &PatternTable::builtin()), ErrorClass::Logical);
}

#[test]
fn integration_requires_integrated_modules() {
    let mut units = system(GOOD);
    units[0] = framework_unit("demand_split", SPLIT, &PythonAdapter).unwrap();
    match integrate_with(&units, chain(json!(1.0))) {
        Err(RepairError::NotIntegrated(names)) => assert_eq!(names, ["demand_split"]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn integration_cases_naming_unknown_functions_are_sent_back() {
    let bad = chain(json!(1.0)).replace("split_demand", "split_all");
    let mut h = StubHarness::new(json!([
        {"match": "Write integration tests", "reply": bad},
        {"match": "[FEEDBACK]", "reply": chain(json!(1.0))}
    ]));
    let mut s = h.session("integration");
    let dir = tempfile::tempdir().unwrap();
    let units = system(GOOD);
    let r = integration_test(&units, &metadata(), dir.path(), &mut s, &h.kit, &PythonAdapter, &ToolchainConfig::python(), 2).unwrap();
    assert!(r.passed());
    assert!(s.transcript().records[1].rendered_text.contains("unknown function `demand_split.split_all`"));
}

#[test]
fn episode_json_round_trips() {
    let run = run_loop(
        WRONG,
        json!([{"match": "produces the wrong result", "reply": fenced(GOOD)}]),
        RepairConfig::default(),
    );
    let text = serde_json::to_string_pretty(&run.episode).unwrap();
    let back: RepairEpisode = serde_json::from_str(&text).unwrap();
    assert_eq!(back, run.episode);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["class"], "Semantic/Logical");
}
