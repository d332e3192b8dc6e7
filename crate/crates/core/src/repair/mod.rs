//! Failure classification, repair prompts, patching and the bounded
//! repair loop, plus cross-module integration tests.

pub mod classify;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::extraction::SystemMetadata;
use crate::gateway::{Clock, GatewayError, Origin, Session};
use crate::prompting::{bindings, extract_code_block, ids, ParsedPayload, PromptError, PromptKit, RenderedPrompt};
use crate::sandbox::{self, CaseOutcome, ExecutionReport, HarnessCase, SandboxError, ToolchainConfig, Verdict};
use crate::scaffold::code::LanguageAdapter;
use crate::scaffold::{materialize_system, BodyKind, CodeUnit};
use crate::stage::{ask, StageError};
pub use classify::{ErrorClass, Major, PatternTable};

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("the human prompt is empty")]
    EmptyPrompt,
    #[error("episode `{0}` is already resolved")]
    EpisodeResolved(String),
    #[error("response violates the code contract: {0}")]
    ContractViolation(String),
    #[error("signature drift: expected `{expected}`, got `{got}`")]
    SignatureDrift { expected: String, got: String },
    #[error("modules still have placeholders: {}", .0.join(", "))]
    NotIntegrated(Vec<String>),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A test case that did not pass, with what it was fed and what it did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedCase {
    pub name: String,
    pub module: String,
    /// Function under test; for a chain of calls, the last one.
    pub function: String,
    pub input: String,
    pub expected: Option<String>,
    pub actual: String,
    pub report: ExecutionReport,
}

impl FailedCase {
    pub fn from_outcome(module: &str, function: &str, outcome: &CaseOutcome) -> FailedCase {
        let actual = match &outcome.verdict {
            Verdict::Fail { actual, .. } => actual.clone(),
            _ => outcome.report.stdout.trim_end().to_string(),
        };
        FailedCase {
            name: outcome.case.name.clone(),
            module: module.to_string(),
            function: function.to_string(),
            input: outcome.case.stdin.clone(),
            expected: outcome.case.expected.clone(),
            actual,
            report: outcome.report.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Failure {
    Build { report: ExecutionReport },
    Case(FailedCase),
}

impl Failure {
    pub fn report(&self) -> &ExecutionReport {
        match self {
            Failure::Build { report } => report,
            Failure::Case(c) => &c.report,
        }
    }
}

pub fn classify(failure: &Failure, table: &PatternTable) -> ErrorClass {
    table.classify(failure.report())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeTag {
    Build,
    Unit,
    Integration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepairConfig {
    pub max_syntactic_attempts: u32,
    pub max_semantic_attempts: u32,
    /// Accept replies that replace a whole file rather than functions.
    pub allow_whole_file: bool,
}

impl Default for RepairConfig {
    fn default() -> RepairConfig {
        RepairConfig {
            max_syntactic_attempts: 5,
            max_semantic_attempts: 3,
            allow_whole_file: false,
        }
    }
}

impl RepairConfig {
    pub fn max_attempts(&self, class: ErrorClass) -> u32 {
        match class.major() {
            Major::Syntactic => self.max_syntactic_attempts,
            Major::Semantic => self.max_semantic_attempts,
        }
    }
}

/// Facts about the rest of the system that the repair prompts cite.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RepairContext {
    /// Signatures of every function in the system, from the frameworks.
    pub callee_signatures: Vec<String>,
}

impl RepairContext {
    pub fn from_units(units: &[CodeUnit]) -> RepairContext {
        RepairContext {
            callee_signatures: units
                .iter()
                .flat_map(|u| u.functions.iter().map(move |f| format!("{}: {}", u.module_name, f.signature.display())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    /// Index of the prompt in the episode's transcript.
    pub record: usize,
    pub origin: Origin,
    pub class: ErrorClass,
    pub patch_applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<String>,
    pub passed: bool,
    /// What the re-check saw; `None` when it passed or nothing was re-run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairEpisode {
    pub error_id: String,
    pub tag: EpisodeTag,
    pub module: String,
    pub class: ErrorClass,
    pub trigger: Failure,
    pub session_id: String,
    pub max_attempts: u32,
    pub attempts: Vec<Attempt>,
    pub human_steps: Vec<Attempt>,
    pub resolved: bool,
    /// Automatic attempts ran out; waiting for a person.
    pub escalated: bool,
    pub human_prompt_count: u32,
    pub automatic_prompt_count: u32,
    pub wall_clock_ms: u64,
}

impl RepairEpisode {
    fn current_failure(&self) -> &Failure {
        self.attempts
            .iter()
            .chain(&self.human_steps)
            .filter_map(|a| a.failure.as_ref())
            .next_back()
            .unwrap_or(&self.trigger)
    }
}

/// Runs the check that triggered an episode against a patched unit.
/// `None` means it passes now.
pub trait Recheck {
    fn recheck(&mut self, unit: &CodeUnit) -> Result<Option<Failure>, RepairError>;
}

impl<F: FnMut(&CodeUnit) -> Result<Option<Failure>, RepairError>> Recheck for F {
    fn recheck(&mut self, unit: &CodeUnit) -> Result<Option<Failure>, RepairError> {
        self(unit)
    }
}

/// A case to re-run after a patch, with the function it exercises.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckCase {
    pub module: String,
    pub function: String,
    pub case: HarnessCase,
}

/// Re-check in a scratch workspace: the patched unit together with the
/// rest of the system must build, then every case must pass.
pub struct SandboxRecheck<'a> {
    pub system: &'a [CodeUnit],
    pub adapter: &'a dyn LanguageAdapter,
    pub toolchain: &'a ToolchainConfig,
    pub cases: Vec<CheckCase>,
}

impl Recheck for SandboxRecheck<'_> {
    fn recheck(&mut self, unit: &CodeUnit) -> Result<Option<Failure>, RepairError> {
        let dir = tempfile::tempdir()?;
        let mut units: Vec<CodeUnit> = self
            .system
            .iter()
            .filter(|u| u.module_name != unit.module_name)
            .cloned()
            .collect();
        units.push(unit.clone());
        materialize_system(&units, self.adapter, dir.path())?;
        let build = sandbox::compile(dir.path(), self.toolchain)?;
        if !build.success() {
            return Ok(Some(Failure::Build { report: build }));
        }
        let harness: Vec<HarnessCase> = self.cases.iter().map(|c| c.case.clone()).collect();
        let outcomes = sandbox::run_tests(dir.path(), &harness, self.toolchain)?;
        Ok(self
            .cases
            .iter()
            .zip(&outcomes)
            .find(|(_, o)| !matches!(o.verdict, Verdict::Pass | Verdict::Deferred))
            .map(|(c, o)| Failure::Case(FailedCase::from_outcome(&c.module, &c.function, o))))
    }
}

fn location_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"([\w./{}\-]+\.\w+)"?(?:, line |:)(\d+)"#).expect("static regex"))
}

/// The function of `unit` where the diagnostics point last, which is the
/// innermost frame of a traceback.
pub fn blamed_function(unit: &CodeUnit, adapter: &dyn LanguageAdapter, failure: &Failure) -> Option<String> {
    let text = failure.report().diagnostics();
    let mut blamed = None;
    for cap in location_re().captures_iter(&text) {
        let (path, line) = (&cap[1], cap[2].parse::<usize>().unwrap_or(0));
        let Some(file) = unit.files.iter().find(|f| path.ends_with(&f.path)) else {
            continue;
        };
        let hit = adapter
            .functions(&file.text)
            .into_iter()
            .find(|f| f.span.start < line && line <= f.span.end)
            .map(|f| f.signature.name);
        if hit.is_some() {
            blamed = hit;
        }
    }
    blamed.or_else(|| match failure {
        Failure::Case(c) if c.module == unit.module_name && unit.function(&c.function).is_some() => Some(c.function.clone()),
        _ => None,
    })
}

fn diagnostics_block(report: &ExecutionReport) -> String {
    let mut text = report.diagnostics();
    if report.stdout_truncated || report.stderr_truncated {
        text.push_str("\n[output truncated: the middle of the log was dropped]");
    }
    if report.timed_out {
        text.push_str("\n[the process was killed after exceeding its time limit]");
    }
    if text.trim().is_empty() {
        text = format!("exit code {:?}, no output", report.exit_code);
    }
    text
}

/// Picks the template for `class` and fills it from the failure and the
/// code at fault. Returns the prompt and the function it targets, if one
/// could be identified; otherwise the whole file is shown.
pub fn build_repair_prompt(
    class: ErrorClass,
    unit: &CodeUnit,
    adapter: &dyn LanguageAdapter,
    failure: &Failure,
    ctx: &RepairContext,
    kit: &PromptKit,
) -> Result<(RenderedPrompt, Option<String>), RepairError> {
    let target = blamed_function(unit, adapter, failure);
    let (path, region) = match target.as_deref().and_then(|t| unit.function(t)) {
        Some(d) => (d.file.clone(), unit.function_source(adapter, &d.name).unwrap_or_default()),
        None => {
            let f = unit.files.first();
            (
                f.map(|f| f.path.clone()).unwrap_or_default(),
                f.map(|f| f.text.clone()).unwrap_or_default(),
            )
        }
    };
    let diagnostics = diagnostics_block(failure.report());
    let language = kit.language.clone();
    let prompt = match class.major() {
        Major::Syntactic => kit.render(
            ids::SYNTAX_REPAIR,
            &bindings([
                ("CODE_REGION", region),
                ("DIAGNOSTICS", diagnostics),
                ("FILE_PATH", path),
                ("LANGUAGE", language),
            ]),
        )?,
        Major::Semantic if class == ErrorClass::Invocation => kit.render(
            ids::INVOCATION_REPAIR,
            &bindings([
                ("CALLEE_SIGNATURES", ctx.callee_signatures.join("\n")),
                ("CODE_REGION", region),
                ("DIAGNOSTICS", diagnostics),
                ("LANGUAGE", language),
            ]),
        )?,
        Major::Semantic => {
            let (input, expected, actual) = match failure {
                Failure::Case(c) => (
                    c.input.clone(),
                    c.expected.clone().unwrap_or_else(|| "not stated exactly".into()),
                    c.actual.clone(),
                ),
                Failure::Build { report } => ("none".into(), "a successful run".into(), report.stdout.clone()),
            };
            let requirement = target
                .as_deref()
                .and_then(|t| unit.function(t))
                .and_then(|d| d.annotation.as_ref())
                .map(|a| a.requirement.to_string())
                .unwrap_or_else(|| crate::fact::UNKNOWN.into());
            kit.render(
                ids::LOGIC_REPAIR,
                &bindings([
                    ("ACTUAL_OUTPUT", actual),
                    ("CODE_REGION", region),
                    ("DIAGNOSTICS", diagnostics),
                    ("EXPECTED_OUTPUT", expected),
                    ("LANGUAGE", language),
                    ("REQUIREMENT", requirement),
                    ("TEST_INPUT", input),
                ]),
            )?
        }
    };
    Ok((prompt, target))
}

/// Applies code from a reply. Each function in the reply replaces the
/// declared function of the same name and must keep its signature. With
/// `whole_file`, the reply replaces the file of `target` outright, and
/// must still declare every function of that file unchanged.
pub fn apply_patch(
    unit: &mut CodeUnit,
    adapter: &dyn LanguageAdapter,
    code: &str,
    target: Option<&str>,
    whole_file: bool,
) -> Result<(), RepairError> {
    let found = adapter.functions(code);
    if whole_file {
        let path = target
            .and_then(|t| unit.function(t))
            .map(|d| d.file.clone())
            .or_else(|| unit.files.first().map(|f| f.path.clone()))
            .ok_or_else(|| RepairError::ContractViolation("the unit has no file".into()))?;
        for d in unit.functions.iter().filter(|d| d.file == path) {
            match found.iter().find(|f| f.signature.name == d.name) {
                Some(f) if f.signature.same_as(&d.signature) => {}
                other => {
                    return Err(RepairError::SignatureDrift {
                        expected: d.signature.display(),
                        got: other.map(|f| f.signature.display()).unwrap_or_else(|| "missing".into()),
                    })
                }
            }
        }
        let file = unit.files.iter_mut().find(|f| f.path == path).expect("path taken from the unit");
        file.text = format!("{}\n", code.trim_end());
        for d in unit.functions.iter_mut().filter(|d| d.file == path && d.body == BodyKind::Waived) {
            d.body = BodyKind::Implemented;
        }
        return Ok(());
    }
    if found.is_empty() {
        return Err(RepairError::ContractViolation("the code block defines no function".into()));
    }
    for f in &found {
        let Some(d) = unit.function(&f.signature.name) else {
            let expected = target
                .and_then(|t| unit.function(t))
                .map(|d| d.signature.display())
                .unwrap_or_else(|| "a declared function".into());
            return Err(RepairError::SignatureDrift {
                expected,
                got: f.signature.display(),
            });
        };
        if !f.signature.same_as(&d.signature) {
            return Err(RepairError::SignatureDrift {
                expected: d.signature.display(),
                got: f.signature.display(),
            });
        }
    }
    let lines: Vec<&str> = code.lines().collect();
    let imports = adapter.imports(code);
    for f in &found {
        let name = &f.signature.name;
        let file = unit.function(name).expect("checked above").file.clone();
        unit.replace_function(adapter, name, &lines[f.span.clone()].join("\n"));
        unit.hoist_imports(adapter, &file, &imports);
        unit.function_mut(name).expect("checked above").body = BodyKind::Implemented;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn step(
    episode: &mut RepairEpisode,
    unit: &mut CodeUnit,
    prompt: &RenderedPrompt,
    origin: Origin,
    class: ErrorClass,
    target: Option<&str>,
    session: &mut Session,
    kit: &PromptKit,
    adapter: &dyn LanguageAdapter,
    recheck: &mut dyn Recheck,
    cfg: &RepairConfig,
) -> Result<Attempt, RepairError> {
    let raw = session.send(prompt, origin)?;
    let record = session.transcript().records.len() - 1;
    let code = match origin {
        Origin::Automatic => kit.parse(&prompt.template_id, &raw).map_err(|v| v.0).and_then(|p| match p {
            ParsedPayload::Code(c) => Ok(c),
            _ => Err("expected a code block".to_string()),
        }),
        Origin::Human => extract_code_block(&raw, &kit.language).map_err(|v| v.0),
    };
    let mut candidate = unit.clone();
    let patched = code.and_then(|c| {
        apply_patch(&mut candidate, adapter, &c, target, cfg.allow_whole_file).map_err(|e| e.to_string())
    });
    let mut attempt = Attempt {
        record,
        origin,
        class,
        patch_applied: patched.is_ok(),
        rejection: patched.err(),
        passed: false,
        failure: None,
    };
    if attempt.patch_applied {
        *unit = candidate;
        match recheck.recheck(unit)? {
            None => attempt.passed = true,
            Some(f) => attempt.failure = Some(f),
        }
    }
    match origin {
        Origin::Automatic => episode.automatic_prompt_count += 1,
        Origin::Human => episode.human_prompt_count += 1,
    }
    Ok(attempt)
}

fn with_feedback(prompt: RenderedPrompt, rejection: Option<&str>) -> RenderedPrompt {
    match rejection {
        Some(r) => prompt.reask(r),
        None => prompt,
    }
}

/// Classify, prompt, patch and re-check until the trigger passes or the
/// class's attempt budget is spent, in which case the episode is
/// escalated to a person. Patches that fail to apply still use an attempt.
#[allow(clippy::too_many_arguments)]
pub fn repair_loop(
    unit: &mut CodeUnit,
    error_id: &str,
    tag: EpisodeTag,
    trigger: Failure,
    ctx: &RepairContext,
    session: &mut Session,
    kit: &PromptKit,
    adapter: &dyn LanguageAdapter,
    table: &PatternTable,
    recheck: &mut dyn Recheck,
    cfg: &RepairConfig,
    clock: &dyn Clock,
) -> Result<RepairEpisode, RepairError> {
    let started = clock.now_ms();
    let class = classify(&trigger, table);
    let mut episode = RepairEpisode {
        error_id: error_id.to_string(),
        tag,
        module: unit.module_name.clone(),
        class,
        trigger,
        session_id: session.id().to_string(),
        max_attempts: cfg.max_attempts(class),
        attempts: Vec::new(),
        human_steps: Vec::new(),
        resolved: false,
        escalated: false,
        human_prompt_count: 0,
        automatic_prompt_count: 0,
        wall_clock_ms: 0,
    };
    let mut current = match recheck.recheck(unit)? {
        None => {
            episode.resolved = true;
            episode.wall_clock_ms = clock.now_ms() - started;
            return Ok(episode);
        }
        Some(f) => f,
    };
    let mut rejection: Option<String> = None;
    while (episode.attempts.len() as u32) < episode.max_attempts {
        let now_class = classify(&current, table);
        let (prompt, target) = build_repair_prompt(now_class, unit, adapter, &current, ctx, kit)?;
        let prompt = with_feedback(prompt, rejection.as_deref());
        let attempt = step(
            &mut episode,
            unit,
            &prompt,
            Origin::Automatic,
            now_class,
            target.as_deref(),
            session,
            kit,
            adapter,
            recheck,
            cfg,
        )?;
        rejection = attempt.rejection.clone();
        if let Some(f) = &attempt.failure {
            current = f.clone();
        }
        let passed = attempt.passed;
        episode.attempts.push(attempt);
        if passed {
            episode.resolved = true;
            break;
        }
    }
    episode.escalated = !episode.resolved;
    episode.wall_clock_ms = clock.now_ms() - started;
    Ok(episode)
}

/// One human-written repair prompt. The code at fault is appended so the
/// reply can be applied like an automatic one.
#[allow(clippy::too_many_arguments)]
pub fn human_repair_step(
    episode: &mut RepairEpisode,
    unit: &mut CodeUnit,
    human_prompt: &str,
    session: &mut Session,
    kit: &PromptKit,
    adapter: &dyn LanguageAdapter,
    table: &PatternTable,
    recheck: &mut dyn Recheck,
    cfg: &RepairConfig,
    clock: &dyn Clock,
) -> Result<(), RepairError> {
    if episode.resolved {
        return Err(RepairError::EpisodeResolved(episode.error_id.clone()));
    }
    if human_prompt.trim().is_empty() {
        return Err(RepairError::EmptyPrompt);
    }
    let started = clock.now_ms();
    let failure = episode.current_failure().clone();
    let target = blamed_function(unit, adapter, &failure);
    let region = match &target {
        Some(t) => unit.function_source(adapter, t).unwrap_or_default(),
        None => unit.files.first().map(|f| f.text.clone()).unwrap_or_default(),
    };
    let lang = &kit.language;
    let text = format!(
        "{}\n\n[CODE]\n```{lang}\n{}\n```\n\nAnswer with one ```{lang} code block containing the corrected function.",
        human_prompt.trim_end(),
        region.trim_end()
    );
    let prompt = RenderedPrompt::handcrafted(&text);
    let attempt = step(
        episode,
        unit,
        &prompt,
        Origin::Human,
        classify(&failure, table),
        target.as_deref(),
        session,
        kit,
        adapter,
        recheck,
        cfg,
    )?;
    if attempt.passed {
        episode.resolved = true;
        episode.escalated = false;
    }
    episode.human_steps.push(attempt);
    episode.wall_clock_ms += clock.now_ms() - started;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Call {
    pub module: String,
    pub function: String,
    pub args: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationCase {
    pub name: String,
    pub calls: Vec<Call>,
    pub expected_output: Value,
}

impl IntegrationCase {
    pub fn harness_case(&self) -> HarnessCase {
        HarnessCase {
            name: self.name.clone(),
            stdin: serde_json::json!({ "calls": self.calls }).to_string(),
            expected: Some(self.expected_output.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationReport {
    pub cases: Vec<IntegrationCase>,
    pub outcomes: Vec<CaseOutcome>,
    /// One entry per case that did not pass, ready to open an episode.
    pub failures: Vec<Failure>,
}

impl IntegrationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn module_interfaces(units: &[CodeUnit]) -> String {
    let mut out = String::new();
    for u in units {
        out.push_str(&format!("module {}:\n", u.module_name));
        for f in &u.functions {
            out.push_str(&format!("  {}\n", f.signature.display()));
            if let Some(a) = &f.annotation {
                out.push_str(&format!("    requirement: {}\n", a.requirement));
            }
        }
    }
    out.trim_end().to_string()
}

fn check_case(case: &IntegrationCase, units: &[CodeUnit]) -> Result<(), String> {
    if case.calls.is_empty() {
        return Err(format!("case `{}` has no calls", case.name));
    }
    for call in &case.calls {
        let unit = units
            .iter()
            .find(|u| u.module_name == call.module)
            .ok_or_else(|| format!("case `{}` calls unknown module `{}`", case.name, call.module))?;
        let f = unit
            .function(&call.function)
            .ok_or_else(|| format!("case `{}` calls unknown function `{}.{}`", case.name, call.module, call.function))?;
        if call.args.len() != f.signature.params.len() {
            return Err(format!(
                "case `{}` passes {} arguments to `{}`, which takes {}",
                case.name,
                call.args.len(),
                call.function,
                f.signature.params.len()
            ));
        }
    }
    Ok(())
}

/// Asks for cross-module cases and runs them over the whole system in
/// `workspace`, which is overwritten with the current units.
#[allow(clippy::too_many_arguments)]
pub fn integration_test(
    units: &[CodeUnit],
    metadata: &SystemMetadata,
    workspace: &std::path::Path,
    session: &mut Session,
    kit: &PromptKit,
    adapter: &dyn LanguageAdapter,
    toolchain: &ToolchainConfig,
    retries: u32,
) -> Result<IntegrationReport, RepairError> {
    let unbuilt: Vec<String> = units
        .iter()
        .filter(|u| u.placeholders().next().is_some())
        .map(|u| u.module_name.clone())
        .collect();
    if !unbuilt.is_empty() {
        return Err(RepairError::NotIntegrated(unbuilt));
    }
    let prompt = kit.render(
        ids::INTEGRATION_TEST,
        &bindings([
            ("MODULE_INTERFACES", module_interfaces(units)),
            ("SYSTEM_METADATA", metadata.to_pretty_json()),
        ]),
    )?;
    let cases: Vec<IntegrationCase> = ask(session, kit, &prompt, retries, "integration", |payload, _| {
        let ParsedPayload::Json(v) = payload else {
            return Err("expected JSON".into());
        };
        let cases: Vec<IntegrationCase> = serde_json::from_value(v["cases"].clone()).map_err(|e| e.to_string())?;
        for c in &cases {
            check_case(c, units)?;
        }
        Ok(cases)
    })?;
    run_integration_cases(units, cases, workspace, adapter, toolchain)
}

/// Runs already accepted cases; used again to re-check after a repair.
pub fn run_integration_cases(
    units: &[CodeUnit],
    cases: Vec<IntegrationCase>,
    workspace: &std::path::Path,
    adapter: &dyn LanguageAdapter,
    toolchain: &ToolchainConfig,
) -> Result<IntegrationReport, RepairError> {
    materialize_system(units, adapter, workspace)?;
    let harness: Vec<HarnessCase> = cases.iter().map(IntegrationCase::harness_case).collect();
    let outcomes = sandbox::run_tests(workspace, &harness, toolchain)?;
    let failures = cases
        .iter()
        .zip(&outcomes)
        .filter(|(_, o)| !matches!(o.verdict, Verdict::Pass | Verdict::Deferred))
        .map(|(c, o)| {
            let last = c.calls.last().expect("checked non-empty");
            Failure::Case(FailedCase::from_outcome(&last.module, &last.function, o))
        })
        .collect();
    Ok(IntegrationReport {
        cases,
        outcomes,
        failures,
    })
}

/// The module an integration failure should be repaired in: the one the
/// traceback blames last, else the module of the final call.
pub fn failing_module(failure: &Failure, units: &[CodeUnit]) -> Option<String> {
    let text = failure.report().diagnostics();
    let mut blamed = None;
    for cap in location_re().captures_iter(&text) {
        if let Some(u) = units.iter().find(|u| u.files.iter().any(|f| cap[1].ends_with(&f.path))) {
            blamed = Some(u.module_name.clone());
        }
    }
    blamed.or_else(|| match failure {
        Failure::Case(c) => Some(c.module.clone()),
        Failure::Build { .. } => None,
    })
}

#[cfg(test)]
mod tests;
