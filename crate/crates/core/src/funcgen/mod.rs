//! Function-level generation: a SeCoT per placeholder, the body it
//! guides, unit tests and the integration of the filled module.

pub mod secot;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::extraction::{ModuleSpec, NamedItem};
use crate::fact::Fact;
use crate::gateway::Session;
use crate::prompting::{bindings, ids, ExemplarKind, ParsedPayload, PromptKit};
use crate::report::ValidationReport;
use crate::sandbox::{ExecutionReport, HarnessCase, ToolchainConfig};
use crate::scaffold::code::{LanguageAdapter, Signature};
use crate::scaffold::{compile_check, BodyKind, CodeUnit, FunctionDecl, ScaffoldError};
use crate::stage::{ask, StageError};
use secot::{validate_secot, Secot};

#[derive(Debug, Error)]
pub enum FuncgenError {
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("signature drift: expected `{expected}`, got `{got}`")]
    SignatureDrift { expected: String, got: String },
    #[error("function `{0}` is not declared in the unit")]
    UnknownFunction(String),
    #[error("placeholders without an implementation or waiver: {}", .0.join(", "))]
    UnfilledPlaceholders(Vec<String>),
    #[error("the integrated module does not build")]
    BuildFailed(Box<ExecutionReport>),
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestKind {
    Generated,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    /// Exact return value.
    Value(Value),
    /// Prose judged only by the repair prompt, never by the harness.
    Predicate(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub name: String,
    pub module: String,
    pub function: String,
    pub input: Vec<Value>,
    pub expected: Expectation,
    pub kind: TestKind,
}

impl TestCase {
    pub fn arity_matches(&self, sig: &Signature) -> bool {
        self.input.len() == sig.params.len()
    }

    pub fn harness_case(&self) -> HarnessCase {
        HarnessCase {
            name: self.name.clone(),
            stdin: serde_json::json!({"module": self.module, "function": self.function, "args": self.input}).to_string(),
            expected: match &self.expected {
                Expectation::Value(v) => Some(v.to_string()),
                Expectation::Predicate(_) => None,
            },
        }
    }
}

/// Accepted cases and the names of cases dropped for the wrong arity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedTests {
    pub cases: Vec<TestCase>,
    pub rejected: Vec<String>,
}

fn decl<'a>(unit: &'a CodeUnit, name: &str) -> Result<&'a FunctionDecl, FuncgenError> {
    unit.function(name).ok_or_else(|| FuncgenError::UnknownFunction(name.to_string()))
}

fn requirement(d: &FunctionDecl) -> String {
    d.annotation
        .as_ref()
        .map(|a| a.requirement.to_string())
        .unwrap_or_else(|| Fact::<String>::Unknown.to_string())
}

fn preventive(kit: &PromptKit, sig: &Signature) -> String {
    let vars: Vec<(String, Option<String>)> = sig.params.iter().map(|p| (p.name.clone(), p.ty.clone())).collect();
    kit.preamble.render(&vars, sig.ret.as_deref())
}

pub fn generate_secot(
    unit: &CodeUnit,
    function: &str,
    session: &mut Session,
    kit: &PromptKit,
    retries: u32,
) -> Result<Secot, FuncgenError> {
    let d = decl(unit, function)?;
    let prompt = kit
        .render(
            ids::SECOT_GEN,
            &bindings([
                ("EXEMPLARS", kit.exemplar_block(ExemplarKind::Secot).map_err(StageError::from)?),
                ("FUNCTION_SIGNATURE", d.signature.display()),
                ("PREVENTIVE", preventive(kit, &d.signature)),
                ("REQUIREMENT", requirement(d)),
            ]),
        )
        .map_err(StageError::from)?;
    Ok(ask(session, kit, &prompt, retries, "secot", |payload, _| match payload {
        ParsedPayload::Secot(s) => {
            let report = validate_secot(&s);
            if report.has_errors() {
                Err(report.summary())
            } else {
                Ok(s)
            }
        }
        _ => Err("expected a SeCoT".into()),
    })?)
}

/// Asks for the body of `function` and puts it in place of the
/// placeholder. Returns flags about extra functions in the reply, which
/// are dropped.
pub fn generate_function(
    unit: &mut CodeUnit,
    function: &str,
    secot: &Secot,
    session: &mut Session,
    kit: &PromptKit,
    adapter: &dyn LanguageAdapter,
    retries: u32,
) -> Result<Vec<String>, FuncgenError> {
    let d = decl(unit, function)?.clone();
    let prompt = kit
        .render(
            ids::FUNCTION_GEN,
            &bindings([
                ("EXEMPLARS", kit.exemplar_block(ExemplarKind::Secot).map_err(StageError::from)?),
                ("FUNCTION_SIGNATURE", d.signature.display()),
                ("LANGUAGE", kit.language.clone()),
                ("PREVENTIVE", preventive(kit, &d.signature)),
                ("REQUIREMENT", requirement(&d)),
                ("SECOT", secot.to_string()),
            ]),
        )
        .map_err(StageError::from)?;
    let mut drift = None;
    let accepted = ask(session, kit, &prompt, retries, "funcgen", |payload, _| {
        let ParsedPayload::Code(source) = payload else {
            return Err("expected a code block".into());
        };
        let found = adapter.functions(&source);
        let target = found.iter().find(|f| f.signature.name == function);
        let target = match (target, found.as_slice()) {
            (Some(t), _) => t,
            (None, [only]) => {
                drift = Some(only.signature.display());
                return Ok(None);
            }
            (None, []) => return Err("the code block defines no function".into()),
            (None, _) => return Err(format!("none of the functions in the reply is `{function}`")),
        };
        if !target.signature.same_as(&d.signature) {
            drift = Some(target.signature.display());
            return Ok(None);
        }
        let lines: Vec<&str> = source.lines().collect();
        let body = lines[target.span.clone()].join("\n");
        let extras: Vec<String> = found
            .iter()
            .filter(|f| f.signature.name != function)
            .map(|f| format!("reply for `{function}` also defined `{}`, which was dropped", f.signature.name))
            .collect();
        Ok(Some((body, adapter.imports(&source), extras)))
    })?;
    let Some((body, imports, extras)) = accepted else {
        return Err(FuncgenError::SignatureDrift {
            expected: d.signature.display(),
            got: drift.unwrap_or_default(),
        });
    };
    unit.replace_function(adapter, function, &body);
    unit.hoist_imports(adapter, &d.file, &imports);
    let decl = unit.function_mut(function).expect("declared");
    decl.body = BodyKind::Implemented;
    decl.flags.extend(extras.iter().cloned());
    Ok(extras)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Collection,
    Mapping,
    Number,
    Text,
    Boolean,
}

const SHAPE_WORDS: [(Shape, &[&str]); 5] = [
    (Shape::Mapping, &["dict", "map", "mapping", "table", "lookup"]),
    (Shape::Collection, &["list", "array", "set", "sequence", "tuple", "vector", "iterable", "collection", "series"]),
    (Shape::Boolean, &["bool", "boolean", "flag"]),
    (Shape::Number, &["int", "integer", "float", "double", "number", "numeric", "scalar", "real", "ratio", "count"]),
    (Shape::Text, &["str", "string", "text", "name", "label"]),
];

/// Coarse shape of a type or a type hint; the first word that names one
/// wins, so `list of float` is a collection.
fn shape(text: &str) -> Option<Shape> {
    let lower = text.to_lowercase();
    for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        for (shape, words) in SHAPE_WORDS {
            if words.contains(&word) {
                return Some(shape);
            }
        }
    }
    None
}

fn matching_item<'a>(items: &'a [NamedItem], name: &str) -> Option<&'a NamedItem> {
    let norm = |s: &str| s.to_lowercase().replace(['_', ' ', '-'], "");
    let n = norm(name);
    items.iter().find(|i| {
        let m = norm(&i.name);
        m == n || m.trim_end_matches('s') == n.trim_end_matches('s')
    })
}

/// Advisory findings where a parameter or return type contradicts the
/// module's I/O hints with the same name.
pub fn check_io_compliance(d: &FunctionDecl, spec: &ModuleSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut compare = |what: &str, name: &str, ty: Option<&str>, items: &Fact<Vec<NamedItem>>, side: &str| {
        let Fact::Known(items) = items else {
            report.warning(
                "io-unknown",
                format!("module {side} are UNKNOWN, `{name}` of `{}` is not checked", d.name),
            );
            return;
        };
        let (Some(item), Some(ty)) = (matching_item(items, name), ty) else {
            return;
        };
        let Some(hint) = &item.ty else { return };
        if let (Some(want), Some(got)) = (shape(hint), shape(ty)) {
            if want != got {
                report.warning(
                    "io-mismatch",
                    format!("{what} `{name}` of `{}` is `{ty}` but the module {side} describe it as \"{hint}\"", d.name),
                );
            }
        }
    };
    for p in &d.signature.params {
        compare("parameter", &p.name, p.ty.as_deref(), &spec.inputs, "inputs");
    }
    if let Fact::Known(outputs) = &spec.outputs {
        if let Some(ret) = &d.signature.ret {
            if outputs.len() == 1 || matching_item(outputs, &d.name).is_some() {
                let out = matching_item(outputs, &d.name).unwrap_or(&outputs[0]).name.clone();
                compare("return value", &out, Some(ret), &spec.outputs, "outputs");
            }
        }
    } else {
        compare("return value", &d.name, d.signature.ret.as_deref(), &spec.outputs, "outputs");
    }
    report
}

/// Asks for unit tests of `function`. Cases whose argument count differs
/// from the signature are dropped; at least one must remain.
pub fn generate_tests(
    unit: &CodeUnit,
    function: &str,
    session: &mut Session,
    kit: &PromptKit,
    adapter: &dyn LanguageAdapter,
    retries: u32,
) -> Result<GeneratedTests, FuncgenError> {
    let d = decl(unit, function)?;
    let prompt = kit
        .render(
            ids::TEST_GEN,
            &bindings([
                ("FUNCTION_CODE", unit.function_source(adapter, function).unwrap_or_default()),
                ("FUNCTION_SIGNATURE", d.signature.display()),
                ("REQUIREMENT", requirement(d)),
            ]),
        )
        .map_err(StageError::from)?;
    Ok(ask(session, kit, &prompt, retries, "tests", |payload, _| {
        let ParsedPayload::Json(v) = payload else {
            return Err("expected JSON".into());
        };
        let mut out = GeneratedTests {
            cases: Vec::new(),
            rejected: Vec::new(),
        };
        for c in v["cases"].as_array().into_iter().flatten() {
            let name = c["name"].as_str().unwrap_or_default().to_string();
            let expected = match (c.get("expected_output"), c.get("predicate")) {
                (Some(v), _) => Expectation::Value(v.clone()),
                (None, Some(p)) => Expectation::Predicate(p.as_str().unwrap_or_default().to_string()),
                (None, None) => continue,
            };
            let case = TestCase {
                name,
                module: unit.module_name.clone(),
                function: function.to_string(),
                input: c["input"].as_array().cloned().unwrap_or_default(),
                expected,
                kind: TestKind::Generated,
            };
            if case.arity_matches(&d.signature) {
                out.cases.push(case);
            } else {
                out.rejected.push(case.name);
            }
        }
        if out.cases.is_empty() {
            Err(format!(
                "no usable test case; each input must list {} arguments",
                d.signature.params.len()
            ))
        } else {
            Ok(out)
        }
    })?)
}

/// Closes the unit: every placeholder must be implemented or waived, no
/// fill marker may remain and the unit must build.
pub fn integrate(
    mut unit: CodeUnit,
    waivers: &BTreeSet<String>,
    adapter: &dyn LanguageAdapter,
    toolchain: &ToolchainConfig,
) -> Result<CodeUnit, FuncgenError> {
    let unfilled: Vec<String> = unit
        .placeholders()
        .filter(|d| !waivers.contains(&d.name))
        .map(|d| d.name.clone())
        .collect();
    if !unfilled.is_empty() {
        return Err(FuncgenError::UnfilledPlaceholders(unfilled));
    }
    let waived: Vec<(String, String)> = unit
        .placeholders()
        .map(|d| (d.name.clone(), d.file.clone()))
        .collect();
    for (name, path) in waived {
        let file = unit.files.iter_mut().find(|f| f.path == path).expect("declared file");
        file.text = file.text.replace(&adapter.fill_marker(&name), &adapter.waiver_marker(&name));
        unit.function_mut(&name).expect("declared").body = BodyKind::Waived;
    }
    let marker_head = adapter.fill_marker("");
    let left: Vec<String> = unit
        .files
        .iter()
        .filter(|f| f.text.contains(&marker_head))
        .map(|f| f.path.clone())
        .collect();
    if !left.is_empty() {
        return Err(FuncgenError::UnfilledPlaceholders(left));
    }
    let report = compile_check(&unit, adapter, toolchain)?;
    if !report.success() {
        return Err(FuncgenError::BuildFailed(Box::new(report)));
    }
    Ok(unit)
}

#[cfg(test)]
mod tests;
