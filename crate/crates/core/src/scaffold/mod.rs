//! Module-level code: SCoT, the framework with placeholder bodies and the
//! per-function mapping back to the paper.

pub mod code;
pub mod scot;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::{find_verbatim, normalize_whitespace, PaperBundle, SectionKind};
use crate::extraction::{ModuleSpec, NamedItem};
use crate::fact::Fact;
use crate::gateway::Session;
use crate::prompting::{bindings, ids, ExemplarKind, ParsedPayload, PromptKit};
use crate::sandbox::{self, ExecutionReport, SandboxError, ToolchainConfig};
use crate::stage::{ask, StageError};
use code::{LanguageAdapter, LocatedFunction, Signature};
use scot::{validate_scot, Scot};

#[derive(Debug, Error)]
pub enum ScaffoldError {
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("code unit rejected: {0}")]
    RejectedUnit(String),
    #[error("no language adapter for `{0}`")]
    NoAdapter(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Requirement and paper excerpt attached to one function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub requirement: Fact<String>,
    pub original_text: Fact<String>,
    /// The excerpt was found verbatim in the paper.
    pub verified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BodyKind {
    Placeholder,
    Implemented,
    Waived,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionDecl {
    pub name: String,
    pub file: String,
    pub signature: Signature,
    pub body: BodyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Annotation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeUnit {
    pub module_name: String,
    pub language: String,
    pub files: Vec<SourceFile>,
    pub functions: Vec<FunctionDecl>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

fn join_lines(lines: &[String]) -> String {
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

impl CodeUnit {
    pub fn function(&self, name: &str) -> Option<&FunctionDecl> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut FunctionDecl> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn file(&self, path: &str) -> Option<&SourceFile> {
        self.files.iter().find(|f| f.path == path)
    }

    fn file_mut(&mut self, path: &str) -> Option<&mut SourceFile> {
        self.files.iter_mut().find(|f| f.path == path)
    }

    fn locate(&self, adapter: &dyn LanguageAdapter, name: &str) -> Option<(String, LocatedFunction)> {
        let decl = self.function(name)?;
        let file = self.file(&decl.file)?;
        let located = adapter.functions(&file.text).into_iter().find(|f| f.signature.name == name)?;
        Some((decl.file.clone(), located))
    }

    /// Definition and body of one function as it stands in its file.
    pub fn function_source(&self, adapter: &dyn LanguageAdapter, name: &str) -> Option<String> {
        let (path, located) = self.locate(adapter, name)?;
        let lines: Vec<String> = self.file(&path)?.text.lines().map(str::to_string).collect();
        Some(lines[located.span.clone()].join("\n"))
    }

    /// Replaces the definition and body of `name`, keeping its comments.
    pub fn replace_function(&mut self, adapter: &dyn LanguageAdapter, name: &str, new_source: &str) -> bool {
        let Some((path, located)) = self.locate(adapter, name) else {
            return false;
        };
        let file = self.file_mut(&path).expect("located file exists");
        let mut lines: Vec<String> = file.text.lines().map(str::to_string).collect();
        let replacement: Vec<String> = new_source.trim_end().lines().map(str::to_string).collect();
        lines.splice(located.span, replacement);
        file.text = join_lines(&lines);
        true
    }

    /// Writes the annotation comment block directly above `name`.
    pub fn set_annotation(&mut self, adapter: &dyn LanguageAdapter, name: &str, annotation: Annotation) -> bool {
        let Some((path, located)) = self.locate(adapter, name) else {
            return false;
        };
        let file = self.file_mut(&path).expect("located file exists");
        let lines: Vec<String> = file.text.lines().map(str::to_string).collect();
        let preamble = &lines[located.preamble.clone()];
        let (comments, decorators): (Vec<&String>, Vec<&String>) =
            preamble.iter().filter(|l| !adapter.is_annotation_line(l)).partition(|l| l.starts_with('#'));
        let mut block: Vec<String> = comments.into_iter().cloned().collect();
        block.extend(adapter.annotation_lines(&annotation));
        block.extend(decorators.into_iter().cloned());
        let mut out = lines[..located.preamble.start].to_vec();
        out.extend(block);
        out.extend_from_slice(&lines[located.preamble.end..]);
        file.text = join_lines(&out);
        self.function_mut(name).expect("declared").annotation = Some(annotation);
        true
    }

    /// Adds import lines missing from `path`, after its existing imports.
    pub fn hoist_imports(&mut self, adapter: &dyn LanguageAdapter, path: &str, imports: &[String]) {
        let Some(file) = self.file_mut(path) else { return };
        let present = adapter.imports(&file.text);
        let missing: Vec<String> = imports.iter().filter(|i| !present.contains(i)).cloned().collect();
        if missing.is_empty() {
            return;
        }
        let mut lines: Vec<String> = file.text.lines().map(str::to_string).collect();
        let at = lines
            .iter()
            .rposition(|l| present.iter().any(|p| p == l.trim_end()))
            .map_or(0, |i| i + 1);
        lines.splice(at..at, missing);
        file.text = join_lines(&lines);
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &FunctionDecl> {
        self.functions.iter().filter(|f| f.body == BodyKind::Placeholder)
    }

    /// Writes every file below `root`.
    pub fn materialize(&self, root: &Path) -> std::io::Result<()> {
        for f in &self.files {
            let path = root.join(&f.path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, &f.text)?;
        }
        Ok(())
    }
}

/// Writes the units and the test adapter files into one workspace.
pub fn materialize_system(units: &[CodeUnit], adapter: &dyn LanguageAdapter, root: &Path) -> std::io::Result<()> {
    for u in units {
        u.materialize(root)?;
    }
    for (path, text) in adapter.harness_files() {
        std::fs::write(root.join(path), text)?;
    }
    Ok(())
}

/// Builds a unit from framework code, replacing every body with the
/// adapter's placeholder. Fails when there is no function or a signature
/// is not fully typed.
pub fn framework_unit(module: &str, source: &str, adapter: &dyn LanguageAdapter) -> Result<CodeUnit, String> {
    let located = adapter.functions(source);
    if located.is_empty() {
        return Err("the code defines no function".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for f in &located {
        let sig = &f.signature;
        if !seen.insert(sig.name.clone()) {
            return Err(format!("function `{}` is defined twice", sig.name));
        }
        if let Some(p) = sig.params.iter().find(|p| p.ty.is_none()) {
            return Err(format!("parameter `{}` of `{}` has no type annotation", p.name, sig.name));
        }
        if sig.ret.is_none() {
            return Err(format!("function `{}` has no return type annotation", sig.name));
        }
    }
    let lines: Vec<String> = source.lines().map(str::to_string).collect();
    let mut out = Vec::new();
    let mut cursor = 0;
    for f in &located {
        out.extend_from_slice(&lines[cursor..f.body_start]);
        out.extend(adapter.placeholder_body(&f.signature).lines().map(str::to_string));
        cursor = f.span.end;
    }
    out.extend_from_slice(&lines[cursor..]);
    while out.last().is_some_and(|l| l.trim().is_empty()) {
        out.pop();
    }
    let path = adapter.module_file(module);
    Ok(CodeUnit {
        module_name: module.to_string(),
        language: adapter.language().to_string(),
        functions: located
            .into_iter()
            .map(|f| FunctionDecl {
                name: f.signature.name.clone(),
                file: path.clone(),
                signature: f.signature,
                body: BodyKind::Placeholder,
                annotation: None,
                flags: Vec::new(),
            })
            .collect(),
        files: vec![SourceFile {
            path,
            text: join_lines(&out),
        }],
        flags: Vec::new(),
    })
}

/// Builds the unit in a scratch workspace. The report says whether it
/// compiled.
pub fn compile_check(
    unit: &CodeUnit,
    adapter: &dyn LanguageAdapter,
    toolchain: &ToolchainConfig,
) -> Result<ExecutionReport, ScaffoldError> {
    if unit.files.is_empty() || unit.functions.is_empty() {
        return Err(ScaffoldError::RejectedUnit(format!(
            "module `{}` has no code to build",
            unit.module_name
        )));
    }
    let dir = tempfile::tempdir()?;
    materialize_system(std::slice::from_ref(unit), adapter, dir.path())?;
    Ok(sandbox::compile(dir.path(), toolchain)?)
}

fn io_names(items: &Fact<Vec<NamedItem>>) -> Vec<String> {
    items
        .known()
        .map(|v| v.iter().map(|i| i.name.to_lowercase()).collect())
        .unwrap_or_default()
}

fn name_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.len() > 2)
        .map(str::to_string)
        .collect()
}

/// Functions whose name and parameters share nothing with the module's
/// declared inputs and outputs.
fn untied_functions(unit: &CodeUnit, spec: &ModuleSpec) -> Vec<String> {
    let mut declared: Vec<String> = io_names(&spec.inputs);
    declared.extend(io_names(&spec.outputs));
    if declared.is_empty() {
        return Vec::new();
    }
    let declared_tokens: Vec<String> = declared.iter().flat_map(|d| name_tokens(d)).collect();
    unit.functions
        .iter()
        .filter(|f| {
            let mut words = name_tokens(&f.name);
            for p in &f.signature.params {
                words.extend(name_tokens(&p.name));
            }
            !words.iter().any(|w| {
                declared_tokens
                    .iter()
                    .any(|d| d.starts_with(w.as_str()) || w.starts_with(d.as_str()))
            })
        })
        .map(|f| f.name.clone())
        .collect()
}

pub fn generate_scot(
    spec: &ModuleSpec,
    session: &mut Session,
    kit: &PromptKit,
    retries: u32,
) -> Result<Scot, ScaffoldError> {
    let prompt = kit
        .render(
            ids::SCOT_GEN,
            &bindings([
                ("EXEMPLARS", kit.exemplar_block(ExemplarKind::Scot).map_err(StageError::from)?),
                ("REQUIREMENT", spec.requirement()),
            ]),
        )
        .map_err(StageError::from)?;
    Ok(ask(session, kit, &prompt, retries, "scot", |payload, _| match payload {
        ParsedPayload::Scot(s) => {
            let report = validate_scot(&s);
            if report.has_errors() {
                Err(report.summary())
            } else {
                Ok(s)
            }
        }
        _ => Err("expected a SCoT".into()),
    })?)
}

fn allowed_dependencies(toolchain: &ToolchainConfig) -> String {
    if toolchain.allowed_dependencies.is_empty() {
        "none, use the standard library only".into()
    } else {
        toolchain.allowed_dependencies.join(", ")
    }
}

/// Asks for framework code following `scot`. The accepted unit has only
/// placeholder bodies and has compiled.
pub fn generate_framework(
    spec: &ModuleSpec,
    scot: &Scot,
    session: &mut Session,
    kit: &PromptKit,
    adapter: &dyn LanguageAdapter,
    toolchain: &ToolchainConfig,
    retries: u32,
) -> Result<CodeUnit, ScaffoldError> {
    let mut vars: Vec<(String, Option<String>)> =
        scot.io.inputs.iter().map(|p| (p.name.clone(), p.ty.clone())).collect();
    let output = scot.io.output.as_ref().and_then(|o| o.ty.clone());
    if let Some(o) = &scot.io.output {
        vars.push((o.name.clone(), o.ty.clone()));
    }
    let prompt = kit
        .render(
            ids::FRAMEWORK_GEN,
            &bindings([
                ("ALLOWED_DEPENDENCIES", allowed_dependencies(toolchain)),
                ("EXEMPLARS", kit.exemplar_block(ExemplarKind::Scot).map_err(StageError::from)?),
                ("LANGUAGE", kit.language.clone()),
                ("PREVENTIVE", kit.preamble.render(&vars, output.as_deref())),
                ("REQUIREMENT", spec.requirement()),
                ("SCOT", scot.to_string()),
            ]),
        )
        .map_err(StageError::from)?;
    let mut fatal = None;
    let accepted = ask(session, kit, &prompt, retries, "framework", |payload, _| {
        let ParsedPayload::Code(source) = payload else {
            return Err("expected a code block".into());
        };
        let unit = framework_unit(&spec.name, &source, adapter)?;
        match compile_check(&unit, adapter, toolchain) {
            Ok(report) if report.success() => Ok(Some(unit)),
            Ok(report) => Err(format!("the framework does not compile:\n{}", report.diagnostics())),
            Err(e) => {
                fatal = Some(e);
                Ok(None)
            }
        }
    })?;
    let Some(mut unit) = accepted else {
        return Err(fatal.expect("set when no unit is returned"));
    };
    for name in untied_functions(&unit, spec) {
        let note = format!("function `{name}` is not tied to any declared input or output of the module");
        unit.function_mut(&name).expect("listed").flags.push(note.clone());
        unit.flags.push(note);
    }
    Ok(unit)
}

fn paper_content(bundle: &PaperBundle, spec: &ModuleSpec) -> String {
    let refs: Vec<String> = spec
        .paper_refs
        .known()
        .map(|r| r.iter().map(|s| normalize_whitespace(s).to_lowercase()).collect())
        .unwrap_or_default();
    let by_ref: Vec<_> = bundle
        .sections
        .iter()
        .filter(|s| {
            let heading = s.heading.to_lowercase();
            refs.iter().any(|r| !r.is_empty() && (heading.contains(r.as_str()) || r.contains(&heading)))
        })
        .collect();
    let chosen = if by_ref.is_empty() {
        bundle
            .sections
            .iter()
            .filter(|s| matches!(s.kind, SectionKind::SystemArchitecture | SectionKind::Design))
            .collect()
    } else {
        by_ref
    };
    chosen
        .iter()
        .map(|s| format!("## {}\n\n{}", s.heading, s.paragraphs.join("\n\n")))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Asks, per function, for its requirement and the paper text it
/// implements, and writes both into the code as annotations. Quotes not
/// found verbatim are kept but flagged for review.
pub fn map_paper_content(
    unit: &mut CodeUnit,
    spec: &ModuleSpec,
    bundle: &PaperBundle,
    session: &mut Session,
    kit: &PromptKit,
    adapter: &dyn LanguageAdapter,
    retries: u32,
) -> Result<(), ScaffoldError> {
    let content = paper_content(bundle, spec);
    let names: Vec<String> = unit.functions.iter().map(|f| f.name.clone()).collect();
    for name in names {
        let signature = unit.function(&name).expect("listed").signature.display();
        let prompt = kit
            .render(
                ids::CONTENT_MAP,
                &bindings([
                    ("FUNCTION_SIGNATURE", signature),
                    ("MODULE_DESCRIPTION", spec.requirement()),
                    ("MODULE_NAME", spec.name.clone()),
                    ("PAPER_CONTENT", content.clone()),
                ]),
            )
            .map_err(StageError::from)?;
        let (requirement, original_text) = ask(session, kit, &prompt, retries, "content-map", |payload, _| {
            let ParsedPayload::Json(v) = payload else {
                return Err("expected JSON".into());
            };
            let field = |k: &str| Fact::from_text(v[k].as_str().unwrap_or_default());
            Ok((field("requirement"), field("original_text")))
        })?;
        let verified = match &original_text {
            Fact::Known(q) => find_verbatim(bundle, q).ok().flatten().is_some(),
            Fact::Unknown => false,
        };
        let decl = unit.function_mut(&name).expect("listed");
        if requirement.is_unknown() {
            decl.flags.push("requirement is UNKNOWN".into());
        }
        if !verified {
            decl.flags.push("original text not found verbatim in the paper, needs review".into());
        }
        unit.set_annotation(
            adapter,
            &name,
            Annotation {
                requirement,
                original_text,
                verified,
            },
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests;
