//! System metadata and module division, extracted from the paper and
//! checked before anything is generated from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::document::{select_excerpt, DocumentError, ElementPayload, ExcerptSelector, PaperBundle, SectionKind};
use crate::fact::{Fact, UNKNOWN};
use crate::gateway::Session;
use crate::prompting::{bindings, ids, AttachmentRef, ParsedPayload, PromptKit};
use crate::report::ValidationReport;
use crate::stage::{ask, StageError};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error("module dependencies form a cycle: {}", .0.join(" -> "))]
    CyclicDependencies(Vec<String>),
    #[error("refinement rejected: {0}")]
    RejectedRefinement(String),
    #[error("division has validation errors:\n{}", .0.summary())]
    ValidationErrorsPresent(ValidationReport),
}

/// A named input or output with optional type and description hints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NamedItem {
    pub name: String,
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    pub ty: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl NamedItem {
    pub fn new(name: &str, ty: &str) -> NamedItem {
        NamedItem {
            name: name.into(),
            ty: Some(ty.into()),
            description: None,
        }
    }

    /// Type hint with the description appended, for heuristic matching.
    pub fn hint(&self) -> String {
        [self.ty.as_deref(), self.description.as_deref()].into_iter().flatten().collect::<Vec<_>>().join(" ")
    }
}

impl<'de> Deserialize<'de> for NamedItem {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Bare(String),
            Full {
                name: String,
                #[serde(rename = "type", default)]
                ty: Option<String>,
                #[serde(default)]
                description: Option<String>,
            },
        }
        let keep = |s: Option<String>| s.filter(|s| !s.trim().is_empty() && s.trim() != UNKNOWN);
        Ok(match Repr::deserialize(deserializer)? {
            Repr::Bare(name) => NamedItem {
                name,
                ty: None,
                description: None,
            },
            Repr::Full { name, ty, description } => NamedItem {
                name,
                ty: keep(ty),
                description: keep(description),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SystemMetadata {
    pub sub_domain: Fact<String>,
    pub system_name: Fact<String>,
    pub deployment_type: Fact<String>,
    pub problem_statement: Fact<String>,
    pub system_inputs: Fact<Vec<NamedItem>>,
    pub system_outputs: Fact<Vec<NamedItem>>,
    pub architecture_features: Fact<Vec<String>>,
}

impl SystemMetadata {
    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub name: String,
    #[serde(default)]
    pub brief_description: Fact<String>,
    #[serde(default)]
    pub detailed_description: Fact<String>,
    #[serde(default)]
    pub inputs: Fact<Vec<NamedItem>>,
    #[serde(default)]
    pub outputs: Fact<Vec<NamedItem>>,
    #[serde(default)]
    pub paper_refs: Fact<Vec<String>>,
    #[serde(default)]
    pub depends_on: Vec<String>,
}

impl ModuleSpec {
    /// Requirement text handed to the generation prompts.
    pub fn requirement(&self) -> String {
        let items = |f: &Fact<Vec<NamedItem>>| match f {
            Fact::Known(v) if !v.is_empty() => v
                .iter()
                .map(|i| match &i.ty {
                    Some(t) => format!("{}: {t}", i.name),
                    None => i.name.clone(),
                })
                .collect::<Vec<_>>()
                .join(", "),
            Fact::Known(_) => "none".into(),
            Fact::Unknown => UNKNOWN.into(),
        };
        format!(
            "Module: {}\nPurpose: {}\nDetails: {}\nInputs: {}\nOutputs: {}",
            self.name,
            self.brief_description,
            self.detailed_description,
            items(&self.inputs),
            items(&self.outputs)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approval {
    pub actor: String,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDivision {
    pub modules: Vec<ModuleSpec>,
    pub approved: bool,
    pub revision: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approval: Option<Approval>,
    /// Gaps in the backend answer that need a person's attention.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl ModuleDivision {
    pub fn module(&self, name: &str) -> Option<&ModuleSpec> {
        self.modules.iter().find(|m| m.name == name)
    }

    /// Wire form used in prompts: the `modules` list only.
    pub fn to_prompt_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({ "modules": self.modules })).expect("division serializes")
    }
}

fn element_attachments(bundle: &PaperBundle, excerpts: &[&crate::document::Excerpt]) -> Vec<AttachmentRef> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for ex in excerpts {
        for el in bundle.elements_in(ex) {
            if let ElementPayload::Asset(path) = &el.payload {
                if el.kind.is_visual() && seen.insert(el.id.clone()) {
                    out.push(AttachmentRef {
                        id: el.id.clone(),
                        kind: el.kind,
                        caption: el.caption.clone(),
                        path: bundle.root.join(path),
                    });
                }
            }
        }
    }
    out
}

/// Asks the basic-information questions over the introduction and
/// background sections.
pub fn extract_metadata(
    bundle: &PaperBundle,
    session: &mut Session,
    kit: &PromptKit,
    retries: u32,
) -> Result<SystemMetadata, ExtractionError> {
    let context = select_excerpt(
        bundle,
        &ExcerptSelector::SectionsByKind(vec![SectionKind::Introduction, SectionKind::Background]),
    )?;
    let outline = select_excerpt(bundle, &ExcerptSelector::Outline)?;
    let prompt = kit
        .render(ids::BASIC_INFO, &bindings([("PAPER_CONTEXT", context.text.as_str()), ("OUTLINE", outline.text.as_str())]))
        .map_err(StageError::from)?
        .with_attachments(element_attachments(bundle, &[&context]));
    let meta = ask(session, kit, &prompt, retries, "extract", |payload, _| match payload {
        ParsedPayload::Json(v) => serde_json::from_value::<SystemMetadata>(v).map_err(|e| e.to_string()),
        _ => Err("expected a JSON object".into()),
    })?;
    Ok(meta)
}

fn parse_division(value: Value, revision: u32) -> Result<ModuleDivision, String> {
    let raw = value["modules"].as_array().cloned().unwrap_or_default();
    let mut flags = Vec::new();
    let mut modules = Vec::with_capacity(raw.len());
    for m in raw {
        let name = m["name"].as_str().unwrap_or_default().trim().to_string();
        if name.is_empty() || name == UNKNOWN {
            return Err("every module needs a real name; UNKNOWN is not allowed for names".into());
        }
        for field in ["brief_description", "detailed_description", "inputs", "outputs", "paper_refs"] {
            match m.get(field) {
                None => flags.push(format!("module `{name}`: `{field}` missing, recorded as UNKNOWN")),
                Some(Value::String(s)) if s == UNKNOWN => flags.push(format!("module `{name}`: `{field}` is UNKNOWN")),
                _ => {}
            }
        }
        let mut m = m;
        if m.get("depends_on").and_then(Value::as_str) == Some(UNKNOWN) {
            flags.push(format!("module `{name}`: `depends_on` is UNKNOWN, treated as no dependencies"));
            m["depends_on"] = Value::Array(Vec::new());
        }
        modules.push(serde_json::from_value::<ModuleSpec>(m).map_err(|e| format!("module `{name}`: {e}"))?);
    }
    Ok(ModuleDivision {
        modules,
        approved: false,
        revision,
        approval: None,
        flags,
    })
}

fn accept_division(payload: ParsedPayload, revision: u32) -> Result<ModuleDivision, String> {
    match payload {
        ParsedPayload::Json(v) => parse_division(v, revision),
        _ => Err("expected a JSON object".into()),
    }
}

fn reject_cycles(division: ModuleDivision) -> Result<ModuleDivision, ExtractionError> {
    match find_cycle(&division) {
        Some(cycle) => Err(ExtractionError::CyclicDependencies(cycle)),
        None => Ok(division),
    }
}

/// Divides the system into modules from the introduction's last
/// paragraph, the design's first paragraph, the system overview and the
/// outline.
pub fn divide_modules(
    bundle: &PaperBundle,
    metadata: &SystemMetadata,
    session: &mut Session,
    kit: &PromptKit,
    retries: u32,
) -> Result<ModuleDivision, ExtractionError> {
    let intro = select_excerpt(bundle, &ExcerptSelector::IntroLastParagraph)?;
    let design = select_excerpt(bundle, &ExcerptSelector::DesignFirstParagraph)?;
    let overview = select_excerpt(bundle, &ExcerptSelector::SystemOverview)?;
    let outline = select_excerpt(bundle, &ExcerptSelector::Outline)?;
    let prompt = kit
        .render(
            ids::MODULE_DIVISION,
            &bindings([
                ("SYSTEM_METADATA", metadata.to_pretty_json()),
                ("INTRO_LAST_PARAGRAPH", intro.text),
                ("DESIGN_FIRST_PARAGRAPH", design.text.clone()),
                ("SYSTEM_OVERVIEW", overview.text.clone()),
                ("OUTLINE", outline.text),
            ]),
        )
        .map_err(StageError::from)?
        .with_attachments(element_attachments(bundle, &[&overview]));
    let division = ask(session, kit, &prompt, retries, "divide", |p, _| accept_division(p, 1))?;
    reject_cycles(division)
}

/// One dependency cycle, as module names with the first repeated at the
/// end, if any exists.
pub fn find_cycle(division: &ModuleDivision) -> Option<Vec<String>> {
    let index: BTreeMap<&str, usize> = division.modules.iter().enumerate().map(|(i, m)| (m.name.as_str(), i)).collect();
    // 0 unvisited, 1 on the current path, 2 done
    let mut state = vec![0u8; division.modules.len()];
    let mut path: Vec<usize> = Vec::new();

    fn visit(
        i: usize,
        division: &ModuleDivision,
        index: &BTreeMap<&str, usize>,
        state: &mut [u8],
        path: &mut Vec<usize>,
    ) -> Option<Vec<String>> {
        state[i] = 1;
        path.push(i);
        for dep in &division.modules[i].depends_on {
            let Some(&j) = index.get(dep.as_str()) else { continue };
            if state[j] == 1 {
                let start = path.iter().position(|&p| p == j).expect("on path");
                let mut cycle: Vec<String> = path[start..].iter().map(|&p| division.modules[p].name.clone()).collect();
                cycle.push(division.modules[j].name.clone());
                return Some(cycle);
            }
            if state[j] == 0 {
                if let Some(c) = visit(j, division, index, state, path) {
                    return Some(c);
                }
            }
        }
        path.pop();
        state[i] = 2;
        None
    }

    (0..division.modules.len()).find_map(|i| {
        if state[i] == 0 {
            visit(i, division, &index, &mut state, &mut path)
        } else {
            None
        }
    })
}

/// Modules with their dependencies first; ties keep division order.
pub fn topological_order(division: &ModuleDivision) -> Result<Vec<&ModuleSpec>, ExtractionError> {
    if let Some(cycle) = find_cycle(division) {
        return Err(ExtractionError::CyclicDependencies(cycle));
    }
    let names: BTreeSet<&str> = division.modules.iter().map(|m| m.name.as_str()).collect();
    let mut done: BTreeSet<&str> = BTreeSet::new();
    let mut order = Vec::with_capacity(division.modules.len());
    while order.len() < division.modules.len() {
        let next = division
            .modules
            .iter()
            .find(|m| {
                !done.contains(m.name.as_str())
                    && m.depends_on.iter().all(|d| done.contains(d.as_str()) || !names.contains(d.as_str()))
            })
            .expect("acyclic divisions always have a ready module");
        done.insert(next.name.as_str());
        order.push(next);
    }
    Ok(order)
}

/// Report-only checks: cycles, dangling dependencies and name collisions
/// are errors; inputs nobody provides are warnings.
pub fn validate_division(division: &ModuleDivision, metadata: Option<&SystemMetadata>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = BTreeSet::new();
    for m in &division.modules {
        if !seen.insert(m.name.as_str()) {
            report.error("name-collision", format!("module name `{}` is used more than once", m.name));
        }
    }
    for m in &division.modules {
        for dep in &m.depends_on {
            if !seen.contains(dep.as_str()) {
                report.error("dangling-dependency", format!("module `{}` depends on unknown module `{dep}`", m.name));
            }
        }
    }
    if let Some(cycle) = find_cycle(division) {
        report.error("cycle", format!("dependency cycle {}", cycle.join(" -> ")));
    }

    let lower = |s: &str| s.trim().to_lowercase();
    let mut provided: BTreeSet<String> = BTreeSet::new();
    if let Some(Fact::Known(items)) = metadata.map(|m| &m.system_inputs) {
        provided.extend(items.iter().map(|i| lower(&i.name)));
    }
    for m in &division.modules {
        if let Fact::Known(items) = &m.outputs {
            provided.extend(items.iter().map(|i| lower(&i.name)));
        }
    }
    for m in &division.modules {
        if let Fact::Known(items) = &m.inputs {
            for i in items {
                if !provided.contains(&lower(&i.name)) {
                    report.warning(
                        "io-closure",
                        format!(
                            "input `{}` of module `{}` is neither a system input nor produced by any module",
                            i.name, m.name
                        ),
                    );
                }
            }
        }
    }
    report
}

/// Asks for a revised division that addresses `feedback`.
pub fn refine_division(
    division: &ModuleDivision,
    feedback: &str,
    metadata: &SystemMetadata,
    session: &mut Session,
    kit: &PromptKit,
    retries: u32,
) -> Result<ModuleDivision, ExtractionError> {
    if division.approved {
        return Err(ExtractionError::RejectedRefinement("the division is already approved".into()));
    }
    if feedback.trim().is_empty() {
        return Err(ExtractionError::RejectedRefinement("feedback is empty".into()));
    }
    let prompt = kit
        .render(
            ids::REFINE_MODULES,
            &bindings([
                ("SYSTEM_METADATA", metadata.to_pretty_json()),
                ("DIVISION", division.to_prompt_json()),
                ("FEEDBACK", feedback.to_string()),
            ]),
        )
        .map_err(StageError::from)?;
    let revision = division.revision + 1;
    let refined = ask(session, kit, &prompt, retries, "divide", |p, _| accept_division(p, revision))?;
    reject_cycles(refined)
}

/// Freezes the division. Approving an approved division changes nothing.
pub fn approve_division(
    division: &ModuleDivision,
    actor: &str,
    at_ms: u64,
    metadata: Option<&SystemMetadata>,
) -> Result<ModuleDivision, ExtractionError> {
    if division.approved {
        return Ok(division.clone());
    }
    let report = validate_division(division, metadata);
    if report.has_errors() {
        return Err(ExtractionError::ValidationErrorsPresent(report));
    }
    let mut approved = division.clone();
    approved.approved = true;
    approved.approval = Some(Approval {
        actor: actor.to_string(),
        at_ms,
    });
    Ok(approved)
}

impl fmt::Display for ModuleDivision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "revision {} ({})",
            self.revision,
            if self.approved { "approved" } else { "pending approval" }
        )?;
        for m in &self.modules {
            let deps = if m.depends_on.is_empty() { String::new() } else { format!(" <- {}", m.depends_on.join(", ")) };
            writeln!(f, "  {}{deps}: {}", m.name, m.brief_description)?;
        }
        Ok(())
    }
}
