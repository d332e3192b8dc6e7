//! Prompt templates, output contracts and the few-shot exemplar store.
//!
//! Templates are plain text with `{NAME}` placeholders (upper-case
//! identifiers). Substitution is a single literal pass: bound values are
//! never re-scanned, so a value containing `{X}` is inserted verbatim.

mod exemplars;
pub mod schema;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::document::ElementKind;
use crate::funcgen::secot::{parse_secot, Secot};
use crate::scaffold::scot::{parse_scot, Scot};

pub use exemplars::{Chain, Exemplar, ExemplarKind, ExemplarStore};
pub use schema::SchemaRegistry;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template id `{0}` is already registered")]
    DuplicateId(String),
    #[error("template definition rejected: {0}")]
    RejectedDefinition(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template}` needs a binding for {name}")]
    MissingBinding { template: String, name: String },
    #[error("no exemplars of kind {0:?}")]
    NoExemplars(ExemplarKind),
    #[error("exemplar rejected: {0}")]
    RejectedExemplar(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("response violates the output contract: {0}")]
pub struct ContractViolation(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arg", rename_all = "snake_case")]
pub enum OutputContract {
    StrictJson(String),
    ScotMarkdown,
    SecotMarkdown,
    CodeBlock(String),
    FreeText,
}

impl OutputContract {
    /// Parses the front-matter form, e.g. `strict_json:metadata`.
    pub fn parse(spec: &str, language: &str) -> Result<OutputContract, String> {
        let (head, arg) = match spec.split_once(':') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (spec.trim(), None),
        };
        match (head, arg) {
            ("strict_json", Some(schema)) if !schema.is_empty() => Ok(OutputContract::StrictJson(schema.into())),
            ("scot_markdown", None) => Ok(OutputContract::ScotMarkdown),
            ("secot_markdown", None) => Ok(OutputContract::SecotMarkdown),
            ("free_text", None) => Ok(OutputContract::FreeText),
            ("code_block", Some(lang)) if !lang.is_empty() => {
                let lang = if lang == "$language" { language } else { lang };
                Ok(OutputContract::CodeBlock(lang.to_string()))
            }
            _ => Err(format!("unrecognized output contract `{spec}`")),
        }
    }
}

impl fmt::Display for OutputContract {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputContract::StrictJson(s) => write!(f, "strict_json:{s}"),
            OutputContract::ScotMarkdown => f.write_str("scot_markdown"),
            OutputContract::SecotMarkdown => f.write_str("secot_markdown"),
            OutputContract::CodeBlock(l) => write!(f, "code_block:{l}"),
            OutputContract::FreeText => f.write_str("free_text"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
    pub contract: OutputContract,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Z][A-Z0-9_]*)\}").expect("static regex"))
}

/// Placeholder names appearing in a template body.
pub fn placeholders_in(body: &str) -> BTreeSet<String> {
    placeholder_re().captures_iter(body).map(|c| c[1].to_string()).collect()
}

impl PromptTemplate {
    /// Reads a template file: a `---` delimited header with `id`,
    /// `contract` and `placeholders`, followed by the body.
    pub fn from_file_text(text: &str, language: &str) -> Result<PromptTemplate, PromptError> {
        let reject = |m: &str| PromptError::RejectedDefinition(m.to_string());
        let rest = text.strip_prefix("---\n").ok_or_else(|| reject("missing front matter"))?;
        let (header, body) = rest.split_once("\n---\n").ok_or_else(|| reject("unterminated front matter"))?;
        let mut fields = BTreeMap::new();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(':').ok_or_else(|| reject("front matter lines are `key: value`"))?;
            fields.insert(k.trim(), v.trim());
        }
        let id = fields.get("id").ok_or_else(|| reject("front matter needs `id`"))?;
        let contract = OutputContract::parse(fields.get("contract").ok_or_else(|| reject("front matter needs `contract`"))?, language)
            .map_err(PromptError::RejectedDefinition)?;
        let required_placeholders = fields
            .get("placeholders")
            .map(|p| p.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default();
        Ok(PromptTemplate {
            id: id.to_string(),
            body: body.to_string(),
            required_placeholders,
            contract,
        })
    }
}

/// Reference to a bundle element travelling with a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachmentRef {
    pub id: String,
    pub kind: ElementKind,
    pub caption: String,
    /// Absolute path of the asset file.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub text: String,
    pub bindings: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<AttachmentRef>,
}

impl RenderedPrompt {
    /// A prompt typed by a person rather than rendered from a template.
    pub fn handcrafted(text: impl Into<String>) -> RenderedPrompt {
        RenderedPrompt {
            template_id: "human".into(),
            text: text.into(),
            bindings: BTreeMap::new(),
            attachments: Vec::new(),
        }
    }

    pub fn with_attachments(mut self, attachments: Vec<AttachmentRef>) -> RenderedPrompt {
        self.attachments = attachments;
        self
    }

    /// The same prompt followed by the reason its previous answer was
    /// rejected.
    pub fn reask(&self, violation: &str) -> RenderedPrompt {
        let mut next = self.clone();
        next.text = format!(
            "{}\n\n[FEEDBACK]\nYour previous answer was rejected: {}\nAnswer again and follow the required output format exactly.",
            self.text, violation
        );
        next
    }
}

const BUILTIN_TEMPLATES: &[&str] = &[
    include_str!("../../data/templates/T1.txt"),
    include_str!("../../data/templates/T2.txt"),
    include_str!("../../data/templates/T3.txt"),
    include_str!("../../data/templates/T4.txt"),
    include_str!("../../data/templates/T5.txt"),
    include_str!("../../data/templates/T6-secot.txt"),
    include_str!("../../data/templates/T6-code.txt"),
    include_str!("../../data/templates/T6-tests.txt"),
    include_str!("../../data/templates/T7.txt"),
    include_str!("../../data/templates/T8.txt"),
    include_str!("../../data/templates/T9.txt"),
    include_str!("../../data/templates/T10.txt"),
    include_str!("../../data/templates/T11.txt"),
];

/// Template ids used by the pipeline stages.
pub mod ids {
    pub const BASIC_INFO: &str = "T1";
    pub const MODULE_DIVISION: &str = "T2";
    pub const SCOT_GEN: &str = "T3";
    pub const FRAMEWORK_GEN: &str = "T4";
    pub const CONTENT_MAP: &str = "T5";
    pub const SECOT_GEN: &str = "T6-secot";
    pub const FUNCTION_GEN: &str = "T6-code";
    pub const TEST_GEN: &str = "T6-tests";
    pub const SYNTAX_REPAIR: &str = "T7";
    pub const INVOCATION_REPAIR: &str = "T8";
    pub const LOGIC_REPAIR: &str = "T9";
    pub const INTEGRATION_TEST: &str = "T10";
    pub const REFINE_MODULES: &str = "T11";
}

#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
    order: Vec<String>,
}

impl TemplateRegistry {
    /// The built-in template set with code-block contracts bound to
    /// `language`.
    pub fn builtin(language: &str) -> TemplateRegistry {
        let mut reg = TemplateRegistry::default();
        for text in BUILTIN_TEMPLATES {
            let t = PromptTemplate::from_file_text(text, language).expect("built-in template parses");
            reg.register_template(t).expect("built-in template is consistent");
        }
        reg
    }

    pub fn register_template(&mut self, def: PromptTemplate) -> Result<String, PromptError> {
        if self.templates.contains_key(&def.id) {
            return Err(PromptError::DuplicateId(def.id));
        }
        let found = placeholders_in(&def.body);
        if found != def.required_placeholders {
            let missing: Vec<_> = found.difference(&def.required_placeholders).cloned().collect();
            let unused: Vec<_> = def.required_placeholders.difference(&found).cloned().collect();
            return Err(PromptError::RejectedDefinition(format!(
                "template `{}`: undeclared placeholders {missing:?}, declared but unused {unused:?}",
                def.id
            )));
        }
        let id = def.id.clone();
        self.order.push(id.clone());
        self.templates.insert(id.clone(), def);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn render(&self, id: &str, bindings: &BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        let template = self.get(id).ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))?;
        if let Some(name) = template.required_placeholders.iter().find(|n| !bindings.contains_key(*n)) {
            return Err(PromptError::MissingBinding {
                template: id.to_string(),
                name: name.clone(),
            });
        }
        let text = placeholder_re()
            .replace_all(&template.body, |caps: &regex::Captures<'_>| bindings[&caps[1]].clone())
            .into_owned();
        let used: BTreeMap<String, String> = bindings
            .iter()
            .filter(|(k, _)| template.required_placeholders.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(RenderedPrompt {
            template_id: id.to_string(),
            text,
            bindings: used,
            attachments: Vec::new(),
        })
    }
}

/// Builds a binding map from `(name, value)` pairs.
pub fn bindings<I, K, V>(pairs: I) -> BTreeMap<String, String>
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<String>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedPayload {
    Json(Value),
    Scot(Scot),
    Secot(Secot),
    Code(String),
    Text(String),
}

/// Fenced blocks in order: (info string, body).
pub fn fenced_blocks(raw: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut lines = raw.lines();
    while let Some(line) = lines.next() {
        let t = line.trim_start();
        if let Some(info) = t.strip_prefix("```") {
            let info = info.trim().to_string();
            let mut body = Vec::new();
            let mut closed = false;
            for inner in lines.by_ref() {
                if inner.trim() == "```" {
                    closed = true;
                    break;
                }
                body.push(inner);
            }
            if closed {
                out.push((info, body.join("\n")));
            }
        }
    }
    out
}

fn language_matches(info: &str, language: &str) -> bool {
    let tag = info.split_whitespace().next().unwrap_or("").to_ascii_lowercase();
    let lang = language.to_ascii_lowercase();
    tag == lang || matches!((lang.as_str(), tag.as_str()), ("python", "py" | "python3") | ("rust", "rs"))
}

/// First fenced block tagged with `language`.
pub fn extract_code_block(raw: &str, language: &str) -> Result<String, ContractViolation> {
    fenced_blocks(raw)
        .into_iter()
        .find(|(info, _)| language_matches(info, language))
        .map(|(_, body)| body)
        .ok_or_else(|| ContractViolation(format!("no ```{language} code block in the response")))
}

pub fn parse_contract(
    contract: &OutputContract,
    raw: &str,
    schemas: &SchemaRegistry,
) -> Result<ParsedPayload, ContractViolation> {
    match contract {
        OutputContract::StrictJson(schema_id) => {
            let payload = fenced_blocks(raw)
                .into_iter()
                .find(|(info, _)| info.is_empty() || info.eq_ignore_ascii_case("json"))
                .map(|(_, body)| body)
                .unwrap_or_else(|| raw.to_string());
            let value: Value = serde_json::from_str(payload.trim())
                .map_err(|e| ContractViolation(format!("response is not strict JSON: {e}")))?;
            schemas
                .validate(schema_id, &value)
                .map_err(|e| ContractViolation(format!("schema `{schema_id}`: {e}")))?;
            Ok(ParsedPayload::Json(value))
        }
        OutputContract::ScotMarkdown => parse_scot(raw)
            .map(ParsedPayload::Scot)
            .map_err(|e| ContractViolation(format!("SCoT does not parse: {e}"))),
        OutputContract::SecotMarkdown => parse_secot(raw)
            .map(ParsedPayload::Secot)
            .map_err(|e| ContractViolation(format!("SeCoT does not parse: {e}"))),
        OutputContract::CodeBlock(lang) => extract_code_block(raw, lang).map(ParsedPayload::Code),
        OutputContract::FreeText => {
            if raw.trim().is_empty() {
                Err(ContractViolation("empty response".into()))
            } else {
                Ok(ParsedPayload::Text(raw.to_string()))
            }
        }
    }
}

/// Generation-time prompt fragments that head off the common syntactic
/// failure causes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreventivePreamble {
    /// State each variable's type up front.
    pub variable_types: bool,
    /// Declare which variables are iterated and must be iterable.
    pub iterable_declarations: bool,
    /// Give the required shape of the return value.
    pub output_format: bool,
}

const ITERABLE_TYPES: [&str; 8] = ["list", "dict", "set", "tuple", "sequence", "iterable", "mapping", "str"];

impl PreventivePreamble {
    pub const ALL: PreventivePreamble = PreventivePreamble {
        variable_types: true,
        iterable_declarations: true,
        output_format: true,
    };

    /// Prompt lines for the enabled fragments; empty when none are.
    /// `vars` are name and type pairs, `output` the declared return type.
    pub fn render(&self, vars: &[(String, Option<String>)], output: Option<&str>) -> String {
        let mut lines = Vec::new();
        if self.variable_types && !vars.is_empty() {
            let typed: Vec<String> = vars
                .iter()
                .map(|(n, t)| format!("{n}: {}", t.as_deref().unwrap_or("UNKNOWN")))
                .collect();
            lines.push(format!("Variable types: {}. Keep these types throughout.", typed.join(", ")));
        }
        if self.iterable_declarations {
            let iterables: Vec<&str> = vars
                .iter()
                .filter(|(_, t)| {
                    t.as_deref().is_some_and(|t| {
                        let t = t.to_ascii_lowercase();
                        ITERABLE_TYPES.iter().any(|k| t.starts_with(k))
                    })
                })
                .map(|(n, _)| n.as_str())
                .collect();
            if !iterables.is_empty() {
                lines.push(format!(
                    "Iterable variables: {}. Only iterate over these; check any other value before looping over it.",
                    iterables.join(", ")
                ));
            }
        }
        if self.output_format {
            if let Some(out) = output {
                lines.push(format!("Output format: return exactly one value of type {out}."));
            }
        }
        lines.join("\n")
    }
}

/// Everything a stage needs to build prompts and check responses.
#[derive(Debug, Clone)]
pub struct PromptKit {
    pub templates: TemplateRegistry,
    pub schemas: SchemaRegistry,
    pub exemplars: ExemplarStore,
    pub language: String,
    pub exemplar_k: usize,
    pub preamble: PreventivePreamble,
}

impl PromptKit {
    pub const DEFAULT_EXEMPLAR_K: usize = 2;

    pub fn builtin(language: &str) -> PromptKit {
        PromptKit {
            templates: TemplateRegistry::builtin(language),
            schemas: SchemaRegistry::builtin(),
            exemplars: ExemplarStore::builtin(language),
            language: language.to_string(),
            exemplar_k: Self::DEFAULT_EXEMPLAR_K,
            preamble: PreventivePreamble::default(),
        }
    }

    pub fn render(&self, id: &str, bindings: &BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        self.templates.render(id, bindings)
    }

    pub fn contract(&self, id: &str) -> Result<&OutputContract, PromptError> {
        self.templates
            .get(id)
            .map(|t| &t.contract)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn parse(&self, template_id: &str, raw: &str) -> Result<ParsedPayload, ContractViolation> {
        let contract = self.contract(template_id).map_err(|e| ContractViolation(e.to_string()))?;
        parse_contract(contract, raw, &self.schemas)
    }

    /// The `k` configured exemplars of `kind`, formatted for a prompt.
    pub fn exemplar_block(&self, kind: ExemplarKind) -> Result<String, PromptError> {
        let chosen = self.exemplars.select_exemplars(kind, self.exemplar_k)?;
        Ok(exemplars::render_exemplars(&chosen, &self.language))
    }
}
