//! Paper bundles: loading, section classification, excerpt selection and
//! verbatim lookup.
//!
//! A bundle is a directory holding `manifest.json` plus one plain-text file
//! per section. Formulas and pseudocode live inline as fenced LaTeX blocks
//! whose info string carries the element id (```` ```latex #eq1 ````);
//! figures and tables are referenced from a section by a line of the form
//! `![caption](#fig1)` and point at an asset file listed in the manifest.

mod alias;
mod latex;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use alias::{AliasTable, ClassificationSource};
pub use latex::check_latex_balance;

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("no manifest.json found in {0}")]
    MissingManifest(PathBuf),
    #[error("manifest is not valid: {0}")]
    InvalidManifest(String),
    #[error("malformed section file {file}: {reason}")]
    MalformedSection { file: String, reason: String },
    #[error("element reference `{0}` does not resolve to an existing asset")]
    DanglingElementRef(String),
    #[error("element `{0}` is declared but no section references it")]
    UnreferencedElement(String),
    #[error("element `{0}` is referenced by more than one section")]
    DuplicateElementRef(String),
    #[error("quote is empty")]
    EmptyQuote,
    #[error("selector {0} does not match any region of the paper")]
    SelectorUnsatisfied(ExcerptSelector),
}

/// The eight canonical section kinds of a research paper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SectionKind {
    Abstract,
    Introduction,
    Background,
    SystemArchitecture,
    Design,
    Evaluation,
    Discussion,
    Appendices,
}

impl SectionKind {
    pub const ALL: [SectionKind; 8] = [
        SectionKind::Abstract,
        SectionKind::Introduction,
        SectionKind::Background,
        SectionKind::SystemArchitecture,
        SectionKind::Design,
        SectionKind::Evaluation,
        SectionKind::Discussion,
        SectionKind::Appendices,
    ];

    /// Parses both the PascalCase name and the snake_case key used in the
    /// alias table.
    pub fn parse(s: &str) -> Option<SectionKind> {
        let key: String = s.chars().filter(|c| *c != '_' && *c != ' ').collect();
        SectionKind::ALL
            .into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(&key))
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Figure,
    Table,
    Formula,
    Pseudocode,
}

impl ElementKind {
    pub fn is_visual(self) -> bool {
        matches!(self, ElementKind::Figure | ElementKind::Table)
    }

    pub fn label(self) -> &'static str {
        match self {
            ElementKind::Figure => "FIGURE",
            ElementKind::Table => "TABLE",
            ElementKind::Formula => "FORMULA",
            ElementKind::Pseudocode => "PSEUDOCODE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementPayload {
    /// Path of an asset file, relative to the bundle root.
    Asset(PathBuf),
    Latex(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalElement {
    pub id: String,
    pub kind: ElementKind,
    pub payload: ElementPayload,
    pub caption: String,
}

impl MultimodalElement {
    /// Text form used when the element is inlined into a prompt.
    pub fn render_inline(&self) -> String {
        match &self.payload {
            ElementPayload::Latex(src) => {
                format!("[{:?} {}: {}]\n{}", self.kind, self.id, self.caption, src.trim_end())
            }
            ElementPayload::Asset(_) => format!("[{:?} {}: {}]", self.kind, self.id, self.caption),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SectionId(pub usize);

impl fmt::Display for SectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "section {}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub id: SectionId,
    pub heading: String,
    pub kind: SectionKind,
    pub paragraphs: Vec<String>,
    pub element_refs: Vec<String>,
}

impl Section {
    /// Whitespace-normalized body, the coordinate space of [`Location`].
    pub fn normalized_text(&self) -> String {
        normalize_whitespace(&self.paragraphs.join("\n\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSection {
    pub heading: String,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestAsset {
    pub id: String,
    pub kind: ElementKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default)]
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub title: String,
    pub sections: Vec<ManifestSection>,
    #[serde(default)]
    pub assets: Vec<ManifestAsset>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperBundle {
    pub id: String,
    pub root: PathBuf,
    pub sections: Vec<Section>,
    pub elements: Vec<MultimodalElement>,
    pub manifest: Manifest,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Loads and validates a bundle directory, classifying sections with the
/// built-in alias table.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<PaperBundle, DocumentError> {
    load_bundle_with(path, &AliasTable::builtin())
}

pub fn load_bundle_with(
    path: impl AsRef<Path>,
    aliases: &AliasTable,
) -> Result<PaperBundle, DocumentError> {
    let root = path.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&manifest_path)
        .map_err(|_| DocumentError::MissingManifest(root.to_path_buf()))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| DocumentError::InvalidManifest(e.to_string()))?;
    if manifest.sections.is_empty() {
        return Err(DocumentError::InvalidManifest("manifest lists no sections".into()));
    }

    let mut assets: BTreeMap<&str, &ManifestAsset> = BTreeMap::new();
    for asset in &manifest.assets {
        if assets.insert(asset.id.as_str(), asset).is_some() {
            return Err(DocumentError::InvalidManifest(format!("duplicate asset id `{}`", asset.id)));
        }
    }

    let mut sections = Vec::with_capacity(manifest.sections.len());
    let mut latex_payloads: BTreeMap<String, String> = BTreeMap::new();
    let mut referenced: BTreeSet<String> = BTreeSet::new();

    for (index, entry) in manifest.sections.iter().enumerate() {
        let file_path = root.join(&entry.file);
        let text = fs::read(&file_path)
            .map_err(|e| DocumentError::MalformedSection {
                file: entry.file.clone(),
                reason: e.to_string(),
            })
            .and_then(|bytes| {
                String::from_utf8(bytes).map_err(|_| DocumentError::MalformedSection {
                    file: entry.file.clone(),
                    reason: "not valid UTF-8".into(),
                })
            })?;
        let body = parse_section_body(&text).map_err(|reason| DocumentError::MalformedSection {
            file: entry.file.clone(),
            reason,
        })?;

        for (id, latex) in &body.latex_blocks {
            let asset = assets.get(id.as_str()).ok_or_else(|| DocumentError::DanglingElementRef(id.clone()))?;
            if asset.kind.is_visual() {
                return Err(DocumentError::MalformedSection {
                    file: entry.file.clone(),
                    reason: format!("LaTeX block tagged `{id}` but the asset is a {:?}", asset.kind),
                });
            }
            check_latex_balance(latex).map_err(|reason| DocumentError::MalformedSection {
                file: entry.file.clone(),
                reason: format!("element `{id}`: {reason}"),
            })?;
            latex_payloads.insert(id.clone(), latex.clone());
        }
        for id in &body.element_refs {
            if !assets.contains_key(id.as_str()) {
                return Err(DocumentError::DanglingElementRef(id.clone()));
            }
            if !referenced.insert(id.clone()) {
                return Err(DocumentError::DuplicateElementRef(id.clone()));
            }
        }

        let (kind, _) = aliases.classify(&entry.heading, entry.kind_hint.as_deref());
        sections.push(Section {
            id: SectionId(index),
            heading: entry.heading.clone(),
            kind,
            paragraphs: body.paragraphs,
            element_refs: body.element_refs,
        });
    }

    let mut elements = Vec::with_capacity(manifest.assets.len());
    for asset in &manifest.assets {
        if !referenced.contains(&asset.id) {
            return Err(DocumentError::UnreferencedElement(asset.id.clone()));
        }
        let payload = match (asset.kind.is_visual(), latex_payloads.remove(&asset.id)) {
            (false, Some(latex)) => ElementPayload::Latex(latex),
            (_, _) => {
                let file = asset
                    .file
                    .as_ref()
                    .ok_or_else(|| DocumentError::DanglingElementRef(asset.id.clone()))?;
                let full = root.join(file);
                if !full.is_file() {
                    return Err(DocumentError::DanglingElementRef(asset.id.clone()));
                }
                if asset.kind.is_visual() {
                    ElementPayload::Asset(PathBuf::from(file))
                } else {
                    let latex = fs::read_to_string(&full).map_err(|e| DocumentError::MalformedSection {
                        file: file.clone(),
                        reason: e.to_string(),
                    })?;
                    check_latex_balance(&latex).map_err(|reason| DocumentError::MalformedSection {
                        file: file.clone(),
                        reason,
                    })?;
                    ElementPayload::Latex(latex)
                }
            }
        };
        elements.push(MultimodalElement {
            id: asset.id.clone(),
            kind: asset.kind,
            payload,
            caption: asset.caption.clone(),
        });
    }

    let id = manifest
        .id
        .clone()
        .filter(|s| !s.trim().is_empty())
        .or_else(|| root.file_name().map(|n| n.to_string_lossy().into_owned()))
        .filter(|s| !s.is_empty())
        .ok_or_else(|| DocumentError::InvalidManifest("bundle has no usable id".into()))?;

    Ok(PaperBundle {
        id,
        root: root.to_path_buf(),
        sections,
        elements,
        manifest,
    })
}

struct SectionBody {
    paragraphs: Vec<String>,
    /// Element ids in order of appearance, fences and reference lines alike.
    element_refs: Vec<String>,
    latex_blocks: Vec<(String, String)>,
}

fn parse_section_body(text: &str) -> Result<SectionBody, String> {
    let mut paragraphs = Vec::new();
    let mut element_refs = Vec::new();
    let mut latex_blocks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut lines = text.lines().enumerate();

    fn flush(current: &mut Vec<&str>, paragraphs: &mut Vec<String>) {
        if !current.is_empty() {
            paragraphs.push(current.join("\n"));
            current.clear();
        }
    }

    while let Some((lineno, line)) = lines.next() {
        let trimmed = line.trim();
        if let Some(info) = trimmed.strip_prefix("```") {
            flush(&mut current, &mut paragraphs);
            let id = parse_fence_info(info)
                .ok_or_else(|| format!("line {}: fenced block needs a `latex #<id>` info string", lineno + 1))?;
            let mut body = Vec::new();
            let mut closed = false;
            for (_, inner) in lines.by_ref() {
                if inner.trim() == "```" {
                    closed = true;
                    break;
                }
                body.push(inner);
            }
            if !closed {
                return Err(format!("line {}: unterminated fenced block `{id}`", lineno + 1));
            }
            element_refs.push(id.clone());
            latex_blocks.push((id, body.join("\n")));
        } else if let Some(id) = parse_element_ref(trimmed) {
            flush(&mut current, &mut paragraphs);
            element_refs.push(id);
        } else if trimmed.is_empty() {
            flush(&mut current, &mut paragraphs);
        } else {
            current.push(line.trim_end());
        }
    }
    flush(&mut current, &mut paragraphs);

    if paragraphs.is_empty() && element_refs.is_empty() {
        return Err("section has neither paragraphs nor elements".into());
    }
    Ok(SectionBody {
        paragraphs,
        element_refs,
        latex_blocks,
    })
}

fn parse_fence_info(info: &str) -> Option<String> {
    let mut parts = info.split_whitespace();
    if parts.next()? != "latex" {
        return None;
    }
    let id = parts.next()?.strip_prefix('#')?;
    (!id.is_empty()).then(|| id.to_string())
}

/// `![anything](#id)` on a line of its own.
fn parse_element_ref(line: &str) -> Option<String> {
    let rest = line.strip_prefix("![")?;
    let close = rest.find("](#")?;
    let id = rest[close + 3..].strip_suffix(')')?;
    (!id.is_empty() && !id.contains(char::is_whitespace)).then(|| id.to_string())
}

/// One classified heading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub section: SectionId,
    pub heading: String,
    pub kind: SectionKind,
    pub source: ClassificationSource,
}

impl Classification {
    /// Headings that fell through to the fallback kind need a human look.
    pub fn flagged(&self) -> bool {
        self.source == ClassificationSource::Fallback
    }
}

pub type SectionMap = Vec<Classification>;

pub fn classify_sections(bundle: &PaperBundle) -> SectionMap {
    classify_sections_with(bundle, &AliasTable::builtin())
}

pub fn classify_sections_with(bundle: &PaperBundle, aliases: &AliasTable) -> SectionMap {
    bundle
        .manifest
        .sections
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let (kind, source) = aliases.classify(&entry.heading, entry.kind_hint.as_deref());
            Classification {
                section: SectionId(i),
                heading: entry.heading.clone(),
                kind,
                source,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExcerptSelector {
    IntroLastParagraph,
    DesignFirstParagraph,
    SectionsByKind(Vec<SectionKind>),
    SystemOverview,
    Outline,
}

impl fmt::Display for ExcerptSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExcerptSelector::SectionsByKind(kinds) => {
                let names: Vec<String> = kinds.iter().map(ToString::to_string).collect();
                write!(f, "SectionsByKind[{}]", names.join(","))
            }
            other => fmt::Debug::fmt(other, f),
        }
    }
}

/// A contiguous run of paragraphs inside one section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub section: SectionId,
    pub paragraphs: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcerptOrigin {
    pub selector: ExcerptSelector,
    /// Empty for the outline, which is synthesized from headings.
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excerpt {
    pub text: String,
    pub origin: ExcerptOrigin,
}

impl PaperBundle {
    pub fn section(&self, id: SectionId) -> Option<&Section> {
        self.sections.get(id.0)
    }

    pub fn element(&self, id: &str) -> Option<&MultimodalElement> {
        self.elements.iter().find(|e| e.id == id)
    }

    pub fn sections_of(&self, kind: SectionKind) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(move |s| s.kind == kind)
    }

    pub fn region_text(&self, region: &Region) -> Option<String> {
        let section = self.section(region.section)?;
        let paragraphs = section.paragraphs.get(region.paragraphs.clone())?;
        Some(paragraphs.join("\n\n"))
    }

    /// Elements referenced by the sections an excerpt was drawn from.
    pub fn elements_in(&self, excerpt: &Excerpt) -> Vec<&MultimodalElement> {
        let mut seen = BTreeSet::new();
        excerpt
            .origin
            .regions
            .iter()
            .filter_map(|r| self.section(r.section))
            .flat_map(|s| s.element_refs.iter())
            .filter(|id| seen.insert(id.as_str()))
            .filter_map(|id| self.element(id))
            .collect()
    }
}

pub fn select_excerpt(bundle: &PaperBundle, selector: &ExcerptSelector) -> Result<Excerpt, DocumentError> {
    let unsatisfied = || DocumentError::SelectorUnsatisfied(selector.clone());
    let first_with_paragraphs =
        |kind| bundle.sections_of(kind).find(|s: &&Section| !s.paragraphs.is_empty());

    let regions = match selector {
        ExcerptSelector::Outline => {
            let text = extract_outline(bundle)
                .iter()
                .map(|e| e.heading.as_str())
                .collect::<Vec<_>>()
                .join("\n");
            return Ok(Excerpt {
                text,
                origin: ExcerptOrigin {
                    selector: selector.clone(),
                    regions: Vec::new(),
                },
            });
        }
        ExcerptSelector::IntroLastParagraph => {
            let s = first_with_paragraphs(SectionKind::Introduction).ok_or_else(unsatisfied)?;
            let n = s.paragraphs.len();
            vec![Region {
                section: s.id,
                paragraphs: n - 1..n,
            }]
        }
        ExcerptSelector::DesignFirstParagraph => {
            let s = first_with_paragraphs(SectionKind::Design).ok_or_else(unsatisfied)?;
            vec![Region {
                section: s.id,
                paragraphs: 0..1,
            }]
        }
        ExcerptSelector::SystemOverview => {
            if let Some(s) = first_with_paragraphs(SectionKind::SystemArchitecture) {
                vec![Region {
                    section: s.id,
                    paragraphs: 0..s.paragraphs.len(),
                }]
            } else {
                let s = first_with_paragraphs(SectionKind::Design).ok_or_else(unsatisfied)?;
                vec![Region {
                    section: s.id,
                    paragraphs: 0..1,
                }]
            }
        }
        ExcerptSelector::SectionsByKind(kinds) => {
            let regions: Vec<Region> = bundle
                .sections
                .iter()
                .filter(|s| kinds.contains(&s.kind) && !s.paragraphs.is_empty())
                .map(|s| Region {
                    section: s.id,
                    paragraphs: 0..s.paragraphs.len(),
                })
                .collect();
            if regions.is_empty() {
                return Err(unsatisfied());
            }
            regions
        }
    };

    let text = regions
        .iter()
        .map(|r| bundle.region_text(r).expect("regions are built from existing paragraphs"))
        .collect::<Vec<_>>()
        .join("\n\n");
    Ok(Excerpt {
        text,
        origin: ExcerptOrigin {
            selector: selector.clone(),
            regions,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlineEntry {
    pub section: SectionId,
    pub heading: String,
    pub kind: SectionKind,
    /// How many earlier sections carry the same heading.
    pub occurrence: usize,
}

pub fn extract_outline(bundle: &PaperBundle) -> Vec<OutlineEntry> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    bundle
        .sections
        .iter()
        .map(|s| {
            let n = seen.entry(s.heading.as_str()).or_default();
            let occurrence = *n;
            *n += 1;
            OutlineEntry {
                section: s.id,
                heading: s.heading.clone(),
                kind: s.kind,
                occurrence,
            }
        })
        .collect()
}

/// Position of a quote inside a section's normalized text, in chars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub section: SectionId,
    pub chars: Range<usize>,
}

/// Collapses whitespace runs to a single space and trims.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn find_verbatim(bundle: &PaperBundle, quote: &str) -> Result<Option<Location>, DocumentError> {
    let needle = normalize_whitespace(quote);
    if needle.is_empty() {
        return Err(DocumentError::EmptyQuote);
    }
    for section in &bundle.sections {
        let haystack = section.normalized_text();
        if let Some(byte_start) = haystack.find(&needle) {
            let start = haystack[..byte_start].chars().count();
            let len = needle.chars().count();
            return Ok(Some(Location {
                section: section.id,
                chars: start..start + len,
            }));
        }
    }
    Ok(None)
}
