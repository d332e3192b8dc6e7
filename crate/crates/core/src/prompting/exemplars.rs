//! Few-shot triplets of requirement, chain of thought and code.
//!
//! Exemplar files carry a `---` header (`id`, `kind`, `language`) and three
//! sections, `## Requirement`, `## Chain` and `## Code`; the code section
//! holds one fenced block.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{extract_code_block, PromptError};
use crate::funcgen::secot::{parse_secot, validate_secot, Secot};
use crate::scaffold::scot::{parse_scot, validate_scot, Scot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarKind {
    Scot,
    Secot,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Chain {
    Scot(Scot),
    Secot(Secot),
}

impl Chain {
    pub fn kind(&self) -> ExemplarKind {
        match self {
            Chain::Scot(_) => ExemplarKind::Scot,
            Chain::Secot(_) => ExemplarKind::Secot,
        }
    }
}

impl std::fmt::Display for Chain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Chain::Scot(s) => s.fmt(f),
            Chain::Secot(s) => s.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub id: String,
    pub language: String,
    pub requirement: String,
    pub chain: Chain,
    pub code: String,
}

impl Exemplar {
    pub fn kind(&self) -> ExemplarKind {
        self.chain.kind()
    }

    pub fn from_file_text(text: &str) -> Result<Exemplar, PromptError> {
        let reject = |m: String| PromptError::RejectedExemplar(m);
        let rest = text
            .strip_prefix("---\n")
            .ok_or_else(|| reject("missing front matter".into()))?;
        let (header, body) = rest
            .split_once("\n---\n")
            .ok_or_else(|| reject("unterminated front matter".into()))?;
        let field = |name: &str| {
            header
                .lines()
                .filter_map(|l| l.split_once(':'))
                .find(|(k, _)| k.trim() == name)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| reject(format!("front matter needs `{name}`")))
        };
        let id = field("id")?;
        let language = field("language")?;
        let kind = match field("kind")?.as_str() {
            "scot" => ExemplarKind::Scot,
            "secot" => ExemplarKind::Secot,
            other => return Err(reject(format!("{id}: unknown kind `{other}`"))),
        };

        let mut sections: Vec<(String, String)> = Vec::new();
        for line in body.lines() {
            if let Some(title) = line.strip_prefix("## ") {
                sections.push((title.trim().to_string(), String::new()));
            } else if let Some((_, text)) = sections.last_mut() {
                text.push_str(line);
                text.push('\n');
            }
        }
        let section = |name: &str| {
            sections
                .iter()
                .find(|(t, _)| t == name)
                .map(|(_, s)| s.trim().to_string())
                .ok_or_else(|| reject(format!("{id}: missing `## {name}` section")))
        };
        let requirement = section("Requirement")?;
        let chain_text = section("Chain")?;
        let code = extract_code_block(&section("Code")?, &language).map_err(|e| reject(format!("{id}: {e}")))?;

        let chain = match kind {
            ExemplarKind::Scot => Chain::Scot(parse_scot(&chain_text).map_err(|e| reject(format!("{id}: {e}")))?),
            ExemplarKind::Secot => Chain::Secot(parse_secot(&chain_text).map_err(|e| reject(format!("{id}: {e}")))?),
        };
        let exemplar = Exemplar {
            id,
            language,
            requirement,
            chain,
            code,
        };
        exemplar.check()?;
        Ok(exemplar)
    }

    fn check(&self) -> Result<(), PromptError> {
        let reject = |m: String| Err(PromptError::RejectedExemplar(format!("{}: {m}", self.id)));
        if self.requirement.trim().is_empty() {
            return reject("empty requirement".into());
        }
        if self.code.trim().is_empty() {
            return reject("empty code".into());
        }
        let report = match &self.chain {
            Chain::Scot(s) => validate_scot(s),
            Chain::Secot(s) => validate_secot(s),
        };
        if report.has_errors() {
            return reject(report.summary());
        }
        Ok(())
    }
}

const BUILTIN: &[&str] = &[
    include_str!("../../data/exemplars/scot-link-load.md"),
    include_str!("../../data/exemplars/scot-ecmp-hash.md"),
    include_str!("../../data/exemplars/scot-rtt-estimator.md"),
    include_str!("../../data/exemplars/secot-link-utilization.md"),
    include_str!("../../data/exemplars/secot-max-min-share.md"),
    include_str!("../../data/exemplars/secot-prefix-match.md"),
];

/// Exemplars kept in registration order, so selection is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ExemplarStore {
    entries: Vec<Exemplar>,
}

impl ExemplarStore {
    /// The built-in exemplars written in `language` (possibly none).
    pub fn builtin(language: &str) -> ExemplarStore {
        let mut store = ExemplarStore::default();
        for text in BUILTIN {
            let ex = Exemplar::from_file_text(text).expect("built-in exemplar is valid");
            if ex.language.eq_ignore_ascii_case(language) {
                store.add(ex).expect("built-in exemplar ids are unique");
            }
        }
        store
    }

    pub fn add(&mut self, exemplar: Exemplar) -> Result<(), PromptError> {
        if self.entries.iter().any(|e| e.id == exemplar.id) {
            return Err(PromptError::RejectedExemplar(format!("duplicate exemplar id `{}`", exemplar.id)));
        }
        exemplar.check()?;
        self.entries.push(exemplar);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.entries.iter()
    }

    /// The first `k` exemplars of `kind`, fewer when fewer exist.
    pub fn select_exemplars(&self, kind: ExemplarKind, k: usize) -> Result<Vec<&Exemplar>, PromptError> {
        let chosen: Vec<_> = self.entries.iter().filter(|e| e.kind() == kind).take(k).collect();
        if chosen.is_empty() && k > 0 {
            return Err(PromptError::NoExemplars(kind));
        }
        Ok(chosen)
    }
}

/// Formats exemplars as numbered example blocks.
pub fn render_exemplars(exemplars: &[&Exemplar], language: &str) -> String {
    let mut out = String::new();
    for (i, ex) in exemplars.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let label = match ex.kind() {
            ExemplarKind::Scot => "SCoT",
            ExemplarKind::Secot => "SeCoT",
        };
        let _ = write!(
            out,
            "### Example {}\n[REQUIREMENT]\n{}\n\n[{label}]\n{}\n[CODE]\n```{language}\n{}\n```\n",
            i + 1,
            ex.requirement,
            ex.chain,
            ex.code
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_python_store_has_three_of_each_kind() {
        let store = ExemplarStore::builtin("python");
        assert_eq!(store.select_exemplars(ExemplarKind::Scot, 10).unwrap().len(), 3);
        assert_eq!(store.select_exemplars(ExemplarKind::Secot, 10).unwrap().len(), 3);
    }

    #[test]
    fn selection_is_deterministic_and_ordered() {
        let store = ExemplarStore::builtin("python");
        let a: Vec<_> = store.select_exemplars(ExemplarKind::Scot, 2).unwrap().iter().map(|e| e.id.clone()).collect();
        let b: Vec<_> = store.select_exemplars(ExemplarKind::Scot, 2).unwrap().iter().map(|e| e.id.clone()).collect();
        assert_eq!(a, b);
        assert_eq!(a, ["scot-link-load", "scot-ecmp-hash"]);
    }

    #[test]
    fn other_languages_have_no_builtin_exemplars() {
        let store = ExemplarStore::builtin("rust");
        assert!(matches!(
            store.select_exemplars(ExemplarKind::Secot, 2),
            Err(PromptError::NoExemplars(ExemplarKind::Secot))
        ));
    }

    #[test]
    fn exemplar_with_invalid_chain_is_rejected() {
        let text = "---\nid: bad\nkind: scot\nlanguage: python\n---\n## Requirement\nx\n## Chain\nInput: a\nOutput: none\nStep: y\n## Code\n```python\npass\n```\n";
        let err = Exemplar::from_file_text(text).unwrap_err();
        assert!(err.to_string().contains("missing-io-type"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut store = ExemplarStore::builtin("python");
        let first = store.iter().next().unwrap().clone();
        assert!(store.add(first).is_err());
    }
}
