use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::SectionKind;

const BUILTIN_ALIASES: &str = include_str!("../../data/section_aliases.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationSource {
    Hint,
    Alias,
    /// No alias matched; the heading was filed under Design.
    Fallback,
}

/// Heading alias table. Exact entries are checked before prefix entries.
#[derive(Debug, Clone)]
pub struct AliasTable {
    exact: BTreeMap<String, SectionKind>,
    prefixes: Vec<(String, SectionKind)>,
}

impl AliasTable {
    pub const FALLBACK: SectionKind = SectionKind::Design;

    pub fn builtin() -> AliasTable {
        static TABLE: OnceLock<AliasTable> = OnceLock::new();
        TABLE
            .get_or_init(|| AliasTable::from_toml(BUILTIN_ALIASES).expect("built-in alias table parses"))
            .clone()
    }

    pub fn from_toml(src: &str) -> Result<AliasTable, String> {
        let raw: BTreeMap<String, Vec<String>> = toml::from_str(src).map_err(|e| e.to_string())?;
        let mut exact = BTreeMap::new();
        let mut prefixes = Vec::new();
        for (key, aliases) in raw {
            let kind = SectionKind::parse(&key).ok_or_else(|| format!("unknown section kind `{key}`"))?;
            for alias in aliases {
                let alias = alias.trim().to_lowercase();
                if let Some(prefix) = alias.strip_suffix('*') {
                    prefixes.push((prefix.trim_end().to_string(), kind));
                } else if let Some(previous) = exact.insert(alias.clone(), kind) {
                    if previous != kind {
                        return Err(format!("alias `{alias}` maps to both {previous} and {kind}"));
                    }
                }
            }
        }
        Ok(AliasTable { exact, prefixes })
    }

    pub fn classify(&self, heading: &str, hint: Option<&str>) -> (SectionKind, ClassificationSource) {
        if let Some(kind) = hint.and_then(SectionKind::parse) {
            return (kind, ClassificationSource::Hint);
        }
        let key = normalize_heading(heading);
        if let Some(kind) = self.exact.get(&key) {
            return (*kind, ClassificationSource::Alias);
        }
        if let Some((_, kind)) = self.prefixes.iter().find(|(p, _)| key.starts_with(p.as_str())) {
            return (*kind, ClassificationSource::Alias);
        }
        (Self::FALLBACK, ClassificationSource::Fallback)
    }
}

/// Lowercases and strips leading section numbering ("3", "3.2.", "IV.").
pub fn normalize_heading(heading: &str) -> String {
    static NUMBERING: OnceLock<Regex> = OnceLock::new();
    let re = NUMBERING
        .get_or_init(|| Regex::new(r"^\s*(?:\d+(?:\.\d+)*\.?|[IVXLC]+\.)\s+").expect("static regex"));
    let stripped = re.replace(heading, "");
    super::normalize_whitespace(&stripped).to_lowercase()
}
