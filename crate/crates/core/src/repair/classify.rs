//! Failure taxonomy and the diagnostic pattern table.

use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::sandbox::{ExecutionReport, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Major {
    Syntactic,
    Semantic,
}

/// Minor classes; the major class follows from the minor one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorClass {
    VariableAccess,
    IterableType,
    DataFormat,
    OtherSyntax,
    Invocation,
    Logical,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 6] = [
        ErrorClass::VariableAccess,
        ErrorClass::IterableType,
        ErrorClass::DataFormat,
        ErrorClass::OtherSyntax,
        ErrorClass::Invocation,
        ErrorClass::Logical,
    ];

    pub fn major(self) -> Major {
        match self {
            ErrorClass::Invocation | ErrorClass::Logical => Major::Semantic,
            _ => Major::Syntactic,
        }
    }

    pub fn minor(self) -> &'static str {
        match self {
            ErrorClass::VariableAccess => "VariableAccess",
            ErrorClass::IterableType => "IterableType",
            ErrorClass::DataFormat => "DataFormat",
            ErrorClass::OtherSyntax => "OtherSyntax",
            ErrorClass::Invocation => "Invocation",
            ErrorClass::Logical => "Logical",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{}", self.major(), self.minor())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown error class `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for ErrorClass {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<ErrorClass, UnknownClass> {
        ErrorClass::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| UnknownClass(s.to_string()))
    }
}

impl Serialize for ErrorClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ErrorClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<ErrorClass, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("pattern table is not valid TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("pattern {index}: {source}")]
    Regex { index: usize, source: regex::Error },
    #[error("pattern {index}: {source}")]
    Class { index: usize, source: UnknownClass },
    #[error("pattern {index}: Logical is the runtime fallback and cannot be matched")]
    LogicalPattern { index: usize },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    pattern: Vec<RawPattern>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPattern {
    class: String,
    regex: String,
}

#[derive(Debug, Clone)]
pub struct PatternTable {
    patterns: Vec<(ErrorClass, Regex)>,
}

impl PatternTable {
    pub fn builtin() -> PatternTable {
        PatternTable::from_toml(include_str!("../../data/diagnostic_patterns.toml")).expect("built-in pattern table")
    }

    pub fn from_toml(text: &str) -> Result<PatternTable, PatternError> {
        let raw: RawTable = toml::from_str(text)?;
        let mut patterns = Vec::new();
        for (index, p) in raw.pattern.into_iter().enumerate() {
            let class: ErrorClass = p.class.parse().map_err(|source| PatternError::Class { index, source })?;
            if class == ErrorClass::Logical {
                return Err(PatternError::LogicalPattern { index });
            }
            let re = Regex::new(&p.regex).map_err(|source| PatternError::Regex { index, source })?;
            patterns.push((class, re));
        }
        Ok(PatternTable { patterns })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    fn first_match(&self, text: &str, runtime: bool) -> Option<ErrorClass> {
        self.patterns
            .iter()
            .filter(|(c, _)| runtime || c.major() == Major::Syntactic)
            .find(|(_, re)| re.is_match(text))
            .map(|(c, _)| *c)
    }

    /// Build failures map to a syntactic class. A run that exits cleanly
    /// with the wrong result, or times out, is Logical. A crash is matched
    /// against every pattern, so an interpreter's runtime `NameError`
    /// still counts as a variable access error.
    pub fn classify(&self, report: &ExecutionReport) -> ErrorClass {
        let text = report.diagnostics();
        match report.phase {
            Phase::Compile => self.first_match(&text, false).unwrap_or(ErrorClass::OtherSyntax),
            Phase::Test | Phase::Run => {
                if report.timed_out || report.exit_code == Some(0) {
                    ErrorClass::Logical
                } else {
                    self.first_match(&text, true).unwrap_or(ErrorClass::Logical)
                }
            }
        }
    }
}
