//! Semantic chains of thought: data-flow steps, control-flow steps and a
//! short summary.
//!
//! ```text
//! Data Flow:
//! 1. shares <- demand, paths: divide the demand volume by the path count
//! 2. result <- shares: repeat the share once per path
//! Control Flow:
//! 1. If the path count is zero, return an empty list
//! 2. Otherwise build `result` from `shares`
//! Summary: equal split of one demand across its paths
//! ```
//!
//! A data-flow item reads `<value> <- <source>: <transformation>`.
//! Control-flow items are free text; identifiers in backticks are value
//! references and must name a data-flow value.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::report::ValidationReport;
use crate::scaffold::scot::ParseError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFlowStep {
    pub value: String,
    pub source: String,
    pub transformation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlFlowStep {
    pub text: String,
}

impl ControlFlowStep {
    /// Backticked identifiers mentioned by the step.
    pub fn value_refs(&self) -> Vec<&str> {
        static REF: OnceLock<Regex> = OnceLock::new();
        let re = REF.get_or_init(|| Regex::new(r"`([A-Za-z_][A-Za-z0-9_]*)`").expect("static regex"));
        re.captures_iter(&self.text)
            .map(|c| c.get(1).expect("group 1").as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Secot {
    pub data_flow: Vec<DataFlowStep>,
    pub control_flow: Vec<ControlFlowStep>,
    pub summary: String,
}

#[derive(PartialEq)]
enum Part {
    None,
    Data,
    Control,
    Summary,
}

fn header(line: &str) -> Option<(Part, &str)> {
    let bare = line.trim_start_matches('#').trim().trim_start_matches("**");
    for (name, part) in [("data flow", Part::Data), ("control flow", Part::Control), ("summary", Part::Summary)] {
        if bare.len() >= name.len() && bare[..name.len()].eq_ignore_ascii_case(name) {
            let rest = bare[name.len()..].trim_start_matches("**").trim_start();
            if let Some(rest) = rest.strip_prefix(':') {
                return Some((part, rest.trim_start_matches("**").trim()));
            }
            if rest.is_empty() {
                return Some((part, ""));
            }
        }
    }
    None
}

fn item(line: &str) -> Option<&str> {
    static MARKER: OnceLock<Regex> = OnceLock::new();
    let re = MARKER.get_or_init(|| Regex::new(r"^(?:\d+\.?|[-*+])\s+").expect("static regex"));
    re.find(line).map(|m| line[m.end()..].trim())
}

fn parse_data_step(text: &str, line: usize) -> Result<DataFlowStep, ParseError> {
    let expected = || ParseError {
        line,
        expected: "`<value> <- <source>: <transformation>`".into(),
    };
    let (value, rest) = text.split_once("<-").ok_or_else(expected)?;
    let (source, transformation) = rest.split_once(':').ok_or_else(expected)?;
    let value = value.trim().trim_matches('`');
    let valid = !value.is_empty() && value.chars().all(|c| c.is_alphanumeric() || c == '_');
    if !valid {
        return Err(expected());
    }
    Ok(DataFlowStep {
        value: value.to_string(),
        source: source.trim().to_string(),
        transformation: transformation.trim().to_string(),
    })
}

pub fn parse_secot(text: &str) -> Result<Secot, ParseError> {
    let mut part = Part::None;
    let mut data_flow = Vec::new();
    let mut control_flow = Vec::new();
    let mut summary: Vec<String> = Vec::new();
    let mut seen = (false, false);

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        if let Some((p, rest)) = header(line) {
            match p {
                Part::Data => seen.0 = true,
                Part::Control => seen.1 = true,
                Part::Summary if !rest.is_empty() => summary.push(rest.to_string()),
                _ => {}
            }
            part = p;
            continue;
        }
        match part {
            Part::None => {
                return Err(ParseError {
                    line: lineno,
                    expected: "`Data Flow:` section".into(),
                })
            }
            Part::Summary => summary.push(line.to_string()),
            Part::Data => {
                let body = item(line).ok_or_else(|| ParseError {
                    line: lineno,
                    expected: "a numbered or bulleted data-flow item".into(),
                })?;
                data_flow.push(parse_data_step(body, lineno)?);
            }
            Part::Control => {
                let body = item(line).ok_or_else(|| ParseError {
                    line: lineno,
                    expected: "a numbered or bulleted control-flow item".into(),
                })?;
                control_flow.push(ControlFlowStep { text: body.to_string() });
            }
        }
    }
    let end = text.lines().count() + 1;
    if !seen.0 {
        return Err(ParseError {
            line: end,
            expected: "`Data Flow:` section".into(),
        });
    }
    if !seen.1 {
        return Err(ParseError {
            line: end,
            expected: "`Control Flow:` section".into(),
        });
    }
    Ok(Secot {
        data_flow,
        control_flow,
        summary: summary.join(" "),
    })
}

impl fmt::Display for Secot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Data Flow:")?;
        for (i, s) in self.data_flow.iter().enumerate() {
            writeln!(f, "{}. {} <- {}: {}", i + 1, s.value, s.source, s.transformation)?;
        }
        writeln!(f, "Control Flow:")?;
        for (i, s) in self.control_flow.iter().enumerate() {
            writeln!(f, "{}. {}", i + 1, s.text)?;
        }
        writeln!(f, "Summary: {}", self.summary)
    }
}

pub fn validate_secot(secot: &Secot) -> ValidationReport {
    let mut report = ValidationReport::default();
    if secot.data_flow.is_empty() {
        report.error("empty-data-flow", "the data flow lists no steps");
    }
    if secot.control_flow.is_empty() {
        report.error("empty-control-flow", "the control flow lists no steps");
    }
    let declared: BTreeSet<&str> = secot.data_flow.iter().map(|s| s.value.as_str()).collect();
    for (i, step) in secot.control_flow.iter().enumerate() {
        for name in step.value_refs() {
            if !declared.contains(name) {
                report.error(
                    "undeclared-value",
                    format!("control step {} references `{name}`, which no data-flow step produces", i + 1),
                );
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
Data Flow:
1. shares <- demand, paths: divide the demand volume by the path count
2. result <- shares: repeat the share once per path
Control Flow:
1. If `paths` is zero, return an empty list
2. Otherwise build `result` from `shares`
Summary: equal split of one demand across its paths
";

    #[test]
    fn sample_parses_and_prints_back() {
        let secot = parse_secot(SAMPLE).unwrap();
        assert_eq!(secot.data_flow.len(), 2);
        assert_eq!(secot.control_flow.len(), 2);
        assert_eq!(secot.data_flow[0].source, "demand, paths");
        assert_eq!(secot.to_string(), SAMPLE);
    }

    #[test]
    fn reference_to_undeclared_value_is_reported() {
        let secot = parse_secot(SAMPLE).unwrap();
        let report = validate_secot(&secot);
        // `paths` is an input, never produced by a data-flow step
        assert_eq!(report.with_code("undeclared-value").count(), 1);

        let text = "Data Flow:\n- total <- xs: sum\nControl Flow:\n- add `tmp` to `total`\n";
        let report = validate_secot(&parse_secot(text).unwrap());
        let msgs: Vec<_> = report.with_code("undeclared-value").map(|f| f.message.clone()).collect();
        assert_eq!(msgs.len(), 1);
        assert!(msgs[0].contains("`tmp`"));
    }

    #[test]
    fn empty_control_flow_is_reported() {
        let secot = parse_secot("Data Flow:\n- a <- b: c\nControl Flow:\n").unwrap();
        assert_eq!(validate_secot(&secot).with_code("empty-control-flow").count(), 1);
    }

    #[test]
    fn headers_tolerate_markdown_decoration() {
        let text = "## Data Flow\n- a <- x: copy\n**Control Flow:**\n- return `a`\n**Summary:** copy\n";
        let secot = parse_secot(text).unwrap();
        assert!(validate_secot(&secot).is_empty());
        assert_eq!(secot.summary, "copy");
    }

    #[test]
    fn malformed_data_item_is_a_parse_error() {
        assert!(parse_secot("Data Flow:\n- just words\nControl Flow:\n- x\n").is_err());
        assert!(parse_secot("Control Flow:\n- x\n").is_err());
        assert!(parse_secot("Data Flow:\n- a <- b: c\n").is_err());
    }
}
