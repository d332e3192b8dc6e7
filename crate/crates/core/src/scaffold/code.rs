//! Source-level knowledge about the target language: where functions
//! start and end, what a placeholder body looks like and how annotations
//! are written.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::Annotation;
use crate::document::normalize_whitespace;
use super::scot::split_top_level;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    pub ty: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub name: String,
    pub params: Vec<Param>,
    #[serde(rename = "returns", skip_serializing_if = "Option::is_none")]
    pub ret: Option<String>,
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

impl Signature {
    /// Every parameter and the return value carry a type.
    pub fn is_explicit(&self) -> bool {
        self.ret.is_some() && self.params.iter().all(|p| p.ty.is_some())
    }

    /// Equal up to whitespace inside names and types.
    pub fn same_as(&self, other: &Signature) -> bool {
        let key = |s: &Signature| {
            (
                s.name.clone(),
                s.params.iter().map(|p| (p.name.clone(), p.ty.as_deref().map(squash))).collect::<Vec<_>>(),
                s.ret.as_deref().map(squash),
            )
        };
        key(self) == key(other)
    }

    /// Source form, e.g. `def f(a: int) -> int:`.
    pub fn display(&self) -> String {
        let params: Vec<String> = self
            .params
            .iter()
            .map(|p| match &p.ty {
                Some(t) => format!("{}: {t}", p.name),
                None => p.name.clone(),
            })
            .collect();
        match &self.ret {
            Some(r) => format!("def {}({}) -> {r}:", self.name, params.join(", ")),
            None => format!("def {}({}):", self.name, params.join(", ")),
        }
    }
}

/// A function located in a source file, by 0-based line ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocatedFunction {
    pub signature: Signature,
    /// Comment and decorator lines directly above the definition.
    pub preamble: std::ops::Range<usize>,
    /// Definition line(s) through the last body line.
    pub span: std::ops::Range<usize>,
    /// First line after the definition.
    pub body_start: usize,
}

pub trait LanguageAdapter: Send + Sync {
    fn language(&self) -> &str;
    /// Path of a module's main file, relative to the system workspace.
    fn module_file(&self, module: &str) -> String;
    fn functions(&self, source: &str) -> Vec<LocatedFunction>;
    /// Top-level statements that bring names into scope.
    fn imports(&self, source: &str) -> Vec<String>;
    /// Minimal buildable body carrying the fill marker.
    fn placeholder_body(&self, sig: &Signature) -> String;
    fn fill_marker(&self, function: &str) -> String;
    fn waiver_marker(&self, function: &str) -> String;
    fn annotation_lines(&self, annotation: &Annotation) -> Vec<String>;
    fn is_annotation_line(&self, line: &str) -> bool;
    /// Files the test adapter needs inside the workspace.
    fn harness_files(&self) -> Vec<(String, String)>;
}

pub fn adapter_for(language: &str) -> Option<Box<dyn LanguageAdapter>> {
    match language.to_ascii_lowercase().as_str() {
        "python" | "python3" => Some(Box::new(PythonAdapter)),
        _ => None,
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PythonAdapter;

fn def_start() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:async\s+)?def\s+([A-Za-z_][A-Za-z0-9_]*)\s*\(").expect("static regex"))
}

fn parse_params(inner: &str) -> Vec<Param> {
    split_top_level(inner)
        .into_iter()
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty() && p != "*" && p != "/")
        .map(|p| {
            let without_default = match find_top_level(&p, '=') {
                Some(i) => p[..i].trim().to_string(),
                None => p,
            };
            match without_default.split_once(':') {
                Some((n, t)) => Param {
                    name: n.trim().to_string(),
                    ty: Some(normalize_whitespace(t)).filter(|t| !t.is_empty()),
                },
                None => Param {
                    name: without_default.trim().to_string(),
                    ty: None,
                },
            }
        })
        .collect()
}

fn find_top_level(s: &str, target: char) -> Option<usize> {
    let mut depth = 0i32;
    for (i, c) in s.char_indices() {
        match c {
            '[' | '(' | '{' => depth += 1,
            ']' | ')' | '}' => depth -= 1,
            c if c == target && depth == 0 => return Some(i),
            _ => {}
        }
    }
    None
}

/// Parses a definition whose text may span several lines.
fn parse_def(text: &str) -> Option<Signature> {
    let caps = def_start().captures(text)?;
    let name = caps[1].to_string();
    let open = caps.get(0)?.end();
    let mut depth = 1i32;
    let mut close = None;
    for (i, c) in text[open..].char_indices() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => {
                depth -= 1;
                if depth == 0 {
                    close = Some(open + i);
                    break;
                }
            }
            _ => {}
        }
    }
    let close = close?;
    let params = parse_params(&text[open..close]);
    let rest = text[close + 1..].trim();
    let rest = rest.split_once('#').map_or(rest, |(code, _)| code).trim();
    let rest = rest.strip_suffix(':')?.trim();
    let ret = match rest.strip_prefix("->") {
        Some(r) => Some(normalize_whitespace(r)).filter(|r| !r.is_empty()),
        None if rest.is_empty() => None,
        None => return None,
    };
    Some(Signature { name, params, ret })
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

fn default_value(ret: Option<&str>) -> &'static str {
    let Some(ret) = ret else { return "None" };
    let base = ret.trim().split(['[', ' ']).next().unwrap_or("").to_ascii_lowercase();
    match base.as_str() {
        "int" => "0",
        "float" => "0.0",
        "str" => "\"\"",
        "bool" => "False",
        "list" => "[]",
        "dict" => "{}",
        "set" => "set()",
        "tuple" => "()",
        "bytes" => "b\"\"",
        _ => "None",
    }
}

const HARNESS: &str = r#"import importlib
import json
import os
import sys

ROOT = os.path.dirname(os.path.abspath(__file__))
for entry in sorted(os.listdir(ROOT)):
    if os.path.isdir(os.path.join(ROOT, entry)):
        sys.path.insert(0, os.path.join(ROOT, entry))
sys.path.insert(0, ROOT)

request = json.load(sys.stdin)
calls = request["calls"] if "calls" in request else [request]
result = None
for call in calls:
    module = importlib.import_module(call["module"])
    function = getattr(module, call["function"])
    args = [result if arg == "$prev" else arg for arg in call["args"]]
    result = function(*args)
print(json.dumps(result, separators=(",", ":"), sort_keys=True))
"#;

impl LanguageAdapter for PythonAdapter {
    fn language(&self) -> &str {
        "python"
    }

    fn module_file(&self, module: &str) -> String {
        format!("{module}/{module}.py")
    }

    fn functions(&self, source: &str) -> Vec<LocatedFunction> {
        let lines: Vec<&str> = source.lines().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < lines.len() {
            if !def_start().is_match(lines[i]) {
                i += 1;
                continue;
            }
            // the definition ends at the first line closing with `:` once
            // brackets balance
            let mut j = i;
            let mut text = lines[i].to_string();
            let mut sig = parse_def(&text);
            while sig.is_none() && j + 1 < lines.len() && j < i + 20 {
                j += 1;
                text.push(' ');
                text.push_str(lines[j].trim());
                sig = parse_def(&text);
            }
            let Some(signature) = sig else {
                i += 1;
                continue;
            };
            let mut end = j + 1;
            let mut last_body = j;
            while end < lines.len() {
                let l = lines[end];
                if l.trim().is_empty() {
                    end += 1;
                    continue;
                }
                if indent_of(l) == 0 {
                    break;
                }
                last_body = end;
                end += 1;
            }
            let mut start = i;
            while start > 0 {
                let above = lines[start - 1].trim_start();
                if indent_of(lines[start - 1]) == 0 && (above.starts_with('#') || above.starts_with('@')) {
                    start -= 1;
                } else {
                    break;
                }
            }
            out.push(LocatedFunction {
                signature,
                preamble: start..i,
                span: i..last_body + 1,
                body_start: j + 1,
            });
            i = last_body + 1;
        }
        out
    }

    fn imports(&self, source: &str) -> Vec<String> {
        source
            .lines()
            .filter(|l| indent_of(l) == 0 && (l.starts_with("import ") || l.starts_with("from ")))
            .map(|l| l.trim_end().to_string())
            .collect()
    }

    fn placeholder_body(&self, sig: &Signature) -> String {
        format!("    {}\n    return {}", self.fill_marker(&sig.name), default_value(sig.ret.as_deref()))
    }

    fn fill_marker(&self, function: &str) -> String {
        format!("# [REQUIREMENT] fill: {function}")
    }

    fn waiver_marker(&self, function: &str) -> String {
        format!("# waived: {function}")
    }

    fn annotation_lines(&self, a: &Annotation) -> Vec<String> {
        vec![
            format!("# [REQUIREMENT] {}", normalize_whitespace(&a.requirement.to_string())),
            format!("# [ORIGINAL TEXT] {}", normalize_whitespace(&a.original_text.to_string())),
            format!("# [VERIFIED] {}", if a.verified { "yes" } else { "no, needs review" }),
        ]
    }

    fn is_annotation_line(&self, line: &str) -> bool {
        let t = line.trim_start();
        ["# [REQUIREMENT] ", "# [ORIGINAL TEXT] ", "# [VERIFIED] "]
            .iter()
            .any(|p| t.starts_with(p))
            && !t.starts_with("# [REQUIREMENT] fill:")
    }

    fn harness_files(&self) -> Vec<(String, String)> {
        vec![("_harness.py".into(), HARNESS.into())]
    }
}
