//! Structured chains of thought: typed I/O plus a body built only from
//! sequence, condition, loop and step nodes.
//!
//! Textual form, one construct per line:
//!
//! ```text
//! Input: demands: list[float], paths: int
//! Output: shares: list[float]
//! 1. Step: read the demand volumes
//! 2. Loop: for each demand in demands
//!    2.1. If: the demand is positive
//!       2.1.1. Step: divide the demand by the number of paths
//!    Else:
//!       2.1.2. Step: record an empty share
//!    End If
//! End Loop
//! 3. Step: return the shares
//! ```
//!
//! Leading numbering, bullets and indentation are ignored by the parser;
//! nesting comes from `If:`/`Else:`/`End If` and `Loop:`/`End Loop`.
//! `Input: none` declares no inputs and `Output: none` declares no value.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::ValidationReport;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoParam {
    pub name: String,
    /// `None` when the chain left the type out, which validation reports.
    pub ty: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoDecl {
    pub inputs: Vec<IoParam>,
    /// `None` stands for an explicit `Output: none`.
    pub output: Option<IoParam>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block(pub Vec<ScotNode>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScotNode {
    Step(String),
    Cond {
        condition: String,
        then: Block,
        otherwise: Option<Block>,
    },
    Loop {
        condition: String,
        body: Block,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Seq,
    Cond,
    Loop,
    Step,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scot {
    pub io: IoDecl,
    pub body: Block,
}

impl Block {
    fn depth(&self) -> usize {
        1 + self.0.iter().map(ScotNode::depth).max().unwrap_or(0)
    }

    fn collect_kinds(&self, out: &mut BTreeSet<NodeKind>) {
        out.insert(NodeKind::Seq);
        for node in &self.0 {
            node.collect_kinds(out);
        }
    }
}

impl ScotNode {
    fn depth(&self) -> usize {
        match self {
            ScotNode::Step(_) => 0,
            ScotNode::Cond { then, otherwise, .. } => {
                let inner = then.0.iter().chain(otherwise.iter().flat_map(|b| b.0.iter()));
                1 + inner.map(ScotNode::depth).max().unwrap_or(0)
            }
            ScotNode::Loop { body, .. } => 1 + body.0.iter().map(ScotNode::depth).max().unwrap_or(0),
        }
    }

    fn collect_kinds(&self, out: &mut BTreeSet<NodeKind>) {
        match self {
            ScotNode::Step(_) => {
                out.insert(NodeKind::Step);
            }
            ScotNode::Cond { then, otherwise, .. } => {
                out.insert(NodeKind::Cond);
                then.collect_kinds(out);
                if let Some(b) = otherwise {
                    b.collect_kinds(out);
                }
            }
            ScotNode::Loop { body, .. } => {
                out.insert(NodeKind::Loop);
                body.collect_kinds(out);
            }
        }
    }
}

impl Scot {
    /// Nesting depth counted in composite nodes: the root sequence is 1,
    /// every enclosing condition or loop adds one.
    pub fn depth(&self) -> usize {
        self.body.depth()
    }

    pub fn node_kinds(&self) -> BTreeSet<NodeKind> {
        let mut out = BTreeSet::new();
        self.body.collect_kinds(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: expected {expected}")]
pub struct ParseError {
    pub line: usize,
    pub expected: String,
}

fn err(line: usize, expected: impl Into<String>) -> ParseError {
    ParseError {
        line,
        expected: expected.into(),
    }
}

enum Line<'a> {
    Step(&'a str),
    If(&'a str),
    Else,
    EndIf,
    Loop(&'a str),
    EndLoop,
}

fn strip_marker(line: &str) -> &str {
    static MARKER: OnceLock<Regex> = OnceLock::new();
    let re = MARKER.get_or_init(|| Regex::new(r"^(?:\d+(?:\.\d+)*\.?|[-*+])\s+").expect("static regex"));
    let trimmed = line.trim();
    match re.find(trimmed) {
        Some(m) => &trimmed[m.end()..],
        None => trimmed,
    }
}

fn keyword<'a>(line: &'a str, kw: &str) -> Option<&'a str> {
    let head = line.get(..kw.len())?;
    head.eq_ignore_ascii_case(kw).then(|| line[kw.len()..].trim())
}

fn classify_line(line: &str) -> Option<Line<'_>> {
    let compact: String = line.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
    match compact.trim_end_matches(['.', ':']) {
        "endif" => return Some(Line::EndIf),
        "endloop" => return Some(Line::EndLoop),
        "else" => return Some(Line::Else),
        _ => {}
    }
    if let Some(rest) = keyword(line, "Step:") {
        return Some(Line::Step(rest));
    }
    if let Some(rest) = keyword(line, "If:") {
        return Some(Line::If(rest));
    }
    if let Some(rest) = keyword(line, "Loop:") {
        return Some(Line::Loop(rest));
    }
    None
}

fn parse_params(list: &str, line: usize) -> Result<Vec<IoParam>, ParseError> {
    let list = list.trim();
    if list.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    split_top_level(list)
        .into_iter()
        .map(|item| parse_param(item, line))
        .collect()
}

fn parse_param(item: &str, line: usize) -> Result<IoParam, ParseError> {
    let item = item.trim();
    let (name, ty) = match item.split_once(':') {
        Some((n, t)) => (n.trim(), Some(t.trim().to_string()).filter(|t| !t.is_empty())),
        None => (item, None),
    };
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(err(line, "a parameter of the form `name: type`"));
    }
    Ok(IoParam {
        name: name.to_string(),
        ty,
    })
}

/// Splits on commas that are not nested in brackets.
pub(crate) fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' | '(' | '{' | '<' => depth += 1,
            ']' | ')' | '}' | '>' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out.into_iter().filter(|p| !p.trim().is_empty()).collect()
}

struct Frame {
    kind: FrameKind,
    condition: String,
    then: Vec<ScotNode>,
    otherwise: Option<Vec<ScotNode>>,
    opened_at: usize,
}

#[derive(PartialEq)]
enum FrameKind {
    Root,
    Cond,
    Loop,
}

impl Frame {
    fn current(&mut self) -> &mut Vec<ScotNode> {
        match &mut self.otherwise {
            Some(b) => b,
            None => &mut self.then,
        }
    }
}

/// Parses the textual SCoT form. Blank lines, Markdown headings and code
/// fences are skipped.
pub fn parse_scot(text: &str) -> Result<Scot, ParseError> {
    let mut input: Option<Vec<IoParam>> = None;
    let mut output: Option<Option<IoParam>> = None;
    let mut stack = vec![Frame {
        kind: FrameKind::Root,
        condition: String::new(),
        then: Vec::new(),
        otherwise: None,
        opened_at: 0,
    }];
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with("```") {
            continue;
        }
        let line = strip_marker(raw);
        if let Some(rest) = keyword(line, "Input:") {
            if input.is_some() || stack.len() > 1 || !stack[0].then.is_empty() {
                return Err(err(lineno, "a single `Input:` line before the body"));
            }
            input = Some(parse_params(rest, lineno)?);
            continue;
        }
        if let Some(rest) = keyword(line, "Output:") {
            if output.is_some() || stack.len() > 1 || !stack[0].then.is_empty() {
                return Err(err(lineno, "a single `Output:` line before the body"));
            }
            output = Some(if rest.eq_ignore_ascii_case("none") {
                None
            } else {
                let mut params = parse_params(rest, lineno)?;
                if params.len() != 1 {
                    return Err(err(lineno, "exactly one output declaration"));
                }
                params.pop()
            });
            continue;
        }
        if input.is_none() {
            return Err(err(lineno, "`Input:` declaration"));
        }
        if output.is_none() {
            return Err(err(lineno, "`Output:` declaration"));
        }
        let parsed = classify_line(line)
            .ok_or_else(|| err(lineno, "`Step:`, `If:`, `Else:`, `End If`, `Loop:` or `End Loop`"))?;
        match parsed {
            Line::Step(s) => stack.last_mut().expect("root frame").current().push(ScotNode::Step(s.to_string())),
            Line::If(c) | Line::Loop(c) => {
                let kind = if matches!(parsed, Line::If(_)) { FrameKind::Cond } else { FrameKind::Loop };
                stack.push(Frame {
                    kind,
                    condition: c.to_string(),
                    then: Vec::new(),
                    otherwise: None,
                    opened_at: lineno,
                });
            }
            Line::Else => {
                let top = stack.last_mut().expect("root frame");
                if top.kind != FrameKind::Cond || top.otherwise.is_some() {
                    return Err(err(lineno, "`Else:` only once inside an open `If:`"));
                }
                top.otherwise = Some(Vec::new());
            }
            Line::EndIf | Line::EndLoop => {
                let want = if matches!(parsed, Line::EndIf) { FrameKind::Cond } else { FrameKind::Loop };
                if stack.last().map(|f| &f.kind) != Some(&want) {
                    return Err(err(lineno, "a matching open block for this `End`"));
                }
                let frame = stack.pop().expect("checked above");
                let node = match frame.kind {
                    FrameKind::Cond => ScotNode::Cond {
                        condition: frame.condition,
                        then: Block(frame.then),
                        otherwise: frame.otherwise.map(Block),
                    },
                    _ => ScotNode::Loop {
                        condition: frame.condition,
                        body: Block(frame.then),
                    },
                };
                stack.last_mut().expect("root frame").current().push(node);
            }
        }
    }

    if stack.len() > 1 {
        let open = stack.last().expect("non-empty");
        let what = if open.kind == FrameKind::Cond { "`End If`" } else { "`End Loop`" };
        return Err(err(last_line + 1, format!("{what} closing the block opened on line {}", open.opened_at)));
    }
    let input = input.ok_or_else(|| err(last_line + 1, "`Input:` declaration"))?;
    let output = output.ok_or_else(|| err(last_line + 1, "`Output:` declaration"))?;
    let root = stack.pop().expect("root frame");
    Ok(Scot {
        io: IoDecl { inputs: input, output },
        body: Block(root.then),
    })
}

fn fmt_param(p: &IoParam) -> String {
    match &p.ty {
        Some(t) => format!("{}: {}", p.name, t),
        None => p.name.clone(),
    }
}

impl fmt::Display for Scot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.io.inputs.is_empty() {
            writeln!(f, "Input: none")?;
        } else {
            let params: Vec<String> = self.io.inputs.iter().map(fmt_param).collect();
            writeln!(f, "Input: {}", params.join(", "))?;
        }
        match &self.io.output {
            Some(p) => writeln!(f, "Output: {}", fmt_param(p))?,
            None => writeln!(f, "Output: none")?,
        }
        write_block(f, &self.body, "", 0)
    }
}

fn write_block(f: &mut fmt::Formatter<'_>, block: &Block, prefix: &str, indent: usize) -> fmt::Result {
    let mut n = 0;
    write_nodes(f, &block.0, prefix, indent, &mut n)
}

fn write_nodes(
    f: &mut fmt::Formatter<'_>,
    nodes: &[ScotNode],
    prefix: &str,
    indent: usize,
    counter: &mut usize,
) -> fmt::Result {
    let pad = "   ".repeat(indent);
    for node in nodes {
        *counter += 1;
        let number = format!("{prefix}{counter}.");
        match node {
            ScotNode::Step(text) => writeln!(f, "{pad}{number} Step: {text}")?,
            ScotNode::Cond {
                condition,
                then,
                otherwise,
            } => {
                writeln!(f, "{pad}{number} If: {condition}")?;
                let mut inner = 0;
                write_nodes(f, &then.0, &number, indent + 1, &mut inner)?;
                if let Some(other) = otherwise {
                    writeln!(f, "{pad}Else:")?;
                    write_nodes(f, &other.0, &number, indent + 1, &mut inner)?;
                }
                writeln!(f, "{pad}End If")?;
            }
            ScotNode::Loop { condition, body } => {
                writeln!(f, "{pad}{number} Loop: {condition}")?;
                write_block(f, body, &number, indent + 1)?;
                writeln!(f, "{pad}End Loop")?;
            }
        }
    }
    Ok(())
}

/// Constructs outside sequence/condition/loop, matched on the natural
/// language of steps and conditions.
const BLACKLIST: &[(&str, &str)] = &[
    (r"\bgoto\b", "goto"),
    (r"\bgo to (?:step|line|label)\b", "goto"),
    (r"\bjump (?:back )?to\b", "goto"),
    (r"\brecurs\w*", "recursion"),
    (r"\bcall(?:s|ing)? itself\b", "recursion"),
    (r"\bthrows?\b", "exception-driven flow"),
    (r"\braises?\b", "exception-driven flow"),
    (r"\bexceptions?\b", "exception-driven flow"),
    (r"\btry\s*(?:/|-|and)?\s*(?:catch|except)\b", "exception-driven flow"),
    (r"\bcatch(?:es)?\b", "exception-driven flow"),
    (r"\bon error\b", "exception-driven flow"),
];

fn blacklist() -> &'static [(Regex, &'static str)] {
    static SET: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    SET.get_or_init(|| {
        BLACKLIST
            .iter()
            .map(|(p, name)| (Regex::new(&format!("(?i){p}")).expect("static regex"), *name))
            .collect()
    })
}

/// Returns the first blacklisted construct named in `text`, if any.
pub fn blacklisted_construct(text: &str) -> Option<(&'static str, String)> {
    blacklist()
        .iter()
        .find_map(|(re, name)| re.find(text).map(|m| (*name, m.as_str().to_string())))
}

pub fn validate_scot(scot: &Scot) -> ValidationReport {
    let mut report = ValidationReport::default();
    for p in scot.io.inputs.iter().chain(scot.io.output.iter()) {
        if p.ty.is_none() {
            report.error("missing-io-type", format!("parameter `{}` has no declared type", p.name));
        }
    }
    if scot.body.0.is_empty() {
        report.error("empty-branch", "the chain has no steps");
    }
    check_block(&scot.body, "body", &mut report);
    report
}

fn check_text(text: &str, at: &str, report: &mut ValidationReport) {
    if let Some((construct, token)) = blacklisted_construct(text) {
        report.error(
            "blacklisted-construct",
            format!("{at}: `{token}` introduces {construct}, outside sequence/condition/loop"),
        );
    }
}

fn check_block(block: &Block, at: &str, report: &mut ValidationReport) {
    for (i, node) in block.0.iter().enumerate() {
        let here = format!("{at}.{}", i + 1);
        match node {
            ScotNode::Step(text) => {
                if text.trim().is_empty() {
                    report.error("empty-step", format!("{here}: step has no text"));
                }
                check_text(text, &here, report);
            }
            ScotNode::Cond {
                condition,
                then,
                otherwise,
            } => {
                if condition.trim().is_empty() {
                    report.error("empty-condition", format!("{here}: condition text is empty"));
                }
                check_text(condition, &here, report);
                if then.0.is_empty() {
                    report.error("empty-branch", format!("{here}: then-branch is empty"));
                }
                check_block(then, &here, report);
                if let Some(other) = otherwise {
                    if other.0.is_empty() {
                        report.error("empty-branch", format!("{here}: else-branch is empty"));
                    }
                    check_block(other, &here, report);
                }
            }
            ScotNode::Loop { condition, body } => {
                if condition.trim().is_empty() {
                    report.error("empty-condition", format!("{here}: loop condition is empty"));
                }
                check_text(condition, &here, report);
                if body.0.is_empty() {
                    report.error("empty-branch", format!("{here}: loop body is empty"));
                }
                check_block(body, &here, report);
            }
        }
    }
}
