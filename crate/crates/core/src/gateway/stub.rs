//! Scripted replies for deterministic runs.
//!
//! A script is a JSON array of entries tried in order:
//!
//! ```json
//! [
//!   {"match": "Q1: Which networking sub-domain", "reply": "{\"sub_domain\": \"UNKNOWN\"}"},
//!   {"regex": "module \"demand_\\w+\"", "reply": "...", "repeat": true}
//! ]
//! ```
//!
//! `match` is a substring and `regex` a regular expression, both tested
//! against the outgoing prompt text. The first unused entry that matches
//! answers the prompt and is then spent, unless it sets `repeat`.

use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubEntry {
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub substring: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    pub reply: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

#[derive(Debug, Clone)]
enum Matcher {
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    fn matches(&self, text: &str) -> bool {
        match self {
            Matcher::Substring(s) => text.contains(s.as_str()),
            Matcher::Pattern(re) => re.is_match(text),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StubScript {
    matchers: Vec<Matcher>,
    entries: Vec<StubEntry>,
    spent: Vec<bool>,
}

impl StubScript {
    pub fn new(entries: Vec<StubEntry>) -> Result<StubScript, GatewayError> {
        let mut matchers = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let m = match (&e.substring, &e.regex) {
                (Some(s), None) => Matcher::Substring(s.clone()),
                (None, Some(r)) => Matcher::Pattern(
                    Regex::new(r).map_err(|err| GatewayError::StubScript(format!("entry {i}: {err}")))?,
                ),
                _ => {
                    return Err(GatewayError::StubScript(format!(
                        "entry {i}: exactly one of `match` and `regex` is required"
                    )))
                }
            };
            matchers.push(m);
        }
        let spent = vec![false; entries.len()];
        Ok(StubScript { matchers, entries, spent })
    }

    pub fn from_json(text: &str) -> Result<StubScript, GatewayError> {
        let entries: Vec<StubEntry> =
            serde_json::from_str(text).map_err(|e| GatewayError::StubScript(e.to_string()))?;
        StubScript::new(entries)
    }

    pub fn load(path: &Path) -> Result<StubScript, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::StubScript(format!("{}: {e}", path.display())))?;
        StubScript::from_json(&text)
    }

    /// The reply for `prompt`, spending the entry unless it repeats.
    pub fn answer(&mut self, prompt: &str) -> Result<String, GatewayError> {
        let hit = (0..self.entries.len()).find(|&i| !self.spent[i] && self.matchers[i].matches(prompt));
        match hit {
            Some(i) => {
                if !self.entries[i].repeat {
                    self.spent[i] = true;
                }
                Ok(self.entries[i].reply.clone())
            }
            None => Err(GatewayError::StubExhausted {
                prompt_head: prompt.chars().take(120).collect(),
            }),
        }
    }

    /// Indices of spent entries, for persisting progress across restarts.
    pub fn spent_indices(&self) -> Vec<usize> {
        self.spent.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i).collect()
    }

    pub fn restore_spent(&mut self, indices: &[usize]) {
        for &i in indices {
            if let Some(s) = self.spent.get_mut(i) {
                *s = true;
            }
        }
    }
}
