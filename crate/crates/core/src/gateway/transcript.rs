//! Origin-tagged prompt records and their JSON-lines form.
//!
//! A transcript file starts with a header line naming the session, the
//! backend and the stage; every following line is one [`PromptRecord`].

use std::fmt;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Automatic,
    Human,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Automatic => "automatic",
            Origin::Human => "human",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub index: u64,
    pub origin: Origin,
    pub stage: String,
    pub template_id: String,
    pub rendered_text: String,
    pub response_text: String,
    pub started_ms: u64,
    pub duration_ms: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<String>,
    /// Attachments went out as caption text because the backend is not
    /// multimodal.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub substituted_attachments: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    session_id: String,
    backend: String,
    stage: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub backend: String,
    pub stage: String,
    pub records: Vec<PromptRecord>,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            session_id: self.session_id.clone(),
            backend: self.backend.clone(),
            stage: self.stage.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> io::Result<Transcript> {
        let bad = |line: usize, e: serde_json::Error| io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {e}"));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty transcript"))?;
        let header: Header = serde_json::from_str(first).map_err(|e| bad(1, e))?;
        let records = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(i + 1, e)))
            .collect::<io::Result<Vec<PromptRecord>>>()?;
        Ok(Transcript {
            session_id: header.session_id,
            backend: header.backend,
            stage: header.stage,
            records,
        })
    }

    pub fn export(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }

    pub fn load(path: &Path) -> io::Result<Transcript> {
        Transcript::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.records.iter().filter(|r| r.origin == origin).count()
    }
}
