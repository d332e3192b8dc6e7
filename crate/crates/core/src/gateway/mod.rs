//! Chat-completion backends behind one session interface, with token
//! budgets and transcript logging.

mod clock;
mod remote;
mod stub;
mod transcript;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{AttachmentRef, RenderedPrompt};

pub use clock::{Clock, LogicalClock, WallClock};
pub use remote::RemoteBackend;
pub use stub::{StubEntry, StubScript};
pub use transcript::{Origin, PromptRecord, Transcript};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend profile rejected: {0}")]
    RejectedProfile(String),
    #[error("prompt needs an estimated {estimate} tokens, the context limit is {limit}")]
    BudgetExceeded { estimate: u64, limit: u64 },
    #[error("backend error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    BackendError { status: Option<u16>, message: String },
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("no scripted reply matches the prompt starting {prompt_head:?}")]
    StubExhausted { prompt_head: String },
    #[error("invalid stub script: {0}")]
    StubScript(String),
    #[error("transcript write failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    fn new(role: Role, content: impl Into<String>) -> Message {
        Message {
            role,
            content: content.into(),
        }
    }
}

/// What a backend receives for one completion.
#[derive(Debug)]
pub struct CompletionRequest<'a> {
    pub messages: &'a [Message],
    /// Files sent alongside the last user message (multimodal backends only).
    pub attachments: &'a [AttachmentRef],
    pub max_output_tokens: u64,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
}

pub trait Backend: Send {
    fn complete(&mut self, req: &CompletionRequest<'_>) -> Result<String, GatewayError>;

    /// Replay progress that must survive a restart, if the backend has any.
    fn progress(&self) -> Option<Vec<usize>> {
        None
    }

    fn restore_progress(&mut self, _progress: &[usize]) {}
}

impl Backend for StubScript {
    fn complete(&mut self, req: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        let prompt = req
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        self.answer(prompt)
    }

    fn progress(&self) -> Option<Vec<usize>> {
        Some(self.spent_indices())
    }

    fn restore_progress(&mut self, progress: &[usize]) {
        self.restore_spent(progress);
    }
}

pub type SharedBackend = Arc<Mutex<dyn Backend>>;

/// Published context and output limits of common hosted models.
pub const KNOWN_MODEL_LIMITS: &[(&str, u64, u64)] = &[
    ("gpt-4", 8_192, 4_096),
    ("gpt-4o", 128_000, 4_096),
    ("o1", 128_000, 65_536),
    ("claude-3.5-sonnet", 200_000, 8_192),
    ("deepseek-r1", 64_000, 8_192),
];

fn default_api_key_env() -> String {
    "PAPYRUS_API_KEY".into()
}

fn default_timeout_ms() -> u64 {
    120_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendProfile {
    pub name: String,
    /// `stub:<script path>` or an HTTP(S) chat-completions URL.
    pub endpoint: String,
    /// Model name sent to remote endpoints; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub max_context_tokens: u64,
    pub max_output_tokens: u64,
    #[serde(default)]
    pub multimodal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl BackendProfile {
    pub fn stub(name: &str, script: &Path, max_context_tokens: u64, max_output_tokens: u64) -> BackendProfile {
        BackendProfile {
            name: name.to_string(),
            endpoint: format!("stub:{}", script.display()),
            model: None,
            max_context_tokens,
            max_output_tokens,
            multimodal: false,
            temperature: None,
            seed: None,
            api_key_env: default_api_key_env(),
            timeout_ms: default_timeout_ms(),
        }
    }

    /// A remote profile using the published limits of `model`.
    pub fn known_model(model: &str, endpoint: &str) -> Option<BackendProfile> {
        let (_, ctx, out) = KNOWN_MODEL_LIMITS.iter().find(|(m, _, _)| *m == model)?;
        Some(BackendProfile {
            name: model.to_string(),
            endpoint: endpoint.to_string(),
            model: Some(model.to_string()),
            max_context_tokens: *ctx,
            max_output_tokens: *out,
            multimodal: false,
            temperature: None,
            seed: None,
            api_key_env: default_api_key_env(),
            timeout_ms: default_timeout_ms(),
        })
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let reject = |m: String| Err(GatewayError::RejectedProfile(format!("{}: {m}", self.name)));
        if self.name.trim().is_empty() {
            return reject("empty name".into());
        }
        if self.max_output_tokens == 0 {
            return reject("maxOutputTokens must be positive".into());
        }
        if self.max_context_tokens < self.max_output_tokens {
            return reject(format!(
                "maxContextTokens {} is below maxOutputTokens {}",
                self.max_context_tokens, self.max_output_tokens
            ));
        }
        if self.stub_script().is_none() && !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return reject(format!("endpoint `{}` is neither stub:<script> nor an http(s) URL", self.endpoint));
        }
        Ok(())
    }

    pub fn stub_script(&self) -> Option<&str> {
        self.endpoint.strip_prefix("stub:")
    }
}

/// Converts text to an approximate token count.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> u64;
}

/// One token per four characters, rounded up.
#[derive(Debug, Default, Clone, Copy)]
pub struct CharEstimator;

impl TokenEstimator for CharEstimator {
    fn estimate(&self, text: &str) -> u64 {
        estimate_tokens(text)
    }
}

/// `ceil(chars / 4)`: an estimate, not a tokenizer count.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Receives the full transcript after every send.
pub trait TranscriptSink: Send + Sync {
    fn write(&self, transcript: &Transcript) -> std::io::Result<()>;
}

/// Writes `<dir>/<session id>.jsonl`.
#[derive(Debug, Clone)]
pub struct DirSink(pub PathBuf);

impl TranscriptSink for DirSink {
    fn write(&self, transcript: &Transcript) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.0)?;
        transcript.export(&self.0.join(format!("{}.jsonl", transcript.session_id)))
    }
}

/// Gateway progress persisted across restarts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayState {
    pub next_session: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub backend_progress: BTreeMap<String, Vec<usize>>,
}

pub const DEFAULT_PREAMBLE: &str =
    "You are an expert software engineer reproducing a computer networking system from its research paper.";

/// Opens sessions and owns the backends they share.
pub struct Gateway {
    clock: Arc<dyn Clock>,
    estimator: Arc<dyn TokenEstimator>,
    sink: Option<Arc<dyn TranscriptSink>>,
    preamble: String,
    base_dir: PathBuf,
    backends: BTreeMap<String, SharedBackend>,
    pending_progress: BTreeMap<String, Vec<usize>>,
    next_session: u64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("next_session", &self.next_session)
            .field("backends", &self.backends.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Gateway {
    pub fn new(clock: Arc<dyn Clock>) -> Gateway {
        Gateway {
            clock,
            estimator: Arc::new(CharEstimator),
            sink: None,
            preamble: DEFAULT_PREAMBLE.to_string(),
            base_dir: PathBuf::from("."),
            backends: BTreeMap::new(),
            pending_progress: BTreeMap::new(),
            next_session: 0,
        }
    }

    pub fn with_estimator(mut self, estimator: Arc<dyn TokenEstimator>) -> Gateway {
        self.estimator = estimator;
        self
    }

    pub fn with_sink(mut self, sink: Arc<dyn TranscriptSink>) -> Gateway {
        self.sink = Some(sink);
        self
    }

    pub fn with_preamble(mut self, preamble: impl Into<String>) -> Gateway {
        self.preamble = preamble.into();
        self
    }

    /// Directory that relative stub script paths are resolved against.
    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Gateway {
        self.base_dir = dir.into();
        self
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Uses `backend` for every session opened on the profile `name`.
    pub fn insert_backend(&mut self, name: &str, backend: SharedBackend) {
        self.backends.insert(name.to_string(), backend);
    }

    pub fn state(&self) -> GatewayState {
        let mut progress = self.pending_progress.clone();
        for (name, b) in &self.backends {
            if let Some(p) = b.lock().expect("backend lock").progress() {
                progress.insert(name.clone(), p);
            }
        }
        GatewayState {
            next_session: self.next_session,
            backend_progress: progress,
        }
    }

    pub fn restore(&mut self, state: &GatewayState) {
        self.next_session = state.next_session;
        self.pending_progress = state.backend_progress.clone();
        for (name, b) in &self.backends {
            if let Some(p) = self.pending_progress.remove(name) {
                b.lock().expect("backend lock").restore_progress(&p);
            }
        }
    }

    fn backend_for(&mut self, profile: &BackendProfile) -> Result<SharedBackend, GatewayError> {
        if let Some(b) = self.backends.get(&profile.name) {
            return Ok(b.clone());
        }
        let backend: SharedBackend = match profile.stub_script() {
            Some(script) => {
                let path = self.base_dir.join(script);
                let mut stub = StubScript::load(&path)?;
                if let Some(p) = self.pending_progress.remove(&profile.name) {
                    stub.restore_spent(&p);
                }
                Arc::new(Mutex::new(stub))
            }
            None => {
                let key = std::env::var(&profile.api_key_env).ok();
                let model = profile.model.clone().unwrap_or_else(|| profile.name.clone());
                Arc::new(Mutex::new(RemoteBackend::new(
                    &profile.endpoint,
                    &model,
                    key,
                    Duration::from_millis(profile.timeout_ms),
                )))
            }
        };
        self.backends.insert(profile.name.clone(), backend.clone());
        Ok(backend)
    }

    pub fn open_session(&mut self, profile: &BackendProfile, stage: &str) -> Result<Session, GatewayError> {
        profile.validate()?;
        let backend = self.backend_for(profile)?;
        let id = format!("{stage}-{}", self.next_session);
        self.next_session += 1;
        Ok(Session {
            transcript: Transcript {
                session_id: id,
                backend: profile.name.clone(),
                stage: stage.to_string(),
                records: Vec::new(),
            },
            profile: profile.clone(),
            backend,
            clock: self.clock.clone(),
            estimator: self.estimator.clone(),
            sink: self.sink.clone(),
            preamble: self.preamble.clone(),
            turns: Vec::new(),
        })
    }

    /// Reopens a saved session so later prompts extend its transcript.
    pub fn resume_session(&mut self, profile: &BackendProfile, transcript: Transcript) -> Result<Session, GatewayError> {
        profile.validate()?;
        let backend = self.backend_for(profile)?;
        let turns = transcript
            .records
            .iter()
            .map(|r| (r.rendered_text.clone(), r.response_text.clone()))
            .collect();
        Ok(Session {
            transcript,
            profile: profile.clone(),
            backend,
            clock: self.clock.clone(),
            estimator: self.estimator.clone(),
            sink: self.sink.clone(),
            preamble: self.preamble.clone(),
            turns,
        })
    }
}

/// One conversation: prior turns are carried as context within budget.
pub struct Session {
    transcript: Transcript,
    profile: BackendProfile,
    backend: SharedBackend,
    clock: Arc<dyn Clock>,
    estimator: Arc<dyn TokenEstimator>,
    sink: Option<Arc<dyn TranscriptSink>>,
    preamble: String,
    turns: Vec<(String, String)>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.transcript.session_id)
            .field("records", &self.transcript.records.len())
            .finish()
    }
}

impl Session {
    pub fn id(&self) -> &str {
        &self.transcript.session_id
    }

    pub fn stage(&self) -> &str {
        &self.transcript.stage
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn export_transcript(&self, path: &Path) -> Result<(), GatewayError> {
        self.transcript.export(path)?;
        Ok(())
    }

    fn outgoing_text(&self, prompt: &RenderedPrompt) -> (String, bool) {
        if prompt.attachments.is_empty() || self.profile.multimodal {
            return (prompt.text.clone(), false);
        }
        let mut text = prompt.text.clone();
        for a in &prompt.attachments {
            text.push_str(&format!("\n[{} {}] {}", a.kind.label(), a.id, a.caption));
        }
        (text, true)
    }

    /// Sends `prompt` and records the exchange. Nothing is recorded when
    /// the prompt is over budget or the backend fails.
    pub fn send(&mut self, prompt: &RenderedPrompt, origin: Origin) -> Result<String, GatewayError> {
        let (text, substituted) = self.outgoing_text(prompt);
        let est = |s: &str| self.estimator.estimate(s);
        let base = est(&self.preamble) + est(&text);
        let limit = self.profile.max_context_tokens;
        if base > limit {
            return Err(GatewayError::BudgetExceeded { estimate: base, limit });
        }

        let history_budget = limit.saturating_sub(self.profile.max_output_tokens).saturating_sub(base);
        let mut used = 0;
        let mut kept = 0;
        for (q, a) in self.turns.iter().rev() {
            let cost = est(q) + est(a);
            if used + cost > history_budget {
                break;
            }
            used += cost;
            kept += 1;
        }
        let mut messages = vec![Message::new(Role::System, self.preamble.clone())];
        for (q, a) in &self.turns[self.turns.len() - kept..] {
            messages.push(Message::new(Role::User, q.clone()));
            messages.push(Message::new(Role::Assistant, a.clone()));
        }
        messages.push(Message::new(Role::User, text.clone()));

        let attachments: &[AttachmentRef] = if self.profile.multimodal { &prompt.attachments } else { &[] };
        let request = CompletionRequest {
            messages: &messages,
            attachments,
            max_output_tokens: self.profile.max_output_tokens,
            temperature: self.profile.temperature,
            seed: self.profile.seed,
        };
        let started = self.clock.now_ms();
        let reply = self.backend.lock().expect("backend lock").complete(&request)?;
        let finished = self.clock.now_ms();

        let record = PromptRecord {
            index: self.transcript.records.len() as u64,
            origin,
            stage: self.transcript.stage.clone(),
            template_id: prompt.template_id.clone(),
            rendered_text: text.clone(),
            response_text: reply.clone(),
            started_ms: started,
            duration_ms: finished.saturating_sub(started),
            tokens_in: base + used,
            tokens_out: est(&reply),
            attachments: prompt.attachments.iter().map(|a| a.id.clone()).collect(),
            substituted_attachments: substituted,
        };
        self.transcript.records.push(record);
        self.turns.push((text, reply.clone()));
        if let Some(sink) = &self.sink {
            sink.write(&self.transcript)?;
        }
        Ok(reply)
    }
}

#[cfg(test)]
mod tests;
