//! Prompt-and-parse loop shared by the generation stages.

use thiserror::Error;

use crate::gateway::{GatewayError, Origin, Session};
use crate::prompting::{ParsedPayload, PromptError, PromptKit, RenderedPrompt};

/// Automatic re-asks after a contract violation before a stage gives up.
pub const DEFAULT_RETRY_LIMIT: u32 = 3;

#[derive(Debug, Error)]
pub enum StageError {
    #[error("stage `{stage}` failed: {reason}")]
    Failed { stage: String, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl StageError {
    pub fn failed(stage: &str, reason: impl Into<String>) -> StageError {
        StageError::Failed {
            stage: stage.to_string(),
            reason: reason.into(),
        }
    }
}

/// Sends `prompt`, parses the reply under its template's contract and
/// hands the payload to `accept`. A contract violation or a rejection by
/// `accept` is fed back with the original prompt, at most `retries` times.
pub fn ask<T>(
    session: &mut Session,
    kit: &PromptKit,
    prompt: &RenderedPrompt,
    retries: u32,
    stage: &str,
    mut accept: impl FnMut(ParsedPayload, &str) -> Result<T, String>,
) -> Result<T, StageError> {
    let mut current = prompt.clone();
    let mut last = String::new();
    for _ in 0..=retries {
        let raw = session.send(&current, Origin::Automatic)?;
        let verdict = kit
            .parse(&prompt.template_id, &raw)
            .map_err(|v| v.0)
            .and_then(|payload| accept(payload, &raw));
        match verdict {
            Ok(v) => return Ok(v),
            Err(reason) => {
                current = prompt.reask(&reason);
                last = reason;
            }
        }
    }
    Err(StageError::failed(
        stage,
        format!("no acceptable answer after {} attempts: {last}", retries + 1),
    ))
}
