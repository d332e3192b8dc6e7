//! Chat-completions client for hosted models.

use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{Backend, CompletionRequest, GatewayError, Role};

const IMAGE_EXTENSIONS: &[(&str, &str)] = &[("png", "image/png"), ("jpg", "image/jpeg"), ("jpeg", "image/jpeg"), ("gif", "image/gif"), ("webp", "image/webp")];

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry_backoff: Duration,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, timeout: Duration) -> RemoteBackend {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        RemoteBackend {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            agent: config.into(),
            retry_backoff: Duration::from_secs(2),
        }
    }

    pub fn with_retry_backoff(mut self, backoff: Duration) -> RemoteBackend {
        self.retry_backoff = backoff;
        self
    }

    fn body(&self, req: &CompletionRequest<'_>) -> Value {
        let last_user = req.messages.iter().rposition(|m| m.role == Role::User);
        let messages: Vec<Value> = req
            .messages
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let images: Vec<Value> = if Some(i) == last_user { image_parts(req) } else { Vec::new() };
                if images.is_empty() {
                    json!({"role": m.role.as_str(), "content": m.content})
                } else {
                    let mut parts = vec![json!({"type": "text", "text": m.content})];
                    parts.extend(images);
                    json!({"role": m.role.as_str(), "content": parts})
                }
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "max_tokens": req.max_output_tokens,
        });
        if let Some(t) = req.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(s) = req.seed {
            body["seed"] = json!(s);
        }
        body
    }

    fn post_once(&self, body: &Value) -> Result<(u16, String), GatewayError> {
        let mut request = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound | ureq::Error::Timeout(_) => {
                GatewayError::BackendUnreachable(format!("{}: {e}", self.endpoint))
            }
            other => GatewayError::BackendError {
                status: None,
                message: other.to_string(),
            },
        })?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| GatewayError::BackendError {
            status: Some(status),
            message: e.to_string(),
        })?;
        Ok((status, text))
    }
}

fn image_parts(req: &CompletionRequest<'_>) -> Vec<Value> {
    req.attachments
        .iter()
        .filter_map(|a| {
            let ext = a.path.extension()?.to_str()?.to_ascii_lowercase();
            let mime = IMAGE_EXTENSIONS.iter().find(|(e, _)| *e == ext)?.1;
            let bytes = std::fs::read(&a.path).ok()?;
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            Some(json!({"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}}))
        })
        .collect()
}

impl Backend for RemoteBackend {
    fn complete(&mut self, req: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        let body = self.body(req);
        let (mut status, mut text) = self.post_once(&body)?;
        if (500..600).contains(&status) {
            std::thread::sleep(self.retry_backoff);
            (status, text) = self.post_once(&body)?;
        }
        if !(200..300).contains(&status) {
            return Err(GatewayError::BackendError {
                status: Some(status),
                message: text.chars().take(500).collect(),
            });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| GatewayError::BackendError {
            status: Some(status),
            message: format!("response is not JSON: {e}"),
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::BackendError {
                status: Some(status),
                message: "response has no choices[0].message.content".into(),
            })
    }
}
