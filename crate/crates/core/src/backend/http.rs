//! The completion protocol.
//!
//! `POST {endpoint_url}` with
//! `{"model", "prompt", "max_tokens", "temperature", "stop"}`; success is HTTP
//! 200 with `{"text": ..., "usage": {"prompt_tokens", "completion_tokens"}}`.
//! When `PKG_API_KEY` is set it is sent as a bearer token.

use std::io;

use serde::{Deserialize, Serialize};

use super::{AttemptError, BackendDescriptor, GenerationRequest, Transport, WireResponse};

pub const API_KEY_ENV: &str = "PKG_API_KEY";

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: &'a [String],
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[derive(Debug, Deserialize)]
struct WireBody {
    text: String,
    usage: WireUsage,
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("HttpTransport")
    }
}

impl HttpTransport {
    pub fn new(descriptor: &BackendDescriptor) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(descriptor.timeout).build();
        HttpTransport { agent }
    }
}

fn is_timeout(err: &ureq::Transport) -> bool {
    let mut source = std::error::Error::source(err);
    while let Some(e) = source {
        if let Some(io) = e.downcast_ref::<io::Error>() {
            if matches!(io.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        source = e.source();
    }
    err.to_string().contains("timed out")
}

impl Transport for HttpTransport {
    fn send(&self, descriptor: &BackendDescriptor, request: &GenerationRequest) -> Result<WireResponse, AttemptError> {
        let body = WireRequest {
            model: &descriptor.model_name,
            prompt: &request.prompt,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            stop: &request.stop,
        };
        let mut req = self.agent.post(&descriptor.endpoint_url);
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(&body) {
            Ok(resp) if resp.status() == 200 => {
                let text = resp.into_string().map_err(|e| {
                    if matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) {
                        AttemptError::Timeout
                    } else {
                        AttemptError::Transport(e.to_string())
                    }
                })?;
                let parsed: WireBody =
                    serde_json::from_str(&text).map_err(|e| AttemptError::Malformed(e.to_string()))?;
                Ok(WireResponse {
                    text: parsed.text,
                    prompt_tokens: parsed.usage.prompt_tokens,
                    completion_tokens: parsed.usage.completion_tokens,
                })
            }
            Ok(resp) => Err(AttemptError::Status {
                code: resp.status(),
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Status(code, resp)) => Err(AttemptError::Status {
                code,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) if is_timeout(&t) => Err(AttemptError::Timeout),
            Err(ureq::Error::Transport(t)) => Err(AttemptError::Transport(t.to_string())),
        }
    }
}
