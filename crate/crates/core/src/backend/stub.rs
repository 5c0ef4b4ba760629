//! Deterministic offline backend for tests and dry runs.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{AttemptError, Backend, BackendDescriptor, BackendRole, GenerationRequest, Transport, WireResponse};

/// Hex SHA-256 of a prompt, the key of a stub script.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum StubReply {
    Text(String),
    /// Fails every attempt with this error.
    Fail(AttemptError),
}

/// Scripted transport: prompt digest to reply, falling back to a default text.
#[derive(Debug)]
pub struct StubTransport {
    script: Mutex<HashMap<String, StubReply>>,
    transient: Mutex<HashMap<String, VecDeque<AttemptError>>>,
    default: String,
    latency: Option<Duration>,
    calls: AtomicU64,
    prompts: Mutex<Vec<String>>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl StubTransport {
    pub fn new(script: HashMap<String, StubReply>, default: impl Into<String>) -> Self {
        StubTransport {
            script: Mutex::new(script),
            transient: Mutex::default(),
            default: default.into(),
            latency: None,
            calls: AtomicU64::new(0),
            prompts: Mutex::default(),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    /// Builds a stub from digest-keyed reply texts.
    pub fn from_texts(script: HashMap<String, String>, default: impl Into<String>) -> Self {
        Self::new(
            script.into_iter().map(|(k, v)| (k, StubReply::Text(v))).collect(),
            default,
        )
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn script_prompt(&self, prompt: &str, reply: StubReply) {
        self.script.lock().unwrap().insert(prompt_digest(prompt), reply);
    }

    /// Queues one-shot failures returned before the scripted reply for `prompt`.
    pub fn push_failures(&self, prompt: &str, failures: Vec<AttemptError>) {
        self.transient
            .lock()
            .unwrap()
            .entry(prompt_digest(prompt))
            .or_default()
            .extend(failures);
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Every prompt received, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }

    pub fn max_concurrency(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }
}

impl Transport for StubTransport {
    fn send(&self, _descriptor: &BackendDescriptor, request: &GenerationRequest) -> Result<WireResponse, AttemptError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().unwrap().push(request.prompt.clone());
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(l) = self.latency {
            thread::sleep(l);
        }
        self.in_flight.fetch_sub(1, Ordering::SeqCst);

        let digest = prompt_digest(&request.prompt);
        if let Some(err) = self.transient.lock().unwrap().get_mut(&digest).and_then(VecDeque::pop_front) {
            return Err(err);
        }
        let reply = self.script.lock().unwrap().get(&digest).cloned();
        let text = match reply {
            Some(StubReply::Text(t)) => t,
            Some(StubReply::Fail(e)) => return Err(e),
            None => self.default.clone(),
        };
        Ok(WireResponse {
            prompt_tokens: request.prompt.split_whitespace().count() as u64,
            completion_tokens: text.split_whitespace().count() as u64,
            text,
        })
    }
}

/// Descriptor used for stub handles: no retries, effectively unlimited rate.
pub fn stub_descriptor(role: BackendRole, model_name: &str) -> BackendDescriptor {
    BackendDescriptor {
        role,
        endpoint_url: "stub://".into(),
        model_name: model_name.into(),
        timeout: Duration::from_secs(5),
        max_retries: 0,
        rate_limit: 1e9,
    }
}

/// Offline answering-model handle: scripted by prompt digest, `default` otherwise.
pub fn stub_backend(script: HashMap<String, String>, default: &str) -> Backend {
    let transport = Arc::new(StubTransport::from_texts(script, default));
    Backend::new(stub_descriptor(BackendRole::BlackBoxLlm, "stub"), transport).expect("stub descriptor is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_and_default() {
        let mut script = HashMap::new();
        script.insert(prompt_digest("p"), "B".to_string());
        let b = stub_backend(script, "D");
        assert_eq!(b.generate(&GenerationRequest::new("p", 4)).unwrap().text, "B");
        assert_eq!(b.generate(&GenerationRequest::new("other", 4)).unwrap().text, "D");
        assert_eq!(b.stats().network_calls, 2);
    }

    #[test]
    fn records_prompts() {
        let s = StubTransport::new(HashMap::new(), "x");
        let d = stub_descriptor(BackendRole::PkgModule, "m");
        s.send(&d, &GenerationRequest::new("hello world", 3)).unwrap();
        assert_eq!(s.prompts(), vec!["hello world".to_string()]);
        assert_eq!(s.calls(), 1);
    }
}
