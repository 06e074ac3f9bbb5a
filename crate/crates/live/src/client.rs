use std::io::{BufRead, BufReader};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use csr_core::{BackendError, Clock, InferenceBackend, PrefillResult, ResourceCacheState, ResourceId, TokenSeq};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::text::{SyllableText, TokenText};

/// Longest error body kept in a protocol error.
const MAX_ERROR_BODY: usize = 2_048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Upstream {
    /// Server root (`http://host:8000`), its `/v1` path, or the full
    /// completions URL.
    pub base_url: String,
    pub model: String,
}

impl Upstream {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Upstream {
            base_url: base_url.into(),
            model: model.into(),
        }
    }

    pub fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/completions")
        } else {
            format!("{base}/v1/completions")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Upstreams for `R1` and `R2`, in that order.
    pub upstreams: [Upstream; 2],
    /// Environment variable holding the bearer token; no header when unset.
    pub api_key_env: Option<String>,
    pub timeout_seconds: f64,
}

impl LiveConfig {
    pub fn new(r1: Upstream, r2: Upstream) -> Self {
        LiveConfig {
            upstreams: [r1, r2],
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_seconds: 120.0,
        }
    }
}

struct Slot {
    agent: ureq::Agent,
    url: String,
    model: String,
    /// Held for the whole request: one prefill in flight per resource.
    serial: Mutex<()>,
    state: Mutex<SlotState>,
}

#[derive(Default)]
struct SlotState {
    cache: ResourceCacheState,
    busy_until: f64,
}

/// Two OpenAI-compatible completion servers acting as `R1` and `R2`.
///
/// Every prefill is a streaming completion with a single output token; TTFT
/// runs from dispatch of the request to the first streamed event carrying
/// text. The server's prefix cache is not observable, so results carry no
/// `i_star` or charged units. The locally tracked cache state records what
/// was last sent, which is what a prefix cache would hold at best.
pub struct LiveBackend {
    slots: [Slot; 2],
    api_key: Option<String>,
    text: Box<dyn TokenText>,
    clock: Arc<dyn Clock>,
}

impl LiveBackend {
    pub fn new(cfg: &LiveConfig, clock: Arc<dyn Clock>) -> Self {
        Self::with_text(cfg, clock, Box::new(SyllableText))
    }

    pub fn with_text(cfg: &LiveConfig, clock: Arc<dyn Clock>, text: Box<dyn TokenText>) -> Self {
        let api_key = cfg
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty());
        let timeout = Duration::from_secs_f64(cfg.timeout_seconds.max(0.001));
        let slot = |u: &Upstream| Slot {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            url: u.completions_url(),
            model: u.model.clone(),
            serial: Mutex::new(()),
            state: Mutex::new(SlotState::default()),
        };
        LiveBackend {
            slots: [slot(&cfg.upstreams[0]), slot(&cfg.upstreams[1])],
            api_key,
            text,
            clock,
        }
    }

    pub fn cache_state(&self, resource: ResourceId) -> ResourceCacheState {
        self.slots[resource.index()].state.lock().unwrap().cache.clone()
    }

    fn first_text_event(&self, resource: ResourceId, response: ureq::Response, t0: Instant) -> Result<f64, BackendError> {
        let stream_err = |message: String| BackendError::Stream { resource, message };
        let mut first_choice = None;
        for line in BufReader::new(response.into_reader()).lines() {
            let line = line.map_err(|e| BackendError::Transport {
                resource,
                message: e.to_string(),
            })?;
            let Some(payload) = line.strip_prefix("data:") else { continue };
            let payload = payload.trim();
            if payload == "[DONE]" {
                break;
            }
            let event: Value = serde_json::from_str(payload).map_err(|e| stream_err(format!("bad event {payload:?}: {e}")))?;
            if let Some(err) = event.get("error") {
                return Err(stream_err(format!("server error event: {err}")));
            }
            let Some(choice) = event.get("choices").and_then(|c| c.get(0)) else { continue };
            let elapsed = t0.elapsed().as_secs_f64();
            let text = choice
                .get("text")
                .or_else(|| choice.pointer("/delta/content"))
                .and_then(Value::as_str)
                .unwrap_or("");
            if !text.is_empty() {
                return Ok(elapsed);
            }
            first_choice.get_or_insert(elapsed);
        }
        // A single empty token still marks the end of prefill.
        first_choice.ok_or_else(|| stream_err("stream ended without a completion event".into()))
    }
}

impl InferenceBackend for LiveBackend {
    fn prefill(&self, resource: ResourceId, seq: &TokenSeq) -> Result<PrefillResult, BackendError> {
        if seq.is_empty() {
            return Err(BackendError::EmptySequence);
        }
        let slot = &self.slots[resource.index()];
        let _serial = slot.serial.lock().unwrap();
        let body = json!({
            "model": slot.model,
            "prompt": self.text.render(seq.as_slice()),
            "max_tokens": 1,
            "temperature": 0,
            "stream": true,
        })
        .to_string();
        let mut request = slot
            .agent
            .post(&slot.url)
            .set("Content-Type", "application/json")
            .set("Accept", "text/event-stream");
        if let Some(key) = &self.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }

        let started_at = self.clock.now();
        let t0 = Instant::now();
        let response = match request.send_string(&body) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                let mut body = r.into_string().unwrap_or_default();
                if body.len() > MAX_ERROR_BODY {
                    let cut = (0..=MAX_ERROR_BODY).rev().find(|&i| body.is_char_boundary(i)).unwrap_or(0);
                    body.truncate(cut);
                }
                return Err(BackendError::Protocol { resource, status, body });
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(BackendError::Transport {
                    resource,
                    message: t.to_string(),
                })
            }
        };
        let ttft = self.first_text_event(resource, response, t0)?;

        let completed_at = started_at + ttft;
        let mut state = slot.state.lock().unwrap();
        state.cache = ResourceCacheState {
            cached_seq: seq.clone(),
            last_prefill_at: started_at,
        };
        state.busy_until = state.busy_until.max(completed_at);
        Ok(PrefillResult {
            ttft,
            i_star: None,
            charged_units: None,
            started_at,
            completed_at,
        })
    }

    /// Forgets the locally tracked state; the server keeps its own cache.
    fn reset(&self, resource: ResourceId) {
        self.slots[resource.index()].state.lock().unwrap().cache = ResourceCacheState::default();
    }

    fn busy_until(&self, resource: ResourceId) -> f64 {
        let state = self.slots[resource.index()].state.lock().unwrap();
        state.busy_until.max(self.clock.now())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completions_url_forms() {
        assert_eq!(Upstream::new("http://h:8000", "m").completions_url(), "http://h:8000/v1/completions");
        assert_eq!(Upstream::new("http://h:8000/v1/", "m").completions_url(), "http://h:8000/v1/completions");
        assert_eq!(
            Upstream::new("http://h/x/v1/completions", "m").completions_url(),
            "http://h/x/v1/completions"
        );
    }
}
