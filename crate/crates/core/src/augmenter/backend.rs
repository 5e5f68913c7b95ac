//! LLM backends: scripted/synthetic stub, transcript replay, recording wrapper,
//! request budget and a generic chat-completion HTTP client.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::subgraph::{prompt_view, IA_HEADER, II_HEADER, UI_HEADER};
use super::View;
use crate::error::{BackendError, DataError};

/// Synchronous text-in, text-out model.
pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, prompt: &str) -> Result<String, BackendError>;
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).send(prompt)
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).send(prompt)
    }
}

/// 64-bit seed derived from a base seed and a prompt.
pub fn prompt_seed(seed: u64, prompt: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

enum StubMode {
    /// Fixed response per view; `None` prompts (unknown view) get `fallback`.
    Scripted {
        user: String,
        item: String,
        fallback: String,
    },
    /// Plausible advice derived from the triplets listed in the prompt.
    Synthetic {
        seed: u64,
        add_rate: f64,
        del_rate: f64,
        prune_rate: f64,
    },
}

/// Offline backend used by tests and demos.
pub struct StubBackend {
    mode: StubMode,
}

impl StubBackend {
    pub fn scripted(user: impl Into<String>, item: impl Into<String>) -> Self {
        let user = user.into();
        StubBackend {
            mode: StubMode::Scripted {
                fallback: user.clone(),
                user,
                item: item.into(),
            },
        }
    }

    /// Same response for every prompt.
    pub fn constant(response: impl Into<String>) -> Self {
        let r = response.into();
        Self::scripted(r.clone(), r)
    }

    pub fn synthetic(seed: u64) -> Self {
        StubBackend {
            mode: StubMode::Synthetic {
                seed,
                add_rate: 0.5,
                del_rate: 0.1,
                prune_rate: 0.05,
            },
        }
    }
}

fn parse_lines(prompt: &str) -> (Vec<[String; 3]>, Vec<[String; 3]>) {
    let mut section = None;
    let mut ui = Vec::new();
    let mut ia = Vec::new();
    for line in prompt.lines() {
        match line {
            UI_HEADER => section = Some(0),
            IA_HEADER => section = Some(1),
            II_HEADER => section = Some(2),
            l if l.starts_with('(') && l.ends_with(')') => {
                let parts: Vec<&str> = l[1..l.len() - 1].split(", ").collect();
                if parts.len() != 3 {
                    continue;
                }
                let t = [
                    parts[0].to_owned(),
                    parts[1].to_owned(),
                    parts[2].to_owned(),
                ];
                match section {
                    Some(0) => ui.push(t),
                    Some(1) => ia.push(t),
                    _ => {}
                }
            }
            "" => {}
            _ => section = None,
        }
    }
    (ui, ia)
}

fn synthetic_advice(
    prompt: &str,
    seed: u64,
    add_rate: f64,
    del_rate: f64,
    prune_rate: f64,
) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(prompt_seed(seed, prompt));
    let view = prompt_view(prompt);
    let (ui, ia) = parse_lines(prompt);
    let existing: BTreeSet<&[String; 3]> = ia.iter().collect();
    let items: Vec<&String> = ia
        .iter()
        .map(|t| &t[0])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let facts: Vec<(&String, &String)> = ia
        .iter()
        .map(|t| (&t[1], &t[2]))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut add = BTreeSet::new();
    if !items.is_empty() && !facts.is_empty() {
        let n_add = (ia.len() as f64 * add_rate).ceil() as usize;
        for _ in 0..n_add {
            let item = items[rng.gen_range(0..items.len())];
            let (r, a) = facts[rng.gen_range(0..facts.len())];
            let cand = [item.clone(), r.clone(), a.clone()];
            if !existing.contains(&cand) {
                add.insert(cand);
            }
        }
    }
    let del: Vec<&[String; 3]> = ia.iter().filter(|_| rng.gen_bool(del_rate)).collect();
    let mut obj = serde_json::json!({ "add_ia": add, "del_ia": del });
    if view == Some(View::User) {
        let prune: Vec<&[String; 3]> = ui.iter().filter(|_| rng.gen_bool(prune_rate)).collect();
        obj["del_ui"] = serde_json::json!(prune);
    }
    obj.to_string()
}

/// Picks the path whose rendered confidence pair has the largest minimum.
fn synthetic_explanation(prompt: &str) -> String {
    let mut best: Option<(usize, f64)> = None;
    for line in prompt.lines() {
        let Some(rest) = line.strip_prefix("Path ") else {
            continue;
        };
        let Some((k, body)) = rest.split_once(':') else {
            continue;
        };
        let Some(pair) = body.rsplit_once('[').and_then(|(_, p)| p.strip_suffix(']')) else {
            continue;
        };
        let vals: Vec<f64> = pair.split(", ").filter_map(|v| v.parse().ok()).collect();
        if let (Ok(k), [a, b]) = (k.parse::<usize>(), vals.as_slice()) {
            let m = a.min(*b);
            if best.map_or(true, |(_, bm)| m > bm) {
                best = Some((k, m));
            }
        }
    }
    let k = best.map_or(0, |b| b.0);
    format!(
        "{} {k}\nThis one lines up with what you keep coming back to.",
        crate::explain::SELECTED_PATH
    )
}

impl LlmBackend for StubBackend {
    fn id(&self) -> &str {
        "stub"
    }

    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        Ok(match &self.mode {
            StubMode::Scripted {
                user,
                item,
                fallback,
            } => match prompt_view(prompt) {
                Some(View::User) => user.clone(),
                Some(View::Item) => item.clone(),
                None => fallback.clone(),
            },
            StubMode::Synthetic { .. } if prompt.starts_with(crate::explain::EXPLAIN_TAG) => {
                synthetic_explanation(prompt)
            }
            StubMode::Synthetic {
                seed,
                add_rate,
                del_rate,
                prune_rate,
            } => synthetic_advice(prompt, *seed, *add_rate, *del_rate, *prune_rate),
        })
    }
}

/// One prompt/response exchange of a transcript file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TranscriptEntry {
    pub prompt: String,
    pub response: String,
}

/// Answers from a recorded JSONL transcript, matching prompts exactly.
pub struct ReplayBackend {
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        ReplayBackend {
            responses: entries
                .into_iter()
                .map(|e| (e.prompt, e.response))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: TranscriptEntry =
                serde_json::from_str(line).map_err(|e| DataError::Invalid {
                    path: path.to_owned(),
                    line: n + 1,
                    message: e.to_string(),
                })?;
            entries.push(e);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl LlmBackend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        self.responses
            .get(prompt)
            .cloned()
            .ok_or(BackendError::ReplayMiss)
    }
}

/// Wraps a backend and keeps every successful exchange for later replay.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<BTreeMap<String, String>>,
}

impl<B: LlmBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        let log = self.log.lock().expect("transcript lock");
        log.iter()
            .map(|(p, r)| TranscriptEntry {
                prompt: p.clone(),
                response: r.clone(),
            })
            .collect()
    }

    /// Writes the transcript as JSONL, sorted by prompt.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut body = String::new();
        for e in self.entries() {
            body.push_str(&serde_json::to_string(&e).expect("entry serializes"));
            body.push('\n');
        }
        crate::io::write_atomic(path, body.as_bytes())
    }
}

impl<B: LlmBackend> LlmBackend for RecordingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        let r = self.inner.send(prompt)?;
        self.log
            .lock()
            .expect("transcript lock")
            .insert(prompt.to_owned(), r.clone());
        Ok(r)
    }
}

/// Caps the number of requests forwarded to the inner backend.
pub struct BudgetedBackend<B> {
    inner: B,
    remaining: AtomicUsize,
}

impl<B: LlmBackend> BudgetedBackend<B> {
    pub fn new(inner: B, budget: usize) -> Self {
        BudgetedBackend {
            inner,
            remaining: AtomicUsize::new(budget),
        }
    }

    pub fn remaining(&self) -> usize {
        self.remaining.load(Ordering::SeqCst)
    }
}

impl<B: LlmBackend> LlmBackend for BudgetedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        self.remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .map_err(|_| BackendError::BudgetExhausted)?;
        self.inner.send(prompt)
    }
}

pub const ENV_URL: &str = "CKG_LLM_URL";
pub const ENV_KEY: &str = "CKG_LLM_KEY";
pub const ENV_MODEL: &str = "CKG_LLM_MODEL";

/// Chat-completion endpoint speaking the common `messages`/`choices` JSON shape.
pub struct HttpBackend {
    url: String,
    key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, key: Option<String>, model: impl Into<String>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_secs(120))
            .build();
        HttpBackend {
            url: url.into(),
            key,
            model: model.into(),
            agent,
        }
    }

    /// Reads `CKG_LLM_URL` (required), `CKG_LLM_KEY` and `CKG_LLM_MODEL`.
    pub fn from_env() -> Result<Self, BackendError> {
        let url = std::env::var(ENV_URL)
            .map_err(|_| BackendError::NotConfigured(format!("{ENV_URL} is not set")))?;
        let key = std::env::var(ENV_KEY).ok();
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-3.5-turbo".to_owned());
        Ok(Self::new(url, key, model))
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut req = self
            .agent
            .post(&self.url)
            .set("Content-Type", "application/json");
        if let Some(k) = &self.key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        let resp: serde_json::Value = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?
            .into_json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        resp.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| {
                BackendError::Transport("response has no choices[0].message.content".into())
            })
    }
}
