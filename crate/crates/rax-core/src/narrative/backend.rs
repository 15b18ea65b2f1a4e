//! Narrative backends: a deterministic offline template and an
//! OpenAI-compatible chat-completions client.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::models::argmax_class;
use crate::narrative::{
    parse_prediction, probability_sentence, EventPrompt, Lexicon, NarrativeError, NarrativeResult,
};
use crate::schema::{SeverityLabel, N_CLASSES};

const SYSTEM_TEXT: &str = "You are a road-safety analyst. Given a crash description, predict \
     the severity class, explain your reasoning briefly, and suggest one policy intervention.";

const TEMPLATE_POLICY: &str =
    "Targeted enforcement and an engineering review of this corridor are recommended.";

/// Wall-clock and concurrency limits for narrative generation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenerationLimits {
    pub timeout: Duration,
    pub max_retries: u32,
    /// Upper bound on concurrent backend calls in [`generate_batch`].
    pub max_in_flight: usize,
}

impl Default for GenerationLimits {
    fn default() -> Self {
        GenerationLimits { timeout: Duration::from_secs(30), max_retries: 2, max_in_flight: 4 }
    }
}

/// Everything a backend needs to narrate one event: the prompt, the
/// tabular class probabilities, and the attribution top features (most
/// important first).
#[derive(Debug, Clone)]
pub struct NarrativeRequest {
    pub collision_id: i64,
    pub prompt: EventPrompt,
    pub proba: [f64; N_CLASSES],
    pub shap_top: Vec<String>,
}

/// Offline backend: fills a fixed sentence frame from the request. Makes
/// no external calls, so its narratives mention exactly the top-3
/// attributed features and always parse.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateBackend;

/// Client for an OpenAI-compatible `/v1/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub base_url: String,
    pub model: String,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackend { base_url: base_url.into(), model: model.into() }
    }

    /// Reads `RAX_NARRATIVE_URL` (and optionally `RAX_NARRATIVE_MODEL`);
    /// `None` when the URL is unset.
    pub fn from_env() -> Option<Self> {
        let base_url = std::env::var("RAX_NARRATIVE_URL").ok()?;
        let model =
            std::env::var("RAX_NARRATIVE_MODEL").unwrap_or_else(|_| "default".to_string());
        Some(HttpBackend::new(base_url, model))
    }
}

pub enum Backend {
    Template(TemplateBackend),
    Http(HttpBackend),
}

impl Backend {
    fn id(&self) -> String {
        match self {
            Backend::Template(_) => "template".to_string(),
            Backend::Http(h) => format!("http:{}", h.model),
        }
    }
}

fn display_label(label: SeverityLabel) -> &'static str {
    match label {
        SeverityLabel::NoInjury => "No Injury",
        SeverityLabel::Injury => "Injury",
        SeverityLabel::Fatal => "Fatal",
    }
}

/// First line that announces a policy, stripped of its lead-in; empty
/// when the text has none.
fn extract_policy(text: &str) -> String {
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.to_lowercase().starts_with("policy") {
            let tail = trimmed.split_once(':').map(|(_, t)| t.trim()).unwrap_or(trimmed);
            return tail.to_string();
        }
    }
    String::new()
}

fn template_result(
    request: &NarrativeRequest,
    lexicon: &Lexicon,
    started: Instant,
    backend_id: String,
) -> NarrativeResult {
    let label = argmax_class(&request.proba);
    let signals: Vec<String> =
        request.shap_top.iter().take(3).map(|f| lexicon.surface(f)).collect();
    let explanation = format!(
        "Severity: {}. The strongest signals were {}. {}",
        display_label(label),
        signals.join("; "),
        probability_sentence(&request.proba),
    );
    NarrativeResult {
        collision_id: request.collision_id,
        predicted_class: Some(label),
        explanation,
        policy_suggestion: TEMPLATE_POLICY.to_string(),
        latency: started.elapsed(),
        backend_id,
        error: None,
    }
}

fn http_complete(
    http: &HttpBackend,
    prompt_text: &str,
    limits: &GenerationLimits,
) -> Result<String, NarrativeError> {
    let agent: ureq::Agent =
        ureq::Agent::config_builder().timeout_global(Some(limits.timeout)).build().into();
    let url = format!("{}/v1/chat/completions", http.base_url.trim_end_matches('/'));
    let body = json!({
        "model": http.model,
        "temperature": 0,
        "max_tokens": 256,
        "messages": [
            {"role": "system", "content": SYSTEM_TEXT},
            {"role": "user", "content": prompt_text},
        ],
    });

    let mut last = String::new();
    for attempt in 0..=limits.max_retries {
        if attempt > 0 {
            // 100ms, 200ms, 400ms, ... so total blocking stays below
            // timeout * (max_retries + 1) + 100ms * (2^max_retries - 1).
            std::thread::sleep(Duration::from_millis(100) * (1 << (attempt - 1)));
        }
        match agent.post(&url).send_json(&body) {
            Ok(mut resp) => match resp.body_mut().read_json::<serde_json::Value>() {
                Ok(v) => {
                    if let Some(content) = v["choices"][0]["message"]["content"].as_str() {
                        return Ok(content.to_string());
                    }
                    last = "response missing choices[0].message.content".to_string();
                }
                Err(e) => last = format!("unreadable response body: {e}"),
            },
            Err(e) => last = e.to_string(),
        }
    }
    Err(NarrativeError::Transport { attempts: limits.max_retries + 1, last })
}

/// Runs one narrative generation. The template backend is infallible; the
/// HTTP backend retries transport failures with exponential backoff and
/// errors out once attempts are exhausted. Text in which no severity
/// keyword can be found is not an error: the result comes back with
/// `predicted_class` absent and an `"unparseable_label"` note.
pub fn generate(
    backend: &Backend,
    request: &NarrativeRequest,
    limits: &GenerationLimits,
    lexicon: &Lexicon,
) -> Result<NarrativeResult, NarrativeError> {
    let started = Instant::now();
    match backend {
        Backend::Template(_) => Ok(template_result(request, lexicon, started, backend.id())),
        Backend::Http(http) => {
            let content = http_complete(http, &request.prompt.full_text(), limits)?;
            let predicted = parse_prediction(&content);
            let error = if predicted.is_none() {
                Some("unparseable_label".to_string())
            } else {
                None
            };
            Ok(NarrativeResult {
                collision_id: request.collision_id,
                predicted_class: predicted,
                explanation: content.clone(),
                policy_suggestion: extract_policy(&content),
                latency: started.elapsed(),
                backend_id: backend.id(),
                error,
            })
        }
    }
}

/// Generates narratives for a batch of events, at most
/// `limits.max_in_flight` HTTP calls in flight at a time. Results come
/// back in request order regardless of completion order; each carries its
/// `collision_id`. The template backend runs inline.
pub fn generate_batch(
    backend: &Backend,
    requests: &[NarrativeRequest],
    limits: &GenerationLimits,
    lexicon: &Lexicon,
) -> Vec<Result<NarrativeResult, NarrativeError>> {
    match backend {
        Backend::Template(_) => {
            requests.iter().map(|r| generate(backend, r, limits, lexicon)).collect()
        }
        Backend::Http(_) => {
            if requests.is_empty() {
                return Vec::new();
            }
            let out: Mutex<Vec<Option<Result<NarrativeResult, NarrativeError>>>> =
                Mutex::new((0..requests.len()).map(|_| None).collect());
            let next = AtomicUsize::new(0);
            let workers = limits.max_in_flight.max(1).min(requests.len());
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= requests.len() {
                            break;
                        }
                        let r = generate(backend, &requests[i], limits, lexicon);
                        out.lock().expect("batch output lock")[i] = Some(r);
                    });
                }
            });
            out.into_inner()
                .expect("batch output lock")
                .into_iter()
                .map(|slot| slot.expect("every request produced a result"))
                .collect()
        }
    }
}
