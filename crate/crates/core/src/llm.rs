//! Chat-completion backend: prompt templates, a minimal JSON-over-HTTP
//! client with retry/backoff, and a scripted mock for deterministic tests.
//!
//! The auth token is read from an environment variable at request time and is
//! never stored, logged, or written to transcripts.

use crate::diagnosis::EvidenceReport;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::sync::Mutex;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("missing placeholder binding: {0}")]
    MissingPlaceholder(String),
    #[error("request timed out")]
    Timeout,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("http status {0}: {1}")]
    Status(u16, String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed completion payload: {0}")]
    Payload(String),
    #[error("mock script exhausted for {0:?}")]
    ScriptExhausted(TemplateId),
}

impl LlmError {
    /// Transient failures retry; auth and payload problems do not.
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Timeout | LlmError::Transport(_) => true,
            LlmError::Status(code, _) => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

/// The shipped prompt templates (bodies under `templates/`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    GenericDiagnosis,
    CovariateCombinations,
    DiagnosisProbability,
    GenericAdaptation,
    SubgroupRemoval,
    SubgroupRetrain,
}

impl TemplateId {
    pub fn body(self) -> &'static str {
        match self {
            TemplateId::GenericDiagnosis => include_str!("../templates/generic_diagnosis.txt"),
            TemplateId::CovariateCombinations => {
                include_str!("../templates/covariate_combinations.txt")
            }
            TemplateId::DiagnosisProbability => {
                include_str!("../templates/diagnosis_probability.txt")
            }
            TemplateId::GenericAdaptation => include_str!("../templates/generic_adaptation.txt"),
            TemplateId::SubgroupRemoval => include_str!("../templates/subgroup_removal.txt"),
            TemplateId::SubgroupRetrain => include_str!("../templates/subgroup_retrain.txt"),
        }
    }

    pub fn all() -> [TemplateId; 6] {
        [
            TemplateId::GenericDiagnosis,
            TemplateId::CovariateCombinations,
            TemplateId::DiagnosisProbability,
            TemplateId::GenericAdaptation,
            TemplateId::SubgroupRemoval,
            TemplateId::SubgroupRetrain,
        ]
    }
}

/// Substitute `{name}` placeholders. Every placeholder in the body must be
/// bound; empty values render as `None` (the empty-context convention).
pub fn render(id: TemplateId, bindings: &BTreeMap<String, String>) -> Result<String, LlmError> {
    let body = id.body();
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let close = tail
            .find('}')
            .ok_or_else(|| LlmError::MissingPlaceholder("unterminated placeholder".into()))?;
        let name = &tail[..close];
        let value = bindings
            .get(name)
            .ok_or_else(|| LlmError::MissingPlaceholder(name.to_string()))?;
        out.push_str(if value.is_empty() { "None" } else { value });
        rest = &tail[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Render the evidence report into the template bindings: describe-style
/// fixed-width statistics tables plus per-covariate binned performance.
pub fn evidence_bindings(ev: &EvidenceReport) -> BTreeMap<String, String> {
    let stats_table = |after: bool| -> String {
        let mut s = format!(
            "{:<18}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
            "covariate", "mean", "std", "min", "25%", "50%", "75%", "max"
        );
        for col in &ev.columns {
            let st = if after { &col.after } else { &col.before };
            s.push_str(&format!(
                "{:<18}{:>10.3}{:>10.3}{:>10.3}{:>10.3}{:>10.3}{:>10.3}{:>10.3}\n",
                col.name, st.mean, st.std, st.min, st.q25, st.q50, st.q75, st.max
            ));
        }
        s
    };
    let perf_table = |after: bool| -> String {
        let mut s = String::new();
        for col in &ev.columns {
            let bins = if after { &col.binned_acc_after } else { &col.binned_acc_before };
            let cells: Vec<String> = bins
                .iter()
                .map(|b| b.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()))
                .collect();
            s.push_str(&format!("{}: [{}]\n", col.name, cells.join(", ")));
        }
        s
    };
    let mut b = BTreeMap::new();
    b.insert("x_before".into(), stats_table(false));
    b.insert("x_after".into(), stats_table(true));
    b.insert("covariate_performance_before".into(), perf_table(false));
    b.insert("covariate_performance_after".into(), perf_table(true));
    b.insert("context".into(), ev.context.clone().unwrap_or_default());
    b
}

/// Endpoint settings; `auth_env` names the environment variable holding the
/// bearer token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model: String,
    pub auth_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "gpt-4".into(),
            auth_env: "SELFHEAL_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub template_id: TemplateId,
    pub prompt: String,
    pub temperature: f64,
}

/// A completion backend. Implementations are stateless per request.
pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;
}

/// Retry transient failures with exponential backoff starting at `base`.
pub fn complete_with_retries(
    provider: &dyn CompletionProvider,
    request: &CompletionRequest,
    max_retries: u32,
    base: Duration,
) -> Result<String, LlmError> {
    let mut attempt = 0u32;
    loop {
        match provider.complete(request) {
            Ok(text) => return Ok(text),
            Err(e) if e.is_transient() && attempt < max_retries => {
                let delay = base * 2u32.saturating_pow(attempt);
                log::warn!("completion attempt {} failed ({e}); retrying in {delay:?}", attempt + 1);
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Blocking chat-completion client over the common JSON shape
/// (`messages` array + `temperature`).
pub struct HttpProvider {
    config: ProviderConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .new_agent();
        Self { config, agent }
    }

    fn send_once(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Ok(token) = std::env::var(&self.config.auth_env) {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        log::debug!(
            "completion request: endpoint={} model={} template={:?}",
            self.config.endpoint,
            self.config.model,
            request.template_id
        );
        let mut response = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            ureq::Error::StatusCode(code) if code == 401 || code == 403 => {
                LlmError::Auth(format!("status {code}"))
            }
            ureq::Error::StatusCode(code) => LlmError::Status(code, "request rejected".into()),
            other => LlmError::Transport(other.to_string()),
        })?;
        let reply: ChatReply = response
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Payload(e.to_string()))?;
        reply
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| LlmError::Payload("empty choices array".into()))
    }
}

impl CompletionProvider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        complete_with_retries(
            &OnceProvider(self),
            request,
            self.config.max_retries,
            Duration::from_millis(250),
        )
    }
}

/// Adapter so the retry loop can drive a single HTTP attempt.
struct OnceProvider<'a>(&'a HttpProvider);

impl CompletionProvider for OnceProvider<'_> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        self.0.send_once(request)
    }
}

/// Deterministic scripted provider keyed by template id. Each call pops the
/// next scripted reply (or failure) for the request's template.
#[derive(Default)]
pub struct MockProvider {
    scripts: Mutex<BTreeMap<TemplateId, VecDeque<Result<String, LlmError>>>>,
    pub calls: Mutex<Vec<CompletionRequest>>,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn script_reply(&self, id: TemplateId, reply: impl Into<String>) {
        self.scripts.lock().unwrap().entry(id).or_default().push_back(Ok(reply.into()));
    }

    pub fn script_failure(&self, id: TemplateId, err: LlmError) {
        self.scripts.lock().unwrap().entry(id).or_default().push_back(Err(err));
    }
}

impl CompletionProvider for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        self.calls.lock().unwrap().push(request.clone());
        let mut scripts = self.scripts.lock().unwrap();
        let queue = scripts.get_mut(&request.template_id);
        match queue.and_then(|q| q.pop_front()) {
            Some(r) => r,
            None => Err(LlmError::ScriptExhausted(request.template_id)),
        }
    }
}

/// One transcript line per completion, persisted as JSONL for audit.
#[derive(Debug, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub template_id: TemplateId,
    pub prompt: String,
    pub response: String,
}

pub fn append_transcript(path: &std::path::Path, line: &TranscriptLine) -> std::io::Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(line).expect("transcript serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn subgroup_removal_renders_count_literal() {
        let b = bind(&[("issues", "outliers"), ("x_before", "t1"), ("x_after", "t2"), ("n", "10")]);
        let text = render(TemplateId::SubgroupRemoval, &b).unwrap();
        assert!(text.contains("Suggest 10 possible subgroups"), "{text}");
    }

    #[test]
    fn empty_context_renders_as_none() {
        let b = bind(&[
            ("x_before", "t1"),
            ("x_after", "t2"),
            ("context", ""),
            ("covariate_performance_before", "p1"),
            ("covariate_performance_after", "p2"),
            ("n", "3"),
        ]);
        let text = render(TemplateId::CovariateCombinations, &b).unwrap();
        assert!(text.contains("- Context: None"), "{text}");
    }

    #[test]
    fn missing_placeholder_is_error() {
        let b = bind(&[("x_before", "t1")]);
        match render(TemplateId::SubgroupRemoval, &b) {
            Err(LlmError::MissingPlaceholder(name)) => {
                assert!(["issues", "x_after", "n"].contains(&name.as_str()), "{name}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn render_is_deterministic() {
        let b = bind(&[
            ("x_before", "A"),
            ("x_after", "B"),
            ("context", "C"),
            ("covariate_guesses", "D"),
        ]);
        let a = render(TemplateId::DiagnosisProbability, &b).unwrap();
        let c = render(TemplateId::DiagnosisProbability, &b).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn mock_replays_scripted_reply_verbatim() {
        let mock = MockProvider::new();
        mock.script_reply(TemplateId::GenericDiagnosis, "scripted");
        let req = CompletionRequest {
            template_id: TemplateId::GenericDiagnosis,
            prompt: "p".into(),
            temperature: 0.0,
        };
        assert_eq!(mock.complete(&req).unwrap(), "scripted");
    }

    #[test]
    fn retries_recover_from_transient_failures() {
        let mock = MockProvider::new();
        mock.script_failure(TemplateId::GenericDiagnosis, LlmError::Timeout);
        mock.script_failure(TemplateId::GenericDiagnosis, LlmError::Transport("reset".into()));
        mock.script_reply(TemplateId::GenericDiagnosis, "ok");
        let req = CompletionRequest {
            template_id: TemplateId::GenericDiagnosis,
            prompt: "p".into(),
            temperature: 0.0,
        };
        let out = complete_with_retries(&mock, &req, 3, Duration::from_millis(1)).unwrap();
        assert_eq!(out, "ok");
    }

    #[test]
    fn exhausted_retries_surface_the_error() {
        let mock = MockProvider::new();
        for _ in 0..4 {
            mock.script_failure(TemplateId::GenericDiagnosis, LlmError::Timeout);
        }
        let req = CompletionRequest {
            template_id: TemplateId::GenericDiagnosis,
            prompt: "p".into(),
            temperature: 0.0,
        };
        let err = complete_with_retries(&mock, &req, 2, Duration::from_millis(1)).unwrap_err();
        assert!(matches!(err, LlmError::Timeout));
    }

    #[test]
    fn auth_errors_do_not_retry() {
        let mock = MockProvider::new();
        mock.script_failure(TemplateId::GenericDiagnosis, LlmError::Auth("401".into()));
        mock.script_reply(TemplateId::GenericDiagnosis, "should not be reached");
        let req = CompletionRequest {
            template_id: TemplateId::GenericDiagnosis,
            prompt: "p".into(),
            temperature: 0.0,
        };
        let err = complete_with_retries(&mock, &req, 3, Duration::from_millis(1)).unwrap_err();
        assert!(matches!(err, LlmError::Auth(_)));
        assert_eq!(mock.calls.lock().unwrap().len(), 1);
    }

    #[test]
    fn secret_never_reaches_transcripts_or_debug_output() {
        let secret = "s3cr3t-token-value";
        std::env::set_var("SELFHEAL_TEST_KEY", secret);
        let cfg = ProviderConfig { auth_env: "SELFHEAL_TEST_KEY".into(), ..Default::default() };
        let debug = format!("{cfg:?}");
        assert!(!debug.contains(secret));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcripts.jsonl");
        append_transcript(
            &path,
            &TranscriptLine {
                template_id: TemplateId::GenericDiagnosis,
                prompt: "prompt".into(),
                response: "reply".into(),
            },
        )
        .unwrap();
        let contents = std::fs::read_to_string(&path).unwrap();
        assert!(!contents.contains(secret));
        std::env::remove_var("SELFHEAL_TEST_KEY");
    }
}
