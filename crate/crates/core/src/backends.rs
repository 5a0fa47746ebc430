//! Model clients: a chat-completion HTTP client for deployments and
//! deterministic synthetic models for tests and experiments, plus the prompt
//! templates RAR uses.
//!
//! Chat wire format (request):
//!
//! ```json
//! {"model": "<name>", "messages": [{"role": "user", "content": "<prompt>"}]}
//! ```
//!
//! Response: `{"choices": [{"message": {"content": "<text>"}}]}`; the first
//! choice's content is the completion.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::embedding::hash64;
use crate::model::{choice_label, label_index, Guide, ModelTier, RequestRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    DirectAnswer,
    GuidedAnswer,
    GuideGeneration,
    ZeroShotCot,
    Judge,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FmError {
    #[error("{tier} backend transport error: {message}")]
    Transport { tier: ModelTier, message: String },
    #[error("template error: {0}")]
    Template(String),
}

impl FmError {
    pub fn tier(&self) -> Option<ModelTier> {
        match self {
            FmError::Transport { tier, .. } => Some(*tier),
            FmError::Template(_) => None,
        }
    }
}

pub const ANSWER_FORMAT_INSTRUCTION: &str = "Reply with the letter of the correct option in the form \"Answer: X\".";
pub const GUIDE_GENERATION_INSTRUCTION: &str = "Write step-by-step guidance, as instructions or hints, \
that would help someone answer the question below. The guidance must help with reasoning about the \
question; do not reveal or state the final answer.";
pub const GUIDED_ANSWER_PREAMBLE: &str = "Use the following guide to help answer the question.";
pub const ZERO_SHOT_COT_SUFFIX: &str = "Let's think step by step.";
pub const JUDGE_INSTRUCTION: &str = "Are the following two responses semantically similar? \
Reply with exactly one word: similar or different.";

/// Body of a judge request comparing two responses.
pub fn judge_request_text(a: &str, b: &str) -> String {
    format!("Response A:\n{a}\n\nResponse B:\n{b}")
}

fn parse_judge_request(text: &str) -> Option<(&str, &str)> {
    let rest = text.strip_prefix("Response A:\n")?;
    let (a, b) = rest.split_once("\n\nResponse B:\n")?;
    Some((a, b))
}

fn question_block(request: &RequestRecord) -> String {
    let mut out = request.text.clone();
    if let Some(choices) = &request.choices {
        out.push('\n');
        for (i, c) in choices.iter().enumerate() {
            out.push_str(&format!("\n{}. {}", choice_label(i), c));
        }
    }
    out
}

fn answer_block(request: &RequestRecord) -> String {
    let mut out = question_block(request);
    if request.choices.is_some() {
        out.push_str("\n\n");
        out.push_str(ANSWER_FORMAT_INSTRUCTION);
    }
    out
}

pub fn render_prompt(kind: PromptKind, request: &RequestRecord, guide: Option<&Guide>) -> Result<String, FmError> {
    Ok(match kind {
        PromptKind::DirectAnswer => answer_block(request),
        PromptKind::ZeroShotCot => format!("{}\n\n{ZERO_SHOT_COT_SUFFIX}", answer_block(request)),
        PromptKind::GuidedAnswer => {
            let guide = guide.ok_or_else(|| FmError::Template("GuidedAnswer requires a guide".into()))?;
            format!(
                "{GUIDED_ANSWER_PREAMBLE}\n\nGuide:\n{}\n\nQuestion:\n{}",
                guide.text,
                answer_block(request)
            )
        }
        PromptKind::GuideGeneration => {
            format!(
                "{GUIDE_GENERATION_INSTRUCTION}\n\nQuestion:\n{}",
                question_block(request)
            )
        }
        PromptKind::Judge => format!("{JUDGE_INSTRUCTION}\n\n{}", request.text),
    })
}

#[async_trait]
pub trait FmClient: Send + Sync {
    fn tier(&self) -> ModelTier;

    async fn complete(
        &self,
        kind: PromptKind,
        request: &RequestRecord,
        guide: Option<&Guide>,
    ) -> Result<String, FmError>;
}

fn check_call(tier: ModelTier, kind: PromptKind, guide: Option<&Guide>) -> Result<(), FmError> {
    if kind == PromptKind::GuidedAnswer && guide.is_none() {
        return Err(FmError::Template("GuidedAnswer requires a guide".into()));
    }
    if kind == PromptKind::GuideGeneration && tier != ModelTier::Strong {
        return Err(FmError::Template("only the strong tier generates guides".into()));
    }
    Ok(())
}

/// Controls what a synthetic weak model can answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    pub seed: u64,
    /// Share of items answered correctly without help.
    pub p_alone: f64,
    /// Further share answered correctly only with a usable guide.
    pub p_guided: f64,
    /// Guides help only items of their own domain.
    pub domain_strict: bool,
}

impl SyntheticProfile {
    pub fn validate(&self) -> Result<(), FmError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.p_alone) || !ok(self.p_guided) || self.p_alone + self.p_guided > 1.0 {
            return Err(FmError::Template(format!(
                "invalid synthetic profile: p_alone={} p_guided={}",
                self.p_alone, self.p_guided
            )));
        }
        Ok(())
    }
}

/// Uniform draw in `[0, 1)` with six decimal digits of resolution.
pub fn draw1(seed: u64, id: &str) -> f64 {
    (hash64(seed, id.as_bytes()) % 1_000_000) as f64 / 1e6
}

/// Reference labels keyed by request id.
pub type AnswerKey = Arc<HashMap<String, char>>;

/// Deterministic model stand-in.
///
/// The strong tier always answers with the reference label. The weak tier
/// answers correctly iff `draw1(seed, id) < p_alone`, or, for guided prompts
/// with a usable guide, iff the draw is below `p_alone + p_guided`; otherwise
/// it answers with the reference label rotated by one position.
#[derive(Debug, Clone)]
pub struct SyntheticFm {
    tier: ModelTier,
    profile: SyntheticProfile,
    answers: Option<AnswerKey>,
}

impl SyntheticFm {
    pub fn new(tier: ModelTier, profile: SyntheticProfile) -> Self {
        Self {
            tier,
            profile,
            answers: None,
        }
    }

    pub fn with_answers(mut self, answers: AnswerKey) -> Self {
        self.answers = Some(answers);
        self
    }

    pub fn profile(&self) -> &SyntheticProfile {
        &self.profile
    }

    fn option_count(request: &RequestRecord) -> usize {
        request.choices.as_ref().map_or(4, Vec::len)
    }

    /// Reference label: from the answer key, else derived from the id.
    pub fn reference_label(&self, request: &RequestRecord) -> char {
        if let Some(label) = self.answers.as_ref().and_then(|a| a.get(&request.id)) {
            return *label;
        }
        let n = Self::option_count(request) as u64;
        let key = format!("reference:{}", request.id);
        choice_label((hash64(self.profile.seed, key.as_bytes()) % n) as usize)
    }

    fn wrong_label(&self, request: &RequestRecord) -> char {
        let n = Self::option_count(request);
        let r = label_index(self.reference_label(request)).unwrap_or(0);
        choice_label((r + 1) % n)
    }

    fn weak_is_correct(&self, kind: PromptKind, request: &RequestRecord, guide: Option<&Guide>) -> bool {
        let d = draw1(self.profile.seed, &request.id);
        if d < self.profile.p_alone {
            return true;
        }
        match (kind, guide) {
            (PromptKind::GuidedAnswer, Some(g)) => {
                let usable = !self.profile.domain_strict || g.domain == request.domain;
                usable && d < self.profile.p_alone + self.profile.p_guided
            }
            _ => false,
        }
    }

    fn answer_text(kind: PromptKind, label: char) -> String {
        match kind {
            PromptKind::ZeroShotCot => format!(
                "Step 1: restate what the question asks.\nStep 2: rule out options that do not fit.\nAnswer: {label}"
            ),
            _ => format!("Answer: {label}"),
        }
    }

    fn guide_text(request: &RequestRecord) -> String {
        let domain = request.domain.as_deref().unwrap_or("general");
        format!(
            "Guide ({domain}): identify the principle the question turns on, state it in your own words, \
             then test each option against it and discard those that conflict."
        )
    }

    fn judge(request: &RequestRecord) -> String {
        let same = parse_judge_request(&request.text).is_some_and(|(a, b)| a.trim().eq_ignore_ascii_case(b.trim()));
        if same { "similar" } else { "different" }.to_string()
    }
}

#[async_trait]
impl FmClient for SyntheticFm {
    fn tier(&self) -> ModelTier {
        self.tier
    }

    async fn complete(
        &self,
        kind: PromptKind,
        request: &RequestRecord,
        guide: Option<&Guide>,
    ) -> Result<String, FmError> {
        check_call(self.tier, kind, guide)?;
        match kind {
            PromptKind::Judge => return Ok(Self::judge(request)),
            PromptKind::GuideGeneration => return Ok(Self::guide_text(request)),
            _ => {}
        }
        let correct = match self.tier {
            ModelTier::Strong => true,
            ModelTier::Weak => self.weak_is_correct(kind, request, guide),
        };
        let label = if correct {
            self.reference_label(request)
        } else {
            self.wrong_label(request)
        };
        Ok(Self::answer_text(kind, label))
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// Chat-completion client with a bound on concurrent in-flight calls.
pub struct HttpChatClient {
    tier: ModelTier,
    endpoint: String,
    model: String,
    token: Option<String>,
    http: reqwest::Client,
    permits: Semaphore,
}

impl HttpChatClient {
    pub fn new(tier: ModelTier, endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            tier,
            endpoint: endpoint.into(),
            model: model.into(),
            token: None,
            http: reqwest::Client::new(),
            permits: Semaphore::new(16),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.permits = Semaphore::new(n.max(1));
        self
    }

    async fn post_once(&self, prompt: &str) -> Result<String, String> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp: ChatResponse = req
            .send()
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|e| e.to_string())?
            .json()
            .await
            .map_err(|e| e.to_string())?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "response has no choices".to_string())
    }
}

#[async_trait]
impl FmClient for HttpChatClient {
    fn tier(&self) -> ModelTier {
        self.tier
    }

    async fn complete(
        &self,
        kind: PromptKind,
        request: &RequestRecord,
        guide: Option<&Guide>,
    ) -> Result<String, FmError> {
        check_call(self.tier, kind, guide)?;
        let prompt = render_prompt(kind, request, guide)?;
        let _permit = self.permits.acquire().await.expect("semaphore is never closed");
        match self.post_once(&prompt).await {
            Ok(text) => Ok(text),
            Err(first) => {
                tracing::debug!(tier = %self.tier, error = %first, "retrying chat completion");
                self.post_once(&prompt).await.map_err(|message| FmError::Transport {
                    tier: self.tier,
                    message,
                })
            }
        }
    }
}

/// Wraps a client and counts invocations.
pub struct CountingClient {
    inner: Arc<dyn FmClient>,
    calls: AtomicU64,
}

impl CountingClient {
    pub fn new(inner: Arc<dyn FmClient>) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl FmClient for CountingClient {
    fn tier(&self) -> ModelTier {
        self.inner.tier()
    }

    async fn complete(
        &self,
        kind: PromptKind,
        request: &RequestRecord,
        guide: Option<&Guide>,
    ) -> Result<String, FmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(kind, request, guide).await
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmClientKind {
    HttpChat,
    Synthetic,
}

/// Serializable description of a model client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmClientSpec {
    pub tier: ModelTier,
    pub kind: FmClientKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_profile: Option<SyntheticProfile>,
}

impl FmClientSpec {
    pub fn synthetic(tier: ModelTier, profile: SyntheticProfile) -> Self {
        Self {
            tier,
            kind: FmClientKind::Synthetic,
            endpoint: None,
            model: None,
            api_key_env: None,
            max_in_flight: None,
            synthetic_profile: Some(profile),
        }
    }

    pub fn build(&self, answers: Option<AnswerKey>) -> Result<Arc<dyn FmClient>, FmError> {
        match self.kind {
            FmClientKind::Synthetic => {
                if self.endpoint.is_some() || self.model.is_some() {
                    return Err(FmError::Template("synthetic client takes no endpoint/model".into()));
                }
                let profile = self
                    .synthetic_profile
                    .clone()
                    .ok_or_else(|| FmError::Template("synthetic client needs synthetic_profile".into()))?;
                profile.validate()?;
                let mut fm = SyntheticFm::new(self.tier, profile);
                if let Some(answers) = answers {
                    fm = fm.with_answers(answers);
                }
                Ok(Arc::new(fm))
            }
            FmClientKind::HttpChat => {
                if self.synthetic_profile.is_some() {
                    return Err(FmError::Template("http_chat client takes no synthetic_profile".into()));
                }
                let (Some(endpoint), Some(model)) = (&self.endpoint, &self.model) else {
                    return Err(FmError::Template("http_chat client needs endpoint and model".into()));
                };
                let token = self.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
                let mut client = HttpChatClient::new(self.tier, endpoint, model).with_token(token);
                if let Some(n) = self.max_in_flight {
                    client = client.with_max_in_flight(n);
                }
                Ok(Arc::new(client))
            }
        }
    }
}
