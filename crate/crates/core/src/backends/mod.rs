//! Uniform interfaces to the four external model capabilities: image
//! captioning, text summarization, text-to-image generation and embedding.
//!
//! Each capability has a deterministic mock (see [`mock`]), an HTTP adapter
//! (see [`live`]) and a content-addressed cache wrapper (see [`cache`]).

pub mod cache;
pub mod live;
pub mod mock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{clean_label, PromptTemplate, TemplateName};
use crate::raster::ImagePayload;

pub use cache::{CacheStats, Cached, ContentCache};
pub use live::{HttpCaptioner, HttpEmbedder, HttpImageGenerator, HttpPairScorer, HttpSummarizer, Limiter, ReqwestTransport, Transport};
pub use mock::{MockCaptioner, MockEmbedder, MockImageGenerator, MockPairScorer, MockSummarizer, MockWorld};

pub const MOCK_ENDPOINT: &str = "mock";

/// Connection settings for one backend. API keys are read from the
/// environment variable named by `api_key_env`, never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Service URL, or `"mock"`.
    pub endpoint: String,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub max_parallel: usize,
    pub retry_limit: u32,
    pub timeout_s: f64,
    /// Base delay of the exponential backoff between retries.
    pub backoff_ms: u64,
    /// Adapter-specific request options (decoding parameters and the like).
    pub options: serde_json::Map<String, serde_json::Value>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: MOCK_ENDPOINT.into(),
            model: None,
            api_key_env: None,
            max_parallel: 4,
            retry_limit: 3,
            timeout_s: 60.0,
            backoff_ms: 500,
            options: Default::default(),
        }
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        BackendConfig::default()
    }

    pub fn live(endpoint: impl Into<String>, model: Option<&str>, api_key_env: Option<&str>) -> Self {
        BackendConfig {
            endpoint: endpoint.into(),
            model: model.map(str::to_string),
            api_key_env: api_key_env.map(str::to_string),
            ..Default::default()
        }
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == MOCK_ENDPOINT
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_parallel < 1 {
            return Err(Error::Config("max_parallel must be at least 1".into()));
        }
        if self.retry_limit > 10 {
            return Err(Error::Config("retry_limit must be at most 10".into()));
        }
        if !(self.timeout_s > 0.0) {
            return Err(Error::Config("timeout_s must be positive".into()));
        }
        if self.endpoint.is_empty() {
            return Err(Error::Config("endpoint must not be empty".into()));
        }
        Ok(())
    }

    /// Identifier used for cache partitioning and provenance.
    pub fn backend_id(&self) -> String {
        match &self.model {
            Some(m) => format!("{m}@{}", self.endpoint),
            None => self.endpoint.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub image_id: String,
    pub caption: String,
    pub backend_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub modality: Modality,
    pub backend_id: String,
}

impl EmbeddingVector {
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        cosine(&self.values, &other.values)
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImageSet {
    pub concept: String,
    /// The prompt actually sent (differs from `concept` after a sanitized retry).
    pub prompt: String,
    pub images: Vec<ImagePayload>,
    pub seed: u64,
    pub backend_id: String,
}

/// A summarizer request: the rendered chat plus the structured inputs, so
/// offline backends need not parse prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template: TemplateName,
    pub messages: Vec<crate::prompts::ChatMessage>,
    pub inputs: Vec<String>,
    /// Number of completions requested.
    pub n: usize,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(template: &PromptTemplate, inputs: Vec<String>, n: usize, temperature: f64) -> Self {
        CompletionRequest {
            template: template.name,
            messages: template.messages(&inputs),
            inputs,
            n,
            temperature,
        }
    }
}

pub trait Captioner: Send + Sync {
    fn backend_id(&self) -> String;
    fn caption(&self, image: &ImagePayload) -> Result<String>;
}

pub trait Summarizer: Send + Sync {
    fn backend_id(&self) -> String;
    /// Returns `request.n` raw completions.
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>>;
    /// Whether repeating a request can give a different answer.
    fn samples(&self) -> bool {
        false
    }
}

pub trait ImageGenerator: Send + Sync {
    fn backend_id(&self) -> String;
    fn generate(&self, prompt: &str, q: usize, seed: u64) -> Result<Vec<ImagePayload>>;
}

pub trait Embedder: Send + Sync {
    fn backend_id(&self) -> String;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
    fn embed_image(&self, image: &ImagePayload) -> Result<Vec<f32>>;
}

/// Scores how well a candidate text matches a reference text, in `[0, 1]`.
pub trait PairScorer: Send + Sync {
    fn backend_id(&self) -> String;
    fn f1(&self, candidate: &str, reference: &str) -> Result<f64>;
}

macro_rules! forward_ref {
    ($tr:ident { $($body:tt)* }) => {
        impl<T: $tr + ?Sized> $tr for &T { $($body)* }
        impl<T: $tr + ?Sized> $tr for Box<T> { $($body)* }
        impl<T: $tr + ?Sized> $tr for std::sync::Arc<T> { $($body)* }
    };
}

forward_ref!(Captioner {
    fn backend_id(&self) -> String { (**self).backend_id() }
    fn caption(&self, image: &ImagePayload) -> Result<String> { (**self).caption(image) }
});
forward_ref!(Summarizer {
    fn backend_id(&self) -> String { (**self).backend_id() }
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>> { (**self).complete(request) }
    fn samples(&self) -> bool { (**self).samples() }
});
forward_ref!(ImageGenerator {
    fn backend_id(&self) -> String { (**self).backend_id() }
    fn generate(&self, prompt: &str, q: usize, seed: u64) -> Result<Vec<ImagePayload>> { (**self).generate(prompt, q, seed) }
});
forward_ref!(PairScorer {
    fn backend_id(&self) -> String { (**self).backend_id() }
    fn f1(&self, candidate: &str, reference: &str) -> Result<f64> { (**self).f1(candidate, reference) }
});
forward_ref!(Embedder {
    fn backend_id(&self) -> String { (**self).backend_id() }
    fn embed_text(&self, text: &str) -> Result<Vec<f32>> { (**self).embed_text(text) }
    fn embed_image(&self, image: &ImagePayload) -> Result<Vec<f32>> { (**self).embed_image(image) }
});

pub fn caption_image<C: Captioner + ?Sized>(captioner: &C, image_id: &str, image: &ImagePayload) -> Result<CaptionResult> {
    if image.is_empty() {
        return Err(Error::MalformedImage(format!("{image_id}: zero-byte payload")));
    }
    let caption = captioner.caption(image)?.trim().to_string();
    if caption.is_empty() {
        return Err(Error::EmptyResponse(format!("caption for {image_id}")));
    }
    Ok(CaptionResult { image_id: image_id.to_string(), caption, backend_id: captioner.backend_id() })
}

/// Asks the summarizer for `n` labels describing `captions` and cleans them.
pub fn summarize_concepts<S: Summarizer + ?Sized>(
    summarizer: &S,
    captions: &[String],
    n: usize,
    template: &PromptTemplate,
    temperature: f64,
) -> Result<Vec<String>> {
    if captions.is_empty() {
        return Err(Error::pre("summarize_concepts needs at least one caption"));
    }
    if n == 0 {
        return Err(Error::pre("n must be at least 1"));
    }
    let req = CompletionRequest::new(template, captions.to_vec(), n, temperature);
    let labels: Vec<String> = summarizer
        .complete(&req)?
        .iter()
        .map(|raw| clean_label(raw))
        .filter(|l| !l.is_empty())
        .collect();
    if labels.len() < n {
        return Err(Error::EmptyResponse(format!(
            "{} returned {} usable labels, wanted {n}",
            summarizer.backend_id(),
            labels.len()
        )));
    }
    Ok(labels.into_iter().take(n).collect())
}

/// Keeps letters, digits, spaces and hyphens; collapses whitespace.
pub fn sanitize_prompt(prompt: &str) -> String {
    let kept: String = prompt
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { ' ' })
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Generates `q` images for `concept`. A refused prompt is retried once in
/// sanitized form; a second refusal is returned as [`Error::ContentRefused`].
pub fn generate_images<G: ImageGenerator + ?Sized>(
    generator: &G,
    concept: &str,
    q: usize,
    seed: u64,
) -> Result<GeneratedImageSet> {
    if concept.trim().is_empty() {
        return Err(Error::pre("concept must not be empty"));
    }
    if q == 0 {
        return Err(Error::pre("q must be at least 1"));
    }
    let mut prompt = concept.to_string();
    let images = match generator.generate(&prompt, q, seed) {
        Err(Error::ContentRefused(why)) => {
            prompt = sanitize_prompt(concept);
            log::warn!("generation refused for `{concept}` ({why}); retrying as `{prompt}`");
            if prompt.is_empty() {
                return Err(Error::ContentRefused(why));
            }
            generator.generate(&prompt, q, seed)?
        }
        other => other?,
    };
    if images.len() != q {
        return Err(Error::Protocol(format!("asked for {q} images, got {}", images.len())));
    }
    Ok(GeneratedImageSet { concept: concept.to_string(), prompt, images, seed, backend_id: generator.backend_id() })
}

pub fn embed_text<E: Embedder + ?Sized>(embedder: &E, text: &str) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(Error::pre("cannot embed empty text"));
    }
    checked_embedding(embedder.embed_text(text)?, Modality::Text, embedder.backend_id())
}

pub fn embed_image<E: Embedder + ?Sized>(embedder: &E, image: &ImagePayload) -> Result<EmbeddingVector> {
    if image.is_empty() {
        return Err(Error::pre("cannot embed an empty image"));
    }
    checked_embedding(embedder.embed_image(image)?, Modality::Image, embedder.backend_id())
}

fn checked_embedding(values: Vec<f32>, modality: Modality, backend_id: String) -> Result<EmbeddingVector> {
    let norm2: f64 = values.iter().map(|&v| v as f64 * v as f64).sum();
    if values.is_empty() || !(norm2 > 0.0) || !norm2.is_finite() {
        return Err(Error::Protocol(format!("{backend_id} returned a degenerate embedding")));
    }
    Ok(EmbeddingVector { values, modality, backend_id })
}

/// The four backends one pipeline run talks to.
pub struct BackendSet {
    pub captioner: Box<dyn Captioner>,
    pub summarizer: Box<dyn Summarizer>,
    pub generator: Box<dyn ImageGenerator>,
    pub embedder: Box<dyn Embedder>,
}

impl BackendSet {
    pub fn mock(world: &MockWorld) -> Self {
        BackendSet {
            captioner: Box::new(MockCaptioner::new(world.clone())),
            summarizer: Box::new(MockSummarizer::new(world.clone())),
            generator: Box::new(MockImageGenerator::new(world.clone())),
            embedder: Box::new(MockEmbedder::new(world.clone())),
        }
    }

    pub fn backend_ids(&self) -> Vec<String> {
        vec![
            self.captioner.backend_id(),
            self.summarizer.backend_id(),
            self.generator.backend_id(),
            self.embedder.backend_id(),
        ]
    }
}
