//! HTTP adapters for live model services.
//!
//! Request/response shapes:
//!
//! * captioner: `POST endpoint` with `{"inputs": <base64 image>, "parameters":
//!   {"num_beams", "max_new_tokens"}}`; accepts `[{"generated_text": ..}]` or
//!   `{"caption": ..}`. Beam size and caption length default to 3 and 30 and
//!   can be overridden through `options`.
//! * summarizer: OpenAI-style chat completions, `{"model", "messages",
//!   "temperature", "n"}` answered by `{"choices": [{"message": {"content"}}]}`.
//! * image generator: one `POST` per image with `{"inputs": prompt,
//!   "parameters": {"seed"}}`; accepts raw image bytes or
//!   `{"data": [{"b64_json": ..}]}`. Image `i` uses seed `seed + i`.
//! * embedder: `{"model", "input_type": "text"|"image", "input"}` answered by
//!   `{"embedding": [..]}` or `{"data": [{"embedding": [..]}]}`; images are
//!   sent base64-encoded.
//! * pair scorer: `{"model", "candidate", "reference"}` answered by
//!   `{"f1": x}` or `{"score": x}`.
//! * target model: `{"image": <base64 PNG>, "layer"}` answered by
//!   `{"shape": [c, h, w], "data": [..]}`.
//!
//! Status 429 and 5xx and transport failures are retryable; a 4xx whose body
//! mentions a content or safety policy is reported as a refusal.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use ndarray::Array3;
use serde_json::{json, Value};

use super::{BackendConfig, Captioner, CompletionRequest, Embedder, ImageGenerator, PairScorer, Summarizer};
use crate::activation::TargetModel;
use crate::error::{Error, Result};
use crate::raster::ImagePayload;

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value, timeout: Duration) -> Result<HttpResponse>;
}

#[derive(Debug, Clone, Default)]
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value, timeout: Duration) -> Result<HttpResponse> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp = req.send().map_err(|e| Error::BackendUnreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("")
            .to_string();
        let body = resp.bytes().map_err(|e| Error::BackendUnreachable(e.to_string()))?.to_vec();
        Ok(HttpResponse { status, content_type, body })
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(max: usize) -> Self {
        Limiter { max: max.max(1), in_flight: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared request machinery: auth header, concurrency bound, retries.
pub struct LiveClient {
    cfg: BackendConfig,
    transport: Arc<dyn Transport>,
    limiter: Limiter,
}

impl LiveClient {
    pub fn new(cfg: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        cfg.validate()?;
        let limiter = Limiter::new(cfg.max_parallel);
        Ok(LiveClient { cfg, transport, limiter })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn headers(&self) -> Result<Vec<(String, String)>> {
        let mut h = vec![];
        if let Some(var) = &self.cfg.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
            h.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        Ok(h)
    }

    fn option_or(&self, key: &str, default: Value) -> Value {
        self.cfg.options.get(key).cloned().unwrap_or(default)
    }

    /// Sends `body`, retrying retryable failures; at most `retry_limit + 1`
    /// attempts are made.
    pub fn call(&self, body: &Value) -> Result<HttpResponse> {
        let headers = self.headers()?;
        let timeout = Duration::from_secs_f64(self.cfg.timeout_s);
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.transport.post_json(&self.cfg.endpoint, &headers, body, timeout).and_then(classify)
            };
            match result {
                Err(e) if e.is_retryable() && attempt < self.cfg.retry_limit => {
                    log::debug!("attempt {} against {} failed: {e}", attempt + 1, self.cfg.endpoint);
                    let delay = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn call_json(&self, body: &Value) -> Result<Value> {
        let resp = self.call(body)?;
        serde_json::from_slice(&resp.body).map_err(|e| Error::Protocol(format!("invalid JSON response: {e}")))
    }
}

fn classify(resp: HttpResponse) -> Result<HttpResponse> {
    let text = || String::from_utf8_lossy(&resp.body).chars().take(300).collect::<String>();
    match resp.status {
        200..=299 => Ok(resp),
        429 | 500..=599 => Err(Error::BackendUnreachable(format!("status {}: {}", resp.status, text()))),
        _ => {
            let body = text();
            let lower = body.to_lowercase();
            if lower.contains("content_policy") || lower.contains("content policy") || lower.contains("safety") {
                Err(Error::ContentRefused(body))
            } else {
                Err(Error::Protocol(format!("status {}: {body}", resp.status)))
            }
        }
    }
}

fn model_name(cfg: &BackendConfig) -> Value {
    cfg.model.clone().map(Value::String).unwrap_or(Value::Null)
}

pub struct HttpCaptioner {
    client: LiveClient,
}

impl HttpCaptioner {
    pub fn new(cfg: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        Ok(HttpCaptioner { client: LiveClient::new(cfg, transport)? })
    }
}

impl Captioner for HttpCaptioner {
    fn backend_id(&self) -> String {
        let c = self.client.config();
        format!(
            "{}?beams={}&max_tokens={}",
            c.backend_id(),
            self.client.option_or("num_beams", json!(3)),
            self.client.option_or("max_new_tokens", json!(30))
        )
    }

    fn caption(&self, image: &ImagePayload) -> Result<String> {
        let body = json!({
            "model": model_name(self.client.config()),
            "inputs": B64.encode(image.bytes()),
            "parameters": {
                "num_beams": self.client.option_or("num_beams", json!(3)),
                "max_new_tokens": self.client.option_or("max_new_tokens", json!(30)),
            }
        });
        let v = self.client.call_json(&body)?;
        let caption = v
            .pointer("/0/generated_text")
            .or_else(|| v.get("caption"))
            .and_then(Value::as_str)
            .ok_or_else(|| Error::EmptyResponse("no caption in response".into()))?;
        Ok(caption.to_string())
    }
}

pub struct HttpSummarizer {
    client: LiveClient,
}

impl HttpSummarizer {
    pub fn new(cfg: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        Ok(HttpSummarizer { client: LiveClient::new(cfg, transport)? })
    }
}

impl Summarizer for HttpSummarizer {
    fn backend_id(&self) -> String {
        self.client.config().backend_id()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>> {
        let body = json!({
            "model": model_name(self.client.config()),
            "messages": req.messages,
            "temperature": req.temperature,
            "n": req.n,
        });
        let v = self.client.call_json(&body)?;
        let choices = v
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::EmptyResponse("no choices in completion".into()))?;
        let out: Vec<String> = choices
            .iter()
            .filter_map(|c| c.pointer("/message/content").and_then(Value::as_str))
            .map(str::to_string)
            .collect();
        if out.is_empty() {
            return Err(Error::EmptyResponse("completion had no content".into()));
        }
        Ok(out)
    }

    fn samples(&self) -> bool {
        true
    }
}

pub struct HttpImageGenerator {
    client: LiveClient,
}

impl HttpImageGenerator {
    pub fn new(cfg: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        Ok(HttpImageGenerator { client: LiveClient::new(cfg, transport)? })
    }
}

impl ImageGenerator for HttpImageGenerator {
    fn backend_id(&self) -> String {
        self.client.config().backend_id()
    }

    fn generate(&self, prompt: &str, q: usize, seed: u64) -> Result<Vec<ImagePayload>> {
        let one = |i: u64| -> Result<ImagePayload> {
            let body = json!({
                "model": model_name(self.client.config()),
                "inputs": prompt,
                "parameters": { "seed": seed.wrapping_add(i) },
            });
            let resp = self.client.call(&body)?;
            if resp.content_type.starts_with("image/") {
                return Ok(ImagePayload::from_bytes(resp.body));
            }
            let v: Value = serde_json::from_slice(&resp.body).map_err(|e| Error::Protocol(e.to_string()))?;
            let b64 = v
                .pointer("/data/0/b64_json")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::EmptyResponse("no image in response".into()))?;
            Ok(ImagePayload::from_bytes(B64.decode(b64).map_err(|e| Error::Protocol(e.to_string()))?))
        };
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..q as u64).map(|i| s.spawn(move || one(i))).collect();
            handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
        })
    }
}

pub struct HttpEmbedder {
    client: LiveClient,
}

impl HttpEmbedder {
    pub fn new(cfg: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        Ok(HttpEmbedder { client: LiveClient::new(cfg, transport)? })
    }

    fn embed(&self, input_type: &str, input: Value) -> Result<Vec<f32>> {
        let body = json!({ "model": model_name(self.client.config()), "input_type": input_type, "input": input });
        let v = self.client.call_json(&body)?;
        let arr = v
            .get("embedding")
            .or_else(|| v.pointer("/data/0/embedding"))
            .and_then(Value::as_array)
            .ok_or_else(|| Error::EmptyResponse("no embedding in response".into()))?;
        arr.iter()
            .map(|x| x.as_f64().map(|f| f as f32).ok_or_else(|| Error::Protocol("non-numeric embedding".into())))
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn backend_id(&self) -> String {
        self.client.config().backend_id()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        self.embed("text", json!(text))
    }

    fn embed_image(&self, image: &ImagePayload) -> Result<Vec<f32>> {
        self.embed("image", json!(B64.encode(image.bytes())))
    }
}

/// Text-pair F1 scorer (for example a BERTScore service).
pub struct HttpPairScorer {
    client: LiveClient,
}

impl HttpPairScorer {
    pub fn new(cfg: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        Ok(HttpPairScorer { client: LiveClient::new(cfg, transport)? })
    }
}

impl PairScorer for HttpPairScorer {
    fn backend_id(&self) -> String {
        self.client.config().backend_id()
    }

    fn f1(&self, candidate: &str, reference: &str) -> Result<f64> {
        let body = json!({ "model": model_name(self.client.config()), "candidate": candidate, "reference": reference });
        let v = self.client.call_json(&body)?;
        v.get("f1")
            .or_else(|| v.get("score"))
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::EmptyResponse("no f1 in response".into()))
    }
}

/// A target network served over HTTP.
pub struct RemoteModel {
    client: LiveClient,
    channels: BTreeMap<String, usize>,
}

impl RemoteModel {
    /// `channels` lists the readable layers and their widths.
    pub fn new(cfg: BackendConfig, transport: Arc<dyn Transport>, channels: BTreeMap<String, usize>) -> Result<Self> {
        Ok(RemoteModel { client: LiveClient::new(cfg, transport)?, channels })
    }
}

impl TargetModel for RemoteModel {
    fn fingerprint(&self) -> String {
        format!("remote:{}", self.client.config().backend_id())
    }

    fn layers(&self) -> Vec<String> {
        self.channels.keys().cloned().collect()
    }

    fn channels(&self, layer: &str) -> Result<usize> {
        self.channels.get(layer).copied().ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    fn forward(&self, image: &RgbImage, layer: &str) -> Result<Array3<f32>> {
        let c = self.channels(layer)?;
        let png = ImagePayload::encode_png(image);
        let v = self.client.call_json(&json!({ "image": B64.encode(png.bytes()), "layer": layer }))?;
        let shape: Vec<usize> = v
            .get("shape")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|x| x.as_u64().map(|u| u as usize)).collect())
            .unwrap_or_default();
        let data: Vec<f32> = v
            .get("data")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|x| x.as_f64().map(|f| f as f32)).collect())
            .unwrap_or_default();
        if shape.len() != 3 || shape[0] != c {
            return Err(Error::Protocol(format!("expected shape [{c}, h, w], got {shape:?}")));
        }
        Array3::from_shape_vec((shape[0], shape[1], shape[2]), data).map_err(|e| Error::Protocol(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{generate_images, summarize_concepts};
    use crate::prompts::{PromptTemplate, TemplateName};
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Instrumented fake: records peak concurrency and replays scripted statuses.
    struct FakeTransport {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
        calls: AtomicUsize,
        fail_first: usize,
        fail_status: u16,
        reply: Value,
        delay: Duration,
    }

    impl FakeTransport {
        fn new(reply: Value) -> Self {
            FakeTransport {
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
                calls: AtomicUsize::new(0),
                fail_first: 0,
                fail_status: 503,
                reply,
                delay: Duration::ZERO,
            }
        }
    }

    impl Transport for FakeTransport {
        fn post_json(&self, _url: &str, _h: &[(String, String)], _b: &Value, _t: Duration) -> Result<HttpResponse> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(self.delay);
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            let status = if n < self.fail_first { self.fail_status } else { 200 };
            let body = if status == 200 { serde_json::to_vec(&self.reply).unwrap() } else { b"{\"error\":\"content_policy_violation\"}".to_vec() };
            Ok(HttpResponse { status, content_type: "application/json".into(), body })
        }
    }

    fn cfg(retry_limit: u32, max_parallel: usize) -> BackendConfig {
        BackendConfig { retry_limit, max_parallel, backoff_ms: 0, ..BackendConfig::live("http://fake", Some("m"), None) }
    }

    #[test]
    fn fails_after_exactly_limit_plus_one_attempts() {
        for limit in [0u32, 1, 3] {
            let mut t = FakeTransport::new(json!({"caption": "x"}));
            t.fail_first = usize::MAX;
            let t = Arc::new(t);
            let c = HttpCaptioner::new(cfg(limit, 1), t.clone()).unwrap();
            let err = c.caption(&ImagePayload::from_bytes(vec![1])).unwrap_err();
            assert!(matches!(err, Error::BackendUnreachable(_)));
            assert_eq!(t.calls.load(Ordering::SeqCst), limit as usize + 1);
        }
    }

    #[test]
    fn recovers_within_retry_budget() {
        let mut t = FakeTransport::new(json!([{"generated_text": "a photo of a dog"}]));
        t.fail_first = 2;
        let t = Arc::new(t);
        let c = HttpCaptioner::new(cfg(2, 1), t.clone()).unwrap();
        assert_eq!(c.caption(&ImagePayload::from_bytes(vec![1])).unwrap(), "a photo of a dog");
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn in_flight_never_exceeds_max_parallel() {
        let mut t = FakeTransport::new(json!({"embedding": [1.0, 0.0]}));
        t.delay = Duration::from_millis(5);
        let t = Arc::new(t);
        let e = HttpEmbedder::new(cfg(0, 3), t.clone()).unwrap();
        std::thread::scope(|s| {
            for i in 0..24 {
                let e = &e;
                s.spawn(move || e.embed_text(&format!("t{i}")).unwrap());
            }
        });
        assert!(t.peak.load(Ordering::SeqCst) <= 3);
        assert_eq!(t.calls.load(Ordering::SeqCst), 24);
    }

    #[test]
    fn refusal_is_classified_and_not_retried() {
        let mut t = FakeTransport::new(json!({}));
        t.fail_first = usize::MAX;
        t.fail_status = 400;
        let t = Arc::new(t);
        let g = HttpImageGenerator::new(cfg(5, 1), t.clone()).unwrap();
        let err = generate_images(&g, "something", 1, 0).unwrap_err();
        assert!(matches!(err, Error::ContentRefused(_)));
        // original attempt plus one sanitized retry
        assert_eq!(t.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn chat_completion_parsing() {
        let t = Arc::new(FakeTransport::new(json!({
            "choices": [{"message": {"content": "\"Striped fabric.\""}}, {"message": {"content": "1. zebra stripes"}}]
        })));
        let s = HttpSummarizer::new(cfg(0, 1), t).unwrap();
        let labels = summarize_concepts(&s, &["a zebra".into()], 2, &PromptTemplate::get(TemplateName::Similarity), 0.0).unwrap();
        assert_eq!(labels, vec!["Striped fabric", "zebra stripes"]);
    }

    #[test]
    fn remote_model_shape_check() {
        let t = Arc::new(FakeTransport::new(json!({"shape": [2, 1, 2], "data": [1.0, 2.0, 3.0, 4.0]})));
        let m = RemoteModel::new(cfg(0, 1), t, BTreeMap::from([("fc".to_string(), 2)])).unwrap();
        let out = m.forward(&RgbImage::new(2, 2), "fc").unwrap();
        assert_eq!(out[[1, 0, 1]], 4.0);
        assert!(matches!(m.forward(&RgbImage::new(2, 2), "x"), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn missing_key_env_is_a_config_error() {
        let t = Arc::new(FakeTransport::new(json!({"caption": "x"})));
        let mut c = cfg(0, 1);
        c.api_key_env = Some("DND_TEST_SURELY_UNSET_KEY".into());
        let cap = HttpCaptioner::new(c, t).unwrap();
        assert!(matches!(cap.caption(&ImagePayload::from_bytes(vec![1])), Err(Error::Config(_))));
    }
}
