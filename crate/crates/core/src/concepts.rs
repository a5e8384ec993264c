//! Candidate concept generation: caption the top activating images, then
//! summarize the captions into `n` candidate labels.

use serde::{Deserialize, Serialize};

use crate::activation::{NeuronId, SkipRecord, TopKResult};
use crate::backends::{caption_image, summarize_concepts, CaptionResult, Captioner, CompletionRequest, Summarizer};
use crate::dataset::ProbeDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::prompts::{clean_label, PromptTemplate, TemplateName};

/// Captions longer than this many whitespace tokens are simplified first.
pub const SIMPLIFY_ABOVE_TOKENS: usize = 20;
const MAX_TEMPERATURE_BUMPS: usize = 3;
const TEMPERATURE_STEP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConceptSet {
    pub neuron: NeuronId,
    /// Candidate labels; order is significant (the first is the fallback label).
    pub concepts: Vec<String>,
    /// Captions of the top activating images, in activation order.
    pub captions: Vec<CaptionResult>,
    #[serde(default)]
    pub skipped: Vec<SkipRecord>,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptionBatch {
    pub captions: Vec<CaptionResult>,
    pub skipped: Vec<SkipRecord>,
}

/// Captions every image of `topk` in order. Images that fail are dropped
/// and recorded; if all fail the neuron is undescribable.
pub fn caption_top_images<C: Captioner + ?Sized>(
    topk: &TopKResult,
    dataset: &ProbeDataset,
    captioner: &C,
    exec: Exec,
) -> Result<CaptionBatch> {
    let ids: Vec<&str> = topk.image_ids().collect();
    for id in &ids {
        if dataset.get(id).is_none() {
            return Err(Error::pre(format!("top-k image {id} is not in the probe dataset")));
        }
    }
    let results = exec.map(&ids, |id| caption_image(captioner, id, &dataset.get(id).unwrap().payload));
    let mut batch = CaptionBatch::default();
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok(c) => batch.captions.push(c),
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => {
                log::warn!("caption failed for {id}: {e}");
                batch.skipped.push(SkipRecord { image_id: id.to_string(), reason: e.to_string() });
            }
        }
    }
    if batch.captions.is_empty() {
        return Err(Error::Undescribable(topk.neuron.to_string()));
    }
    Ok(batch)
}

/// Reduces one caption to a short concept label.
pub fn simplify_caption<S: Summarizer + ?Sized>(caption: &str, summarizer: &S, temperature: f64) -> Result<String> {
    if caption.trim().is_empty() {
        return Err(Error::pre("cannot simplify an empty caption"));
    }
    let template = PromptTemplate::get(TemplateName::Simplify);
    let req = CompletionRequest::new(&template, vec![caption.to_string()], 1, temperature);
    let raw = summarizer.complete(&req)?;
    let label = raw.first().map(|r| clean_label(r)).unwrap_or_default();
    if label.is_empty() {
        return Err(Error::EmptyResponse("simplified caption is empty".into()));
    }
    Ok(label)
}

/// Simplifies only captions longer than [`SIMPLIFY_ABOVE_TOKENS`] tokens.
pub fn prepare_caption<S: Summarizer + ?Sized>(caption: &str, summarizer: &S, temperature: f64) -> Result<String> {
    if caption.split_whitespace().count() > SIMPLIFY_ABOVE_TOKENS {
        simplify_caption(caption, summarizer, temperature)
    } else {
        Ok(caption.to_string())
    }
}

/// `n` distinct candidate labels for `captions`, via the similarity prompt
/// and its few-shot examples.
///
/// Duplicates are removed (case-insensitively). Sampling backends are
/// re-queried at a higher temperature to fill the gap; deterministic ones
/// cannot improve, so a shortfall is an error straight away.
pub fn generate_candidates<S: Summarizer + ?Sized>(
    captions: &[String],
    n: usize,
    summarizer: &S,
    temperature: f64,
) -> Result<Vec<String>> {
    if captions.is_empty() {
        return Err(Error::pre("generate_candidates needs at least one caption"));
    }
    let template = PromptTemplate::get(TemplateName::Similarity);
    let mut out: Vec<String> = Vec::with_capacity(n);
    let absorb = |labels: Vec<String>, out: &mut Vec<String>| {
        for l in labels {
            if out.len() < n && !out.iter().any(|o| o.eq_ignore_ascii_case(&l)) {
                out.push(l);
            }
        }
    };
    absorb(summarize_concepts(summarizer, captions, n, &template, temperature)?, &mut out);
    let mut temp = temperature;
    let mut bumps = 0;
    while out.len() < n && summarizer.samples() && bumps < MAX_TEMPERATURE_BUMPS {
        temp = (temp + TEMPERATURE_STEP).min(2.0);
        bumps += 1;
        absorb(summarize_concepts(summarizer, captions, n, &template, temp)?, &mut out);
    }
    if out.len() < n {
        return Err(Error::Protocol(format!(
            "{} produced only {} distinct candidates, wanted {n}",
            summarizer.backend_id(),
            out.len()
        )));
    }
    Ok(out)
}

/// Runs the whole step for one neuron.
pub fn describe_candidates<C: Captioner + ?Sized, S: Summarizer + ?Sized>(
    topk: &TopKResult,
    dataset: &ProbeDataset,
    captioner: &C,
    summarizer: &S,
    n: usize,
    temperature: f64,
    config_fingerprint: &str,
    exec: Exec,
) -> Result<CandidateConceptSet> {
    let batch = caption_top_images(topk, dataset, captioner, exec)?;
    let prepared = batch
        .captions
        .iter()
        .map(|c| prepare_caption(&c.caption, summarizer, temperature))
        .collect::<Result<Vec<_>>>()?;
    let concepts = generate_candidates(&prepared, n, summarizer, temperature)?;
    Ok(CandidateConceptSet {
        neuron: topk.neuron.clone(),
        concepts,
        captions: batch.captions,
        skipped: batch.skipped,
        config_fingerprint: config_fingerprint.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockCaptioner, MockSummarizer, MockWorld};
    use crate::dataset::ProbeImage;
    use crate::raster::ImagePayload;
    use std::sync::Mutex;

    fn fixture(tags: &[&str]) -> (MockWorld, ProbeDataset, TopKResult) {
        let w = MockWorld::default();
        let imgs: Vec<ProbeImage> = tags
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let payload = if *t == "broken" {
                    ImagePayload::from_bytes(vec![0xde, 0xad])
                } else {
                    ImagePayload::encode_png(&w.render_tag(t, [i as u8; 32]))
                };
                ProbeImage::original(format!("i{i}"), payload)
            })
            .collect();
        let topk = TopKResult {
            neuron: NeuronId::new("l", 0),
            entries: (0..tags.len()).map(|i| (format!("i{i}"), 1.0)).collect(),
        };
        (w, ProbeDataset::new("d", imgs).unwrap(), topk)
    }

    #[test]
    fn captions_in_topk_order() {
        let (w, ds, topk) = fixture(&["dog", "dog", "dog"]);
        let b = caption_top_images(&topk, &ds, &MockCaptioner::new(w), Exec::Parallel).unwrap();
        assert_eq!(b.captions.len(), 3);
        assert!(b.captions.iter().all(|c| c.caption.contains("dog")));
        assert_eq!(b.captions[2].image_id, "i2");
    }

    #[test]
    fn malformed_image_is_skipped_and_recorded() {
        let (w, ds, topk) = fixture(&["dog", "broken", "cat"]);
        let b = caption_top_images(&topk, &ds, &MockCaptioner::new(w.clone()), Exec::Sequential).unwrap();
        assert_eq!(b.captions.len(), 2);
        assert_eq!(b.skipped.len(), 1);
        assert_eq!(b.skipped[0].image_id, "i1");

        let (w, ds, topk) = fixture(&["broken"]);
        assert!(matches!(
            caption_top_images(&topk, &ds, &MockCaptioner::new(w), Exec::Sequential),
            Err(Error::Undescribable(_))
        ));
    }

    #[test]
    fn single_image() {
        let (w, ds, topk) = fixture(&["cat"]);
        let b = caption_top_images(&topk, &ds, &MockCaptioner::new(w), Exec::Sequential).unwrap();
        assert_eq!(b.captions.len(), 1);
    }

    #[test]
    fn simplify_rules() {
        let s = MockSummarizer::new(MockWorld::default());
        assert_eq!(simplify_caption("a red spool of a cable with the word red on it", &s, 0.0).unwrap(), "red spool");
        assert_eq!(simplify_caption("red", &s, 0.0).unwrap(), "red");
        assert!(simplify_caption("  ", &s, 0.0).is_err());
        let short = "a photo of a dog";
        assert_eq!(prepare_caption(short, &s, 0.0).unwrap(), short);
        let long = "a striped cat ".repeat(8);
        assert_eq!(prepare_caption(&long, &s, 0.0).unwrap(), "striped cat");
    }

    #[test]
    fn candidates_follow_majority_token() {
        let s = MockSummarizer::new(MockWorld::default());
        let caps: Vec<String> = ["a striped cat", "a striped shirt", "striped wallpaper", "a dog"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let c = generate_candidates(&caps, 5, &s, 0.0).unwrap();
        assert_eq!(c.len(), 5);
        assert!(c.iter().all(|l| l.contains("striped")));
        assert_eq!(generate_candidates(&caps, 1, &s, 0.0).unwrap().len(), 1);
        assert!(matches!(generate_candidates(&[], 5, &s, 0.0), Err(Error::Precondition(_))));
    }

    /// Sampling fake that repeats itself until the temperature rises.
    struct Repetitive {
        temps: Mutex<Vec<f64>>,
    }

    impl Summarizer for Repetitive {
        fn backend_id(&self) -> String {
            "repetitive".into()
        }
        fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>> {
            self.temps.lock().unwrap().push(req.temperature);
            let k = self.temps.lock().unwrap().len();
            Ok((0..req.n).map(|i| if req.temperature == 0.0 { "same".to_string() } else { format!("label {k}-{i}") }).collect())
        }
        fn samples(&self) -> bool {
            true
        }
    }

    #[test]
    fn duplicates_are_padded_with_temperature_bumps() {
        let s = Repetitive { temps: Mutex::new(vec![]) };
        let c = generate_candidates(&["x".into()], 3, &s, 0.0).unwrap();
        assert_eq!(c[0], "same");
        assert_eq!(c.len(), 3);
        let temps = s.temps.lock().unwrap().clone();
        assert_eq!(temps.len(), 2);
        assert!((temps[1] - TEMPERATURE_STEP).abs() < 1e-12);
    }
}
