//! Offline backends over a toy "tag world".
//!
//! Every word of a small vocabulary owns a palette colour. An image's tags
//! are the palette colours it contains, so attention crops, captions, image
//! embeddings and the colour-detector target network all agree on what an
//! image shows. All mocks are pure functions of their inputs and seed.

use std::collections::HashMap;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use sha2::{Digest, Sha256};

use super::{Captioner, CompletionRequest, Embedder, ImageGenerator, PairScorer, Summarizer};
use crate::error::{Error, Result};
use crate::prompts::TemplateName;
use crate::raster::ImagePayload;
use crate::text::{content_tokens, tokenize};

pub const MOCK_EMBED_DIM: usize = 64;
/// Embedding axis reserved for pixels that match no tag.
const BACKGROUND_AXIS: usize = MOCK_EMBED_DIM - 1;
pub const MAX_VOCAB: usize = MOCK_EMBED_DIM - 1;
pub const BACKGROUND: [u8; 3] = [128, 128, 128];
const COLOR_TOLERANCE: i32 = 20;
const NOISE: f32 = 0.05;
pub const MOCK_IMAGE_SIZE: u32 = 32;

pub const DEFAULT_VOCAB: &[&str] = &[
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "striped", "dotted",
    "checkered", "furry", "wooden", "metallic", "dog", "cat", "bird", "fish", "horse", "cow", "insect", "car",
    "boat", "bicycle", "airplane", "train", "chair", "table", "bottle", "water", "grass", "sky", "snow", "sand",
    "road", "building", "tree", "flower", "mountain", "crop", "field", "forest", "river", "fishing", "food",
    "person", "spool", "cable", "textile", "net", "shark", "wetland", "desert", "house",
];

const LABEL_TEMPLATES: &[&str] = &[
    "{}", "{} objects", "{} patterns", "{} textures", "{} scenes", "close-up of {}", "{} surfaces", "{} shapes",
    "images of {}", "{} details",
];

const SUPERCLASS_KEYWORDS: &[(&str, &[&str])] = &[
    ("Planted/Cultivated", &["crop", "crops", "rows", "farm", "farmland", "cultivated", "planted", "orchard"]),
    ("Herbaceous/Shrubland", &["grass", "grassland", "shrub", "shrubs", "meadow", "herbaceous", "prairie"]),
    ("Urban/Suburban", &["road", "roads", "building", "buildings", "house", "houses", "urban", "roof", "parking"]),
    ("Barren", &["sand", "desert", "bare", "dirt", "rock", "rocky", "barren", "soil"]),
    ("Forest", &["tree", "trees", "forest", "woods", "canopy", "woodland"]),
    ("Water/wetlands", &["water", "river", "lake", "pond", "wetland", "wetlands", "marsh", "coast"]),
];

#[derive(Debug)]
struct WorldInner {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    digest: String,
}

/// Shared vocabulary and palette for all mock backends.
#[derive(Debug, Clone)]
pub struct MockWorld(Arc<WorldInner>);

impl Default for MockWorld {
    fn default() -> Self {
        MockWorld::new(DEFAULT_VOCAB.iter().map(|s| s.to_string()).collect()).expect("default vocabulary is valid")
    }
}

fn hashed_unit(domain: &str, data: &[u8]) -> Vec<f32> {
    let mut out = Vec::with_capacity(MOCK_EMBED_DIM);
    let mut counter = 0u32;
    while out.len() < MOCK_EMBED_DIM {
        let mut h = Sha256::new();
        h.update(domain.as_bytes());
        h.update([0]);
        h.update(data);
        h.update(counter.to_le_bytes());
        for chunk in h.finalize().chunks_exact(4) {
            let u = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            out.push((u as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32);
        }
        counter += 1;
    }
    out.truncate(MOCK_EMBED_DIM);
    normalize(out)
}

fn normalize(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn seed_bytes(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

impl MockWorld {
    pub fn new(vocab: Vec<String>) -> Result<Self> {
        if vocab.is_empty() || vocab.len() > MAX_VOCAB {
            return Err(Error::Config(format!("mock vocabulary needs 1..={MAX_VOCAB} words")));
        }
        let mut index = HashMap::new();
        for (i, w) in vocab.iter().enumerate() {
            let toks = tokenize(w);
            if toks.len() != 1 || toks[0] != *w {
                return Err(Error::Config(format!("vocabulary word `{w}` must be a single lower-case token")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word `{w}`")));
            }
        }
        let digest = hex::encode(Sha256::digest(vocab.join("\n").as_bytes()))[..8].to_string();
        Ok(MockWorld(Arc::new(WorldInner { vocab, index, digest })))
    }

    pub fn vocab(&self) -> &[String] {
        &self.0.vocab
    }

    pub fn digest(&self) -> &str {
        &self.0.digest
    }

    pub fn tag_index(&self, word: &str) -> Option<usize> {
        self.0.index.get(word).copied()
    }

    /// Palette colour of slot `i`: a point of the 4-level RGB grid.
    pub fn palette(i: usize) -> [u8; 3] {
        [(i % 4) as u8 * 85, ((i / 4) % 4) as u8 * 85, ((i / 16) % 4) as u8 * 85]
    }

    pub fn color_of(&self, tag: &str) -> Option<[u8; 3]> {
        self.tag_index(tag).map(Self::palette)
    }

    fn match_pixel(&self, p: &Rgb<u8>) -> Option<usize> {
        
        (0..self.0.vocab.len()).find(|&i| {
            let c = Self::palette(i);
            (0..3).all(|k| (p[k] as i32 - c[k] as i32).abs() <= COLOR_TOLERANCE)
        })
    }

    /// Pixel count per vocabulary slot plus the count of unmatched pixels.
    pub fn tag_histogram(&self, img: &RgbImage) -> (Vec<usize>, usize) {
        let mut counts = vec![0usize; self.0.vocab.len()];
        let mut other = 0;
        for p in img.pixels() {
            match self.match_pixel(p) {
                Some(i) => counts[i] += 1,
                None => other += 1,
            }
        }
        (counts, other)
    }

    /// The tag covering most pixels, ties to the earlier vocabulary word.
    pub fn dominant_tag(&self, img: &RgbImage) -> Option<&str> {
        let (counts, _) = self.tag_histogram(img);
        let (best, &n) = counts.iter().enumerate().fold((0, &0), |acc, (i, c)| if *c > *acc.1 { (i, c) } else { acc });
        (n > 0).then(|| self.0.vocab[best].as_str())
    }

    /// First vocabulary token of `text`, else its first content token.
    pub fn dominant_token(&self, text: &str) -> Option<String> {
        let toks = tokenize(text);
        toks.iter()
            .find(|t| self.0.index.contains_key(t.as_str()))
            .cloned()
            .or_else(|| content_tokens(text).into_iter().next())
            .or_else(|| toks.into_iter().next())
    }

    /// A `size`x`size` image of `tag` with a background patch whose placement
    /// depends on `variant`. Unknown tags render as background only.
    pub fn render_tag(&self, tag: &str, variant: [u8; 32]) -> RgbImage {
        let s = MOCK_IMAGE_SIZE;
        let fill = self.color_of(tag).unwrap_or(BACKGROUND);
        let mut img = RgbImage::from_pixel(s, s, Rgb(fill));
        let w = 4 + variant[0] as u32 % 12;
        let h = 4 + variant[1] as u32 % 12;
        let x0 = variant[2] as u32 % (s - w);
        let y0 = variant[3] as u32 % (s - h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.put_pixel(x, y, Rgb(BACKGROUND));
            }
        }
        img
    }

    /// A background image with tagged rectangles `(tag, x0, y0, x1, y1)`.
    pub fn render_regions(&self, width: u32, height: u32, regions: &[(&str, u32, u32, u32, u32)]) -> RgbImage {
        let mut img = RgbImage::from_pixel(width, height, Rgb(BACKGROUND));
        for &(tag, x0, y0, x1, y1) in regions {
            let c = self.color_of(tag).unwrap_or(BACKGROUND);
            for y in y0..y1.min(height) {
                for x in x0..x1.min(width) {
                    img.put_pixel(x, y, Rgb(c));
                }
            }
        }
        img
    }

    fn axis(i: usize) -> Vec<f32> {
        let mut v = vec![0.0; MOCK_EMBED_DIM];
        v[i] = 1.0;
        v
    }

    pub fn text_embedding(&self, text: &str) -> Vec<f32> {
        let norm = tokenize(text).join(" ");
        let base = match tokenize(text).iter().find_map(|t| self.tag_index(t)) {
            Some(i) => Self::axis(i),
            None => hashed_unit("token", self.dominant_token(text).unwrap_or_default().as_bytes()),
        };
        let noise = hashed_unit("text", norm.as_bytes());
        normalize(base.iter().zip(&noise).map(|(b, n)| b + NOISE * n).collect())
    }

    pub fn image_embedding(&self, img: &RgbImage) -> Vec<f32> {
        let (counts, other) = self.tag_histogram(img);
        let total = (counts.iter().sum::<usize>() + other) as f32;
        let mut v = vec![0.0f32; MOCK_EMBED_DIM];
        for (i, c) in counts.iter().enumerate() {
            v[i] = *c as f32 / total;
        }
        v[BACKGROUND_AXIS] = other as f32 / total;
        let v = normalize(v);
        let noise = hashed_unit("pixels", img.as_raw());
        normalize(v.iter().zip(&noise).map(|(b, n)| b + NOISE * n).collect())
    }
}

/// Captions an image after its dominant tag: `"a photo of a <tag>"`.
#[derive(Debug, Clone)]
pub struct MockCaptioner {
    world: MockWorld,
}

impl MockCaptioner {
    pub fn new(world: MockWorld) -> Self {
        MockCaptioner { world }
    }
}

impl Captioner for MockCaptioner {
    fn backend_id(&self) -> String {
        format!("mock-captioner-{}", self.world.digest())
    }

    fn caption(&self, image: &ImagePayload) -> Result<String> {
        let img = image.decode()?;
        Ok(match self.world.dominant_tag(&img) {
            Some(tag) => format!("a photo of a {tag}"),
            None => "a photo of a plain background".to_string(),
        })
    }
}

/// Deterministic stand-in for the language model.
///
/// * similarity: the most frequent content token `t` across captions,
///   expanded through fixed templates (`t`, `t objects`, ...); a single
///   caption with `n = 1` passes through unchanged.
/// * simplify: the first two content tokens.
/// * superclass: `label (Superclass)` from a keyword table, or the bare label.
#[derive(Debug, Clone)]
pub struct MockSummarizer {
    world: MockWorld,
}

impl MockSummarizer {
    pub fn new(world: MockWorld) -> Self {
        MockSummarizer { world }
    }

    /// Most frequent content token; ties go to the earliest first occurrence.
    pub fn majority_token(captions: &[String]) -> Option<String> {
        let mut counts: Vec<(String, usize)> = Vec::new();
        for tok in captions.iter().flat_map(|c| content_tokens(c)) {
            match counts.iter_mut().find(|(t, _)| *t == tok) {
                Some((_, n)) => *n += 1,
                None => counts.push((tok, 1)),
            }
        }
        let mut best: Option<(String, usize)> = None;
        for (t, n) in counts {
            if best.as_ref().is_none_or(|(_, b)| n > *b) {
                best = Some((t, n));
            }
        }
        best.map(|(t, _)| t)
    }

    pub fn superclass_of(label: &str) -> Option<&'static str> {
        let toks = tokenize(label);
        SUPERCLASS_KEYWORDS
            .iter()
            .find(|(_, kws)| toks.iter().any(|t| kws.contains(&t.as_str())))
            .map(|(name, _)| *name)
    }
}

impl Summarizer for MockSummarizer {
    fn backend_id(&self) -> String {
        format!("mock-summarizer-{}", self.world.digest())
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>> {
        if req.inputs.is_empty() {
            return Err(Error::pre("no descriptions given"));
        }
        match req.template {
            TemplateName::Similarity => {
                if req.inputs.len() == 1 && req.n == 1 {
                    return Ok(vec![req.inputs[0].trim().to_string()]);
                }
                if req.n > LABEL_TEMPLATES.len() {
                    return Err(Error::Protocol(format!(
                        "mock summarizer produces at most {} distinct labels",
                        LABEL_TEMPLATES.len()
                    )));
                }
                let tok = Self::majority_token(&req.inputs)
                    .ok_or_else(|| Error::EmptyResponse("captions carry no content tokens".into()))?;
                Ok(LABEL_TEMPLATES[..req.n].iter().map(|t| t.replace("{}", &tok)).collect())
            }
            TemplateName::Simplify => {
                let toks = content_tokens(&req.inputs[0]);
                let label = if toks.is_empty() { req.inputs[0].trim().to_string() } else { toks[..toks.len().min(2)].join(" ") };
                Ok(vec![label; req.n])
            }
            TemplateName::Superclass => {
                let label = req.inputs.join(" ");
                let label = label.trim();
                let out = match Self::superclass_of(label) {
                    Some(cls) => format!("{label} ({cls})"),
                    None => label.to_string(),
                };
                Ok(vec![out; req.n])
            }
        }
    }
}

/// Renders `q` images of the prompt's dominant tag. Prompts containing any
/// of `refuse_terms` are refused.
#[derive(Debug, Clone)]
pub struct MockImageGenerator {
    world: MockWorld,
    refuse_terms: Vec<String>,
}

impl MockImageGenerator {
    pub fn new(world: MockWorld) -> Self {
        MockImageGenerator { world, refuse_terms: Vec::new() }
    }

    pub fn refusing(mut self, terms: &[&str]) -> Self {
        self.refuse_terms = terms.iter().map(|t| t.to_lowercase()).collect();
        self
    }
}

impl ImageGenerator for MockImageGenerator {
    fn backend_id(&self) -> String {
        format!("mock-generator-{}", self.world.digest())
    }

    fn generate(&self, prompt: &str, q: usize, seed: u64) -> Result<Vec<ImagePayload>> {
        let lower = prompt.to_lowercase();
        if let Some(t) = self.refuse_terms.iter().find(|t| lower.contains(t.as_str())) {
            return Err(Error::ContentRefused(format!("prompt contains `{t}`")));
        }
        let tag = self.world.dominant_token(prompt).unwrap_or_default();
        Ok((0..q as u64)
            .map(|i| {
                let variant = seed_bytes(&[prompt.as_bytes(), &seed.to_le_bytes(), &i.to_le_bytes()]);
                ImagePayload::encode_png(&self.world.render_tag(&tag, variant))
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    world: MockWorld,
}

impl MockEmbedder {
    pub fn new(world: MockWorld) -> Self {
        MockEmbedder { world }
    }
}

impl Embedder for MockEmbedder {
    fn backend_id(&self) -> String {
        format!("mock-embedder-{}", self.world.digest())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.world.text_embedding(text))
    }

    fn embed_image(&self, image: &ImagePayload) -> Result<Vec<f32>> {
        Ok(self.world.image_embedding(&image.decode()?))
    }
}

/// Token-multiset F1 between the two texts.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockPairScorer;

impl PairScorer for MockPairScorer {
    fn backend_id(&self) -> String {
        "mock-token-f1".into()
    }

    fn f1(&self, candidate: &str, reference: &str) -> Result<f64> {
        let (c, r) = (tokenize(candidate), tokenize(reference));
        if c.is_empty() || r.is_empty() {
            return Ok(0.0);
        }
        let mut pool: HashMap<&str, usize> = HashMap::new();
        for t in &r {
            *pool.entry(t.as_str()).or_default() += 1;
        }
        let mut common = 0usize;
        for t in &c {
            if let Some(n) = pool.get_mut(t.as_str()).filter(|n| **n > 0) {
                *n -= 1;
                common += 1;
            }
        }
        if common == 0 {
            return Ok(0.0);
        }
        let (p, rec) = (common as f64 / c.len() as f64, common as f64 / r.len() as f64);
        Ok(2.0 * p * rec / (p + rec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{
        caption_image, embed_image, embed_text, generate_images, summarize_concepts, CompletionRequest,
    };
    use crate::prompts::PromptTemplate;

    fn world() -> MockWorld {
        MockWorld::default()
    }

    fn tagged(w: &MockWorld, tag: &str, v: u8) -> ImagePayload {
        ImagePayload::encode_png(&w.render_tag(tag, [v; 32]))
    }

    #[test]
    fn palette_is_distinct_and_avoids_background() {
        let w = world();
        assert!(w.vocab().len() <= MAX_VOCAB);
        for i in 0..w.vocab().len() {
            for j in 0..i {
                assert_ne!(MockWorld::palette(i), MockWorld::palette(j));
            }
            let c = MockWorld::palette(i);
            assert!((0..3).any(|k| (c[k] as i32 - 128).abs() > COLOR_TOLERANCE));
        }
    }

    #[test]
    fn caption_follows_tag_table() {
        let w = world();
        let cap = caption_image(&MockCaptioner::new(w.clone()), "x", &tagged(&w, "dog", 3)).unwrap();
        assert_eq!(cap.caption, "a photo of a dog");
        let empty = caption_image(&MockCaptioner::new(w), "x", &ImagePayload::from_bytes(vec![]));
        assert!(matches!(empty, Err(Error::MalformedImage(_))));
    }

    /// Independent frequency count over the caption tokens.
    fn oracle_majority(captions: &[&str]) -> String {
        let mut counts: Vec<(String, usize)> = vec![];
        for c in captions {
            for t in c.split_whitespace() {
                let t = t.to_lowercase();
                if crate::text::is_stopword(&t) {
                    continue;
                }
                if let Some(e) = counts.iter_mut().find(|e| e.0 == t) {
                    e.1 += 1;
                } else {
                    counts.push((t, 1));
                }
            }
        }
        let max = counts.iter().map(|e| e.1).max().unwrap();
        counts.into_iter().find(|e| e.1 == max).unwrap().0
    }

    #[test]
    fn summarizer_majority_templates() {
        let s = MockSummarizer::new(world());
        let t = PromptTemplate::get(TemplateName::Similarity);
        let caps = ["a red car", "a red dress", "a photo of a red spool"];
        assert_eq!(oracle_majority(&caps), "red");
        let captions: Vec<String> = caps.iter().map(|s| s.to_string()).collect();
        assert_eq!(summarize_concepts(&s, &captions, 2, &t, 0.0).unwrap(), vec!["red", "red objects"]);
        assert_eq!(summarize_concepts(&s, &["a cat".to_string()], 1, &t, 0.0).unwrap(), vec!["a cat"]);
        assert!(matches!(summarize_concepts(&s, &[], 2, &t, 0.0), Err(Error::Precondition(_))));
        let five = summarize_concepts(&s, &captions, 5, &t, 0.0).unwrap();
        let mut dedup = five.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
    }

    #[test]
    fn simplify_and_superclass() {
        let s = MockSummarizer::new(world());
        let simplify = PromptTemplate::get(TemplateName::Simplify);
        let req = CompletionRequest::new(&simplify, vec!["a red spool of a cable with the word red on it".into()], 1, 0.0);
        assert_eq!(s.complete(&req).unwrap(), vec!["red spool"]);
        let req = CompletionRequest::new(&simplify, vec!["red".into()], 1, 0.0);
        assert_eq!(s.complete(&req).unwrap(), vec!["red"]);
        let sup = PromptTemplate::get(TemplateName::Superclass);
        let req = CompletionRequest::new(&sup, vec!["crop rows".into()], 1, 0.0);
        assert_eq!(s.complete(&req).unwrap(), vec!["crop rows (Planted/Cultivated)"]);
    }

    #[test]
    fn generator_tags_and_determinism() {
        let w = world();
        let g = MockImageGenerator::new(w.clone());
        let set = generate_images(&g, "blue texture", 3, 7).unwrap();
        assert_eq!(set.images.len(), 3);
        for img in &set.images {
            assert_eq!(w.dominant_tag(&img.decode().unwrap()), Some("blue"));
        }
        assert_eq!(generate_images(&g, "blue texture", 3, 7).unwrap(), set);
        assert_ne!(generate_images(&g, "blue texture", 3, 8).unwrap().images, set.images);
        assert!(matches!(generate_images(&g, "blue", 0, 7), Err(Error::Precondition(_))));
    }

    #[test]
    fn refusal_gets_one_sanitized_retry() {
        let w = world();
        let g = MockImageGenerator::new(w.clone()).refusing(&["!!"]);
        let set = generate_images(&g, "red!!", 2, 1).unwrap();
        assert_eq!(set.prompt, "red");
        let g = MockImageGenerator::new(w).refusing(&["blood"]);
        assert!(matches!(generate_images(&g, "blood red", 2, 1), Err(Error::ContentRefused(_))));
    }

    #[test]
    fn embedding_contract() {
        let w = world();
        let e = MockEmbedder::new(w.clone());
        let x = embed_text(&e, "x").unwrap();
        assert!((x.cosine(&embed_text(&e, "x").unwrap()) - 1.0).abs() < 1e-6);
        let dog = embed_text(&e, "dog").unwrap();
        let dog_img = embed_image(&e, &tagged(&w, "dog", 0)).unwrap();
        assert!(dog.cosine(&dog_img) >= 0.95);
        let car_img = embed_image(&e, &tagged(&w, "car", 0)).unwrap();
        assert!(dog_img.cosine(&car_img) <= 0.1);
        assert!(dog.cosine(&embed_text(&e, "cat").unwrap()) <= 0.1);
        assert!(dog.cosine(&embed_text(&e, "dog objects").unwrap()) >= 0.95);
        assert!(embed_text(&e, "").is_err());
        assert_eq!(dog.values.len(), MOCK_EMBED_DIM);
    }

    #[test]
    fn vocabulary_validation() {
        assert!(MockWorld::new(vec![]).is_err());
        assert!(MockWorld::new(vec!["Dog".into()]).is_err());
        assert!(MockWorld::new(vec!["two words".into()]).is_err());
        assert!(MockWorld::new((0..64).map(|i| format!("w{i}")).collect()).is_err());
    }
}
