//! Run configuration: one JSON file holding every parameter of a run, the
//! model and dataset locations, and the backend endpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::activation::{SequentialNet, SummaryMethod, TargetModel};
use crate::backends::live::RemoteModel;
use crate::backends::{
    BackendConfig, Cached, Captioner, ContentCache, Embedder, HttpCaptioner, HttpEmbedder, HttpImageGenerator,
    HttpPairScorer, HttpSummarizer, ImageGenerator, MockCaptioner, MockEmbedder, MockImageGenerator, MockPairScorer,
    MockSummarizer, MockWorld, PairScorer, ReqwestTransport, Summarizer, Transport,
};
use crate::crop::CropParams;
use crate::dataset::ProbeDataset;
use crate::error::{Error, Result};
use crate::selection::{ScoringFunction, SelectionParams, DEFAULT_SIM_LIMIT};

macro_rules! boxed {
    ($tr:ident, $inner:expr, $cache:expr) => {{
        let inner = $inner;
        match $cache {
            Some(c) => Box::new(Cached::new(inner, c.clone())) as Box<dyn $tr>,
            None => Box::new(inner) as Box<dyn $tr>,
        }
    }};
}

/// Which network to dissect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// One channel per tag of the mock world, firing on that tag's colour.
    /// Layers: `detect` (full resolution) and `pool`.
    ColorDetector {
        #[serde(default = "default_detector_name")]
        name: String,
        tags: Vec<String>,
        #[serde(default = "default_pool")]
        pool: usize,
    },
    /// A [`SequentialNet`] stored as JSON.
    Sequential { path: PathBuf },
    /// A network served over HTTP.
    Remote { backend: BackendConfig, channels: BTreeMap<String, usize> },
}

fn default_detector_name() -> String {
    "color-detector".into()
}

fn default_pool() -> usize {
    4
}

impl ModelSpec {
    pub fn build(&self, world: &MockWorld) -> Result<Box<dyn TargetModel>> {
        match self {
            ModelSpec::ColorDetector { name, tags, pool } => {
                let colors = tags
                    .iter()
                    .map(|t| world.color_of(t).ok_or_else(|| Error::Config(format!("tag `{t}` is not in the mock vocabulary"))))
                    .collect::<Result<Vec<_>>>()?;
                if colors.is_empty() {
                    return Err(Error::Config("color detector needs at least one tag".into()));
                }
                Ok(Box::new(SequentialNet::color_detector(name.clone(), &colors, *pool)))
            }
            ModelSpec::Sequential { path } => {
                let net: SequentialNet = serde_json::from_slice(&fs::read(path)?)?;
                net.validate()?;
                Ok(Box::new(net))
            }
            ModelSpec::Remote { backend, channels } => {
                Ok(Box::new(RemoteModel::new(backend.clone(), transport(), channels.clone())?))
            }
        }
    }
}

fn transport() -> Arc<dyn Transport> {
    Arc::new(ReqwestTransport::new())
}

/// `"all"`, a range list such as `"0-49,60"`, or explicit indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NeuronSelection {
    Spec(String),
    List(Vec<usize>),
}

impl Default for NeuronSelection {
    fn default() -> Self {
        NeuronSelection::Spec("all".into())
    }
}

impl NeuronSelection {
    /// Sorted, de-duplicated indices below `channels`.
    pub fn resolve(&self, channels: usize) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = match self {
            NeuronSelection::List(v) => v.clone(),
            NeuronSelection::Spec(s) if s.trim() == "all" => (0..channels).collect(),
            NeuronSelection::Spec(s) => parse_ranges(s)?,
        };
        out.sort_unstable();
        out.dedup();
        if let Some(bad) = out.iter().find(|&&i| i >= channels) {
            return Err(Error::Config(format!("neuron {bad} is out of range for {channels} channels")));
        }
        Ok(out)
    }
}

/// Parses `"0-3,7,10-11"`; an empty string selects nothing.
pub fn parse_ranges(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad neuron range `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

/// Where the augmented images for a neuron come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentScope {
    /// Crops of every selected neuron join one shared probe set.
    #[default]
    Global,
    /// Each neuron sees the originals plus its own crops.
    PerNeuron,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    pub captioner: BackendConfig,
    pub summarizer: BackendConfig,
    pub generator: BackendConfig,
    /// Image-text embedder (scoring, multi-labels, `embed_cos_a`).
    pub embedder: BackendConfig,
    /// Sentence embedder for `embed_cos_b`.
    pub embedder_b: BackendConfig,
    pub pair_scorer: BackendConfig,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        let m = BackendConfig::mock();
        BackendsConfig {
            captioner: m.clone(),
            summarizer: m.clone(),
            generator: m.clone(),
            embedder: m.clone(),
            embedder_b: m.clone(),
            pair_scorer: m,
        }
    }
}

impl BackendsConfig {
    fn all(&self) -> [&BackendConfig; 6] {
        [&self.captioner, &self.summarizer, &self.generator, &self.embedder, &self.embedder_b, &self.pair_scorer]
    }

    pub fn any_live(&self) -> bool {
        self.all().iter().any(|b| !b.is_mock())
    }

    /// Instantiates the backends, wrapped in `cache` when given.
    pub fn build(&self, world: &MockWorld, cache: Option<Arc<ContentCache>>) -> Result<Backends> {
        for b in self.all() {
            b.validate()?;
        }
        let captioner: Box<dyn Captioner> = if self.captioner.is_mock() {
            boxed!(Captioner, MockCaptioner::new(world.clone()), &cache)
        } else {
            boxed!(Captioner, HttpCaptioner::new(self.captioner.clone(), transport())?, &cache)
        };
        let summarizer: Box<dyn Summarizer> = if self.summarizer.is_mock() {
            boxed!(Summarizer, MockSummarizer::new(world.clone()), &cache)
        } else {
            boxed!(Summarizer, HttpSummarizer::new(self.summarizer.clone(), transport())?, &cache)
        };
        let generator: Box<dyn ImageGenerator> = if self.generator.is_mock() {
            boxed!(ImageGenerator, MockImageGenerator::new(world.clone()), &cache)
        } else {
            boxed!(ImageGenerator, HttpImageGenerator::new(self.generator.clone(), transport())?, &cache)
        };
        let embedder = build_embedder(&self.embedder, world, &cache)?;
        let embedder_b = build_embedder(&self.embedder_b, world, &cache)?;
        let pair_scorer: Box<dyn PairScorer> = if self.pair_scorer.is_mock() {
            boxed!(PairScorer, MockPairScorer, &cache)
        } else {
            boxed!(PairScorer, HttpPairScorer::new(self.pair_scorer.clone(), transport())?, &cache)
        };
        Ok(Backends { captioner, summarizer, generator, embedder, embedder_b, pair_scorer })
    }
}

fn build_embedder(cfg: &BackendConfig, world: &MockWorld, cache: &Option<Arc<ContentCache>>) -> Result<Box<dyn Embedder>> {
    Ok(if cfg.is_mock() {
        boxed!(Embedder, MockEmbedder::new(world.clone()), cache)
    } else {
        boxed!(Embedder, HttpEmbedder::new(cfg.clone(), transport())?, cache)
    })
}

/// Live or mock instances of every backend a run may use.
pub struct Backends {
    pub captioner: Box<dyn Captioner>,
    pub summarizer: Box<dyn Summarizer>,
    pub generator: Box<dyn ImageGenerator>,
    pub embedder: Box<dyn Embedder>,
    pub embedder_b: Box<dyn Embedder>,
    pub pair_scorer: Box<dyn PairScorer>,
}

impl Backends {
    pub fn ids(&self) -> BTreeMap<String, String> {
        [
            ("captioner", self.captioner.backend_id()),
            ("summarizer", self.summarizer.backend_id()),
            ("generator", self.generator.backend_id()),
            ("embedder", self.embedder.backend_id()),
            ("embedder_b", self.embedder_b.backend_id()),
            ("pair_scorer", self.pair_scorer.backend_id()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub layers: Vec<String>,
    pub neurons: NeuronSelection,
    /// Probe image directories; their images are pooled.
    pub datasets: Vec<PathBuf>,
    /// Vocabulary of the offline mock world.
    pub mock_vocab: Option<Vec<String>>,
    /// Top activating images captioned per neuron.
    pub k: usize,
    /// Candidate concepts per neuron.
    pub n: usize,
    /// Images generated per candidate.
    pub q: usize,
    pub beta: usize,
    pub t: usize,
    /// Crops per (neuron, image).
    pub alpha: usize,
    pub crop_iou_limit: f64,
    pub crop_min_region_px: usize,
    /// Top images per neuron that are cropped; defaults to `k`.
    pub crop_k: Option<usize>,
    pub augment: bool,
    pub augment_scope: AugmentScope,
    pub phi: f64,
    pub sim_limit: f64,
    /// Emit de-duplicated multi-label lists alongside the best label.
    pub multi_label: bool,
    pub summary: SummaryMethod,
    pub scoring: ScoringFunction,
    pub skip_selection: bool,
    pub temperature: f64,
    pub seed: u64,
    pub backends: BackendsConfig,
    /// Reference labels to evaluate against once descriptions exist.
    pub references: Option<PathBuf>,
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub cache: bool,
    pub parallel: bool,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Images per activation shard on disk.
    pub shard_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::ColorDetector { name: default_detector_name(), tags: vec![], pool: default_pool() },
            layers: vec![],
            neurons: NeuronSelection::default(),
            datasets: vec![],
            mock_vocab: None,
            k: 10,
            n: 5,
            q: 10,
            beta: 5,
            t: 10,
            alpha: 3,
            crop_iou_limit: 0.4,
            crop_min_region_px: 4,
            crop_k: None,
            augment: true,
            augment_scope: AugmentScope::Global,
            phi: 0.8,
            sim_limit: DEFAULT_SIM_LIMIT,
            multi_label: false,
            summary: SummaryMethod::SpatialMean,
            scoring: ScoringFunction::default(),
            skip_selection: false,
            temperature: 0.0,
            seed: 0,
            backends: BackendsConfig::default(),
            references: None,
            run_dir: PathBuf::from("run"),
            cache_dir: None,
            cache: true,
            parallel: true,
            workers: 0,
            shard_size: 256,
        }
    }
}

fn hash_json(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json value serializes")))
}

/// The parts of a backend configuration that can change its answers.
fn backend_semantics(b: &BackendConfig) -> Value {
    json!({ "endpoint": b.endpoint, "model": b.model, "options": b.options })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers.is_empty() {
            return bad("at least one layer is required");
        }
        if self.datasets.is_empty() {
            return bad("at least one probe dataset is required");
        }
        if self.k == 0 || self.n == 0 {
            return bad("k and n must be positive");
        }
        if self.crop_k == Some(0) {
            return bad("crop_k must be positive");
        }
        if !(self.phi > 0.0 && self.phi <= 1.0) || !(self.sim_limit > 0.0 && self.sim_limit <= 1.0) {
            return bad("phi and sim_limit must be in (0, 1]");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be in [0, 2]");
        }
        if self.shard_size == 0 {
            return bad("shard_size must be positive");
        }
        self.crop_params().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.selection_params().validate()?;
        for b in self.backends.all() {
            b.validate()?;
        }
        Ok(())
    }

    pub fn crop_params(&self) -> CropParams {
        CropParams { alpha: self.alpha, iou_limit: self.crop_iou_limit, min_region_px: self.crop_min_region_px }
    }

    pub fn crop_k(&self) -> usize {
        self.crop_k.unwrap_or(self.k)
    }

    pub fn selection_params(&self) -> SelectionParams {
        SelectionParams {
            q: self.q,
            beta: self.beta,
            t: self.t,
            scoring: self.scoring,
            seed: self.seed,
            summary: self.summary,
            multi_label_limit: self.multi_label.then_some(self.sim_limit),
        }
    }

    pub fn world(&self) -> Result<MockWorld> {
        match &self.mock_vocab {
            Some(v) => MockWorld::new(v.clone()),
            None => Ok(MockWorld::default()),
        }
    }

    pub fn cache_root(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.run_dir.join("cache"))
    }

    pub fn exec(&self) -> crate::Exec {
        if self.parallel {
            crate::Exec::Parallel
        } else {
            crate::Exec::Sequential
        }
    }

    pub fn load_datasets(&self) -> Result<ProbeDataset> {
        let mut sets = self.datasets.iter().map(|p| ProbeDataset::load_dir(p));
        let first = sets.next().ok_or_else(|| Error::Config("no probe dataset".into()))??;
        let mut images = first.images().to_vec();
        for s in sets {
            images.extend(s?.images().iter().cloned());
        }
        let name = if self.datasets.len() == 1 { first.name().to_string() } else { "pooled".to_string() };
        ProbeDataset::new(name, images)
    }

    /// Inputs of the augmentation stage (and of activation recording).
    pub fn augment_fingerprint(&self) -> String {
        hash_json(&json!({
            "model": self.model,
            "layers": self.layers,
            "neurons": self.neurons,
            "datasets": self.datasets,
            "mock_vocab": self.mock_vocab,
            "summary": self.summary,
            "augment": self.augment,
            "augment_scope": self.augment_scope,
            "alpha": self.alpha,
            "crop_iou_limit": self.crop_iou_limit,
            "crop_min_region_px": self.crop_min_region_px,
            "crop_k": self.crop_k(),
        }))
    }

    pub fn candidates_fingerprint(&self) -> String {
        hash_json(&json!({
            "augment": self.augment_fingerprint(),
            "k": self.k,
            "n": self.n,
            "temperature": self.temperature,
            "captioner": backend_semantics(&self.backends.captioner),
            "summarizer": backend_semantics(&self.backends.summarizer),
        }))
    }

    pub fn selection_fingerprint(&self) -> String {
        hash_json(&json!({
            "candidates": self.candidates_fingerprint(),
            "skip_selection": self.skip_selection,
            "q": self.q,
            "beta": self.beta,
            "t": self.t,
            "scoring": self.scoring,
            "seed": self.seed,
            "multi_label": self.multi_label,
            "sim_limit": self.sim_limit,
            "generator": backend_semantics(&self.backends.generator),
            "embedder": backend_semantics(&self.backends.embedder),
        }))
    }

    pub fn evaluate_fingerprint(&self) -> String {
        hash_json(&json!({
            "selection": self.selection_fingerprint(),
            "references": self.references,
            "embedder_b": backend_semantics(&self.backends.embedder_b),
            "pair_scorer": backend_semantics(&self.backends.pair_scorer),
        }))
    }

    /// Hash over every field that can change the run's results. Paths to
    /// the run and cache directories, parallelism and connection tuning are
    /// left out.
    pub fn fingerprint(&self) -> String {
        self.evaluate_fingerprint()
    }
}
