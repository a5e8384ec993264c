//! Best-concept selection: generate images for every candidate, rank all of
//! them by target-neuron activation and score each candidate from its ranks
//! and from how closely its images resemble the real top activating images.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::{NeuronId, SummaryMethod, TargetModel};
use crate::backends::{embed_image, embed_text, generate_images, Embedder, EmbeddingVector, GeneratedImageSet, ImageGenerator};
use crate::concepts::CandidateConceptSet;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::raster::ImagePayload;

pub const DESCRIPTIONS_DIR: &str = "descriptions";
pub const DESCRIPTIONS_SCHEMA_VERSION: &str = "1.0.0";
pub const DEFAULT_SIM_LIMIT: f64 = 0.81;

/// Ranks (1 = most activating) held by one candidate's generated images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankSet {
    pub concept_index: usize,
    /// Ascending.
    pub ranks: Vec<usize>,
    pub universe_size: usize,
}

impl RankSet {
    pub fn q(&self) -> usize {
        self.ranks.len()
    }
}

/// Ranks every generated image by summary, descending. `None` marks an
/// image whose activation could not be computed; those rank last.
///
/// Ties (and failed images) are ordered by concept index, then position.
pub fn rank_summaries(summaries: &[Vec<Option<f64>>]) -> Result<Vec<RankSet>> {
    if summaries.is_empty() {
        return Err(Error::pre("need at least one candidate to rank"));
    }
    let mut order: Vec<(usize, usize, Option<f64>)> = summaries
        .iter()
        .enumerate()
        .flat_map(|(j, s)| s.iter().enumerate().map(move |(p, v)| (j, p, *v)))
        .collect();
    if order.iter().any(|(_, _, v)| v.is_some_and(|v| v.is_nan())) {
        return Err(Error::pre("NaN activation summary"));
    }
    order.sort_by(|a, b| {
        let by_value = match (a.2, b.2) {
            (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(Ordering::Equal),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        by_value.then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });
    let universe = order.len();
    let mut sets: Vec<RankSet> = (0..summaries.len())
        .map(|j| RankSet { concept_index: j, ranks: Vec::new(), universe_size: universe })
        .collect();
    for (pos, (j, _, _)) in order.iter().enumerate() {
        sets[*j].ranks.push(pos + 1);
    }
    check_partition(&sets)?;
    Ok(sets)
}

/// Checks that the rank sets partition `1..=universe_size`.
pub fn check_partition(sets: &[RankSet]) -> Result<()> {
    let Some(first) = sets.first() else {
        return Err(Error::pre("no rank sets"));
    };
    let n = first.universe_size;
    let mut seen = vec![false; n + 1];
    let mut total = 0;
    for s in sets {
        if s.universe_size != n || !s.ranks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::pre(format!("malformed rank set for concept {}", s.concept_index)));
        }
        for &r in &s.ranks {
            if r == 0 || r > n || std::mem::replace(&mut seen[r], true) {
                return Err(Error::pre(format!("rank {r} is out of range or duplicated")));
            }
            total += 1;
        }
    }
    if total != n {
        return Err(Error::pre(format!("rank sets cover {total} of {n} positions")));
    }
    Ok(())
}

/// Summary activation of `neuron` on each generated image, `None` where
/// the image could not be decoded or run.
pub fn generated_summaries<M: TargetModel + ?Sized>(
    model: &M,
    neuron: &NeuronId,
    images: &[ImagePayload],
    method: SummaryMethod,
    exec: Exec,
) -> Result<Vec<Option<f64>>> {
    let channels = model.channels(&neuron.layer)?;
    if neuron.index >= channels {
        return Err(Error::UnknownNeuron(neuron.to_string()));
    }
    Ok(exec.map(images, |img| {
        let out = img.decode().and_then(|r| model.forward(&r, &neuron.layer));
        match out {
            Ok(maps) => Some(method.apply(maps.index_axis(ndarray::Axis(0), neuron.index))),
            Err(e) => {
                log::warn!("activation failed on a generated image for {neuron}: {e}");
                None
            }
        }
    }))
}

/// Ranks the generated images of all candidates for `neuron`.
pub fn rank_generated_images<M: TargetModel + ?Sized>(
    model: &M,
    neuron: &NeuronId,
    sets: &[GeneratedImageSet],
    method: SummaryMethod,
    exec: Exec,
) -> Result<(Vec<RankSet>, Vec<Vec<Option<f64>>>)> {
    let summaries = sets
        .iter()
        .map(|s| generated_summaries(model, neuron, &s.images, method, exec))
        .collect::<Result<Vec<_>>>()?;
    Ok((rank_summaries(&summaries)?, summaries))
}

pub fn score_mean(h: &RankSet) -> f64 {
    if h.ranks.is_empty() {
        return f64::NEG_INFINITY;
    }
    -(h.ranks.iter().sum::<usize>() as f64) / h.q() as f64
}

/// Negative mean of the squares of the `beta` best (smallest) ranks.
pub fn score_topk_squared(h: &RankSet, beta: usize) -> Result<f64> {
    if beta == 0 || beta > h.q() {
        return Err(Error::pre(format!("beta must be in 1..={}, got {beta}", h.q())));
    }
    let sum: f64 = h.ranks[..beta].iter().map(|&r| (r * r) as f64).sum();
    Ok(-sum / beta as f64)
}

/// Mean pairwise cosine between two embedding sets.
pub fn image_products(top: &[EmbeddingVector], generated: &[EmbeddingVector]) -> Result<f64> {
    if top.is_empty() || generated.is_empty() {
        return Err(Error::pre("image products need non-empty image sets"));
    }
    let total: f64 = top.iter().flat_map(|a| generated.iter().map(move |b| a.cosine(b))).sum();
    Ok(total / (top.len() * generated.len()) as f64)
}

/// Mean cosine similarity between the top activating images and the given
/// generated images under `embedder`.
pub fn score_image_products<E: Embedder + ?Sized>(
    top_images: &[ImagePayload],
    generated: &[ImagePayload],
    embedder: &E,
) -> Result<f64> {
    let a = top_images.iter().map(|i| embed_image(embedder, i)).collect::<Result<Vec<_>>>()?;
    let b = generated.iter().map(|i| embed_image(embedder, i)).collect::<Result<Vec<_>>>()?;
    image_products(&a, &b)
}

/// Positions of the `t` most activating images of one set (failed images
/// last, ties by position).
pub fn top_t_positions(summaries: &[Option<f64>], t: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..summaries.len()).collect();
    idx.sort_by(|&a, &b| match (summaries[a], summaries[b]) {
        (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(Ordering::Equal).then(a.cmp(&b)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    idx.truncate(t);
    idx
}

/// 1-based rank of each score among all, highest first; ties go to the
/// lower index.
pub fn rank_scores_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (r, &i) in idx.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringFunction {
    Mean,
    TopkSquared,
    ImageProducts,
    #[default]
    TopkSquaredImageProducts,
}

impl ScoringFunction {
    pub const ALL: [ScoringFunction; 4] = [
        ScoringFunction::Mean,
        ScoringFunction::TopkSquared,
        ScoringFunction::ImageProducts,
        ScoringFunction::TopkSquaredImageProducts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoringFunction::Mean => "mean",
            ScoringFunction::TopkSquared => "topk_squared",
            ScoringFunction::ImageProducts => "image_products",
            ScoringFunction::TopkSquaredImageProducts => "topk_squared_image_products",
        }
    }

    pub fn needs_embeddings(self) -> bool {
        matches!(self, ScoringFunction::ImageProducts | ScoringFunction::TopkSquaredImageProducts)
    }
}

impl fmt::Display for ScoringFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoringFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mean" | "m" => Ok(ScoringFunction::Mean),
            "topk_squared" | "tk" => Ok(ScoringFunction::TopkSquared),
            "image_products" | "ip" => Ok(ScoringFunction::ImageProducts),
            "topk_squared_image_products" | "topk_ip" | "tk_ip" => Ok(ScoringFunction::TopkSquaredImageProducts),
            other => Err(Error::Config(format!("unknown scoring function `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    pub topk_rank: usize,
    pub ip_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub concept_index: usize,
    pub function: ScoringFunction,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<ScoreComponents>,
}

/// `(N − rank of the top-k score) · image-products score` for every
/// candidate, where the best top-k score has rank 1.
pub fn score_combined(tk_scores: &[f64], ip_scores: &[f64]) -> Result<Vec<ScoreRecord>> {
    if tk_scores.len() != ip_scores.len() || tk_scores.is_empty() {
        return Err(Error::pre("score_combined needs one top-k and one image-products score per candidate"));
    }
    let n = tk_scores.len();
    Ok(rank_scores_desc(tk_scores)
        .into_iter()
        .zip(ip_scores)
        .enumerate()
        .map(|(j, (rank, &ip))| ScoreRecord {
            concept_index: j,
            function: ScoringFunction::TopkSquaredImageProducts,
            value: (n - rank) as f64 * ip,
            components: Some(ScoreComponents { topk_rank: rank, ip_value: ip }),
        })
        .collect())
}

/// Scores every candidate under `function`. `ip_scores` is required for
/// the embedding-based functions.
pub fn score_candidates(
    function: ScoringFunction,
    rank_sets: &[RankSet],
    ip_scores: Option<&[f64]>,
    beta: usize,
) -> Result<Vec<ScoreRecord>> {
    let record = |j: usize, value: f64| ScoreRecord { concept_index: j, function, value, components: None };
    let need_ip = || ip_scores.ok_or_else(|| Error::pre(format!("{function} needs image-products scores")));
    match function {
        ScoringFunction::Mean => Ok(rank_sets.iter().map(|h| record(h.concept_index, score_mean(h))).collect()),
        ScoringFunction::TopkSquared => rank_sets
            .iter()
            .map(|h| Ok(record(h.concept_index, score_topk_squared(h, beta)?)))
            .collect(),
        ScoringFunction::ImageProducts => {
            let ip = need_ip()?;
            if ip.len() != rank_sets.len() {
                return Err(Error::pre("one image-products score per candidate required"));
            }
            Ok(ip.iter().enumerate().map(|(j, &v)| record(j, v)).collect())
        }
        ScoringFunction::TopkSquaredImageProducts => {
            let tk = rank_sets.iter().map(|h| score_topk_squared(h, beta)).collect::<Result<Vec<_>>>()?;
            score_combined(&tk, need_ip()?)
        }
    }
}

/// Index of the highest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_fingerprint: String,
    pub backend_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronDescription {
    pub neuron: NeuronId,
    pub label: String,
    /// Remaining candidates, best first.
    pub runner_ups: Vec<String>,
    /// `None` when selection was skipped and the first candidate used.
    pub scoring: Option<ScoringFunction>,
    pub score_table: Vec<ScoreRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_labels: Option<Vec<String>>,
    /// Candidates whose image generation was refused; they were not scored.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refused: Vec<String>,
    pub provenance: Provenance,
}

impl NeuronDescription {
    /// The first candidate, unscored.
    pub fn first_candidate(candidates: &CandidateConceptSet, provenance: Provenance) -> Result<Self> {
        let label = candidates
            .concepts
            .first()
            .cloned()
            .ok_or_else(|| Error::Undescribable(candidates.neuron.to_string()))?;
        Ok(NeuronDescription {
            neuron: candidates.neuron.clone(),
            label,
            runner_ups: candidates.concepts[1..].to_vec(),
            scoring: None,
            score_table: Vec::new(),
            multi_labels: None,
            refused: Vec::new(),
            provenance,
        })
    }
}

/// Candidate indices ordered best first.
fn order_by_score(scores: &[ScoreRecord]) -> Vec<usize> {
    let mut s: Vec<&ScoreRecord> = scores.iter().collect();
    s.sort_by(|a, b| b.value.partial_cmp(&a.value).unwrap_or(Ordering::Equal).then(a.concept_index.cmp(&b.concept_index)));
    s.into_iter().map(|r| r.concept_index).collect()
}

/// Picks the highest-scoring candidate, keeping the whole score table.
pub fn select_best(
    candidates: &CandidateConceptSet,
    scores: &[ScoreRecord],
    provenance: Provenance,
) -> Result<NeuronDescription> {
    if scores.is_empty() {
        return Err(Error::pre("select_best needs at least one score"));
    }
    if let Some(bad) = scores.iter().find(|s| s.concept_index >= candidates.concepts.len()) {
        return Err(Error::pre(format!("score for unknown candidate {}", bad.concept_index)));
    }
    let order = order_by_score(scores);
    Ok(NeuronDescription {
        neuron: candidates.neuron.clone(),
        label: candidates.concepts[order[0]].clone(),
        runner_ups: order[1..].iter().map(|&j| candidates.concepts[j].clone()).collect(),
        scoring: Some(scores[0].function),
        score_table: scores.to_vec(),
        multi_labels: None,
        refused: Vec::new(),
        provenance,
    })
}

/// Labels in descending score order, dropping any whose text embedding is
/// more similar than `sim_limit` to a label already kept.
pub fn select_multi_labels<E: Embedder + ?Sized>(
    labels: &[String],
    scores: &[ScoreRecord],
    embedder: &E,
    sim_limit: f64,
) -> Result<Vec<String>> {
    if !(sim_limit > 0.0 && sim_limit <= 1.0) {
        return Err(Error::pre(format!("sim_limit must be in (0, 1], got {sim_limit}")));
    }
    let mut kept: Vec<(String, EmbeddingVector)> = Vec::new();
    for j in order_by_score(scores) {
        let label = labels.get(j).ok_or_else(|| Error::pre(format!("score for unknown candidate {j}")))?;
        let e = embed_text(embedder, label)?;
        if kept.iter().all(|(_, k)| k.cosine(&e) <= sim_limit) {
            kept.push((label.clone(), e));
        }
    }
    Ok(kept.into_iter().map(|(l, _)| l).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    /// Images generated per candidate.
    pub q: usize,
    pub beta: usize,
    pub t: usize,
    pub scoring: ScoringFunction,
    pub seed: u64,
    pub summary: SummaryMethod,
    /// Also emit a de-duplicated multi-label list at this similarity limit.
    pub multi_label_limit: Option<f64>,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            q: 10,
            beta: 5,
            t: 10,
            scoring: ScoringFunction::default(),
            seed: 0,
            summary: SummaryMethod::default(),
            multi_label_limit: None,
        }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::Config("q must be positive".into()));
        }
        if self.beta == 0 || self.beta > self.q {
            return Err(Error::Config(format!("beta must be in 1..={}", self.q)));
        }
        if self.t == 0 || self.t > self.q {
            return Err(Error::Config(format!("t must be in 1..={}", self.q)));
        }
        if let Some(l) = self.multi_label_limit {
            if !(l > 0.0 && l <= 1.0) {
                return Err(Error::Config("multi_label_limit must be in (0, 1]".into()));
            }
        }
        Ok(())
    }

    fn seed_for(&self, j: usize) -> u64 {
        self.seed.wrapping_add((j * self.q) as u64)
    }
}

/// Generated images and their activations for one neuron.
#[derive(Debug, Clone)]
pub struct SelectionEvidence {
    /// Original candidate index for each entry below.
    pub indices: Vec<usize>,
    pub sets: Vec<GeneratedImageSet>,
    pub summaries: Vec<Vec<Option<f64>>>,
    pub rank_sets: Vec<RankSet>,
    pub refused: Vec<usize>,
}

/// Generates `q` images per candidate (in parallel) and ranks them.
/// Candidates the generator refuses are left out.
pub fn gather_evidence<M, G>(
    neuron: &NeuronId,
    concepts: &[String],
    model: &M,
    generator: &G,
    params: &SelectionParams,
    exec: Exec,
) -> Result<SelectionEvidence>
where
    M: TargetModel + ?Sized,
    G: ImageGenerator + ?Sized,
{
    let generated = exec.map_range(concepts.len(), |j| generate_images(generator, &concepts[j], params.q, params.seed_for(j)));
    let (mut indices, mut sets, mut refused) = (Vec::new(), Vec::new(), Vec::new());
    for (j, g) in generated.into_iter().enumerate() {
        match g {
            Ok(set) => {
                indices.push(j);
                sets.push(set);
            }
            Err(Error::ContentRefused(why)) => {
                log::warn!("{neuron}: candidate `{}` refused by the generator ({why}); not scored", concepts[j]);
                refused.push(j);
            }
            Err(e) => return Err(e),
        }
    }
    if sets.is_empty() {
        return Err(Error::ContentRefused(format!("{neuron}: every candidate was refused")));
    }
    let (rank_sets, summaries) = rank_generated_images(model, neuron, &sets, params.summary, exec)?;
    Ok(SelectionEvidence { indices, sets, summaries, rank_sets, refused })
}

/// Full selection step for one neuron: images, ranks, scores, best label.
///
/// `top_images` are the neuron's top activating probe images; they are only
/// embedded when the scoring function needs them.
#[allow(clippy::too_many_arguments)]
pub fn select_concept<M, G, E>(
    candidates: &CandidateConceptSet,
    top_images: &[ImagePayload],
    model: &M,
    generator: &G,
    embedder: &E,
    params: &SelectionParams,
    provenance: Provenance,
    exec: Exec,
) -> Result<NeuronDescription>
where
    M: TargetModel + ?Sized,
    G: ImageGenerator + ?Sized,
    E: Embedder + ?Sized,
{
    params.validate()?;
    let neuron = &candidates.neuron;
    let ev = gather_evidence(neuron, &candidates.concepts, model, generator, params, exec)?;

    let ip = if params.scoring.needs_embeddings() {
        let top = exec.map(top_images, |i| embed_image(embedder, i)).into_iter().collect::<Result<Vec<_>>>()?;
        let per_set = exec.map_range(ev.sets.len(), |k| {
            let picked: Vec<&ImagePayload> =
                top_t_positions(&ev.summaries[k], params.t).into_iter().map(|p| &ev.sets[k].images[p]).collect();
            let emb = picked.into_iter().map(|i| embed_image(embedder, i)).collect::<Result<Vec<_>>>()?;
            image_products(&top, &emb)
        });
        Some(per_set.into_iter().collect::<Result<Vec<_>>>()?)
    } else {
        None
    };

    let mut scores = score_candidates(params.scoring, &ev.rank_sets, ip.as_deref(), params.beta)?;
    for s in &mut scores {
        s.concept_index = ev.indices[s.concept_index];
    }
    let mut desc = select_best(candidates, &scores, provenance)?;
    desc.refused = ev.refused.iter().map(|&j| candidates.concepts[j].clone()).collect();
    desc.runner_ups.extend(desc.refused.iter().cloned());
    if let Some(limit) = params.multi_label_limit {
        desc.multi_labels = Some(select_multi_labels(&candidates.concepts, &scores, embedder, limit)?);
    }
    Ok(desc)
}

/// Runs selection over candidate labels produced elsewhere (for example by
/// another description method).
#[allow(clippy::too_many_arguments)]
pub fn score_external_candidates<M, G, E>(
    neuron: &NeuronId,
    labels: Vec<String>,
    top_images: &[ImagePayload],
    model: &M,
    generator: &G,
    embedder: &E,
    params: &SelectionParams,
    provenance: Provenance,
    exec: Exec,
) -> Result<NeuronDescription>
where
    M: TargetModel + ?Sized,
    G: ImageGenerator + ?Sized,
    E: Embedder + ?Sized,
{
    if labels.is_empty() || labels.iter().any(|l| l.trim().is_empty()) {
        return Err(Error::pre("external candidates must be non-empty labels"));
    }
    let set = CandidateConceptSet {
        neuron: neuron.clone(),
        concepts: labels,
        captions: Vec::new(),
        skipped: Vec::new(),
        config_fingerprint: provenance.config_fingerprint.clone(),
    };
    select_concept(&set, top_images, model, generator, embedder, params, provenance, exec)
}

/// On-disk form of `<run_dir>/descriptions/<layer>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionFile {
    pub schema_version: String,
    pub layer: String,
    pub descriptions: Vec<NeuronDescription>,
}

impl DescriptionFile {
    pub fn new(layer: impl Into<String>, mut descriptions: Vec<NeuronDescription>) -> Self {
        descriptions.sort_by_key(|d| d.neuron.index);
        DescriptionFile { schema_version: DESCRIPTIONS_SCHEMA_VERSION.into(), layer: layer.into(), descriptions }
    }

    pub fn path(run_dir: &Path, layer: &str) -> PathBuf {
        run_dir.join(DESCRIPTIONS_DIR).join(format!("{layer}.json"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file: DescriptionFile = serde_json::from_slice(&fs::read(path)?)?;
        let major = file.schema_version.split('.').next().unwrap_or("");
        if major != DESCRIPTIONS_SCHEMA_VERSION.split('.').next().unwrap() {
            return Err(Error::Config(format!("unsupported descriptions schema {}", file.schema_version)));
        }
        Ok(file)
    }
}
