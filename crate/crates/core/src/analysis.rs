//! Post-hoc analyses over neuron descriptions: concept similarity and
//! clustering, superclass labels, term frequencies, pruning masks,
//! description-matched classifiers with AUROC, and diversity correlation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::activation::{NeuronId, TargetModel};
use crate::backends::{embed_text, CompletionRequest, Embedder, EmbeddingVector, Summarizer};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::prompts::{PromptTemplate, TemplateName};
use crate::text::contains_term;

pub const DEFAULT_PHI: f64 = 0.8;
pub const UNCLASSIFIED: &str = "unclassified";

/// Land-cover superclasses used for satellite-imagery clusters.
pub const LAND_COVER_SUPERCLASSES: [&str; 6] = [
    "Planted/Cultivated",
    "Herbaceous/Shrubland",
    "Urban/Suburban",
    "Barren",
    "Forest",
    "Water/wetlands",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSimilarityMatrix {
    pub neurons: Vec<NeuronId>,
    /// First concept of each neuron, used to name clusters.
    pub labels: Vec<String>,
    pub entries: Vec<Vec<f64>>,
}

impl ConceptSimilarityMatrix {
    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }
}

fn mean_embedding(vs: &[EmbeddingVector]) -> Vec<f64> {
    let dim = vs[0].values.len();
    let mut acc = vec![0.0f64; dim];
    for v in vs {
        let norm = v.values.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        for (a, &x) in acc.iter_mut().zip(&v.values) {
            *a += x as f64 / norm;
        }
    }
    acc.iter_mut().for_each(|a| *a /= vs.len() as f64);
    acc
}

/// Pairwise similarity of the neurons' concept sets: the mean of all
/// label-by-label cosines, normalized by each set's self-similarity so that
/// identical sets score exactly 1.
pub fn concept_similarity<E: Embedder + ?Sized>(
    concepts: &[(NeuronId, Vec<String>)],
    embedder: &E,
    exec: Exec,
) -> Result<ConceptSimilarityMatrix> {
    let Some((_, first)) = concepts.first() else {
        return Err(Error::pre("no neurons to compare"));
    };
    if first.is_empty() || concepts.iter().any(|(_, c)| c.len() != first.len()) {
        return Err(Error::pre("all concept sets must have the same non-zero size"));
    }
    let means = exec
        .map(concepts, |(_, labels)| {
            let embs = labels.iter().map(|l| embed_text(embedder, l)).collect::<Result<Vec<_>>>()?;
            Ok(mean_embedding(&embs))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = means.len();
    let rows = exec.map_range(n, |i| {
        (0..n)
            .map(|j| {
                if i == j {
                    return 1.0;
                }
                let (a, b) = (&means[i], &means[j]);
                let denom = (dot(a, a) * dot(b, b)).sqrt();
                if denom == 0.0 {
                    0.0
                } else {
                    (dot(a, b) / denom).clamp(-1.0, 1.0)
                }
            })
            .collect::<Vec<f64>>()
    });
    Ok(ConceptSimilarityMatrix {
        neurons: concepts.iter().map(|(n, _)| n.clone()).collect(),
        labels: concepts.iter().map(|(_, c)| c[0].clone()).collect(),
        entries: rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    /// Join the first cluster whose seed is similar enough.
    #[default]
    Greedy,
    /// Join the first cluster whose every member is similar enough.
    CompleteLinkage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptCluster {
    pub members: Vec<NeuronId>,
    pub representative_label: String,
    pub superclass: Option<String>,
}

/// Groups neurons in index order; each neuron ends up in exactly one cluster.
pub fn cluster_neurons(matrix: &ConceptSimilarityMatrix, phi: f64, mode: ClusterMode) -> Result<Vec<ConceptCluster>> {
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(Error::pre(format!("phi must be in (0, 1], got {phi}")));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..matrix.len() {
        let fits = |g: &Vec<usize>| match mode {
            ClusterMode::Greedy => matrix.get(i, g[0]) >= phi,
            ClusterMode::CompleteLinkage => g.iter().all(|&m| matrix.get(i, m) >= phi),
        };
        match groups.iter_mut().find(|g| fits(g)) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    Ok(groups
        .into_iter()
        .map(|g| ConceptCluster {
            representative_label: matrix.labels[g[0]].clone(),
            members: g.into_iter().map(|i| matrix.neurons[i].clone()).collect(),
            superclass: None,
        })
        .collect())
}

/// Picks the last parenthesized group of `output` and matches it against
/// `classes` case-insensitively.
pub fn parse_superclass(output: &str, classes: &[&str]) -> Option<String> {
    let open = output.rfind('(')?;
    let close = open + output[open..].find(')')?;
    let inner = output[open + 1..close].trim().trim_matches(|c| c == '"' || c == '\'');
    classes.iter().find(|c| c.eq_ignore_ascii_case(inner)).map(|c| c.to_string())
}

/// Asks the summarizer for the superclass of `label`; one retry, then
/// [`UNCLASSIFIED`].
pub fn classify_superclass<S: Summarizer + ?Sized>(label: &str, summarizer: &S, classes: &[&str]) -> Result<String> {
    if label.trim().is_empty() {
        return Err(Error::pre("cannot classify an empty label"));
    }
    let template = PromptTemplate::get(TemplateName::Superclass);
    let req = CompletionRequest::new(&template, vec![label.trim().to_string()], 1, 0.0);
    for attempt in 0..2 {
        let out = summarizer.complete(&req)?;
        if let Some(c) = out.first().and_then(|o| parse_superclass(o, classes)) {
            return Ok(c);
        }
        log::debug!("superclass attempt {} for `{label}` gave no class: {out:?}", attempt + 1);
    }
    Ok(UNCLASSIFIED.to_string())
}

/// Classifies every cluster's representative label.
pub fn assign_superclasses<S: Summarizer + ?Sized>(
    clusters: &mut [ConceptCluster],
    summarizer: &S,
    classes: &[&str],
    exec: Exec,
) -> Result<()> {
    let labels: Vec<String> = clusters.iter().map(|c| c.representative_label.clone()).collect();
    let found = exec.map(&labels, |l| classify_superclass(l, summarizer, classes));
    for (c, s) in clusters.iter_mut().zip(found) {
        c.superclass = Some(s?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub phi: f64,
    pub mode: ClusterMode,
    pub clusters: Vec<ConceptCluster>,
    pub sizes: Vec<usize>,
    /// Number of neurons per superclass.
    pub superclass_counts: BTreeMap<String, usize>,
}

impl ClusterReport {
    pub fn new(phi: f64, mode: ClusterMode, clusters: Vec<ConceptCluster>) -> Self {
        let sizes = clusters.iter().map(|c| c.members.len()).collect();
        let mut superclass_counts = BTreeMap::new();
        for c in &clusters {
            if let Some(s) = &c.superclass {
                *superclass_counts.entry(s.clone()).or_default() += c.members.len();
            }
        }
        ClusterReport { phi, mode, clusters, sizes, superclass_counts }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Fraction of labels containing each term as whole words.
pub fn term_frequency(labels: &[String], terms: &[String]) -> Result<BTreeMap<String, f64>> {
    if labels.is_empty() {
        return Err(Error::pre("term_frequency needs at least one description"));
    }
    Ok(terms
        .iter()
        .map(|t| {
            let hits = labels.iter().filter(|l| contains_term(l, t)).count();
            (t.clone(), hits as f64 / labels.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer: String,
    pub indices: BTreeSet<usize>,
    pub channels: usize,
}

impl PruneMask {
    pub fn new(layer: impl Into<String>, indices: impl IntoIterator<Item = usize>, channels: usize) -> Result<Self> {
        let indices: BTreeSet<usize> = indices.into_iter().collect();
        if let Some(&bad) = indices.iter().find(|&&i| i >= channels) {
            return Err(Error::UnknownNeuron(format!("channel {bad} of a {channels}-channel layer")));
        }
        Ok(PruneMask { layer: layer.into(), indices, channels })
    }

    pub fn fraction(&self) -> f64 {
        if self.channels == 0 {
            0.0
        } else {
            self.indices.len() as f64 / self.channels as f64
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: PruneMask = serde_json::from_slice(&fs::read(path)?)?;
        PruneMask::new(m.layer, m.indices, m.channels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneSelection {
    /// Neurons whose cluster has fewer than `min` members.
    ByClusterSize { min: usize },
    /// Neurons whose label contains any of the terms.
    ByConceptTerms(Vec<String>),
    Explicit(Vec<usize>),
}

/// Builds a mask for `layer` from the neurons' labels (and clusters, for
/// [`PruneSelection::ByClusterSize`]).
pub fn build_prune_mask(
    layer: &str,
    channels: usize,
    selection: &PruneSelection,
    labels: &[(NeuronId, String)],
    clusters: &[ConceptCluster],
) -> Result<PruneMask> {
    let in_layer = |n: &NeuronId| n.layer == layer;
    let indices: Vec<usize> = match selection {
        PruneSelection::Explicit(ix) => ix.clone(),
        PruneSelection::ByConceptTerms(terms) => {
            let picked: Vec<usize> = labels
                .iter()
                .filter(|(n, l)| in_layer(n) && terms.iter().any(|t| contains_term(l, t)))
                .map(|(n, _)| n.index)
                .collect();
            if picked.is_empty() {
                log::warn!("no `{layer}` label contains any of {terms:?}; mask is empty");
            }
            picked
        }
        PruneSelection::ByClusterSize { min } => {
            if clusters.is_empty() {
                return Err(Error::pre("cluster-size selection needs clusters"));
            }
            clusters
                .iter()
                .filter(|c| c.members.len() < *min)
                .flat_map(|c| c.members.iter().filter(|n| in_layer(n)).map(|n| n.index))
                .collect()
        }
    };
    PruneMask::new(layer, indices, channels)
}

/// A target model with some channels of one layer forced to zero.
pub struct MaskedModel<M> {
    inner: M,
    mask: PruneMask,
    channels: Vec<usize>,
}

impl<M: TargetModel> MaskedModel<M> {
    pub fn new(inner: M, mask: PruneMask) -> Result<Self> {
        let c = inner.channels(&mask.layer)?;
        if c != mask.channels {
            return Err(Error::Config(format!("mask is for {} channels, layer has {c}", mask.channels)));
        }
        let channels = mask.indices.iter().copied().collect();
        Ok(MaskedModel { inner, mask, channels })
    }

    pub fn mask(&self) -> &PruneMask {
        &self.mask
    }
}

impl<M: TargetModel> TargetModel for MaskedModel<M> {
    fn fingerprint(&self) -> String {
        format!("{}+mask({}:{:?})", self.inner.fingerprint(), self.mask.layer, self.channels)
    }

    fn layers(&self) -> Vec<String> {
        self.inner.layers()
    }

    fn channels(&self, layer: &str) -> Result<usize> {
        self.inner.channels(layer)
    }

    fn forward(&self, image: &RgbImage, layer: &str) -> Result<Array3<f32>> {
        self.inner.forward_masked(image, layer, &self.mask.layer, &self.channels)
    }
}

/// Neurons whose description embedding is most similar to `class_name`;
/// every tied neuron is returned.
pub fn match_description_classifier<E: Embedder + ?Sized>(
    descriptions: &[(NeuronId, String)],
    class_name: &str,
    embedder: &E,
) -> Result<Vec<NeuronId>> {
    if descriptions.is_empty() {
        return Err(Error::pre("no descriptions to match"));
    }
    let target = embed_text(embedder, class_name)?;
    let sims = descriptions
        .iter()
        .map(|(_, d)| Ok(embed_text(embedder, d)?.cosine(&target)))
        .collect::<Result<Vec<f64>>>()?;
    let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(descriptions
        .iter()
        .zip(&sims)
        .filter(|(_, &s)| s == best)
        .map(|((n, _), _)| n.clone())
        .collect())
}

/// Area under the ROC curve: the chance a random positive scores above a
/// random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::pre("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::pre("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuroc(format!("{pos} positives and {neg} negatives")));
    }
    // Rank-sum with midranks for ties.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Pearson correlation between the two coordinates.
pub fn diversity_correlation(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two pairs".into()));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a coordinate is constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
