//! Scoring descriptions against reference labels with pluggable text
//! similarity metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::NeuronId;
use crate::backends::{embed_text, Embedder, PairScorer};
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Cosine under the primary (image-text) embedder.
    EmbedCosA,
    /// Cosine under the sentence embedder.
    EmbedCosB,
    PairF1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::EmbedCosA, Metric::EmbedCosB, Metric::PairF1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::EmbedCosA => "embed_cos_a",
            Metric::EmbedCosB => "embed_cos_b",
            Metric::PairF1 => "pair_f1",
        }
    }

    /// Parses a comma-separated list such as `embed_cos_a,pair_f1`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out: Vec<Metric> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no metrics given".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "embed_cos_a" | "clip" => Ok(Metric::EmbedCosA),
            "embed_cos_b" | "mpnet" => Ok(Metric::EmbedCosB),
            "pair_f1" | "bertscore" => Ok(Metric::PairF1),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// The backends behind the three metrics.
#[derive(Clone, Copy)]
pub struct MetricBackends<'a> {
    pub embed_a: &'a dyn Embedder,
    pub embed_b: &'a dyn Embedder,
    pub pair: &'a dyn PairScorer,
}

impl MetricBackends<'_> {
    pub fn backend_id(&self, metric: Metric) -> String {
        match metric {
            Metric::EmbedCosA => self.embed_a.backend_id(),
            Metric::EmbedCosB => self.embed_b.backend_id(),
            Metric::PairF1 => self.pair.backend_id(),
        }
    }
}

pub fn text_similarity(a: &str, b: &str, metric: Metric, backends: &MetricBackends<'_>) -> Result<f64> {
    if a.trim().is_empty() || b.trim().is_empty() {
        return Err(Error::pre("text_similarity needs two non-empty strings"));
    }
    match metric {
        Metric::EmbedCosA => Ok(embed_text(backends.embed_a, a)?.cosine(&embed_text(backends.embed_a, b)?)),
        Metric::EmbedCosB => Ok(embed_text(backends.embed_b, a)?.cosine(&embed_text(backends.embed_b, b)?)),
        Metric::PairF1 => backends.pair.f1(a, b),
    }
}

/// Reference labels per neuron.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceSet(pub BTreeMap<NeuronId, Vec<String>>);

#[derive(Deserialize)]
#[serde(untagged)]
enum ReferenceEntry {
    One(String),
    Many(Vec<String>),
}

impl ReferenceSet {
    pub fn get(&self, neuron: &NeuronId) -> Option<&[String]> {
        self.0.get(neuron).map(Vec::as_slice)
    }

    /// Reads `{"layer#index": "label" | ["label", ...], ...}`.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let raw: BTreeMap<String, ReferenceEntry> = serde_json::from_slice(bytes)?;
        let mut out = BTreeMap::new();
        for (key, entry) in raw {
            let refs = match entry {
                ReferenceEntry::One(s) => vec![s],
                ReferenceEntry::Many(v) => v,
            };
            let refs: Vec<String> = refs.into_iter().filter(|r| !r.trim().is_empty()).collect();
            if refs.is_empty() {
                return Err(Error::Config(format!("no references for {key}")));
            }
            out.insert(key.parse()?, refs);
        }
        Ok(ReferenceSet(out))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScores {
    pub neuron: NeuronId,
    pub description: String,
    pub scores: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub metrics: Vec<Metric>,
    pub backend_ids: BTreeMap<Metric, String>,
    /// How several references for one neuron are combined.
    pub reference_aggregation: String,
    pub per_neuron: Vec<NeuronScores>,
    pub means: BTreeMap<Metric, f64>,
    /// Described neurons with no references; excluded from the means.
    pub missing: Vec<NeuronId>,
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("neuron,description");
        for m in &self.metrics {
            out.push(',');
            out.push_str(m.name());
        }
        out.push('\n');
        for row in &self.per_neuron {
            out.push_str(&csv_field(&row.neuron.to_string()));
            out.push(',');
            out.push_str(&csv_field(&row.description));
            for m in &self.metrics {
                out.push_str(&format!(",{:.6}", row.scores[m]));
            }
            out.push('\n');
        }
        if !self.per_neuron.is_empty() {
            out.push_str("mean,");
            for m in &self.metrics {
                out.push_str(&format!(",{:.6}", self.means[m]));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(self)?)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Scores each `(neuron, description)` against that neuron's references;
/// a neuron's score is the mean over its references.
pub fn evaluate_against_references(
    descriptions: &[(NeuronId, String)],
    refs: &ReferenceSet,
    metrics: &[Metric],
    backends: &MetricBackends<'_>,
    exec: Exec,
) -> Result<SimilarityReport> {
    if metrics.is_empty() {
        return Err(Error::pre("at least one metric is required"));
    }
    let (present, missing): (Vec<_>, Vec<_>) = descriptions.iter().partition(|(n, _)| refs.get(n).is_some());
    let missing: Vec<NeuronId> = missing.into_iter().map(|(n, _)| n.clone()).collect();
    for n in &missing {
        log::warn!("no references for {n}; left out of the means");
    }

    let rows = exec.map(&present, |(neuron, desc)| -> Result<NeuronScores> {
        let references = refs.get(neuron).unwrap();
        let mut scores = BTreeMap::new();
        for &m in metrics {
            let mut total = 0.0;
            for r in references {
                total += text_similarity(desc, r, m, backends)?;
            }
            scores.insert(m, total / references.len() as f64);
        }
        Ok(NeuronScores { neuron: neuron.clone(), description: desc.clone(), scores })
    });
    let per_neuron = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let mut means = BTreeMap::new();
    if !per_neuron.is_empty() {
        for &m in metrics {
            means.insert(m, per_neuron.iter().map(|r| r.scores[&m]).sum::<f64>() / per_neuron.len() as f64);
        }
    }
    Ok(SimilarityReport {
        metrics: metrics.to_vec(),
        backend_ids: metrics.iter().map(|&m| (m, backends.backend_id(m))).collect(),
        reference_aggregation: "mean".into(),
        per_neuron,
        means,
        missing,
    })
}
