//! Analyses over a finished run directory, as used by the `dnd` subcommands.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::activation::NeuronId;
use crate::analysis::{
    assign_superclasses, build_prune_mask, cluster_neurons, concept_similarity, term_frequency, ClusterMode,
    ClusterReport, PruneMask, PruneSelection,
};
use crate::concepts::CandidateConceptSet;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{candidates_path, description_pairs, require_complete};
use crate::report::CLUSTERS_FILE;
use crate::selection::DescriptionFile;

/// Configuration and description files of a completed run.
pub fn load_run(run_dir: &Path) -> Result<(RunConfig, Vec<DescriptionFile>)> {
    let (cfg, _) = require_complete(run_dir)?;
    let files = cfg
        .layers
        .iter()
        .map(|l| DescriptionFile::read(&DescriptionFile::path(run_dir, l)))
        .collect::<Result<Vec<_>>>()?;
    Ok((cfg, files))
}

/// The selected label followed by the remaining candidates, `size` in total.
fn concept_set(label: &str, candidates: &[String], size: usize) -> Vec<String> {
    let mut set = vec![label.to_string()];
    set.extend(candidates.iter().filter(|c| !c.eq_ignore_ascii_case(label)).cloned());
    set.truncate(size);
    set
}

/// Concept sets per neuron: the final label first, then the other candidates.
pub fn run_concept_sets(run_dir: &Path, cfg: &RunConfig, files: &[DescriptionFile]) -> Result<Vec<(NeuronId, Vec<String>)>> {
    let mut out = Vec::new();
    for d in files.iter().flat_map(|f| &f.descriptions) {
        let cand: CandidateConceptSet = serde_json::from_slice(&fs::read(candidates_path(run_dir, &d.neuron))?)?;
        let set = concept_set(&d.label, &cand.concepts, cfg.n);
        if set.len() < cfg.n {
            return Err(Error::pre(format!("{} has only {} candidate concepts", d.neuron, set.len())));
        }
        out.push((d.neuron.clone(), set));
    }
    Ok(out)
}

/// Clusters the run's neurons by concept similarity and writes the report
/// to `<run>/analysis/clusters.json`. With `superclasses`, each cluster's
/// representative label is classified by the summarizer.
pub fn cluster_run(run_dir: &Path, phi: f64, mode: ClusterMode, superclasses: Option<&[String]>) -> Result<ClusterReport> {
    let (cfg, files) = load_run(run_dir)?;
    let sets = run_concept_sets(run_dir, &cfg, &files)?;
    let mut clusters = if sets.is_empty() {
        Vec::new()
    } else {
        let backends = cfg.backends.build(&cfg.world()?, None)?;
        let matrix = concept_similarity(&sets, backends.embedder.as_ref(), cfg.exec())?;
        let mut clusters = cluster_neurons(&matrix, phi, mode)?;
        if let Some(classes) = superclasses {
            let classes: Vec<&str> = classes.iter().map(String::as_str).collect();
            assign_superclasses(&mut clusters, backends.summarizer.as_ref(), &classes, cfg.exec())?;
        }
        clusters
    };
    clusters.sort_by(|a, b| b.members.len().cmp(&a.members.len()));
    let report = ClusterReport::new(phi, mode, clusters);
    report.write(&run_dir.join(CLUSTERS_FILE))?;
    Ok(report)
}

/// Builds a pruning mask for `layer` from the run's labels (and its
/// cluster report, for cluster-size selections).
pub fn prune_mask_for_run(run_dir: &Path, layer: &str, selection: &PruneSelection) -> Result<PruneMask> {
    let (cfg, files) = load_run(run_dir)?;
    let channels = cfg.model.build(&cfg.world()?)?.channels(layer)?;
    let clusters = match selection {
        PruneSelection::ByClusterSize { .. } => {
            let path = run_dir.join(CLUSTERS_FILE);
            if !path.exists() {
                return Err(Error::pre("cluster-size selection needs `dnd cluster` to have run first"));
            }
            let report: ClusterReport = serde_json::from_slice(&fs::read(path)?)?;
            report.clusters
        }
        _ => Vec::new(),
    };
    build_prune_mask(layer, channels, selection, &description_pairs(&files), &clusters)
}

/// Term frequencies over the final labels of a run.
pub fn run_term_frequency(run_dir: &Path, terms: &[String]) -> Result<std::collections::BTreeMap<String, f64>> {
    let (_, files) = load_run(run_dir)?;
    let labels: Vec<String> = description_pairs(&files).into_iter().map(|(_, l)| l).collect();
    term_frequency(&labels, terms)
}

/// Scores and binary labels for an AUROC computation.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredLabels {
    /// Reads `{"scores": [..], "labels": [..]}`; labels may be booleans or 0/1.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Flag {
            Bool(bool),
            Num(u8),
        }
        #[derive(Deserialize)]
        struct Raw {
            scores: Vec<f64>,
            labels: Vec<Flag>,
        }
        let raw: Raw = serde_json::from_slice(bytes)?;
        let labels = raw
            .labels
            .into_iter()
            .map(|f| match f {
                Flag::Bool(b) => Ok(b),
                Flag::Num(0) => Ok(false),
                Flag::Num(1) => Ok(true),
                Flag::Num(n) => Err(Error::pre(format!("label {n} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoredLabels { scores: raw.scores, labels })
    }
}
