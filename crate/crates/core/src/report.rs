//! Reports over a finished run: JSON, CSV, and a static HTML page with the
//! top activating images and label of every neuron.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::activation::NeuronId;
use crate::analysis::ClusterReport;
use crate::concepts::CandidateConceptSet;
use crate::dataset::ProbeDataset;
use crate::error::{Error, Result};
use crate::evaluation::csv_field;
use crate::pipeline::{candidates_path, require_complete, AUGMENT_DIR};
use crate::selection::{DescriptionFile, ScoringFunction};

pub const REPORT_DIR: &str = "report";
pub const REPORT_SCHEMA_VERSION: &str = "1.0.0";
/// Where `dnd cluster` leaves its report inside a run directory.
pub const CLUSTERS_FILE: &str = "analysis/clusters.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Html,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "html" | "html-figures" => Ok(ReportFormat::Html),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronEntry {
    pub neuron: NeuronId,
    pub label: String,
    pub runner_ups: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_labels: Option<Vec<String>>,
    pub scoring: Option<ScoringFunction>,
    /// Captioned top activating images, most activating first.
    pub top_images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportData {
    pub schema_version: String,
    pub config_fingerprint: String,
    pub neurons: Vec<NeuronEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clusters: Option<ClusterReport>,
}

/// Collects the report contents of a completed run.
pub fn collect_report(run_dir: &Path) -> Result<ReportData> {
    let (cfg, manifest) = require_complete(run_dir)?;
    let mut neurons = Vec::new();
    for layer in &cfg.layers {
        let file = DescriptionFile::read(&DescriptionFile::path(run_dir, layer))?;
        for d in file.descriptions {
            let top_images = match fs::read(candidates_path(run_dir, &d.neuron)) {
                Ok(bytes) => serde_json::from_slice::<CandidateConceptSet>(&bytes)?
                    .captions
                    .into_iter()
                    .map(|c| c.image_id)
                    .collect(),
                Err(_) => Vec::new(),
            };
            neurons.push(NeuronEntry {
                neuron: d.neuron,
                label: d.label,
                runner_ups: d.runner_ups,
                multi_labels: d.multi_labels,
                scoring: d.scoring,
                top_images,
            });
        }
    }
    let cpath = run_dir.join(CLUSTERS_FILE);
    let clusters = if cpath.exists() { Some(serde_json::from_slice(&fs::read(cpath)?)?) } else { None };
    Ok(ReportData {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        config_fingerprint: manifest.config_fingerprint,
        neurons,
        clusters,
    })
}

pub fn render_csv(data: &ReportData) -> String {
    let mut out = String::from("neuron,label,runner_ups,top_images\n");
    for n in &data.neurons {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            csv_field(&n.neuron.to_string()),
            csv_field(&n.label),
            csv_field(&n.runner_ups.join("; ")),
            csv_field(&n.top_images.join(" "))
        );
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static page: one strip of top images per neuron and, when clusters are
/// present, a bar per cluster.
pub fn render_html(data: &ReportData, images: &HashMap<String, Vec<u8>>) -> String {
    let mut h = String::new();
    h.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Neuron descriptions</title>\n");
    h.push_str("<style>body{font-family:sans-serif}.strip img{height:64px;margin:1px}.bar{background:#4a7;height:14px}</style>\n");
    h.push_str("</head><body>\n<h1>Neuron descriptions</h1>\n");
    for n in &data.neurons {
        let _ = writeln!(h, "<section><h2>{} &mdash; {}</h2>", escape(&n.neuron.to_string()), escape(&n.label));
        if !n.runner_ups.is_empty() {
            let _ = writeln!(h, "<p>Other candidates: {}</p>", escape(&n.runner_ups.join(", ")));
        }
        h.push_str("<div class=\"strip\">");
        for id in &n.top_images {
            match images.get(id) {
                Some(bytes) => {
                    let mime = if bytes.starts_with(&[0xff, 0xd8]) { "image/jpeg" } else { "image/png" };
                    let _ = write!(h, "<img alt=\"{}\" src=\"data:{mime};base64,{}\">", escape(id), B64.encode(bytes));
                }
                None => {
                    let _ = write!(h, "<span>{}</span>", escape(id));
                }
            }
        }
        h.push_str("</div></section>\n");
    }
    if let Some(c) = &data.clusters {
        let max = c.sizes.iter().copied().max().unwrap_or(1).max(1);
        h.push_str("<h2>Concept clusters</h2>\n<table>\n");
        for cl in &c.clusters {
            let width = 300 * cl.members.len() / max;
            let _ = writeln!(
                h,
                "<tr><td>{}</td><td>{}</td><td><div class=\"bar\" style=\"width:{width}px\"></div></td><td>{}</td></tr>",
                escape(&cl.representative_label),
                escape(cl.superclass.as_deref().unwrap_or("")),
                cl.members.len()
            );
        }
        h.push_str("</table>\n");
    }
    h.push_str("</body></html>\n");
    h
}

fn report_images(run_dir: &Path, data: &ReportData) -> Result<HashMap<String, Vec<u8>>> {
    let (cfg, _) = require_complete(run_dir)?;
    let wanted: std::collections::HashSet<&str> =
        data.neurons.iter().flat_map(|n| n.top_images.iter().map(String::as_str)).collect();
    let mut out = HashMap::new();
    let mut absorb = |ds: ProbeDataset| {
        for img in ds.images() {
            if wanted.contains(img.id.as_str()) {
                out.insert(img.id.clone(), img.payload.bytes().to_vec());
            }
        }
    };
    absorb(cfg.load_datasets()?);
    for layer in &cfg.layers {
        let crops = run_dir.join(AUGMENT_DIR).join(layer).join("crops");
        if crops.exists() {
            absorb(ProbeDataset::load_dir(&crops)?);
        }
    }
    Ok(out)
}

/// Writes the report in `format` under `<run_dir>/report/` and returns the
/// files written. Output bytes depend only on the run's data.
pub fn emit_report(run_dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    let data = collect_report(run_dir)?;
    let dir = run_dir.join(REPORT_DIR);
    fs::create_dir_all(&dir)?;
    let (path, bytes) = match format {
        ReportFormat::Json => (dir.join("report.json"), serde_json::to_vec_pretty(&data)?),
        ReportFormat::Csv => (dir.join("report.csv"), render_csv(&data).into_bytes()),
        ReportFormat::Html => {
            let images = report_images(run_dir, &data)?;
            (dir.join("index.html"), render_html(&data, &images).into_bytes())
        }
    };
    fs::write(&path, bytes)?;
    Ok(vec![path])
}
