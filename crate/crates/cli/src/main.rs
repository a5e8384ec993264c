//! `dnd`: describe the hidden neurons of a vision network.
//!
//! Settings come from the JSON config given with `--config`; flags given on
//! the command line override the matching config fields. API keys are only
//! ever read from the environment variables named in the backend configs.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dnd_core::analysis::{auroc, ClusterMode, PruneSelection, DEFAULT_PHI, LAND_COVER_SUPERCLASSES};
use dnd_core::config::{NeuronSelection, RunConfig};
use dnd_core::evaluation::{evaluate_against_references, Metric, MetricBackends, ReferenceSet};
use dnd_core::pipeline::{description_pairs, run_dissect, DissectOptions, Stage};
use dnd_core::report::{emit_report, ReportFormat};
use dnd_core::selection::{DescriptionFile, ScoringFunction};
use dnd_core::tools::{cluster_run, prune_mask_for_run, run_term_frequency, ScoredLabels};

#[derive(Parser)]
#[command(name = "dnd", version, about = "Describe hidden neurons of vision networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) the description pipeline.
    Dissect(DissectArgs),
    /// Compare descriptions with reference labels.
    Evaluate(EvaluateArgs),
    /// Group a run's neurons by concept similarity.
    Cluster(ClusterArgs),
    /// Write a channel mask selected from a run's labels.
    PruneMask(PruneArgs),
    /// Area under the ROC curve of scored binary labels.
    OodAuroc(AurocArgs),
    /// Fraction of a run's labels mentioning each term.
    TermFreq(TermArgs),
    /// Render a finished run as JSON, CSV or HTML.
    Report(ReportArgs),
}

#[derive(Args)]
struct DissectArgs {
    #[arg(long)]
    config: PathBuf,
    /// Restrict to these layers.
    #[arg(long = "layer")]
    layers: Vec<String>,
    /// Neuron selection such as `0-49,63` or `all`.
    #[arg(long)]
    neurons: Option<String>,
    #[arg(long)]
    skip_selection: bool,
    /// mean, topk-squared, image-products or topk-ip.
    #[arg(long)]
    scoring: Option<String>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    stop_after: Option<StageArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Augment,
    Candidates,
    Selection,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Description files written by `dissect`.
    #[arg(long, required = true, num_args = 1..)]
    descriptions: Vec<PathBuf>,
    #[arg(long)]
    references: PathBuf,
    /// Comma-separated metric names.
    #[arg(long, default_value = "embed_cos_a,embed_cos_b,pair_f1")]
    metrics: String,
    /// Config whose backends compute the metrics; mock backends otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Writes `evaluation.json` and `evaluation.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    CompleteLinkage,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PHI)]
    phi: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Greedy)]
    mode: ModeArg,
    /// Classify clusters into these superclasses (comma separated).
    #[arg(long, conflicts_with = "land_cover")]
    superclasses: Option<String>,
    /// Classify clusters into the land-cover superclasses.
    #[arg(long)]
    land_cover: bool,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    layer: String,
    /// Mask neurons whose label mentions any of these terms.
    #[arg(long, group = "select")]
    terms: Option<String>,
    /// Mask neurons in clusters smaller than this.
    #[arg(long, group = "select")]
    min_cluster_size: Option<usize>,
    /// Mask exactly these channels, e.g. `0-3,9`.
    #[arg(long, group = "select")]
    indices: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AurocArgs {
    /// JSON file `{"scores": [..], "labels": [..]}`.
    #[arg(long)]
    scores: PathBuf,
}

#[derive(Args)]
struct TermArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Comma-separated terms.
    #[arg(long)]
    terms: String,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// json, csv or html.
    #[arg(long, default_value = "json")]
    format: String,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

fn dissect(a: DissectArgs) -> Result<u8> {
    let mut cfg = RunConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if !a.layers.is_empty() {
        cfg.layers = a.layers;
    }
    if let Some(n) = a.neurons {
        cfg.neurons = NeuronSelection::Spec(n);
    }
    if a.skip_selection {
        cfg.skip_selection = true;
    }
    if let Some(s) = a.scoring {
        cfg.scoring = s.parse::<ScoringFunction>()?;
    }
    if let Some(d) = a.run_dir {
        cfg.run_dir = d;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if a.sequential {
        cfg.parallel = false;
    }
    if a.no_cache {
        cfg.cache = false;
    }
    let stop_after = a.stop_after.map(|s| match s {
        StageArg::Augment => Stage::Augment,
        StageArg::Candidates => Stage::Candidates,
        StageArg::Selection => Stage::Selection,
    });
    let outcome = run_dissect(&cfg, DissectOptions { stop_after })?;
    for f in &outcome.failures {
        eprintln!("failed {} at {}: {}", f.neuron, f.stage.name(), f.error);
    }
    for d in outcome.descriptions.iter().flat_map(|f| &f.descriptions) {
        println!("{}\t{}", d.neuron, d.label);
    }
    if let Some(t) = &outcome.timing {
        log::info!("{} neurons in {:.1}s ({:.2}s per neuron)", t.neurons, t.seconds_total, t.seconds_per_neuron);
    }
    log::info!("cache hits {} misses {}", outcome.cache_hits, outcome.cache_misses);
    Ok(outcome.exit_code() as u8)
}

fn evaluate(a: EvaluateArgs) -> Result<u8> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let files = a.descriptions.iter().map(|p| DescriptionFile::read(p)).collect::<Result<Vec<_>, _>>()?;
    let refs = ReferenceSet::load(&a.references)?;
    let metrics = Metric::parse_list(&a.metrics)?;
    let backends = cfg.backends.build(&cfg.world()?, None)?;
    let mb = MetricBackends {
        embed_a: backends.embedder.as_ref(),
        embed_b: backends.embedder_b.as_ref(),
        pair: backends.pair_scorer.as_ref(),
    };
    let report = evaluate_against_references(&description_pairs(&files), &refs, &metrics, &mb, cfg.exec())?;
    match &a.out {
        Some(dir) => report.write(dir, "evaluation")?,
        None => print!("{}", report.to_csv()),
    }
    for m in &report.metrics {
        if let Some(v) = report.means.get(m) {
            eprintln!("{}: {v:.4}", m.name());
        }
    }
    Ok(0)
}

fn cluster(a: ClusterArgs) -> Result<u8> {
    let mode = match a.mode {
        ModeArg::Greedy => ClusterMode::Greedy,
        ModeArg::CompleteLinkage => ClusterMode::CompleteLinkage,
    };
    let classes = match (a.superclasses, a.land_cover) {
        (Some(s), _) => Some(split_list(&s)),
        (None, true) => Some(LAND_COVER_SUPERCLASSES.iter().map(|s| s.to_string()).collect()),
        (None, false) => None,
    };
    let report = cluster_run(&a.run_dir, a.phi, mode, classes.as_deref())?;
    for c in &report.clusters {
        let members: Vec<String> = c.members.iter().map(|n| n.to_string()).collect();
        match &c.superclass {
            Some(s) => println!("{}\t{}\t{}\t{}", c.members.len(), c.representative_label, s, members.join(" ")),
            None => println!("{}\t{}\t{}", c.members.len(), c.representative_label, members.join(" ")),
        }
    }
    Ok(0)
}

fn prune_mask(a: PruneArgs) -> Result<u8> {
    let selection = match (a.terms, a.min_cluster_size, a.indices) {
        (Some(t), _, _) => PruneSelection::ByConceptTerms(split_list(&t)),
        (_, Some(min), _) => PruneSelection::ByClusterSize { min },
        (_, _, Some(ix)) => PruneSelection::Explicit(dnd_core::config::parse_ranges(&ix)?),
        _ => bail!("one of --terms, --min-cluster-size or --indices is required"),
    };
    let mask = prune_mask_for_run(&a.run_dir, &a.layer, &selection)?;
    mask.write(&a.out)?;
    println!("masked {} of {} channels ({:.1}%)", mask.indices.len(), mask.channels, 100.0 * mask.fraction());
    Ok(0)
}

fn ood_auroc(a: AurocArgs) -> Result<u8> {
    let data = ScoredLabels::from_json(&fs::read(&a.scores).with_context(|| format!("reading {}", a.scores.display()))?)?;
    println!("{:.6}", auroc(&data.scores, &data.labels)?);
    Ok(0)
}

fn term_freq(a: TermArgs) -> Result<u8> {
    for (term, f) in run_term_frequency(&a.run_dir, &split_list(&a.terms))? {
        println!("{term}\t{f:.4}");
    }
    Ok(0)
}

fn report(a: ReportArgs) -> Result<u8> {
    let format: ReportFormat = a.format.parse()?;
    for p in emit_report(&a.run_dir, format)? {
        println!("{}", p.display());
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dissect(a) => dissect(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Cluster(a) => cluster(a),
        Command::PruneMask(a) => prune_mask(a),
        Command::OodAuroc(a) => ood_auroc(a),
        Command::TermFreq(a) => term_freq(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
