//! Command-line surface. Exit codes: 0 success, 1 usage or validation
//! error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::affinity::AffinityKind;
use crate::clustering::{kmeans, kmeans_seed, spectral_cluster, DEFAULT_RESTARTS};
use crate::config::PipelineConfig;
use crate::eigen::SolverKind;
use crate::laplacian::LaplacianKind;
use crate::layers::ProcedureSpec;
use crate::metrics::evaluate;
use crate::pipeline::{load_config, load_dataset, run_layers, run_pipeline, write_embedding, PipelineError};
use crate::points::PointSet;

#[derive(Debug, Parser)]
#[command(name = "sanet", version, about = "Stacked spectral analysis networks for image clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a configured network and write the report.
    Run(RunArgs),
    /// Single-stage baselines on raw inputs.
    #[command(subcommand)]
    Baseline(Baseline),
    /// Score predicted labels against true labels.
    Metrics {
        #[arg(long = "true")]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Write the per-position output of one layer as CSV.
    DumpEmbedding {
        #[command(flatten)]
        common: DataArgs,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the stratified subset size (items per class).
    #[arg(long)]
    subset: Option<usize>,
    /// Keep only the first M procedures of the first spectral layer.
    #[arg(long = "procedures-prefix")]
    procedures_prefix: Option<usize>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Baseline {
    /// One spectral procedure with n_eig = k, then k-means.
    Spectral {
        #[command(flatten)]
        input: PointsArgs,
        #[arg(long)]
        affinity: AffinityKind,
        #[arg(long, default_value = "sym")]
        laplacian: LaplacianKind,
        #[arg(long, default_value = "dense")]
        solver: SolverKind,
        #[arg(long)]
        k: usize,
    },
    /// k-means on the raw inputs.
    Kmeans {
        #[command(flatten)]
        input: PointsArgs,
        #[arg(long)]
        k: usize,
    },
}

#[derive(Debug, Args)]
struct PointsArgs {
    /// Take the (subset) images of a pipeline config as flat pixel vectors.
    #[arg(long, conflicts_with = "points", required_unless_present = "points")]
    config: Option<PathBuf>,
    /// Comma-separated points, one per line.
    #[arg(long)]
    points: Option<PathBuf>,
    /// True labels for `--points`, one per line.
    #[arg(long, requires = "points")]
    labels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    restarts: usize,
    /// Write predicted labels here, one per line.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            Self::Validation(e.to_string())
        } else {
            Self::Runtime(e.to_string())
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))
}

/// Integers separated by whitespace or commas.
fn parse_labels(path: &Path) -> Result<Vec<usize>, CliError> {
    read_file(path)?
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|e| CliError::Validation(format!("{}: label {t:?}: {e}", path.display()))))
        .collect()
}

fn parse_points(path: &Path) -> Result<PointSet, CliError> {
    let text = read_file(path)?;
    let rows = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Err(CliError::Validation(format!("{}: no points", path.display())));
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(CliError::Validation(format!("{}: rows differ in length", path.display())));
    }
    Ok(PointSet::from_rows(&rows))
}

fn prepared_config(a: &DataArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(per_class) = a.subset {
        cfg.subset = Some(crate::config::SubsetSpec { per_class, seed: None });
    }
    if let Some(m) = a.procedures_prefix {
        cfg = cfg.with_procedures_prefix(m).map_err(|e| CliError::Validation(e.to_string()))?;
    }
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(cfg)
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::Validation("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(runtime)?;
            Ok(pool.install(f))
        }
    }
}

fn metrics_line(m: &crate::metrics::MetricsReport) -> String {
    let ch = m.ch.map_or("undefined".to_string(), |c| format!("{c}"));
    format!("acc={} nmi={} ari={} f1={} ch={}", m.acc, m.nmi, m.ari, m.f1, ch)
}

fn run(a: RunArgs) -> Result<(), CliError> {
    let cfg = prepared_config(&a.common)?;
    let outcome = with_threads(a.common.threads, || {
        let data = load_dataset(&cfg)?;
        run_pipeline(&cfg, &data)
    })??;
    write_file(&a.out, &outcome.report.to_toml())?;
    let r = &outcome.report;
    match &r.metrics {
        Some(m) => println!("{} features={} {}", r.structure, r.feature_len, metrics_line(m)),
        None => println!("{} features={} inertia={}", r.structure, r.feature_len, r.inertia),
    }
    for v in &r.variants {
        if let Some(m) = &v.metrics {
            println!("{} features={} {}", v.structure, v.feature_len, metrics_line(m));
        }
    }
    Ok(())
}

fn baseline_points(input: &PointsArgs) -> Result<(PointSet, Option<Vec<usize>>, u64), CliError> {
    if let Some(path) = &input.config {
        let mut cfg = load_config(path)?;
        if let Some(s) = input.seed {
            cfg.seed = s;
        }
        if let Some(per_class) = input.subset {
            cfg.subset = Some(crate::config::SubsetSpec { per_class, seed: None });
        }
        let data = load_dataset(&cfg)?;
        if data.is_empty() {
            return Err(CliError::Validation("dataset is empty".into()));
        }
        let rows: Vec<Vec<f64>> = data.images.iter().map(|im| im.data.clone()).collect();
        return Ok((PointSet::from_rows(&rows), data.labels, cfg.seed));
    }
    let path = input.points.as_ref().expect("clap enforces --config or --points");
    let points = parse_points(path)?;
    let labels = input.labels.as_deref().map(parse_labels).transpose()?;
    if let Some(l) = &labels {
        if l.len() != points.len() {
            return Err(CliError::Validation(format!("{} labels for {} points", l.len(), points.len())));
        }
    }
    Ok((points, labels, input.seed.unwrap_or(0)))
}

fn finish_baseline(input: &PointsArgs, labels: &[usize], truth: Option<&[usize]>, points: &PointSet) -> Result<(), CliError> {
    if let Some(out) = &input.out {
        let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
        write_file(out, &text)?;
    }
    match truth {
        Some(t) => println!("{}", metrics_line(&evaluate(t, labels, Some(points)).map_err(runtime)?)),
        None => println!("clusters={}", labels.iter().max().map_or(0, |m| m + 1)),
    }
    Ok(())
}

fn baseline(b: Baseline) -> Result<(), CliError> {
    match b {
        Baseline::Spectral { input, affinity, laplacian, solver, k } => {
            let (points, truth, seed) = baseline_points(&input)?;
            let proc = ProcedureSpec::new(affinity, laplacian, solver, k);
            proc.validate().map_err(CliError::Validation)?;
            if k == 0 || k > points.len() {
                return Err(CliError::Validation(format!("--k {k} must lie in [1, {}]", points.len())));
            }
            let (r, embedding) = spectral_cluster(&points, k, &proc, input.restarts, seed).map_err(runtime)?;
            finish_baseline(&input, &r.labels, truth.as_deref(), &PointSet::from_matrix(&embedding))
        }
        Baseline::Kmeans { input, k } => {
            let (points, truth, seed) = baseline_points(&input)?;
            if k == 0 || k > points.len() {
                return Err(CliError::Validation(format!("--k {k} must lie in [1, {}]", points.len())));
            }
            let r = kmeans(&points, k, input.restarts, kmeans_seed(seed)).map_err(runtime)?;
            finish_baseline(&input, &r.labels, truth.as_deref(), &points)
        }
    }
}

fn metrics(truth: &Path, pred: &Path) -> Result<(), CliError> {
    let t = parse_labels(truth)?;
    let p = parse_labels(pred)?;
    let m = evaluate(&t, &p, None).map_err(|e| CliError::Validation(e.to_string()))?;
    println!("acc={} nmi={} ari={} f1={}", m.acc, m.nmi, m.ari, m.f1);
    Ok(())
}

fn dump_embedding(common: DataArgs, layer: usize, out: &Path) -> Result<(), CliError> {
    let cfg = prepared_config(&common)?;
    if layer >= cfg.layers.len() {
        return Err(CliError::Validation(format!("--layer {layer}: the config has {} layers", cfg.layers.len())));
    }
    let outputs = with_threads(common.threads, || {
        let data = load_dataset(&cfg)?;
        run_layers(&cfg.layers[..=layer], &data, cfg.seed)
    })??;
    let file = fs::File::create(out).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out.display())))?;
    let mut w = BufWriter::new(file);
    write_embedding(&outputs[layer].0, &mut w).map_err(runtime)?;
    Ok(())
}

/// Parse `argv` (program name first), run the command, and return the exit
/// code.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Baseline(b) => baseline(b),
        Command::Metrics { truth, pred } => metrics(&truth, &pred),
        Command::DumpEmbedding { common, layer, out } => dump_embedding(common, layer, &out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Validation(m) => eprintln!("error: {m}"),
                CliError::Runtime(m) => eprintln!("runtime error: {m}"),
            }
            e.code()
        }
    }
}
