//! Runs a configured layer stack over a dataset, clusters the final
//! per-image features with k-means, and assembles the run report.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{kmeans, kmeans_seed, layer_seed, ClusterError};
use crate::config::{layer_shapes, structure, ConfigError, DatasetSpec, LayerSpec, MapShape, PipelineConfig};
use crate::dataset::{load_idx, load_image_dir, stratified_subset, DatasetError, DirOptions, ImageTensor, LabeledDataset};
use crate::layers::{binarize, code, pool, spectral_layer, BinaryMaps, LayerError, ProcedureReport};
use crate::metrics::{evaluate, MetricError, MetricsReport};
use crate::patch::{normalize_patches, sample_patches, FeatureMaps, PatchError};
use crate::points::PointSet;
use crate::synthetic::{points_to_dataset, two_rings};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        #[source]
        source: LayerError,
    },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid input: {0}")]
    Input(String),
}

impl PipelineError {
    /// Errors caused by the configuration or arguments rather than by the
    /// computation itself.
    pub fn is_validation(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Input(_))
    }
}

/// Output of one layer for every image.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Real(Vec<FeatureMaps>),
    Binary(Vec<BinaryMaps>),
}

impl Features {
    pub fn images(&self) -> usize {
        match self {
            Self::Real(m) => m.len(),
            Self::Binary(b) => b.len(),
        }
    }

    pub fn shape(&self) -> Option<MapShape> {
        match self {
            Self::Real(m) => m.first().map(|f| MapShape { rows: f.rows, cols: f.cols, channels: f.channels }),
            Self::Binary(b) => b.first().map(|f| MapShape { rows: f.rows, cols: f.cols, channels: f.channels }),
        }
    }

    pub fn to_real(&self) -> Vec<FeatureMaps> {
        match self {
            Self::Real(m) => m.clone(),
            Self::Binary(b) => b.iter().map(BinaryMaps::to_feature_maps).collect(),
        }
    }

    /// One point per image: its maps flattened in (row, col, channel) order.
    pub fn points(&self) -> PointSet {
        let n = self.images();
        let len = self.shape().map_or(0, |s| s.len());
        let mut data = Vec::with_capacity(n * len);
        match self {
            Self::Real(m) => m.iter().for_each(|f| data.extend_from_slice(&f.values)),
            Self::Binary(b) => b.iter().for_each(|f| data.extend(f.bits.iter().map(|&x| f64::from(x)))),
        }
        PointSet::new(n, len, data)
    }
}

/// Shape and solver diagnostics of one executed layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub kind: String,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub procedures: Vec<ProcedureReport>,
}

/// Clustering of the stack truncated after `after_layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub after_layer: usize,
    pub structure: String,
    pub feature_len: usize,
    pub inertia: f64,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub layers: Vec<f64>,
    pub kmeans: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    pub dataset: String,
    pub images: usize,
    pub structure: String,
    pub feature_len: usize,
    pub inertia: f64,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    pub timings: Timings,
    pub layers: Vec<LayerReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<VariantReport>,
    pub config: PipelineConfig,
}

impl RunReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("reports serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// The report with every wall time zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.timings = Timings { layers: vec![0.0; r.timings.layers.len()], kmeans: 0.0, total: 0.0 };
        r
    }
}

/// Final features and report of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub features: PointSet,
}

/// Read and validate a config file; dataset paths become relative to its
/// directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
    let mut cfg = PipelineConfig::parse(&text)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

/// Load the configured dataset and draw the stratified subset, if any.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<LabeledDataset, PipelineError> {
    let data = match &cfg.dataset {
        DatasetSpec::Idx { images, labels } => load_idx(images, labels.as_deref())?,
        DatasetSpec::ImageDir { root, class_from_subdir, channels, resize } => {
            let opts = DirOptions {
                class_from_subdir: *class_from_subdir,
                channels: *channels,
                resize: resize.map(|[h, w]| (h, w)),
            };
            load_image_dir(root, &opts)?
        }
        DatasetSpec::TwoRings { n_per, noise, seed } => {
            let (p, l) = two_rings(*n_per, *noise, *seed);
            points_to_dataset("two-rings", &p, Some(l))
        }
    };
    match &cfg.subset {
        Some(s) => Ok(stratified_subset(&data, s.per_class, s.seed.unwrap_or(cfg.seed))?),
        None => Ok(data),
    }
}

/// What a layer reads: the raw images (first layer) or earlier features.
#[derive(Debug, Clone, Copy)]
pub enum LayerInput<'a> {
    Images(&'a [ImageTensor]),
    Maps(&'a Features),
}

/// Execute one layer. Spectral layers draw their randomness from
/// `layer_seed(seed, index)`.
pub fn apply_layer(
    index: usize,
    spec: &LayerSpec,
    input: LayerInput<'_>,
    seed: u64,
) -> Result<(Features, Vec<ProcedureReport>), PipelineError> {
    let wrap = |source: LayerError| PipelineError::Layer { index, kind: spec.tag(), source };
    let patch_err = |e: PatchError| wrap(LayerError::Patch(e));
    match spec {
        LayerSpec::Spectral { patch, procedures } => {
            let grids = match input {
                LayerInput::Images(images) => {
                    let normalize = patch.normalize.unwrap_or(true);
                    images
                        .par_iter()
                        .map(|im| {
                            let g = sample_patches(im, patch.h, patch.w, patch.stride, patch.pad)?;
                            Ok(if normalize { normalize_patches(&g) } else { g })
                        })
                        .collect::<Result<Vec<_>, PatchError>>()
                }
                LayerInput::Maps(features) => {
                    let normalize = patch.normalize.unwrap_or(false);
                    features
                        .to_real()
                        .par_iter()
                        .map(|m| {
                            let g = sample_patches(m, patch.h, patch.w, patch.stride, patch.pad)?;
                            Ok(if normalize { normalize_patches(&g) } else { g })
                        })
                        .collect::<Result<Vec<_>, PatchError>>()
                }
            }
            .map_err(patch_err)?;
            let out = spectral_layer(&grids, procedures, layer_seed(seed, index)).map_err(wrap)?;
            Ok((Features::Real(out.maps), out.reports))
        }
        LayerSpec::Pool { size, stride } => {
            let maps = maps_only(index, spec, input)?;
            let s = stride.unwrap_or(*size);
            Ok((Features::Real(maps.to_real().par_iter().map(|m| pool(m, *size, s)).collect()), Vec::new()))
        }
        LayerSpec::Binarize => {
            let maps = maps_only(index, spec, input)?;
            Ok(match maps {
                Features::Real(m) => (Features::Binary(m.par_iter().map(binarize).collect()), Vec::new()),
                Features::Binary(_) => (maps.clone(), Vec::new()),
            })
        }
        LayerSpec::Code { group } => match maps_only(index, spec, input)? {
            Features::Binary(b) => Ok((Features::Real(b.par_iter().map(|m| code(m, *group)).collect()), Vec::new())),
            Features::Real(_) => Err(PipelineError::Input(format!("layer {index}: code needs binary maps"))),
        },
    }
}

fn maps_only<'a>(index: usize, spec: &LayerSpec, input: LayerInput<'a>) -> Result<&'a Features, PipelineError> {
    match input {
        LayerInput::Maps(f) => Ok(f),
        LayerInput::Images(_) => {
            Err(PipelineError::Input(format!("layer {index} ({}) cannot read raw images", spec.tag())))
        }
    }
}

/// Outputs of every layer of a stack, in order.
pub fn run_layers(
    layers: &[LayerSpec],
    data: &LabeledDataset,
    seed: u64,
) -> Result<Vec<(Features, Vec<ProcedureReport>, f64)>, PipelineError> {
    let mut outputs: Vec<(Features, Vec<ProcedureReport>, f64)> = Vec::with_capacity(layers.len());
    for (i, spec) in layers.iter().enumerate() {
        let started = Instant::now();
        let input = match outputs.last() {
            None => LayerInput::Images(&data.images),
            Some((f, _, _)) => LayerInput::Maps(f),
        };
        let (features, reports) = apply_layer(i, spec, input, seed)?;
        let secs = started.elapsed().as_secs_f64();
        log::info!("layer {i} ({}) done in {secs:.1}s, output {:?}", spec.tag(), features.shape());
        outputs.push((features, reports, secs));
    }
    Ok(outputs)
}

fn check_input(cfg: &PipelineConfig, data: &LabeledDataset) -> Result<Vec<MapShape>, PipelineError> {
    cfg.validate()?;
    let Some((h, w, c)) = data.shape() else {
        return Err(PipelineError::Input("dataset is empty".into()));
    };
    if let Some(expected) = cfg.input_shape {
        if expected != [h, w, c] {
            return Err(PipelineError::Input(format!(
                "images are {h}x{w}x{c}, config input_shape is {}x{}x{}",
                expected[0], expected[1], expected[2]
            )));
        }
    }
    if cfg.kmeans.k > data.len() {
        return Err(PipelineError::Input(format!("k = {} exceeds the {} images", cfg.kmeans.k, data.len())));
    }
    Ok(layer_shapes(&cfg.layers, MapShape { rows: h, cols: w, channels: c })?)
}

struct Clustered {
    labels: Vec<usize>,
    inertia: f64,
    metrics: Option<MetricsReport>,
}

fn cluster(cfg: &PipelineConfig, data: &LabeledDataset, points: &PointSet) -> Result<Clustered, PipelineError> {
    let r = kmeans(points, cfg.kmeans.k, cfg.kmeans.restarts, kmeans_seed(cfg.seed))?;
    let metrics = match &data.labels {
        Some(truth) => Some(evaluate(truth, &r.labels, Some(points))?),
        None => None,
    };
    Ok(Clustered { labels: r.labels, inertia: r.inertia, metrics })
}

/// Run the stack, cluster the final features, and cluster the output of
/// every tapped layer as the corresponding truncated variant. A variant
/// equals the run of the truncated config: both use the same seeds.
pub fn run_pipeline(cfg: &PipelineConfig, data: &LabeledDataset) -> Result<RunOutcome, PipelineError> {
    let started = Instant::now();
    let shapes = check_input(cfg, data)?;
    let outputs = run_layers(&cfg.layers, data, cfg.seed)?;
    let last = cfg.layers.len() - 1;

    let mut variants = Vec::new();
    let mut taps = cfg.taps.clone();
    taps.sort_unstable();
    taps.dedup();
    for &t in taps.iter().filter(|&&t| t != last) {
        let points = outputs[t].0.points();
        let c = cluster(cfg, data, &points)?;
        variants.push(VariantReport {
            after_layer: t,
            structure: structure(&cfg.layers[..=t]),
            feature_len: points.dim(),
            inertia: c.inertia,
            labels: c.labels,
            metrics: c.metrics,
        });
    }

    let k_started = Instant::now();
    let features = outputs[last].0.points();
    let c = cluster(cfg, data, &features)?;
    let kmeans_secs = k_started.elapsed().as_secs_f64();

    let layers = outputs
        .iter()
        .zip(&shapes)
        .enumerate()
        .map(|(i, ((_, reports, _), s))| LayerReport {
            index: i,
            kind: cfg.layers[i].tag().to_string(),
            rows: s.rows,
            cols: s.cols,
            channels: s.channels,
            procedures: reports.clone(),
        })
        .collect();
    let report = RunReport {
        version: VERSION.to_string(),
        seed: cfg.seed,
        dataset: data.name.clone(),
        images: data.len(),
        structure: structure(&cfg.layers),
        feature_len: features.dim(),
        inertia: c.inertia,
        labels: c.labels,
        metrics: c.metrics,
        timings: Timings {
            layers: outputs.iter().map(|o| o.2).collect(),
            kmeans: kmeans_secs,
            total: started.elapsed().as_secs_f64(),
        },
        layers,
        variants,
        config: cfg.clone(),
    };
    Ok(RunOutcome { report, features })
}

/// Per-position embedding rows of a layer's output as comma-separated text:
/// a header line, then `image,row,col,c0,c1,...` with 9 significant digits.
pub fn write_embedding(features: &Features, out: &mut impl Write) -> std::io::Result<()> {
    let Some(shape) = features.shape() else {
        return Ok(());
    };
    let maps = features.to_real();
    let mut line = String::from("image,row,col");
    for c in 0..shape.channels {
        line.push_str(&format!(",c{c}"));
    }
    writeln!(out, "{line}")?;
    for (img, m) in maps.iter().enumerate() {
        for r in 0..m.rows {
            for q in 0..m.cols {
                line.clear();
                line.push_str(&format!("{img},{r},{q}"));
                for c in 0..m.channels {
                    line.push_str(&format!(",{:.8e}", m.get(r, q, c)));
                }
                writeln!(out, "{line}")?;
            }
        }
    }
    Ok(())
}
