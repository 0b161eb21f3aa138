//! Pipeline configuration: a TOML document describing the data source, the
//! layer stack, and the final k-means.
//!
//! ```toml
//! seed = 7
//! input_shape = [28, 28, 1]
//! taps = [2]                     # also cluster the output of layer 2
//!
//! [dataset]
//! kind = "idx"                   # "idx" | "image_dir" | "two_rings"
//! images = "images-idx3-ubyte.gz"
//! labels = "labels-idx1-ubyte.gz"
//!
//! [subset]
//! per_class = 100                # stratified, drawn with the run seed
//!
//! [kmeans]
//! k = 10
//! restarts = 10
//!
//! [[layers]]
//! type = "spectral"              # "spectral" | "pool" | "binarize" | "code"
//! patch = { h = 11, w = 11, stride = 5, pad = true }
//! procedures = [
//!   { affinity = "knn:9", laplacian = "sym", solver = "lanczos", n_eig = 64 },
//! ]
//!
//! [[layers]]
//! type = "pool"
//! size = 2
//! stride = 1
//!
//! [[layers]]
//! type = "binarize"
//!
//! [[layers]]
//! type = "code"
//! group = 8
//! ```
//!
//! Relative dataset paths resolve against the directory of the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::DEFAULT_RESTARTS;
use crate::layers::ProcedureSpec;
use crate::patch::PatchGeometry;

pub const DEFAULT_CODE_GROUP: usize = 8;
pub const DEFAULT_POOL_SIZE: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("layer {later} does not fit the output of layer {earlier}: {message}")]
    Shape { earlier: String, later: usize, message: String },
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema { path: path.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Expected (height, width, channels) of the input images; enables
    /// shape checks before any data is read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<[usize; 3]>,
    /// Layer indices whose outputs are also clustered, giving the variants
    /// obtained by truncating the stack after those layers.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub taps: Vec<usize>,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetSpec>,
    pub kmeans: KmeansSpec,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        images: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<PathBuf>,
    },
    ImageDir {
        root: PathBuf,
        #[serde(default = "yes")]
        class_from_subdir: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channels: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resize: Option<[usize; 2]>,
    },
    /// Two concentric rings in the unit square, as 1×1×2 images.
    TwoRings {
        n_per: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSpec {
    pub per_class: usize,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansSpec {
    pub k: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    DEFAULT_RESTARTS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    #[serde(default = "yes")]
    pub pad: bool,
    /// Subtract each patch's mean. Defaults to true for the first layer
    /// (image patches) and false afterwards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
}

impl PatchSpec {
    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry { patch_h: self.h, patch_w: self.w, stride: self.stride, pad: self.pad }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Spectral {
        patch: PatchSpec,
        procedures: Vec<ProcedureSpec>,
    },
    Pool {
        #[serde(default = "default_pool_size")]
        size: usize,
        /// Defaults to `size` (non-overlapping windows).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<usize>,
    },
    Binarize,
    Code {
        #[serde(default = "default_group")]
        group: usize,
    },
}

fn default_pool_size() -> usize {
    DEFAULT_POOL_SIZE
}

fn default_group() -> usize {
    DEFAULT_CODE_GROUP
}

impl LayerSpec {
    /// Short structural tag: SAL, PL, BL or CL.
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Spectral { .. } => "SAL",
            Self::Pool { .. } => "PL",
            Self::Binarize => "BL",
            Self::Code { .. } => "CL",
        }
    }
}

/// Structure string of a stack, e.g. "SAL-SAL-PL-BL-CL".
pub fn structure(layers: &[LayerSpec]) -> String {
    layers.iter().map(LayerSpec::tag).collect::<Vec<_>>().join("-")
}

/// Output shape of one layer, per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapShape {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl MapShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for MapShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.rows, self.cols, self.channels)
    }
}

impl PipelineConfig {
    /// Parse and validate. Shapes are checked when `input_shape` is set.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let at = e
                .span()
                .map(|s| format!(" (line {})", text[..s.start].matches('\n').count() + 1))
                .unwrap_or_default();
            schema("<root>", format!("{}{at}", e.message().trim()))
        })?;
        // Layers are tagged by `type`; decoding them one by one keeps the
        // full path to a bad field in error messages.
        let layers = match table.remove("layers") {
            None => Vec::new(),
            Some(toml::Value::Array(items)) => items
                .into_iter()
                .enumerate()
                .map(|(i, v)| parse_layer(v, &format!("layers[{i}]")))
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(schema("layers", "expected an array of tables")),
        };
        let mut cfg: Self = from_value(toml::Value::Table(table), "")?;
        cfg.layers = layers;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Structural checks, plus shape arithmetic when the input shape is known.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.layers.is_empty() {
            return Err(schema("layers", "at least one layer is required"));
        }
        if !matches!(self.layers[0], LayerSpec::Spectral { .. }) {
            return Err(schema("layers[0].type", "the first layer must be spectral"));
        }
        if self.kmeans.k == 0 {
            return Err(schema("kmeans.k", "must be at least 1"));
        }
        if self.kmeans.restarts == 0 {
            return Err(schema("kmeans.restarts", "must be at least 1"));
        }
        if let Some(s) = &self.subset {
            if s.per_class == 0 {
                return Err(schema("subset.per_class", "must be at least 1"));
            }
        }
        for (i, &t) in self.taps.iter().enumerate() {
            if t >= self.layers.len() {
                return Err(schema(
                    format!("taps[{i}]"),
                    format!("layer {t} does not exist ({} layers)", self.layers.len()),
                ));
            }
        }
        let mut coded = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |field: &str| format!("layers[{i}].{field}");
            match layer {
                LayerSpec::Spectral { patch, procedures } => {
                    if patch.h == 0 || patch.w == 0 {
                        return Err(schema(at("patch"), "patch sides must be at least 1"));
                    }
                    if patch.stride == 0 {
                        return Err(schema(at("patch.stride"), "must be at least 1"));
                    }
                    if procedures.is_empty() {
                        return Err(schema(at("procedures"), "a spectral layer needs at least one procedure"));
                    }
                    for (j, p) in procedures.iter().enumerate() {
                        p.validate().map_err(|m| schema(at(&format!("procedures[{j}]")), m))?;
                    }
                }
                LayerSpec::Pool { size, stride } => {
                    if *size == 0 {
                        return Err(schema(at("size"), "must be at least 1"));
                    }
                    if *stride == Some(0) {
                        return Err(schema(at("stride"), "must be at least 1"));
                    }
                }
                LayerSpec::Binarize => {
                    if i == 0 || !matches!(self.layers[i - 1], LayerSpec::Spectral { .. } | LayerSpec::Pool { .. }) {
                        return Err(schema(at("type"), "binarize must follow a spectral or pool layer"));
                    }
                }
                LayerSpec::Code { group } => {
                    if coded {
                        return Err(schema(at("type"), "at most one code layer is allowed"));
                    }
                    coded = true;
                    if i == 0 || self.layers[i - 1] != LayerSpec::Binarize {
                        return Err(schema(at("type"), "code must directly follow binarize"));
                    }
                    if !(1..=52).contains(group) {
                        return Err(schema(at("group"), "must lie in [1, 52]"));
                    }
                }
            }
        }
        if let Some([h, w, c]) = self.input_shape {
            self.shapes(MapShape { rows: h, cols: w, channels: c })?;
        }
        Ok(())
    }

    /// Per-layer output shapes for a given input image shape.
    pub fn shapes(&self, input: MapShape) -> Result<Vec<MapShape>, ConfigError> {
        layer_shapes(&self.layers, input)
    }

    /// Length of the feature vector handed to the final k-means.
    pub fn predicted_feature_len(&self) -> Option<usize> {
        let [h, w, c] = self.input_shape?;
        let shapes = self.shapes(MapShape { rows: h, cols: w, channels: c }).ok()?;
        shapes.last().map(MapShape::len)
    }

    /// Keep only the first `m` procedures of the first spectral layer.
    pub fn with_procedures_prefix(mut self, m: usize) -> Result<Self, ConfigError> {
        if m == 0 {
            return Err(schema("procedures-prefix", "must be at least 1"));
        }
        if let Some(LayerSpec::Spectral { procedures, .. }) = self.layers.first_mut() {
            if m > procedures.len() {
                return Err(schema(
                    "layers[0].procedures",
                    format!("prefix {m} exceeds the {} procedures of the layer", procedures.len()),
                ));
            }
            procedures.truncate(m);
        }
        self.validate()?;
        Ok(self)
    }

    /// The stack cut after layer `last`, with taps dropped.
    pub fn truncated(&self, last: usize) -> Self {
        let mut c = self.clone();
        c.layers.truncate(last + 1);
        c.taps.clear();
        c
    }

    /// Resolve relative dataset paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSpec::Idx { images, labels } => {
                fix(images);
                if let Some(l) = labels {
                    fix(l);
                }
            }
            DatasetSpec::ImageDir { root, .. } => fix(root),
            DatasetSpec::TwoRings { .. } => {}
        }
    }
}

fn join_path(prefix: &str, sub: &str) -> String {
    match (prefix.is_empty(), sub) {
        (true, ".") => "<root>".to_string(),
        (true, _) => sub.to_string(),
        (false, ".") => prefix.to_string(),
        (false, _) if sub.starts_with('[') => format!("{prefix}{sub}"),
        (false, _) => format!("{prefix}.{sub}"),
    }
}

fn from_value<T: DeserializeOwned>(v: toml::Value, prefix: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = join_path(prefix, &e.path().to_string());
        schema(path, e.into_inner().message().trim())
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectralFields {
    patch: PatchSpec,
    procedures: Vec<ProcedureSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolFields {
    #[serde(default = "default_pool_size")]
    size: usize,
    #[serde(default)]
    stride: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeFields {
    #[serde(default = "default_group")]
    group: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoFields {}

fn parse_layer(v: toml::Value, path: &str) -> Result<LayerSpec, ConfigError> {
    let toml::Value::Table(mut t) = v else {
        return Err(schema(path, "expected a table"));
    };
    let kind = match t.remove("type") {
        Some(toml::Value::String(s)) => s,
        Some(_) => return Err(schema(format!("{path}.type"), "expected a string")),
        None => return Err(schema(format!("{path}.type"), "missing layer type")),
    };
    let rest = toml::Value::Table(t);
    Ok(match kind.as_str() {
        "spectral" => {
            let f: SpectralFields = from_value(rest, path)?;
            LayerSpec::Spectral { patch: f.patch, procedures: f.procedures }
        }
        "pool" => {
            let f: PoolFields = from_value(rest, path)?;
            LayerSpec::Pool { size: f.size, stride: f.stride }
        }
        "binarize" => {
            from_value::<NoFields>(rest, path)?;
            LayerSpec::Binarize
        }
        "code" => LayerSpec::Code { group: from_value::<CodeFields>(rest, path)?.group },
        other => {
            return Err(schema(
                format!("{path}.type"),
                format!("unknown layer type {other:?}, expected spectral, pool, binarize or code"),
            ))
        }
    })
}

pub fn layer_shapes(layers: &[LayerSpec], input: MapShape) -> Result<Vec<MapShape>, ConfigError> {
    let mut cur = input;
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let earlier = if i == 0 { "input".to_string() } else { (i - 1).to_string() };
        let shape_err = |message: String| ConfigError::Shape { earlier: earlier.clone(), later: i, message };
        cur = match layer {
            LayerSpec::Spectral { patch, procedures } => {
                let (rows, cols) = patch
                    .geometry()
                    .grid_dims(cur.rows, cur.cols)
                    .map_err(|e| shape_err(format!("{e} (incoming maps {cur})")))?;
                MapShape { rows, cols, channels: procedures.iter().map(|p| p.n_eig).sum() }
            }
            LayerSpec::Pool { stride, size } => {
                let s = stride.unwrap_or(*size);
                MapShape { rows: cur.rows.div_ceil(s), cols: cur.cols.div_ceil(s), ..cur }
            }
            LayerSpec::Binarize => cur,
            LayerSpec::Code { group } => MapShape { channels: cur.channels.div_ceil(*group), ..cur },
        };
        out.push(cur);
    }
    Ok(out)
}
