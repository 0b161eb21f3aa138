//! Image datasets: IDX and image-directory ingestion, resizing, and
//! reproducible stratified subsetting.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;
use walkdir::WalkDir;

use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("class {class} has {available} items, {requested} requested")]
    Capacity { class: usize, available: usize, requested: usize },
    #[error("failed to decode {} file(s): {}", .0.len(), format_decode_errors(.0))]
    Decode(Vec<(PathBuf, String)>),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

fn format_decode_errors(errs: &[(PathBuf, String)]) -> String {
    errs.iter()
        .map(|(p, e)| format!("{}: {e}", p.display()))
        .collect::<Vec<_>>()
        .join("; ")
}

/// H × W × C image with values in [0, 1], row-major by (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub source_index: usize,
}

impl ImageTensor {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        source_index: usize,
    ) -> Result<Self, DatasetError> {
        if data.len() != height * width * channels {
            return Err(DatasetError::Consistency(format!(
                "image data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(DatasetError::Format(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data, source_index })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub name: String,
    pub images: Vec<ImageTensor>,
    pub labels: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<ImageTensor>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self, DatasetError> {
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(DatasetError::Consistency(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
                return Err(DatasetError::Consistency(format!(
                    "mixed image shapes {:?} and {:?}",
                    first.shape(),
                    bad.shape()
                )));
            }
        }
        Ok(Self { name: name.into(), images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Shared (height, width, channels), or `None` for an empty dataset.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(ImageTensor::shape)
    }

    /// Number of distinct classes (max label + 1).
    pub fn class_count(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let io = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DatasetError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DatasetError::Format("truncated IDX header".into()))
}

/// Parse an IDX image payload (magic 2051) into images scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<ImageTensor>, DatasetError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let px = rows * cols;
    if body.len() != n * px {
        return Err(DatasetError::Format(format!(
            "IDX image body has {} bytes, header declares {n}x{rows}x{cols}",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(px.max(1))
        .take(n)
        .enumerate()
        .map(|(i, chunk)| ImageTensor {
            height: rows,
            width: cols,
            channels: 1,
            data: chunk.iter().map(|&b| f64::from(b) / 255.0).collect(),
            source_index: i,
        })
        .collect())
}

/// Parse an IDX label payload (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DatasetError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(DatasetError::Format(format!(
            "IDX label body has {} bytes, header declares {n}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Load an IDX image file (optionally gzipped) and an optional label file.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<LabeledDataset, DatasetError> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = labels_path
        .map(|p| read_maybe_gz(p).and_then(|b| parse_idx_labels(&b)))
        .transpose()?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::new(name, images, labels)
}

/// Serialize single-channel images back to an IDX image payload.
pub fn encode_idx_images(images: &[ImageTensor]) -> Result<Vec<u8>, DatasetError> {
    let (rows, cols) = match images.first() {
        Some(im) if im.channels == 1 => (im.height, im.width),
        Some(_) => return Err(DatasetError::Parameter("IDX images must be single-channel".into())),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        out.extend(im.data.iter().map(|v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[derive(Debug, Clone, Default)]
pub struct DirOptions {
    /// Label each image by the name of its top-level subdirectory.
    pub class_from_subdir: bool,
    /// Convert to 1 (luma) or 3 (RGB) channels; native channel count if unset.
    pub channels: Option<usize>,
    /// Resample every image to (height, width) after decoding.
    pub resize: Option<(usize, usize)>,
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm" | "pbm" | "bmp")
    )
}

fn decode_image(path: &Path, channels: Option<usize>, index: usize) -> Result<ImageTensor, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let native = if img.color().has_color() { 3 } else { 1 };
    let want = channels.unwrap_or(native);
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match (want, native) {
        (1, 1) => img.to_luma8().into_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
        (1, 3) => img
            .to_rgb8()
            .into_raw()
            .chunks_exact(3)
            .map(|px| {
                let y: f64 = px.iter().zip(LUMA).map(|(&b, w)| f64::from(b) * w).sum();
                (y / 255.0).clamp(0.0, 1.0)
            })
            .collect(),
        (3, _) => img.to_rgb8().into_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
        (c, _) => return Err(format!("unsupported channel count {c}")),
    };
    ImageTensor::new(h, w, want, data, index).map_err(|e| e.to_string())
}

/// Load every PNG/PGM/BMP under `root`, ordered by relative path bytes.
pub fn load_image_dir(root: &Path, opts: &DirOptions) -> Result<LabeledDataset, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(root) {
        let entry = entry.map_err(|e| DatasetError::Io {
            path: root.to_path_buf(),
            source: e.into(),
        })?;
        if entry.file_type().is_file() && is_image_file(entry.path()) {
            files.push(entry.path().strip_prefix(root).unwrap().to_path_buf());
        }
    }
    files.sort_by(|a, b| a.as_os_str().as_encoded_bytes().cmp(b.as_os_str().as_encoded_bytes()));

    let labels = if opts.class_from_subdir {
        let mut classes: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
        let mut tops = Vec::with_capacity(files.len());
        for f in &files {
            let mut comps = f.components();
            let top = comps.next().filter(|_| comps.next().is_some()).ok_or_else(|| {
                DatasetError::Consistency(format!("{} is not inside a class subdirectory", f.display()))
            })?;
            let key = top.as_os_str().as_encoded_bytes().to_vec();
            classes.insert(key.clone(), 0);
            tops.push(key);
        }
        for (i, v) in classes.values_mut().enumerate() {
            *v = i;
        }
        Some(tops.iter().map(|k| classes[k]).collect::<Vec<_>>())
    } else {
        None
    };

    let decoded: Vec<Result<ImageTensor, (PathBuf, String)>> = files
        .par_iter()
        .enumerate()
        .map(|(i, f)| decode_image(&root.join(f), opts.channels, i).map_err(|e| (f.clone(), e)))
        .collect();
    let mut images = Vec::with_capacity(decoded.len());
    let mut errors = Vec::new();
    for d in decoded {
        match d {
            Ok(im) => images.push(im),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(DatasetError::Decode(errors));
    }
    if let Some((h, w)) = opts.resize {
        images = images.iter().map(|im| resize_image(im, h, w)).collect();
    }
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::new(name, images, labels)
}

fn resize_image(im: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    // half-pixel centers; identical shape maps every sample onto itself
    let sy = im.height as f64 / h as f64;
    let sx = im.width as f64 / w as f64;
    let axis = |i: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let c = im.channels;
    let mut data = Vec::with_capacity(h * w * c);
    for r in 0..h {
        let (r0, r1, fy) = axis(r, sy, im.height);
        for col in 0..w {
            let (c0, c1, fx) = axis(col, sx, im.width);
            for ch in 0..c {
                let top = im.get(r0, c0, ch) * (1.0 - fx) + im.get(r0, c1, ch) * fx;
                let bot = im.get(r1, c0, ch) * (1.0 - fx) + im.get(r1, c1, ch) * fx;
                data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor { height: h, width: w, channels: c, data, source_index: im.source_index }
}

/// Bilinear resampling of every image to h × w.
pub fn resize_bilinear(d: &LabeledDataset, h: usize, w: usize) -> Result<LabeledDataset, DatasetError> {
    if h == 0 || w == 0 {
        return Err(DatasetError::Parameter(format!("target size {h}x{w} must be at least 1x1")));
    }
    let images = d.images.par_iter().map(|im| resize_image(im, h, w)).collect();
    Ok(LabeledDataset { name: d.name.clone(), images, labels: d.labels.clone() })
}

/// Convert RGB images to one luma channel; single-channel images pass through.
pub fn to_grayscale(d: &LabeledDataset) -> LabeledDataset {
    let images = d
        .images
        .iter()
        .map(|im| {
            if im.channels != 3 {
                return im.clone();
            }
            let data = im
                .data
                .chunks_exact(3)
                .map(|px| px.iter().zip(LUMA).map(|(v, w)| v * w).sum::<f64>().clamp(0.0, 1.0))
                .collect();
            ImageTensor { channels: 1, data, ..im.clone() }
        })
        .collect();
    LabeledDataset { name: d.name.clone(), images, labels: d.labels.clone() }
}

/// Exactly `per_class` items of every class, chosen reproducibly from `seed`.
/// Selected items keep their original relative order.
pub fn stratified_subset(d: &LabeledDataset, per_class: usize, seed: u64) -> Result<LabeledDataset, DatasetError> {
    let labels = d
        .labels
        .as_ref()
        .ok_or_else(|| DatasetError::Parameter("stratified subset needs labels".into()))?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut chosen = Vec::with_capacity(per_class * by_class.len());
    for (&class, members) in &by_class {
        if members.len() < per_class {
            return Err(DatasetError::Capacity { class, available: members.len(), requested: per_class });
        }
        let mut pool = members.clone();
        let mut rng = rng::stream(seed, &format!("subset/class/{class}"));
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..per_class]);
    }
    chosen.sort_unstable();
    Ok(select(d, &chosen))
}

/// Dataset restricted to `indices`, in the given order.
pub fn select(d: &LabeledDataset, indices: &[usize]) -> LabeledDataset {
    LabeledDataset {
        name: d.name.clone(),
        images: indices.iter().map(|&i| d.images[i].clone()).collect(),
        labels: d.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
    }
}
