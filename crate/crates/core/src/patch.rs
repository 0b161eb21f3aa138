//! Dense patch extraction from images and feature maps, and re-stacking of
//! per-patch embeddings into per-image feature maps.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageTensor;
use crate::eigen::SpectralEmbedding;

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("consistency error: {0}")]
    Consistency(String),
}

/// Origin of one feature-map channel: which procedure produced it, the rank
/// of its eigenvector, and the eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub procedure: usize,
    pub rank: usize,
    pub eigenvalue: f64,
}

/// rows × cols × channels real maps, row-major by (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub lineage: Vec<Lineage>,
}

impl FeatureMaps {
    pub fn new(
        rows: usize,
        cols: usize,
        channels: usize,
        values: Vec<f64>,
        lineage: Vec<Lineage>,
    ) -> Result<Self, PatchError> {
        if values.len() != rows * cols * channels {
            return Err(PatchError::Consistency(format!(
                "{} values for {rows}x{cols}x{channels} maps",
                values.len()
            )));
        }
        if lineage.len() != channels {
            return Err(PatchError::Consistency(format!(
                "{} lineage records for {channels} channels",
                lineage.len()
            )));
        }
        if lineage.iter().any(|l| !l.eigenvalue.is_finite()) {
            return Err(PatchError::Consistency("non-finite eigenvalue in lineage".into()));
        }
        Ok(Self { rows, cols, channels, values, lineage })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[(row * self.cols + col) * self.channels + ch]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.channels)
    }

    /// Channel-wise concatenation of maps with a common spatial shape.
    pub fn concat_channels(parts: &[FeatureMaps]) -> Result<FeatureMaps, PatchError> {
        let first = parts
            .first()
            .ok_or_else(|| PatchError::Consistency("nothing to concatenate".into()))?;
        let (rows, cols) = (first.rows, first.cols);
        if parts.iter().any(|p| (p.rows, p.cols) != (rows, cols)) {
            return Err(PatchError::Consistency("spatial shapes differ".into()));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut values = Vec::with_capacity(rows * cols * channels);
        for pos in 0..rows * cols {
            for p in parts {
                values.extend_from_slice(&p.values[pos * p.channels..(pos + 1) * p.channels]);
            }
        }
        let lineage = parts.iter().flat_map(|p| p.lineage.iter().copied()).collect();
        FeatureMaps::new(rows, cols, channels, values, lineage)
    }
}

/// Anything laid out as rows × cols × channels, row-major.
pub trait MapSource {
    fn dims(&self) -> (usize, usize, usize);
    fn values(&self) -> &[f64];
}

impl MapSource for ImageTensor {
    fn dims(&self) -> (usize, usize, usize) {
        self.shape()
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
}

impl MapSource for FeatureMaps {
    fn dims(&self) -> (usize, usize, usize) {
        self.shape()
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
    pub pad: bool,
}

impl PatchGeometry {
    /// Patch-grid dimensions over an h × w source.
    pub fn grid_dims(&self, h: usize, w: usize) -> Result<(usize, usize), PatchError> {
        if self.patch_h == 0 || self.patch_w == 0 || self.stride == 0 {
            return Err(PatchError::Geometry(format!(
                "patch {}x{} with stride {} must be positive",
                self.patch_h, self.patch_w, self.stride
            )));
        }
        if h == 0 || w == 0 {
            return Err(PatchError::Geometry("empty source".into()));
        }
        if self.pad {
            Ok((h.div_ceil(self.stride), w.div_ceil(self.stride)))
        } else {
            if self.patch_h > h || self.patch_w > w {
                return Err(PatchError::Geometry(format!(
                    "patch {}x{} larger than unpadded source {h}x{w}",
                    self.patch_h, self.patch_w
                )));
            }
            Ok(((h - self.patch_h) / self.stride + 1, (w - self.patch_w) / self.stride + 1))
        }
    }

    /// Signed top-left corner of grid row/column `i` along an axis.
    fn origin(&self, i: usize, extent: usize, count: usize, patch: usize) -> isize {
        if self.pad {
            // centers at stride steps, the set of centers centered on the axis
            let span = (count - 1) * self.stride;
            let offset = (extent - 1 - span) / 2;
            (offset + i * self.stride) as isize - ((patch - 1) / 2) as isize
        } else {
            (i * self.stride) as isize
        }
    }
}

/// Patches of one source in row-major grid order, each flattened by
/// (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub patch_c: usize,
    pub stride: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * self.patch_c
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let l = self.patch_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.patch_len())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Extract p_h × p_w patches at the given stride. With `pad`, the grid is
/// ⌈H/s⌉ × ⌈W/s⌉ and reads outside the source are zero.
pub fn sample_patches(
    src: &impl MapSource,
    patch_h: usize,
    patch_w: usize,
    stride: usize,
    pad: bool,
) -> Result<PatchGrid, PatchError> {
    let geom = PatchGeometry { patch_h, patch_w, stride, pad };
    let (h, w, c) = src.dims();
    let (rows, cols) = geom.grid_dims(h, w)?;
    let values = src.values();
    let mut data = Vec::with_capacity(rows * cols * patch_h * patch_w * c);
    for gr in 0..rows {
        let top = geom.origin(gr, h, rows, patch_h);
        for gc in 0..cols {
            let left = geom.origin(gc, w, cols, patch_w);
            for dr in 0..patch_h as isize {
                let r = top + dr;
                for dc in 0..patch_w as isize {
                    let cc = left + dc;
                    if r < 0 || cc < 0 || r >= h as isize || cc >= w as isize {
                        data.extend(std::iter::repeat_n(0.0, c));
                    } else {
                        let at = (r as usize * w + cc as usize) * c;
                        data.extend_from_slice(&values[at..at + c]);
                    }
                }
            }
        }
    }
    Ok(PatchGrid { rows, cols, patch_h, patch_w, patch_c: c, stride, data })
}

/// Subtract each patch's own mean from that patch.
pub fn normalize_patches(g: &PatchGrid) -> PatchGrid {
    let l = g.patch_len();
    let mut out = g.clone();
    if l == 0 {
        return out;
    }
    for p in out.data.chunks_exact_mut(l) {
        let mean = p.iter().sum::<f64>() / l as f64;
        p.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

/// Split an embedding whose rows are ordered (image, grid row, grid col)
/// into one rows × cols × n_eig map per image.
pub fn stack_embeddings(
    e: &SpectralEmbedding,
    procedure: usize,
    grid_rows: usize,
    grid_cols: usize,
    images: usize,
) -> Result<Vec<FeatureMaps>, PatchError> {
    let per_image = grid_rows * grid_cols;
    let n = e.vectors.nrows();
    if n != images * per_image {
        return Err(PatchError::Consistency(format!(
            "embedding has {n} rows, expected {images} images x {grid_rows}x{grid_cols} patches"
        )));
    }
    let k = e.vectors.ncols();
    let lineage: Vec<Lineage> = e
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(rank, &eigenvalue)| Lineage { procedure, rank, eigenvalue })
        .collect();
    (0..images)
        .map(|img| {
            let mut values = Vec::with_capacity(per_image * k);
            for p in 0..per_image {
                let row = img * per_image + p;
                values.extend((0..k).map(|c| e.vectors[(row, c)]));
            }
            FeatureMaps::new(grid_rows, grid_cols, k, values, lineage.clone())
        })
        .collect()
}

/// Inverse of [`stack_embeddings`]: rows ordered (image, row, col).
pub fn flatten_maps(maps: &[FeatureMaps]) -> DMatrix<f64> {
    let Some(first) = maps.first() else {
        return DMatrix::zeros(0, 0);
    };
    let per = first.rows * first.cols;
    let c = first.channels;
    DMatrix::from_fn(maps.len() * per, c, |r, j| maps[r / per].values[(r % per) * c + j])
}

/// Extent in the original image seen by one second-layer patch
/// (exact when the first layer uses stride 1).
pub fn receptive_field(p1_h: usize, p1_w: usize, p0_h: usize, p0_w: usize) -> (usize, usize) {
    (p1_h + p0_h - 1, p1_w + p0_w - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigen::SolverKind;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> ImageTensor {
        let n = h * w * c;
        ImageTensor::new(h, w, c, (0..n).map(|i| i as f64 / n as f64).collect(), 0).unwrap()
    }

    fn maps(rows: usize, cols: usize, ch: usize, seed: u64) -> FeatureMaps {
        let values = (0..rows * cols * ch)
            .map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5)
            .collect();
        let lineage = (0..ch).map(|r| Lineage { procedure: 0, rank: r, eigenvalue: r as f64 }).collect();
        FeatureMaps::new(rows, cols, ch, values, lineage).unwrap()
    }

    #[test]
    fn mnist_first_layer_grid() {
        let g = sample_patches(&ramp(28, 28, 1), 11, 11, 5, true).unwrap();
        assert_eq!((g.rows, g.cols), (6, 6));
        assert_eq!(g.len(), 36);
        assert_eq!(g.patch_len(), 121);
    }

    #[test]
    fn mnist_second_layer_grid() {
        let m = maps(6, 6, 512, 1);
        let g = sample_patches(&m, 4, 4, 1, false).unwrap();
        assert_eq!((g.rows, g.cols), (3, 3));
        assert_eq!(g.patch_len(), 4 * 4 * 512);
        // top-left patch starts at the map origin
        assert_eq!(g.patch(0)[..512], m.values[..512]);
    }

    #[test]
    fn unit_patches_are_pixels() {
        let im = ramp(5, 4, 2);
        let g = sample_patches(&im, 1, 1, 1, true).unwrap();
        assert_eq!(g.len(), 20);
        for (i, p) in g.patches().enumerate() {
            assert_eq!(p, &im.data[i * 2..i * 2 + 2]);
        }
    }

    #[test]
    fn unpadded_oversized_patch_is_geometry_error() {
        assert!(matches!(sample_patches(&ramp(3, 3, 1), 4, 1, 1, false), Err(PatchError::Geometry(_))));
        assert!(matches!(sample_patches(&ramp(3, 3, 1), 1, 1, 0, true), Err(PatchError::Geometry(_))));
    }

    #[test]
    fn padded_patches_read_zero_outside() {
        let im = ImageTensor::new(2, 2, 1, vec![1.0; 4], 0).unwrap();
        let g = sample_patches(&im, 3, 3, 1, true).unwrap();
        // first patch is centered on pixel (0, 0): 4 of 9 cells inside
        assert_eq!(g.patch(0).iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn normalization_examples() {
        let im = ImageTensor::new(1, 2, 1, vec![0.0, 1.0], 0).unwrap();
        let g = sample_patches(&im, 1, 2, 1, false).unwrap();
        assert_eq!(normalize_patches(&g).patch(0), &[-0.5, 0.5]);
        let flat = ImageTensor::new(2, 2, 1, vec![0.5; 4], 0).unwrap();
        let g = normalize_patches(&sample_patches(&flat, 2, 2, 1, false).unwrap());
        assert!(g.patch(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stacking_mnist_shape_and_mismatch() {
        let e = SpectralEmbedding::new(
            DMatrix::from_fn(72, 64, |r, c| (r * 64 + c) as f64),
            (0..64).map(|i| i as f64 * 0.01).collect(),
            SolverKind::Dense,
        );
        let m = stack_embeddings(&e, 3, 6, 6, 2).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].shape(), (6, 6, 64));
        assert_eq!(m[1].get(0, 0, 0), e.vectors[(36, 0)]);
        assert_eq!(m[0].lineage[5], Lineage { procedure: 3, rank: 5, eigenvalue: 0.05 });
        assert!(stack_embeddings(&e, 0, 6, 6, 3).is_err());

        let single = SpectralEmbedding::new(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]), vec![0.0, 1.0, 2.0], SolverKind::Dense);
        let m = stack_embeddings(&single, 0, 1, 1, 1).unwrap();
        assert_eq!(m[0].values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(4, 4, 11, 11), (14, 14));
        assert_eq!(receptive_field(1, 1, 7, 5), (7, 5));
        assert_eq!(receptive_field(7, 5, 1, 1), (7, 5));
    }

    proptest! {
        #[test]
        fn padded_count_is_ceil(h in 1usize..=32, w in 1usize..=32, s in 1usize..=32, p in 1usize..=7) {
            let g = sample_patches(&ramp(h, w, 1), p, p, s, true).unwrap();
            prop_assert_eq!((g.rows, g.cols), (h.div_ceil(s), w.div_ceil(s)));
            prop_assert_eq!(g.as_slice().len(), g.len() * p * p);
        }

        #[test]
        fn normalization_is_idempotent_zero_mean(h in 2usize..10, w in 2usize..10, p in 1usize..4) {
            let g = normalize_patches(&sample_patches(&ramp(h, w, 1), p, p, 1, true).unwrap());
            for patch in g.patches() {
                prop_assert!(patch.iter().sum::<f64>().abs() / (patch.len() as f64) < 1e-12);
            }
            let again = normalize_patches(&g);
            for (a, b) in again.as_slice().iter().zip(g.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn stack_inverts_flatten(n in 1usize..4, r in 1usize..5, c in 1usize..5, ch in 1usize..6, seed in 0u64..100) {
            let input: Vec<FeatureMaps> = (0..n).map(|i| maps(r, c, ch, seed + i as u64)).collect();
            let e = SpectralEmbedding::new(flatten_maps(&input), (0..ch).map(|x| x as f64).collect(), SolverKind::Dense);
            let back = stack_embeddings(&e, 0, r, c, n).unwrap();
            prop_assert_eq!(back, input);
        }
    }
}
