//! Small synthetic point datasets, packaged as 1×1×d "images" so they can run
//! through the same pipeline as real images. Coordinates are mapped into
//! [0, 1].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{ImageTensor, LabeledDataset};
use crate::points::PointSet;
use crate::rng;

/// Two concentric rings, `n_per` points each, radii 0.15 and 0.40 around
/// (0.5, 0.5), with isotropic Gaussian jitter of std `noise`.
pub fn two_rings(n_per: usize, noise: f64, seed: u64) -> (PointSet, Vec<usize>) {
    let mut r = rng::stream(seed, "synthetic/two_rings");
    let jitter = Normal::new(0.0, noise.max(0.0)).unwrap();
    let mut rows = Vec::with_capacity(2 * n_per);
    let mut labels = Vec::with_capacity(2 * n_per);
    for (class, radius) in [0.15, 0.40].into_iter().enumerate() {
        for i in 0..n_per {
            let t = std::f64::consts::TAU * (i as f64 + r.random::<f64>() * 0.5) / n_per as f64;
            let x = 0.5 + radius * t.cos() + jitter.sample(&mut r);
            let y = 0.5 + radius * t.sin() + jitter.sample(&mut r);
            rows.push(vec![x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]);
            labels.push(class);
        }
    }
    (PointSet::from_rows(&rows), labels)
}

/// Isotropic Gaussian blobs with the given centers and per-blob std.
pub fn blobs(centers: &[Vec<f64>], stds: &[f64], n_per: usize, seed: u64) -> (PointSet, Vec<usize>) {
    assert_eq!(centers.len(), stds.len());
    let mut r = rng::stream(seed, "synthetic/blobs");
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (class, (c, &s)) in centers.iter().zip(stds).enumerate() {
        let g = Normal::new(0.0, s).unwrap();
        for _ in 0..n_per {
            rows.push(c.iter().map(|&m| m + g.sample(&mut r)).collect());
            labels.push(class);
        }
    }
    (PointSet::from_rows(&rows), labels)
}

/// Wrap points as 1×1×d images. Values must already lie in [0, 1].
pub fn points_to_dataset(name: &str, points: &PointSet, labels: Option<Vec<usize>>) -> LabeledDataset {
    let images = points
        .rows()
        .enumerate()
        .map(|(i, r)| ImageTensor::new(1, 1, points.dim(), r.to_vec(), i).expect("points must lie in [0, 1]"))
        .collect();
    LabeledDataset::new(name, images, labels).expect("uniform shapes")
}
