//! Seeded Gaussian blobs for training runs that need no downloads.

use tessel_core::rng::SplitMix64;

use super::record::Example;

#[derive(Clone, Debug)]
pub struct BlobsConfig {
    pub examples: usize,
    pub dim: usize,
    pub classes: usize,
    /// Standard deviation of every blob around its center.
    pub spread: f64,
    /// Distance between class centers. Class `c` sits on coordinate axis
    /// `c % dim` (negative side when `c >= dim`) at radius
    /// `separation / sqrt(2)`, so with two classes the best achievable
    /// accuracy is `Phi(separation / (2 * spread))`.
    pub separation: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig { examples: 1024, dim: 8, classes: 2, spread: 1.0, separation: 4.0, seed: 0 }
    }
}

/// Example `i` belongs to class `i % classes`. Needs `classes <= 2 * dim`.
pub fn blobs(cfg: &BlobsConfig) -> Vec<Example> {
    assert!(cfg.classes <= 2 * cfg.dim, "{} classes do not fit on {} axes", cfg.classes, cfg.dim);
    let mut rng = SplitMix64::new(cfg.seed);
    let r = cfg.separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|c| {
            let mut m = vec![0.0; cfg.dim];
            m[c % cfg.dim] = if c < cfg.dim { r } else { -r };
            m
        })
        .collect();
    (0..cfg.examples)
        .map(|i| {
            let c = i % cfg.classes;
            let features = centers[c].iter().map(|m| (m + rng.normal() * cfg.spread) as f32).collect();
            Example { features, label: c as u32 }
        })
        .collect()
}
