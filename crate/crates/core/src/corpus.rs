//! Seeded synthetic image corpus.
//!
//! Every image is a sum of Gaussian blobs with random centre, width and
//! per-channel amplitude, plus low-amplitude Gaussian noise. Blobs give each
//! image regions with very different local ranges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{DatasetBundle, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blobs: usize,
    pub noise_std: f64,
    pub classes: u32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            images: 100,
            height: 32,
            width: 32,
            channels: 3,
            blobs: 3,
            noise_std: 0.02,
            classes: 10,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn with_images(mut self, images: usize) -> Self {
        self.images = images;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

pub fn synthetic_corpus(config: &CorpusConfig) -> Result<DatasetBundle> {
    let CorpusConfig { height: h, width: w, channels: c, .. } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std).expect("finite noise level");
    let span = h.max(w) as f64;
    let mut images = Vec::with_capacity(config.images);
    for _ in 0..config.images {
        let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..config.blobs)
            .map(|_| {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let sigma = rng.random_range(0.08..0.3) * span;
                let amp = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                (cy, cx, sigma, amp)
            })
            .collect();
        let mut values = Vec::with_capacity(h * w * c);
        for r in 0..h {
            for q in 0..w {
                for ch in 0..c {
                    let mut v = 0.0;
                    for (cy, cx, sigma, amp) in &blobs {
                        let d2 = (r as f64 - cy).powi(2) + (q as f64 - cx).powi(2);
                        v += amp[ch] * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                    values.push((v + noise.sample(&mut rng)) as f32);
                }
            }
        }
        images.push(ImageTensor::new(h, w, c, values)?);
    }
    let labels = (0..config.images as u32).map(|i| i % config.classes.max(1)).collect();
    DatasetBundle::new(images, labels)
}
