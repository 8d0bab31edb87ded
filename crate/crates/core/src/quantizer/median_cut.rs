//! Median Cut palette quantization, used as a whole-image baseline.
//!
//! Pixels are C-dimensional colors. Starting from one bucket holding every
//! pixel, each of `b` rounds splits every bucket along the channel with the
//! largest value range (lowest channel index on ties) at the median. The cut
//! is moved to the nearest boundary between distinct values so equal values
//! never straddle two buckets. Each final bucket is represented by its mean
//! color.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MedianCut {
    pub bits: u8,
    pub channels: usize,
    /// Bucket mean colors, `channels` values each.
    pub palette: Vec<Vec<f32>>,
    /// Palette index of every pixel, row-major.
    pub indices: Vec<u8>,
}

impl MedianCut {
    pub fn reconstruct(&self, height: usize, width: usize) -> Result<ImageTensor> {
        let values = self
            .indices
            .iter()
            .flat_map(|&i| self.palette[i as usize].iter().copied())
            .collect();
        ImageTensor::new(height, width, self.channels, values)
    }
}

pub fn median_cut_quantize(image: &ImageTensor, bits: u8) -> Result<MedianCut> {
    if !(1..=8).contains(&bits) {
        return Err(Error::BitWidth(bits));
    }
    let c = image.channels();
    let pixels: Vec<&[f32]> = image.values().chunks_exact(c).collect();

    let mut buckets: Vec<Vec<usize>> = vec![(0..pixels.len()).collect()];
    for _ in 0..bits {
        let mut next = Vec::with_capacity(buckets.len() * 2);
        for bucket in buckets {
            match split_bucket(&pixels, bucket, c) {
                Ok((lo, hi)) => {
                    next.push(lo);
                    next.push(hi);
                }
                Err(unsplit) => next.push(unsplit),
            }
        }
        buckets = next;
    }

    let mut indices = vec![0u8; pixels.len()];
    let palette = buckets
        .iter()
        .enumerate()
        .map(|(b, members)| {
            let mut sum = vec![0.0f64; c];
            for &p in members {
                indices[p] = b as u8;
                for (s, v) in sum.iter_mut().zip(pixels[p]) {
                    *s += *v as f64;
                }
            }
            sum.iter().map(|s| (s / members.len() as f64) as f32).collect()
        })
        .collect();
    Ok(MedianCut {
        bits,
        channels: c,
        palette,
        indices,
    })
}

/// Returns the two halves, or the bucket unchanged when it is monochrome.
fn split_bucket(
    pixels: &[&[f32]],
    mut bucket: Vec<usize>,
    channels: usize,
) -> std::result::Result<(Vec<usize>, Vec<usize>), Vec<usize>> {
    if bucket.len() < 2 {
        return Err(bucket);
    }
    let mut best = (0usize, 0.0f32);
    for ch in 0..channels {
        let (lo, hi) = bucket.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| {
            (lo.min(pixels[p][ch]), hi.max(pixels[p][ch]))
        });
        if hi - lo > best.1 {
            best = (ch, hi - lo);
        }
    }
    if best.1 <= 0.0 {
        return Err(bucket);
    }
    let ch = best.0;
    bucket.sort_by(|&a, &b| pixels[a][ch].total_cmp(&pixels[b][ch]).then(a.cmp(&b)));
    let mid = bucket.len() / 2;
    let cut = (1..bucket.len())
        .filter(|&k| pixels[bucket[k - 1]][ch] != pixels[bucket[k]][ch])
        .min_by_key(|&k| (k.abs_diff(mid), k))
        .expect("positive range implies a value boundary");
    let hi = bucket.split_off(cut);
    Ok((bucket, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image_from_colors(colors: &[[f32; 3]], layout: &[usize], h: usize, w: usize) -> ImageTensor {
        let values = layout.iter().flat_map(|&i| colors[i]).collect();
        ImageTensor::new(h, w, 3, values).unwrap()
    }

    #[test]
    fn two_colors_one_bit_is_exact() {
        let colors = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.5]];
        // uneven counts: the plain median would land inside the majority color
        let layout = [0, 0, 0, 1, 0, 0, 0, 1, 0];
        let img = image_from_colors(&colors, &layout, 3, 3);
        let mc = median_cut_quantize(&img, 1).unwrap();
        assert_eq!(mc.palette.len(), 2);
        for bucket in 0..2u8 {
            let members: Vec<usize> = (0..9).filter(|&p| mc.indices[p] == bucket).collect();
            let first = layout[members[0]];
            assert!(members.iter().all(|&p| layout[p] == first), "bucket not monochrome");
        }
        assert_eq!(mc.reconstruct(3, 3).unwrap(), img);
    }

    #[test]
    fn constant_image_single_color() {
        let img = ImageTensor::filled(4, 4, 3, 0.42).unwrap();
        for bits in 1..=8 {
            let mc = median_cut_quantize(&img, bits).unwrap();
            assert_eq!(mc.palette.len(), 1);
            assert_eq!(mc.reconstruct(4, 4).unwrap(), img);
        }
    }

    #[test]
    fn four_separated_colors_two_bits() {
        let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
        let layout: Vec<usize> = (0..16).map(|i| (i * 7) % 4).collect();
        let img = image_from_colors(&colors, &layout, 4, 4);
        let mc = median_cut_quantize(&img, 2).unwrap();
        assert_eq!(mc.palette.len(), 4);
        for bucket in 0..4u8 {
            let members: Vec<usize> = (0..16).filter(|&p| mc.indices[p] == bucket).collect();
            assert!(!members.is_empty());
            assert!(members.iter().all(|&p| layout[p] == layout[members[0]]));
        }
        assert_eq!(mc.reconstruct(4, 4).unwrap(), img);
    }

    #[test]
    fn palette_bounded_by_two_pow_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = ImageTensor::new(16, 16, 3, (0..768).map(|_| rng.random()).collect()).unwrap();
        for bits in 1..=8u8 {
            let mc = median_cut_quantize(&img, bits).unwrap();
            assert!(mc.palette.len() <= 1 << bits);
            assert!(mc.indices.iter().all(|&i| (i as usize) < mc.palette.len()));
        }
        assert!(median_cut_quantize(&img, 0).is_err());
        assert!(median_cut_quantize(&img, 9).is_err());
    }
}
