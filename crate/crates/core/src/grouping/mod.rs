//! Quantization-aware patch grouping.
//!
//! Every patch of every image gets its own calibrated `(scale, zero-point)`.
//! Those pairs are clustered with k-means, and each group is then
//! recalibrated on the concatenation of its member patches' values, so the
//! stored parameters come from the data and not from the cluster centroid.
//!
//! Patches are enumerated globally: image by image in bundle order, row-major
//! by origin within an image. Group value sequences concatenate member
//! patches in ascending global index.

mod kmeans;

pub use kmeans::{kmeans_group, partition_objective, Clustering, KMeansConfig, Normalization, Point};

use crate::error::{Error, Result};
use crate::quantizer::{calibrate, calibrate_range, min_max, QuantParams};
use crate::tensor::{scatter_region, split_bundle, DatasetBundle, ImageTensor, Patch, PatchGeometry};

/// Group assignment of every patch plus the shared per-group parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupModel {
    pub assignments: Vec<u32>,
    pub params: Vec<QuantParams>,
    /// Clustering state; absent for models read back from an archive.
    pub clustering: Option<Clustering>,
}

impl GroupModel {
    pub fn group_count(&self) -> usize {
        self.params.len()
    }

    /// Parameters used for the patch with global index `patch`.
    pub fn params_for(&self, patch: usize) -> &QuantParams {
        &self.params[self.assignments[patch] as usize]
    }
}

/// Per-group flattened values and their symbols.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupedValues {
    pub values: Vec<Vec<f32>>,
    pub symbols: Vec<Vec<u8>>,
}

impl GroupedValues {
    pub fn total_len(&self) -> usize {
        self.symbols.iter().map(Vec::len).sum()
    }

    /// All symbols in group order, then intra-group order.
    pub fn flat_symbols(&self) -> Vec<u8> {
        self.symbols.concat()
    }
}

pub fn patch_params(patches: &[Patch], bits: u8) -> Result<Vec<QuantParams>> {
    patches.iter().map(|p| calibrate(&p.values, bits)).collect()
}

/// Calibrates each group over the union of its member patches.
pub fn recalibrate_groups(
    patches: &[Patch],
    assignments: &[u32],
    groups: usize,
    bits: u8,
) -> Result<Vec<QuantParams>> {
    if assignments.len() != patches.len() {
        return Err(Error::Invariant(format!(
            "{} assignments for {} patches",
            assignments.len(),
            patches.len()
        )));
    }
    let mut ranges: Vec<Option<(f32, f32)>> = vec![None; groups];
    for (p, &g) in patches.iter().zip(assignments) {
        let slot = ranges
            .get_mut(g as usize)
            .ok_or_else(|| Error::Invariant(format!("group id {g} >= {groups}")))?;
        if let Some((lo, hi)) = min_max(&p.values) {
            *slot = Some(match *slot {
                Some((a, b)) => (a.min(lo), b.max(hi)),
                None => (lo, hi),
            });
        }
    }
    ranges
        .iter()
        .enumerate()
        .map(|(g, r)| {
            let (lo, hi) = r.ok_or_else(|| Error::Invariant(format!("group {g} is empty")))?;
            calibrate_range(lo, hi, bits)
        })
        .collect()
}

/// Quantizes every patch with its group's shared parameters.
pub fn quantize_grouped(patches: &[Patch], model: &GroupModel) -> GroupedValues {
    let groups = model.group_count();
    let mut out = GroupedValues {
        values: vec![Vec::new(); groups],
        symbols: vec![Vec::new(); groups],
    };
    for (i, p) in patches.iter().enumerate() {
        let g = model.assignments[i] as usize;
        let params = &model.params[g];
        out.values[g].extend_from_slice(&p.values);
        out.symbols[g].extend(p.values.iter().map(|&v| params.quantize_value(v)));
    }
    out
}

/// Groups patches by their quantization parameters.
pub fn build_group_model(
    patches: &[Patch],
    bits: u8,
    groups: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<GroupModel> {
    let raw: Vec<Point> = patch_params(patches, bits)?
        .iter()
        .map(|q| [q.scale as f64, q.zero_point as f64])
        .collect();
    let clustering = kmeans_group(&raw, groups, seed, config)?;
    let params = recalibrate_groups(patches, &clustering.assignments, groups, bits)?;
    Ok(GroupModel {
        assignments: clustering.assignments.clone(),
        params,
        clustering: Some(clustering),
    })
}

/// Full grouped quantization of a bundle.
pub fn gaq_quantize(
    bundle: &DatasetBundle,
    geom: &PatchGeometry,
    bits: u8,
    groups: usize,
    seed: u64,
) -> Result<(GroupModel, GroupedValues)> {
    gaq_quantize_with(bundle, geom, bits, groups, seed, &KMeansConfig::default())
}

pub fn gaq_quantize_with(
    bundle: &DatasetBundle,
    geom: &PatchGeometry,
    bits: u8,
    groups: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<(GroupModel, GroupedValues)> {
    let patches = split_bundle(bundle, geom)?;
    let model = build_group_model(&patches, bits, groups, seed, config)?;
    let grouped = quantize_grouped(&patches, &model);
    Ok((model, grouped))
}

/// Number of values each group holds, given the patch tiling.
pub fn group_lengths(
    assignments: &[u32],
    groups: usize,
    geom: &PatchGeometry,
    dims: (usize, usize, usize),
) -> Result<Vec<usize>> {
    let (h, w, c) = dims;
    let regions = geom.regions(h, w);
    let mut lengths = vec![0usize; groups];
    for (i, &g) in assignments.iter().enumerate() {
        let slot = lengths
            .get_mut(g as usize)
            .ok_or_else(|| Error::Corrupt(format!("group index {g} >= {groups}")))?;
        *slot += regions[i % regions.len()].area() * c;
    }
    Ok(lengths)
}

/// Splits a flat symbol stream (group order) into per-group sequences.
pub fn split_group_stream(symbols: &[u8], lengths: &[usize]) -> Result<Vec<Vec<u8>>> {
    let total: usize = lengths.iter().sum();
    if total != symbols.len() {
        return Err(Error::Corrupt(format!(
            "{} symbols for groups holding {total}",
            symbols.len()
        )));
    }
    let mut rest = symbols;
    Ok(lengths
        .iter()
        .map(|&n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        })
        .collect())
}

/// Rebuilds images from per-group symbols.
pub fn gaq_dequantize(
    assignments: &[u32],
    params: &[QuantParams],
    symbols: &[Vec<u8>],
    geom: &PatchGeometry,
    dims: (usize, usize, usize),
    labels: &[u32],
) -> Result<DatasetBundle> {
    let (h, w, c) = dims;
    geom.validate(h, w)?;
    let regions = geom.regions(h, w);
    let per_image = regions.len();
    let m = labels.len();
    if assignments.len() != per_image * m {
        return Err(Error::Corrupt(format!(
            "{} group indices for {m} images of {per_image} patches",
            assignments.len()
        )));
    }
    if symbols.len() != params.len() {
        return Err(Error::Corrupt(format!(
            "{} symbol groups for {} parameter sets",
            symbols.len(),
            params.len()
        )));
    }
    let lengths = group_lengths(assignments, params.len(), geom, dims)?;
    if let Some(g) = (0..params.len()).find(|&g| lengths[g] != symbols[g].len()) {
        return Err(Error::Corrupt(format!(
            "group {g} holds {} symbols, tiling needs {}",
            symbols[g].len(),
            lengths[g]
        )));
    }
    let mut cursors = vec![0usize; params.len()];
    let mut images = Vec::with_capacity(m);
    let mut buf = Vec::new();
    for img in 0..m {
        let mut values = vec![0.0f32; h * w * c];
        for (k, region) in regions.iter().enumerate() {
            let g = assignments[img * per_image + k] as usize;
            let n = region.area() * c;
            let q = &params[g];
            buf.clear();
            buf.extend(
                symbols[g][cursors[g]..cursors[g] + n]
                    .iter()
                    .map(|&s| q.dequantize_symbol(s)),
            );
            cursors[g] += n;
            scatter_region(&mut values, w, c, region, &buf);
        }
        images.push(ImageTensor::new(h, w, c, values)?);
    }
    DatasetBundle::new(images, labels.to_vec())
}

/// Quantize-dequantize of a bundle through a fixed group model.
pub fn fake_quantize_grouped(
    bundle: &DatasetBundle,
    geom: &PatchGeometry,
    model: &GroupModel,
) -> Result<DatasetBundle> {
    let patches = split_bundle(bundle, geom)?;
    let grouped = quantize_grouped(&patches, model);
    gaq_dequantize(
        &model.assignments,
        &model.params,
        &grouped.symbols,
        geom,
        bundle.dims(),
        bundle.labels(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{dequantize, quantize, quantize_patches};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bundle(m: usize, seed: u64) -> DatasetBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..m)
            .map(|_| {
                let offset: f32 = rng.random_range(-1.0..1.0);
                let values = (0..8 * 8 * 3)
                    .map(|i| offset + (i as f32 * 0.05).sin() * rng.random::<f32>())
                    .collect();
                ImageTensor::new(8, 8, 3, values).unwrap()
            })
            .collect();
        DatasetBundle::new(images, (0..m as u32).collect()).unwrap()
    }

    fn decode(model: &GroupModel, grouped: &GroupedValues, geom: &PatchGeometry, b: &DatasetBundle) -> DatasetBundle {
        gaq_dequantize(&model.assignments, &model.params, &grouped.symbols, geom, b.dims(), b.labels()).unwrap()
    }

    #[test]
    fn recalibration_uses_union_of_member_ranges() {
        let make = |values: Vec<f32>, idx| Patch {
            origin_row: 0,
            origin_col: 0,
            extent_rows: 1,
            extent_cols: values.len(),
            channels: 1,
            values,
            image_index: 0,
            patch_index: idx,
        };
        let patches = vec![make(vec![0.0, 0.25, 0.5], 0), make(vec![0.5, 0.75, 1.0], 1)];
        let params = recalibrate_groups(&patches, &[0, 0], 1, 2).unwrap();
        assert_eq!(params[0], calibrate(&[0.0, 1.0], 2).unwrap());
        assert!(matches!(
            recalibrate_groups(&patches, &[0, 0], 2, 2),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn singleton_groups_match_patch_quantization() {
        let bundle = random_bundle(3, 1);
        let geom = PatchGeometry::new(3, 3);
        let p = bundle.patches_per_image(&geom) * bundle.len();
        let (model, grouped) = gaq_quantize(&bundle, &geom, 2, p, 5).unwrap();
        let patches = split_bundle(&bundle, &geom).unwrap();
        for (i, patch) in patches.iter().enumerate() {
            assert_eq!(*model.params_for(i), calibrate(&patch.values, 2).unwrap());
        }
        let decoded = decode(&model, &grouped, &geom, &bundle);
        for (img, dec) in bundle.images().iter().zip(decoded.images()) {
            let blocks = quantize_patches(img, &geom, 2).unwrap();
            let expect: Vec<f32> = {
                let (h, w, c) = img.dims();
                let mut out = vec![0.0; h * w * c];
                for (r, b) in geom.regions(h, w).iter().zip(&blocks) {
                    scatter_region(&mut out, w, c, r, &dequantize(b));
                }
                out
            };
            assert_eq!(dec.values(), &expect[..]);
        }
    }

    #[test]
    fn single_group_matches_dataset_wide_calibration() {
        let bundle = random_bundle(4, 2);
        let geom = PatchGeometry::new(5, 5);
        let (model, grouped) = gaq_quantize(&bundle, &geom, 3, 1, 0).unwrap();
        let all: Vec<f32> = bundle.images().iter().flat_map(|i| i.values().to_vec()).collect();
        let params = calibrate(&all, 3).unwrap();
        assert_eq!(model.params, vec![params]);
        let decoded = decode(&model, &grouped, &geom, &bundle);
        for (img, dec) in bundle.images().iter().zip(decoded.images()) {
            assert_eq!(dec.values(), &dequantize(&quantize(img.values(), &params))[..]);
        }
    }

    #[test]
    fn separated_images_form_separate_groups() {
        // every 5x5 patch of image A spans [0, 0.1], of image B [0.9, 1.0]
        let make = |lo: f32| {
            let values = (0..10 * 10)
                .map(|i| {
                    let (r, c) = (i / 10 % 5, i % 10 % 5);
                    lo + 0.1 * ((r * 5 + c) as f32 / 24.0)
                })
                .collect();
            ImageTensor::new(10, 10, 1, values).unwrap()
        };
        let bundle = DatasetBundle::new(vec![make(0.0), make(0.9)], vec![0, 1]).unwrap();
        let geom = PatchGeometry::new(5, 5);
        let (model, _) = gaq_quantize(&bundle, &geom, 2, 2, 9).unwrap();
        let clustering = model.clustering.as_ref().unwrap();
        let raw: Vec<Point> = patch_params(&split_bundle(&bundle, &geom).unwrap(), 2)
            .unwrap()
            .iter()
            .map(|q| clustering.normalization.apply([q.scale as f64, q.zero_point as f64]))
            .collect();
        let (opt, _) = kmeans::tests::brute_force_optimum(&raw, 2);
        assert!((clustering.objective - opt).abs() <= 1e-12);
        let (first, second) = model.assignments.split_at(4);
        assert!(first.iter().all(|&g| g == first[0]));
        assert!(second.iter().all(|&g| g == second[0]));
        assert_ne!(first[0], second[0]);
        for p in &model.params {
            assert!((p.scale as f64) < 0.1 / 3.0 + 1e-6);
        }
    }

    #[test]
    fn round_trip_error_within_group_scale() {
        let bundle = random_bundle(5, 3);
        let geom = PatchGeometry::new(5, 5);
        for groups in [1, 2, 7, 20] {
            let (model, grouped) = gaq_quantize(&bundle, &geom, 2, groups, 1).unwrap();
            assert_eq!(grouped.total_len(), 5 * 8 * 8 * 3);
            let decoded = decode(&model, &grouped, &geom, &bundle);
            let patches = split_bundle(&bundle, &geom).unwrap();
            let dec_patches = split_bundle(&decoded, &geom).unwrap();
            for (i, (p, d)) in patches.iter().zip(&dec_patches).enumerate() {
                let scale = model.params_for(i).scale as f64;
                for (v, r) in p.values.iter().zip(&d.values) {
                    assert!((*v as f64 - *r as f64).abs() <= scale);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_corruption() {
        let bundle = random_bundle(2, 6);
        let geom = PatchGeometry::new(4, 4);
        let (model, mut grouped) = gaq_quantize(&bundle, &geom, 2, 3, 1).unwrap();
        grouped.symbols[0].pop();
        let err = gaq_dequantize(&model.assignments, &model.params, &grouped.symbols, &geom, bundle.dims(), bundle.labels());
        assert!(matches!(err, Err(Error::Corrupt(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let bundle = random_bundle(4, 8);
        let geom = PatchGeometry::new(3, 3);
        let a = gaq_quantize(&bundle, &geom, 2, 6, 77).unwrap();
        let b = gaq_quantize(&bundle, &geom, 2, 6, 77).unwrap();
        assert_eq!(a, b);
    }
}
