//! Image tensors, patch tiling and dataset bundles.
//!
//! Values are stored row-major with channels fastest: the value at
//! `(row, col, ch)` lives at `(row * width + col) * channels + ch`.

mod io;

pub use io::{decode_tensor_file, encode_tensor_file, load_tensor_file, save_tensor_file};

use crate::error::{Error, Result};

/// An `H×W×C` image of finite binary32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidTensor(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::InvalidTensor("dimension overflow".into()))?;
        if values.len() != expected {
            return Err(Error::InvalidTensor(format!(
                "expected {expected} values for {height}x{width}x{channels}, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.values[self.index(row, col, ch)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgePolicy {
    /// Trailing patches shrink to whatever remains of the image.
    #[default]
    Ragged,
}

/// Non-overlapping patch size used to tile images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub patch_height: usize,
    pub patch_width: usize,
    pub edge_policy: EdgePolicy,
}

impl PatchGeometry {
    pub fn new(patch_height: usize, patch_width: usize) -> Self {
        Self {
            patch_height,
            patch_width,
            edge_policy: EdgePolicy::Ragged,
        }
    }

    /// A single patch covering the whole image.
    pub fn whole(height: usize, width: usize) -> Self {
        Self::new(height, width)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.patch_height == 0
            || self.patch_width == 0
            || self.patch_height > height
            || self.patch_width > width
        {
            return Err(Error::InvalidGeometry {
                patch_height: self.patch_height,
                patch_width: self.patch_width,
                height,
                width,
            });
        }
        Ok(())
    }

    pub fn grid(&self, height: usize, width: usize) -> (usize, usize) {
        (
            height.div_ceil(self.patch_height),
            width.div_ceil(self.patch_width),
        )
    }

    /// Patches per image, `P = ceil(H/h) * ceil(W/w)`.
    pub fn patch_count(&self, height: usize, width: usize) -> usize {
        let (rows, cols) = self.grid(height, width);
        rows * cols
    }

    /// Origin and extent of every patch, row-major by origin.
    pub fn regions(&self, height: usize, width: usize) -> Vec<PatchRegion> {
        let mut out = Vec::with_capacity(self.patch_count(height, width));
        for origin_row in (0..height).step_by(self.patch_height) {
            for origin_col in (0..width).step_by(self.patch_width) {
                out.push(PatchRegion {
                    origin_row,
                    origin_col,
                    extent_rows: self.patch_height.min(height - origin_row),
                    extent_cols: self.patch_width.min(width - origin_col),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRegion {
    pub origin_row: usize,
    pub origin_col: usize,
    pub extent_rows: usize,
    pub extent_cols: usize,
}

impl PatchRegion {
    pub fn area(&self) -> usize {
        self.extent_rows * self.extent_cols
    }
}

/// A rectangular block of an image spanning all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin_row: usize,
    pub origin_col: usize,
    pub extent_rows: usize,
    pub extent_cols: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub image_index: usize,
    pub patch_index: usize,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Copies the values of `region` out of `image`, row-major then channel.
pub(crate) fn gather_region(image: &ImageTensor, region: &PatchRegion, out: &mut Vec<f32>) {
    let c = image.channels;
    for r in region.origin_row..region.origin_row + region.extent_rows {
        let start = image.index(r, region.origin_col, 0);
        out.extend_from_slice(&image.values[start..start + region.extent_cols * c]);
    }
}

pub(crate) fn scatter_region(
    values: &mut [f32],
    width: usize,
    channels: usize,
    region: &PatchRegion,
    src: &[f32],
) {
    let row_len = region.extent_cols * channels;
    for (i, r) in (region.origin_row..region.origin_row + region.extent_rows).enumerate() {
        let start = (r * width + region.origin_col) * channels;
        values[start..start + row_len].copy_from_slice(&src[i * row_len..(i + 1) * row_len]);
    }
}

/// Splits `image` into non-overlapping patches ordered row-major by origin.
pub fn split_patches(image: &ImageTensor, geom: &PatchGeometry) -> Result<Vec<Patch>> {
    geom.validate(image.height, image.width)?;
    let patches = geom
        .regions(image.height, image.width)
        .into_iter()
        .enumerate()
        .map(|(patch_index, region)| {
            let mut values = Vec::with_capacity(region.area() * image.channels);
            gather_region(image, &region, &mut values);
            Patch {
                origin_row: region.origin_row,
                origin_col: region.origin_col,
                extent_rows: region.extent_rows,
                extent_cols: region.extent_cols,
                channels: image.channels,
                values,
                image_index: 0,
                patch_index,
            }
        })
        .collect();
    Ok(patches)
}

/// Splits every image of a bundle, in bundle order. The position of a patch
/// in the returned vector is its global patch index.
pub fn split_bundle(bundle: &DatasetBundle, geom: &PatchGeometry) -> Result<Vec<Patch>> {
    let mut all = Vec::with_capacity(bundle.len() * bundle.patches_per_image(geom));
    for (image_index, image) in bundle.images().iter().enumerate() {
        all.extend(split_patches(image, geom)?.into_iter().map(|mut p| {
            p.image_index = image_index;
            p
        }));
    }
    Ok(all)
}

/// Reassembles an image from patches that tile it exactly once.
pub fn merge_patches(
    patches: &[Patch],
    height: usize,
    width: usize,
    channels: usize,
) -> Result<ImageTensor> {
    let mut values = vec![0.0f32; height * width * channels];
    let mut covered = vec![false; height * width];
    for p in patches {
        if p.channels != channels {
            return Err(Error::Tiling(format!(
                "patch {} has {} channels, image has {channels}",
                p.patch_index, p.channels
            )));
        }
        if p.extent_rows == 0
            || p.extent_cols == 0
            || p.origin_row + p.extent_rows > height
            || p.origin_col + p.extent_cols > width
        {
            return Err(Error::Tiling(format!(
                "patch {} at ({}, {}) extent {}x{} exceeds {height}x{width}",
                p.patch_index, p.origin_row, p.origin_col, p.extent_rows, p.extent_cols
            )));
        }
        if p.values.len() != p.extent_rows * p.extent_cols * channels {
            return Err(Error::Tiling(format!(
                "patch {} carries {} values",
                p.patch_index,
                p.values.len()
            )));
        }
        for r in p.origin_row..p.origin_row + p.extent_rows {
            for c in p.origin_col..p.origin_col + p.extent_cols {
                let cell = &mut covered[r * width + c];
                if *cell {
                    return Err(Error::Tiling(format!("pixel ({r}, {c}) covered twice")));
                }
                *cell = true;
            }
        }
        let region = PatchRegion {
            origin_row: p.origin_row,
            origin_col: p.origin_col,
            extent_rows: p.extent_rows,
            extent_cols: p.extent_cols,
        };
        scatter_region(&mut values, width, channels, &region, &p.values);
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(Error::Tiling(format!(
            "pixel ({}, {}) not covered",
            i / width,
            i % width
        )));
    }
    ImageTensor::new(height, width, channels, values)
}

/// Images sharing one shape, each with a hard integer label.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    images: Vec<ImageTensor>,
    labels: Vec<u32>,
}

impl DatasetBundle {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<u32>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidTensor("bundle has no images".into()))?;
        let dims = first.dims();
        if let Some(i) = images.iter().position(|im| im.dims() != dims) {
            return Err(Error::Shape(format!(
                "image {i} is {:?}, bundle shape is {dims:?}",
                images[i].dims()
            )));
        }
        if labels.len() != images.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W, C)` shared by all images.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.images[0].dims()
    }

    pub fn values_per_image(&self) -> usize {
        let (h, w, c) = self.dims();
        h * w * c
    }

    pub fn patches_per_image(&self, geom: &PatchGeometry) -> usize {
        let (h, w, _) = self.dims();
        geom.patch_count(h, w)
    }

    /// The first `count` images and labels.
    pub fn prefix(&self, count: usize) -> Result<Self> {
        Self::new(
            self.images[..count.min(self.len())].to_vec(),
            self.labels[..count.min(self.len())].to_vec(),
        )
    }

    pub fn into_parts(self) -> (Vec<ImageTensor>, Vec<u32>) {
        (self.images, self.labels)
    }
}
