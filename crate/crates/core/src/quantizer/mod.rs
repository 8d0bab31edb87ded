//! Asymmetric (scale / zero-point) quantization.
//!
//! Values are mapped to `b`-bit symbols in `[0, 2^b - 1]` with
//!
//! ```text
//! scale = (max - min) / (2^b - 1)
//! zero  = round(-min / scale)
//! q     = clamp(round(v / scale + zero), 0, 2^b - 1)
//! v'    = (q - zero) * scale
//! ```
//!
//! `round` is round-half-away-from-zero. Intermediate arithmetic is carried
//! out in binary64. The zero-point is derived from the binary64 scale; the
//! scale is then stored as binary32 and quantization and dequantization use
//! the stored value, so parameters read back from disk reproduce the symbols
//! exactly.
//!
//! The zero-point is not clamped to the symbol range: a patch whose values
//! are all positive would otherwise collapse onto the top symbol. Instead the
//! scale is floored at `max(|min|, |max|) / ZERO_POINT_LIMIT`, which keeps the
//! zero-point storable as int16 and keeps the scale monotone under range
//! containment.

mod median_cut;

pub use median_cut::{median_cut_quantize, MedianCut};

use crate::error::{Error, Result};
use crate::tensor::{split_patches, ImageTensor, PatchGeometry};

/// Smallest admissible scale; guards the zero-range case.
pub const SCALE_EPSILON: f32 = 1e-8;

/// Largest zero-point magnitude produced by calibration.
pub const ZERO_POINT_LIMIT: i32 = 32_000;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

pub fn check_bitwidth(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::BitWidth(bits))
    }
}

#[inline]
pub fn qmax(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Scale, zero-point and bit width of one quantization mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub bitwidth: u8,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32, bitwidth: u8) -> Result<Self> {
        check_bitwidth(bitwidth)?;
        if !(scale.is_finite() && scale >= SCALE_EPSILON) {
            return Err(Error::Calibration(format!("invalid scale {scale}")));
        }
        if i16::try_from(zero_point).is_err() {
            return Err(Error::Calibration(format!(
                "zero-point {zero_point} outside int16"
            )));
        }
        Ok(Self {
            scale,
            zero_point,
            bitwidth,
        })
    }

    pub fn qmax(&self) -> u32 {
        qmax(self.bitwidth)
    }

    /// `v / scale + zero` before rounding.
    #[inline]
    pub fn scaled(&self, v: f32) -> f64 {
        v as f64 / self.scale as f64 + self.zero_point as f64
    }

    #[inline]
    pub fn quantize_value(&self, v: f32) -> u8 {
        let q = self.scaled(v).round();
        q.clamp(0.0, self.qmax() as f64) as u8
    }

    #[inline]
    pub fn dequantize_symbol(&self, symbol: u8) -> f32 {
        ((symbol as i32 - self.zero_point) as f64 * self.scale as f64) as f32
    }

    /// Whether `v` lands inside the symbol range before clamping.
    #[inline]
    pub fn in_range(&self, v: f32) -> bool {
        let q = self.scaled(v).round();
        q >= 0.0 && q <= self.qmax() as f64
    }

    pub fn fake_quantize(&self, v: f32) -> f32 {
        self.dequantize_symbol(self.quantize_value(v))
    }
}

/// Derives parameters from an observed value range.
pub fn calibrate_range(min: f32, max: f32, bits: u8) -> Result<QuantParams> {
    check_bitwidth(bits)?;
    if !(min.is_finite() && max.is_finite()) || min > max {
        return Err(Error::Calibration(format!("invalid range [{min}, {max}]")));
    }
    let min64 = min as f64;
    let scale = ((max as f64 - min64) / qmax(bits) as f64)
        .max(SCALE_EPSILON as f64)
        .max(min64.abs().max((max as f64).abs()) / ZERO_POINT_LIMIT as f64);
    let zero = (-min64 / scale)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i32;
    QuantParams::new((scale as f32).max(SCALE_EPSILON), zero, bits)
}

pub fn min_max(values: &[f32]) -> Option<(f32, f32)> {
    let mut it = values.iter().copied();
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
}

/// Exact min/max calibration over `values`.
pub fn calibrate(values: &[f32], bits: u8) -> Result<QuantParams> {
    let (min, max) =
        min_max(values).ok_or_else(|| Error::Calibration("no values to calibrate".into()))?;
    calibrate_range(min, max, bits)
}

/// Quantized symbols together with the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolBlock {
    pub symbols: Vec<u8>,
    pub params: QuantParams,
}

impl SymbolBlock {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

pub fn quantize(values: &[f32], params: &QuantParams) -> SymbolBlock {
    SymbolBlock {
        symbols: values.iter().map(|&v| params.quantize_value(v)).collect(),
        params: *params,
    }
}

pub fn dequantize(block: &SymbolBlock) -> Vec<f32> {
    block
        .symbols
        .iter()
        .map(|&s| block.params.dequantize_symbol(s))
        .collect()
}

/// One parameter pair for the entire image.
pub fn quantize_whole_image(image: &ImageTensor, bits: u8) -> Result<SymbolBlock> {
    let params = calibrate(image.values(), bits)?;
    Ok(quantize(image.values(), &params))
}

/// Independent parameters per patch, in `split_patches` order.
pub fn quantize_patches(
    image: &ImageTensor,
    geom: &PatchGeometry,
    bits: u8,
) -> Result<Vec<SymbolBlock>> {
    split_patches(image, geom)?
        .iter()
        .map(|p| {
            let params = calibrate(&p.values, bits)?;
            Ok(quantize(&p.values, &params))
        })
        .collect()
}

/// Quantize-dequantize of a whole image with per-patch parameters.
pub fn fake_quantize_patches(
    image: &ImageTensor,
    geom: &PatchGeometry,
    bits: u8,
) -> Result<ImageTensor> {
    let blocks = quantize_patches(image, geom, bits)?;
    let (h, w, c) = image.dims();
    let mut out = vec![0.0f32; h * w * c];
    for (region, block) in geom.regions(h, w).iter().zip(&blocks) {
        crate::tensor::scatter_region(&mut out, w, c, region, &dequantize(block));
    }
    ImageTensor::new(h, w, c, out)
}

/// Quantize-dequantize of a whole image with a single parameter pair.
pub fn fake_quantize_whole(image: &ImageTensor, bits: u8) -> Result<ImageTensor> {
    let block = quantize_whole_image(image, bits)?;
    let (h, w, c) = image.dims();
    ImageTensor::new(h, w, c, dequantize(&block))
}
