//! Quantization-aware image refinement.
//!
//! Each image `x` is replaced by a finetuned `x_ft` that minimizes
//! `||f(x) - f(fake_quant(x_ft))||^2`, where `f` is the fixed feature network
//! and `fake_quant` is quantize-then-dequantize. Rounding is bypassed with a
//! straight-through estimator: the gradient passes unchanged where the
//! rounded value lies inside `[0, 2^b - 1]` and is zero where it was clamped.
//! Quantization parameters are constants inside a step; for per-image and
//! per-patch providers they are recalibrated from the current iterate before
//! every step. The optimizer is Adam.
//!
//! The returned image is the iterate with the lowest loss seen, so refinement
//! never makes an image worse than its starting point.

pub mod net;

use rayon::prelude::*;

pub use net::{FeatureNet, FeatureNetSpec, Trace};

use crate::error::{Error, Result};
use crate::grouping::{build_group_model, GroupModel, KMeansConfig};
use crate::quantizer::{calibrate, QuantParams};
use crate::tensor::{split_bundle, DatasetBundle, ImageTensor, PatchGeometry, PatchRegion};

pub const DEFAULT_ITERATIONS: usize = 500;
pub const DEFAULT_STEP_SIZE: f64 = 0.01;

/// Where the quantization parameters of an image come from.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantProvider {
    /// One pair calibrated on the whole image.
    PerImage,
    /// One pair calibrated on each patch.
    PerPatch(PatchGeometry),
    /// Frozen group parameters; `model.assignments` covers the whole bundle.
    PerGroup { geom: PatchGeometry, model: GroupModel },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub bits: u8,
    pub provider: QuantProvider,
}

impl RefineConfig {
    pub fn new(bits: u8, provider: QuantProvider) -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            step_size: DEFAULT_STEP_SIZE,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            bits,
            provider,
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::FeatureSpec("refinement needs at least one iteration".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::FeatureSpec(format!("invalid step size {}", self.step_size)));
        }
        crate::quantizer::check_bitwidth(self.bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    /// Loss at every evaluated iterate; entry 0 is the unrefined image.
    pub losses: Vec<f64>,
    pub best_iteration: usize,
    /// Pixel MSE of the fake-quantized image to the input, before and after.
    pub initial_pixel_mse: f64,
    pub final_pixel_mse: f64,
}

impl RefineReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        self.losses[self.best_iteration]
    }
}

/// Parameters for every region of image `index`.
pub fn region_params(
    image: &ImageTensor,
    index: usize,
    provider: &QuantProvider,
    bits: u8,
) -> Result<Vec<(PatchRegion, QuantParams)>> {
    let (h, w, _) = image.dims();
    match provider {
        QuantProvider::PerImage => {
            let whole = PatchGeometry::whole(h, w).regions(h, w);
            Ok(vec![(whole[0], calibrate(image.values(), bits)?)])
        }
        QuantProvider::PerPatch(geom) => {
            geom.validate(h, w)?;
            let mut buf = Vec::new();
            geom.regions(h, w)
                .into_iter()
                .map(|r| {
                    buf.clear();
                    crate::tensor::gather_region(image, &r, &mut buf);
                    Ok((r, calibrate(&buf, bits)?))
                })
                .collect()
        }
        QuantProvider::PerGroup { geom, model } => {
            geom.validate(h, w)?;
            let regions = geom.regions(h, w);
            let start = index * regions.len();
            let ids = model
                .assignments
                .get(start..start + regions.len())
                .ok_or_else(|| Error::Invariant(format!("no group assignments for image {index}")))?;
            regions
                .into_iter()
                .zip(ids)
                .map(|(r, &g)| {
                    let q = *model
                        .params
                        .get(g as usize)
                        .ok_or_else(|| Error::Invariant(format!("group {g} has no parameters")))?;
                    Ok((r, q))
                })
                .collect()
        }
    }
}

/// Fake-quantized values and the straight-through mask.
fn fake_quant_masked(
    values: &[f32],
    dims: (usize, usize, usize),
    params: &[(PatchRegion, QuantParams)],
) -> (Vec<f32>, Vec<bool>) {
    let (_, w, c) = dims;
    let mut out = vec![0.0f32; values.len()];
    let mut mask = vec![false; values.len()];
    for (r, q) in params {
        for row in r.origin_row..r.origin_row + r.extent_rows {
            let start = (row * w + r.origin_col) * c;
            for j in start..start + r.extent_cols * c {
                out[j] = q.fake_quantize(values[j]);
                mask[j] = q.in_range(values[j]);
            }
        }
    }
    (out, mask)
}

pub fn fake_quant(
    image: &ImageTensor,
    index: usize,
    provider: &QuantProvider,
    bits: u8,
) -> Result<ImageTensor> {
    let params = region_params(image, index, provider, bits)?;
    let (h, w, c) = image.dims();
    let (values, _) = fake_quant_masked(image.values(), image.dims(), &params);
    ImageTensor::new(h, w, c, values)
}

fn pixel_mse(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    sum / a.len() as f64
}

/// Loss of `values` against `target` features, and its straight-through
/// gradient w.r.t. `values`.
fn loss_and_gradient(
    net: &FeatureNet,
    values: &[f32],
    dims: (usize, usize, usize),
    params: &[(PatchRegion, QuantParams)],
    target: &[f64],
    want_gradient: bool,
) -> (f64, Vec<f32>, Option<Vec<f64>>) {
    let (h, w, c) = dims;
    let (deq, mask) = fake_quant_masked(values, dims, params);
    let input: Vec<f64> = deq.iter().map(|&v| v as f64).collect();
    let trace = net.forward_from(0, input, h, w);
    let loss = net::squared_distance(&trace.features, target);
    let grad = want_gradient.then(|| {
        let gf: Vec<f64> = trace
            .features
            .iter()
            .zip(target)
            .map(|(f, t)| 2.0 * (f - t))
            .collect();
        let mut g = net.input_gradient(&trace, &gf);
        for (gi, &m) in g.iter_mut().zip(&mask) {
            if !m {
                *gi = 0.0;
            }
        }
        g
    });
    debug_assert_eq!(values.len(), h * w * c);
    (loss, deq, grad)
}

/// Analytic straight-through gradient of the loss at `image`, for checks.
pub fn loss_gradient(
    net: &FeatureNet,
    image: &ImageTensor,
    index: usize,
    reference: &[f64],
    provider: &QuantProvider,
    bits: u8,
) -> Result<(f64, Vec<f64>)> {
    let params = region_params(image, index, provider, bits)?;
    let (loss, _, g) = loss_and_gradient(net, image.values(), image.dims(), &params, reference, true);
    Ok((loss, g.unwrap()))
}

/// Refines one image. `index` selects group assignments and names the image
/// in errors.
pub fn refine_image(
    net: &FeatureNet,
    image: &ImageTensor,
    index: usize,
    config: &RefineConfig,
) -> Result<(ImageTensor, RefineReport)> {
    config.validate()?;
    let dims = image.dims();
    let (h, w, c) = dims;
    if c != net.spec().input_channels {
        return Err(Error::FeatureSpec(format!(
            "image has {c} channels, network expects {}",
            net.spec().input_channels
        )));
    }
    let original = image.values();
    let target = net.features(image)?;
    let frozen = matches!(config.provider, QuantProvider::PerGroup { .. });
    let mut params = region_params(image, index, &config.provider, config.bits)?;

    let mut x: Vec<f64> = original.iter().map(|&v| v as f64).collect();
    let mut current: Vec<f32> = original.to_vec();
    let mut m = vec![0.0f64; x.len()];
    let mut v = vec![0.0f64; x.len()];
    let mut losses = Vec::with_capacity(config.iterations + 1);
    let mut best = (f64::INFINITY, 0usize, original.to_vec(), Vec::new());

    for t in 0..=config.iterations {
        if t > 0 && !frozen {
            let iterate = ImageTensor::new(h, w, c, current.clone())
                .map_err(|_| Error::Divergence { image: index })?;
            params = region_params(&iterate, index, &config.provider, config.bits)?;
        }
        let last = t == config.iterations;
        let (loss, deq, grad) = loss_and_gradient(net, &current, dims, &params, &target, !last);
        if !loss.is_finite() {
            return Err(Error::Divergence { image: index });
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, t, current.clone(), deq);
        }
        if last || loss == 0.0 {
            break;
        }
        let grad = grad.unwrap();
        let step = (t + 1) as i32;
        let c1 = 1.0 - config.beta1.powi(step);
        let c2 = 1.0 - config.beta2.powi(step);
        for j in 0..x.len() {
            let g = grad[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            x[j] -= config.step_size * (m[j] / c1) / ((v[j] / c2).sqrt() + config.epsilon);
            current[j] = x[j] as f32;
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { image: index });
        }
    }

    let (_, best_iteration, values, deq) = best;
    let (initial_deq, _) = fake_quant_masked(original, dims, &region_params(image, index, &config.provider, config.bits)?);
    let report = RefineReport {
        losses,
        best_iteration,
        initial_pixel_mse: pixel_mse(&initial_deq, original),
        final_pixel_mse: pixel_mse(&deq, original),
    };
    Ok((ImageTensor::new(h, w, c, values)?, report))
}

/// Refines every image of `bundle` independently, in parallel.
pub fn refine_images(
    bundle: &DatasetBundle,
    spec: &FeatureNetSpec,
    config: &RefineConfig,
) -> Result<(DatasetBundle, Vec<RefineReport>)> {
    config.validate()?;
    let net = FeatureNet::new(*spec)?;
    let results: Vec<(ImageTensor, RefineReport)> = bundle
        .images()
        .par_iter()
        .enumerate()
        .map(|(i, img)| refine_image(&net, img, i, config))
        .collect::<Result<_>>()?;
    let (images, reports) = results.into_iter().unzip();
    Ok((DatasetBundle::new(images, bundle.labels().to_vec())?, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineWhen {
    BeforeGrouping,
    AfterGrouping,
    Both,
}

/// Refined bundle together with the group model that quantizes it.
#[derive(Debug, Clone)]
pub struct ScheduleOutput {
    pub bundle: DatasetBundle,
    pub model: GroupModel,
    pub reports: Vec<RefineReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub when: RefineWhen,
    pub geom: PatchGeometry,
    pub bits: u8,
    pub groups: usize,
    pub seed: u64,
    /// Optimizer settings; the provider field is ignored.
    pub refine: RefineConfig,
    /// Iterations of the post-grouping pass in `Both`.
    pub post_iterations: usize,
}

/// Runs refinement before grouping (per-patch parameters), after grouping
/// (frozen group parameters) or both.
pub fn refine_schedule(
    bundle: &DatasetBundle,
    spec: &FeatureNetSpec,
    config: &ScheduleConfig,
) -> Result<ScheduleOutput> {
    let group = |b: &DatasetBundle| {
        let patches = split_bundle(b, &config.geom)?;
        build_group_model(&patches, config.bits, config.groups, config.seed, &KMeansConfig::default())
    };
    let pass = |b: &DatasetBundle, provider: QuantProvider, iterations: usize| {
        let cfg = RefineConfig {
            provider,
            iterations,
            bits: config.bits,
            ..config.refine.clone()
        };
        refine_images(b, spec, &cfg)
    };

    let mut reports = Vec::new();
    let mut current = bundle.clone();
    if matches!(config.when, RefineWhen::BeforeGrouping | RefineWhen::Both) {
        let (refined, r) = pass(
            &current,
            QuantProvider::PerPatch(config.geom),
            config.refine.iterations,
        )?;
        current = refined;
        reports = r;
    }
    let model = group(&current)?;
    let post = match config.when {
        RefineWhen::BeforeGrouping => 0,
        RefineWhen::AfterGrouping => config.refine.iterations,
        RefineWhen::Both => config.post_iterations,
    };
    if post > 0 {
        let provider = QuantProvider::PerGroup {
            geom: config.geom,
            model: model.clone(),
        };
        let (refined, r) = pass(&current, provider, post)?;
        current = refined;
        reports = r;
    }
    Ok(ScheduleOutput {
        bundle: current,
        model,
        reports,
    })
}
