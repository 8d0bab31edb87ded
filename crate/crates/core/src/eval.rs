//! Distortion metrics, sweeps and component ablations.
//!
//! Every reconstruction except Median Cut goes through a real archive, so
//! the storage columns are the exact archive sizes. Median Cut has no archive
//! format; its row charges `32·C` bits per palette entry as parameters and a
//! byte-padded `b`-bit index per pixel as payload.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::container::{
    solve_group_count, Archive, BudgetSpec, EntropyMode, SolverConfig, StorageBreakdown,
};
use crate::error::{Error, Result};
use crate::grouping::{build_group_model, patch_params, GroupModel, KMeansConfig};
use crate::quantizer::median_cut_quantize;
use crate::refine::{refine_images, FeatureNet, FeatureNetSpec, QuantProvider, RefineConfig};
use crate::tensor::{split_bundle, DatasetBundle, PatchGeometry};

pub const CSV_HEADER: &str =
    "method,bits,groups,pixel_mse,feature_mse,size_indices_bits,size_params_bits,size_payload_bits,total_bits";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDistortion {
    pub pixel_mse: f64,
    pub feature_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionReport {
    /// Mean squared error over every value.
    pub pixel_mse: f64,
    /// Mean over images of the squared feature distance.
    pub feature_mse: f64,
    pub per_image: Vec<ImageDistortion>,
}

/// Feature network plus cached features of a reference bundle.
pub struct Evaluator {
    net: FeatureNet,
    original: DatasetBundle,
    features: Vec<Vec<f64>>,
}

impl Evaluator {
    pub fn new(original: &DatasetBundle, spec: &FeatureNetSpec) -> Result<Self> {
        let net = FeatureNet::new(*spec)?;
        let features = original
            .images()
            .par_iter()
            .map(|img| net.features(img))
            .collect::<Result<_>>()?;
        Ok(Self {
            net,
            original: original.clone(),
            features,
        })
    }

    pub fn original(&self) -> &DatasetBundle {
        &self.original
    }

    /// Distortion of `reconstructed` against the first images of the
    /// reference bundle.
    pub fn measure(&self, reconstructed: &DatasetBundle) -> Result<DistortionReport> {
        let n = reconstructed.len();
        if n > self.original.len() || reconstructed.dims() != self.original.dims() {
            return Err(Error::Shape(format!(
                "{n} images of {:?} against {} of {:?}",
                reconstructed.dims(),
                self.original.len(),
                self.original.dims()
            )));
        }
        let per_image: Vec<ImageDistortion> = reconstructed
            .images()
            .par_iter()
            .zip(&self.original.images()[..n])
            .zip(&self.features[..n])
            .map(|((rec, orig), f)| {
                let sq: f64 = orig
                    .values()
                    .iter()
                    .zip(rec.values())
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum();
                let g = self.net.features(rec)?;
                Ok(ImageDistortion {
                    pixel_mse: sq / orig.values().len() as f64,
                    feature_mse: crate::refine::net::squared_distance(f, &g),
                })
            })
            .collect::<Result<_>>()?;
        let pixel_mse = per_image.iter().map(|d| d.pixel_mse).sum::<f64>() / n as f64;
        let feature_mse = per_image.iter().map(|d| d.feature_mse).sum::<f64>() / n as f64;
        Ok(DistortionReport {
            pixel_mse,
            feature_mse,
            per_image,
        })
    }
}

pub fn measure_distortion(
    original: &DatasetBundle,
    reconstructed: &DatasetBundle,
    spec: &FeatureNetSpec,
) -> Result<DistortionReport> {
    if original.len() != reconstructed.len() {
        return Err(Error::Shape(format!(
            "{} original images, {} reconstructed",
            original.len(),
            reconstructed.len()
        )));
    }
    Evaluator::new(original, spec)?.measure(reconstructed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    WholeAq,
    MedianCut,
    Paq,
    Gaq,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::WholeAq, Method::MedianCut, Method::Paq, Method::Gaq];

    pub fn name(self) -> &'static str {
        match self {
            Method::WholeAq => "whole_aq",
            Method::MedianCut => "median_cut",
            Method::Paq => "paq",
            Method::Gaq => "gaq",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Every patch in its own group.
pub fn singleton_model(bundle: &DatasetBundle, geom: &PatchGeometry, bits: u8) -> Result<GroupModel> {
    let patches = split_bundle(bundle, geom)?;
    Ok(GroupModel {
        assignments: (0..patches.len() as u32).collect(),
        params: patch_params(&patches, bits)?,
        clustering: None,
    })
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub bundle: DatasetBundle,
    pub groups: usize,
    pub storage: StorageBreakdown,
}

fn via_archive(
    bundle: &DatasetBundle,
    geom: &PatchGeometry,
    bits: u8,
    model: &GroupModel,
    mode: EntropyMode,
) -> Result<Reconstruction> {
    let archive = Archive::from_model(bundle, geom, bits, model, mode)?;
    Ok(Reconstruction {
        bundle: archive.decode()?,
        groups: archive.group_count(),
        storage: archive.storage(),
    })
}

pub fn reconstruct(
    bundle: &DatasetBundle,
    method: Method,
    bits: u8,
    geom: &PatchGeometry,
    groups: usize,
    seed: u64,
) -> Result<Reconstruction> {
    let (h, w, c) = bundle.dims();
    match method {
        Method::WholeAq => {
            let whole = PatchGeometry::whole(h, w);
            via_archive(bundle, &whole, bits, &singleton_model(bundle, &whole, bits)?, EntropyMode::On)
        }
        Method::Paq => via_archive(bundle, geom, bits, &singleton_model(bundle, geom, bits)?, EntropyMode::On),
        Method::Gaq => {
            let patches = split_bundle(bundle, geom)?;
            let model = build_group_model(&patches, bits, groups, seed, &KMeansConfig::default())?;
            via_archive(bundle, geom, bits, &model, EntropyMode::On)
        }
        Method::MedianCut => {
            let mut images = Vec::with_capacity(bundle.len());
            let mut params = 0u64;
            for img in bundle.images() {
                let mc = median_cut_quantize(img, bits)?;
                params += (mc.palette.len() * c) as u64 * 32;
                images.push(mc.reconstruct(h, w)?);
            }
            let payload = bundle.len() as u64 * 8 * ((h * w) as u64 * bits as u64).div_ceil(8);
            Ok(Reconstruction {
                bundle: DatasetBundle::new(images, bundle.labels().to_vec())?,
                groups: 0,
                storage: StorageBreakdown {
                    size_indices: 0,
                    size_params: params,
                    size_payload: payload,
                    size_header: 0,
                    total: params + payload,
                },
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub bits: u8,
    pub groups: usize,
    pub pixel_mse: f64,
    pub feature_mse: f64,
    pub storage: StorageBreakdown,
}

impl SweepRow {
    fn new(method: &str, bits: u8, rec: &Reconstruction, d: &DistortionReport) -> Self {
        Self {
            method: method.to_string(),
            bits,
            groups: rec.groups,
            pixel_mse: d.pixel_mse,
            feature_mse: d.feature_mse,
            storage: rec.storage,
        }
    }

    pub fn csv_line(&self) -> String {
        let s = &self.storage;
        format!(
            "{},{},{},{:.16e},{:.16e},{},{},{},{}",
            self.method,
            self.bits,
            self.groups,
            self.pixel_mse,
            self.feature_mse,
            s.size_indices,
            s.size_params,
            s.size_payload,
            s.total
        )
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// One row per (method, bit width), method-major in the given order.
pub fn sweep_bitwidth(
    bundle: &DatasetBundle,
    methods: &[Method],
    bits: &[u8],
    geom: &PatchGeometry,
    groups: usize,
    seed: u64,
    spec: &FeatureNetSpec,
) -> Result<Vec<SweepRow>> {
    let eval = Evaluator::new(bundle, spec)?;
    let mut rows = Vec::with_capacity(methods.len() * bits.len());
    for &method in methods {
        for &b in bits {
            let rec = reconstruct(bundle, method, b, geom, groups, seed)?;
            rows.push(SweepRow::new(method.name(), b, &rec, &eval.measure(&rec.bundle)?));
        }
    }
    Ok(rows)
}

/// One GAQ row per group count, in the given order.
pub fn sweep_groups(
    bundle: &DatasetBundle,
    geom: &PatchGeometry,
    bits: u8,
    groups: &[usize],
    seed: u64,
    spec: &FeatureNetSpec,
) -> Result<Vec<SweepRow>> {
    let eval = Evaluator::new(bundle, spec)?;
    groups
        .iter()
        .map(|&g| {
            let rec = reconstruct(bundle, Method::Gaq, bits, geom, g, seed)?;
            Ok(SweepRow::new(Method::Gaq.name(), bits, &rec, &eval.measure(&rec.bundle)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationToggles {
    pub gaq: bool,
    pub refine: bool,
    pub entropy: bool,
}

impl AblationToggles {
    /// Whole-image AQ, then grouping, refinement and entropy coding added in
    /// turn.
    pub const TABLE: [AblationToggles; 4] = [
        AblationToggles { gaq: false, refine: false, entropy: false },
        AblationToggles { gaq: true, refine: false, entropy: false },
        AblationToggles { gaq: true, refine: true, entropy: false },
        AblationToggles { gaq: true, refine: true, entropy: true },
    ];

    pub fn label(&self) -> String {
        let mut parts = vec![if self.gaq { "gaq" } else { "aq" }];
        if self.refine {
            parts.push("refine");
        }
        if self.entropy {
            parts.push("ec");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub geom: PatchGeometry,
    pub bits: u8,
    pub budget: BudgetSpec,
    pub seed: u64,
    pub spec: FeatureNetSpec,
    /// Optimizer settings when refinement is on; the provider is replaced.
    pub refine: RefineConfig,
    pub kmeans: KMeansConfig,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub toggles: AblationToggles,
    /// Largest prefix of the bundle that fits the budget.
    pub images_fit: usize,
    pub groups: usize,
    pub distortion: DistortionReport,
    pub storage: StorageBreakdown,
}

impl AblationReport {
    pub fn csv_line(&self, bits: u8) -> String {
        let row = SweepRow {
            method: self.toggles.label(),
            bits,
            groups: self.groups,
            pixel_mse: self.distortion.pixel_mse,
            feature_mse: self.distortion.feature_mse,
            storage: self.storage,
        };
        format!("{},{}", row.csv_line(), self.images_fit)
    }
}

pub const ABLATION_CSV_HEADER: &str =
    "method,bits,groups,pixel_mse,feature_mse,size_indices_bits,size_params_bits,size_payload_bits,total_bits,images";

/// Pipeline with a fixed set of components, evaluated on bundle prefixes.
pub struct Ablation<'a> {
    toggles: AblationToggles,
    config: &'a AblationConfig,
    source: DatasetBundle,
    eval: Evaluator,
}

impl<'a> Ablation<'a> {
    /// Refinement, when on, runs once over the whole bundle; it works image
    /// by image, so any prefix of the result is the refined prefix.
    pub fn new(bundle: &DatasetBundle, toggles: AblationToggles, config: &'a AblationConfig) -> Result<Self> {
        let source = if toggles.refine {
            let (h, w) = (bundle.dims().0, bundle.dims().1);
            let geom = if toggles.gaq { config.geom } else { PatchGeometry::whole(h, w) };
            let cfg = RefineConfig {
                provider: QuantProvider::PerPatch(geom),
                bits: config.bits,
                ..config.refine.clone()
            };
            refine_images(bundle, &config.spec, &cfg)?.0
        } else {
            bundle.clone()
        };
        Ok(Self {
            toggles,
            config,
            source,
            eval: Evaluator::new(bundle, &config.spec)?,
        })
    }

    /// Archive of the first `images` images, or `None` if it cannot fit.
    pub fn encode(&self, images: usize) -> Result<Option<Archive>> {
        let prefix = self.source.prefix(images)?;
        let mode = if self.toggles.entropy { EntropyMode::On } else { EntropyMode::Off };
        if self.toggles.gaq {
            let solver = SolverConfig {
                entropy: mode,
                kmeans: self.config.kmeans,
            };
            match solve_group_count(&prefix, &self.config.geom, self.config.bits, &self.config.budget, self.config.seed, &solver) {
                Ok(sol) => Ok(Some(sol.archive)),
                Err(Error::InfeasibleBudget { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        } else {
            let (h, w, _) = prefix.dims();
            let whole = PatchGeometry::whole(h, w);
            let model = singleton_model(&prefix, &whole, self.config.bits)?;
            let archive = Archive::from_model(&prefix, &whole, self.config.bits, &model, mode)?;
            let fits = archive.storage().total <= self.config.budget.budget_bits(prefix.dims());
            Ok(fits.then_some(archive))
        }
    }

    /// Report for the first `images` images, if they fit.
    pub fn report_at(&self, images: usize) -> Result<Option<AblationReport>> {
        let Some(archive) = self.encode(images)? else {
            return Ok(None);
        };
        Ok(Some(AblationReport {
            toggles: self.toggles,
            images_fit: images,
            groups: archive.group_count(),
            distortion: self.eval.measure(&archive.decode()?)?,
            storage: archive.storage(),
        }))
    }

    /// Grows the prefix one image at a time until it no longer fits.
    pub fn run(&self) -> Result<AblationReport> {
        let mut best = None;
        for images in 1..=self.source.len() {
            match self.encode(images)? {
                Some(archive) => best = Some((images, archive)),
                None => break,
            }
        }
        let (images, archive) = best.ok_or_else(|| {
            let dims = self.source.dims();
            Error::InfeasibleBudget {
                budget_bits: self.config.budget.budget_bits(dims),
                required_bits: self.encode_size_hint(),
            }
        })?;
        Ok(AblationReport {
            toggles: self.toggles,
            images_fit: images,
            groups: archive.group_count(),
            distortion: self.eval.measure(&archive.decode()?)?,
            storage: archive.storage(),
        })
    }

    fn encode_size_hint(&self) -> u64 {
        let prefix = self.source.prefix(1).expect("non-empty bundle");
        let (h, w, _) = prefix.dims();
        let whole = PatchGeometry::whole(h, w);
        singleton_model(&prefix, &whole, self.config.bits)
            .and_then(|m| Archive::from_model(&prefix, &whole, self.config.bits, &m, EntropyMode::On))
            .map(|a| a.storage().total)
            .unwrap_or(u64::MAX)
    }
}

pub fn ablation_run(
    bundle: &DatasetBundle,
    toggles: AblationToggles,
    config: &AblationConfig,
) -> Result<AblationReport> {
    Ablation::new(bundle, toggles, config)?.run()
}

pub fn ablation_csv(reports: &[AblationReport], bits: u8) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_line(bits));
    }
    out
}
