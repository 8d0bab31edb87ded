//! Compressed archive format, storage accounting and the group-count solver.
//!
//! Layout (little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `DCQZ` |
//! | 4 | 2 | version (1) |
//! | 6 | 4 | image count `m` |
//! | 10 | 4 | height `H` |
//! | 14 | 4 | width `W` |
//! | 18 | 4 | channels `C` |
//! | 22 | 1 | bit width `b` |
//! | 23 | 2 | patch height |
//! | 25 | 2 | patch width |
//! | 27 | 4 | group count `G` |
//! | 31 | 1 | payload coding: 0 packed, 1 Huffman |
//! | 32 | 4m | labels, `u32` each |
//! | 32+4m | 6G | group parameters: scale `f32`, zero-point `i16` |
//! | 32+4m+6G | ceil(P·m·k / 8) | group index of every patch, `k = ceil(log2 G)` bits, MSB-first |
//! | ... | rest - 4 | symbol payload (see [`crate::entropy`]) |
//! | len-4 | 4 | CRC-32 of every preceding byte |
//!
//! `P` is the patch count per image. Patches are indexed image by image,
//! row-major within each image. The payload holds all symbols of group 0,
//! then group 1 and so on, each group in ascending patch order.

use crate::bits::{BitReader, BitWriter};
use crate::entropy::{ec_decode, ec_encode, pack_symbols, unpack_symbols, CodedPayload, PackedPayload};
use crate::error::{Error, Result};
use crate::grouping::{
    build_group_model, gaq_dequantize, quantize_grouped, split_group_stream, GroupModel, KMeansConfig,
};
use crate::quantizer::{check_bitwidth, QuantParams};
use crate::refine::{refine_images, FeatureNetSpec, QuantProvider, RefineConfig, RefineReport, RefineWhen};
use crate::tensor::{split_bundle, DatasetBundle, PatchGeometry};

pub const MAGIC: &[u8; 4] = b"DCQZ";
pub const VERSION: u16 = 1;
pub const FIXED_HEADER_LEN: usize = 32;
pub const CHECKSUM_LEN: usize = 4;
const PARAM_LEN: usize = 6;

/// Bits per stored group index.
pub fn index_bits(groups: usize) -> u32 {
    if groups <= 1 {
        0
    } else {
        usize::BITS - (groups - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coding {
    Packed = 0,
    Huffman = 1,
}

impl Coding {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Self::Packed),
            1 => Ok(Self::Huffman),
            other => Err(Error::Format(format!("unknown payload coding {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Packed(PackedPayload),
    Huffman(CodedPayload),
}

impl Payload {
    pub fn coding(&self) -> Coding {
        match self {
            Self::Packed(_) => Coding::Packed,
            Self::Huffman(_) => Coding::Huffman,
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Self::Packed(p) => p.encoded_len(),
            Self::Huffman(p) => p.encoded_len(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Self::Packed(p) => p.to_bytes(),
            Self::Huffman(p) => p.to_bytes(),
        }
    }

    fn from_bytes(coding: Coding, bytes: &[u8]) -> Result<Self> {
        Ok(match coding {
            Coding::Packed => Self::Packed(PackedPayload::from_bytes(bytes)?),
            Coding::Huffman => Self::Huffman(CodedPayload::from_bytes(bytes)?),
        })
    }

    pub fn symbols(&self) -> Result<Vec<u8>> {
        match self {
            Self::Packed(p) => unpack_symbols(p),
            Self::Huffman(p) => ec_decode(p),
        }
    }

    fn header(&self) -> (usize, u64) {
        match self {
            Self::Packed(p) => (p.alphabet_size, p.symbol_count),
            Self::Huffman(p) => (p.alphabet_size, p.symbol_count),
        }
    }
}

/// Whether symbols may be entropy coded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropyMode {
    /// Fixed-width packing only.
    Off,
    /// Huffman, unless plain packing is strictly smaller.
    #[default]
    On,
}

pub fn encode_payload(symbols: &[u8], bits: u8, mode: EntropyMode) -> Result<Payload> {
    check_bitwidth(bits)?;
    let alphabet = 1usize << bits;
    let packed = pack_symbols(symbols, alphabet)?;
    if mode == EntropyMode::Off {
        return Ok(Payload::Packed(packed));
    }
    let coded = ec_encode(symbols, alphabet)?;
    Ok(if packed.encoded_len() < coded.encoded_len() {
        Payload::Packed(packed)
    } else {
        Payload::Huffman(coded)
    })
}

/// Size of an archive split into its accounted parts, all in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageBreakdown {
    pub size_indices: u64,
    pub size_params: u64,
    pub size_payload: u64,
    /// Fixed header, labels, index padding and checksum.
    pub size_header: u64,
    pub total: u64,
}

impl StorageBreakdown {
    pub fn total_bytes(&self) -> u64 {
        self.total.div_ceil(8)
    }
}

/// Exact size of an archive with the given shape and payload length.
pub fn compute_storage(
    images: usize,
    patches_per_image: usize,
    groups: usize,
    payload_len: usize,
) -> StorageBreakdown {
    let size_indices = (patches_per_image * images) as u64 * index_bits(groups) as u64;
    let size_params = groups as u64 * (32 + 16);
    let size_payload = 8 * payload_len as u64;
    let total = 8
        * (FIXED_HEADER_LEN as u64
            + 4 * images as u64
            + PARAM_LEN as u64 * groups as u64
            + size_indices.div_ceil(8)
            + payload_len as u64
            + CHECKSUM_LEN as u64);
    StorageBreakdown {
        size_indices,
        size_params,
        size_payload,
        size_header: total - size_indices - size_params - size_payload,
        total,
    }
}

/// Everything stored in an archive.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub dims: (usize, usize, usize),
    pub bits: u8,
    pub geom: PatchGeometry,
    pub labels: Vec<u32>,
    pub assignments: Vec<u32>,
    pub params: Vec<QuantParams>,
    pub payload: Payload,
}

impl Archive {
    /// Quantizes `bundle` through `model` and encodes the symbols.
    pub fn from_model(
        bundle: &DatasetBundle,
        geom: &PatchGeometry,
        bits: u8,
        model: &GroupModel,
        mode: EntropyMode,
    ) -> Result<Self> {
        let patches = split_bundle(bundle, geom)?;
        let grouped = quantize_grouped(&patches, model);
        Ok(Self {
            dims: bundle.dims(),
            bits,
            geom: *geom,
            labels: bundle.labels().to_vec(),
            assignments: model.assignments.clone(),
            params: model.params.clone(),
            payload: encode_payload(&grouped.flat_symbols(), bits, mode)?,
        })
    }

    pub fn image_count(&self) -> usize {
        self.labels.len()
    }

    pub fn group_count(&self) -> usize {
        self.params.len()
    }

    pub fn patches_per_image(&self) -> usize {
        self.geom.patch_count(self.dims.0, self.dims.1)
    }

    pub fn storage(&self) -> StorageBreakdown {
        compute_storage(
            self.image_count(),
            self.patches_per_image(),
            self.group_count(),
            self.payload.encoded_len(),
        )
    }

    pub fn model(&self) -> GroupModel {
        GroupModel {
            assignments: self.assignments.clone(),
            params: self.params.clone(),
            clustering: None,
        }
    }

    /// Dequantized images.
    pub fn decode(&self) -> Result<DatasetBundle> {
        let symbols = self.payload.symbols()?;
        let lengths = crate::grouping::group_lengths(&self.assignments, self.group_count(), &self.geom, self.dims)?;
        let per_group = split_group_stream(&symbols, &lengths)?;
        gaq_dequantize(&self.assignments, &self.params, &per_group, &self.geom, self.dims, &self.labels)
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit u32")))
}

fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit u16")))
}

pub fn write_container(archive: &Archive) -> Result<Vec<u8>> {
    let (h, w, c) = archive.dims;
    let groups = archive.group_count();
    let m = archive.image_count();
    let p = archive.patches_per_image();
    if archive.assignments.len() != p * m {
        return Err(Error::Invariant(format!(
            "{} group indices for {m} images of {p} patches",
            archive.assignments.len()
        )));
    }
    let storage = archive.storage();
    let mut out = Vec::with_capacity(storage.total_bytes() as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (v, what) in [(m, "image count"), (h, "height"), (w, "width"), (c, "channels")] {
        out.extend_from_slice(&dim_u32(v, what)?.to_le_bytes());
    }
    out.push(archive.bits);
    out.extend_from_slice(&dim_u16(archive.geom.patch_height, "patch height")?.to_le_bytes());
    out.extend_from_slice(&dim_u16(archive.geom.patch_width, "patch width")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(groups, "group count")?.to_le_bytes());
    out.push(archive.payload.coding() as u8);
    for l in &archive.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for q in &archive.params {
        out.extend_from_slice(&q.scale.to_le_bytes());
        let z = i16::try_from(q.zero_point)
            .map_err(|_| Error::Format(format!("zero-point {} does not fit i16", q.zero_point)))?;
        out.extend_from_slice(&z.to_le_bytes());
    }
    let k = index_bits(groups);
    let mut writer = BitWriter::new((p * m * k as usize).div_ceil(8));
    if k > 0 {
        for &g in &archive.assignments {
            if g as usize >= groups {
                return Err(Error::Invariant(format!("group index {g} >= {groups}")));
            }
            writer.write(g, k);
        }
    }
    out.extend_from_slice(&writer.finish());
    out.extend_from_slice(&archive.payload.to_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(out.len() as u64, storage.total_bytes());
    Ok(out)
}

/// Header fields, readable without decoding the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u16,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bits: u8,
    pub patch_height: usize,
    pub patch_width: usize,
    pub groups: usize,
    pub coding: Coding,
}

impl ContainerHeader {
    pub fn geom(&self) -> PatchGeometry {
        PatchGeometry::new(self.patch_height, self.patch_width)
    }

    pub fn patches_per_image(&self) -> usize {
        self.geom().patch_count(self.height, self.width)
    }

    /// Offset of the symbol payload.
    fn payload_offset(&self) -> u64 {
        let indices = (self.patches_per_image() as u64 * self.images as u64) * index_bits(self.groups) as u64;
        FIXED_HEADER_LEN as u64
            + 4 * self.images as u64
            + PARAM_LEN as u64 * self.groups as u64
            + indices.div_ceil(8)
    }
}

/// Version field of anything that starts with the archive magic.
pub fn peek_version(bytes: &[u8]) -> Option<u16> {
    (bytes.len() >= 6 && &bytes[..4] == MAGIC).then(|| u16::from_le_bytes([bytes[4], bytes[5]]))
}

fn le_u32(b: &[u8], at: usize) -> usize {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap()) as usize
}

fn le_u16(b: &[u8], at: usize) -> usize {
    u16::from_le_bytes([b[at], b[at + 1]]) as usize
}

/// Parses and validates the header and checksum.
pub fn read_header(bytes: &[u8]) -> Result<ContainerHeader> {
    if bytes.len() < 6 {
        return Err(Error::Truncated {
            expected: (FIXED_HEADER_LEN + CHECKSUM_LEN) as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a DCQZ archive".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < FIXED_HEADER_LEN + CHECKSUM_LEN {
        return Err(Error::Truncated {
            expected: (FIXED_HEADER_LEN + CHECKSUM_LEN) as u64,
            found: bytes.len() as u64,
        });
    }
    let header = ContainerHeader {
        version,
        images: le_u32(bytes, 6),
        height: le_u32(bytes, 10),
        width: le_u32(bytes, 14),
        channels: le_u32(bytes, 18),
        bits: bytes[22],
        patch_height: le_u16(bytes, 23),
        patch_width: le_u16(bytes, 25),
        groups: le_u32(bytes, 27),
        coding: Coding::from_byte(bytes[31])?,
    };
    let (h, w) = (header.height, header.width);
    if header.images == 0 || h == 0 || w == 0 || header.channels == 0 {
        return Err(Error::Format("zero image count or dimension".into()));
    }
    check_bitwidth(header.bits).map_err(|_| Error::Format(format!("bit width {}", header.bits)))?;
    header
        .geom()
        .validate(h, w)
        .map_err(|e| Error::Format(e.to_string()))?;
    let patches = header.patches_per_image() as u64 * header.images as u64;
    if header.groups == 0 || header.groups as u64 > patches {
        return Err(Error::Format(format!("{} groups for {patches} patches", header.groups)));
    }
    let min_len = header.payload_offset() + CHECKSUM_LEN as u64;
    if (bytes.len() as u64) < min_len {
        return Err(Error::Truncated {
            expected: min_len,
            found: bytes.len() as u64,
        });
    }
    let body = bytes.len() - CHECKSUM_LEN;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(header)
}

/// Header and storage accounting of an archive; the payload is not decoded.
pub fn inspect_container(bytes: &[u8]) -> Result<(ContainerHeader, StorageBreakdown)> {
    let header = read_header(bytes)?;
    let payload_len = bytes.len() - CHECKSUM_LEN - header.payload_offset() as usize;
    let storage = compute_storage(header.images, header.patches_per_image(), header.groups, payload_len);
    Ok((header, storage))
}

pub fn read_container(bytes: &[u8]) -> Result<Archive> {
    let header = read_header(bytes)?;
    let m = header.images;
    let groups = header.groups;
    let mut pos = FIXED_HEADER_LEN;
    let labels: Vec<u32> = (0..m).map(|i| le_u32(bytes, pos + 4 * i) as u32).collect();
    pos += 4 * m;
    let params = (0..groups)
        .map(|g| {
            let at = pos + PARAM_LEN * g;
            let scale = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            let zero = i16::from_le_bytes([bytes[at + 4], bytes[at + 5]]) as i32;
            QuantParams::new(scale, zero, header.bits)
                .map_err(|e| Error::Corrupt(format!("group {g}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    pos += PARAM_LEN * groups;
    let p = header.patches_per_image();
    let k = index_bits(groups);
    let index_len = (p * m * k as usize).div_ceil(8);
    let mut reader = BitReader::new(&bytes[pos..pos + index_len]);
    let assignments = (0..p * m)
        .map(|_| {
            let g = reader.read(k).unwrap();
            if g as usize >= groups {
                Err(Error::Corrupt(format!("group index {g} >= {groups}")))
            } else {
                Ok(g)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    pos += index_len;
    let payload = Payload::from_bytes(header.coding, &bytes[pos..bytes.len() - CHECKSUM_LEN])?;
    let (alphabet, count) = payload.header();
    let expected = (m * header.height * header.width * header.channels) as u64;
    if alphabet != 1 << header.bits || count != expected {
        return Err(Error::Corrupt(format!(
            "payload holds {count} symbols over {alphabet} values, expected {expected} over {}",
            1 << header.bits
        )));
    }
    Ok(Archive {
        dims: (header.height, header.width, header.channels),
        bits: header.bits,
        geom: header.geom(),
        labels,
        assignments,
        params,
        payload,
    })
}

/// Storage budget expressed as a number of full-precision images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetSpec {
    pub images: u64,
}

impl BudgetSpec {
    pub const BITS_PER_VALUE: u64 = 32;

    pub fn new(images: u64) -> Result<Self> {
        if images == 0 {
            return Err(Error::Invariant("budget must cover at least one image".into()));
        }
        Ok(Self { images })
    }

    pub fn budget_bits(&self, dims: (usize, usize, usize)) -> u64 {
        let (h, w, c) = dims;
        self.images * (h * w * c) as u64 * Self::BITS_PER_VALUE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolverConfig {
    pub entropy: EntropyMode,
    pub kmeans: KMeansConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            entropy: EntropyMode::On,
            kmeans: KMeansConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub groups: usize,
    pub storage: StorageBreakdown,
    pub archive: Archive,
    /// Every evaluated group count with its total size in bits.
    pub evaluated: Vec<(usize, u64)>,
}

/// Runs grouping, quantization and coding at one group count.
pub fn encode_at(
    bundle: &DatasetBundle,
    geom: &PatchGeometry,
    bits: u8,
    groups: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<Archive> {
    let patches = split_bundle(bundle, geom)?;
    let model = build_group_model(&patches, bits, groups, seed, &config.kmeans)?;
    Archive::from_model(bundle, geom, bits, &model, config.entropy)
}

/// Largest group count whose archive fits the budget.
///
/// Powers of two up to `P·m` (and `P·m` itself) are tried in increasing
/// order until one does not fit; the gap between the last fitting and the
/// first failing point is then scanned downward. Sizes are not monotone in
/// `G`, so the scan visits every candidate above the first fit it finds.
pub fn solve_group_count(
    bundle: &DatasetBundle,
    geom: &PatchGeometry,
    bits: u8,
    budget: &BudgetSpec,
    seed: u64,
    config: &SolverConfig,
) -> Result<Solution> {
    let budget_bits = budget.budget_bits(bundle.dims());
    let max_groups = bundle.patches_per_image(geom) * bundle.len();
    let mut evaluated = Vec::new();
    let mut eval = |g: usize| -> Result<(bool, Archive)> {
        let archive = encode_at(bundle, geom, bits, g, seed, config)?;
        let total = archive.storage().total;
        evaluated.push((g, total));
        Ok((total <= budget_bits, archive))
    };

    let (fits, first) = eval(1)?;
    if !fits {
        return Err(Error::InfeasibleBudget {
            budget_bits,
            required_bits: first.storage().total,
        });
    }
    let mut best = (1usize, first);
    let mut failed = None;
    let mut g = 1usize;
    while g < max_groups && failed.is_none() {
        g = (g * 2).min(max_groups);
        let (fits, archive) = eval(g)?;
        if fits {
            best = (g, archive);
        } else {
            failed = Some(g);
        }
    }
    if let Some(hi) = failed {
        for g in (best.0 + 1..hi).rev() {
            let (fits, archive) = eval(g)?;
            if fits {
                best = (g, archive);
                break;
            }
        }
    }
    let (groups, archive) = best;
    Ok(Solution {
        groups,
        storage: archive.storage(),
        archive,
        evaluated,
    })
}

/// Refinement applied during compression.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineOptions {
    pub when: RefineWhen,
    pub spec: FeatureNetSpec,
    /// Optimizer settings for the first pass; the provider is chosen by
    /// `when`.
    pub config: RefineConfig,
    /// Iterations of the post-grouping pass when `when` is `Both`.
    pub post_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct CompressConfig {
    pub geom: PatchGeometry,
    pub bits: u8,
    pub budget: BudgetSpec,
    pub seed: u64,
    pub solver: SolverConfig,
    pub refine: Option<RefineOptions>,
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub archive: Archive,
    pub bytes: Vec<u8>,
    pub storage: StorageBreakdown,
    pub budget_bits: u64,
    pub reports: Vec<RefineReport>,
}

impl Compressed {
    pub fn groups(&self) -> usize {
        self.archive.group_count()
    }
}

/// Optional refinement, group-count search, grouping, quantization and coding.
pub fn compress(bundle: &DatasetBundle, config: &CompressConfig) -> Result<Compressed> {
    let budget_bits = config.budget.budget_bits(bundle.dims());
    let mut reports = Vec::new();
    let mut source = bundle.clone();
    let refine_pass = |b: &DatasetBundle, opts: &RefineOptions, provider: QuantProvider, iterations: usize| {
        let cfg = RefineConfig {
            provider,
            iterations,
            bits: config.bits,
            ..opts.config.clone()
        };
        refine_images(b, &opts.spec, &cfg)
    };

    let post = match &config.refine {
        None => None,
        Some(opts) => {
            if matches!(opts.when, RefineWhen::BeforeGrouping | RefineWhen::Both) {
                let (refined, r) = refine_pass(
                    &source,
                    opts,
                    QuantProvider::PerPatch(config.geom),
                    opts.config.iterations,
                )?;
                source = refined;
                reports = r;
            }
            match opts.when {
                RefineWhen::BeforeGrouping => None,
                RefineWhen::AfterGrouping => Some((opts, opts.config.iterations)),
                RefineWhen::Both => (opts.post_iterations > 0).then_some((opts, opts.post_iterations)),
            }
        }
    };

    let solution = solve_group_count(&source, &config.geom, config.bits, &config.budget, config.seed, &config.solver)?;
    let mut archive = solution.archive;

    if let Some((opts, iterations)) = post {
        // The refined payload can differ in size, so step the group count
        // down until the result fits again.
        let mut groups = solution.groups;
        loop {
            let model = if groups == solution.groups {
                archive.model()
            } else {
                encode_at(&source, &config.geom, config.bits, groups, config.seed, &config.solver)?.model()
            };
            let provider = QuantProvider::PerGroup {
                geom: config.geom,
                model: model.clone(),
            };
            let (refined, r) = refine_pass(&source, opts, provider, iterations)?;
            let candidate = Archive::from_model(&refined, &config.geom, config.bits, &model, config.solver.entropy)?;
            if candidate.storage().total <= budget_bits {
                archive = candidate;
                reports = r;
                break;
            }
            if groups == 1 {
                return Err(Error::InfeasibleBudget {
                    budget_bits,
                    required_bits: candidate.storage().total,
                });
            }
            groups -= 1;
        }
    }

    let bytes = write_container(&archive)?;
    let storage = archive.storage();
    Ok(Compressed {
        archive,
        bytes,
        storage,
        budget_bits,
        reports,
    })
}

pub fn decompress(bytes: &[u8]) -> Result<DatasetBundle> {
    read_container(bytes)?.decode()
}
