//! `dcq`: compress, inspect and evaluate condensed image datasets.
//!
//! Exit status: 0 success, 1 usage or I/O error, 2 budget cannot be met,
//! 3 corrupt or unreadable archive.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_list, parse_patch, ConfigFile};
use dcq_core::container::{
    compress, inspect_container, peek_version, read_container, BudgetSpec, CompressConfig,
    EntropyMode, RefineOptions, SolverConfig, StorageBreakdown,
};
use dcq_core::corpus::{synthetic_corpus, CorpusConfig};
use dcq_core::eval::{
    ablation_csv, measure_distortion, sweep_bitwidth, sweep_groups, to_csv, Ablation, AblationConfig,
    AblationToggles, Method,
};
use dcq_core::grouping::KMeansConfig;
use dcq_core::refine::{refine_schedule, FeatureNetSpec, QuantProvider, RefineConfig, RefineWhen, ScheduleConfig};
use dcq_core::tensor::{load_tensor_file, save_tensor_file, PatchGeometry};
use dcq_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dcq", version, about = "Patch-quantized storage codec for condensed image datasets")]
struct Cli {
    /// key = value file supplying defaults for any long flag
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for grouping
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Progress messages on stderr
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a .dcqt bundle into a .dcqz archive within a storage budget
    Compress(CompressArgs),
    /// Rebuild a .dcqt bundle from a .dcqz archive
    Decompress(DecompressArgs),
    /// Refine images against quantization and write them back as .dcqt
    Refine(RefineArgs),
    /// Distortion and storage sweeps written as CSV
    Sweep(SweepArgs),
    /// Print archive header and storage breakdown
    Inspect(InspectArgs),
    /// Write the seeded synthetic corpus as .dcqt
    Corpus(CorpusArgs),
}

#[derive(Args, Debug, Default)]
struct QuantArgs {
    /// Bit width, 2..=8 [default: 2]
    #[arg(long)]
    bits: Option<u8>,
    /// Patch size HxW [default: 5x5]
    #[arg(long)]
    patch: Option<String>,
}

#[derive(Args, Debug, Default)]
struct RefineFlags {
    /// Iterations of refinement [default: 500]
    #[arg(long)]
    refine_iterations: Option<usize>,
    /// Iterations of the post-grouping pass with `both` [default: 500]
    #[arg(long)]
    post_iterations: Option<usize>,
    /// Optimizer step size [default: 0.01]
    #[arg(long)]
    step_size: Option<f64>,
    /// Seed of the feature network weights [default: 0]
    #[arg(long)]
    weight_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CompressArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Budget in full-precision images [default: 1]
    #[arg(long)]
    budget_ipc: Option<u64>,
    /// none, before, after or both [default: none]
    #[arg(long)]
    refine: Option<String>,
    /// on or off [default: on]
    #[arg(long)]
    entropy: Option<String>,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    refine_flags: RefineFlags,
}

#[derive(Args, Debug)]
struct DecompressArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Original bundle to measure distortion against
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Seed of the feature network weights [default: 0]
    #[arg(long)]
    weight_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RefineArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// before, after or both [default: before]
    #[arg(long)]
    when: Option<String>,
    /// Group count for after/both [default: 16]
    #[arg(long)]
    groups: Option<usize>,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    refine_flags: RefineFlags,
}

#[derive(Args, Debug)]
struct SweepArgs {
    input: PathBuf,
    /// CSV destination; stdout when absent
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// bits, groups or ablation [default: bits]
    #[arg(long)]
    mode: Option<String>,
    /// Bit widths for `bits` mode [default: 2,3,4,8]
    #[arg(long)]
    bits_list: Option<String>,
    /// Methods for `bits` mode [default: whole_aq,median_cut,paq,gaq]
    #[arg(long)]
    methods: Option<String>,
    /// GAQ group count in `bits` mode [default: 16]
    #[arg(long)]
    groups: Option<usize>,
    /// Group counts for `groups` mode [default: 1,2,4,... up to the patch count]
    #[arg(long)]
    groups_list: Option<String>,
    /// Budget for `ablation` mode [default: 1]
    #[arg(long)]
    budget_ipc: Option<u64>,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    refine_flags: RefineFlags,
}

#[derive(Args, Debug)]
struct InspectArgs {
    input: PathBuf,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

/// Failure with its exit status.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InfeasibleBudget { .. } => 2,
            e if e.is_corruption() => 3,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

struct Context {
    file: ConfigFile,
    seed: Option<u64>,
    verbose: u8,
}

impl Context {
    fn get<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        self.file.resolve(key, flag, default).map_err(Failure::usage)
    }

    fn seed(&self) -> Result<u64, Failure> {
        self.get("seed", self.seed, 0)
    }

    fn bits(&self, q: &QuantArgs) -> Result<u8, Failure> {
        let bits = self.get("bits", q.bits, 2u8)?;
        if !(2..=8).contains(&bits) {
            return Err(Failure::usage(format!("invalid value `{bits}` for `bits`: must be in 2..=8")));
        }
        Ok(bits)
    }

    fn geom(&self, q: &QuantArgs) -> Result<PatchGeometry, Failure> {
        let (h, w) = self
            .file
            .resolve_with("patch", q.patch.as_deref(), "5x5", parse_patch)
            .map_err(Failure::usage)?;
        Ok(PatchGeometry::new(h, w))
    }

    fn refine_config(&self, r: &RefineFlags, bits: u8) -> Result<RefineConfig, Failure> {
        let iterations = self.get("refine-iterations", r.refine_iterations, 500usize)?;
        if iterations == 0 {
            return Err(Failure::usage("invalid value `0` for `refine-iterations`: must be positive"));
        }
        let step = self.get("step-size", r.step_size, 0.01f64)?;
        if !(step.is_finite() && step > 0.0) {
            return Err(Failure::usage(format!("invalid value `{step}` for `step-size`: must be positive")));
        }
        let mut cfg = RefineConfig::new(bits, QuantProvider::PerImage).with_iterations(iterations);
        cfg.step_size = step;
        Ok(cfg)
    }

    fn post_iterations(&self, r: &RefineFlags) -> Result<usize, Failure> {
        self.get("post-iterations", r.post_iterations, 500usize)
    }

    fn feature_spec(&self, flag: Option<u64>, channels: usize) -> Result<FeatureNetSpec, Failure> {
        Ok(FeatureNetSpec::new(channels, self.get("weight-seed", flag, 0u64)?))
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn parse_when(s: &str, allow_none: bool) -> Result<Option<RefineWhen>, String> {
    match s {
        "none" if allow_none => Ok(None),
        "before" => Ok(Some(RefineWhen::BeforeGrouping)),
        "after" => Ok(Some(RefineWhen::AfterGrouping)),
        "both" => Ok(Some(RefineWhen::Both)),
        _ if allow_none => Err("expected none, before, after or both".into()),
        _ => Err("expected before, after or both".into()),
    }
}

fn parse_entropy(s: &str) -> Result<EntropyMode, String> {
    match s {
        "on" => Ok(EntropyMode::On),
        "off" => Ok(EntropyMode::Off),
        _ => Err("expected on or off".into()),
    }
}

fn storage_fields(s: &StorageBreakdown) -> String {
    format!(
        "size_indices_bits={} size_params_bits={} size_payload_bits={} size_header_bits={} total_bits={}",
        s.size_indices, s.size_params, s.size_payload, s.size_header, s.total
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn cmd_compress(ctx: &Context, a: &CompressArgs) -> Outcome {
    let bits = ctx.bits(&a.quant)?;
    let geom = ctx.geom(&a.quant)?;
    let seed = ctx.seed()?;
    let budget_ipc = ctx.get("budget-ipc", a.budget_ipc, 1u64)?;
    let budget = BudgetSpec::new(budget_ipc)
        .map_err(|_| Failure::usage("invalid value `0` for `budget-ipc`: must be positive"))?;
    let when = ctx
        .file
        .resolve_with("refine", a.refine.as_deref(), "none", |s| parse_when(s, true))
        .map_err(Failure::usage)?;
    let entropy = ctx
        .file
        .resolve_with("entropy", a.entropy.as_deref(), "on", parse_entropy)
        .map_err(Failure::usage)?;
    let refine_cfg = ctx.refine_config(&a.refine_flags, bits)?;
    let post_iterations = ctx.post_iterations(&a.refine_flags)?;

    let bundle = load_tensor_file(&a.input)?;
    let refine = match when {
        None => None,
        Some(when) => Some(RefineOptions {
            when,
            spec: ctx.feature_spec(a.refine_flags.weight_seed, bundle.dims().2)?,
            config: refine_cfg,
            post_iterations,
        }),
    };
    ctx.note(format!("compressing {} images", bundle.len()));
    let config = CompressConfig {
        geom,
        bits,
        budget,
        seed,
        solver: SolverConfig {
            entropy,
            kmeans: KMeansConfig::default(),
        },
        refine,
    };
    let out = compress(&bundle, &config)?;
    write_file(&a.output, &out.bytes)?;
    println!(
        "RESULT groups={} bits={} images={} {} budget_bits={} bytes={}",
        out.groups(),
        bits,
        bundle.len(),
        storage_fields(&out.storage),
        out.budget_bits,
        out.bytes.len()
    );
    Ok(())
}

fn cmd_decompress(ctx: &Context, a: &DecompressArgs) -> Outcome {
    let bytes = read_file(&a.input)?;
    let archive = read_container(&bytes)?;
    let bundle = archive.decode()?;
    save_tensor_file(&bundle, &a.output)?;
    let mut line = format!("RESULT images={} groups={}", bundle.len(), archive.group_count());
    if let Some(reference) = &a.reference {
        let original = load_tensor_file(reference)?;
        let spec = ctx.feature_spec(a.weight_seed, original.dims().2)?;
        let d = measure_distortion(&original, &bundle, &spec)?;
        line.push_str(&format!(" pixel_mse={:.16e} feature_mse={:.16e}", d.pixel_mse, d.feature_mse));
    }
    println!("{line}");
    Ok(())
}

fn cmd_refine(ctx: &Context, a: &RefineArgs) -> Outcome {
    let bits = ctx.bits(&a.quant)?;
    let geom = ctx.geom(&a.quant)?;
    let when = ctx
        .file
        .resolve_with("when", a.when.as_deref(), "before", |s| parse_when(s, false))
        .map_err(Failure::usage)?
        .expect("none is rejected");
    let groups = ctx.get("groups", a.groups, 16usize)?;
    let refine = ctx.refine_config(&a.refine_flags, bits)?;
    let post_iterations = ctx.post_iterations(&a.refine_flags)?;
    let seed = ctx.seed()?;
    let bundle = load_tensor_file(&a.input)?;
    let spec = ctx.feature_spec(a.refine_flags.weight_seed, bundle.dims().2)?;
    ctx.note(format!("refining {} images", bundle.len()));
    let out = refine_schedule(
        &bundle,
        &spec,
        &ScheduleConfig {
            when,
            geom,
            bits,
            groups,
            seed,
            refine,
            post_iterations,
        },
    )?;
    save_tensor_file(&out.bundle, &a.output)?;
    let n = out.reports.len().max(1) as f64;
    let initial: f64 = out.reports.iter().map(|r| r.initial_loss()).sum::<f64>() / n;
    let fin: f64 = out.reports.iter().map(|r| r.final_loss()).sum::<f64>() / n;
    println!(
        "RESULT images={} groups={} mean_initial_loss={initial:.16e} mean_final_loss={fin:.16e}",
        out.bundle.len(),
        out.model.group_count()
    );
    Ok(())
}

fn cmd_sweep(ctx: &Context, a: &SweepArgs) -> Outcome {
    let geom = ctx.geom(&a.quant)?;
    let seed = ctx.seed()?;
    let mode = ctx.get("mode", a.mode.clone(), "bits".to_string())?;
    let bundle = load_tensor_file(&a.input)?;
    let spec = ctx.feature_spec(a.refine_flags.weight_seed, bundle.dims().2)?;
    let csv = match mode.as_str() {
        "bits" => {
            let bits: Vec<u8> = ctx
                .file
                .resolve_with("bits-list", a.bits_list.as_deref(), "2,3,4,8", parse_list)
                .map_err(Failure::usage)?;
            if let Some(b) = bits.iter().find(|b| !(2..=8).contains(*b)) {
                return Err(Failure::usage(format!("invalid value `{b}` in `bits-list`: must be in 2..=8")));
            }
            let methods = ctx
                .file
                .resolve_with("methods", a.methods.as_deref(), "whole_aq,median_cut,paq,gaq", |s| {
                    s.split(',')
                        .map(|m| Method::parse(m.trim()).ok_or_else(|| format!("unknown method `{}`", m.trim())))
                        .collect::<Result<Vec<_>, _>>()
                })
                .map_err(Failure::usage)?;
            let groups = ctx.get("groups", a.groups, 16usize)?;
            to_csv(&sweep_bitwidth(&bundle, &methods, &bits, &geom, groups, seed, &spec)?)
        }
        "groups" => {
            let bits = ctx.bits(&a.quant)?;
            let max = bundle.patches_per_image(&geom) * bundle.len();
            let ladder: Vec<String> = std::iter::successors(Some(1usize), |g| Some(g * 2))
                .take_while(|&g| g < max)
                .chain([max])
                .map(|g| g.to_string())
                .collect();
            let groups: Vec<usize> = ctx
                .file
                .resolve_with("groups-list", a.groups_list.as_deref(), &ladder.join(","), parse_list)
                .map_err(Failure::usage)?;
            to_csv(&sweep_groups(&bundle, &geom, bits, &groups, seed, &spec)?)
        }
        "ablation" => {
            let bits = ctx.bits(&a.quant)?;
            let budget = BudgetSpec::new(ctx.get("budget-ipc", a.budget_ipc, 1u64)?)
                .map_err(|_| Failure::usage("invalid value `0` for `budget-ipc`: must be positive"))?;
            let config = AblationConfig {
                geom,
                bits,
                budget,
                seed,
                spec,
                refine: ctx.refine_config(&a.refine_flags, bits)?,
                kmeans: KMeansConfig::default(),
            };
            let reports = AblationToggles::TABLE
                .iter()
                .map(|&t| {
                    ctx.note(format!("ablation row {}", t.label()));
                    Ablation::new(&bundle, t, &config)?.run()
                })
                .collect::<Result<Vec<_>, Error>>()?;
            ablation_csv(&reports, bits)
        }
        other => {
            return Err(Failure::usage(format!(
                "invalid value `{other}` for `mode`: expected bits, groups or ablation"
            )))
        }
    };
    match &a.output {
        Some(path) => write_file(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    println!("RESULT mode={mode} rows={}", csv.lines().count() - 1);
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Outcome {
    let bytes = read_file(&a.input)?;
    if let Some(v) = peek_version(&bytes) {
        println!("version={v}");
    }
    let (h, s) = inspect_container(&bytes)?;
    println!(
        "RESULT version={} groups={} bits={} images={} height={} width={} channels={} patch={}x{} coding={:?} {} bytes={}",
        h.version,
        h.groups,
        h.bits,
        h.images,
        h.height,
        h.width,
        h.channels,
        h.patch_height,
        h.patch_width,
        h.coding,
        storage_fields(&s),
        bytes.len()
    );
    Ok(())
}

fn cmd_corpus(ctx: &Context, a: &CorpusArgs) -> Outcome {
    if a.images == 0 || a.height == 0 || a.width == 0 {
        return Err(Failure::usage("images, height and width must be positive"));
    }
    let cfg = CorpusConfig {
        images: a.images,
        height: a.height,
        width: a.width,
        seed: ctx.seed()?,
        ..CorpusConfig::default()
    };
    let bundle = synthetic_corpus(&cfg)?;
    save_tensor_file(&bundle, &a.output)?;
    println!("RESULT images={} height={} width={} channels={}", a.images, a.height, a.width, cfg.channels);
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("DCQ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("invalid value `{raw}` for DCQ_THREADS")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path).map_err(Failure::usage)?,
        None => ConfigFile::default(),
    };
    let ctx = Context {
        file,
        seed: cli.seed,
        verbose: cli.verbose,
    };
    match &cli.command {
        Command::Compress(a) => cmd_compress(&ctx, a),
        Command::Decompress(a) => cmd_decompress(&ctx, a),
        Command::Refine(a) => cmd_refine(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Corpus(a) => cmd_corpus(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
