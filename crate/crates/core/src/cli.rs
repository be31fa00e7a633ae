//! The `tinc` command line: compress, decompress, eval, analyze, sweep and
//! replay. Every file the tool writes gets a `<file>.manifest.json` next to
//! it recording the resolved options and digests, so a run can be replayed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{compress, decompress_with, CompressOptions, CompressReport, CompressedArtifact};
use crate::error::{ConfigError, Error};
use crate::exec::Executor;
use crate::metrics::{complexity, region_similarity, suggest_inter_ratio, MetricReport, MetricSpec};
use crate::octree::{AllocationPolicy, InterLevelRatio, IntraLevel, TreeConfig};
use crate::train::TrainConfig;
use crate::volume::{Dtype, Volume, TVOL_MAGIC};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "TINC_THREADS";
/// Column left out of sweep digests because it is not reproducible.
const WALL_TIME_COLUMN: &str = "wall_time_s";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(#[from] Error),
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Run(e) => e.class(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) => e.exit_code(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Run(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tinc", version, about = "Octree implicit neural compression for 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a network to a volume and write a .tinc file.
    Compress(CompressArgs),
    /// Rebuild a volume from a .tinc file.
    Decompress(DecompressArgs),
    /// Compare two volumes.
    Eval(EvalArgs),
    /// Spectral complexity and region similarity of a volume.
    Analyze(AnalyzeArgs),
    /// Compress over a grid of settings and write a CSV.
    Sweep(SweepArgs),
    /// Re-run the command recorded in a manifest and check the output digest.
    Replay(ReplayArgs),
}

/// A volume on disk: `.tvol`, or raw little-endian voxels with `--shape` and `--dtype`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Raw input dimensions as Z,Y,X.
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<[usize; 3]>,
    /// Raw input voxel type.
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<Dtype>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocArg {
    Even,
    Importance,
}

impl From<AllocArg> for IntraLevel {
    fn from(a: AllocArg) -> Self {
        match a {
            AllocArg::Even => IntraLevel::Even,
            AllocArg::Importance => IntraLevel::Importance,
        }
    }
}

/// `auto`, a single ratio, or one ratio per level boundary (`1.2,0.9`).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InterRatioArg {
    Auto,
    Fixed(InterLevelRatio),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompressArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Target compression ratio (raw bytes / file bytes).
    #[arg(long)]
    pub ratio: f64,
    #[arg(long, default_value_t = 2)]
    pub levels: u32,
    #[arg(long, default_value_t = 1)]
    pub hyper_depth: u32,
    /// Per-node budget ratio between consecutive levels, `auto` to derive it from region similarity.
    #[arg(long, default_value = "1.0", value_parser = parse_inter_ratio)]
    pub inter_ratio: InterRatioArg,
    #[arg(long, value_enum, default_value_t = AllocArg::Even)]
    pub alloc: AllocArg,
    /// Raw intensity threshold for importance allocation.
    #[arg(long, default_value_t = 0.0)]
    pub imp_threshold: f64,
    /// Fraction of the even share every leaf keeps under importance allocation.
    #[arg(long, default_value_t = 0.1)]
    pub floor_fraction: f64,
    #[arg(long, default_value_t = 7000)]
    pub iters: usize,
    /// Base learning rate, multiplied by 0.2 at iterations 2000 and 5000.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub batch_per_leaf: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Loss logging interval, in iterations.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics on the decompressed result, e.g. `psnr,ssim,acc:500`.
    #[arg(long, value_parser = parse_metrics)]
    pub eval: Option<::std::vec::Vec<MetricSpec>>,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the loss curve as CSV (iteration,lr,loss).
    #[arg(long)]
    pub train_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecompressArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write bare voxels instead of a .tvol container.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Raw input dimensions (both files) as Z,Y,X.
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<Dtype>,
    #[arg(long, default_value = "psnr,ssim", value_parser = parse_metrics)]
    pub metrics: ::std::vec::Vec<MetricSpec>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Octree depth of the region grid (8^(levels-1) regions).
    #[arg(long, default_value_t = 3)]
    pub levels: u32,
    /// Low-frequency box half-width as a fraction of each axis.
    #[arg(long, default_value_t = 0.25)]
    pub band: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the raw pairwise SSIM matrix as CSV.
    #[arg(long)]
    pub matrix_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub levels: Vec<u32>,
    /// Inter-level ratios to try; `auto` is allowed.
    #[arg(long, value_delimiter = ',', default_value = "1.0", value_parser = parse_inter_ratio)]
    pub inter_ratios: Vec<InterRatioArg>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "even")]
    pub allocs: Vec<AllocArg>,
    #[arg(long, default_value_t = 1)]
    pub hyper_depth: u32,
    #[arg(long, default_value_t = 0.0)]
    pub imp_threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    pub floor_fraction: f64,
    #[arg(long, default_value_t = 7000)]
    pub iters: usize,
    /// Base learning rate, multiplied by 0.2 at iterations 2000 and 5000.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub batch_per_leaf: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "psnr,ssim", value_parser = parse_metrics)]
    pub metrics: ::std::vec::Vec<MetricSpec>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Written next to every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Every option after defaults were applied.
    pub options: serde_json::Value,
    /// Values decided at run time, such as an `auto` inter-level ratio.
    #[serde(default)]
    pub resolved: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    /// Input path to SHA-256.
    pub input_digests: BTreeMap<String, String>,
    pub output: String,
    pub output_digest: String,
    /// Columns blanked before hashing (sweep timing).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub digest_excludes: Vec<String>,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [z, y, x] if z > 0 && y > 0 && x > 0 => Ok([z, y, x]),
        _ => Err(format!("expected three positive sizes Z,Y,X, got {s:?}")),
    }
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    s.parse()
}

fn parse_metrics(s: &str) -> Result<Vec<MetricSpec>, String> {
    let list = MetricSpec::parse_list(s)?;
    if list.is_empty() {
        return Err("no metrics given".into());
    }
    Ok(list)
}

fn parse_inter_ratio(s: &str) -> Result<InterRatioArg, String> {
    if s.trim() == "auto" {
        return Ok(InterRatioArg::Auto);
    }
    let values: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if let Some(bad) = values.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(format!("inter-level ratio must be positive, got {bad}"));
    }
    Ok(InterRatioArg::Fixed(match values[..] {
        [r] => InterLevelRatio::Uniform(r),
        _ => InterLevelRatio::PerLevel(values),
    }))
}

/// Worker count from `TINC_THREADS`; unset means 0 (single-threaded).
pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))).into()
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Fails early if an output could not be created, before any work is done.
fn check_output(path: &Path, inputs: &[&Path]) -> CliResult<()> {
    if inputs.iter().any(|i| *i == path) {
        return Err(CliError::Usage(format!(
            "output {} would overwrite an input",
            path.display()
        )));
    }
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(io_err(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    Ok(())
}

/// Loads a `.tvol` (detected by magic) or a raw file described by shape and dtype.
pub fn load_volume(path: &Path, shape: Option<[usize; 3]>, dtype: Option<Dtype>) -> CliResult<(Volume, Vec<u8>)> {
    let bytes = read_file(path)?;
    let volume = if bytes.starts_with(TVOL_MAGIC) {
        Volume::from_tvol_bytes(&bytes)?
    } else {
        match (shape, dtype) {
            (Some(shape), Some(dtype)) => Volume::load_raw(&bytes, shape, dtype)?,
            _ => {
                return Err(CliError::Usage(format!(
                    "{} is not a .tvol file; raw input needs --shape and --dtype",
                    path.display()
                )))
            }
        }
    };
    Ok((volume, bytes))
}

/// Region-similarity based ratio: analyses 64 regions when they are large
/// enough for the SSIM window, else 8.
fn auto_inter_ratio(volume: &Volume) -> CliResult<(f64, f64, u32)> {
    let mut last = None;
    for levels in [3, 2] {
        match region_similarity(volume, levels) {
            Ok(sim) => {
                let c = sim.global_consistency;
                return Ok((suggest_inter_ratio(c), c, levels));
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one level tried").into())
}

struct Ctx<'a> {
    argv: &'a [String],
    threads: usize,
    stdout: &'a mut dyn Write,
}

impl Ctx<'_> {
    #[allow(clippy::too_many_arguments)]
    fn write_manifest(
        &self,
        command: &str,
        options: &impl Serialize,
        resolved: serde_json::Value,
        seed: Option<u64>,
        inputs: &[(&Path, &[u8])],
        output: &Path,
        output_digest: String,
        digest_excludes: Vec<String>,
    ) -> CliResult<()> {
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            argv: self.argv.to_vec(),
            options: serde_json::to_value(options).expect("options serialize"),
            resolved,
            seed,
            threads: self.threads,
            input_digests: inputs
                .iter()
                .map(|(p, b)| (p.display().to_string(), sha256_hex(b)))
                .collect(),
            output: output.display().to_string(),
            output_digest,
            digest_excludes,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_file(&manifest_path(output), &json)
    }

    fn print_json(&mut self, value: &impl Serialize) -> CliResult<()> {
        let s = serde_json::to_string_pretty(value).expect("report serializes");
        writeln!(self.stdout, "{s}").map_err(|e| CliError::Run(e.into()))
    }
}

fn tree_and_policy(
    levels: u32,
    hyper_depth: u32,
    ratio: InterLevelRatio,
    alloc: AllocArg,
    imp_threshold: f64,
    floor_fraction: f64,
) -> CliResult<(TreeConfig, AllocationPolicy)> {
    let tree = TreeConfig::new(levels, hyper_depth)?;
    let policy = AllocationPolicy {
        inter_level_ratio: ratio,
        intra_level: alloc.into(),
        importance_threshold: imp_threshold,
        floor_fraction,
    };
    policy.validate(&tree)?;
    Ok((tree, policy))
}

fn check_ratio(ratio: f64) -> CliResult<()> {
    if !(ratio.is_finite() && ratio >= 1.0) {
        return Err(ConfigError::Invalid(format!("target ratio must be >= 1, got {ratio}")).into());
    }
    Ok(())
}

fn cmd_compress(args: &CompressArgs, ctx: &mut Ctx) -> CliResult<()> {
    check_ratio(args.ratio)?;
    let fixed_ratio = match &args.inter_ratio {
        InterRatioArg::Fixed(r) => r.clone(),
        InterRatioArg::Auto => InterLevelRatio::Uniform(1.0),
    };
    let (tree, mut policy) = tree_and_policy(
        args.levels,
        args.hyper_depth,
        fixed_ratio,
        args.alloc,
        args.imp_threshold,
        args.floor_fraction,
    )?;
    let train = TrainConfig {
        iterations: args.iters,
        base_lr: args.lr,
        batch_per_leaf: args.batch_per_leaf,
        seed: args.seed,
        log_every: args.log_every.max(1),
        threads: ctx.threads,
        ..TrainConfig::default()
    };
    train.validate()?;
    let mut outputs: Vec<&Path> = vec![&args.out];
    outputs.extend(args.report.as_deref());
    outputs.extend(args.train_log.as_deref());
    for out in &outputs {
        check_output(out, &[&args.input.input])?;
    }

    let (volume, input_bytes) = load_volume(&args.input.input, args.input.shape, args.input.dtype)?;
    let mut resolved = serde_json::Map::new();
    if args.inter_ratio == InterRatioArg::Auto {
        let (r, consistency, levels) = auto_inter_ratio(&volume)?;
        log::info!("global consistency {consistency:.4} over {} regions: inter-level ratio {r}", 8usize.pow(levels - 1));
        policy.inter_level_ratio = InterLevelRatio::Uniform(r);
        resolved.insert("inter_ratio".into(), r.into());
        resolved.insert("global_consistency".into(), consistency.into());
    }

    let opts = CompressOptions {
        tree,
        policy,
        train,
        metrics: args.eval.clone().unwrap_or_default(),
    };
    let (artifact, report) = compress(&volume, args.ratio, &opts)?;
    let bytes = artifact.to_bytes();
    write_file(&args.out, &bytes)?;
    ctx.write_manifest(
        "compress",
        args,
        serde_json::Value::Object(resolved),
        Some(args.seed),
        &[(&args.input.input, &input_bytes)],
        &args.out,
        sha256_hex(&bytes),
        Vec::new(),
    )?;
    if let Some(path) = &args.train_log {
        let mut csv = String::from("iteration,lr,loss\n");
        for r in &report.training.records {
            csv.push_str(&format!("{},{},{}\n", r.iteration, r.lr, r.loss));
        }
        write_file(path, csv.as_bytes())?;
    }
    if let Some(path) = &args.report {
        write_file(path, &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    }
    ctx.print_json(&CompressSummary::from(&report))
}

/// What `compress` prints: the report without the full loss curve.
#[derive(Serialize)]
struct CompressSummary<'a> {
    target_ratio: f64,
    achieved_ratio: f64,
    raw_bytes: usize,
    file_bytes: usize,
    param_budget: u64,
    param_count: u64,
    budget_utilization: f64,
    widths: &'a [u32],
    final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<&'a MetricReport>,
}

impl<'a> From<&'a CompressReport> for CompressSummary<'a> {
    fn from(r: &'a CompressReport) -> Self {
        Self {
            target_ratio: r.target_ratio,
            achieved_ratio: r.achieved_ratio,
            raw_bytes: r.raw_bytes,
            file_bytes: r.file_bytes,
            param_budget: r.param_budget,
            param_count: r.param_count,
            budget_utilization: r.budget_utilization,
            widths: &r.widths,
            final_loss: r.final_loss,
            metrics: r.metrics.as_ref(),
        }
    }
}

fn cmd_decompress(args: &DecompressArgs, ctx: &mut Ctx) -> CliResult<()> {
    check_output(&args.out, &[&args.input])?;
    let bytes = read_file(&args.input)?;
    let artifact = CompressedArtifact::from_bytes(&bytes).map_err(Error::from)?;
    let volume = decompress_with(&artifact, &Executor::new(ctx.threads))?;
    let out = if args.raw {
        volume.to_raw_bytes()
    } else {
        volume.to_tvol_bytes()
    };
    write_file(&args.out, &out)?;
    ctx.write_manifest(
        "decompress",
        args,
        serde_json::Value::Null,
        None,
        &[(&args.input, &bytes)],
        &args.out,
        sha256_hex(&out),
        Vec::new(),
    )
}

fn cmd_eval(args: &EvalArgs, ctx: &mut Ctx) -> CliResult<()> {
    if let Some(out) = &args.out {
        check_output(out, &[&args.a, &args.b])?;
    }
    let (a, a_bytes) = load_volume(&args.a, args.shape, args.dtype)?;
    let (b, b_bytes) = load_volume(&args.b, args.shape, args.dtype)?;
    let report = MetricReport::evaluate(&a, &b, &args.metrics)?;
    emit_json(ctx, "eval", args, &report, args.out.as_deref(), &[(&args.a, &a_bytes), (&args.b, &b_bytes)])
}

fn emit_json(
    ctx: &mut Ctx,
    command: &str,
    args: &impl Serialize,
    report: &impl Serialize,
    out: Option<&Path>,
    inputs: &[(&Path, &[u8])],
) -> CliResult<()> {
    if let Some(out) = out {
        let bytes = serde_json::to_vec_pretty(report).expect("report serializes");
        write_file(out, &bytes)?;
        ctx.write_manifest(command, args, serde_json::Value::Null, None, inputs, out, sha256_hex(&bytes), Vec::new())?;
    }
    ctx.print_json(report)
}

/// Output schema of `analyze`.
#[derive(Debug, Serialize)]
pub struct AnalyzeReport {
    pub dims: [usize; 3],
    pub dtype: Dtype,
    pub band: f64,
    pub complexity: f64,
    pub levels: u32,
    pub regions: usize,
    pub global_consistency: f64,
    pub suggested_inter_ratio: f64,
    /// One score per region in z-curve order.
    pub region_scores: Vec<f64>,
}

fn cmd_analyze(args: &AnalyzeArgs, ctx: &mut Ctx) -> CliResult<()> {
    if !(args.band > 0.0 && args.band <= 0.5) {
        return Err(ConfigError::Invalid(format!("band must be in (0, 0.5], got {}", args.band)).into());
    }
    for out in args.out.iter().chain(&args.matrix_csv) {
        check_output(out, &[&args.input.input])?;
    }
    let (volume, bytes) = load_volume(&args.input.input, args.input.shape, args.input.dtype)?;
    let sim = region_similarity(&volume, args.levels)?;
    let report = AnalyzeReport {
        dims: volume.dims(),
        dtype: volume.dtype(),
        band: args.band,
        complexity: complexity(&volume, args.band),
        levels: args.levels,
        regions: sim.scores.len(),
        global_consistency: sim.global_consistency,
        suggested_inter_ratio: suggest_inter_ratio(sim.global_consistency),
        region_scores: sim.scores.clone(),
    };
    if let Some(path) = &args.matrix_csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &sim.raw {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        let data = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
        write_file(path, &data)?;
        ctx.write_manifest(
            "analyze",
            args,
            serde_json::Value::Null,
            None,
            &[(&args.input.input, &bytes)],
            path,
            sha256_hex(&data),
            Vec::new(),
        )?;
    }
    emit_json(ctx, "analyze", args, &report, args.out.as_deref(), &[(&args.input.input, &bytes)])
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Run(Error::Io(std::io::Error::other(e.to_string())))
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => x.to_string(),
        None => String::new(),
    }
}

struct SweepRow {
    ratio: f64,
    levels: u32,
    inter_ratio: String,
    alloc: AllocArg,
    status: String,
    metrics: Option<MetricReport>,
    achieved_ratio: Option<f64>,
    wall_time: f64,
}

fn cmd_sweep(args: &SweepArgs, ctx: &mut Ctx) -> CliResult<()> {
    for &r in &args.ratios {
        check_ratio(r)?;
    }
    for &l in &args.levels {
        TreeConfig::new(l, args.hyper_depth)?;
    }
    TrainConfig {
        iterations: args.iters,
        base_lr: args.lr,
        batch_per_leaf: args.batch_per_leaf,
        ..TrainConfig::default()
    }
    .validate()?;
    check_output(&args.out, &[&args.input.input])?;
    let (volume, bytes) = load_volume(&args.input.input, args.input.shape, args.input.dtype)?;

    let mut auto_cache = None;
    let mut rows = Vec::new();
    for &ratio in &args.ratios {
        for &levels in &args.levels {
            for inter in &args.inter_ratios {
                let (inter_ratio, label) = match inter {
                    InterRatioArg::Fixed(r) => (r.clone(), inter_label(r)),
                    InterRatioArg::Auto => {
                        if auto_cache.is_none() {
                            auto_cache = Some(auto_inter_ratio(&volume)?.0);
                        }
                        let r = auto_cache.unwrap();
                        (InterLevelRatio::Uniform(r), format!("auto:{r}"))
                    }
                };
                for &alloc in &args.allocs {
                    let start = Instant::now();
                    let outcome = tree_and_policy(
                        levels,
                        args.hyper_depth,
                        inter_ratio.clone(),
                        alloc,
                        args.imp_threshold,
                        args.floor_fraction,
                    )
                    .and_then(|(tree, policy)| {
                        let opts = CompressOptions {
                            tree,
                            policy,
                            train: TrainConfig {
                                iterations: args.iters,
                                base_lr: args.lr,
                                batch_per_leaf: args.batch_per_leaf,
                                seed: args.seed,
                                threads: ctx.threads,
                                ..TrainConfig::default()
                            },
                            metrics: args.metrics.clone(),
                        };
                        Ok(compress(&volume, ratio, &opts)?)
                    });
                    let (status, metrics, achieved) = match outcome {
                        Ok((_, report)) => ("ok".to_string(), report.metrics, Some(report.achieved_ratio)),
                        Err(CliError::Run(e @ (Error::Config(_) | Error::Diverged { .. }))) => {
                            log::warn!("ratio {ratio}, {levels} levels, r {label}: {e}");
                            (e.class().to_string(), None, None)
                        }
                        Err(e) => return Err(e),
                    };
                    rows.push(SweepRow {
                        ratio,
                        levels,
                        inter_ratio: label.clone(),
                        alloc,
                        status,
                        metrics,
                        achieved_ratio: achieved,
                        wall_time: start.elapsed().as_secs_f64(),
                    });
                }
            }
        }
    }

    let (csv_bytes, digest_bytes) = sweep_csv(&rows, &args.metrics)?;
    write_file(&args.out, &csv_bytes)?;
    ctx.write_manifest(
        "sweep",
        args,
        serde_json::Value::Null,
        Some(args.seed),
        &[(&args.input.input, &bytes)],
        &args.out,
        sha256_hex(&digest_bytes),
        vec![WALL_TIME_COLUMN.into()],
    )?;
    writeln!(ctx.stdout, "{} rows written to {}", rows.len(), args.out.display()).map_err(|e| CliError::Run(e.into()))
}

fn inter_label(r: &InterLevelRatio) -> String {
    match r {
        InterLevelRatio::Uniform(r) => r.to_string(),
        InterLevelRatio::PerLevel(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"),
    }
}

/// Returns the CSV and the same CSV with the wall-time column blanked.
fn sweep_csv(rows: &[SweepRow], metrics: &[MetricSpec]) -> CliResult<(Vec<u8>, Vec<u8>)> {
    let mut header: Vec<String> = ["ratio", "levels", "inter_ratio", "alloc", "status"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(metrics.iter().map(MetricSpec::key));
    header.extend(["achieved_ratio", "ssim_growth", WALL_TIME_COLUMN].map(String::from));

    let baseline = |row: &SweepRow| {
        rows.iter()
            .find(|b| {
                b.levels == 1
                    && b.ratio == row.ratio
                    && b.inter_ratio == row.inter_ratio
                    && b.alloc == row.alloc
            })
            .and_then(|b| b.metrics.as_ref()?.ssim)
    };

    let mut full = csv::Writer::from_writer(Vec::new());
    let mut stable = csv::Writer::from_writer(Vec::new());
    full.write_record(&header).map_err(csv_err)?;
    stable.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let m = row.metrics.as_ref();
        let mut rec = vec![
            row.ratio.to_string(),
            row.levels.to_string(),
            row.inter_ratio.clone(),
            format!("{:?}", row.alloc).to_lowercase(),
            row.status.clone(),
        ];
        for spec in metrics {
            rec.push(match spec {
                MetricSpec::Psnr => fmt_metric(m.and_then(|m| m.psnr)),
                MetricSpec::Ssim => fmt_metric(m.and_then(|m| m.ssim)),
                MetricSpec::Acc(_) => fmt_metric(m.and_then(|m| m.acc.get(&spec.key()).copied())),
            });
        }
        rec.push(fmt_metric(row.achieved_ratio));
        let growth = match (m.and_then(|m| m.ssim), baseline(row)) {
            (Some(s), Some(b)) if b != 0.0 => Some((s - b) / b),
            _ => None,
        };
        rec.push(fmt_metric(growth));
        let mut blank = rec.clone();
        rec.push(format!("{:.3}", row.wall_time));
        blank.push(String::new());
        full.write_record(&rec).map_err(csv_err)?;
        stable.write_record(&blank).map_err(csv_err)?;
    }
    let finish = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| csv_err(e.into_error().into()));
    Ok((finish(full)?, finish(stable)?))
}

/// Blanks the named columns of a CSV so timing does not affect its digest.
fn csv_without(bytes: &[u8], excluded: &[String]) -> CliResult<Vec<u8>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let header = reader.headers().map_err(csv_err)?.clone();
    let skip: Vec<bool> = header.iter().map(|h| excluded.iter().any(|e| e == h)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(csv_err)?;
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        w.write_record(rec.iter().zip(&skip).map(|(v, &s)| if s { "" } else { v }))
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| csv_err(e.into_error().into()))
}

fn cmd_replay(args: &ReplayArgs, ctx: &mut Ctx) -> CliResult<()> {
    let bytes = read_file(&args.manifest)?;
    let manifest: RunManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::MalformedInput(format!("{}: {e}", args.manifest.display())))?;
    if manifest.argv.first().map(String::as_str) == Some("replay") {
        return Err(CliError::Usage("a manifest cannot replay another replay".into()));
    }
    let mut argv = vec!["tinc".to_string()];
    argv.extend(manifest.argv.iter().cloned());
    run(argv, ctx.stdout)?;
    let output = read_file(Path::new(&manifest.output))?;
    let output = if manifest.digest_excludes.is_empty() {
        output
    } else {
        csv_without(&output, &manifest.digest_excludes)?
    };
    let digest = sha256_hex(&output);
    if digest != manifest.output_digest {
        return Err(Error::MalformedInput(format!(
            "replay of {} produced digest {digest}, manifest records {}",
            manifest.output, manifest.output_digest
        ))
        .into());
    }
    writeln!(ctx.stdout, "reproduced {} ({digest})", manifest.output).map_err(|e| CliError::Run(e.into()))
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(stdout, "{e}").map_err(|e| CliError::Run(e.into()))?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(first_line(&e.to_string()))),
    };
    let recorded: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let threads = threads_from_env()?;
    let mut ctx = Ctx {
        argv: &recorded,
        threads,
        stdout,
    };
    match &cli.command {
        Command::Compress(a) => cmd_compress(a, &mut ctx),
        Command::Decompress(a) => cmd_decompress(a, &mut ctx),
        Command::Eval(a) => cmd_eval(a, &mut ctx),
        Command::Analyze(a) => cmd_analyze(a, &mut ctx),
        Command::Sweep(a) => cmd_sweep(a, &mut ctx),
        Command::Replay(a) => cmd_replay(a, &mut ctx),
    }
}

fn first_line(s: &str) -> String {
    let line = s.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
    line.trim_start_matches("error: ").trim().to_string()
}

/// `error[<class>]: <message>` on one line.
pub fn format_error(e: &CliError) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error[{}]: {msg}", e.class())
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(argv, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", format_error(&e));
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn run_capture(args: &[&str]) -> (CliResult<()>, String) {
        let mut out = Vec::new();
        let mut argv = vec!["tinc"];
        argv.extend_from_slice(args);
        let r = run(argv, &mut out);
        (r, String::from_utf8(out).unwrap())
    }

    #[test]
    fn parses_inter_ratio_forms() {
        assert_eq!(parse_inter_ratio("auto").unwrap(), InterRatioArg::Auto);
        assert_eq!(
            parse_inter_ratio("1.2").unwrap(),
            InterRatioArg::Fixed(InterLevelRatio::Uniform(1.2))
        );
        assert_eq!(
            parse_inter_ratio("1.2,0.8").unwrap(),
            InterRatioArg::Fixed(InterLevelRatio::PerLevel(vec![1.2, 0.8]))
        );
        assert!(parse_inter_ratio("-1").is_err());
        assert!(parse_inter_ratio("x").is_err());
    }

    #[test]
    fn parses_shape() {
        assert_eq!(parse_shape("4,8,16").unwrap(), [4, 8, 16]);
        assert!(parse_shape("4,8").is_err());
        assert!(parse_shape("0,8,8").is_err());
    }

    #[test]
    fn usage_errors_are_one_line() {
        let (r, _) = run_capture(&["compress", "--ratio", "abc"]);
        let e = r.unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(!format_error(&e).contains('\n'));
        assert!(format_error(&e).starts_with("error[usage]: "));
    }

    #[test]
    fn help_is_not_an_error() {
        let (r, out) = run_capture(&["--help"]);
        assert!(r.is_ok());
        assert!(out.contains("compress"));
    }

    #[test]
    fn manifest_path_appends_suffix() {
        assert_eq!(manifest_path(Path::new("a/b.tinc")), PathBuf::from("a/b.tinc.manifest.json"));
    }

    #[test]
    fn blanked_csv_matches() {
        let rows = vec![SweepRow {
            ratio: 64.0,
            levels: 1,
            inter_ratio: "1".into(),
            alloc: AllocArg::Even,
            status: "ok".into(),
            metrics: None,
            achieved_ratio: Some(65.0),
            wall_time: 1.25,
        }];
        let (full, stable) = sweep_csv(&rows, &[MetricSpec::Psnr]).unwrap();
        assert_ne!(full, stable);
        assert_eq!(csv_without(&full, &[WALL_TIME_COLUMN.into()]).unwrap(), stable);
    }

    #[test]
    fn eval_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tvol");
        let v = Volume::from_array(Array3::from_shape_fn((8, 8, 8), |(z, y, x)| (z + y * x) as f32), Dtype::U8)
            .unwrap();
        std::fs::write(&p, v.to_tvol_bytes()).unwrap();
        let ps = p.to_str().unwrap();
        let (r, out) = run_capture(&["eval", "--a", ps, "--b", ps, "--metrics", "psnr,ssim,acc:3"]);
        r.unwrap();
        let json: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(json["psnr"], "inf");
        assert_eq!(json["ssim"], 1.0);
        assert_eq!(json["acc:3"], 1.0);
        assert_eq!(json.as_object().unwrap().len(), 3);
    }
}
