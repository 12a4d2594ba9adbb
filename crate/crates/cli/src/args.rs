use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use resforge_core::packer::DEFAULT_SEQ_LEN;
use resforge_core::{Dtype, Variant};

use crate::count::parse_count;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  usage or configuration error
  2  incompatible checkpoints or gate denial
  3  I/O or format error
  4  non-finite values produced";

#[derive(Debug, Parser)]
#[command(name = "resforge", version, about = "Instruction residual extraction and application", after_help = EXIT_CODES, args_override_self = true)]
pub struct Cli {
    /// Flat key=value file supplying defaults for long flags.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    pub log_level: LogLevel,

    /// Byte-identical output for identical inputs (omits timings).
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl From<LogLevel> for log::LevelFilter {
    fn from(l: LogLevel) -> Self {
        match l {
            LogLevel::Off => log::LevelFilter::Off,
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write `instruct - base` as a residual archive.
    Extract(ExtractArgs),
    /// Gate, then write `target + alpha * residual`.
    Apply(ApplyArgs),
    /// Per-tensor difference report of `a - b` as JSON lines.
    Diff(DiffArgs),
    /// Compatibility and lineage gate without merging.
    Check(CheckArgs),
    /// Pack tokenized documents into fixed-length sequences.
    Pack(PackArgs),
    /// Training compute estimate.
    Flops(FlopsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AccumulationArg {
    F32,
    F64,
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    s.to_ascii_uppercase().parse().map_err(|e| format!("{e}"))
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct CompatArgs {
    /// Skip tensors present in only one checkpoint, with a warning.
    #[arg(long)]
    pub allow_missing: bool,

    /// Leave tensors whose names match this regex untouched (repeatable).
    #[arg(long = "exclude", value_name = "REGEX")]
    pub exclude: Vec<String>,
}

#[derive(Debug, Args)]
pub struct LineageArgs {
    /// Lineage family of the target; read from its metadata when omitted.
    #[arg(long)]
    pub target_family: Option<String>,
    #[arg(long, value_parser = parse_variant, requires = "target_family")]
    pub target_variant: Option<Variant>,
    #[arg(long)]
    pub residual_family: Option<String>,
    #[arg(long, value_parser = parse_variant, requires = "residual_family")]
    pub residual_variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long, value_name = "PATH")]
    pub instruct: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub base: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = AccumulationArg::F32)]
    pub accumulation: AccumulationArg,
    /// Storage dtype of the residual (F32 or F64 are lossless choices).
    #[arg(long, value_parser = parse_dtype, default_value = "F32")]
    pub residual_dtype: Dtype,
    /// Alpha recorded as the residual's default scale.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub alpha_default: f64,
    #[command(flatten)]
    pub compat: CompatArgs,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    /// Checkpoint receiving the residual.
    #[arg(long, visible_alias = "base", value_name = "PATH")]
    pub target: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub residual: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Residual scale; defaults to the residual's recorded alpha.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum, default_value_t = AccumulationArg::F32)]
    pub accumulation: AccumulationArg,
    /// Output dtype; defaults to each target tensor's dtype.
    #[arg(long, value_parser = parse_dtype)]
    pub output_dtype: Option<Dtype>,
    #[command(flatten)]
    pub compat: CompatArgs,
    #[command(flatten)]
    pub lineage: LineageArgs,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Target (or first) checkpoint.
    pub a: PathBuf,
    /// Residual (or second) checkpoint.
    pub b: PathBuf,
    /// Compare names and shapes only.
    #[arg(long)]
    pub ignore_dtype: bool,
    #[command(flatten)]
    pub compat: CompatArgs,
    #[command(flatten)]
    pub lineage: LineageArgs,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    /// Input JSON lines, one document per line; `-` reads standard input.
    pub input: PathBuf,
    /// Output JSON lines; `-` writes standard output.
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    pub seq_len: usize,
    /// Split documents longer than the sequence length (default).
    #[arg(long, overrides_with = "no_split_long")]
    pub split_long: bool,
    /// Reject documents longer than the sequence length.
    #[arg(long, overrides_with = "split_long")]
    pub no_split_long: bool,
    #[arg(long, default_value_t = 0)]
    pub pad_id: u32,
}

impl PackArgs {
    pub fn split(&self) -> bool {
        !self.no_split_long
    }
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
pub struct FlopsArgs {
    #[command(subcommand)]
    pub ratio: Option<FlopsCommand>,

    /// Parameter count (accepts 8B, 100M, 8e9).
    #[arg(long, value_parser = parse_count, required = true)]
    pub params: Option<u64>,
    /// Training tokens per epoch; or give --samples and --max-seq-len.
    #[arg(long, value_parser = parse_count, required_unless_present = "samples", conflicts_with = "samples")]
    pub tokens: Option<u64>,
    /// Sample count, converted to an upper bound on tokens.
    #[arg(long, value_parser = parse_count, requires = "max_seq_len")]
    pub samples: Option<u64>,
    #[arg(long, value_parser = parse_count)]
    pub max_seq_len: Option<u64>,
    #[arg(long, value_parser = parse_count, required = true)]
    pub epochs: Option<u64>,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Hardware preset for a wallclock estimate (a100-40g).
    #[arg(long)]
    pub hw: Option<String>,
    #[arg(long, default_value = "bf16", requires = "hw")]
    pub precision: String,
    /// Fraction of peak throughput achieved, in (0, 1].
    #[arg(long, default_value_t = 1.0, requires = "hw")]
    pub util: f64,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Operations per parameter per token (sensitivity studies only).
    #[arg(long, default_value_t = resforge_core::flops::FLOPS_PER_PARAM)]
    pub flops_per_param: u64,
}

#[derive(Debug, Subcommand)]
pub enum FlopsCommand {
    /// Exact ratio of two training budgets.
    Ratio(RatioArgs),
}

#[derive(Debug, Args)]
pub struct RatioArgs {
    /// Numerator as PARAMS:TOKENS:EPOCHS, e.g. 8B:204800M:5.
    #[arg(long, value_parser = parse_spec)]
    pub a: SpecArg,
    /// Denominator as PARAMS:TOKENS:EPOCHS.
    #[arg(long, value_parser = parse_spec)]
    pub b: SpecArg,
    #[command(flatten)]
    pub cost: CostArgs,
}

#[derive(Debug, Clone, Copy)]
pub struct SpecArg {
    pub params: u64,
    pub tokens: u64,
    pub epochs: u64,
}

fn parse_spec(s: &str) -> Result<SpecArg, String> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [p, t, e] => Ok(SpecArg {
            params: parse_count(p)?,
            tokens: parse_count(t)?,
            epochs: parse_count(e)?,
        }),
        [p, t] => Ok(SpecArg {
            params: parse_count(p)?,
            tokens: parse_count(t)?,
            epochs: 1,
        }),
        _ => Err(format!("expected PARAMS:TOKENS[:EPOCHS], got {s:?}")),
    }
}
