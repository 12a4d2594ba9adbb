use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use resforge_core::flops::{self, CostModel, HardwareProfile};
use resforge_core::packer::{read_docs, write_sequence, write_stats};
use resforge_core::{
    apply_residual, check_compat, diff_report, extract_residual, gate, Accumulation, Archive, GateReport, LineageTag,
    MergePolicy, Mismatch, MissingTensor, OutputDtype, PackConfig, Packer, ResidualSet, Variant,
};
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::args::{
    AccumulationArg, ApplyArgs, CheckArgs, Cli, Command, CompatArgs, CostArgs, DiffArgs, ExtractArgs, FlopsArgs,
    FlopsCommand, LineageArgs, PackArgs, RatioArgs, SpecArg,
};
use crate::failure::Failure;

pub fn run(cli: Cli) -> Result<(), Failure> {
    let timer = Timer {
        start: Instant::now(),
        enabled: !cli.deterministic,
    };
    match cli.command {
        Command::Extract(a) => extract(a, timer),
        Command::Apply(a) => apply(a, timer),
        Command::Diff(a) => diff(a),
        Command::Check(a) => check(a),
        Command::Pack(a) => pack(a),
        Command::Flops(a) => flops_cmd(a),
    }
}

/// Wallclock reported in JSON unless output must be deterministic.
struct Timer {
    start: Instant,
    enabled: bool,
}

impl Timer {
    fn elapsed_ms(&self) -> Option<u64> {
        self.enabled.then(|| self.start.elapsed().as_millis() as u64)
    }
}

fn emit<T: Serialize>(value: &T) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Runs `body` against a temp file next to `path` and renames it into place
/// only on success. `-` streams to standard output instead.
fn write_output<F>(path: &Path, body: F) -> Result<(), Failure>
where
    F: FnOnce(&mut dyn Write) -> Result<(), Failure>,
{
    if path == Path::new("-") {
        let mut out = BufWriter::new(io::stdout().lock());
        body(&mut out)?;
        out.flush()?;
        return Ok(());
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let temp = NamedTempFile::new_in(dir)?;
    let mut out = BufWriter::new(temp);
    body(&mut out)?;
    let temp = out.into_inner().map_err(|e| e.into_error())?;
    temp.as_file().sync_all()?;
    temp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn open(path: &Path) -> Result<Archive, Failure> {
    Archive::open(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn compat_policy(args: &CompatArgs) -> Result<MergePolicy, Failure> {
    let mut policy = MergePolicy::default();
    if args.allow_missing {
        policy = policy.with_missing(MissingTensor::SkipWithWarning);
    }
    for pattern in &args.exclude {
        policy = policy
            .with_exclude(pattern)
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(policy)
}

fn accumulation(a: AccumulationArg) -> Accumulation {
    match a {
        AccumulationArg::F32 => Accumulation::F32,
        AccumulationArg::F64 => Accumulation::F64,
    }
}

fn describe(mismatches: &[Mismatch]) -> String {
    mismatches
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

fn lineage_tag(
    family: &Option<String>,
    variant: Option<Variant>,
    metadata: &BTreeMap<String, String>,
    role: &str,
) -> Result<Option<LineageTag>, Failure> {
    match (family, variant) {
        (Some(f), Some(v)) => LineageTag::new(f.clone(), v).map(Some).map_err(Failure::Usage),
        (Some(_), None) => Err(Failure::Usage(format!("--{role}-family requires --{role}-variant"))),
        _ => LineageTag::from_metadata(metadata)
            .transpose()
            .map_err(|e| Failure::Io(format!("{role} lineage metadata: {e}"))),
    }
}

fn gate_report(
    target: &Archive,
    residual: &Archive,
    lineage: &LineageArgs,
    policy: &MergePolicy,
) -> Result<GateReport, Failure> {
    let t = lineage_tag(
        &lineage.target_family,
        lineage.target_variant,
        target.metadata(),
        "target",
    )?;
    let r = lineage_tag(
        &lineage.residual_family,
        lineage.residual_variant,
        residual.metadata(),
        "residual",
    )?;
    let report = gate(
        &target.signature(),
        &residual.signature(),
        t.as_ref(),
        r.as_ref(),
        policy,
    );
    eprint!("{}", report.render_text());
    Ok(report)
}

#[derive(Serialize)]
struct ExtractOutput<'a> {
    output: &'a Path,
    content_hash: String,
    residual_dtype: String,
    tensor_count: usize,
    global_l2: f64,
    zero_residual: bool,
    warnings: &'a [Mismatch],
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_ms: Option<u64>,
}

fn extract(args: ExtractArgs, timer: Timer) -> Result<(), Failure> {
    let policy = compat_policy(&args.compat)?
        .with_accumulation(accumulation(args.accumulation))
        .with_residual_dtype(args.residual_dtype)
        .with_alpha(args.alpha_default);
    let instruct = open(&args.instruct)?;
    let base = open(&args.base)?;
    log::info!("extracting {} - {}", args.instruct.display(), args.base.display());
    let ex = extract_residual(&instruct, &base, &policy, &args.out)?;
    for w in &ex.warnings {
        log::warn!("tensor skipped: {w}");
    }
    emit(&ExtractOutput {
        output: &args.out,
        content_hash: ex.hash.to_string(),
        residual_dtype: args.residual_dtype.to_string(),
        tensor_count: ex.report.tensor_count,
        global_l2: ex.report.global_l2,
        zero_residual: ex.is_zero(),
        warnings: &ex.warnings,
        elapsed_ms: timer.elapsed_ms(),
    })
}

#[derive(Serialize)]
struct ApplyOutput<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    content_hash: Option<String>,
    alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    applied: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    passed_through: Option<usize>,
    gate: &'a GateReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_ms: Option<u64>,
}

fn apply(args: ApplyArgs, timer: Timer) -> Result<(), Failure> {
    let target = open(&args.target)?;
    let residual =
        ResidualSet::open(&args.residual).map_err(|e| Failure::Io(format!("{}: {e}", args.residual.display())))?;
    let alpha = args.alpha.unwrap_or(residual.provenance().alpha_default);
    let mut policy = compat_policy(&args.compat)?
        .with_alpha(alpha)
        .with_accumulation(accumulation(args.accumulation));
    // Residual storage dtype legitimately differs from the target's.
    policy.strict_dtype = false;
    if let Some(d) = args.output_dtype {
        policy = policy.with_output_dtype(OutputDtype::Explicit(d));
    }

    let report = gate_report(&target, residual.archive(), &args.lineage, &policy)?;
    let mut out = ApplyOutput {
        output: None,
        content_hash: None,
        alpha,
        applied: None,
        passed_through: None,
        gate: &report,
        elapsed_ms: None,
    };
    if !report.allowed() {
        emit(&out)?;
        return Err(Failure::Incompatible(format!(
            "gate denied: {}",
            describe(&report.mismatches)
        )));
    }

    log::info!(
        "applying {} onto {} (alpha {alpha})",
        args.residual.display(),
        args.target.display()
    );
    let app = apply_residual(&target, &residual, &policy, &args.out)?;
    out.output = Some(&args.out);
    out.content_hash = Some(app.hash.to_string());
    out.applied = Some(app.applied);
    out.passed_through = Some(app.passed_through);
    out.elapsed_ms = timer.elapsed_ms();
    emit(&out)
}

fn diff(args: DiffArgs) -> Result<(), Failure> {
    let a = open(&args.a)?;
    let b = open(&args.b)?;
    let report = diff_report(&a, &b)?;
    log::info!("{} tensors, global l2 {}", report.tensor_count, report.global_l2);
    let dest = args.out.unwrap_or_else(|| PathBuf::from("-"));
    write_output(&dest, |w| Ok(report.write_jsonl(w)?))
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    compatible: bool,
    #[serde(flatten)]
    gate: &'a GateReport,
}

fn check(args: CheckArgs) -> Result<(), Failure> {
    let a = open(&args.a)?;
    let b = open(&args.b)?;
    let mut policy = compat_policy(&args.compat)?;
    policy.strict_dtype = !args.ignore_dtype;
    let report = gate_report(&a, &b, &args.lineage, &policy)?;
    debug_assert_eq!(
        report.allowed(),
        check_compat(&a.signature(), &b.signature(), &policy).is_ok()
    );
    emit(&CheckOutput {
        compatible: report.allowed(),
        gate: &report,
    })?;
    if report.allowed() {
        Ok(())
    } else {
        Err(Failure::Incompatible(format!(
            "incompatible checkpoints: {}",
            describe(&report.mismatches)
        )))
    }
}

fn pack(args: PackArgs) -> Result<(), Failure> {
    let config = PackConfig {
        seq_len: args.seq_len,
        split_long_docs: args.split(),
        pad_id: args.pad_id,
    };
    let mut packer = Packer::new(config)?;
    let reader: Box<dyn BufRead> = if args.input == Path::new("-") {
        Box::new(io::stdin().lock())
    } else {
        let f = File::open(&args.input).map_err(|e| Failure::Io(format!("{}: {e}", args.input.display())))?;
        Box::new(BufReader::new(f))
    };
    let pad = args.pad_id;
    write_output(&args.output, |w| {
        for doc in read_docs(reader) {
            for seq in packer.push(doc?)? {
                write_sequence(&mut *w, &seq, pad)?;
            }
        }
        let (last, stats) = packer.finish()?;
        if let Some(seq) = last {
            write_sequence(&mut *w, &seq, pad)?;
        }
        write_stats(&mut *w, &stats)?;
        log::info!(
            "{} documents, {} tokens, {} sequences, padding fraction {:.4}",
            stats.corpus.doc_count,
            stats.corpus.token_count,
            stats.sequence_count,
            stats.padding_fraction
        );
        Ok(())
    })
}

#[derive(Serialize)]
struct SpecOutput {
    params: u64,
    tokens: u64,
    epochs: u64,
    flops_per_param: u64,
    flops_per_token: u128,
    training_flops: u128,
    training_flops_sci: String,
}

fn spec_output(model: &CostModel, spec: &flops::FlopsSpec) -> Result<SpecOutput, Failure> {
    let total = model.training_flops(spec)?;
    Ok(SpecOutput {
        params: spec.params,
        tokens: spec.tokens,
        epochs: spec.epochs,
        flops_per_param: model.flops_per_param,
        flops_per_token: model.flops_per_token(spec.params),
        training_flops: total,
        training_flops_sci: format!("{:e}", total as f64),
    })
}

#[derive(Serialize)]
struct Wallclock {
    hardware: String,
    precision: String,
    peak_flops: f64,
    utilization: f64,
    seconds: f64,
    days: f64,
}

#[derive(Serialize)]
struct FlopsOutput {
    #[serde(flatten)]
    spec: SpecOutput,
    /// True when tokens were derived from samples times the maximum length.
    tokens_upper_bound: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    wallclock: Option<Wallclock>,
}

fn cost_model(args: &CostArgs) -> Result<CostModel, Failure> {
    if args.flops_per_param != flops::FLOPS_PER_PARAM {
        log::warn!("overriding flops per parameter per token with {}", args.flops_per_param);
    }
    Ok(CostModel::new(args.flops_per_param)?)
}

fn flops_cmd(args: FlopsArgs) -> Result<(), Failure> {
    if let Some(FlopsCommand::Ratio(r)) = args.ratio {
        return ratio(r);
    }
    let model = cost_model(&args.cost)?;
    let params = args
        .params
        .ok_or_else(|| Failure::Usage("--params is required".into()))?;
    let (tokens, upper_bound) = match (args.tokens, args.samples, args.max_seq_len) {
        (Some(t), _, _) => (t, false),
        (None, Some(s), Some(l)) => (flops::tokens_upper_bound(s, l)?, true),
        _ => return Err(Failure::Usage("give --tokens, or --samples with --max-seq-len".into())),
    };
    let epochs = args
        .epochs
        .ok_or_else(|| Failure::Usage("--epochs is required".into()))?;
    let spec = flops::FlopsSpec::new(params, tokens, epochs)?;
    let out = spec_output(&model, &spec)?;
    let wallclock = match &args.hw {
        None => None,
        Some(name) => {
            let hw = HardwareProfile::preset(name)
                .ok_or_else(|| Failure::Usage(format!("unknown hardware {name:?} (known: a100-40g)")))?;
            let peak = hw.peak(&args.precision).ok_or_else(|| {
                let known: Vec<_> = hw.peak_flops.keys().cloned().collect();
                Failure::Usage(format!(
                    "{} has no {:?} peak (known: {})",
                    hw.name,
                    args.precision,
                    known.join(", ")
                ))
            })?;
            let seconds = flops::wallclock_estimate(out.training_flops, peak, args.util)?;
            Some(Wallclock {
                hardware: hw.name,
                precision: args.precision.clone(),
                peak_flops: peak,
                utilization: args.util,
                seconds,
                days: seconds / 86_400.0,
            })
        }
    };
    emit(&FlopsOutput {
        spec: out,
        tokens_upper_bound: upper_bound,
        wallclock,
    })
}

#[derive(Serialize)]
struct RatioOutput {
    a: SpecOutput,
    b: SpecOutput,
    /// Reduced fraction, or an integer when exact.
    ratio: String,
    numerator: u128,
    denominator: u128,
    ratio_f64: f64,
}

fn ratio(args: RatioArgs) -> Result<(), Failure> {
    let model = cost_model(&args.cost)?;
    let spec = |s: SpecArg| flops::FlopsSpec::new(s.params, s.tokens, s.epochs);
    let (a, b) = (spec(args.a)?, spec(args.b)?);
    let r = model.flops_ratio(&a, &b)?;
    emit(&RatioOutput {
        a: spec_output(&model, &a)?,
        b: spec_output(&model, &b)?,
        ratio: r.to_string(),
        numerator: *r.numer(),
        denominator: *r.denom(),
        ratio_f64: flops::ratio_to_f64(&r),
    })
}
