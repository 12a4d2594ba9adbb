//! Instruction residuals: `residual = instruct - base`, and
//! `merged = target + alpha * residual`.
//!
//! Both operations stream: each tensor is processed in chunks of at most
//! [`STREAM_CHUNK_BYTES`] worth of promoted elements and written straight to
//! the output archive, so memory use is bounded by one chunk regardless of
//! checkpoint size. Output files appear only when the whole operation
//! succeeds.

use std::collections::BTreeMap;
use std::path::Path;

use crate::archive::{Archive, ArchiveWriter, ContentHash, TensorInfo, STREAM_CHUNK_BYTES};
use crate::compat::{check_compat, check_compat_ignoring_dtype, Mismatch};
use crate::diff::DiffReport;
use crate::dtype::Dtype;
use crate::error::{NonFiniteTensor, ResidualError};
use crate::kernel::{self, PairStats};
use crate::policy::{Accumulation, MergePolicy, OutputDtype};
use crate::scalar::{decode_into, encode_into, Scalar};
use crate::signature::{ModelSignature, SignatureEntry};

pub const KEY_INSTRUCT_SHA256: &str = "resforge.instruct_sha256";
pub const KEY_BASE_SHA256: &str = "resforge.base_sha256";
pub const KEY_ALPHA_DEFAULT: &str = "resforge.alpha_default";
pub const KEY_RESIDUAL_DTYPE: &str = "resforge.residual_dtype";
pub const KEY_TOOL_VERSION: &str = "resforge.tool_version";
/// Scale used when the residual was applied (merged outputs only).
pub const KEY_ALPHA: &str = "resforge.alpha";
pub const KEY_RESIDUAL_SHA256: &str = "resforge.residual_sha256";
pub const KEY_TARGET_SHA256: &str = "resforge.target_sha256";

pub const TOOL_VERSION: &str = concat!("resforge/", env!("CARGO_PKG_VERSION"));

/// Where a residual came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub instruct_hash: ContentHash,
    pub base_hash: ContentHash,
    pub alpha_default: f64,
    pub residual_dtype: Dtype,
    pub tool_version: String,
}

impl Provenance {
    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut md = BTreeMap::new();
        md.insert(KEY_INSTRUCT_SHA256.into(), self.instruct_hash.to_string());
        md.insert(KEY_BASE_SHA256.into(), self.base_hash.to_string());
        md.insert(KEY_ALPHA_DEFAULT.into(), format!("{:?}", self.alpha_default));
        md.insert(KEY_RESIDUAL_DTYPE.into(), self.residual_dtype.to_string());
        md.insert(KEY_TOOL_VERSION.into(), self.tool_version.clone());
        md
    }

    pub fn from_metadata(md: &BTreeMap<String, String>) -> Result<Self, ResidualError> {
        let get = |k: &str| md.get(k).ok_or_else(|| ResidualError::MissingProvenance(k.to_string()));
        let bad = |k: &str, v: &str| ResidualError::InvalidResidual(format!("{k} has invalid value {v:?}"));
        let hash = |k: &str| -> Result<ContentHash, ResidualError> {
            let v = get(k)?;
            v.parse().map_err(|_| bad(k, v))
        };
        let alpha = get(KEY_ALPHA_DEFAULT)?;
        let dtype = get(KEY_RESIDUAL_DTYPE)?;
        Ok(Self {
            instruct_hash: hash(KEY_INSTRUCT_SHA256)?,
            base_hash: hash(KEY_BASE_SHA256)?,
            alpha_default: alpha
                .parse::<f64>()
                .ok()
                .filter(|a| a.is_finite())
                .ok_or_else(|| bad(KEY_ALPHA_DEFAULT, alpha))?,
            residual_dtype: dtype.parse().map_err(|_| bad(KEY_RESIDUAL_DTYPE, dtype))?,
            tool_version: get(KEY_TOOL_VERSION)?.clone(),
        })
    }
}

/// An opened residual archive together with its provenance.
#[derive(Debug)]
pub struct ResidualSet {
    archive: Archive,
    provenance: Provenance,
}

impl ResidualSet {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ResidualError> {
        Self::from_archive(Archive::open(path)?)
    }

    /// Validates provenance metadata and that every tensor is stored in the
    /// recorded residual dtype.
    pub fn from_archive(archive: Archive) -> Result<Self, ResidualError> {
        let provenance = Provenance::from_metadata(archive.metadata())?;
        if let Some(t) = archive.tensors().iter().find(|t| t.dtype != provenance.residual_dtype) {
            return Err(ResidualError::InvalidResidual(format!(
                "tensor {:?} is {} but residual dtype is {}",
                t.name, t.dtype, provenance.residual_dtype
            )));
        }
        Ok(Self { archive, provenance })
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn signature(&self) -> ModelSignature {
        self.archive.signature()
    }

    /// Extracting a checkpoint against itself is allowed but suspicious.
    pub fn is_self_residual(&self) -> bool {
        self.provenance.instruct_hash == self.provenance.base_hash
    }
}

#[derive(Debug)]
pub struct Extraction {
    pub residual: ResidualSet,
    /// Statistics of `instruct - base` per extracted tensor.
    pub report: DiffReport,
    pub warnings: Vec<Mismatch>,
    pub hash: ContentHash,
}

impl Extraction {
    pub fn is_zero(&self) -> bool {
        self.report.is_zero()
    }
}

#[derive(Debug, Clone)]
pub struct Application {
    pub hash: ContentHash,
    pub warnings: Vec<Mismatch>,
    /// Tensors that received a residual.
    pub applied: usize,
    /// Tensors copied from the target unchanged.
    pub passed_through: usize,
}

#[derive(Default)]
struct NonFinite {
    found: Vec<NonFiniteTensor>,
}

impl NonFinite {
    fn scan(&mut self, name: &str, dtype: Dtype, bytes: &[u8], start: usize) {
        let mut it = kernel::non_finite_indices(dtype, bytes);
        let Some(first) = it.next() else { return };
        let count = 1 + it.count() as u64;
        match self.found.last_mut() {
            Some(t) if t.name == name => t.count += count,
            _ => self.found.push(NonFiniteTensor {
                name: name.to_string(),
                count,
                first_index: (start + first) as u64,
            }),
        }
    }
}

struct Scratch<A> {
    raw_a: Vec<u8>,
    raw_b: Vec<u8>,
    va: Vec<A>,
    vb: Vec<A>,
    out: Vec<u8>,
}

impl<A: Scalar> Scratch<A> {
    fn new() -> Self {
        Self {
            raw_a: Vec::new(),
            raw_b: Vec::new(),
            va: Vec::new(),
            vb: Vec::new(),
            out: Vec::new(),
        }
    }
}

const CHUNK_ELEMS: usize = STREAM_CHUNK_BYTES / 8;

/// Reads elements `[start, start + n)` of `info` promoted to `A`.
fn load<A: Scalar>(
    archive: &Archive,
    info: &TensorInfo,
    start: usize,
    n: usize,
    raw: &mut Vec<u8>,
    vals: &mut Vec<A>,
) -> Result<(), ResidualError> {
    let w = info.dtype.byte_width();
    raw.resize(n * w, 0);
    archive.read_into(info, (start * w) as u64, raw)?;
    vals.resize(n, A::zero());
    decode_into(info.dtype, raw, vals);
    Ok(())
}

fn extract_tensor<A: Scalar>(
    instruct: &Archive,
    ii: &TensorInfo,
    base: &Archive,
    ib: &TensorInfo,
    out_dtype: Dtype,
    writer: &mut ArchiveWriter,
    non_finite: &mut NonFinite,
) -> Result<PairStats<f64>, ResidualError> {
    let mut s = Scratch::<A>::new();
    let mut diff: Vec<A> = Vec::new();
    let mut stats = PairStats::default();
    let numel = ii.numel() as usize;
    let mut start = 0;
    while start < numel {
        let n = (numel - start).min(CHUNK_ELEMS);
        load(instruct, ii, start, n, &mut s.raw_a, &mut s.va)?;
        load(base, ib, start, n, &mut s.raw_b, &mut s.vb)?;
        diff.resize(n, A::zero());
        stats = stats.merge(kernel::subtract(&s.va, &s.vb, &mut diff));
        s.out.resize(n * out_dtype.byte_width(), 0);
        encode_into(&diff, out_dtype, &mut s.out);
        non_finite.scan(&ii.name, out_dtype, &s.out, start);
        writer.write_chunk(&s.out)?;
        start += n;
    }
    Ok(stats)
}

/// Computes `instruct - base` for every shared tensor and writes it to `out`
/// in `policy.residual_dtype`, with provenance in the archive metadata.
///
/// Tensors follow the instruct archive's header order. Non-finite results
/// fail the whole operation after every tensor has been checked.
pub fn extract_residual(
    instruct: &Archive,
    base: &Archive,
    policy: &MergePolicy,
    out: impl AsRef<Path>,
) -> Result<Extraction, ResidualError> {
    policy.validate()?;
    let verdict = check_compat(&instruct.signature(), &base.signature(), policy);
    if !verdict.is_ok() {
        return Err(ResidualError::Incompatible(verdict.mismatches));
    }

    let pairs: Vec<(&TensorInfo, &TensorInfo)> = instruct
        .tensors()
        .iter()
        .filter(|t| !policy.is_excluded(&t.name))
        .filter_map(|t| base.get(&t.name).map(|b| (t, b)))
        .collect();
    let plan = pairs
        .iter()
        .map(|(t, _)| SignatureEntry::new(t.name.clone(), t.shape.clone(), policy.residual_dtype))
        .collect();

    let provenance = Provenance {
        instruct_hash: instruct.content_hash()?,
        base_hash: base.content_hash()?,
        alpha_default: policy.alpha,
        residual_dtype: policy.residual_dtype,
        tool_version: TOOL_VERSION.to_string(),
    };
    if provenance.instruct_hash == provenance.base_hash {
        log::warn!("instruct and base checkpoints are identical; the residual will be all zeros");
    }

    let out = out.as_ref();
    let mut writer = ArchiveWriter::create(out, plan, &provenance.to_metadata())?;
    let mut non_finite = NonFinite::default();
    let mut stats = Vec::with_capacity(pairs.len());
    for (ii, ib) in &pairs {
        log::debug!("extract {}", ii.name);
        let acc = policy.accumulation.resolve(&[ii.dtype, ib.dtype]);
        let s = match acc {
            Accumulation::F32 => extract_tensor::<f32>(
                instruct,
                ii,
                base,
                ib,
                policy.residual_dtype,
                &mut writer,
                &mut non_finite,
            )?,
            Accumulation::F64 => extract_tensor::<f64>(
                instruct,
                ii,
                base,
                ib,
                policy.residual_dtype,
                &mut writer,
                &mut non_finite,
            )?,
        };
        stats.push((ii.name.as_str(), s));
    }
    if !non_finite.found.is_empty() {
        return Err(ResidualError::NonFinite(non_finite.found));
    }
    let hash = writer.finish()?;
    let report = DiffReport::from_stats(stats);
    if report.is_zero() {
        log::warn!("zero residual: instruct and base tensors are identical");
    }
    Ok(Extraction {
        residual: ResidualSet::open(out)?,
        report,
        warnings: verdict.warnings,
        hash,
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_tensor<A: Scalar>(
    target: &Archive,
    it: &TensorInfo,
    residual: &Archive,
    ir: &TensorInfo,
    alpha: f64,
    out_dtype: Dtype,
    writer: &mut ArchiveWriter,
    non_finite: &mut NonFinite,
) -> Result<(), ResidualError> {
    let mut s = Scratch::<A>::new();
    let alpha = A::from_f64_round(alpha);
    let numel = it.numel() as usize;
    let mut start = 0;
    while start < numel {
        let n = (numel - start).min(CHUNK_ELEMS);
        load(target, it, start, n, &mut s.raw_a, &mut s.va)?;
        load(residual, ir, start, n, &mut s.raw_b, &mut s.vb)?;
        kernel::scaled_add(&mut s.va, &s.vb, alpha);
        s.out.resize(n * out_dtype.byte_width(), 0);
        encode_into(&s.va, out_dtype, &mut s.out);
        non_finite.scan(&it.name, out_dtype, &s.out, start);
        writer.write_chunk(&s.out)?;
        start += n;
    }
    Ok(())
}

/// Copies a target tensor unchanged, converting only if the output dtype
/// differs.
fn pass_through(
    target: &Archive,
    it: &TensorInfo,
    out_dtype: Dtype,
    writer: &mut ArchiveWriter,
    non_finite: &mut NonFinite,
) -> Result<(), ResidualError> {
    let mut raw = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    let mut out = Vec::new();
    let numel = it.numel() as usize;
    let mut start = 0;
    while start < numel {
        let n = (numel - start).min(CHUNK_ELEMS);
        if out_dtype == it.dtype {
            raw.resize(n * it.dtype.byte_width(), 0);
            target.read_into(it, (start * it.dtype.byte_width()) as u64, &mut raw)?;
            non_finite.scan(&it.name, out_dtype, &raw, start);
            writer.write_chunk(&raw)?;
        } else {
            load(target, it, start, n, &mut raw, &mut vals)?;
            out.resize(n * out_dtype.byte_width(), 0);
            encode_into(&vals, out_dtype, &mut out);
            non_finite.scan(&it.name, out_dtype, &out, start);
            writer.write_chunk(&out)?;
        }
        start += n;
    }
    Ok(())
}

/// Writes `target + alpha * residual` to `out`, tensor by tensor in the
/// target's header order, using `policy.alpha`.
///
/// Target tensors without a residual counterpart (excluded, or missing under
/// a permissive policy) are copied unchanged. Output metadata is the target's
/// metadata plus the residual's provenance, the applied alpha and both
/// input hashes.
pub fn apply_residual(
    target: &Archive,
    residual: &ResidualSet,
    policy: &MergePolicy,
    out: impl AsRef<Path>,
) -> Result<Application, ResidualError> {
    policy.validate()?;
    let verdict = check_compat_ignoring_dtype(&target.signature(), &residual.signature(), policy);
    if !verdict.is_ok() {
        return Err(ResidualError::Incompatible(verdict.mismatches));
    }

    let out_dtype = |t: &TensorInfo| match policy.output_dtype {
        OutputDtype::SameAsTarget => t.dtype,
        OutputDtype::Explicit(d) => d,
    };
    let plan = target
        .tensors()
        .iter()
        .map(|t| SignatureEntry::new(t.name.clone(), t.shape.clone(), out_dtype(t)))
        .collect();

    let mut metadata = target.metadata().clone();
    metadata.extend(residual.provenance().to_metadata());
    metadata.insert(KEY_ALPHA.into(), format!("{:?}", policy.alpha));
    metadata.insert(
        KEY_RESIDUAL_SHA256.into(),
        residual.archive().content_hash()?.to_string(),
    );
    metadata.insert(KEY_TARGET_SHA256.into(), target.content_hash()?.to_string());

    let mut writer = ArchiveWriter::create(out, plan, &metadata)?;
    let mut non_finite = NonFinite::default();
    let (mut applied, mut passed_through) = (0, 0);
    let res = residual.archive();
    for it in target.tensors() {
        let od = out_dtype(it);
        let ir = if policy.is_excluded(&it.name) {
            None
        } else {
            res.get(&it.name)
        };
        match ir {
            Some(ir) if policy.alpha != 0.0 => {
                log::debug!("apply {}", it.name);
                let acc = policy.accumulation.resolve(&[it.dtype, ir.dtype, od]);
                match acc {
                    Accumulation::F32 => {
                        apply_tensor::<f32>(target, it, res, ir, policy.alpha, od, &mut writer, &mut non_finite)?
                    }
                    Accumulation::F64 => {
                        apply_tensor::<f64>(target, it, res, ir, policy.alpha, od, &mut writer, &mut non_finite)?
                    }
                }
                applied += 1;
            }
            _ => {
                pass_through(target, it, od, &mut writer, &mut non_finite)?;
                passed_through += 1;
            }
        }
    }
    if !non_finite.found.is_empty() {
        return Err(ResidualError::NonFinite(non_finite.found));
    }
    Ok(Application {
        hash: writer.finish()?,
        warnings: verdict.warnings,
        applied,
        passed_through,
    })
}
