//! Per-tensor difference statistics between two checkpoints.

use std::io::Write;

use serde::Serialize;

use crate::archive::{Archive, STREAM_CHUNK_BYTES};
use crate::compat::check_compat;
use crate::error::ResidualError;
use crate::kernel::{self, PairStats};
use crate::policy::MergePolicy;
use crate::scalar::decode_into;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorDiff {
    pub name: String,
    /// L2 norm of `a - b`.
    pub l2_norm: f64,
    pub max_abs: f64,
    pub cosine_similarity: f64,
}

impl TensorDiff {
    pub fn from_stats(name: impl Into<String>, s: &PairStats<f64>) -> Self {
        Self {
            name: name.into(),
            l2_norm: s.l2(),
            max_abs: s.diff_max_abs,
            cosine_similarity: s.cosine(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiffReport {
    pub per_tensor: Vec<TensorDiff>,
    pub global_l2: f64,
    pub tensor_count: usize,
}

#[derive(Serialize)]
struct Summary {
    global_l2: f64,
    tensor_count: usize,
    zero_residual: bool,
}

impl DiffReport {
    /// Builds the report from per-tensor stats in output order.
    pub fn from_stats<'a>(items: impl IntoIterator<Item = (&'a str, PairStats<f64>)>) -> Self {
        let mut per_tensor = Vec::new();
        let mut total_sq = 0.0f64;
        for (name, s) in items {
            total_sq += s.diff_sq;
            per_tensor.push(TensorDiff::from_stats(name, &s));
        }
        Self {
            tensor_count: per_tensor.len(),
            per_tensor,
            global_l2: total_sq.sqrt(),
        }
    }

    /// True when every difference is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.global_l2 == 0.0
    }

    /// One JSON object per tensor, then a summary object.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.per_tensor {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut w,
            &Summary {
                global_l2: self.global_l2,
                tensor_count: self.tensor_count,
                zero_residual: self.is_zero(),
            },
        )?;
        w.write_all(b"\n")
    }
}

/// Compares two structurally identical archives tensor by tensor (`a - b`).
/// Values are promoted to f64 and streamed chunk-wise.
pub fn diff_report(a: &Archive, b: &Archive) -> Result<DiffReport, ResidualError> {
    let verdict = check_compat(&a.signature(), &b.signature(), &MergePolicy::default());
    if !verdict.is_ok() {
        return Err(ResidualError::Incompatible(verdict.mismatches));
    }

    let mut raw_a = Vec::new();
    let mut raw_b = Vec::new();
    let mut va: Vec<f64> = Vec::new();
    let mut vb: Vec<f64> = Vec::new();
    let mut stats = Vec::with_capacity(a.len());

    for ia in a.tensors() {
        let ib = b.info(&ia.name)?;
        let width = ia.dtype.byte_width();
        let chunk_elems = (STREAM_CHUNK_BYTES / 8).max(1);
        let numel = ia.numel() as usize;
        let mut s = PairStats::<f64>::default();
        let mut start = 0;
        while start < numel {
            let n = (numel - start).min(chunk_elems);
            raw_a.resize(n * width, 0);
            raw_b.resize(n * width, 0);
            a.read_into(ia, (start * width) as u64, &mut raw_a)?;
            b.read_into(ib, (start * width) as u64, &mut raw_b)?;
            va.resize(n, 0.0);
            vb.resize(n, 0.0);
            decode_into(ia.dtype, &raw_a, &mut va);
            decode_into(ib.dtype, &raw_b, &mut vb);
            s = s.merge(kernel::compare(&va, &vb));
            start += n;
        }
        stats.push((ia.name.as_str(), s));
    }
    Ok(DiffReport::from_stats(stats))
}
