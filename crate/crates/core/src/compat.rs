//! Structural compatibility of two checkpoints.

use std::fmt;

use serde::Serialize;

use crate::dtype::Dtype;
use crate::policy::{MergePolicy, MissingTensor};
use crate::signature::ModelSignature;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum MismatchKind {
    MissingInA,
    MissingInB,
    ShapeMismatch { a: Vec<u64>, b: Vec<u64> },
    DtypeMismatch { a: Dtype, b: Dtype },
}

impl MismatchKind {
    pub fn reason(&self) -> &'static str {
        match self {
            MismatchKind::MissingInA => "missing-in-a",
            MismatchKind::MissingInB => "missing-in-b",
            MismatchKind::ShapeMismatch { .. } => "shape-mismatch",
            MismatchKind::DtypeMismatch { .. } => "dtype-mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub tensor: String,
    #[serde(flatten)]
    pub kind: MismatchKind,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.tensor, self.kind.reason())?;
        match &self.kind {
            MismatchKind::ShapeMismatch { a, b } => write!(f, " ({a:?} vs {b:?})"),
            MismatchKind::DtypeMismatch { a, b } => write!(f, " ({a} vs {b})"),
            _ => Ok(()),
        }
    }
}

/// Outcome of [`check_compat`]. Missing tensors tolerated by the policy are
/// reported as warnings instead of mismatches.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CompatVerdict {
    pub mismatches: Vec<Mismatch>,
    pub warnings: Vec<Mismatch>,
}

impl CompatVerdict {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares two signatures tensor by tensor, ignoring excluded names.
///
/// Dtypes are compared only when `policy.strict_dtype` is set.
pub fn check_compat(a: &ModelSignature, b: &ModelSignature, policy: &MergePolicy) -> CompatVerdict {
    compare(a, b, policy, policy.strict_dtype)
}

/// Variant used when the dtypes are expected to differ, e.g. an f32 residual
/// applied to a bf16 model.
pub fn check_compat_ignoring_dtype(a: &ModelSignature, b: &ModelSignature, policy: &MergePolicy) -> CompatVerdict {
    compare(a, b, policy, false)
}

fn compare(a: &ModelSignature, b: &ModelSignature, policy: &MergePolicy, dtypes: bool) -> CompatVerdict {
    let mut verdict = CompatVerdict::default();
    let b_index = b.index();
    let a_index = a.index();

    let missing = |tensor: &str, kind: MismatchKind, verdict: &mut CompatVerdict| {
        let m = Mismatch {
            tensor: tensor.to_string(),
            kind,
        };
        match policy.missing_tensor {
            MissingTensor::Error => verdict.mismatches.push(m),
            MissingTensor::SkipWithWarning => verdict.warnings.push(m),
        }
    };

    for ea in a.entries() {
        if policy.is_excluded(&ea.name) {
            continue;
        }
        let Some(eb) = b_index.get(ea.name.as_str()) else {
            missing(&ea.name, MismatchKind::MissingInB, &mut verdict);
            continue;
        };
        if ea.shape != eb.shape {
            verdict.mismatches.push(Mismatch {
                tensor: ea.name.clone(),
                kind: MismatchKind::ShapeMismatch {
                    a: ea.shape.clone(),
                    b: eb.shape.clone(),
                },
            });
        } else if dtypes && ea.dtype != eb.dtype {
            verdict.mismatches.push(Mismatch {
                tensor: ea.name.clone(),
                kind: MismatchKind::DtypeMismatch {
                    a: ea.dtype,
                    b: eb.dtype,
                },
            });
        }
    }
    for eb in b.entries() {
        if !policy.is_excluded(&eb.name) && !a_index.contains_key(eb.name.as_str()) {
            missing(&eb.name, MismatchKind::MissingInA, &mut verdict);
        }
    }
    verdict
}
