//! Pre-merge gate: structural compatibility plus user-asserted lineage.
//!
//! Lineage is never inferred from weights. Callers pass tags explicitly or
//! read them from archive metadata with [`LineageTag::from_metadata`].

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::Serialize;

use crate::compat::{check_compat, Mismatch};
use crate::policy::MergePolicy;
use crate::signature::ModelSignature;

pub const KEY_FAMILY: &str = "resforge.lineage.family";
pub const KEY_VARIANT: &str = "resforge.lineage.variant";
pub const KEY_NOTES: &str = "resforge.lineage.notes";

/// Warning attached when the merge target is itself instruction-tuned.
pub const S1_WARNING: &str = "target is an instruction-tuned model: continually pre-training an \
instruct model (strategy S1) erodes its instruction following; prefer continually pre-training \
the base model and applying the residual to it (strategy S2)";

pub const UNASSERTED_LINEAGE_WARNING: &str =
    "lineage not asserted for target and/or residual; same-ancestor compatibility is only structural";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Instruct,
    Derived,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Variant::Base),
            "instruct" => Ok(Variant::Instruct),
            "derived" => Ok(Variant::Derived),
            other => Err(format!(
                "unknown variant {other:?} (expected base, instruct or derived)"
            )),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Instruct => "instruct",
            Variant::Derived => "derived",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineageTag {
    pub family: String,
    pub variant: Variant,
    pub notes: String,
}

impl LineageTag {
    pub fn new(family: impl Into<String>, variant: Variant) -> Result<Self, String> {
        let family = family.into();
        if family.trim().is_empty() {
            return Err("lineage family must be non-empty".into());
        }
        Ok(Self {
            family,
            variant,
            notes: String::new(),
        })
    }

    /// Reads a tag from archive metadata. `None` when no family is recorded.
    pub fn from_metadata(md: &BTreeMap<String, String>) -> Option<Result<Self, String>> {
        let family = md.get(KEY_FAMILY)?;
        Some((|| {
            let variant = md
                .get(KEY_VARIANT)
                .ok_or_else(|| format!("{KEY_FAMILY} is set but {KEY_VARIANT} is missing"))?
                .parse()?;
            let mut tag = Self::new(family.clone(), variant)?;
            tag.notes = md.get(KEY_NOTES).cloned().unwrap_or_default();
            Ok(tag)
        })())
    }

    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut md = BTreeMap::new();
        md.insert(KEY_FAMILY.into(), self.family.clone());
        md.insert(KEY_VARIANT.into(), self.variant.to_string());
        if !self.notes.is_empty() {
            md.insert(KEY_NOTES.into(), self.notes.clone());
        }
        md
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Allow,
    AllowWithWarnings,
    Deny,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Allow => "allow",
            Verdict::AllowWithWarnings => "allow-with-warnings",
            Verdict::Deny => "deny",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateReport {
    pub verdict: Verdict,
    pub mismatches: Vec<Mismatch>,
    pub warnings: Vec<String>,
}

impl GateReport {
    pub fn allowed(&self) -> bool {
        self.verdict != Verdict::Deny
    }

    pub fn render_text(&self) -> String {
        let mut s = format!("verdict: {}\n", self.verdict);
        for m in &self.mismatches {
            let _ = writeln!(s, "  mismatch: {m}");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
        s
    }
}

/// Decides whether `residual` may be applied onto `target`.
///
/// Denies whenever [`check_compat`] fails under `policy`; dtypes are compared
/// only when `policy.strict_dtype` is set. Warns when the target is
/// instruction-tuned, when families differ, when lineage is not asserted, and
/// for every tensor the policy lets through as missing.
pub fn gate(
    target_sig: &ModelSignature,
    residual_sig: &ModelSignature,
    target_tag: Option<&LineageTag>,
    residual_tag: Option<&LineageTag>,
    policy: &MergePolicy,
) -> GateReport {
    let compat = check_compat(target_sig, residual_sig, policy);
    let mut warnings: Vec<String> = compat.warnings.iter().map(|m| format!("tensor skipped: {m}")).collect();

    match (target_tag, residual_tag) {
        (Some(t), Some(r)) => {
            if t.variant == Variant::Instruct {
                warnings.push(S1_WARNING.to_string());
            }
            if t.family != r.family {
                warnings.push(format!(
                    "target family {:?} differs from residual family {:?}: residuals carry over \
                     between sibling releases but may trail the target family's own instruct model",
                    t.family, r.family
                ));
            }
        }
        (Some(t), None) => {
            if t.variant == Variant::Instruct {
                warnings.push(S1_WARNING.to_string());
            }
            warnings.push(UNASSERTED_LINEAGE_WARNING.to_string());
        }
        _ => warnings.push(UNASSERTED_LINEAGE_WARNING.to_string()),
    }

    let verdict = if !compat.is_ok() {
        Verdict::Deny
    } else if warnings.is_empty() {
        Verdict::Allow
    } else {
        Verdict::AllowWithWarnings
    };
    GateReport {
        verdict,
        mismatches: compat.mismatches,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::Dtype;
    use crate::policy::MissingTensor;
    use crate::signature::SignatureEntry;

    fn sig(shape: &[u64]) -> ModelSignature {
        ModelSignature::new(vec![
            SignatureEntry::new("embed", vec![16, 4], Dtype::Bf16),
            SignatureEntry::new("w", shape.to_vec(), Dtype::Bf16),
        ])
        .unwrap()
    }

    fn tag(family: &str, v: Variant) -> LineageTag {
        LineageTag::new(family, v).unwrap()
    }

    #[test]
    fn same_family_base_target_allowed() {
        let r = gate(
            &sig(&[4, 4]),
            &sig(&[4, 4]),
            Some(&tag("llama3", Variant::Base)),
            Some(&tag("llama3", Variant::Instruct)),
            &MergePolicy::default(),
        );
        assert_eq!(r.verdict, Verdict::Allow);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn instruct_target_warns() {
        let r = gate(
            &sig(&[4, 4]),
            &sig(&[4, 4]),
            Some(&tag("llama3", Variant::Instruct)),
            Some(&tag("llama3", Variant::Instruct)),
            &MergePolicy::default(),
        );
        assert_eq!(r.verdict, Verdict::AllowWithWarnings);
        assert_eq!(r.warnings, vec![S1_WARNING.to_string()]);
    }

    #[test]
    fn shape_mismatch_denies_regardless_of_tags() {
        for tags in [
            (Some(tag("q", Variant::Base)), Some(tag("q", Variant::Instruct))),
            (None, None),
        ] {
            let r = gate(
                &sig(&[4, 4]),
                &sig(&[4, 5]),
                tags.0.as_ref(),
                tags.1.as_ref(),
                &MergePolicy::default(),
            );
            assert_eq!(r.verdict, Verdict::Deny);
            assert_eq!(r.mismatches[0].tensor, "w");
        }
    }

    #[test]
    fn family_and_unasserted_warnings() {
        let r = gate(
            &sig(&[4, 4]),
            &sig(&[4, 4]),
            Some(&tag("llama3.1", Variant::Base)),
            Some(&tag("llama3", Variant::Instruct)),
            &MergePolicy::default(),
        );
        assert_eq!(r.verdict, Verdict::AllowWithWarnings);
        assert!(r.warnings[0].contains("llama3.1"));
        let r = gate(&sig(&[4, 4]), &sig(&[4, 4]), None, None, &MergePolicy::default());
        assert_eq!(r.warnings, vec![UNASSERTED_LINEAGE_WARNING.to_string()]);
    }

    #[test]
    fn skipped_tensors_warn() {
        let target = sig(&[4, 4]);
        let residual = ModelSignature::new(vec![SignatureEntry::new("w", vec![4, 4], Dtype::Bf16)]).unwrap();
        let p = MergePolicy::default().with_missing(MissingTensor::SkipWithWarning);
        let t = tag("x", Variant::Derived);
        let r = gate(&target, &residual, Some(&t), Some(&t), &p);
        assert_eq!(r.verdict, Verdict::AllowWithWarnings);
        assert!(r.warnings[0].starts_with("tensor skipped: embed"));
        let strict = gate(&target, &residual, Some(&t), Some(&t), &MergePolicy::default());
        assert_eq!(strict.verdict, Verdict::Deny);
    }

    #[test]
    fn dtype_checked_only_when_strict() {
        let target = sig(&[4, 4]);
        let residual = ModelSignature::new(vec![
            SignatureEntry::new("embed", vec![16, 4], Dtype::F32),
            SignatureEntry::new("w", vec![4, 4], Dtype::F32),
        ])
        .unwrap();
        let strict = gate(&target, &residual, None, None, &MergePolicy::default());
        assert_eq!(strict.verdict, Verdict::Deny);
        assert_eq!(strict.mismatches.len(), 2);
        let lax = MergePolicy {
            strict_dtype: false,
            ..MergePolicy::default()
        };
        assert!(gate(&target, &residual, None, None, &lax).allowed());
    }

    #[test]
    fn metadata_round_trip() {
        let mut t = tag("qwen2", Variant::Derived);
        t.notes = "docchat".into();
        assert_eq!(LineageTag::from_metadata(&t.to_metadata()).unwrap().unwrap(), t);
        assert!(LineageTag::from_metadata(&BTreeMap::new()).is_none());
        let mut bad = BTreeMap::new();
        bad.insert(KEY_FAMILY.to_string(), "x".to_string());
        assert!(LineageTag::from_metadata(&bad).unwrap().is_err());
        assert!(LineageTag::new(" ", Variant::Base).is_err());
    }

    #[test]
    fn report_json() {
        let r = gate(&sig(&[4, 4]), &sig(&[4, 4]), None, None, &MergePolicy::default());
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["verdict"], "allow-with-warnings");
    }
}
