//! Training compute under the dense-transformer estimate of six floating
//! point operations per parameter per token (forward plus backward).
//!
//! Counts are exact: products are formed in `u128` with overflow checks and
//! ratios are reduced fractions. Attention's sequence-length term is ignored.

use std::collections::BTreeMap;

use num_rational::Ratio;
use num_traits::ToPrimitive;
use serde::Serialize;
use thiserror::Error;

/// Operations per parameter per training token.
pub const FLOPS_PER_PARAM: u64 = 6;

/// Largest parameter count accepted by [`FlopsSpec::new`].
pub const MAX_PARAMS: u64 = 10_000_000_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum FlopsError {
    #[error("parameter count {0} exceeds the supported maximum of 1e13")]
    TooManyParams(u64),
    #[error("flop count overflows 128-bit arithmetic")]
    Overflow,
    #[error("ratio denominator has zero training flops")]
    DivisionByZero,
    #[error("utilization must be in (0, 1], got {0}")]
    Utilization(f64),
    #[error("peak throughput must be positive, got {0}")]
    Peak(f64),
    #[error("flops per parameter must be positive")]
    FlopsPerParam,
}

/// Exact ratio of two flop counts.
pub type FlopsRatio = Ratio<u128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsSpec {
    pub params: u64,
    pub tokens: u64,
    pub epochs: u64,
}

impl FlopsSpec {
    pub fn new(params: u64, tokens: u64, epochs: u64) -> Result<Self, FlopsError> {
        if params > MAX_PARAMS {
            return Err(FlopsError::TooManyParams(params));
        }
        Ok(Self { params, tokens, epochs })
    }
}

/// The per-parameter constant. Defaults to [`FLOPS_PER_PARAM`]; overridable
/// for sensitivity studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub flops_per_param: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            flops_per_param: FLOPS_PER_PARAM,
        }
    }
}

impl CostModel {
    pub fn new(flops_per_param: u64) -> Result<Self, FlopsError> {
        if flops_per_param == 0 {
            return Err(FlopsError::FlopsPerParam);
        }
        Ok(Self { flops_per_param })
    }

    pub fn flops_per_token(&self, params: u64) -> u128 {
        self.flops_per_param as u128 * params as u128
    }

    pub fn training_flops(&self, spec: &FlopsSpec) -> Result<u128, FlopsError> {
        self.flops_per_token(spec.params)
            .checked_mul(spec.tokens as u128)
            .and_then(|x| x.checked_mul(spec.epochs as u128))
            .ok_or(FlopsError::Overflow)
    }

    pub fn flops_ratio(&self, a: &FlopsSpec, b: &FlopsSpec) -> Result<FlopsRatio, FlopsError> {
        let fb = self.training_flops(b)?;
        if fb == 0 {
            return Err(FlopsError::DivisionByZero);
        }
        Ok(Ratio::new(self.training_flops(a)?, fb))
    }
}

/// `6 * params`.
pub fn flops_per_token(params: u64) -> u128 {
    CostModel::default().flops_per_token(params)
}

/// `6 * params * tokens * epochs`.
pub fn training_flops(spec: &FlopsSpec) -> Result<u128, FlopsError> {
    CostModel::default().training_flops(spec)
}

/// `training_flops(a) / training_flops(b)` as an exact fraction.
pub fn flops_ratio(a: &FlopsSpec, b: &FlopsSpec) -> Result<FlopsRatio, FlopsError> {
    CostModel::default().flops_ratio(a, b)
}

pub fn ratio_to_f64(r: &FlopsRatio) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Token count implied by `samples` sequences of `max_seq_len` tokens each.
///
/// This is an upper bound: real samples are usually shorter than the
/// maximum sequence length.
pub fn tokens_upper_bound(samples: u64, max_seq_len: u64) -> Result<u64, FlopsError> {
    samples.checked_mul(max_seq_len).ok_or(FlopsError::Overflow)
}

/// Accelerator peak throughput per precision, in operations per second.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardwareProfile {
    pub name: String,
    pub peak_flops: BTreeMap<String, f64>,
}

impl HardwareProfile {
    pub fn new(name: impl Into<String>, peaks: &[(&str, f64)]) -> Result<Self, FlopsError> {
        let mut peak_flops = BTreeMap::new();
        for &(precision, peak) in peaks {
            if !(peak > 0.0 && peak.is_finite()) {
                return Err(FlopsError::Peak(peak));
            }
            peak_flops.insert(precision.to_string(), peak);
        }
        Ok(Self {
            name: name.into(),
            peak_flops,
        })
    }

    /// NVIDIA A100 40GB SXM tensor-core peaks.
    pub fn a100_40g() -> Self {
        Self::new("a100-40g", &[("bf16", 312e12), ("fp16", 312e12), ("tf32", 156e12)])
            .expect("preset peaks are positive")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "a100-40g" | "a100" => Some(Self::a100_40g()),
            _ => None,
        }
    }

    pub fn peak(&self, precision: &str) -> Option<f64> {
        self.peak_flops.get(precision).copied()
    }
}

/// Seconds needed for `flops` at `peak_flops * utilization`.
pub fn wallclock_estimate(flops: u128, peak_flops: f64, utilization: f64) -> Result<f64, FlopsError> {
    if !(utilization > 0.0 && utilization <= 1.0) {
        return Err(FlopsError::Utilization(utilization));
    }
    if !(peak_flops > 0.0 && peak_flops.is_finite()) {
        return Err(FlopsError::Peak(peak_flops));
    }
    Ok(flops as f64 / (peak_flops * utilization))
}
