use regex::Regex;

use crate::dtype::Dtype;
use crate::error::ResidualError;

/// Scalar type used for element-wise arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    #[default]
    F32,
    F64,
}

impl Accumulation {
    /// Widens to f64 when any operand is stored as f64, so promotion never
    /// loses bits.
    pub fn resolve(self, operands: &[Dtype]) -> Accumulation {
        if operands.contains(&Dtype::F64) {
            Accumulation::F64
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputDtype {
    #[default]
    SameAsTarget,
    Explicit(Dtype),
}

/// What to do with tensors present in one checkpoint only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingTensor {
    #[default]
    Error,
    SkipWithWarning,
}

/// Knobs shared by compatibility checks, residual extraction and application.
#[derive(Debug, Clone)]
pub struct MergePolicy {
    /// Scale applied to the residual on application.
    pub alpha: f64,
    pub accumulation: Accumulation,
    pub output_dtype: OutputDtype,
    pub missing_tensor: MissingTensor,
    /// Storage dtype of extracted residual tensors.
    pub residual_dtype: Dtype,
    /// Require matching storage dtypes per tensor.
    pub strict_dtype: bool,
    /// Tensors whose names match any of these are left out of extraction and
    /// passed through unchanged on application.
    pub exclude: Vec<Regex>,
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            accumulation: Accumulation::F32,
            output_dtype: OutputDtype::SameAsTarget,
            missing_tensor: MissingTensor::Error,
            residual_dtype: Dtype::F32,
            strict_dtype: true,
            exclude: Vec::new(),
        }
    }
}

impl MergePolicy {
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_accumulation(mut self, accumulation: Accumulation) -> Self {
        self.accumulation = accumulation;
        self
    }

    pub fn with_missing(mut self, missing: MissingTensor) -> Self {
        self.missing_tensor = missing;
        self
    }

    pub fn with_residual_dtype(mut self, dtype: Dtype) -> Self {
        self.residual_dtype = dtype;
        self
    }

    pub fn with_output_dtype(mut self, output: OutputDtype) -> Self {
        self.output_dtype = output;
        self
    }

    pub fn with_exclude(mut self, pattern: &str) -> Result<Self, ResidualError> {
        let re = Regex::new(pattern)
            .map_err(|e| ResidualError::InvalidPolicy(format!("exclude pattern {pattern:?}: {e}")))?;
        self.exclude.push(re);
        Ok(self)
    }

    pub fn is_excluded(&self, name: &str) -> bool {
        self.exclude.iter().any(|re| re.is_match(name))
    }

    pub fn validate(&self) -> Result<(), ResidualError> {
        if !self.alpha.is_finite() {
            return Err(ResidualError::InvalidPolicy(format!(
                "alpha must be finite, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}
