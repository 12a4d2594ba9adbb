use std::collections::HashMap;

use serde::Serialize;

use crate::dtype::Dtype;

/// One structural entry of a checkpoint: name, shape and storage dtype.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct SignatureEntry {
    pub name: String,
    pub shape: Vec<u64>,
    pub dtype: Dtype,
}

impl SignatureEntry {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<u64>>, dtype: Dtype) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            dtype,
        }
    }

    /// Element count, `None` on overflow.
    pub fn numel(&self) -> Option<u64> {
        self.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }

    pub fn byte_len(&self) -> Option<u64> {
        self.numel()?.checked_mul(self.dtype.byte_width() as u64)
    }
}

/// Ordered structural fingerprint of a checkpoint. Payload values never
/// contribute, so two checkpoints of the same architecture compare equal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ModelSignature {
    entries: Vec<SignatureEntry>,
}

impl ModelSignature {
    /// Builds a signature, returning the first repeated name on failure.
    pub fn new(entries: Vec<SignatureEntry>) -> Result<Self, String> {
        let mut seen = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if seen.insert(e.name.as_str(), i).is_some() {
                return Err(e.name.clone());
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SignatureEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&SignatureEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub(crate) fn index(&self) -> HashMap<&str, &SignatureEntry> {
        self.entries.iter().map(|e| (e.name.as_str(), e)).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }
}
