//! JSON header of the container: parsing with validation, and the canonical
//! serialization used by the writer and by content hashing.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use crate::dtype::Dtype;
use crate::error::ArchiveError;
use crate::signature::SignatureEntry;

pub(crate) const METADATA_KEY: &str = "__metadata__";

/// Header entry of a stored tensor, with offsets relative to the payload start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub data_offsets: (u64, u64),
}

impl TensorInfo {
    pub fn numel(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }

    pub fn signature_entry(&self) -> SignatureEntry {
        SignatureEntry::new(self.name.clone(), self.shape.clone(), self.dtype)
    }
}

/// JSON object kept as an ordered list so duplicate keys stay visible.
struct OrderedObject(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for OrderedObject {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedObject;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<M: MapAccess<'de>>(self, mut map: M) -> Result<Self::Value, M::Error> {
                let mut out = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(OrderedObject(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// Parses and validates a header against a payload of `payload_len` bytes.
pub(crate) fn parse(
    bytes: &[u8],
    payload_len: u64,
) -> Result<(Vec<TensorInfo>, BTreeMap<String, String>), ArchiveError> {
    let object: OrderedObject = serde_json::from_slice(bytes)?;

    let mut tensors = Vec::with_capacity(object.0.len());
    let mut metadata = None;
    let mut seen = HashSet::with_capacity(object.0.len());

    for (name, value) in object.0 {
        if !seen.insert(name.clone()) {
            return Err(ArchiveError::DuplicateName(name));
        }
        if name == METADATA_KEY {
            metadata = Some(parse_metadata(value)?);
            continue;
        }
        if name.is_empty() {
            return Err(ArchiveError::EmptyName);
        }
        let raw: RawEntry =
            serde_json::from_value(value).map_err(|e| ArchiveError::InvalidHeader(format!("tensor {name:?}: {e}")))?;
        let dtype: Dtype = raw.dtype.parse()?;
        let [begin, end] = raw.data_offsets;
        if begin > end || end > payload_len {
            return Err(ArchiveError::OutOfBounds {
                name,
                begin,
                end,
                payload_len,
            });
        }
        let expected = raw
            .shape
            .iter()
            .try_fold(dtype.byte_width() as u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ArchiveError::InvalidHeader(format!("tensor {name:?}: shape overflows")))?;
        if expected != end - begin {
            return Err(ArchiveError::ByteLength {
                name,
                expected,
                actual: end - begin,
            });
        }
        tensors.push(TensorInfo {
            name,
            dtype,
            shape: raw.shape,
            data_offsets: (begin, end),
        });
    }

    check_overlaps(&tensors)?;
    Ok((tensors, metadata.unwrap_or_default()))
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>, ArchiveError> {
    let object: OrderedObject =
        serde_json::from_value(value).map_err(|e| ArchiveError::InvalidHeader(format!("{METADATA_KEY}: {e}")))?;
    let mut out = BTreeMap::new();
    for (k, v) in object.0 {
        let Value::String(s) = v else {
            return Err(ArchiveError::InvalidHeader(format!(
                "{METADATA_KEY}: value of {k:?} is not a string"
            )));
        };
        if out.insert(k.clone(), s).is_some() {
            return Err(ArchiveError::InvalidHeader(format!(
                "{METADATA_KEY}: duplicate key {k:?}"
            )));
        }
    }
    Ok(out)
}

fn check_overlaps(tensors: &[TensorInfo]) -> Result<(), ArchiveError> {
    let mut order: Vec<&TensorInfo> = tensors.iter().filter(|t| t.byte_len() > 0).collect();
    order.sort_by_key(|t| t.data_offsets);
    for pair in order.windows(2) {
        if pair[1].data_offsets.0 < pair[0].data_offsets.1 {
            return Err(ArchiveError::Overlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    Ok(())
}

/// Payload range `[begin, end)` relative to the start of the payload.
pub(crate) type Range = (u64, u64);

/// Canonical header: metadata first with sorted keys (omitted when empty),
/// then tensors in the given order with tightly packed offsets, no whitespace.
///
/// Returns the header bytes and each tensor's payload range.
pub(crate) fn canonical(
    entries: &[SignatureEntry],
    metadata: &BTreeMap<String, String>,
) -> Result<(Vec<u8>, Vec<Range>), ArchiveError> {
    let mut seen = HashSet::with_capacity(entries.len());
    let mut out = String::from("{");
    let mut first = true;

    if !metadata.is_empty() {
        out.push_str(&quote(METADATA_KEY));
        out.push_str(":{");
        for (i, (k, v)) in metadata.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&quote(k));
            out.push(':');
            out.push_str(&quote(v));
        }
        out.push('}');
        first = false;
    }

    let mut offsets = Vec::with_capacity(entries.len());
    let mut cursor = 0u64;
    for e in entries {
        if e.name.is_empty() {
            return Err(ArchiveError::EmptyName);
        }
        if e.name == METADATA_KEY {
            return Err(ArchiveError::ReservedName(e.name.clone()));
        }
        if !seen.insert(e.name.as_str()) {
            return Err(ArchiveError::DuplicateName(e.name.clone()));
        }
        let len = e
            .byte_len()
            .ok_or_else(|| ArchiveError::InvalidHeader(format!("tensor {:?}: shape overflows", e.name)))?;
        let end = cursor
            .checked_add(len)
            .ok_or_else(|| ArchiveError::InvalidHeader("payload size overflows".into()))?;
        if !first {
            out.push(',');
        }
        first = false;
        out.push_str(&quote(&e.name));
        out.push_str(":{\"dtype\":\"");
        out.push_str(e.dtype.tag());
        out.push_str("\",\"shape\":[");
        for (i, d) in e.shape.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&d.to_string());
        }
        out.push_str(&format!("],\"data_offsets\":[{cursor},{end}]}}"));
        offsets.push((cursor, end));
        cursor = end;
    }
    out.push('}');
    Ok((out.into_bytes(), offsets))
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}
