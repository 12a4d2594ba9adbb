//! Checkpoint container: an 8-byte little-endian header length, a JSON
//! header, then raw little-endian tensor payloads.
//!
//! [`Archive::open`] reads and validates only the header. Payloads are read on
//! demand with positioned reads, so one handle can serve concurrent readers and
//! whole-archive passes keep at most one tensor (or one chunk) resident.

mod header;
mod writer;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

pub use header::TensorInfo;
pub use writer::ArchiveWriter;

use crate::dtype::Dtype;
use crate::error::ArchiveError;
use crate::scalar::{self, Scalar};
use crate::signature::{ModelSignature, SignatureEntry};

/// Upper bound on header size accepted by [`Archive::open`].
pub const MAX_HEADER_LEN: u64 = 256 << 20;

/// Bytes moved per read when streaming payloads.
pub const STREAM_CHUNK_BYTES: usize = 1 << 20;

/// SHA-256 digest of an archive's canonical serialization.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContentHash(pub [u8; 32]);

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({self})")
    }
}

impl FromStr for ContentHash {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(ContentHash(out))
    }
}

/// A tensor held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub data: Vec<u8>,
}

impl TensorRecord {
    pub fn new(
        name: impl Into<String>,
        dtype: Dtype,
        shape: impl Into<Vec<u64>>,
        data: Vec<u8>,
    ) -> Result<Self, ArchiveError> {
        let rec = Self {
            name: name.into(),
            dtype,
            shape: shape.into(),
            data,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Encodes `values` into `dtype`.
    pub fn from_values<A: Scalar>(
        name: impl Into<String>,
        dtype: Dtype,
        shape: impl Into<Vec<u64>>,
        values: &[A],
    ) -> Result<Self, ArchiveError> {
        Self::new(name, dtype, shape, scalar::encode(values, dtype))
    }

    pub fn values<A: Scalar>(&self) -> Vec<A> {
        scalar::decode(self.dtype, &self.data)
    }

    pub fn signature_entry(&self) -> SignatureEntry {
        SignatureEntry::new(self.name.clone(), self.shape.clone(), self.dtype)
    }

    fn validate(&self) -> Result<(), ArchiveError> {
        if self.name.is_empty() {
            return Err(ArchiveError::EmptyName);
        }
        let expected = self
            .signature_entry()
            .byte_len()
            .ok_or_else(|| ArchiveError::InvalidHeader(format!("tensor {:?}: shape overflows", self.name)))?;
        if expected != self.data.len() as u64 {
            return Err(ArchiveError::ByteLength {
                name: self.name.clone(),
                expected,
                actual: self.data.len() as u64,
            });
        }
        Ok(())
    }
}

/// Writes `records` in order with `metadata`, returning the content hash of
/// the bytes written.
pub fn write_archive(
    records: &[TensorRecord],
    metadata: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<ContentHash, ArchiveError> {
    for r in records {
        r.validate()?;
    }
    let plan = records.iter().map(TensorRecord::signature_entry).collect();
    let mut w = ArchiveWriter::create(path, plan, metadata)?;
    for r in records {
        w.write_tensor(&r.name, &r.data)?;
    }
    w.finish()
}

/// Read handle over an archive file.
#[derive(Debug)]
pub struct Archive {
    path: PathBuf,
    file: File,
    tensors: Vec<TensorInfo>,
    index: HashMap<String, usize>,
    metadata: BTreeMap<String, String>,
    data_start: u64,
    hash: OnceLock<ContentHash>,
}

impl Archive {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let file_len = file.metadata()?.len();
        if file_len < 8 {
            return Err(ArchiveError::TruncatedLength(file_len));
        }
        let mut prefix = [0u8; 8];
        read_exact_at(&file, &mut prefix, 0)?;
        let header_len = u64::from_le_bytes(prefix);
        if header_len > file_len - 8 {
            return Err(ArchiveError::TruncatedHeader {
                declared: header_len,
                available: file_len - 8,
            });
        }
        if header_len > MAX_HEADER_LEN {
            return Err(ArchiveError::InvalidHeader(format!(
                "header of {header_len} bytes exceeds limit of {MAX_HEADER_LEN}"
            )));
        }
        let mut header_bytes = vec![0u8; header_len as usize];
        read_exact_at(&file, &mut header_bytes, 8)?;
        let data_start = 8 + header_len;
        let (tensors, metadata) = header::parse(&header_bytes, file_len - data_start)?;
        let index = tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Ok(Self {
            path,
            file,
            tensors,
            index,
            metadata,
            data_start,
            hash: OnceLock::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Tensors in header order.
    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TensorInfo> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn info(&self, name: &str) -> Result<&TensorInfo, ArchiveError> {
        self.get(name)
            .ok_or_else(|| ArchiveError::NoSuchTensor(name.to_string()))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn signature(&self) -> ModelSignature {
        ModelSignature::new(self.tensors.iter().map(TensorInfo::signature_entry).collect())
            .expect("names validated on open")
    }

    /// Reads `buf.len()` payload bytes of `info` starting `offset` bytes into
    /// the tensor.
    pub fn read_into(&self, info: &TensorInfo, offset: u64, buf: &mut [u8]) -> Result<(), ArchiveError> {
        let end = offset
            .checked_add(buf.len() as u64)
            .filter(|&e| e <= info.byte_len())
            .ok_or_else(|| ArchiveError::OutOfBounds {
                name: info.name.clone(),
                begin: offset,
                end: offset.saturating_add(buf.len() as u64),
                payload_len: info.byte_len(),
            })?;
        debug_assert!(end <= info.byte_len());
        read_exact_at(&self.file, buf, self.data_start + info.data_offsets.0 + offset)?;
        Ok(())
    }

    pub fn read_bytes(&self, name: &str) -> Result<Vec<u8>, ArchiveError> {
        let info = self.info(name)?;
        let mut buf = vec![0u8; info.byte_len() as usize];
        self.read_into(info, 0, &mut buf)?;
        Ok(buf)
    }

    pub fn read_record(&self, name: &str) -> Result<TensorRecord, ArchiveError> {
        let info = self.info(name)?;
        Ok(TensorRecord {
            name: info.name.clone(),
            dtype: info.dtype,
            shape: info.shape.clone(),
            data: self.read_bytes(name)?,
        })
    }

    /// Reads a tensor promoted to `A`.
    pub fn read_values<A: Scalar>(&self, name: &str) -> Result<Vec<A>, ArchiveError> {
        let info = self.info(name)?;
        Ok(scalar::decode(info.dtype, &self.read_bytes(name)?))
    }

    /// Loads every tensor into memory, in header order.
    pub fn read_all(&self) -> Result<Vec<TensorRecord>, ArchiveError> {
        self.tensors.iter().map(|t| self.read_record(&t.name)).collect()
    }

    /// SHA-256 over the canonical serialization of this archive's tensors and
    /// metadata. Equal to the digest returned when the same records are
    /// written with [`write_archive`]. Computed once by streaming the payload.
    pub fn content_hash(&self) -> Result<ContentHash, ArchiveError> {
        if let Some(h) = self.hash.get() {
            return Ok(*h);
        }
        let plan: Vec<_> = self.tensors.iter().map(TensorInfo::signature_entry).collect();
        let (header, _) = header::canonical(&plan, &self.metadata)?;
        let mut hasher = Sha256::new();
        hasher.update((header.len() as u64).to_le_bytes());
        hasher.update(&header);
        let mut buf = Vec::new();
        self.for_each_chunk(
            |_, chunk| {
                hasher.update(chunk);
                Ok(())
            },
            &mut buf,
        )?;
        let h = ContentHash(hasher.finalize().into());
        Ok(*self.hash.get_or_init(|| h))
    }

    /// Visits all payload bytes in header order, at most
    /// [`STREAM_CHUNK_BYTES`] at a time.
    fn for_each_chunk<F>(&self, mut f: F, buf: &mut Vec<u8>) -> Result<(), ArchiveError>
    where
        F: FnMut(&TensorInfo, &[u8]) -> Result<(), ArchiveError>,
    {
        for info in &self.tensors {
            let total = info.byte_len();
            let mut offset = 0;
            while offset < total {
                let n = (total - offset).min(STREAM_CHUNK_BYTES as u64) as usize;
                buf.resize(n, 0);
                self.read_into(info, offset, buf)?;
                f(info, buf)?;
                offset += n as u64;
            }
        }
        Ok(())
    }

    /// Streams this archive into a new canonical file at `dest`.
    pub fn copy_to(&self, dest: impl AsRef<Path>) -> Result<ContentHash, ArchiveError> {
        let plan = self.tensors.iter().map(TensorInfo::signature_entry).collect();
        let mut w = ArchiveWriter::create(dest, plan, &self.metadata)?;
        let mut buf = Vec::new();
        self.for_each_chunk(|_, chunk| w.write_chunk(chunk), &mut buf)?;
        w.finish()
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}
