use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tempfile::{NamedTempFile, TempPath};

use super::header;
use super::ContentHash;
use crate::error::ArchiveError;
use crate::signature::SignatureEntry;

/// Streaming archive writer.
///
/// The layout is fixed up front from the tensor plan, so payloads can be
/// appended one chunk at a time in plan order. Output goes to a temporary file
/// next to the destination and is renamed into place by [`finish`]; dropping
/// an unfinished writer leaves no file behind.
///
/// [`finish`]: ArchiveWriter::finish
pub struct ArchiveWriter {
    out: BufWriter<File>,
    temp: TempPath,
    dest: PathBuf,
    hasher: Sha256,
    plan: Vec<SignatureEntry>,
    lengths: Vec<u64>,
    current: usize,
    written: u64,
}

impl ArchiveWriter {
    pub fn create(
        path: impl AsRef<Path>,
        plan: Vec<SignatureEntry>,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self, ArchiveError> {
        let dest = path.as_ref().to_path_buf();
        let (header, offsets) = header::canonical(&plan, metadata)?;
        let dir = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let (file, temp) = NamedTempFile::new_in(&dir)?.into_parts();
        let mut w = Self {
            out: BufWriter::with_capacity(1 << 20, file),
            temp,
            dest,
            hasher: Sha256::new(),
            plan,
            lengths: offsets.iter().map(|(b, e)| e - b).collect(),
            current: 0,
            written: 0,
        };
        w.emit(&(header.len() as u64).to_le_bytes())?;
        w.emit(&header)?;
        w.skip_empty();
        Ok(w)
    }

    fn emit(&mut self, bytes: &[u8]) -> Result<(), ArchiveError> {
        self.out.write_all(bytes)?;
        self.hasher.update(bytes);
        Ok(())
    }

    // zero-length tensors are complete as soon as they are reached
    fn skip_empty(&mut self) {
        while self.current < self.plan.len() && self.written == self.lengths[self.current] {
            self.current += 1;
            self.written = 0;
        }
    }

    /// Name of the next tensor expecting payload bytes.
    pub fn next_tensor(&self) -> Option<&SignatureEntry> {
        self.plan.get(self.current)
    }

    /// Appends payload bytes to the current tensor. A chunk may not cross a
    /// tensor boundary.
    pub fn write_chunk(&mut self, bytes: &[u8]) -> Result<(), ArchiveError> {
        let Some(entry) = self.plan.get(self.current) else {
            return Err(ArchiveError::InvalidHeader(
                "payload written past the last tensor".into(),
            ));
        };
        let remaining = self.lengths[self.current] - self.written;
        if bytes.len() as u64 > remaining {
            return Err(ArchiveError::ByteLength {
                name: entry.name.clone(),
                expected: self.lengths[self.current],
                actual: self.written + bytes.len() as u64,
            });
        }
        self.emit(bytes)?;
        self.written += bytes.len() as u64;
        self.skip_empty();
        Ok(())
    }

    /// Writes a whole tensor payload, checking it is the next one in the plan.
    pub fn write_tensor(&mut self, name: &str, data: &[u8]) -> Result<(), ArchiveError> {
        // empty tensors are skipped automatically, so accept a late name for them
        if let Some(idx) = self.plan.iter().position(|e| e.name == name) {
            if idx < self.current && self.lengths[idx] == 0 && data.is_empty() {
                return Ok(());
            }
        }
        match self.plan.get(self.current) {
            Some(e) if e.name == name && self.written == 0 => {}
            Some(e) => {
                return Err(ArchiveError::WriteOrder {
                    expected: e.name.clone(),
                    got: name.to_string(),
                })
            }
            None => {
                return Err(ArchiveError::WriteOrder {
                    expected: String::new(),
                    got: name.to_string(),
                })
            }
        }
        if data.len() as u64 != self.lengths[self.current] {
            return Err(ArchiveError::ByteLength {
                name: name.to_string(),
                expected: self.lengths[self.current],
                actual: data.len() as u64,
            });
        }
        self.write_chunk(data)
    }

    /// Flushes, syncs and atomically moves the archive into place.
    pub fn finish(mut self) -> Result<ContentHash, ArchiveError> {
        if self.current < self.plan.len() {
            return Err(ArchiveError::Unfinished(self.plan.len() - self.current));
        }
        self.out.flush()?;
        let file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        drop(file);
        set_default_permissions(&self.temp)?;
        self.temp.persist(&self.dest).map_err(|e| ArchiveError::Io(e.error))?;
        Ok(ContentHash(self.hasher.finalize().into()))
    }
}

#[cfg(unix)]
fn set_default_permissions(path: &Path) -> std::io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o644))
}

#[cfg(not(unix))]
fn set_default_permissions(_: &Path) -> std::io::Result<()> {
    Ok(())
}
