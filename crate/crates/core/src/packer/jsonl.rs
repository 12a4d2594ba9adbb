use std::io::{BufRead, Write};

use serde::Serialize;

use super::{PackError, PackedSequence, PackingStats, Segment, TokenDoc, TokenId};

/// Parses one document per non-blank line.
pub fn read_docs<R: BufRead>(reader: R) -> impl Iterator<Item = Result<TokenDoc, PackError>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(PackError::Io(e))),
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(serde_json::from_str(&l).map_err(|source| PackError::Parse { line: i + 1, source })),
    })
}

#[derive(Serialize)]
struct SequenceLine<'a> {
    seq_index: u64,
    tokens: Vec<TokenId>,
    segments: &'a [Segment],
    pad_length: usize,
}

/// Writes the fixed-length form of `seq` as one JSON line.
pub fn write_sequence<W: Write>(mut w: W, seq: &PackedSequence, pad_id: TokenId) -> std::io::Result<()> {
    let line = SequenceLine {
        seq_index: seq.seq_index,
        tokens: seq.padded_tokens(pad_id),
        segments: &seq.segments,
        pad_length: seq.pad_length,
    };
    serde_json::to_writer(&mut w, &line)?;
    w.write_all(b"\n")
}

pub fn write_stats<W: Write>(mut w: W, stats: &PackingStats) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, stats)?;
    w.write_all(b"\n")
}
