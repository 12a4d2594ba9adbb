//! Greedy in-order packing of tokenized documents into fixed-length
//! sequences, recording per-document segments so attention can be confined
//! to each document.

mod jsonl;
mod mask;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use jsonl::{read_docs, write_sequence, write_stats};
pub use mask::AttentionMask;

pub type TokenId = u32;

/// Sequence length used for the continual pre-training corpus.
pub const DEFAULT_SEQ_LEN: usize = 4096;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("sequence length must be at least 1")]
    InvalidSeqLen,
    #[error("document {0:?} has no tokens")]
    EmptyDoc(String),
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("document {doc_id:?} has {len} tokens, longer than sequence length {seq_len}; enable splitting")]
    DocTooLong { doc_id: String, len: usize, seq_len: usize },
    #[error("no documents")]
    NoDocuments,
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenDoc {
    pub doc_id: String,
    pub tokens: Vec<TokenId>,
}

impl TokenDoc {
    pub fn new(doc_id: impl Into<String>, tokens: Vec<TokenId>) -> Self {
        Self {
            doc_id: doc_id.into(),
            tokens,
        }
    }
}

/// A contiguous run of one document inside a packed sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub doc_id: String,
    pub start: usize,
    pub length: usize,
    /// Set when the run continues a document cut at the end of the previous
    /// sequence.
    #[serde(rename = "continuation")]
    pub is_continuation: bool,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// One packed sequence. `tokens` holds only document tokens; the padded,
/// fixed-length form comes from [`PackedSequence::padded_tokens`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub seq_index: u64,
    pub tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
    pub pad_length: usize,
}

impl PackedSequence {
    pub fn seq_len(&self) -> usize {
        self.tokens.len() + self.pad_length
    }

    pub fn padded_tokens(&self, pad_id: TokenId) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.seq_len());
        out.extend_from_slice(&self.tokens);
        out.resize(self.seq_len(), pad_id);
        out
    }

    pub fn mask(&self) -> AttentionMask<'_> {
        AttentionMask::new(self)
    }
}

/// Document length statistics over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusStats {
    pub doc_count: u64,
    pub token_count: u64,
    pub min_doc_tokens: u64,
    pub max_doc_tokens: u64,
    pub mean_doc_tokens: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct LengthAcc {
    count: u64,
    sum: u64,
    min: u64,
    max: u64,
}

impl LengthAcc {
    fn observe(&mut self, len: u64) {
        self.min = if self.count == 0 { len } else { self.min.min(len) };
        self.max = self.max.max(len);
        self.count += 1;
        self.sum += len;
    }

    fn finish(self) -> Result<CorpusStats, PackError> {
        if self.count == 0 {
            return Err(PackError::NoDocuments);
        }
        Ok(CorpusStats {
            doc_count: self.count,
            token_count: self.sum,
            min_doc_tokens: self.min,
            max_doc_tokens: self.max,
            mean_doc_tokens: self.sum as f64 / self.count as f64,
        })
    }
}

/// Corpus statistics plus the packing outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PackingStats {
    #[serde(flatten)]
    pub corpus: CorpusStats,
    pub sequence_count: u64,
    /// Padding slots over all emitted slots.
    pub padding_fraction: f64,
}

/// Length statistics without packing.
pub fn stats<I>(docs: I) -> Result<CorpusStats, PackError>
where
    I: IntoIterator<Item = TokenDoc>,
{
    let mut acc = LengthAcc::default();
    let mut ids = HashSet::new();
    for doc in docs {
        check_doc(&doc, &mut ids)?;
        acc.observe(doc.tokens.len() as u64);
    }
    acc.finish()
}

fn check_doc(doc: &TokenDoc, ids: &mut HashSet<String>) -> Result<(), PackError> {
    if doc.tokens.is_empty() {
        return Err(PackError::EmptyDoc(doc.doc_id.clone()));
    }
    if !ids.insert(doc.doc_id.clone()) {
        return Err(PackError::DuplicateDocId(doc.doc_id.clone()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackConfig {
    pub seq_len: usize,
    pub split_long_docs: bool,
    pub pad_id: TokenId,
}

impl Default for PackConfig {
    fn default() -> Self {
        Self {
            seq_len: DEFAULT_SEQ_LEN,
            split_long_docs: true,
            pad_id: 0,
        }
    }
}

/// Streaming packer. Feed documents with [`push`](Packer::push), which yields
/// sequences as they fill, then call [`finish`](Packer::finish) for the
/// trailing partial sequence and the statistics.
#[derive(Debug)]
pub struct Packer {
    config: PackConfig,
    tokens: Vec<TokenId>,
    segments: Vec<Segment>,
    next_index: u64,
    ids: HashSet<String>,
    lengths: LengthAcc,
    pad_total: u64,
}

impl Packer {
    pub fn new(config: PackConfig) -> Result<Self, PackError> {
        if config.seq_len == 0 {
            return Err(PackError::InvalidSeqLen);
        }
        Ok(Self {
            config,
            tokens: Vec::with_capacity(config.seq_len),
            segments: Vec::new(),
            next_index: 0,
            ids: HashSet::new(),
            lengths: LengthAcc::default(),
            pad_total: 0,
        })
    }

    pub fn config(&self) -> &PackConfig {
        &self.config
    }

    fn close(&mut self) -> PackedSequence {
        let s = self.config.seq_len;
        let pad_length = s - self.tokens.len();
        self.pad_total += pad_length as u64;
        let seq = PackedSequence {
            seq_index: self.next_index,
            tokens: std::mem::replace(&mut self.tokens, Vec::with_capacity(s)),
            segments: std::mem::take(&mut self.segments),
            pad_length,
        };
        self.next_index += 1;
        seq
    }

    fn append(&mut self, doc_id: &str, tokens: &[TokenId], is_continuation: bool) {
        self.segments.push(Segment {
            doc_id: doc_id.to_string(),
            start: self.tokens.len(),
            length: tokens.len(),
            is_continuation,
        });
        self.tokens.extend_from_slice(tokens);
    }

    /// Adds one document, returning any sequences completed by it.
    pub fn push(&mut self, doc: TokenDoc) -> Result<Vec<PackedSequence>, PackError> {
        check_doc(&doc, &mut self.ids)?;
        let s = self.config.seq_len;
        let len = doc.tokens.len();
        let mut done = Vec::new();

        if !self.config.split_long_docs {
            if len > s {
                return Err(PackError::DocTooLong {
                    doc_id: doc.doc_id,
                    len,
                    seq_len: s,
                });
            }
            if len > s - self.tokens.len() {
                done.push(self.close());
            }
            self.append(&doc.doc_id, &doc.tokens, false);
            if self.tokens.len() == s {
                done.push(self.close());
            }
        } else {
            let mut rest = &doc.tokens[..];
            let mut continuation = false;
            while !rest.is_empty() {
                let take = rest.len().min(s - self.tokens.len());
                let (head, tail) = rest.split_at(take);
                self.append(&doc.doc_id, head, continuation);
                if self.tokens.len() == s {
                    done.push(self.close());
                }
                rest = tail;
                continuation = true;
            }
        }
        self.lengths.observe(len as u64);
        Ok(done)
    }

    pub fn finish(mut self) -> Result<(Option<PackedSequence>, PackingStats), PackError> {
        let last = (!self.tokens.is_empty()).then(|| self.close());
        let corpus = self.lengths.finish()?;
        let slots = self.next_index * self.config.seq_len as u64;
        Ok((
            last,
            PackingStats {
                corpus,
                sequence_count: self.next_index,
                padding_fraction: if slots == 0 {
                    0.0
                } else {
                    self.pad_total as f64 / slots as f64
                },
            },
        ))
    }
}

/// Packs a whole corpus in memory.
pub fn pack<I>(docs: I, config: PackConfig) -> Result<(Vec<PackedSequence>, PackingStats), PackError>
where
    I: IntoIterator<Item = TokenDoc>,
{
    let mut packer = Packer::new(config)?;
    let mut out = Vec::new();
    for doc in docs {
        out.extend(packer.push(doc)?);
    }
    let (last, stats) = packer.finish()?;
    out.extend(last);
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(lengths: &[usize]) -> Vec<TokenDoc> {
        let mut next = 1;
        lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let tokens = (next..next + n as u32).collect();
                next += n as u32;
                TokenDoc::new(format!("doc{}", i + 1), tokens)
            })
            .collect()
    }

    fn cfg(seq_len: usize, split: bool) -> PackConfig {
        PackConfig {
            seq_len,
            split_long_docs: split,
            pad_id: 0,
        }
    }

    /// Replays the greedy rule one token at a time, returning
    /// (doc index, continuation) per slot and `None` for padding.
    fn replay(lengths: &[usize], s: usize, split: bool) -> Vec<Vec<Option<(usize, bool)>>> {
        let mut seqs: Vec<Vec<Option<(usize, bool)>>> = Vec::new();
        let mut cur: Vec<Option<(usize, bool)>> = Vec::new();
        for (d, &n) in lengths.iter().enumerate() {
            if !split && cur.len() + n > s {
                cur.resize(s, None);
                seqs.push(std::mem::take(&mut cur));
            }
            let mut cont = false;
            for _ in 0..n {
                cur.push(Some((d, cont)));
                if cur.len() == s {
                    seqs.push(std::mem::take(&mut cur));
                    cont = true;
                }
            }
        }
        if !cur.is_empty() {
            cur.resize(s, None);
            seqs.push(cur);
        }
        seqs
    }

    fn flatten(seq: &PackedSequence, ids: &[TokenDoc]) -> Vec<Option<(usize, bool)>> {
        let mut out = vec![None; seq.seq_len()];
        for seg in &seq.segments {
            let d = ids.iter().position(|x| x.doc_id == seg.doc_id).unwrap();
            for slot in &mut out[seg.start..seg.end()] {
                *slot = Some((d, seg.is_continuation));
            }
        }
        out
    }

    #[test]
    fn no_split_example() {
        let input = docs(&[3, 2, 4]);
        let (seqs, stats) = pack(input.clone(), cfg(5, false)).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].segments.iter().map(|s| s.length).collect::<Vec<_>>(), [3, 2]);
        assert_eq!(seqs[0].pad_length, 0);
        assert_eq!(seqs[1].segments.len(), 1);
        assert_eq!(seqs[1].segments[0].doc_id, "doc3");
        assert_eq!(seqs[1].pad_length, 1);
        assert_eq!(stats.padding_fraction, 0.1);
        let oracle = replay(&[3, 2, 4], 5, false);
        assert_eq!(seqs.iter().map(|s| flatten(s, &input)).collect::<Vec<_>>(), oracle);
    }

    #[test]
    fn single_doc_of_exact_length() {
        let (seqs, stats) = pack(docs(&[6]), cfg(6, false)).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].segments.len(), 1);
        assert_eq!(seqs[0].pad_length, 0);
        assert_eq!(stats.padding_fraction, 0.0);
    }

    #[test]
    fn split_example() {
        let input = docs(&[7]);
        let (seqs, _) = pack(input.clone(), cfg(4, true)).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(
            seqs[0].segments,
            vec![Segment {
                doc_id: "doc1".into(),
                start: 0,
                length: 4,
                is_continuation: false
            }]
        );
        assert_eq!(
            seqs[1].segments,
            vec![Segment {
                doc_id: "doc1".into(),
                start: 0,
                length: 3,
                is_continuation: true
            }]
        );
        assert_eq!(seqs[1].pad_length, 1);
        assert_eq!(
            seqs.iter().map(|s| flatten(s, &input)).collect::<Vec<_>>(),
            replay(&[7], 4, true)
        );
    }

    #[test]
    fn replay_agrees_on_mixed_corpora() {
        let corpora: [&[usize]; 5] = [
            &[1, 1, 1, 1, 1],
            &[5, 1, 9, 2],
            &[3, 3, 3],
            &[12, 1, 4, 4],
            &[2, 7, 1, 1, 8],
        ];
        for lengths in corpora {
            for s in 1..=9 {
                for split in [true, false] {
                    if !split && lengths.iter().any(|&l| l > s) {
                        continue;
                    }
                    let input = docs(lengths);
                    let (seqs, stats) = pack(input.clone(), cfg(s, split)).unwrap();
                    let got: Vec<_> = seqs.iter().map(|q| flatten(q, &input)).collect();
                    assert_eq!(got, replay(lengths, s, split), "{lengths:?} s={s} split={split}");
                    let content: u64 = seqs.iter().map(|q| (s - q.pad_length) as u64).sum();
                    assert_eq!(stats.corpus.token_count, content);
                }
            }
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            pack(docs(&[7]), cfg(4, false)),
            Err(PackError::DocTooLong { len: 7, .. })
        ));
        assert!(matches!(pack(docs(&[1]), cfg(0, true)), Err(PackError::InvalidSeqLen)));
        assert!(matches!(pack(Vec::new(), cfg(4, true)), Err(PackError::NoDocuments)));
        let dup = vec![TokenDoc::new("a", vec![1]), TokenDoc::new("a", vec![2])];
        assert!(matches!(pack(dup, cfg(4, true)), Err(PackError::DuplicateDocId(_))));
        assert!(matches!(
            pack(vec![TokenDoc::new("e", vec![])], cfg(4, true)),
            Err(PackError::EmptyDoc(_))
        ));
    }

    #[test]
    fn corpus_stats() {
        let s = stats(docs(&[156, 650, 6981])).unwrap();
        assert_eq!(s.min_doc_tokens, 156);
        assert_eq!(s.max_doc_tokens, 6981);
        assert!((s.mean_doc_tokens - 2595.67).abs() <= 0.01);
        let s = stats(docs(&[5])).unwrap();
        assert_eq!((s.min_doc_tokens, s.max_doc_tokens, s.mean_doc_tokens), (5, 5, 5.0));
        let s = stats(docs(&[1, 1, 1, 1])).unwrap();
        assert_eq!((s.mean_doc_tokens, s.token_count), (1.0, 4));
        assert!(matches!(stats(Vec::new()), Err(PackError::NoDocuments)));
    }

    #[test]
    fn padded_form() {
        let (seqs, _) = pack(
            docs(&[2]),
            PackConfig {
                seq_len: 4,
                split_long_docs: true,
                pad_id: 9,
            },
        )
        .unwrap();
        assert_eq!(seqs[0].padded_tokens(9), vec![1, 2, 9, 9]);
    }
}
