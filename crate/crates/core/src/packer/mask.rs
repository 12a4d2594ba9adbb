use super::PackedSequence;

/// Block-diagonal causal attention mask of a packed sequence: a query may
/// attend to a key at or before it within the same segment. Padding
/// positions attend to nothing and are attended by nothing.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMask<'a> {
    seq: &'a PackedSequence,
}

impl<'a> AttentionMask<'a> {
    pub fn new(seq: &'a PackedSequence) -> Self {
        Self { seq }
    }

    fn segment_of(&self, pos: usize) -> Option<usize> {
        self.seq.segments.iter().position(|s| s.start <= pos && pos < s.end())
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        key <= query
            && match (self.segment_of(query), self.segment_of(key)) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            }
    }

    /// Number of allowed (query, key) pairs.
    pub fn allowed_count(&self) -> u64 {
        self.seq
            .segments
            .iter()
            .map(|s| {
                let n = s.length as u64;
                n * (n + 1) / 2
            })
            .sum()
    }

    /// Allowed (query, key) pairs, ordered by segment, then query, then key.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + 'a {
        self.seq
            .segments
            .iter()
            .flat_map(|s| (s.start..s.end()).flat_map(move |q| (s.start..=q).map(move |k| (q, k))))
    }

    /// Row-major `seq_len x seq_len` boolean mask.
    pub fn dense(&self) -> Vec<bool> {
        let n = self.seq.seq_len();
        let mut out = vec![false; n * n];
        for (q, k) in self.pairs() {
            out[q * n + k] = true;
        }
        out
    }
}
