//! Cached state representation of an agent's task context.
//!
//! A context is partitioned into a static part (an immutable prefix followed by
//! an append-only log of state chunks) and a dynamic part (an instantaneous
//! suffix plus the task instruction). The static part is what an inference
//! server can keep resident in its prefix cache; the dynamic part is
//! recomputed on every query.
//!
//! All prefix-match positions in this module are 1-based.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque token identifier.
pub type Token = u32;

/// An ordered sequence of token identifiers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<Token>);

impl TokenSeq {
    pub fn new(ids: Vec<Token>) -> Self {
        Self(ids)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Token] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Token> {
        self.0.iter()
    }

    pub fn into_vec(self) -> Vec<Token> {
        self.0
    }

    /// Appends `other` in place.
    pub fn extend_from(&mut self, other: &TokenSeq) {
        self.0.extend_from_slice(&other.0);
    }

    pub fn extend_from_slice(&mut self, other: &[Token]) {
        self.0.extend_from_slice(other);
    }

    /// Returns `self ⊕ other` as a new sequence.
    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut out = Vec::with_capacity(self.len() + other.len());
        out.extend_from_slice(&self.0);
        out.extend_from_slice(&other.0);
        TokenSeq(out)
    }

    /// Copies the 0-based half-open `range` into a new sequence.
    ///
    /// Panics if the range is out of bounds, like slice indexing.
    pub fn slice(&self, range: Range<usize>) -> TokenSeq {
        TokenSeq(self.0[range].to_vec())
    }

    pub fn starts_with(&self, prefix: &TokenSeq) -> bool {
        self.0.starts_with(&prefix.0)
    }

    pub fn clear(&mut self) {
        self.0.clear();
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(ids: Vec<Token>) -> Self {
        Self(ids)
    }
}

impl From<&[Token]> for TokenSeq {
    fn from(ids: &[Token]) -> Self {
        Self(ids.to_vec())
    }
}

impl FromIterator<Token> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = Token>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a TokenSeq {
    type Item = &'a Token;
    type IntoIter = std::slice::Iter<'a, Token>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{} tokens>", self.0.len())
    }
}

/// 1-based index of the first position at which `prev` and `next` differ.
///
/// A position where exactly one of the sequences has already ended counts as a
/// difference, so a pure extension (or an identical sequence) yields
/// `prev.len() + 1`: every cached token of `prev` stays valid.
pub fn first_differing_index(prev: &TokenSeq, next: &TokenSeq) -> usize {
    let common = prev
        .as_slice()
        .iter()
        .zip(next.as_slice())
        .take_while(|(a, b)| a == b)
        .count();
    common + 1
}

/// One append-only unit of accumulated state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateChunk {
    pub chunk_id: u64,
    pub tokens: TokenSeq,
    /// Scenario time at which the chunk was produced.
    pub created_at: f64,
}

impl StateChunk {
    pub fn new(chunk_id: u64, tokens: TokenSeq, created_at: f64) -> Self {
        Self {
            chunk_id,
            tokens,
            created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContextError {
    #[error("state chunk {chunk_id} carries no tokens")]
    EmptyChunk { chunk_id: u64 },
    #[error("state chunk id {got} does not follow the last accepted id {last}")]
    NonMonotonicChunkId { last: u64, got: u64 },
    #[error("eviction fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
}

/// How [`CsrContext::evict`] chooses which chunks to drop.
///
/// Every policy removes only the oldest chunks and never touches the prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvictionPolicy {
    /// Drop the first `floor(n / 2)` chunks of an `n`-chunk log.
    OldestHalf,
    /// Keep the newest `ceil(fraction * n)` chunks.
    KeepNewestFraction { fraction: f64 },
}

impl Default for EvictionPolicy {
    fn default() -> Self {
        EvictionPolicy::OldestHalf
    }
}

impl EvictionPolicy {
    pub fn validate(&self) -> Result<(), ContextError> {
        match *self {
            EvictionPolicy::OldestHalf => Ok(()),
            EvictionPolicy::KeepNewestFraction { fraction } => {
                if fraction > 0.0 && fraction <= 1.0 {
                    Ok(())
                } else {
                    Err(ContextError::InvalidFraction(fraction))
                }
            }
        }
    }

    /// Number of oldest chunks removed from an `n`-chunk log.
    pub fn chunks_to_drop(&self, n: usize) -> usize {
        match *self {
            EvictionPolicy::OldestHalf => n / 2,
            EvictionPolicy::KeepNewestFraction { fraction } => {
                // Absorb float noise such as 0.1 * 1100 = 110.00000000000001.
                let keep = (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
                n - keep.min(n)
            }
        }
    }
}

/// Partitioned task representation: `prefix ⊕ chunks ⊕ suffix ⊕ task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ContextDoc", into = "ContextDoc")]
pub struct CsrContext {
    prefix: TokenSeq,
    chunks: Vec<StateChunk>,
    suffix: TokenSeq,
    task: TokenSeq,
    seq_version: u64,
    static_cursor: usize,
}

/// Wire form of [`CsrContext`]; the static cursor is derived on load.
#[derive(Serialize, Deserialize)]
struct ContextDoc {
    prefix: TokenSeq,
    chunks: Vec<StateChunk>,
    #[serde(default)]
    suffix: TokenSeq,
    #[serde(default)]
    task: TokenSeq,
    #[serde(default)]
    seq_version: u64,
}

impl From<ContextDoc> for CsrContext {
    fn from(doc: ContextDoc) -> Self {
        let static_cursor = doc.prefix.len() + doc.chunks.iter().map(|c| c.tokens.len()).sum::<usize>();
        CsrContext {
            prefix: doc.prefix,
            chunks: doc.chunks,
            suffix: doc.suffix,
            task: doc.task,
            seq_version: doc.seq_version,
            static_cursor,
        }
    }
}

impl From<CsrContext> for ContextDoc {
    fn from(ctx: CsrContext) -> Self {
        ContextDoc {
            prefix: ctx.prefix,
            chunks: ctx.chunks,
            suffix: ctx.suffix,
            task: ctx.task,
            seq_version: ctx.seq_version,
        }
    }
}

impl CsrContext {
    pub fn new(prefix: TokenSeq) -> Self {
        let static_cursor = prefix.len();
        Self {
            prefix,
            chunks: Vec::new(),
            suffix: TokenSeq::empty(),
            task: TokenSeq::empty(),
            seq_version: 0,
            static_cursor,
        }
    }

    pub fn prefix(&self) -> &TokenSeq {
        &self.prefix
    }

    pub fn chunks(&self) -> &[StateChunk] {
        &self.chunks
    }

    pub fn suffix(&self) -> &TokenSeq {
        &self.suffix
    }

    pub fn task(&self) -> &TokenSeq {
        &self.task
    }

    pub fn seq_version(&self) -> u64 {
        self.seq_version
    }

    /// Token length of the static part (prefix plus all chunks).
    pub fn static_cursor(&self) -> usize {
        self.static_cursor
    }

    pub fn dynamic_len(&self) -> usize {
        self.suffix.len() + self.task.len()
    }

    pub fn last_chunk_id(&self) -> Option<u64> {
        self.chunks.last().map(|c| c.chunk_id)
    }

    /// Prefix followed by every chunk, in log order.
    pub fn static_tokens(&self) -> TokenSeq {
        let mut out = Vec::with_capacity(self.static_cursor);
        self.write_static(&mut out);
        TokenSeq(out)
    }

    fn write_static(&self, out: &mut Vec<Token>) {
        out.extend_from_slice(self.prefix.as_slice());
        for chunk in &self.chunks {
            out.extend_from_slice(chunk.tokens.as_slice());
        }
    }

    /// Full task sequence: prefix, chunks, suffix, task.
    pub fn assemble(&self) -> TokenSeq {
        self.assemble_with(&self.suffix, &self.task)
    }

    /// Assembles the static part with an ad-hoc dynamic part, leaving `self` untouched.
    pub fn assemble_with(&self, suffix: &TokenSeq, task: &TokenSeq) -> TokenSeq {
        let mut out = Vec::with_capacity(self.static_cursor + suffix.len() + task.len());
        self.write_static(&mut out);
        out.extend_from_slice(suffix.as_slice());
        out.extend_from_slice(task.as_slice());
        TokenSeq(out)
    }

    /// Appends a state increment to the chunk log.
    pub fn append_chunk(&mut self, chunk: StateChunk) -> Result<(), ContextError> {
        if chunk.tokens.is_empty() {
            return Err(ContextError::EmptyChunk {
                chunk_id: chunk.chunk_id,
            });
        }
        if let Some(last) = self.last_chunk_id() {
            if chunk.chunk_id <= last {
                return Err(ContextError::NonMonotonicChunkId {
                    last,
                    got: chunk.chunk_id,
                });
            }
        }
        self.static_cursor += chunk.tokens.len();
        self.chunks.push(chunk);
        Ok(())
    }

    pub fn set_dynamic(&mut self, suffix: TokenSeq, task: TokenSeq) {
        self.suffix = suffix;
        self.task = task;
    }

    /// Drops the oldest chunks according to `policy` and bumps the sequence
    /// version. Returns the retained static fraction `|new static| / |old static|`.
    ///
    /// An empty chunk log is left untouched (no version bump) and reports 1.
    pub fn evict(&mut self, policy: &EvictionPolicy) -> f64 {
        if self.chunks.is_empty() {
            return 1.0;
        }
        let old_static = self.static_cursor;
        let drop = policy.chunks_to_drop(self.chunks.len());
        let removed: usize = self.chunks.drain(..drop).map(|c| c.tokens.len()).sum();
        self.static_cursor -= removed;
        self.seq_version += 1;
        if old_static == 0 {
            1.0
        } else {
            self.static_cursor as f64 / old_static as f64
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[Token]) -> TokenSeq {
        TokenSeq::from(ids)
    }

    fn chunk(id: u64, ids: &[Token]) -> StateChunk {
        StateChunk::new(id, seq(ids), id as f64)
    }

    fn ctx_with_chunks(n: u64) -> CsrContext {
        let mut ctx = CsrContext::new(seq(&[1, 2]));
        for id in 1..=n {
            ctx.append_chunk(chunk(id, &[id as Token * 10, id as Token * 10 + 1]))
                .unwrap();
        }
        ctx
    }

    #[test]
    fn first_differing_index_pure_extension() {
        assert_eq!(first_differing_index(&seq(&[5, 7, 9]), &seq(&[5, 7, 9, 2])), 4);
    }

    #[test]
    fn first_differing_index_mismatch() {
        assert_eq!(first_differing_index(&seq(&[5, 7, 9]), &seq(&[5, 8, 9])), 2);
    }

    #[test]
    fn first_differing_index_edges() {
        assert_eq!(first_differing_index(&seq(&[]), &seq(&[])), 1);
        assert_eq!(first_differing_index(&seq(&[]), &seq(&[3])), 1);
        assert_eq!(first_differing_index(&seq(&[3, 4]), &seq(&[3])), 2);
        assert_eq!(first_differing_index(&seq(&[3, 4]), &seq(&[3, 4])), 3);
    }

    #[test]
    fn assemble_orders_parts() {
        let mut ctx = CsrContext::new(seq(&[1]));
        ctx.append_chunk(chunk(1, &[2, 3])).unwrap();
        ctx.set_dynamic(seq(&[4]), seq(&[5]));
        assert_eq!(ctx.assemble(), seq(&[1, 2, 3, 4, 5]));
        assert_eq!(ctx.assemble().len(), ctx.static_cursor() + 2);
    }

    #[test]
    fn assemble_without_dynamic_is_static() {
        let ctx = ctx_with_chunks(3);
        assert_eq!(ctx.assemble(), ctx.static_tokens());
    }

    #[test]
    fn append_to_empty_log() {
        let mut ctx = CsrContext::new(seq(&[1, 2, 3]));
        ctx.append_chunk(chunk(7, &[4, 5])).unwrap();
        assert_eq!(ctx.chunks().len(), 1);
        assert_eq!(ctx.static_cursor(), 5);
    }

    #[test]
    fn append_rejects_empty_and_out_of_order() {
        let mut ctx = ctx_with_chunks(2);
        assert_eq!(
            ctx.append_chunk(chunk(3, &[])),
            Err(ContextError::EmptyChunk { chunk_id: 3 })
        );
        assert_eq!(
            ctx.append_chunk(chunk(2, &[9])),
            Err(ContextError::NonMonotonicChunkId { last: 2, got: 2 })
        );
        assert_eq!(ctx.chunks().len(), 2);
        assert_eq!(ctx.static_cursor(), 6);
    }

    #[test]
    fn sequential_appends_track_cursor() {
        let mut ctx = CsrContext::new(seq(&[0; 4]));
        let mut expected = 4;
        for id in 1..=50u64 {
            let len = (id % 7 + 1) as usize;
            ctx.append_chunk(StateChunk::new(id, TokenSeq::new(vec![id as Token; len]), 0.0))
                .unwrap();
            expected += len;
        }
        assert_eq!(ctx.static_cursor(), expected);
    }

    #[test]
    fn set_dynamic_keeps_static_prefix() {
        let mut ctx = ctx_with_chunks(2);
        ctx.set_dynamic(seq(&[50]), seq(&[60, 61]));
        let before = ctx.assemble();
        ctx.set_dynamic(seq(&[50]), seq(&[62]));
        let after = ctx.assemble();
        let i = first_differing_index(&before, &after);
        assert!(i >= ctx.static_cursor() + ctx.suffix().len() + 1);

        ctx.set_dynamic(TokenSeq::empty(), TokenSeq::empty());
        assert_eq!(ctx.assemble(), ctx.static_tokens());
    }

    #[test]
    fn evict_oldest_half_even() {
        let mut ctx = ctx_with_chunks(4);
        let eps = ctx.evict(&EvictionPolicy::OldestHalf);
        let ids: Vec<u64> = ctx.chunks().iter().map(|c| c.chunk_id).collect();
        assert_eq!(ids, vec![3, 4]);
        assert_eq!(ctx.prefix(), &seq(&[1, 2]));
        assert_eq!(ctx.seq_version(), 1);
        assert_eq!(ctx.static_cursor(), 6);
        assert!((eps - 6.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn evict_oldest_half_odd_rounds_down() {
        let mut ctx = ctx_with_chunks(5);
        ctx.evict(&EvictionPolicy::OldestHalf);
        let ids: Vec<u64> = ctx.chunks().iter().map(|c| c.chunk_id).collect();
        assert_eq!(ids, vec![3, 4, 5]);
    }

    #[test]
    fn evict_empty_log_is_identity() {
        let mut ctx = CsrContext::new(seq(&[1, 2]));
        let before = ctx.clone();
        assert_eq!(ctx.evict(&EvictionPolicy::OldestHalf), 1.0);
        assert_eq!(ctx, before);
    }

    #[test]
    fn keep_newest_fraction_rounds_up() {
        let p = EvictionPolicy::KeepNewestFraction { fraction: 0.3 };
        assert_eq!(p.chunks_to_drop(10), 7);
        assert_eq!(p.chunks_to_drop(1), 0);
        assert!(EvictionPolicy::KeepNewestFraction { fraction: 0.0 }.validate().is_err());
        assert!(EvictionPolicy::KeepNewestFraction { fraction: 1.5 }.validate().is_err());
    }

    #[test]
    fn json_document_shape() {
        let mut ctx = ctx_with_chunks(1);
        ctx.set_dynamic(seq(&[9]), seq(&[8]));
        let v: serde_json::Value = serde_json::from_str(&ctx.to_json().unwrap()).unwrap();
        assert_eq!(v["prefix"], serde_json::json!([1, 2]));
        assert_eq!(v["chunks"][0]["chunk_id"], 1);
        assert_eq!(v["chunks"][0]["tokens"], serde_json::json!([10, 11]));
        assert_eq!(v["seq_version"], 0);
        assert!(v.get("static_cursor").is_none());
        let back = CsrContext::from_json(&ctx.to_json().unwrap()).unwrap();
        assert_eq!(back, ctx);
        assert_eq!(back.static_cursor(), 4);
    }
}
