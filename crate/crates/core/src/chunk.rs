//! Per-chunk DFA simulation.
//!
//! Each chunk is first run from every DFA state at once, yielding a
//! state-transition vector. An exclusive scan over those vectors gives every
//! chunk its true start state, after which a single DFA instance per chunk
//! classifies the bytes into three bitmaps.

use rayon::prelude::*;

use crate::dfa::{DfaSpec, StateId, MAX_STATES};
use crate::encoding::{Encoding, SymbolByte};
use crate::scan::{exclusive_scan, exclusive_scan_with_total, StateTransitionVector};

/// Largest supported chunk: one bit per byte in a `u64`.
pub const MAX_CHUNK_SIZE: usize = 64;
pub const DEFAULT_CHUNK_SIZE: usize = 31;

/// Bitmaps and bookkeeping for one chunk. Bit `j` describes byte `j`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChunkMeta {
    /// Record delimiters.
    pub rec: u64,
    /// Field delimiters, including record delimiters.
    pub col: u64,
    /// Bytes that are not field content.
    pub ctl: u64,
    pub len: u8,
    /// Leading bytes continuing a symbol from an earlier chunk.
    pub skip_prefix: u8,
    /// Byte of the first transition into the invalid state.
    pub first_invalid: Option<u8>,
    /// Control flag of the last symbol starting in this chunk.
    pub last_symbol_control: Option<bool>,
    /// State right after the last record delimiter.
    pub after_last_record: Option<StateId>,
}

impl ChunkMeta {
    pub fn is_consistent(&self) -> bool {
        let mask = if self.len as usize >= 64 {
            u64::MAX
        } else {
            (1u64 << self.len) - 1
        };
        self.rec & !self.col == 0
            && self.col & !self.ctl == 0
            && (self.rec | self.col | self.ctl) & !mask == 0
    }
}

#[inline]
fn group_for(spec: &DfaSpec, m: Option<u8>) -> u8 {
    match m {
        Some(b) => spec.group_of(b),
        None => spec.catch_all_group(),
    }
}

/// Runs the chunk from every state and records where each one ends.
pub fn simulate_chunk_all_states(
    chunk: &[u8],
    spec: &DfaSpec,
    encoding: Encoding,
) -> StateTransitionVector {
    let n = spec.state_count();
    let mut cur = [0 as StateId; MAX_STATES];
    for (i, s) in cur[..n].iter_mut().enumerate() {
        *s = i as StateId;
    }
    for j in 0..chunk.len() {
        if let SymbolByte::Start(m) = encoding.classify(chunk, j) {
            let row = spec.row(group_for(spec, m));
            for s in cur[..n].iter_mut() {
                *s = row[*s as usize];
            }
        }
    }
    StateTransitionVector::from_states(&cur[..n])
}

/// Start state of every chunk, given the state the whole input starts in.
pub fn resolve_start_states(
    stvs: &[StateTransitionVector],
    state_count: usize,
    seed_state: StateId,
    workers: usize,
) -> Vec<StateId> {
    resolve_start_states_with_end(stvs, state_count, seed_state, workers).0
}

/// Like [`resolve_start_states`], also returning the state after the last
/// chunk.
pub fn resolve_start_states_with_end(
    stvs: &[StateTransitionVector],
    state_count: usize,
    seed_state: StateId,
    workers: usize,
) -> (Vec<StateId>, StateId) {
    let identity = StateTransitionVector::identity(state_count);
    let (prefixes, total) =
        exclusive_scan_with_total(stvs, identity, |a, b| a.compose(b), workers);
    let starts = prefixes.iter().map(|v| v.get(seed_state)).collect();
    (starts, total.get(seed_state))
}

/// Runs one DFA instance over the chunk and fills the bitmaps.
///
/// Leading continuation bytes are left as data here; [`emit_all`] copies the
/// control flag of the symbol they belong to.
pub fn emit_bitmaps(
    chunk: &[u8],
    spec: &DfaSpec,
    start_state: StateId,
    encoding: Encoding,
) -> ChunkMeta {
    debug_assert!(chunk.len() <= MAX_CHUNK_SIZE);
    let invalid = spec.invalid_state();
    let mut meta = ChunkMeta {
        len: chunk.len() as u8,
        skip_prefix: encoding.continuation_prefix_len(chunk) as u8,
        ..ChunkMeta::default()
    };
    let mut state = start_state;
    for j in 0..chunk.len() {
        let bit = 1u64 << j;
        match encoding.classify(chunk, j) {
            SymbolByte::Continuation => {
                if meta.last_symbol_control == Some(true) {
                    meta.ctl |= bit;
                }
            }
            SymbolByte::Start(m) => {
                let group = group_for(spec, m);
                let action = spec.emission(state, group);
                let next = spec.transition(state, group);
                if next == invalid && state != invalid && meta.first_invalid.is_none() {
                    meta.first_invalid = Some(j as u8);
                }
                if action.is_control() {
                    meta.ctl |= bit;
                }
                if action.is_field_delimiter() {
                    meta.col |= bit;
                }
                if action.is_record_delimiter() {
                    meta.rec |= bit;
                    meta.after_last_record = Some(next);
                }
                meta.last_symbol_control = Some(action.is_control());
                state = next;
            }
        }
    }
    meta
}

/// Everything the chunk phase produces for one buffer.
#[derive(Debug, Clone)]
pub struct ChunkPass {
    pub chunk_size: usize,
    pub metas: Vec<ChunkMeta>,
    pub starts: Vec<StateId>,
    pub end_state: StateId,
}

/// State-transition vectors of every chunk, in parallel.
pub fn simulate_all(
    input: &[u8],
    spec: &DfaSpec,
    encoding: Encoding,
    chunk_size: usize,
) -> Vec<StateTransitionVector> {
    input
        .par_chunks(chunk_size)
        .with_min_len(256)
        .map(|c| simulate_chunk_all_states(c, spec, encoding))
        .collect()
}

/// Bitmaps of every chunk, in parallel, with continuation bytes at chunk
/// starts classified like the symbol they belong to. `prev_control` is the
/// control flag of the symbol preceding the input, if any.
pub fn emit_all(
    input: &[u8],
    spec: &DfaSpec,
    encoding: Encoding,
    chunk_size: usize,
    starts: &[StateId],
    prev_control: Option<bool>,
    workers: usize,
) -> Vec<ChunkMeta> {
    let mut metas: Vec<ChunkMeta> = input
        .par_chunks(chunk_size)
        .with_min_len(256)
        .zip(starts.par_iter())
        .map(|(c, &s)| emit_bitmaps(c, spec, s, encoding))
        .collect();
    if encoding != Encoding::Ascii {
        let flags: Vec<Option<bool>> = metas.iter().map(|m| m.last_symbol_control).collect();
        let before = exclusive_scan(&flags, None, |a, b| b.or(*a), workers);
        metas
            .par_iter_mut()
            .zip(before.par_iter())
            .for_each(|(m, prev)| {
                if m.skip_prefix > 0 && prev.or(prev_control) == Some(true) {
                    let prefix = if m.skip_prefix as usize >= 64 {
                        u64::MAX
                    } else {
                        (1u64 << m.skip_prefix) - 1
                    };
                    m.ctl |= prefix;
                }
            });
    }
    metas
}

/// Full chunk phase: simulate, resolve, emit.
pub fn chunk_pass(
    input: &[u8],
    spec: &DfaSpec,
    encoding: Encoding,
    chunk_size: usize,
    seed_state: StateId,
    prev_control: Option<bool>,
    workers: usize,
) -> ChunkPass {
    let stvs = simulate_all(input, spec, encoding, chunk_size);
    let (starts, end_state) =
        resolve_start_states_with_end(&stvs, spec.state_count(), seed_state, workers);
    drop(stvs);
    let metas = emit_all(input, spec, encoding, chunk_size, &starts, prev_control, workers);
    ChunkPass {
        chunk_size,
        metas,
        starts,
        end_state,
    }
}
