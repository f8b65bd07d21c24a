//! Exclusive prefix scans over associative operators, and the two
//! operators the parser scans with: state-transition vector composition and
//! column offset combination.

use rayon::prelude::*;

use crate::dfa::StateId;
use crate::packed::{self, PackedLayout};

/// Below this many items per worker the scan runs sequentially.
const MIN_BLOCK: usize = 2048;

/// `out[0] = identity`, `out[i] = op(out[i - 1], items[i - 1])`.
///
/// Runs as a two-pass blocked scan: reduce each block, scan the block
/// aggregates, rescan each block from its carried-in prefix. The result does
/// not depend on `workers` for any associative `op`.
pub fn exclusive_scan<T, F>(items: &[T], identity: T, op: F, workers: usize) -> Vec<T>
where
    T: Clone + Send + Sync,
    F: Fn(&T, &T) -> T + Sync,
{
    exclusive_scan_with_total(items, identity, op, workers).0
}

/// Exclusive scan plus the fold of all items.
pub fn exclusive_scan_with_total<T, F>(
    items: &[T],
    identity: T,
    op: F,
    workers: usize,
) -> (Vec<T>, T)
where
    T: Clone + Send + Sync,
    F: Fn(&T, &T) -> T + Sync,
{
    let n = items.len();
    let workers = workers.max(1);
    if workers == 1 || n < 2 * MIN_BLOCK {
        let mut out = Vec::with_capacity(n);
        let mut acc = identity;
        for item in items {
            let next = op(&acc, item);
            out.push(acc);
            acc = next;
        }
        return (out, acc);
    }

    let blocks = workers.min(n / MIN_BLOCK).max(1);
    let block_len = n.div_ceil(blocks);
    let aggregates: Vec<T> = items
        .par_chunks(block_len)
        .map(|block| {
            let mut it = block.iter();
            let first = it.next().expect("non-empty block").clone();
            it.fold(first, |acc, x| op(&acc, x))
        })
        .collect();

    let mut prefixes = Vec::with_capacity(aggregates.len());
    let mut acc = identity;
    for agg in &aggregates {
        let next = op(&acc, agg);
        prefixes.push(acc);
        acc = next;
    }

    let mut out: Vec<T> = Vec::with_capacity(n);
    let parts: Vec<Vec<T>> = items
        .par_chunks(block_len)
        .zip(prefixes.into_par_iter())
        .map(|(block, prefix)| {
            let mut local = Vec::with_capacity(block.len());
            let mut acc = prefix;
            for item in block {
                let next = op(&acc, item);
                local.push(acc);
                acc = next;
            }
            local
        })
        .collect();
    for p in parts {
        out.extend(p);
    }
    (out, acc)
}

/// `out[i] = op(out[i - 1], items[i])` with `out[0] = items[0]`.
pub fn inclusive_scan<T, F>(items: &[T], identity: T, op: F, workers: usize) -> Vec<T>
where
    T: Clone + Send + Sync,
    F: Fn(&T, &T) -> T + Sync,
{
    let (mut out, total) = exclusive_scan_with_total(items, identity, &op, workers);
    if !out.is_empty() {
        out.remove(0);
        out.push(total);
    }
    out
}

const PACKED_STATES: usize = 16;
const STV_LAYOUT: PackedLayout = match PackedLayout::try_new(16, 4) {
    Some(l) => l,
    None => panic!("16x4 layout fits two words"),
};

/// End state of a chunk for every assumed start state.
///
/// Machines with at most 16 states keep the vector bit-packed in two words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StateTransitionVector {
    Packed { words: [u32; 2], len: u8 },
    Plain(Box<[StateId]>),
}

impl StateTransitionVector {
    pub fn identity(state_count: usize) -> Self {
        let ids: Vec<StateId> = (0..state_count).map(|i| i as StateId).collect();
        Self::from_states(&ids)
    }

    pub fn from_states(states: &[StateId]) -> Self {
        if states.len() <= PACKED_STATES {
            let mut words = [0u32; 2];
            for (i, &s) in states.iter().enumerate() {
                debug_assert!((s as usize) < states.len());
                packed::set(&mut words, &STV_LAYOUT, i as u32, u32::from(s));
            }
            StateTransitionVector::Packed {
                words,
                len: states.len() as u8,
            }
        } else {
            StateTransitionVector::Plain(states.into())
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StateTransitionVector::Packed { len, .. } => *len as usize,
            StateTransitionVector::Plain(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, start: StateId) -> StateId {
        match self {
            StateTransitionVector::Packed { words, .. } => {
                packed::get(words, &STV_LAYOUT, u32::from(start)) as StateId
            }
            StateTransitionVector::Plain(v) => v[start as usize],
        }
    }

    pub fn to_vec(&self) -> Vec<StateId> {
        (0..self.len()).map(|i| self.get(i as StateId)).collect()
    }

    /// `self ∘ other`: entry `i` is `other[self[i]]`, the end state after
    /// reading this chunk and then the other one.
    pub fn compose(&self, other: &Self) -> Self {
        assert_eq!(
            self.len(),
            other.len(),
            "composing state-transition vectors of different lengths"
        );
        match (self, other) {
            (
                StateTransitionVector::Packed { words: a, len },
                StateTransitionVector::Packed { words: b, .. },
            ) => {
                let mut out = [0u32; 2];
                for i in 0..u32::from(*len) {
                    let mid = packed::get(a, &STV_LAYOUT, i);
                    packed::set(&mut out, &STV_LAYOUT, i, packed::get(b, &STV_LAYOUT, mid));
                }
                StateTransitionVector::Packed { words: out, len: *len }
            }
            _ => {
                let a = self.to_vec();
                let composed: Vec<StateId> = a.iter().map(|&s| other.get(s)).collect();
                Self::from_states(&composed)
            }
        }
    }
}

/// A chunk's contribution to the column position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColumnOffset {
    /// Adds to whatever column the chunk starts in.
    Relative(u64),
    /// Fixed by a record delimiter inside the chunk.
    Absolute(u64),
}

impl ColumnOffset {
    pub const IDENTITY: ColumnOffset = ColumnOffset::Relative(0);

    pub fn value(self) -> u64 {
        match self {
            ColumnOffset::Relative(v) | ColumnOffset::Absolute(v) => v,
        }
    }

    pub fn is_absolute(self) -> bool {
        matches!(self, ColumnOffset::Absolute(_))
    }

    /// An absolute right operand replaces the left one; a relative one adds
    /// to it and keeps the left operand's kind.
    #[inline]
    pub fn combine(self, b: ColumnOffset) -> ColumnOffset {
        match (self, b) {
            (_, ColumnOffset::Absolute(_)) => b,
            (ColumnOffset::Relative(a), ColumnOffset::Relative(d)) => ColumnOffset::Relative(a + d),
            (ColumnOffset::Absolute(a), ColumnOffset::Relative(d)) => ColumnOffset::Absolute(a + d),
        }
    }
}
