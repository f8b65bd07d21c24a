//! Bit-packed fixed-capacity arrays of small integers.
//!
//! Every item is split into `f` fragments of `k` bits. Fragment `j` of item
//! `i` lives in word `j` at bit offset `i * k`, so a read or write touches the
//! same bit range in each of the `f` words. `k` is a power of two, which turns
//! the offset computation into a shift.

use crate::error::{Error, Result};

const WORD_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedLayout {
    capacity: u32,
    bits: u32,
    avail_bits: u32,
    frag_shift: u32,
    fragments: u32,
}

impl PackedLayout {
    /// Layout for `capacity` items of `bits` bits each, `None` when the
    /// items cannot share a 32-bit word.
    pub const fn try_new(capacity: u32, bits: u32) -> Option<Self> {
        if capacity == 0 || capacity > WORD_BITS || bits == 0 || bits > WORD_BITS {
            return None;
        }
        let avail_bits = WORD_BITS / capacity;
        let frag_shift = WORD_BITS - 1 - avail_bits.leading_zeros();
        let frag_bits = 1 << frag_shift;
        let fragments = bits.div_ceil(frag_bits);
        Some(PackedLayout {
            capacity,
            bits,
            avail_bits,
            frag_shift,
            fragments,
        })
    }

    pub fn new(capacity: u32, bits: u32) -> Result<Self> {
        Self::try_new(capacity, bits).ok_or_else(|| {
            Error::Config(format!(
                "unsupported packed layout: capacity {capacity} (1..=32), bits {bits} (1..=32)"
            ))
        })
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Bits per item available in one word, `floor(32 / capacity)`.
    pub fn avail_bits(&self) -> u32 {
        self.avail_bits
    }

    /// Bits per fragment: the largest power of two not above `avail_bits`.
    pub fn frag_bits(&self) -> u32 {
        1 << self.frag_shift
    }

    /// Number of words used.
    pub fn fragments(&self) -> u32 {
        self.fragments
    }

    #[inline]
    fn frag_mask(&self) -> u32 {
        if self.frag_shift == 5 {
            u32::MAX
        } else {
            (1u32 << (1u32 << self.frag_shift)) - 1
        }
    }
}

/// Reads item `i`.
#[inline]
pub fn get(words: &[u32], layout: &PackedLayout, i: u32) -> u32 {
    debug_assert!(i < layout.capacity);
    let k = layout.frag_bits();
    let offset = i << layout.frag_shift;
    let mask = layout.frag_mask();
    let mut value = 0u32;
    for (j, word) in words[..layout.fragments as usize].iter().enumerate() {
        value |= ((word >> offset) & mask) << (j as u32 * k);
    }
    value
}

/// Writes `value` to item `i`, leaving every other item untouched.
#[inline]
pub fn set(words: &mut [u32], layout: &PackedLayout, i: u32, value: u32) {
    debug_assert!(i < layout.capacity);
    debug_assert!(layout.bits == 32 || value < (1 << layout.bits));
    let k = layout.frag_bits();
    let offset = i << layout.frag_shift;
    let mask = layout.frag_mask();
    for (j, word) in words[..layout.fragments as usize].iter_mut().enumerate() {
        let frag = (value >> (j as u32 * k)) & mask;
        *word = (*word & !(mask << offset)) | (frag << offset);
    }
}

/// Owned packed array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedArray {
    layout: PackedLayout,
    words: Vec<u32>,
}

impl PackedArray {
    pub fn new(layout: PackedLayout) -> Self {
        PackedArray {
            layout,
            words: vec![0; layout.fragments as usize],
        }
    }

    pub fn layout(&self) -> &PackedLayout {
        &self.layout
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.layout.capacity as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, i: u32) -> u32 {
        get(&self.words, &self.layout, i)
    }

    pub fn set(&mut self, i: u32, value: u32) {
        set(&mut self.words, &self.layout, i, value)
    }
}
