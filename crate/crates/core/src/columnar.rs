//! From classified bytes to column-contiguous symbol sequences (CSS).
//!
//! Data symbols are tagged with their column (and, in tagged mode, their
//! record), then stably partitioned by column with a counting sort. Field
//! boundaries inside a column's CSS are recovered either from the record
//! tags, from inline terminator bytes, or from an auxiliary flag vector.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::chunk::ChunkMeta;
use crate::error::{Error, Result};
use crate::offsets::ChunkOffset;
use crate::scan::exclusive_scan;

pub const DEFAULT_TERMINATOR: u8 = 0x1F;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaggingMode {
    /// Every symbol carries its record index.
    Tagged,
    /// Field ends are marked by a terminator byte inside the CSS.
    Inline,
    /// Field ends are marked in a boolean vector parallel to the CSS.
    Delimited,
}

impl TaggingMode {
    pub fn name(self) -> &'static str {
        match self {
            TaggingMode::Tagged => "tagged",
            TaggingMode::Inline => "inline",
            TaggingMode::Delimited => "delimited",
        }
    }
}

impl FromStr for TaggingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tagged" => Ok(TaggingMode::Tagged),
            "inline" => Ok(TaggingMode::Inline),
            "delimited" => Ok(TaggingMode::Delimited),
            other => Err(Error::Config(format!("unknown tagging mode {other:?}"))),
        }
    }
}

impl fmt::Display for TaggingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which records and columns end up in the output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    skip_records: Vec<u64>,
    columns: Option<Vec<usize>>,
}

impl Selection {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn skip_records(mut self, records: impl IntoIterator<Item = u64>) -> Self {
        self.skip_records.extend(records);
        self.skip_records.sort_unstable();
        self.skip_records.dedup();
        self
    }

    /// Keeps only `columns`, in the given order.
    pub fn project(mut self, columns: Vec<usize>) -> Result<Self> {
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].contains(c) {
                return Err(Error::Config(format!("column {c} projected twice")));
            }
        }
        self.columns = Some(columns);
        Ok(self)
    }

    pub fn projection(&self) -> Option<&[usize]> {
        self.columns.as_deref()
    }

    pub fn skipped_records(&self) -> &[u64] {
        &self.skip_records
    }

    #[inline]
    pub fn keeps_record(&self, record: u64) -> bool {
        self.skip_records.is_empty() || self.skip_records.binary_search(&record).is_err()
    }

    /// Number of output columns when the input has `input_columns`.
    pub fn output_columns(&self, input_columns: usize) -> usize {
        match &self.columns {
            Some(cols) => cols.len(),
            None => input_columns,
        }
    }

    /// Output column of every input column below `input_columns`.
    pub fn column_map(&self, input_columns: usize) -> Vec<Option<u32>> {
        match &self.columns {
            None => (0..input_columns).map(|c| Some(c as u32)).collect(),
            Some(cols) => {
                let width = cols.iter().copied().max().map_or(0, |m| m + 1);
                let mut map = vec![None; width.max(input_columns.min(width))];
                for (out, &c) in cols.iter().enumerate() {
                    map[c] = Some(out as u32);
                }
                map
            }
        }
    }

    /// In-scope records among `start..end`.
    pub fn rows_in(&self, start: u64, end: u64) -> Vec<u64> {
        (start..end).filter(|&r| self.keeps_record(r)).collect()
    }
}

/// Symbols tagged with their output column, structure-of-arrays.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaggedSymbols {
    pub symbols: Vec<u8>,
    pub column_tags: Vec<u32>,
    /// Tagged mode only.
    pub record_tags: Option<Vec<u64>>,
    /// Delimited mode only: `true` on the slot that closes a field.
    pub field_ends: Option<Vec<bool>>,
}

impl TaggedSymbols {
    fn new(mode: TaggingMode) -> Self {
        TaggedSymbols {
            symbols: Vec::new(),
            column_tags: Vec::new(),
            record_tags: (mode == TaggingMode::Tagged).then(Vec::new),
            field_ends: (mode == TaggingMode::Delimited).then(Vec::new),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    fn append(&mut self, mut other: TaggedSymbols) {
        self.symbols.append(&mut other.symbols);
        self.column_tags.append(&mut other.column_tags);
        if let (Some(a), Some(b)) = (&mut self.record_tags, &mut other.record_tags) {
            a.append(b);
        }
        if let (Some(a), Some(b)) = (&mut self.field_ends, &mut other.field_ends) {
            a.append(b);
        }
    }
}

/// Parameters for [`tag_symbols`].
#[derive(Debug, Clone, Copy)]
pub struct TagParams<'a> {
    pub mode: TaggingMode,
    pub terminator: u8,
    /// Output column per input column; columns past the end are dropped.
    pub column_map: &'a [Option<u32>],
    pub selection: &'a Selection,
    pub chunk_size: usize,
    /// Bytes of the input to tag; later bytes are ignored.
    pub limit: usize,
    /// Position at which to close a trailing field with no delimiter.
    pub close_at: Option<ChunkOffset>,
}

#[inline]
fn output_column(map: &[Option<u32>], column: u64) -> Option<u32> {
    map.get(column as usize).copied().flatten()
}

/// Tags every data byte of `input[..limit]` with its column and record.
/// Control bytes are dropped; in the terminator modes each field delimiter
/// becomes a field-closing slot in its column.
pub fn tag_symbols(
    input: &[u8],
    metas: &[ChunkMeta],
    offsets: &[ChunkOffset],
    params: &TagParams<'_>,
) -> Result<TaggedSymbols> {
    const BLOCK: usize = 2048;
    let chunk_size = params.chunk_size;
    let used_chunks = params.limit.div_ceil(chunk_size).min(metas.len());
    let parts: Vec<Result<TaggedSymbols>> = metas[..used_chunks]
        .par_chunks(BLOCK)
        .enumerate()
        .map(|(b, ms)| {
            let first = b * BLOCK;
            let mut out = TaggedSymbols::new(params.mode);
            for (k, m) in ms.iter().enumerate() {
                let ci = first + k;
                let base = ci * chunk_size;
                let end = (base + m.len as usize).min(params.limit);
                tag_chunk(&input[base..end], base, m, offsets[ci], params, &mut out)?;
            }
            Ok(out)
        })
        .collect();
    let mut tagged = TaggedSymbols::new(params.mode);
    let total: usize = parts.iter().map(|p| p.as_ref().map_or(0, |t| t.len())).sum();
    tagged.symbols.reserve(total + 1);
    tagged.column_tags.reserve(total + 1);
    for part in parts {
        tagged.append(part?);
    }
    if let Some(pos) = params.close_at {
        if params.mode != TaggingMode::Tagged && params.selection.keeps_record(pos.record) {
            if let Some(out_col) = output_column(params.column_map, pos.column.value()) {
                push_terminator(&mut tagged, params.terminator, out_col);
            }
        }
    }
    Ok(tagged)
}

#[inline]
fn push_terminator(out: &mut TaggedSymbols, terminator: u8, column: u32) {
    out.symbols.push(terminator);
    out.column_tags.push(column);
    if let Some(ends) = &mut out.field_ends {
        ends.push(true);
    }
}

fn tag_chunk(
    bytes: &[u8],
    base: usize,
    m: &ChunkMeta,
    offset: ChunkOffset,
    params: &TagParams<'_>,
    out: &mut TaggedSymbols,
) -> Result<()> {
    let mut record = offset.record;
    let mut column = offset.column.value();
    let mut keep_record = params.selection.keeps_record(record);
    let mut out_col = output_column(params.column_map, column);
    for (j, &b) in bytes.iter().enumerate() {
        let bit = 1u64 << j;
        if m.ctl & bit == 0 {
            let Some(c) = out_col.filter(|_| keep_record) else {
                continue;
            };
            match params.mode {
                TaggingMode::Tagged => {
                    out.symbols.push(b);
                    out.column_tags.push(c);
                    if let Some(tags) = &mut out.record_tags {
                        tags.push(record);
                    }
                }
                TaggingMode::Inline => {
                    if b == params.terminator {
                        return Err(Error::Mode(format!(
                            "terminator byte 0x{:02X} occurs in field data at byte {}; use delimited mode",
                            b,
                            base + j
                        )));
                    }
                    out.symbols.push(b);
                    out.column_tags.push(c);
                }
                TaggingMode::Delimited => {
                    out.symbols.push(b);
                    out.column_tags.push(c);
                    if let Some(ends) = &mut out.field_ends {
                        ends.push(false);
                    }
                }
            }
        } else if m.col & bit != 0 {
            if params.mode != TaggingMode::Tagged && keep_record {
                if let Some(c) = out_col {
                    push_terminator(out, params.terminator, c);
                }
            }
            if m.rec & bit != 0 {
                record += 1;
                column = 0;
                keep_record = params.selection.keeps_record(record);
            } else {
                column += 1;
            }
            out_col = output_column(params.column_map, column);
        }
    }
    Ok(())
}

/// One column's CSS.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CssColumn {
    pub data: Vec<u8>,
    pub record_tags: Option<Vec<u64>>,
    pub field_ends: Option<Vec<bool>>,
}

impl CssColumn {
    pub fn empty(mode: TaggingMode) -> Self {
        CssColumn {
            data: Vec::new(),
            record_tags: (mode == TaggingMode::Tagged).then(Vec::new),
            field_ends: (mode == TaggingMode::Delimited).then(Vec::new),
        }
    }

    pub fn append(&mut self, mut other: CssColumn) {
        self.data.append(&mut other.data);
        if let (Some(a), Some(b)) = (&mut self.record_tags, &mut other.record_tags) {
            a.append(b);
        }
        if let (Some(a), Some(b)) = (&mut self.field_ends, &mut other.field_ends) {
            a.append(b);
        }
    }
}

/// Symbols of all columns, partitioned by column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Css {
    pub mode: TaggingMode,
    pub terminator: u8,
    pub columns: Vec<CssColumn>,
    /// Symbol slots per column, terminator slots included.
    pub histogram: Vec<u64>,
}

/// Stable scatter of `values` into per-column vectors, driven by
/// per-block histograms.
fn scatter<T: Copy + Default + Send + Sync>(
    values: &[T],
    tags: &[u32],
    block_len: usize,
    block_hist: &[Vec<u64>],
    totals: &[u64],
) -> Vec<Vec<T>> {
    let columns = totals.len();
    let mut outs: Vec<Vec<T>> = totals.iter().map(|&n| vec![T::default(); n as usize]).collect();
    {
        // pieces[block][column] is the disjoint slice that block writes.
        let mut pieces: Vec<Vec<&mut [T]>> =
            (0..block_hist.len()).map(|_| Vec::with_capacity(columns)).collect();
        for (c, out) in outs.iter_mut().enumerate() {
            let mut rest: &mut [T] = out.as_mut_slice();
            for (b, hist) in block_hist.iter().enumerate() {
                let (head, tail) = rest.split_at_mut(hist[c] as usize);
                pieces[b].push(head);
                rest = tail;
            }
        }
        pieces
            .into_par_iter()
            .zip(values.par_chunks(block_len).zip(tags.par_chunks(block_len)))
            .for_each(|(mut slots, (vals, tgs))| {
                let mut cursor = vec![0usize; columns];
                for (&v, &t) in vals.iter().zip(tgs) {
                    let t = t as usize;
                    slots[t][cursor[t]] = v;
                    cursor[t] += 1;
                }
            });
    }
    outs
}

/// Stable counting sort of the tagged symbols by column tag.
pub fn partition_by_column(
    tagged: TaggedSymbols,
    column_count: usize,
    mode: TaggingMode,
    terminator: u8,
    workers: usize,
) -> Css {
    let n = tagged.len();
    let blocks = workers.max(1) * 4;
    let block_len = n.div_ceil(blocks).max(4096);
    let block_hist: Vec<Vec<u64>> = tagged
        .column_tags
        .par_chunks(block_len)
        .map(|tags| {
            let mut h = vec![0u64; column_count];
            for &t in tags {
                h[t as usize] += 1;
            }
            h
        })
        .collect();
    let mut histogram = vec![0u64; column_count];
    for h in &block_hist {
        for (total, v) in histogram.iter_mut().zip(h) {
            *total += v;
        }
    }
    let tags = &tagged.column_tags;
    let data = scatter(&tagged.symbols, tags, block_len, &block_hist, &histogram);
    let mut records = tagged
        .record_tags
        .as_ref()
        .map(|r| scatter(r, tags, block_len, &block_hist, &histogram).into_iter());
    let mut ends = tagged
        .field_ends
        .as_ref()
        .map(|e| scatter(e, tags, block_len, &block_hist, &histogram).into_iter());
    let columns = data
        .into_iter()
        .map(|data| CssColumn {
            data,
            record_tags: records.as_mut().and_then(|it| it.next()),
            field_ends: ends.as_mut().and_then(|it| it.next()),
        })
        .collect();
    Css {
        mode,
        terminator,
        columns,
        histogram,
    }
}

/// Per-field offsets and lengths into one column's CSS; one entry
/// per output row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CssIndex {
    pub offsets: Vec<u64>,
    pub lengths: Vec<u64>,
    /// False when the record has no field in this column at all.
    pub present: Vec<bool>,
}

impl CssIndex {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    #[inline]
    pub fn field<'a>(&self, css: &'a [u8], i: usize) -> Option<&'a [u8]> {
        if !self.present[i] {
            return None;
        }
        let start = self.offsets[i] as usize;
        Some(&css[start..start + self.lengths[i] as usize])
    }

    fn push(&mut self, offset: u64, length: u64, present: bool) {
        self.offsets.push(offset);
        self.lengths.push(length);
        self.present.push(present);
    }

    /// Fills one entry per row from run-length encoded record tags. Rows
    /// with no run get a zero-length entry at the running offset.
    pub fn from_runs(runs: &[(u64, u64)], rows: &[u64], present: impl Fn(usize) -> bool) -> Self {
        let mut lengths = vec![0u64; rows.len()];
        let mut ri = 0;
        for &(record, len) in runs {
            while ri < rows.len() && rows[ri] < record {
                ri += 1;
            }
            debug_assert!(ri < rows.len() && rows[ri] == record, "run for out-of-scope record");
            lengths[ri] = len;
        }
        Self::from_lengths(lengths, present)
    }

    /// Lays out entries of the given lengths back to back.
    pub fn from_lengths(lengths: Vec<u64>, present: impl Fn(usize) -> bool) -> Self {
        let offsets = exclusive_scan(&lengths, 0u64, |a, b| a + b, 1);
        let present = (0..lengths.len()).map(|i| lengths[i] > 0 || present(i)).collect();
        CssIndex {
            offsets,
            lengths,
            present,
        }
    }
}

/// Run-length encoding of record tags: `(record, symbol count)` per run.
pub fn rle_record_tags(tags: &[u64]) -> Vec<(u64, u64)> {
    let mut runs: Vec<(u64, u64)> = Vec::new();
    for &t in tags {
        match runs.last_mut() {
            Some((r, n)) if *r == t => *n += 1,
            _ => runs.push((t, 1)),
        }
    }
    runs
}

/// Adds one to the row entry of every record tag. Tags arrive in record
/// order across calls; `cursor` keeps the row position between them.
pub fn count_record_tags(lengths: &mut [u64], cursor: &mut usize, rows: &[u64], tags: &[u64]) {
    for &t in tags {
        while rows[*cursor] < t {
            *cursor += 1;
        }
        debug_assert_eq!(rows[*cursor], t, "tag for out-of-scope record");
        lengths[*cursor] += 1;
    }
}

/// Builds the field index of one column.
///
/// `rows` lists the in-scope records in order. `present(i)` tells whether
/// row `i` has a field in this column; it only matters for zero-length
/// fields in tagged mode, since the terminator modes record every field.
pub fn build_css_index(
    column: &CssColumn,
    mode: TaggingMode,
    terminator: u8,
    rows: &[u64],
    present: impl Fn(usize) -> bool,
) -> Result<CssIndex> {
    match mode {
        TaggingMode::Tagged => {
            let tags = column
                .record_tags
                .as_ref()
                .ok_or_else(|| Error::Mode("tagged CSS without record tags".into()))?;
            Ok(CssIndex::from_runs(&rle_record_tags(tags), rows, present))
        }
        TaggingMode::Inline | TaggingMode::Delimited => {
            let ends: Vec<usize> = match mode {
                TaggingMode::Inline => column
                    .data
                    .par_iter()
                    .enumerate()
                    .filter(|(_, &b)| b == terminator)
                    .map(|(i, _)| i)
                    .collect(),
                _ => column
                    .field_ends
                    .as_ref()
                    .ok_or_else(|| Error::Mode("delimited CSS without field vector".into()))?
                    .par_iter()
                    .enumerate()
                    .filter(|(_, &e)| e)
                    .map(|(i, _)| i)
                    .collect(),
            };
            let mut index = CssIndex::default();
            if ends.is_empty() {
                for _ in rows {
                    index.push(0, 0, false);
                }
                return Ok(index);
            }
            if ends.len() != rows.len() {
                return Err(Error::Mode(format!(
                    "{} fields for {} records; nonuniform column counts need tagged mode",
                    ends.len(),
                    rows.len()
                )));
            }
            let mut start = 0usize;
            for &end in &ends {
                index.push(start as u64, (end - start) as u64, true);
                start = end + 1;
            }
            Ok(index)
        }
    }
}

/// Which raw rows to drop before parsing.
#[derive(Clone, Default)]
pub enum RowFilter {
    #[default]
    None,
    Set(Vec<u64>),
    Predicate(Arc<dyn Fn(u64) -> bool + Send + Sync>),
}

impl fmt::Debug for RowFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowFilter::None => f.write_str("None"),
            RowFilter::Set(s) => f.debug_tuple("Set").field(s).finish(),
            RowFilter::Predicate(_) => f.write_str("Predicate(..)"),
        }
    }
}

impl RowFilter {
    pub fn from_set(rows: impl IntoIterator<Item = u64>) -> Self {
        let mut v: Vec<u64> = rows.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            RowFilter::None
        } else {
            RowFilter::Set(v)
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, RowFilter::None)
    }

    #[inline]
    pub fn skips(&self, row: u64) -> bool {
        match self {
            RowFilter::None => false,
            RowFilter::Set(v) => v.binary_search(&row).is_ok(),
            RowFilter::Predicate(f) => f(row),
        }
    }
}

#[inline]
fn line_breaks<'a>(block: &'a [u8], line_break: &'a [u8]) -> impl Iterator<Item = bool> + 'a {
    block.chunks(line_break.len()).map(move |unit| unit == line_break)
}

/// Removes the bytes of skipped rows, rows being delimited by raw
/// `line_break` code units regardless of quoting. `first_row` is the index
/// of the row `input` starts in. Returns the kept bytes and the number of
/// line breaks seen.
pub fn prune_rows(
    input: &[u8],
    filter: &RowFilter,
    first_row: u64,
    line_break: &[u8],
) -> (Vec<u8>, u64) {
    const BLOCK: usize = 1 << 16;
    debug_assert!(matches!(line_break.len(), 1 | 2));
    let w = line_break.len();
    let counts: Vec<u64> = input
        .par_chunks(BLOCK)
        .map(|b| line_breaks(b, line_break).filter(|&x| x).count() as u64)
        .collect();
    let breaks: u64 = counts.iter().sum();
    if filter.is_none() {
        return (input.to_vec(), breaks);
    }
    let bases = exclusive_scan(&counts, first_row, |a, b| a + b, 1);
    let parts: Vec<Vec<u8>> = input
        .par_chunks(BLOCK)
        .zip(bases.par_iter())
        .map(|(block, &base)| {
            let mut row = base;
            let mut skip = filter.skips(row);
            let mut out = Vec::with_capacity(block.len());
            for (unit, brk) in block.chunks(w).zip(line_breaks(block, line_break)) {
                if !skip {
                    out.extend_from_slice(unit);
                }
                if brk {
                    row += 1;
                    skip = filter.skips(row);
                }
            }
            out
        })
        .collect();
    (parts.concat(), breaks)
}
