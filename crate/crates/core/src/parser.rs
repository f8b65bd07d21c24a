//! Parsing one buffer end to end, and assembling per-buffer batches into a
//! table.

use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::chunk::{emit_all, resolve_start_states_with_end, simulate_all, ChunkMeta, MAX_CHUNK_SIZE};
use crate::columnar::{
    build_css_index, count_record_tags, partition_by_column, tag_symbols, CssColumn,
    CssIndex, RowFilter, Selection, TagParams, TaggingMode, DEFAULT_TERMINATOR,
};
use crate::container::{Field, Table};
use crate::dfa::{rfc4180, DfaSpec, StateId};
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::offsets::{
    chunk_contributions, column_count_stats, global_offsets, merge_minmax, record_column_counts,
    ChunkColumnStats, ChunkOffset, ValidationReport,
};
use crate::scan::ColumnOffset;
use crate::typeconv::{
    convert_column, infer_column, join_types, ColumnSchema, ConvertOptions, LogicalType,
    DEFAULT_BIG_FIELD_THRESHOLD,
};

pub const DEFAULT_PARTITION_SIZE: usize = 64 << 20;

/// Chunks tagged and partitioned together, bounding scratch memory.
const SLICE_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModeChoice {
    /// Tagged for nonuniform column counts, else inline when the
    /// terminator never occurs in the buffer, else delimited.
    #[default]
    Auto,
    Fixed(TaggingMode),
}

impl FromStr for ModeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ModeChoice::Auto),
            other => other.parse().map(ModeChoice::Fixed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum SchemaSpec {
    #[default]
    Infer,
    Fixed(Vec<ColumnSchema>),
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub dialect: Arc<DfaSpec>,
    pub encoding: Encoding,
    pub chunk_size: usize,
    pub workers: usize,
    pub mode: ModeChoice,
    pub terminator: u8,
    pub strict: bool,
    pub schema: SchemaSpec,
    /// Column count every record must have.
    pub expected_columns: Option<u64>,
    /// Raw rows to drop before parsing.
    pub skip_rows: RowFilter,
    pub selection: Selection,
    pub partition_size: usize,
    /// Longest carry-over accepted between partitions; defaults to the
    /// partition size.
    pub max_carry_over: Option<usize>,
    pub big_field_threshold: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            dialect: Arc::new(rfc4180()),
            encoding: Encoding::Utf8,
            chunk_size: crate::chunk::DEFAULT_CHUNK_SIZE,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            mode: ModeChoice::Auto,
            terminator: DEFAULT_TERMINATOR,
            strict: false,
            schema: SchemaSpec::Infer,
            expected_columns: None,
            skip_rows: RowFilter::None,
            selection: Selection::all(),
            partition_size: DEFAULT_PARTITION_SIZE,
            max_carry_over: None,
            big_field_threshold: DEFAULT_BIG_FIELD_THRESHOLD,
        }
    }
}

impl ParseOptions {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_CHUNK_SIZE).contains(&self.chunk_size) {
            return Err(Error::Config(format!(
                "chunk size {} outside 1..={MAX_CHUNK_SIZE}",
                self.chunk_size
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if self.partition_size < 2 {
            return Err(Error::Config("partition size must be at least 2 bytes".into()));
        }
        if let (SchemaSpec::Fixed(schema), Some(cols)) = (&self.schema, self.selection.projection()) {
            if schema.len() != cols.len() {
                return Err(Error::Config(format!(
                    "schema has {} columns but {} are projected",
                    schema.len(),
                    cols.len()
                )));
            }
        }
        Ok(())
    }

    pub fn effective_chunk_size(&self) -> usize {
        self.encoding.chunk_size(self.chunk_size)
    }

    pub fn effective_partition_size(&self) -> usize {
        self.encoding.chunk_size(self.partition_size)
    }

    pub fn carry_capacity(&self) -> usize {
        self.max_carry_over.unwrap_or(self.partition_size)
    }

    /// Input column feeding output column `j`.
    fn input_column(&self, j: usize) -> usize {
        match self.selection.projection() {
            Some(cols) => cols[j],
            None => j,
        }
    }

    pub(crate) fn line_break(&self) -> Vec<u8> {
        self.encoding.encode_byte(b'\n')
    }

    fn convert_options(&self) -> ConvertOptions {
        ConvertOptions {
            encoding: self.encoding,
            strict: self.strict,
            big_field_threshold: self.big_field_threshold,
            chunk_size: self.effective_chunk_size(),
            workers: self.workers,
        }
    }
}

/// Wall time per parse stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageTimes {
    pub parse: Duration,
    pub scan: Duration,
    pub tag: Duration,
    pub partition: Duration,
    pub convert: Duration,
}

impl StageTimes {
    pub fn add(&mut self, o: &StageTimes) {
        self.parse += o.parse;
        self.scan += o.scan;
        self.tag += o.tag;
        self.partition += o.partition;
        self.convert += o.convert;
    }

    pub fn total(&self) -> Duration {
        self.parse + self.scan + self.tag + self.partition + self.convert
    }
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *slot += t.elapsed();
    out
}

/// One output column before type inference: its symbols and field index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawColumn {
    pub css: Vec<u8>,
    pub index: CssIndex,
}

impl RawColumn {
    fn absent(rows: &[u64]) -> Self {
        RawColumn {
            css: Vec::new(),
            index: CssIndex {
                offsets: vec![0; rows.len()],
                lengths: vec![0; rows.len()],
                present: vec![false; rows.len()],
            },
        }
    }

    fn append(&mut self, other: RawColumn) {
        let base = self.css.len() as u64;
        self.css.extend_from_slice(&other.css);
        let idx = &mut self.index;
        idx.offsets.extend(other.index.offsets.iter().map(|o| o + base));
        idx.lengths.extend_from_slice(&other.index.lengths);
        idx.present.extend_from_slice(&other.index.present);
    }
}

/// Output rows of one buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Typed(Table),
    /// Untyped columns awaiting inference across all batches.
    Raw { rows: Vec<u64>, columns: Vec<RawColumn> },
}

impl Batch {
    pub fn rows(&self) -> usize {
        match self {
            Batch::Typed(t) => t.rows,
            Batch::Raw { rows, .. } => rows.len(),
        }
    }
}

/// Where a buffer starts in the overall input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferStart {
    pub seed_state: StateId,
    pub record: u64,
    pub byte_offset: u64,
    /// Control flag of the symbol just before the buffer.
    pub prev_control: Option<bool>,
}

/// What parsing one buffer produced.
#[derive(Debug, Clone)]
pub struct BufferOutcome {
    pub batch: Batch,
    /// Bytes consumed; the rest is carried over.
    pub complete_len: usize,
    /// State entering the first carried-over byte.
    pub next_seed: StateId,
    pub records: u64,
    pub diagnostics: u64,
    pub mode: Option<TaggingMode>,
    pub times: StageTimes,
    /// Column-count range of in-scope records.
    pub column_range: Option<(u64, u64)>,
}

fn last_record_end(metas: &[ChunkMeta], chunk_size: usize, encoding: Encoding) -> Option<(usize, StateId)> {
    let width = if encoding.is_utf16() { 2 } else { 1 };
    metas.iter().enumerate().rev().find(|(_, m)| m.rec != 0).map(|(i, m)| {
        let bit = 63 - m.rec.leading_zeros() as usize;
        (i * chunk_size + bit + width, m.after_last_record.expect("record delimiter seen"))
    })
}

/// Parses `buffer`, which starts at a record boundary. A buffer that is not
/// final is parsed up to its last record delimiter; a final one is parsed
/// entirely, closing a trailing unterminated record.
pub fn parse_buffer(
    buffer: &[u8],
    start: BufferStart,
    is_final: bool,
    opts: &ParseOptions,
) -> Result<BufferOutcome> {
    let spec = &*opts.dialect;
    let enc = opts.encoding;
    let cs = opts.effective_chunk_size();
    let workers = opts.workers;
    let mut times = StageTimes::default();
    let mut diagnostics = 0u64;

    let stvs = timed(&mut times.parse, || simulate_all(buffer, spec, enc, cs));
    let (starts, end_state) = timed(&mut times.scan, || {
        resolve_start_states_with_end(&stvs, spec.state_count(), start.seed_state, workers)
    });
    drop(stvs);
    let metas = timed(&mut times.parse, || {
        emit_all(buffer, spec, enc, cs, &starts, start.prev_control, workers)
    });
    drop(starts);

    let last = last_record_end(&metas, cs, enc);
    let (complete_len, next_seed) = match (is_final, last) {
        (true, _) => (buffer.len(), end_state),
        (false, Some(l)) => l,
        (false, None) => (0, start.seed_state),
    };
    if !is_final {
        let carry = buffer.len() - complete_len;
        if carry > opts.carry_capacity() {
            return Err(Error::CarryOverOverflow {
                offset: start.byte_offset + complete_len as u64,
                capacity: opts.carry_capacity(),
            });
        }
    }
    let used = complete_len.div_ceil(cs);
    let metas = &metas[..used.min(metas.len())];

    if let Some((i, m)) = metas.iter().enumerate().find(|(_, m)| m.first_invalid.is_some()) {
        let at = i * cs + m.first_invalid.unwrap() as usize;
        if at < complete_len {
            if opts.strict {
                return Err(Error::InvalidTransition {
                    offset: start.byte_offset + at as u64,
                });
            }
            diagnostics += 1;
        }
    }
    let tail = is_final && last.map_or(0, |l| l.0) < buffer.len();
    if is_final && !spec.is_accepting(end_state) {
        if opts.strict {
            return Err(Error::NonAcceptingEnd {
                state: spec.state_name(end_state).to_owned(),
            });
        }
        diagnostics += 1;
    }

    let (offsets, total, counts, column_range) = timed(&mut times.scan, || {
        let seed = ChunkOffset {
            record: start.record,
            column: ColumnOffset::Absolute(0),
        };
        let (offsets, total) = global_offsets(&chunk_contributions(metas), seed, workers);
        let mut counts = record_column_counts(metas, &offsets);
        let stats: Vec<ChunkColumnStats> = metas
            .iter()
            .map(|m| ChunkColumnStats::from_bitmaps(m.rec, m.col))
            .collect();
        let mut range = column_count_stats(&stats, &offsets);
        if tail {
            let c = total.column.value() + 1;
            counts.push(c as u32);
            range = merge_minmax(range, Some((c, c)));
        }
        (offsets, total, counts, range)
    });
    let records = counts.len() as u64;
    let selection = &opts.selection;
    let rows = selection.rows_in(start.record, start.record + records);
    let count_of = |r: u64| counts[(r - start.record) as usize] as usize;
    let in_scope_range = if selection.skipped_records().is_empty() {
        column_range
    } else {
        rows.iter().map(|&r| count_of(r) as u64).fold(None, |acc, c| merge_minmax(acc, Some((c, c))))
    };

    if let Some(expected) = opts.expected_columns {
        let mut report = ValidationReport {
            expected,
            min: column_range.map(|r| r.0),
            max: column_range.map(|r| r.1),
            ..Default::default()
        };
        report.identify_records(&counts, start.record);
        if !report.passed() {
            if opts.strict {
                return Err(Error::Validation(report.summary()));
            }
            diagnostics += report.offending_records.len() as u64;
        }
    }

    let out_cols = match (&opts.schema, selection.projection()) {
        (_, Some(cols)) => cols.len(),
        (SchemaSpec::Fixed(s), None) => s.len(),
        (SchemaSpec::Infer, None) => in_scope_range.map_or(0, |r| r.1 as usize),
    };
    let input_cols = (0..out_cols).map(|j| opts.input_column(j) + 1).max().unwrap_or(0);
    let column_map = selection.column_map(input_cols);
    let uniform = in_scope_range.is_none_or(|(a, b)| a == b);
    let mode = match opts.mode {
        ModeChoice::Fixed(m) => m,
        ModeChoice::Auto if !uniform => TaggingMode::Tagged,
        ModeChoice::Auto if !buffer[..complete_len].contains(&opts.terminator) => TaggingMode::Inline,
        ModeChoice::Auto => TaggingMode::Delimited,
    };
    if mode != TaggingMode::Tagged && !uniform {
        return Err(Error::Mode(format!(
            "{mode} mode needs a uniform column count, found {} to {}; use tagged mode",
            in_scope_range.unwrap().0,
            in_scope_range.unwrap().1
        )));
    }

    let mut columns: Vec<CssColumn> = (0..out_cols)
        .map(|_| CssColumn {
            record_tags: None,
            ..CssColumn::empty(mode)
        })
        .collect();
    let mut lengths: Vec<Vec<u64>> = match mode {
        TaggingMode::Tagged => vec![vec![0; rows.len()]; out_cols],
        _ => Vec::new(),
    };
    let mut cursors = vec![0usize; out_cols];
    let slice_chunks = (SLICE_BYTES / cs).max(1);
    let used = metas.len();
    let mut a = 0;
    while a < used && out_cols > 0 {
        let b = (a + slice_chunks).min(used);
        let last_slice = b == used;
        let params = TagParams {
            mode,
            terminator: opts.terminator,
            column_map: &column_map,
            selection,
            chunk_size: cs,
            limit: complete_len.min(b * cs) - a * cs,
            close_at: (last_slice && tail).then_some(total),
        };
        let tagged = timed(&mut times.tag, || {
            tag_symbols(&buffer[a * cs..], &metas[a..b], &offsets[a..b], &params)
        })?;
        let css = timed(&mut times.partition, || {
            partition_by_column(tagged, out_cols, mode, opts.terminator, workers)
        });
        timed(&mut times.partition, || {
            for (j, mut col) in css.columns.into_iter().enumerate() {
                if let Some(tags) = col.record_tags.take() {
                    count_record_tags(&mut lengths[j], &mut cursors[j], &rows, &tags);
                }
                columns[j].append(col);
            }
        });
        a = b;
    }
    drop(offsets);

    let mut typed = Vec::new();
    let mut raw = Vec::new();
    let convert_opts = opts.convert_options();
    for (j, col) in columns.iter_mut().enumerate() {
        let input_col = opts.input_column(j);
        let present = |i: usize| count_of(rows[i]) > input_col;
        let index = timed(&mut times.tag, || match mode {
            TaggingMode::Tagged => Ok(CssIndex::from_lengths(std::mem::take(&mut lengths[j]), present)),
            _ => build_css_index(col, mode, opts.terminator, &rows, present),
        })?;
        let css = std::mem::take(&mut col.data);
        col.field_ends = None;
        match &opts.schema {
            SchemaSpec::Fixed(schema) => {
                let converted = timed(&mut times.convert, || {
                    convert_column(&css, &index, &rows, &schema[j], j, &convert_opts)
                })?;
                diagnostics += converted.diagnostics;
                typed.push(converted.column);
            }
            SchemaSpec::Infer => raw.push(RawColumn { css, index }),
        }
    }

    let batch = match &opts.schema {
        SchemaSpec::Fixed(schema) => {
            let fields = schema_fields(schema);
            if typed.is_empty() {
                Batch::Typed(Table::empty(fields))
            } else {
                Batch::Typed(Table::new(fields, typed)?)
            }
        }
        SchemaSpec::Infer => Batch::Raw { rows, columns: raw },
    };
    Ok(BufferOutcome {
        batch,
        complete_len,
        next_seed,
        records,
        diagnostics,
        mode: (out_cols > 0).then_some(mode),
        times,
        column_range: in_scope_range,
    })
}

fn schema_fields(schema: &[ColumnSchema]) -> Vec<Field> {
    schema
        .iter()
        .map(|s| Field {
            name: s.name.clone(),
            ty: s.ty,
            nullable: s.nullable,
        })
        .collect()
}

/// Name of an inferred column.
pub fn inferred_name(input_column: usize) -> String {
    format!("column_{input_column}")
}

/// Collects batches in order and produces the final table.
#[derive(Debug)]
pub struct Assembler {
    opts: ParseOptions,
    typed: Option<Table>,
    raw: Vec<RawColumn>,
    raw_rows: Vec<u64>,
    pub diagnostics: u64,
}

impl Assembler {
    pub fn new(opts: &ParseOptions) -> Self {
        let typed = match &opts.schema {
            SchemaSpec::Fixed(schema) => Some(Table::empty(schema_fields(schema))),
            SchemaSpec::Infer => None,
        };
        Assembler {
            opts: opts.clone(),
            typed,
            raw: Vec::new(),
            raw_rows: Vec::new(),
            diagnostics: 0,
        }
    }

    pub fn push(&mut self, batch: Batch) -> Result<()> {
        match (batch, &mut self.typed) {
            (Batch::Typed(t), Some(acc)) => acc.append(&t),
            (Batch::Raw { rows, columns }, None) => {
                while self.raw.len() < columns.len() {
                    self.raw.push(RawColumn::absent(&self.raw_rows));
                }
                let width = self.raw.len();
                let mut columns = columns.into_iter();
                for col in self.raw.iter_mut().take(width) {
                    let next = columns.next().unwrap_or_else(|| RawColumn::absent(&rows));
                    col.append(next);
                }
                self.raw_rows.extend_from_slice(&rows);
                Ok(())
            }
            _ => Err(Error::invariant("batch kind matches schema", "mixed batch kinds")),
        }
    }

    /// Types of the raw columns collected so far.
    pub fn inferred_schema(&self) -> Vec<ColumnSchema> {
        self.raw
            .iter()
            .enumerate()
            .map(|(j, col)| {
                let ty = infer_column(&col.css, &col.index, self.opts.encoding, &[String::new()])
                    .unwrap_or(LogicalType::Utf8);
                ColumnSchema::new(inferred_name(self.opts.input_column(j)), ty)
            })
            .collect()
    }

    pub fn finish(mut self) -> Result<(Table, u64)> {
        if let Some(table) = self.typed.take() {
            return Ok((table, self.diagnostics));
        }
        let schema = self.inferred_schema();
        let opts = self.opts.convert_options();
        let mut columns = Vec::with_capacity(schema.len());
        for (j, (col, s)) in self.raw.iter_mut().zip(&schema).enumerate() {
            let converted = convert_column(&col.css, &col.index, &self.raw_rows, s, j, &opts)?;
            self.diagnostics += converted.diagnostics;
            *col = RawColumn::default();
            columns.push(converted.column);
        }
        let mut table = if columns.is_empty() {
            Table::empty(Vec::new())
        } else {
            Table::new(schema_fields(&schema), columns)?
        };
        if table.columns.is_empty() {
            table.rows = 0;
        }
        Ok((table, self.diagnostics))
    }
}

/// Joined type across several raw batches, for callers that infer without
/// assembling.
pub fn join_all(types: impl IntoIterator<Item = Option<LogicalType>>) -> LogicalType {
    types.into_iter().fold(None, join_types).unwrap_or(LogicalType::Utf8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfa::csv_states::EOR;
    use crate::typeconv::Value;

    fn start() -> BufferStart {
        BufferStart {
            seed_state: EOR,
            record: 0,
            byte_offset: 0,
            prev_control: None,
        }
    }

    fn parse_all(input: &[u8], opts: &ParseOptions) -> Result<Table> {
        let out = parse_buffer(input, start(), true, opts)?;
        let mut asm = Assembler::new(opts);
        asm.push(out.batch)?;
        Ok(asm.finish()?.0)
    }

    #[test]
    fn quoted_newline_fixture() {
        let t = parse_all(b"\"a,\nb\",c\n", &ParseOptions::default()).unwrap();
        assert_eq!(t.rows, 1);
        assert_eq!(t.columns.len(), 2);
        assert_eq!(t.columns[0].value(0), Some(Value::Utf8("a,\nb".into())));
    }

    #[test]
    fn non_final_buffer_stops_at_last_record() {
        let out = parse_buffer(b"a,b\nc", start(), false, &ParseOptions::default()).unwrap();
        assert_eq!((out.complete_len, out.records, out.next_seed), (4, 1, EOR));
        let out = parse_buffer(b"\"a\nb", start(), false, &ParseOptions::default()).unwrap();
        assert_eq!(out.complete_len, 0);
        let tight = ParseOptions { max_carry_over: Some(3), ..Default::default() };
        let err = parse_buffer(b"x\n\"a\nb", start(), false, &tight).unwrap_err();
        assert!(matches!(err, Error::CarryOverOverflow { offset: 2, capacity: 3 }));
    }

    #[test]
    fn trailing_record_and_strictness() {
        let t = parse_all(b"1,2\n3,4", &ParseOptions::default()).unwrap();
        assert_eq!(t.rows, 2);
        assert_eq!(t.columns[1].value(1), Some(Value::Int64(4)));
        let strict = ParseOptions { strict: true, ..Default::default() };
        assert!(matches!(parse_all(b"a,\"b", &strict), Err(Error::NonAcceptingEnd { .. })));
        assert!(matches!(
            parse_all(b"ab\"c\n", &strict),
            Err(Error::InvalidTransition { offset: 2 })
        ));
        assert!(parse_all(b"a,\"b", &ParseOptions::default()).is_ok());
    }

    #[test]
    fn modes_and_column_counts() {
        let input = b"1,Apples\n2\n";
        let t = parse_all(input, &ParseOptions::default()).unwrap();
        assert_eq!(t.columns.len(), 2);
        assert_eq!(t.columns[1].value(1), None);
        let inline = ParseOptions { mode: ModeChoice::Fixed(TaggingMode::Inline), ..Default::default() };
        assert!(matches!(parse_all(input, &inline), Err(Error::Mode(_))));
        let strict = ParseOptions { expected_columns: Some(2), strict: true, ..Default::default() };
        match parse_all(input, &strict) {
            Err(Error::Validation(msg)) => assert!(msg.contains("record 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_selection() {
        let opts = ParseOptions {
            schema: SchemaSpec::Fixed(vec![ColumnSchema::new("n", LogicalType::Int64)]),
            selection: Selection::all().skip_records([0]).project(vec![1]).unwrap(),
            ..Default::default()
        };
        let t = parse_all(b"h,x\na,1\nb,2\n", &opts).unwrap();
        assert_eq!(t.rows, 2);
        assert_eq!(t.columns[0].value(1), Some(Value::Int64(2)));
    }
}
