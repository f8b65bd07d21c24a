//! Partitioned parsing of large or unbounded inputs.
//!
//! A reader fills one of two buffer slots with the next partition while the
//! parser works on the other. Each slot reserves room in front of the raw
//! bytes for the carry-over, the unfinished record at the end of the
//! previous partition. The parser copies that record in front of the new
//! partition before handing the previous slot back to the reader. Parsed
//! batches go to a writer thread that feeds the sink in partition order.

use std::io::{self, Read};
use std::ops::Range;
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::columnar::{prune_rows, TaggingMode};
use crate::container::Table;
use crate::dfa::{DfaSpec, StateId};
use crate::error::{Error, Result};
use crate::offsets::merge_minmax;
use crate::parser::{parse_buffer, Assembler, Batch, BufferStart, ParseOptions, StageTimes};
use crate::scan::ColumnOffset;

/// Contiguous byte ranges of `partition_size` covering an input of `total`
/// bytes, or an endless sequence for unbounded input.
pub fn plan_partitions(
    total: Option<u64>,
    partition_size: usize,
) -> impl Iterator<Item = Range<u64>> {
    let size = partition_size.max(1) as u64;
    (0u64..)
        .map(move |i| i * size..(i + 1) * size)
        .map(move |r| match total {
            Some(t) => r.start..r.end.min(t),
            None => r,
        })
        .take_while(move |r| total.is_none_or(|t| r.start < t))
}

/// Everything that threads one partition into the next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionContext {
    pub seed_state: StateId,
    pub record_offset: u64,
    pub column_offset: ColumnOffset,
    pub carry_over: Vec<u8>,
    /// Input offset of the first carried-over byte.
    pub byte_offset: u64,
    pub prev_symbol_control: Option<bool>,
}

impl PartitionContext {
    pub fn initial(spec: &DfaSpec) -> Self {
        PartitionContext {
            seed_state: spec.start_state(),
            record_offset: 0,
            column_offset: ColumnOffset::Absolute(0),
            carry_over: Vec::new(),
            byte_offset: 0,
            prev_symbol_control: None,
        }
    }

    fn buffer_start(&self) -> BufferStart {
        BufferStart {
            seed_state: self.seed_state,
            record: self.record_offset,
            byte_offset: self.byte_offset,
            prev_control: self.prev_symbol_control,
        }
    }

    fn advance(&self, consumed: usize, next_seed: StateId, records: u64) -> PartitionContext {
        PartitionContext {
            seed_state: next_seed,
            record_offset: self.record_offset + records,
            column_offset: ColumnOffset::Absolute(0),
            carry_over: Vec::new(),
            byte_offset: self.byte_offset + consumed as u64,
            prev_symbol_control: if consumed > 0 {
                Some(true)
            } else {
                self.prev_symbol_control
            },
        }
    }
}

/// Summary of one parsed partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartitionReport {
    pub records: u64,
    pub diagnostics: u64,
    pub mode: Option<TaggingMode>,
    pub times: StageTimes,
}

/// Parses `ctx.carry_over ++ raw`. Unless `is_final`, the bytes after the
/// last record delimiter become the next context's carry-over.
pub fn parse_partition(
    ctx: &PartitionContext,
    raw: &[u8],
    is_final: bool,
    opts: &ParseOptions,
) -> Result<(Batch, PartitionContext, PartitionReport)> {
    let mut buffer = Vec::with_capacity(ctx.carry_over.len() + raw.len());
    buffer.extend_from_slice(&ctx.carry_over);
    buffer.extend_from_slice(raw);
    let out = parse_buffer(&buffer, ctx.buffer_start(), is_final, opts)?;
    let mut next = ctx.advance(out.complete_len, out.next_seed, out.records);
    next.carry_over = buffer[out.complete_len..].to_vec();
    let report = PartitionReport {
        records: out.records,
        diagnostics: out.diagnostics,
        mode: out.mode,
        times: out.times,
    };
    Ok((out.batch, next, report))
}

/// Pipeline trace entry, for checking the buffer hand-off rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    ReadStart { partition: u64, slot: usize, generation: u64 },
    ReadDone { partition: u64, slot: usize },
    CarryCopied { partition: u64, from: usize, to: usize, bytes: usize, generation: u64 },
    Released { slot: usize, generation: u64 },
    Parsed { partition: u64 },
    Written { partition: u64 },
}

/// Statistics of a pipeline run.
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub bytes: u64,
    pub partitions: u64,
    pub records: u64,
    pub rows: u64,
    pub diagnostics: u64,
    /// Min and max column count over in-scope records.
    pub column_range: Option<(u64, u64)>,
    pub stages: StageTimes,
    pub read: Duration,
    pub write: Duration,
    pub wall: Duration,
    pub modes: Vec<TaggingMode>,
    pub events: Vec<Event>,
}

struct Slot {
    id: usize,
    generation: u64,
    buf: Vec<u8>,
}

struct Filled {
    partition: u64,
    slot: Slot,
    len: usize,
    last: bool,
}

#[derive(Clone)]
struct Trace(Option<Arc<Mutex<Vec<Event>>>>);

impl Trace {
    fn log(&self, e: Event) {
        if let Some(t) = &self.0 {
            t.lock().unwrap().push(e);
        }
    }
}

fn read_full(src: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match src.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

/// A configured parser with its own worker pool.
pub struct Parser {
    opts: ParseOptions,
    pool: Arc<ThreadPool>,
}

impl Parser {
    pub fn new(opts: ParseOptions) -> Result<Self> {
        opts.validate()?;
        let pool = ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .thread_name(|i| format!("rawparse-{i}"))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Parser {
            opts,
            pool: Arc::new(pool),
        })
    }

    pub fn options(&self) -> &ParseOptions {
        &self.opts
    }

    /// Parses an in-memory input as a single partition.
    pub fn parse_single_shot(&self, input: &[u8]) -> Result<(Table, RunStats)> {
        let started = Instant::now();
        let opts = &self.opts;
        self.pool.install(|| {
            let pruned;
            let input = if opts.skip_rows.is_none() {
                input
            } else {
                pruned = prune_rows(input, &opts.skip_rows, 0, &opts.line_break()).0;
                &pruned[..]
            };
            let ctx = PartitionContext::initial(&opts.dialect);
            let out = parse_buffer(input, ctx.buffer_start(), true, opts)?;
            let mut stats = RunStats {
                bytes: input.len() as u64,
                partitions: 1,
                records: out.records,
                rows: out.batch.rows() as u64,
                diagnostics: out.diagnostics,
                column_range: out.column_range,
                stages: out.times,
                modes: out.mode.into_iter().collect(),
                ..Default::default()
            };
            let mut asm = Assembler::new(opts);
            asm.push(out.batch)?;
            let converting = Instant::now();
            let (table, diag) = asm.finish()?;
            stats.stages.convert += converting.elapsed();
            stats.diagnostics += diag;
            stats.wall = started.elapsed();
            Ok((table, stats))
        })
    }

    /// Parses `input`, streaming it through the pipeline when it exceeds
    /// one partition.
    pub fn parse(&self, input: &[u8]) -> Result<(Table, RunStats)> {
        if input.len() <= self.opts.effective_partition_size() {
            self.parse_single_shot(input)
        } else {
            self.parse_reader(input)
        }
    }

    /// Streams `source` and assembles the whole table.
    pub fn parse_reader(&self, source: impl Read + Send) -> Result<(Table, RunStats)> {
        let started = Instant::now();
        let mut asm = Assembler::new(&self.opts);
        let mut stats = self.run_pipeline(source, |b| asm.push(b), false)?;
        let converting = Instant::now();
        let (table, diag) = self.pool.install(|| asm.finish())?;
        stats.stages.convert += converting.elapsed();
        stats.diagnostics += diag;
        stats.wall = started.elapsed();
        Ok((table, stats))
    }

    /// Runs the read, parse and write stages concurrently. `sink` sees the
    /// batches in partition order.
    pub fn run_pipeline<R, S>(&self, source: R, sink: S, trace: bool) -> Result<RunStats>
    where
        R: Read + Send,
        S: FnMut(Batch) -> Result<()> + Send,
    {
        run_pipeline(source, sink, &self.opts, &self.pool, trace)
    }
}

fn run_pipeline<R, S>(
    mut source: R,
    mut sink: S,
    opts: &ParseOptions,
    pool: &ThreadPool,
    trace: bool,
) -> Result<RunStats>
where
    R: Read + Send,
    S: FnMut(Batch) -> Result<()> + Send,
{
    let started = Instant::now();
    let part = opts.effective_partition_size();
    let cap = opts.encoding.chunk_size(opts.carry_capacity());
    let events = Trace(trace.then(|| Arc::new(Mutex::new(Vec::new()))));
    let (free_tx, free_rx) = mpsc::channel::<Slot>();
    for id in 0..2 {
        free_tx
            .send(Slot {
                id,
                generation: 0,
                buf: Vec::new(),
            })
            .unwrap();
    }
    let (filled_tx, filled_rx) = mpsc::sync_channel::<io::Result<Filled>>(1);
    let (batch_tx, batch_rx) = mpsc::sync_channel::<(u64, Batch)>(2);

    let (read_time, bytes, parse_result, write_result) = std::thread::scope(|s| {
        let ev = events.clone();
        let reader = s.spawn(move || reader_stage(&mut source, opts, part, cap, free_rx, filled_tx, ev));
        let ev = events.clone();
        let writer = s.spawn(move || {
            let mut spent = Duration::ZERO;
            for (partition, batch) in batch_rx {
                let t = Instant::now();
                sink(batch)?;
                spent += t.elapsed();
                ev.log(Event::Written { partition });
            }
            Ok::<_, Error>(spent)
        });
        let parsed = parse_stage(opts, pool, cap, filled_rx, free_tx, batch_tx, &events);
        let (read_time, bytes) = reader.join().expect("reader stage panicked");
        let written = writer.join().expect("writer stage panicked");
        (read_time, bytes, parsed, written)
    });
    let mut stats = parse_result?;
    stats.write = write_result?;
    stats.read = read_time;
    stats.bytes = bytes;
    stats.wall = started.elapsed();
    if let Some(ev) = events.0 {
        stats.events = std::mem::take(&mut *ev.lock().unwrap());
    }
    Ok(stats)
}

fn reader_stage(
    source: &mut impl Read,
    opts: &ParseOptions,
    part: usize,
    cap: usize,
    free: Receiver<Slot>,
    filled: SyncSender<io::Result<Filled>>,
    events: Trace,
) -> (Duration, u64) {
    let mut spent = Duration::ZERO;
    let mut bytes = 0u64;
    let mut row = 0u64;
    let line_break = opts.line_break();
    let mut scratch = Vec::new();
    for partition in 0u64.. {
        let Ok(mut slot) = free.recv() else { break };
        let t = Instant::now();
        slot.generation += 1;
        events.log(Event::ReadStart {
            partition,
            slot: slot.id,
            generation: slot.generation,
        });
        if slot.buf.len() < cap + part {
            slot.buf = vec![0u8; cap + part];
        }
        // (raw bytes read, bytes placed in the slot)
        let result = if opts.skip_rows.is_none() {
            read_full(source, &mut slot.buf[cap..cap + part]).map(|n| (n, n))
        } else {
            scratch.resize(part, 0);
            read_full(source, &mut scratch).map(|n| {
                let (kept, breaks) = prune_rows(&scratch[..n], &opts.skip_rows, row, &line_break);
                row += breaks;
                slot.buf[cap..cap + kept.len()].copy_from_slice(&kept);
                (n, kept.len())
            })
        };
        spent += t.elapsed();
        let done = match result {
            Ok((n, len)) => {
                bytes += n as u64;
                events.log(Event::ReadDone { partition, slot: slot.id });
                let last = n < part;
                let f = Filled {
                    partition,
                    len,
                    last,
                    slot,
                };
                filled.send(Ok(f)).is_err() || last
            }
            Err(e) => {
                let _ = filled.send(Err(e));
                true
            }
        };
        if done {
            break;
        }
    }
    (spent, bytes)
}

fn parse_stage(
    opts: &ParseOptions,
    pool: &ThreadPool,
    cap: usize,
    filled: Receiver<io::Result<Filled>>,
    free: mpsc::Sender<Slot>,
    batches: SyncSender<(u64, Batch)>,
    events: &Trace,
) -> Result<RunStats> {
    let mut stats = RunStats::default();
    let mut ctx = PartitionContext::initial(&opts.dialect);
    // Previous slot and the byte range of its carry-over.
    let mut prev: Option<(Slot, Range<usize>)> = None;
    loop {
        let Ok(next) = filled.recv() else {
            return Err(Error::invariant("reader ends with a final partition", "reader stopped early"));
        };
        let Filled {
            partition,
            mut slot,
            len,
            last,
        } = next?;
        let mut start = cap;
        if let Some((old, carry)) = prev.take() {
            let n = carry.len();
            start = cap - n;
            slot.buf[start..cap].copy_from_slice(&old.buf[carry]);
            events.log(Event::CarryCopied {
                partition,
                from: old.id,
                to: slot.id,
                bytes: n,
                generation: old.generation,
            });
            events.log(Event::Released {
                slot: old.id,
                generation: old.generation,
            });
            let _ = free.send(old);
        }
        let buffer = &slot.buf[start..cap + len];
        let out = pool.install(|| parse_buffer(buffer, ctx.buffer_start(), last, opts))?;
        ctx = ctx.advance(out.complete_len, out.next_seed, out.records);
        stats.partitions += (len > 0 || partition == 0) as u64;
        stats.records += out.records;
        stats.rows += out.batch.rows() as u64;
        stats.diagnostics += out.diagnostics;
        stats.column_range = merge_minmax(stats.column_range, out.column_range);
        stats.stages.add(&out.times);
        stats.modes.extend(out.mode);
        events.log(Event::Parsed { partition });
        let carry = start + out.complete_len..cap + len;
        if batches.send((partition, out.batch)).is_err() {
            return Err(Error::invariant("writer outlives parser", "writer stopped early"));
        }
        if last {
            return Ok(stats);
        }
        prev = Some((slot, carry));
    }
}
