use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser as ClapParser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use rawparse::chunk::DEFAULT_CHUNK_SIZE;
use rawparse::columnar::{RowFilter, Selection};
use rawparse::container::Table;
use rawparse::dfa::{builtin_dialect, load_spec, BUILTIN_DIALECTS};
use rawparse::encoding::Encoding;
use rawparse::gen::{generate, GenConfig};
use rawparse::oracle::sequential_parse;
use rawparse::parser::{ModeChoice, ParseOptions, SchemaSpec, StageTimes};
use rawparse::streaming::{Parser, RunStats};
use rawparse::typeconv::{parse_schema, schema_to_json, ColumnSchema, DEFAULT_BIG_FIELD_THRESHOLD};
use rawparse::Error;

#[derive(ClapParser, Debug)]
#[command(name = "rawparse", version, about = "Parallel parser for delimiter-separated data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse input into the columnar container or canonical CSV.
    Parse(ParseCmd),
    /// Check that every record has the expected number of columns.
    Validate(ValidateCmd),
    /// Report column counts and inferred column types.
    Infer(InferCmd),
    /// Generate a synthetic CSV corpus.
    Gen(GenCmd),
    /// Time parsing across chunk sizes and worker counts.
    Bench(BenchCmd),
}

#[derive(Args, Debug, Clone)]
struct InputArgs {
    /// Input file; `-` or nothing reads stdin.
    input: Option<PathBuf>,
    /// Builtin dialect name or path to a JSON DFA spec.
    #[arg(long, default_value = "rfc4180")]
    dialect: String,
    #[arg(long, default_value = "utf8")]
    encoding: Encoding,
    /// Bytes per chunk, 1 to 64.
    #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE, value_parser = parse_chunk_size)]
    chunk_size: usize,
    /// Worker threads; defaults to the number of hardware threads.
    #[arg(long, value_parser = parse_workers)]
    workers: Option<usize>,
    /// auto, tagged, inline or delimited.
    #[arg(long, default_value = "auto")]
    mode: ModeChoice,
    /// Field terminator byte for the inline and delimited modes.
    #[arg(long, default_value = "0x1f", value_parser = parse_byte)]
    terminator: u8,
    /// Fail on the first malformed input instead of counting it.
    #[arg(long)]
    strict: bool,
    /// JSON schema file.
    #[arg(long, conflicts_with = "infer")]
    schema: Option<PathBuf>,
    /// Infer column types (the default without --schema).
    #[arg(long)]
    infer: bool,
    /// Raw line indices to drop before parsing, e.g. `0,5-9`.
    #[arg(long, value_parser = parse_index_list)]
    skip_rows: Option<IndexList>,
    /// Record indices to leave out of the output, e.g. `0,5-9`.
    #[arg(long, value_parser = parse_index_list)]
    skip_records: Option<IndexList>,
    /// Input columns to keep, in output order, e.g. `2,0`.
    #[arg(long, value_parser = parse_index_list)]
    columns: Option<IndexList>,
    /// Bytes read per partition, with an optional K, M or G suffix.
    #[arg(long, default_value = "64M", value_parser = parse_size)]
    partition_size: usize,
    /// Longest incomplete record carried between partitions.
    #[arg(long, value_parser = parse_size)]
    max_carry_over: Option<usize>,
    /// Fields longer than this are converted with all workers.
    #[arg(long, default_value_t = DEFAULT_BIG_FIELD_THRESHOLD, value_parser = parse_size)]
    big_field_threshold: usize,
}

#[derive(Args, Debug)]
struct ParseCmd {
    #[command(flatten)]
    input: InputArgs,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Container)]
    format: Format,
    /// Write a header line with --format csv.
    #[arg(long)]
    header: bool,
    #[arg(long, value_enum, default_value_t = Engine::Parallel)]
    engine: Engine,
    /// Column count every record must have.
    #[arg(long)]
    expected_columns: Option<u64>,
    /// Skip the stage breakdown on stderr.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct ValidateCmd {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    expected_columns: u64,
}

#[derive(Args, Debug)]
struct InferCmd {
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Args, Debug)]
struct GenCmd {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Approximate output size, with an optional K, M or G suffix.
    #[arg(long, default_value = "1M", value_parser = parse_size)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    columns: usize,
    /// Vary the number of fields per record.
    #[arg(long)]
    ragged: bool,
    #[arg(long, default_value_t = 12)]
    max_field_len: usize,
    #[arg(long, default_value_t = 0.2)]
    quote_density: f64,
    #[arg(long, default_value_t = 0.3)]
    embedded_delimiter_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    doubled_quote_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    empty_field_rate: f64,
    #[arg(long)]
    no_final_newline: bool,
    /// Mix non-ASCII text into string fields.
    #[arg(long)]
    multilingual: bool,
    /// Put one quoted field of this size in a middle record.
    #[arg(long, value_parser = parse_size)]
    skew: Option<usize>,
    /// Output encoding.
    #[arg(long, default_value = "utf8")]
    encoding: Encoding,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchCmd {
    #[command(flatten)]
    input: InputArgs,
    /// Benchmark a generated corpus of this size instead of reading input.
    #[arg(long, value_parser = parse_size)]
    gen_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "4,8,16,31,32,48,64", value_parser = parse_index_list)]
    chunk_sizes: IndexList,
    #[arg(long, default_value = "1,2,4,8", value_parser = parse_index_list)]
    worker_counts: IndexList,
    /// Runs per configuration; the fastest is reported.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// CSV report file; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Container,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Engine {
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct IndexList(Vec<u64>);

fn parse_index_list(s: &str) -> Result<IndexList, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| format!("bad index {a:?}"))?;
                let b: u64 = b.trim().parse().map_err(|_| format!("bad index {b:?}"))?;
                if b < a {
                    return Err(format!("empty range {part:?}"));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| format!("bad index {part:?}"))?),
        }
    }
    Ok(IndexList(out))
}

fn parse_size(s: &str) -> Result<usize, String> {
    let s = s.trim();
    let (digits, scale) = match s.char_indices().last() {
        Some((i, 'k' | 'K')) => (&s[..i], 1 << 10),
        Some((i, 'm' | 'M')) => (&s[..i], 1 << 20),
        Some((i, 'g' | 'G')) => (&s[..i], 1 << 30),
        _ => (s, 1),
    };
    digits
        .parse::<usize>()
        .ok()
        .and_then(|n| n.checked_mul(scale))
        .ok_or_else(|| format!("bad size {s:?}"))
}

fn parse_byte(s: &str) -> Result<u8, String> {
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u8::from_str_radix(hex, 16).ok(),
        None if s.len() == 1 && !s.as_bytes()[0].is_ascii_digit() => Some(s.as_bytes()[0]),
        None => s.parse().ok(),
    };
    parsed.ok_or_else(|| format!("bad byte {s:?}; use a character, a decimal value or 0xNN"))
}

fn parse_chunk_size(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if (1..=64).contains(&n) => Ok(n),
        _ => Err(format!("chunk size must be 1 to 64, got {s:?}")),
    }
}

fn parse_workers(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("worker count must be at least 1, got {s:?}")),
    }
}

/// A failure with its exit status.
enum Failure {
    Usage(String),
    Data(Error),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(e) => Failure::Io(e.to_string()),
            e if e.is_data_error() => Failure::Data(e),
            e => Failure::Usage(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn io_at(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn is_stdin(path: &Option<PathBuf>) -> bool {
    path.as_deref().is_none_or(|p| p == Path::new("-"))
}

fn open_input(path: &Option<PathBuf>) -> Result<Box<dyn Read + Send>, Failure> {
    match path {
        _ if is_stdin(path) => Ok(Box::new(io::stdin())),
        Some(p) => Ok(Box::new(File::open(p).map_err(io_at(p))?)),
        None => unreachable!(),
    }
}

fn read_input(path: &Option<PathBuf>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    open_input(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) if p != Path::new("-") => Box::new(BufWriter::new(File::create(p).map_err(io_at(p))?)),
        _ => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

impl InputArgs {
    fn options(&self) -> Result<ParseOptions, Failure> {
        let dialect = match builtin_dialect(&self.dialect) {
            Some(d) => d,
            None => {
                let path = Path::new(&self.dialect);
                if !path.exists() {
                    return Err(Failure::Usage(format!(
                        "unknown dialect {:?}; builtins are {}, or pass a spec file",
                        self.dialect,
                        BUILTIN_DIALECTS.join(", ")
                    )));
                }
                let doc = std::fs::read_to_string(path).map_err(io_at(path))?;
                load_spec(&doc)?
            }
        };
        let schema = match &self.schema {
            Some(path) => {
                let doc = std::fs::read_to_string(path).map_err(io_at(path))?;
                SchemaSpec::Fixed(parse_schema(&doc)?)
            }
            None => SchemaSpec::Infer,
        };
        let mut selection = Selection::all();
        if let Some(IndexList(records)) = &self.skip_records {
            selection = selection.skip_records(records.iter().copied());
        }
        if let Some(IndexList(cols)) = &self.columns {
            selection = selection.project(cols.iter().map(|&c| c as usize).collect())?;
        }
        let defaults = ParseOptions::default();
        let opts = ParseOptions {
            dialect: Arc::new(dialect),
            encoding: self.encoding,
            chunk_size: self.chunk_size,
            workers: self.workers.unwrap_or(defaults.workers),
            mode: self.mode,
            terminator: self.terminator,
            strict: self.strict,
            schema,
            skip_rows: match &self.skip_rows {
                Some(IndexList(rows)) => RowFilter::from_set(rows.iter().copied()),
                None => RowFilter::None,
            },
            selection,
            partition_size: self.partition_size,
            max_carry_over: self.max_carry_over,
            big_field_threshold: self.big_field_threshold,
            ..defaults
        };
        opts.validate()?;
        Ok(opts)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn print_stats(stats: &RunStats) {
    let mut err = io::stderr().lock();
    let modes: Vec<&str> = stats.modes.iter().map(|m| m.name()).collect();
    let _ = writeln!(
        err,
        "{} bytes, {} partitions, {} records, {} rows, {} diagnostics, modes {}",
        stats.bytes,
        stats.partitions,
        stats.records,
        stats.rows,
        stats.diagnostics,
        if modes.is_empty() { "-".to_string() } else { modes.join(",") }
    );
    let wall = secs(stats.wall).max(f64::EPSILON);
    let s = &stats.stages;
    for (name, d) in [
        ("parse", s.parse),
        ("scan", s.scan),
        ("tag", s.tag),
        ("partition", s.partition),
        ("convert", s.convert),
        ("read", stats.read),
        ("write", stats.write),
    ] {
        let _ = writeln!(err, "  {name:<10} {:>9.4}s {:>6.1}%", secs(d), 100.0 * secs(d) / wall);
    }
    let _ = writeln!(
        err,
        "  {:<10} {:>9.4}s  {:.1} MiB/s",
        "wall",
        wall,
        stats.bytes as f64 / (1 << 20) as f64 / wall
    );
}

fn run_parser(args: &InputArgs, opts: ParseOptions) -> Result<(Table, RunStats), Failure> {
    let parser = Parser::new(opts)?;
    let source = open_input(&args.input)?;
    Ok(parser.parse_reader(source)?)
}

fn cmd_parse(cmd: ParseCmd) -> CmdResult {
    let mut opts = cmd.input.options()?;
    opts.expected_columns = cmd.expected_columns;
    let (table, stats) = match cmd.engine {
        Engine::Parallel => run_parser(&cmd.input, opts)?,
        Engine::Sequential => {
            let started = Instant::now();
            let input = read_input(&cmd.input.input)?;
            let out = sequential_parse(&input, &opts, false)?;
            let stats = RunStats {
                bytes: input.len() as u64,
                partitions: 1,
                records: out.records,
                rows: out.table.rows as u64,
                diagnostics: out.diagnostics,
                wall: started.elapsed(),
                ..Default::default()
            };
            (out.table, stats)
        }
    };
    let mut out = open_output(&cmd.output)?;
    match cmd.format {
        Format::Container => table.write_to(&mut out)?,
        Format::Csv => table.write_csv(&mut out, cmd.header)?,
    }
    out.flush()?;
    if !cmd.quiet {
        print_stats(&stats);
    }
    Ok(())
}

fn cmd_validate(cmd: ValidateCmd) -> CmdResult {
    let mut opts = cmd.input.options()?;
    opts.expected_columns = Some(cmd.expected_columns);
    // Only the column structure matters here.
    opts.selection = opts.selection.project(Vec::new())?;
    opts.schema = SchemaSpec::Infer;
    let (_, stats) = run_parser(&cmd.input, opts)?;
    let (min, max) = stats.column_range.unwrap_or((0, 0));
    let ok = stats.diagnostics == 0 && (stats.records == 0 || (min, max) == (cmd.expected_columns, cmd.expected_columns));
    println!(
        "{}: {} records, columns min {min} max {max}, expected {}, {} diagnostics",
        if ok { "ok" } else { "invalid" },
        stats.records,
        cmd.expected_columns,
        stats.diagnostics
    );
    if ok {
        Ok(())
    } else {
        Err(Failure::Data(Error::Validation(format!(
            "column counts range from {min} to {max}, expected {}",
            cmd.expected_columns
        ))))
    }
}

fn cmd_infer(cmd: InferCmd) -> CmdResult {
    let opts = cmd.input.options()?;
    let (table, stats) = run_parser(&cmd.input, opts)?;
    let schema: Vec<ColumnSchema> = table
        .fields
        .iter()
        .map(|f| ColumnSchema::new(f.name.clone(), f.ty).nullable(f.nullable))
        .collect();
    let (min, max) = stats.column_range.unwrap_or((0, 0));
    let report = serde_json::json!({
        "records": stats.records,
        "min_columns": min,
        "max_columns": max,
        "schema": serde_json::from_str::<serde_json::Value>(&schema_to_json(&schema)).expect("schema JSON"),
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn cmd_gen(cmd: GenCmd) -> CmdResult {
    let cfg = GenConfig {
        seed: cmd.seed,
        target_bytes: cmd.size,
        columns: cmd.columns,
        ragged: cmd.ragged,
        max_field_len: cmd.max_field_len,
        quote_density: cmd.quote_density,
        embedded_delimiter_rate: cmd.embedded_delimiter_rate,
        doubled_quote_rate: cmd.doubled_quote_rate,
        empty_field_rate: cmd.empty_field_rate,
        final_newline: !cmd.no_final_newline,
        multilingual: cmd.multilingual,
        skew_field: cmd.skew,
    };
    for (name, p) in [
        ("quote density", cfg.quote_density),
        ("embedded delimiter rate", cfg.embedded_delimiter_rate),
        ("doubled quote rate", cfg.doubled_quote_rate),
        ("empty field rate", cfg.empty_field_rate),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Failure::Usage(format!("{name} must be within 0 and 1, got {p}")));
        }
    }
    let data = generate(&cfg);
    let data = match cmd.encoding {
        Encoding::Ascii | Encoding::Utf8 => data,
        enc => enc.encode_str(std::str::from_utf8(&data).expect("generator emits UTF-8")),
    };
    let mut out = open_output(&cmd.output)?;
    out.write_all(&data)?;
    out.flush()?;
    Ok(())
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn table_hash(table: &Table) -> String {
    let mut w = HashWriter(Sha256::new());
    table.write_to(&mut w).expect("hashing cannot fail");
    w.0.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn cmd_bench(cmd: BenchCmd) -> CmdResult {
    let base = cmd.input.options()?;
    let input = match cmd.gen_size {
        Some(size) => generate(&GenConfig {
            seed: cmd.seed,
            target_bytes: size,
            ..Default::default()
        }),
        None => read_input(&cmd.input.input)?,
    };
    for &c in &cmd.chunk_sizes.0 {
        parse_chunk_size(&c.to_string()).map_err(Failure::Usage)?;
    }
    let mut out = open_output(&cmd.output)?;
    writeln!(
        out,
        "chunk_size,workers,bytes,partitions,wall_s,parse_s,scan_s,tag_s,partition_s,convert_s,read_s,write_s,mib_per_s,hash"
    )?;
    let mut hashes = Vec::new();
    for &chunk in &cmd.chunk_sizes.0 {
        for &workers in &cmd.worker_counts.0 {
            let opts = ParseOptions {
                chunk_size: chunk as usize,
                workers: (workers as usize).max(1),
                ..base.clone()
            };
            let parser = Parser::new(opts)?;
            let mut best: Option<RunStats> = None;
            let mut hash = String::new();
            for _ in 0..cmd.repeat.max(1) {
                let (table, stats) = parser.parse(&input)?;
                hash = table_hash(&table);
                if best.as_ref().is_none_or(|b| stats.wall < b.wall) {
                    best = Some(stats);
                }
            }
            let s = best.expect("at least one run");
            let StageTimes { parse, scan, tag, partition, convert } = s.stages;
            writeln!(
                out,
                "{chunk},{workers},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.2},{hash}",
                input.len(),
                s.partitions,
                secs(s.wall),
                secs(parse),
                secs(scan),
                secs(tag),
                secs(partition),
                secs(convert),
                secs(s.read),
                secs(s.write),
                input.len() as f64 / (1 << 20) as f64 / secs(s.wall).max(f64::EPSILON),
            )?;
            out.flush()?;
            hashes.push(hash);
        }
    }
    hashes.dedup();
    if hashes.len() > 1 {
        return Err(Failure::Data(Error::Validation(format!(
            "output differs across configurations: {}",
            hashes.join(" ")
        ))));
    }
    Ok(())
}

fn main() -> ExitCode {
    rawparse::limit_allocator_retention();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Parse(c) => cmd_parse(c),
        Command::Validate(c) => cmd_validate(c),
        Command::Infer(c) => cmd_infer(c),
        Command::Gen(c) => cmd_gen(c),
        Command::Bench(c) => cmd_bench(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
