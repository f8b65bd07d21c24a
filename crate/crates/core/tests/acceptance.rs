//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any gating criterion fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use rawparse::chunk::{chunk_pass, resolve_start_states, simulate_all};
use rawparse::columnar::TaggingMode;
use rawparse::dfa::csv_states::*;
use rawparse::dfa::{bfind, h_nullbyte, lane_position, rfc4180, DfaSpec, EmissionAction, SymbolGroup, SymbolMatcher};
use rawparse::encoding::Encoding;
use rawparse::error::Error;
use rawparse::gen::{fuzz_config, generate, GenConfig};
use rawparse::offsets::{
    chunk_contributions, column_count_stats, global_offsets, record_column_counts, validate_column_count,
    ChunkColumnStats, ChunkOffset,
};
use rawparse::oracle::{boundary_states, sequential_parse};
use rawparse::packed::PackedLayout;
use rawparse::parser::{ModeChoice, ParseOptions};
use rawparse::scan::{exclusive_scan, ColumnOffset};
use rawparse::streaming::Parser;
use rawparse::Result;

const CHILD_ENV: &str = "RAWPARSE_ACCEPTANCE_SKEW_CHILD";
const MIB: usize = 1 << 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn container(r: Result<(rawparse::container::Table, rawparse::streaming::RunStats)>) -> Result<Vec<u8>> {
    r.map(|(t, _)| t.to_bytes())
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(digest: &[u8]) -> String {
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

struct HashWriter(Sha256);

impl std::io::Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn table_hash(table: &rawparse::container::Table) -> String {
    let mut w = HashWriter(Sha256::new());
    table.write_to(&mut w).unwrap();
    hex(&w.0.finalize())
}

fn same_result(a: &Result<Vec<u8>>, b: &Result<Vec<u8>>) -> bool {
    match (a, b) {
        (Ok(x), Ok(y)) => x == y,
        (Err(x), Err(y)) => std::mem::discriminant(x) == std::mem::discriminant(y),
        _ => false,
    }
}

fn differential() -> Outcome {
    let chunks = [1, 2, 3, 7, 16, 31, 64];
    let workers = [1, 2, 8];
    let thresholds = [4096, 8];
    let mut parsers = Vec::new();
    for &c in &chunks {
        for &w in &workers {
            for &t in &thresholds {
                let opts = ParseOptions { chunk_size: c, workers: w, big_field_threshold: t, ..Default::default() };
                parsers.push((c, w, t, Parser::new(opts).unwrap()));
            }
        }
    }
    let started = Instant::now();
    let mut mismatches = Vec::new();
    let mut runs = 0u64;
    let mut bytes = 0u64;
    for seed in 0..10_000u64 {
        let input = generate(&fuzz_config(seed, 64 * 1024));
        bytes += input.len() as u64;
        let threshold = thresholds[(seed % 2) as usize];
        let oracle_opts = ParseOptions { big_field_threshold: threshold, ..Default::default() };
        let expect = sequential_parse(&input, &oracle_opts, false).map(|o| o.table.to_bytes());
        for (c, w, t, p) in parsers.iter().filter(|p| p.2 == threshold) {
            runs += 1;
            let got = container(p.parse_single_shot(&input));
            if !same_result(&expect, &got) {
                mismatches.push(format!("seed {seed} chunk {c} workers {w} threshold {t}"));
            }
        }
    }
    let elapsed = started.elapsed();
    let within = elapsed < Duration::from_secs(600);
    outcome(
        mismatches.is_empty() && within,
        format!(
            "10000 inputs ({:.1} MiB), {runs} runs, {} mismatches{}, {:.1}s",
            bytes as f64 / MIB as f64,
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

fn random_dfa(rng: &mut ChaCha8Rng) -> DfaSpec {
    let n = 6;
    let invalid = 5;
    let groups = vec![
        SymbolGroup::bytes(b"a"),
        SymbolGroup::bytes(b"b"),
        SymbolGroup::bytes(b"c\n"),
        SymbolGroup::catch_all(),
    ];
    let mut transitions = Vec::new();
    for _ in 0..groups.len() {
        for s in 0..n {
            transitions.push(if s == invalid { invalid } else { rng.gen_range(0..n) as u8 });
        }
    }
    let emissions = vec![EmissionAction::DATA; transitions.len()];
    let names = (0..n).map(|i| format!("S{i}")).collect();
    DfaSpec::new(names, 0, &[0, 1, 2], invalid as u8, groups, transitions, emissions).unwrap()
}

fn context_scan() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let mut failures = 0;
    for case in 0..1000 {
        let spec = random_dfa(&mut rng);
        let len = rng.gen_range(0..2048);
        let input: Vec<u8> = (0..len).map(|_| b"abc\nxy"[rng.gen_range(0..6)]).collect();
        let chunk = rng.gen_range(1..=64);
        let seed = rng.gen_range(0..6u8);
        let workers = 1 + case % 4;
        let stvs = simulate_all(&input, &spec, Encoding::Ascii, chunk);
        let got = resolve_start_states(&stvs, spec.state_count(), seed, workers);
        if got != boundary_states(&input, &spec, Encoding::Ascii, chunk, seed) {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("1000 random 6-state DFAs, {failures} mismatches"))
}

fn fixtures() -> Outcome {
    let mut bad = Vec::new();
    let spec = rfc4180();
    let rows = [
        (b'\n', [EOR, ENC, EOR, EOR, EOR, INV]),
        (b'"', [ENC, ESC, INV, ENC, ENC, INV]),
        (b',', [EOF, ENC, EOF, EOF, EOF, INV]),
        (b'x', [FLD, ENC, FLD, FLD, INV, INV]),
    ];
    for (sym, row) in rows {
        if spec.row(spec.group_of(sym)) != row {
            bad.push(format!("transition row for {:?}", sym as char));
        }
    }
    let matcher = SymbolMatcher::new(b"\n\",|\t", &[0, 1, 2, 2, 2], 3).unwrap();
    let SymbolMatcher::Swar { lookup, .. } = &matcher else {
        panic!("expected a SWAR matcher");
    };
    let x = lookup[0] ^ u32::from(b',') * 0x0101_0101;
    let h = h_nullbyte(x);
    if x != 0x5000_0E26 || h != 0x0080_0000 || bfind(h) != 23 || lane_position(h) != 2 {
        bad.push(format!("swar x={x:#010X} h={h:#010X} msb={} lane={}", bfind(h), lane_position(h)));
    }
    if matcher.match_symbol(b',') != 2 {
        bad.push("swar group".into());
    }
    let layout = PackedLayout::new(10, 5).unwrap();
    if (layout.avail_bits(), layout.frag_bits(), layout.fragments()) != (3, 2, 3) {
        bad.push(format!(
            "packed layout a={} k={} f={}",
            layout.avail_bits(),
            layout.frag_bits(),
            layout.fragments()
        ));
    }
    for workers in [1, 2, 3, 8] {
        let scan = exclusive_scan(&[3u64, 5, 1, 2, 9, 7, 4, 2], 0, |a, b| a + b, workers);
        if scan != [0, 3, 8, 9, 11, 20, 27, 31] {
            bad.push(format!("prefix sum with {workers} workers: {scan:?}"));
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "all exact".to_string() } else { bad.join("; ") })
}

fn column_inference() -> Outcome {
    let input = b"1,Apples\n2\n";
    let mut bad = Vec::new();
    for chunk in 1..=12 {
        let spec = rfc4180();
        let pass = chunk_pass(input, &spec, Encoding::Ascii, chunk, EOR, None, 2);
        let seed = ChunkOffset { record: 0, column: ColumnOffset::Absolute(0) };
        let (offs, _) = global_offsets(&chunk_contributions(&pass.metas), seed, 2);
        let stats: Vec<ChunkColumnStats> =
            pass.metas.iter().map(|m| ChunkColumnStats::from_bitmaps(m.rec, m.col)).collect();
        if column_count_stats(&stats, &offs) != Some((1, 2)) {
            bad.push(format!("min/max at chunk {chunk}"));
        }
        let mut report = validate_column_count(&stats, &offs, 2);
        report.identify_records(&record_column_counts(&pass.metas, &offs), 0);
        if report.passed() || report.offending_records != [1] {
            bad.push(format!("validation at chunk {chunk}: {:?}", report.offending_records));
        }
    }
    let strict = ParseOptions { expected_columns: Some(2), strict: true, ..Default::default() };
    match Parser::new(strict).unwrap().parse(input) {
        Err(Error::Validation(msg)) if msg.contains("record 1") => {}
        other => bad.push(format!("strict parse: {:?}", other.map(|_| ()))),
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() { "min=1 max=2, record 1 flagged".to_string() } else { bad.join("; ") },
    )
}

fn streaming() -> Outcome {
    let sizes = [1024, 64 * 1024, MIB];
    let parsers: Vec<Parser> = sizes
        .iter()
        .map(|&p| {
            Parser::new(ParseOptions { partition_size: p, max_carry_over: Some(64 * 1024), ..Default::default() })
                .unwrap()
        })
        .collect();
    let single = Parser::new(ParseOptions::default()).unwrap();
    let mut mismatches = Vec::new();
    let mut spanning = 0u64;
    let mut total = 0u64;
    for seed in 0..100u64 {
        let input = generate(&fuzz_config(10_000 + seed, 8 * MIB));
        total += input.len() as u64;
        let expect = container(single.parse_single_shot(&input));
        for (p, &size) in parsers.iter().zip(&sizes) {
            let got = container(p.parse_reader(&input[..]));
            if !same_result(&expect, &got) {
                mismatches.push(format!("seed {seed} partition {size}"));
            }
            spanning += (input.len() / size) as u64;
        }
    }
    outcome(
        mismatches.is_empty(),
        format!(
            "100 inputs ({:.1} MiB), {spanning} partition boundaries, {} mismatches{}",
            total as f64 / MIB as f64,
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    )
}

fn tagging_modes() -> Outcome {
    let modes = [TaggingMode::Tagged, TaggingMode::Inline, TaggingMode::Delimited];
    let parsers: Vec<Parser> = modes
        .iter()
        .map(|&m| Parser::new(ParseOptions { mode: ModeChoice::Fixed(m), chunk_size: 7, ..Default::default() }).unwrap())
        .collect();
    let mut mismatches = 0;
    let mut errors = 0;
    for seed in 0..500u64 {
        let mut cfg = fuzz_config(20_000 + seed, 64 * 1024);
        cfg.ragged = false;
        let input = generate(&cfg);
        let outs: Vec<Result<Vec<u8>>> = parsers.iter().map(|p| container(p.parse(&input))).collect();
        if outs.iter().any(|o| o.is_err()) {
            errors += 1;
        } else if outs.windows(2).any(|w| !same_result(&w[0], &w[1])) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && errors == 0,
        format!("500 terminator-free inputs, {mismatches} mismatches, {errors} errors"),
    )
}

fn skew_input() -> Vec<u8> {
    generate(&GenConfig {
        seed: 77,
        target_bytes: 64 * MIB,
        columns: 6,
        skew_field: Some(8 * MIB),
        ..Default::default()
    })
}

fn peak_rss() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

// Runs in a fresh process so the high-water mark covers this parse alone.
fn skew_child() {
    rawparse::limit_allocator_retention();
    let input = skew_input();
    for mode in ["tagged", "inline", "delimited", "auto"] {
        let opts = ParseOptions { mode: mode.parse().unwrap(), ..Default::default() };
        match Parser::new(opts).unwrap().parse(&input) {
            Ok((table, _)) => println!("{mode} {}", table_hash(&table)),
            Err(e) => println!("{mode} error {e}"),
        }
    }
    println!("input {}", input.len());
    println!("peak {}", peak_rss().unwrap_or(0));
}

fn skew() -> Outcome {
    let input = skew_input();
    let expect = match sequential_parse(&input, &ParseOptions::default(), false) {
        Ok(o) => table_hash(&o.table),
        Err(e) => return outcome(false, format!("oracle failed: {e}")),
    };
    drop(input);
    let exe = std::env::current_exe().unwrap();
    let out = match Command::new(exe).env(CHILD_ENV, "1").output() {
        Ok(o) if o.status.success() => String::from_utf8_lossy(&o.stdout).into_owned(),
        Ok(o) => return outcome(false, format!("child failed: {}", String::from_utf8_lossy(&o.stderr))),
        Err(e) => return outcome(false, format!("cannot spawn child: {e}")),
    };
    let mut bad = Vec::new();
    let mut size = 0u64;
    let mut peak = 0u64;
    for line in out.lines() {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("input"), Some(v)) => size = v.parse().unwrap_or(0),
            (Some("peak"), Some(v)) => peak = v.parse().unwrap_or(0),
            (Some(mode), Some(hash)) if hash != expect => bad.push(format!("{mode}: {line}")),
            _ => {}
        }
    }
    let ratio = peak as f64 / size.max(1) as f64;
    if peak == 0 || ratio > 8.0 {
        bad.push(format!("peak {:.0} MiB", peak as f64 / MIB as f64));
    }
    outcome(
        bad.is_empty(),
        format!(
            "{:.1} MiB input with an 8 MiB quoted field, 4 modes match oracle, peak RSS {:.0} MiB ({ratio:.2}x){}",
            size as f64 / MIB as f64,
            peak as f64 / MIB as f64,
            if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }
        ),
    )
}

fn encodings() -> Outcome {
    let mut bad = Vec::new();
    let mut cases = 0;
    for seed in 0..40u64 {
        let mut cfg = fuzz_config(30_000 + seed, 16 * 1024);
        cfg.multilingual = true;
        let utf8 = generate(&cfg);
        let text = std::str::from_utf8(&utf8).unwrap();
        let utf16 = Encoding::Utf16Le.encode_str(text);
        let mut expect_csv = None;
        for (enc, input) in [(Encoding::Utf8, &utf8), (Encoding::Utf16Le, &utf16)] {
            let base = ParseOptions { encoding: enc, ..Default::default() };
            let expect = sequential_parse(input, &base, false).map(|o| o.table);
            let expect_bytes = expect.as_ref().map(|t| t.to_bytes()).map_err(|e| Error::Config(e.to_string()));
            if let Ok(t) = &expect {
                let csv = t.to_csv(false);
                if std::str::from_utf8(&csv).is_err() {
                    bad.push(format!("seed {seed} {enc}: invalid UTF-8 in output"));
                }
                match &expect_csv {
                    None => expect_csv = Some(csv),
                    Some(c) if *c != csv => bad.push(format!("seed {seed}: UTF-16 text differs from UTF-8")),
                    _ => {}
                }
            }
            for chunk in 2..=64 {
                cases += 1;
                let opts = ParseOptions { chunk_size: chunk, workers: 2, ..base.clone() };
                let got = container(Parser::new(opts).unwrap().parse_single_shot(input));
                if !same_result(&expect_bytes, &got) {
                    bad.push(format!("seed {seed} {enc} chunk {chunk}"));
                }
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "{cases} parses, {} mismatches{}",
            bad.len(),
            bad.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    )
}

fn determinism_and_scaling() -> Outcome {
    let input = generate(&GenConfig { seed: 99, target_bytes: 100 * MIB, columns: 8, ..Default::default() });
    let mut hashes = Vec::new();
    let mut times = Vec::new();
    for workers in [1, 2, 4, 8] {
        let p = Parser::new(ParseOptions { workers, ..Default::default() }).unwrap();
        let started = Instant::now();
        let out = container(p.parse(&input));
        times.push((workers, started.elapsed()));
        hashes.push(out.map(|b| sha(&b)).unwrap_or_else(|e| e.to_string()));
    }
    let deterministic = hashes.windows(2).all(|w| w[0] == w[1]);
    let mib = input.len() as f64 / MIB as f64;
    let sample = &input[..input.len().min(16 * MIB)];
    let sample_mib = sample.len() as f64 / MIB as f64;
    println!("  chunk-size sweep ({sample_mib:.0} MiB, 1 worker):");
    for chunk in [1, 2, 4, 8, 16, 31, 48, 64] {
        let p = Parser::new(ParseOptions { chunk_size: chunk, workers: 1, ..Default::default() }).unwrap();
        let started = Instant::now();
        let ok = p.parse_single_shot(sample).is_ok();
        let secs = started.elapsed().as_secs_f64();
        println!("    chunk {chunk:>2}: {:>7.1} MiB/s{}", sample_mib / secs, if ok { "" } else { " (error)" });
    }
    let t1 = times[0].1.as_secs_f64();
    let t4 = times[2].1.as_secs_f64();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let speedup = t1 / t4;
    let note = if speedup >= 1.8 { "meets" } else { "below" };
    println!(
        "  scaling (informational, {cores} hardware threads): {}; 4 vs 1 workers {speedup:.2}x, {note} the 1.8x expectation",
        times
            .iter()
            .map(|(w, t)| format!("{w}w {:.0} MiB/s", mib / t.as_secs_f64()))
            .collect::<Vec<_>>()
            .join(", ")
    );
    outcome(deterministic, format!("{:.0} MiB, hashes {}", mib, hashes.join(" ")))
}

fn main() -> ExitCode {
    if std::env::var_os(CHILD_ENV).is_some() {
        skew_child();
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("differential correctness", differential),
        ("context-scan fixture", context_scan),
        ("exact fixtures", fixtures),
        ("column inference", column_inference),
        ("streaming equivalence", streaming),
        ("tagging-mode equivalence", tagging_modes),
        ("skew robustness", skew),
        ("encoding", encodings),
        ("determinism and scaling", determinism_and_scaling),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = run();
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {} [{:.1}s]", result.detail, started.elapsed().as_secs_f64());
        failed += usize::from(!result.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
