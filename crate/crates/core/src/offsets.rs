//! Record counts and column offsets per chunk, their global resolution, and
//! column-count inference and validation.

use rayon::prelude::*;

use crate::chunk::ChunkMeta;
use crate::scan::{exclusive_scan_with_total, ColumnOffset};

#[inline]
pub fn record_count(rec: u64) -> u64 {
    u64::from(rec.count_ones())
}

/// All bits up to and including the highest set bit of `x`.
#[inline]
fn mask_through_highest(x: u64) -> u64 {
    debug_assert!(x != 0);
    u64::MAX >> x.leading_zeros()
}

/// Bits strictly below bit `pos`.
#[inline]
fn mask_below(pos: u32) -> u64 {
    if pos >= 64 {
        u64::MAX
    } else {
        (1u64 << pos) - 1
    }
}

/// Column offset a chunk hands to its successor. With no record delimiter
/// it is the number of field delimiters, relative to the chunk's own
/// offset; otherwise it is the number of field delimiters after the last
/// record delimiter, as an absolute column.
#[inline]
pub fn chunk_column_offset(rec: u64, col: u64) -> ColumnOffset {
    if rec == 0 {
        ColumnOffset::Relative(u64::from(col.count_ones()))
    } else {
        ColumnOffset::Absolute(u64::from((!mask_through_highest(rec) & col).count_ones()))
    }
}

/// Record and column position of a chunk's first byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkOffset {
    pub record: u64,
    pub column: ColumnOffset,
}

/// Exclusive scans of record counts and column offsets, seeded with the
/// position the input starts at. Returns each chunk's offset and the
/// position after the last chunk.
pub fn global_offsets(
    per_chunk: &[(u64, ColumnOffset)],
    seed: ChunkOffset,
    workers: usize,
) -> (Vec<ChunkOffset>, ChunkOffset) {
    let counts: Vec<u64> = per_chunk.iter().map(|p| p.0).collect();
    let cols: Vec<ColumnOffset> = per_chunk.iter().map(|p| p.1).collect();
    let (rec_prefix, rec_total) = exclusive_scan_with_total(&counts, 0u64, |a, b| a + b, workers);
    let (col_prefix, col_total) =
        exclusive_scan_with_total(&cols, ColumnOffset::IDENTITY, |a, b| a.combine(*b), workers);
    let offsets = rec_prefix
        .into_iter()
        .zip(col_prefix)
        .map(|(r, c)| ChunkOffset {
            record: seed.record + r,
            column: seed.column.combine(c),
        })
        .collect();
    (
        offsets,
        ChunkOffset {
            record: seed.record + rec_total,
            column: seed.column.combine(col_total),
        },
    )
}

/// Per-chunk offsets of a chunk pass, restricted to bitmaps.
pub fn chunk_contributions(metas: &[ChunkMeta]) -> Vec<(u64, ColumnOffset)> {
    metas
        .par_iter()
        .with_min_len(1024)
        .map(|m| (record_count(m.rec), chunk_column_offset(m.rec, m.col)))
        .collect()
}

/// Column statistics one chunk can compute on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChunkColumnStats {
    /// Field delimiters before the first record delimiter (or in the whole
    /// chunk when there is none).
    pub rel_minmax: u64,
    /// Column counts of records that both start and end in this chunk.
    pub min_cols: u64,
    pub max_cols: u64,
    pub has_record_delim: bool,
    /// Whether `min_cols`/`max_cols` hold at least one record.
    has_inner: bool,
}

impl ChunkColumnStats {
    pub fn from_bitmaps(rec: u64, col: u64) -> Self {
        if rec == 0 {
            return ChunkColumnStats {
                rel_minmax: u64::from(col.count_ones()),
                ..Default::default()
            };
        }
        let first = rec.trailing_zeros();
        let mut stats = ChunkColumnStats {
            rel_minmax: u64::from((col & mask_below(first)).count_ones()),
            min_cols: u64::MAX,
            max_cols: 0,
            has_record_delim: true,
            has_inner: false,
        };
        let mut prev = first;
        let mut rest = rec & !(1u64 << first);
        while rest != 0 {
            let next = rest.trailing_zeros();
            let between = col & mask_below(next) & !mask_below(prev + 1);
            let cols = u64::from(between.count_ones()) + 1;
            stats.min_cols = stats.min_cols.min(cols);
            stats.max_cols = stats.max_cols.max(cols);
            stats.has_inner = true;
            prev = next;
            rest &= rest - 1;
        }
        if !stats.has_inner {
            stats.min_cols = 0;
        }
        stats
    }

    /// Min/max column counts of the records this chunk terminates, given the
    /// column the chunk starts in.
    pub fn resolve(&self, start_column: u64) -> Option<(u64, u64)> {
        if !self.has_record_delim {
            return None;
        }
        let first = start_column + self.rel_minmax + 1;
        if self.has_inner {
            Some((first.min(self.min_cols), first.max(self.max_cols)))
        } else {
            Some((first, first))
        }
    }
}

pub fn merge_minmax(a: Option<(u64, u64)>, b: Option<(u64, u64)>) -> Option<(u64, u64)> {
    match (a, b) {
        (Some((a0, a1)), Some((b0, b1))) => Some((a0.min(b0), a1.max(b1))),
        (x, None) | (None, x) => x,
    }
}

/// Global min/max record column count over all records terminated inside
/// the chunks.
pub fn column_count_stats(
    chunks: &[ChunkColumnStats],
    resolved: &[ChunkOffset],
) -> Option<(u64, u64)> {
    chunks
        .par_iter()
        .zip(resolved.par_iter())
        .with_min_len(1024)
        .map(|(s, o)| s.resolve(o.column.value()))
        .reduce(|| None, merge_minmax)
}

/// Outcome of checking every record's column count against an expected
/// count.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub expected: u64,
    pub min: Option<u64>,
    pub max: Option<u64>,
    /// Chunks that terminate at least one nonconforming record.
    pub offending_chunks: Vec<usize>,
    /// Global indices of nonconforming records.
    pub offending_records: Vec<u64>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.offending_chunks.is_empty() && self.offending_records.is_empty()
    }

    pub fn is_nonuniform(&self) -> bool {
        matches!((self.min, self.max), (Some(a), Some(b)) if a != b)
    }

    /// Fills `offending_records` from per-record column counts, the first of
    /// which belongs to record `first_record`.
    pub fn identify_records(&mut self, counts: &[u32], first_record: u64) {
        let expected = self.expected;
        self.offending_records = counts
            .par_iter()
            .enumerate()
            .filter(|(_, &c)| u64::from(c) != expected)
            .map(|(i, _)| first_record + i as u64)
            .collect();
    }

    pub fn summary(&self) -> String {
        if self.passed() {
            return format!("all records have {} columns", self.expected);
        }
        let kind = if self.is_nonuniform() {
            "nonuniform column counts"
        } else {
            "column count mismatch"
        };
        let first = self
            .offending_records
            .first()
            .map(|r| format!(", first offending record {r}"))
            .unwrap_or_default();
        format!(
            "{kind}: expected {}, observed min {} max {}{first}",
            self.expected,
            self.min.map_or("-".into(), |v| v.to_string()),
            self.max.map_or("-".into(), |v| v.to_string()),
        )
    }
}

/// Checks the global min/max against `expected` and lists the chunks whose
/// records do not conform.
pub fn validate_column_count(
    chunks: &[ChunkColumnStats],
    resolved: &[ChunkOffset],
    expected: u64,
) -> ValidationReport {
    let per_chunk: Vec<Option<(u64, u64)>> = chunks
        .par_iter()
        .zip(resolved.par_iter())
        .map(|(s, o)| s.resolve(o.column.value()))
        .collect();
    let global = per_chunk.iter().copied().fold(None, merge_minmax);
    ValidationReport {
        expected,
        min: global.map(|g| g.0),
        max: global.map(|g| g.1),
        offending_chunks: per_chunk
            .iter()
            .enumerate()
            .filter(|(_, mm)| matches!(mm, Some((a, b)) if *a != expected || *b != expected))
            .map(|(i, _)| i)
            .collect(),
        offending_records: Vec::new(),
    }
}

/// Column count of every record terminated inside the chunks, in record
/// order. Chunk `i` is described by `metas[i]` clipped to `limits[i]` bytes.
pub fn record_column_counts(metas: &[ChunkMeta], offsets: &[ChunkOffset]) -> Vec<u32> {
    const BLOCK: usize = 4096;
    let parts: Vec<Vec<u32>> = metas
        .par_chunks(BLOCK)
        .zip(offsets.par_chunks(BLOCK))
        .map(|(ms, os)| {
            let mut out = Vec::new();
            for (m, o) in ms.iter().zip(os) {
                let mut column = o.column.value();
                let mut pos = 0u32;
                let mut rest = m.rec;
                while rest != 0 {
                    let r = rest.trailing_zeros();
                    let between = m.col & mask_below(r) & !mask_below(pos);
                    column += u64::from(between.count_ones());
                    out.push((column + 1) as u32);
                    column = 0;
                    pos = r + 1;
                    rest &= rest - 1;
                }
            }
            out
        })
        .collect();
    parts.concat()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::chunk_pass;
    use crate::dfa::{csv_states::EOR, rfc4180};
    use crate::encoding::Encoding;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(positions: &[u32]) -> u64 {
        positions.iter().fold(0, |acc, &p| acc | (1 << p))
    }

    #[test]
    fn record_count_fixtures() {
        assert_eq!(record_count(0), 0);
        assert_eq!(record_count(bits(&[3, 9])), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let w: u64 = rng.gen();
            let naive = (0..64).filter(|i| (w >> i) & 1 == 1).count() as u64;
            assert_eq!(record_count(w), naive);
        }
    }

    #[test]
    fn column_offset_fixtures() {
        assert_eq!(chunk_column_offset(0, bits(&[1, 5])), ColumnOffset::Relative(2));
        assert_eq!(
            chunk_column_offset(bits(&[3]), bits(&[1, 3, 6])),
            ColumnOffset::Absolute(1)
        );
        assert_eq!(chunk_column_offset(bits(&[7]), bits(&[7])), ColumnOffset::Absolute(0));
        assert_eq!(chunk_column_offset(bits(&[63]), bits(&[2, 63])), ColumnOffset::Absolute(0));
        // literal cross-check: "a,b\n,c,d" has one field delimiter after the newline... two
        let spec = rfc4180();
        let m = crate::chunk::emit_bitmaps(b"a,b\n,c,d", &spec, EOR, Encoding::Ascii);
        assert_eq!(chunk_column_offset(m.rec, m.col), ColumnOffset::Absolute(2));
    }

    fn replay_offset(rec: u64, col: u64) -> ColumnOffset {
        let mut after_rec = None;
        let mut count = 0;
        for j in 0..64 {
            if (rec >> j) & 1 == 1 {
                after_rec = Some(());
                count = 0;
            } else if (col >> j) & 1 == 1 {
                count += 1;
            }
        }
        match after_rec {
            Some(()) => ColumnOffset::Absolute(count),
            None => ColumnOffset::Relative(count),
        }
    }

    #[test]
    fn column_offset_matches_replay_on_random_bitmaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1_000_000 {
            let col: u64 = rng.gen::<u64>() & rng.gen::<u64>();
            let rec = col & rng.gen::<u64>() & rng.gen::<u64>() & rng.gen::<u64>();
            assert_eq!(chunk_column_offset(rec, col), replay_offset(rec, col));
        }
    }

    #[test]
    fn global_offset_fixtures() {
        use ColumnOffset::*;
        let seed = ChunkOffset { record: 0, column: Relative(0) };
        let (offs, total) = global_offsets(
            &[(2, Relative(0)), (0, Relative(0)), (1, Relative(0))],
            seed,
            1,
        );
        assert_eq!(offs.iter().map(|o| o.record).collect::<Vec<_>>(), vec![0, 2, 2]);
        assert_eq!(total.record, 3);
        let (offs, _) = global_offsets(&[(0, Relative(1)), (1, Absolute(2)), (0, Relative(3))], seed, 1);
        assert_eq!(
            offs.iter().map(|o| o.column).collect::<Vec<_>>(),
            vec![Relative(0), Relative(1), Absolute(2)]
        );
    }

    /// (record, column) position before every byte, by sequential replay.
    fn sequential_positions(input: &[u8]) -> Vec<(u64, u64)> {
        let spec = rfc4180();
        let mut s = EOR;
        let (mut r, mut c) = (0u64, 0u64);
        let mut out = Vec::new();
        for &b in input {
            out.push((r, c));
            let g = spec.group_of(b);
            let e = spec.emission(s, g);
            if e.is_record_delimiter() {
                r += 1;
                c = 0;
            } else if e.is_field_delimiter() {
                c += 1;
            }
            s = spec.transition(s, g);
        }
        out
    }

    fn sequential_record_counts(input: &[u8]) -> Vec<u32> {
        let spec = rfc4180();
        let mut s = EOR;
        let mut c = 0u32;
        let mut out = Vec::new();
        for &b in input {
            let g = spec.group_of(b);
            let e = spec.emission(s, g);
            if e.is_record_delimiter() {
                out.push(c + 1);
                c = 0;
            } else if e.is_field_delimiter() {
                c += 1;
            }
            s = spec.transition(s, g);
        }
        out
    }

    fn csv_bytes() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(prop::sample::select(b"ab,,\"\n".to_vec()), 0..400)
    }

    proptest! {
        #[test]
        fn resolved_offsets_match_sequential(input in csv_bytes(), chunk in 1usize..=64, workers in 1usize..4) {
            let spec = rfc4180();
            let pass = chunk_pass(&input, &spec, Encoding::Ascii, chunk, EOR, None, workers);
            let seed = ChunkOffset { record: 0, column: ColumnOffset::Absolute(0) };
            let (offs, _) = global_offsets(&chunk_contributions(&pass.metas), seed, workers);
            let seq = sequential_positions(&input);
            for (i, o) in offs.iter().enumerate() {
                prop_assert_eq!((o.record, o.column.value()), seq[i * chunk]);
                prop_assert!(o.column.is_absolute());
            }
            let total: u64 = pass.metas.iter().map(|m| record_count(m.rec)).sum();
            let counts = sequential_record_counts(&input);
            prop_assert_eq!(total, counts.len() as u64);
            prop_assert_eq!(record_column_counts(&pass.metas, &offs), counts.clone());

            let stats: Vec<_> = pass.metas.iter().map(|m| ChunkColumnStats::from_bitmaps(m.rec, m.col)).collect();
            let expect = counts.iter().fold(None, |acc, &c| merge_minmax(acc, Some((c as u64, c as u64))));
            prop_assert_eq!(column_count_stats(&stats, &offs), expect);
        }
    }

    fn stats_for(input: &[u8], chunk: usize) -> (Vec<ChunkColumnStats>, Vec<ChunkOffset>) {
        let spec = rfc4180();
        let pass = chunk_pass(input, &spec, Encoding::Ascii, chunk, EOR, None, 1);
        let seed = ChunkOffset { record: 0, column: ColumnOffset::Absolute(0) };
        let (offs, _) = global_offsets(&chunk_contributions(&pass.metas), seed, 1);
        let stats = pass.metas.iter().map(|m| ChunkColumnStats::from_bitmaps(m.rec, m.col)).collect();
        (stats, offs)
    }

    #[test]
    fn column_count_fixtures() {
        for chunk in 1..=12 {
            let (s, o) = stats_for(b"1,Apples\n2\n", chunk);
            assert_eq!(column_count_stats(&s, &o), Some((1, 2)), "chunk {chunk}");
            let (s, o) = stats_for(b"a,b\nc,d\n", chunk);
            assert_eq!(column_count_stats(&s, &o), Some((2, 2)));
        }
    }

    #[test]
    fn random_width_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut input = Vec::new();
        let mut widths = Vec::new();
        for _ in 0..10_000 {
            let w = rng.gen_range(1..8u64);
            widths.push(w);
            for f in 0..w {
                if f > 0 {
                    input.push(b',');
                }
                input.extend(std::iter::repeat(b'x').take(rng.gen_range(0..4)));
            }
            input.push(b'\n');
        }
        let (s, o) = stats_for(&input, 31);
        let expect = (*widths.iter().min().unwrap(), *widths.iter().max().unwrap());
        assert_eq!(column_count_stats(&s, &o), Some(expect));
    }

    #[test]
    fn validation_fixtures() {
        let (s, o) = stats_for(b"a,b\nc,d\n", 31);
        assert!(validate_column_count(&s, &o, 2).passed());
        let (s, o) = stats_for(b"1,Apples\n2\n", 31);
        let r = validate_column_count(&s, &o, 2);
        assert!(!r.passed());
        assert!(r.is_nonuniform());
        assert_eq!(r.offending_chunks, vec![0]);
        let (s, o) = stats_for(b"a,b,c\nd,e,f\n", 4);
        let r = validate_column_count(&s, &o, 2);
        assert!(!r.passed() && !r.is_nonuniform());
        assert_eq!((r.min, r.max), (Some(3), Some(3)));
    }
}
