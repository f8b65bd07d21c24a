//! Sequential reference parser used as ground truth in tests.
//!
//! One DFA instance reads the input front to back. Symbol decoding, group
//! lookup, record splitting, selection and column assembly are written
//! independently of the chunked pipeline; only the DFA tables and the
//! per-field conversion rules are shared.

use crate::columnar::TaggingMode;
use crate::container::{Field, Table};
use crate::dfa::{DfaSpec, EmissionAction, GroupId, StateId};
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::parser::{inferred_name, ModeChoice, ParseOptions, SchemaSpec};
use crate::typeconv::{infer_field, join_types, ColumnBuilder, ColumnSchema, FieldContext, LogicalType};

/// One decoded symbol: its byte span and the byte it is matched by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Symbol {
    start: usize,
    len: usize,
    /// `None` for symbols that can only fall into the catch-all group, and
    /// for stray continuation bytes with no symbol to belong to.
    key: Option<u8>,
    orphan: bool,
}

fn decode_symbols(input: &[u8], enc: Encoding) -> Vec<Symbol> {
    let mut out: Vec<Symbol> = Vec::new();
    match enc {
        Encoding::Ascii => {
            for (i, &b) in input.iter().enumerate() {
                out.push(Symbol { start: i, len: 1, key: Some(b), orphan: false });
            }
        }
        Encoding::Utf8 => {
            for (i, &b) in input.iter().enumerate() {
                let continuation = b >> 6 == 0b10;
                match out.last_mut() {
                    Some(prev) if continuation => prev.len += 1,
                    None if continuation => out.push(Symbol { start: i, len: 1, key: None, orphan: true }),
                    _ => out.push(Symbol { start: i, len: 1, key: Some(b), orphan: false }),
                }
            }
        }
        Encoding::Utf16Le | Encoding::Utf16Be => {
            let mut i = 0;
            while i < input.len() {
                if i + 1 == input.len() {
                    out.push(Symbol { start: i, len: 1, key: None, orphan: false });
                    break;
                }
                let unit = if enc == Encoding::Utf16Le {
                    input[i] as u16 | (input[i + 1] as u16) << 8
                } else {
                    (input[i] as u16) << 8 | input[i + 1] as u16
                };
                let low_surrogate = (0xDC00..0xE000).contains(&unit);
                match out.last_mut() {
                    Some(prev) if low_surrogate => prev.len += 2,
                    None if low_surrogate => out.push(Symbol { start: i, len: 2, key: None, orphan: true }),
                    _ => out.push(Symbol {
                        start: i,
                        len: 2,
                        key: if unit < 0x100 { Some(unit as u8) } else { None },
                        orphan: false,
                    }),
                }
                i += 2;
            }
        }
    }
    out
}

fn lookup_group(spec: &DfaSpec, key: Option<u8>) -> GroupId {
    if let Some(b) = key {
        for (g, group) in spec.groups().iter().enumerate() {
            if !group.catch_all && group.bytes.contains(&b) {
                return g as GroupId;
            }
        }
    }
    spec.catch_all_group()
}

/// Per-byte record of a sequential run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleTrace {
    /// State after each byte.
    pub states: Vec<StateId>,
    /// (record, column) at each byte.
    pub positions: Vec<(u64, u64)>,
    /// Classification of each byte.
    pub actions: Vec<EmissionAction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub table: Table,
    pub records: u64,
    pub diagnostics: u64,
    pub trace: Option<OracleTrace>,
}

/// DFA state before every byte of `input`, starting from `seed`, plus the
/// final state.
pub fn state_before_each_byte(
    input: &[u8],
    spec: &DfaSpec,
    enc: Encoding,
    seed: StateId,
) -> (Vec<StateId>, StateId) {
    let mut before = vec![seed; input.len()];
    let mut state = seed;
    for sym in decode_symbols(input, enc) {
        for b in &mut before[sym.start..sym.start + sym.len] {
            *b = state;
        }
        if !sym.orphan {
            state = spec.transition(state, lookup_group(spec, sym.key));
        }
    }
    (before, state)
}

/// State at the start of every chunk of `chunk_size` bytes.
pub fn boundary_states(
    input: &[u8],
    spec: &DfaSpec,
    enc: Encoding,
    chunk_size: usize,
    seed: StateId,
) -> Vec<StateId> {
    let (before, _) = state_before_each_byte(input, spec, enc, seed);
    (0..input.len()).step_by(chunk_size).map(|i| before[i]).collect()
}

fn prune(input: &[u8], opts: &ParseOptions) -> Vec<u8> {
    let lb = opts.encoding.encode_byte(b'\n');
    let mut out = Vec::with_capacity(input.len());
    let mut row = 0u64;
    for unit in input.chunks(lb.len()) {
        if !opts.skip_rows.skips(row) {
            out.extend_from_slice(unit);
        }
        if unit == &lb[..] {
            row += 1;
        }
    }
    out
}

/// Parses `input` with a single sequential DFA.
pub fn sequential_parse(input: &[u8], opts: &ParseOptions, with_trace: bool) -> Result<OracleOutput> {
    opts.validate()?;
    let pruned;
    let input = if opts.skip_rows.is_none() {
        input
    } else {
        pruned = prune(input, opts);
        &pruned[..]
    };
    let spec = &*opts.dialect;
    let enc = opts.encoding;
    let unit = if enc.is_utf16() { 2 } else { 1 };
    let mut trace = with_trace.then(|| OracleTrace {
        states: vec![0; input.len()],
        positions: vec![(0, 0); input.len()],
        actions: vec![EmissionAction::DATA; input.len()],
    });

    let mut diagnostics = 0u64;
    let mut records: Vec<Vec<Vec<u8>>> = Vec::new();
    let mut record: Vec<Vec<u8>> = Vec::new();
    let mut field: Vec<u8> = Vec::new();
    let mut state = spec.start_state();
    let mut record_end = 0usize;
    let mut first_invalid = None;
    for sym in decode_symbols(input, enc) {
        let bytes = &input[sym.start..sym.start + sym.len];
        if sym.orphan {
            field.extend_from_slice(bytes);
            if let Some(t) = &mut trace {
                for k in sym.start..sym.start + sym.len {
                    t.states[k] = state;
                    t.positions[k] = (records.len() as u64, record.len() as u64);
                }
            }
            continue;
        }
        let group = lookup_group(spec, sym.key);
        let action = spec.emission(state, group);
        let next = spec.transition(state, group);
        if next == spec.invalid_state() && state != next && first_invalid.is_none() {
            first_invalid = Some(sym.start);
        }
        if let Some(t) = &mut trace {
            for k in sym.start..sym.start + sym.len {
                t.states[k] = next;
                t.positions[k] = (records.len() as u64, record.len() as u64);
                t.actions[k] = action;
            }
        }
        if !action.is_control() {
            field.extend_from_slice(bytes);
        }
        if action.is_field_delimiter() {
            record.push(std::mem::take(&mut field));
        }
        if action.is_record_delimiter() {
            records.push(std::mem::take(&mut record));
            record_end = sym.start + unit;
        }
        state = next;
    }
    if record_end < input.len() {
        record.push(field);
        records.push(record);
    }

    if let Some(at) = first_invalid {
        if opts.strict {
            return Err(Error::InvalidTransition { offset: at as u64 });
        }
        diagnostics += 1;
    }
    if !spec.is_accepting(state) {
        if opts.strict {
            return Err(Error::NonAcceptingEnd {
                state: spec.state_name(state).to_owned(),
            });
        }
        diagnostics += 1;
    }
    if let Some(expected) = opts.expected_columns {
        let bad: Vec<usize> = (0..records.len())
            .filter(|&r| records[r].len() as u64 != expected)
            .collect();
        if !bad.is_empty() {
            if opts.strict {
                return Err(Error::Validation(format!("first offending record {}", bad[0])));
            }
            diagnostics += bad.len() as u64;
        }
    }

    let kept: Vec<usize> = (0..records.len())
        .filter(|&r| opts.selection.keeps_record(r as u64))
        .collect();
    let input_column = |j: usize| opts.selection.projection().map_or(j, |p| p[j]);
    let out_cols = match (&opts.schema, opts.selection.projection()) {
        (_, Some(p)) => p.len(),
        (SchemaSpec::Fixed(s), None) => s.len(),
        (SchemaSpec::Infer, None) => kept.iter().map(|&r| records[r].len()).max().unwrap_or(0),
    };
    let field_of = |r: usize, j: usize| records[r].get(input_column(j)).map(|f| &f[..]);

    let uniform = kept.windows(2).all(|w| records[w[0]].len() == records[w[1]].len());
    if out_cols > 0 {
        if let ModeChoice::Fixed(mode @ (TaggingMode::Inline | TaggingMode::Delimited)) = opts.mode {
            if !uniform {
                return Err(Error::Mode(format!("{mode} mode needs a uniform column count")));
            }
            if mode == TaggingMode::Inline
                && kept
                    .iter()
                    .any(|&r| (0..out_cols).any(|j| field_of(r, j).is_some_and(|f| f.contains(&opts.terminator))))
            {
                return Err(Error::Mode("terminator occurs in field data".into()));
            }
        }
    }

    let schema: Vec<ColumnSchema> = match &opts.schema {
        SchemaSpec::Fixed(s) => s.clone(),
        SchemaSpec::Infer => (0..out_cols)
            .map(|j| {
                let mut ty = None;
                for &r in &kept {
                    if let Some(f) = field_of(r, j) {
                        let text = enc.decode_to_utf8(f);
                        if !text.is_empty() {
                            ty = join_types(ty, infer_field(&text));
                        }
                    }
                }
                ColumnSchema::new(inferred_name(input_column(j)), ty.unwrap_or(LogicalType::Utf8))
            })
            .collect(),
    };
    let ctx = FieldContext {
        encoding: enc,
        strict: opts.strict,
    };
    let mut columns = Vec::with_capacity(out_cols);
    for (j, s) in schema.iter().enumerate() {
        let mut builder = ColumnBuilder::new(s.ty);
        for &r in &kept {
            diagnostics += builder.push_field(field_of(r, j), s, &ctx, r as u64, j)? as u64;
        }
        columns.push(builder.finish());
    }
    let fields: Vec<Field> = schema
        .iter()
        .map(|s| Field {
            name: s.name.clone(),
            ty: s.ty,
            nullable: s.nullable,
        })
        .collect();
    let table = if columns.is_empty() {
        Table::empty(fields)
    } else {
        Table::new(fields, columns)?
    };
    Ok(OracleOutput {
        table,
        records: records.len() as u64,
        diagnostics,
        trace,
    })
}
