//! Parsing rules as a deterministic finite automaton over symbol groups.
//!
//! Bytes are first mapped to a symbol group by a [`SymbolMatcher`]; the
//! transition table is stored one group per row so that a single row fetch
//! yields the successor of every state for the symbol just read.

use std::fmt;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Index of a DFA state.
pub type StateId = u8;
/// Index of a symbol group.
pub type GroupId = u8;

/// Most states a [`DfaSpec`] may have.
pub const MAX_STATES: usize = 256;

/// What reading a symbol in a given state means for the output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct EmissionAction(u8);

impl EmissionAction {
    const RECORD: u8 = 1;
    const FIELD: u8 = 2;
    const CONTROL: u8 = 4;

    pub const DATA: EmissionAction = EmissionAction(0);
    pub const CONTROL_ONLY: EmissionAction = EmissionAction(Self::CONTROL);
    pub const FIELD_DELIMITER: EmissionAction = EmissionAction(Self::FIELD | Self::CONTROL);
    pub const RECORD_DELIMITER: EmissionAction =
        EmissionAction(Self::RECORD | Self::FIELD | Self::CONTROL);

    /// Builds an action from its three flags. A record delimiter always
    /// carries field-delimiter semantics.
    pub fn new(record: bool, field: bool, control: bool) -> Result<Self> {
        if (record || field) && !control {
            return Err(Error::invariant(
                "delimiter implies control",
                format!("emission {{record: {record}, field: {field}, control: false}}"),
            ));
        }
        let mut bits = 0;
        if record {
            bits |= Self::RECORD | Self::FIELD;
        }
        if field {
            bits |= Self::FIELD;
        }
        if control {
            bits |= Self::CONTROL;
        }
        Ok(EmissionAction(bits))
    }

    #[inline]
    pub fn is_record_delimiter(self) -> bool {
        self.0 & Self::RECORD != 0
    }

    #[inline]
    pub fn is_field_delimiter(self) -> bool {
        self.0 & Self::FIELD != 0
    }

    #[inline]
    pub fn is_control(self) -> bool {
        self.0 & Self::CONTROL != 0
    }

    #[inline]
    pub fn is_data(self) -> bool {
        !self.is_control()
    }
}

impl fmt::Debug for EmissionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.is_record_delimiter(), self.is_field_delimiter(), self.is_control()) {
            (true, _, _) => f.write_str("Record"),
            (false, true, _) => f.write_str("Field"),
            (false, false, true) => f.write_str("Control"),
            _ => f.write_str("Data"),
        }
    }
}

/// Null-byte detector: bit 7 of each byte lane is set when the lane is zero.
///
/// A lane holding 0x01 directly above a zero lane can be flagged as well,
/// because the borrow of the subtraction propagates upwards. The lowest
/// flagged lane is always a true zero.
#[inline]
pub const fn h_nullbyte(x: u32) -> u32 {
    x.wrapping_sub(0x0101_0101) & !x & 0x8080_8080
}

/// Position of the most significant set bit, `0xFFFFFFFF` for zero.
#[inline]
pub const fn bfind(x: u32) -> u32 {
    if x == 0 {
        u32::MAX
    } else {
        31 - x.leading_zeros()
    }
}

/// Byte position of the lowest flagged lane of a null-byte mask, or the
/// sentinel `0x1FFFFFFF` when no lane is flagged.
#[inline]
pub const fn lane_position(swar: u32) -> u32 {
    bfind(swar & swar.wrapping_neg()) >> 3
}

const SWAR_LANES: usize = 8;

/// Maps a byte to its symbol group.
#[derive(Clone, PartialEq, Eq)]
pub enum SymbolMatcher {
    /// Up to eight match bytes compared four at a time.
    Swar {
        lookup: [u32; 2],
        lane_mask: [u32; 2],
        position_to_group: [GroupId; SWAR_LANES + 1],
        catchall_position: u32,
    },
    /// Direct lookup for symbol sets too large for the word compare.
    Table {
        table: Box<[GroupId; 256]>,
        catch_all: GroupId,
    },
}

impl SymbolMatcher {
    /// `bytes[i]` matches group `groups[i]`; everything else maps to
    /// `catch_all`.
    pub fn new(bytes: &[u8], groups: &[GroupId], catch_all: GroupId) -> Result<Self> {
        if bytes.len() != groups.len() {
            return Err(Error::Config("matcher bytes and groups differ in length".into()));
        }
        for (i, b) in bytes.iter().enumerate() {
            if bytes[..i].contains(b) {
                return Err(Error::invariant(
                    "distinct lookup bytes",
                    format!("byte 0x{b:02X} listed twice"),
                ));
            }
        }
        if bytes.len() > SWAR_LANES {
            let mut table = Box::new([catch_all; 256]);
            for (&b, &g) in bytes.iter().zip(groups) {
                table[b as usize] = g;
            }
            return Ok(SymbolMatcher::Table { table, catch_all });
        }
        let mut lookup = [0u32; 2];
        let mut lane_mask = [0u32; 2];
        let mut position_to_group = [catch_all; SWAR_LANES + 1];
        for (pos, (&b, &g)) in bytes.iter().zip(groups).enumerate() {
            let word = pos / 4;
            let shift = (pos % 4) * 8;
            lookup[word] |= u32::from(b) << shift;
            lane_mask[word] |= 0x80 << shift;
            position_to_group[pos] = g;
        }
        let catchall_position = bytes.len() as u32;
        position_to_group[bytes.len()] = catch_all;
        Ok(SymbolMatcher::Swar {
            lookup,
            lane_mask,
            position_to_group,
            catchall_position,
        })
    }

    /// Byte position of `symbol` among the lookup bytes, clamped to the
    /// catch-all position. Only meaningful for the word-compare matcher.
    #[inline]
    pub fn match_position(&self, symbol: u8) -> Option<u32> {
        match self {
            SymbolMatcher::Swar {
                lookup,
                lane_mask,
                catchall_position,
                ..
            } => {
                let s = u32::from(symbol).wrapping_mul(0x0101_0101);
                let lo = lane_position(h_nullbyte(lookup[0] ^ s) & lane_mask[0]);
                let hi = lane_position(h_nullbyte(lookup[1] ^ s) & lane_mask[1]).wrapping_add(4);
                let idx = lo.min(hi);
                Some(idx.min(*catchall_position))
            }
            SymbolMatcher::Table { .. } => None,
        }
    }

    #[inline]
    pub fn match_symbol(&self, symbol: u8) -> GroupId {
        match self {
            SymbolMatcher::Swar {
                position_to_group, ..
            } => {
                let pos = self.match_position(symbol).unwrap_or(0);
                position_to_group[pos as usize]
            }
            SymbolMatcher::Table { table, .. } => table[symbol as usize],
        }
    }

    pub fn catch_all(&self) -> GroupId {
        match self {
            SymbolMatcher::Swar {
                position_to_group,
                catchall_position,
                ..
            } => position_to_group[*catchall_position as usize],
            SymbolMatcher::Table { catch_all, .. } => *catch_all,
        }
    }
}

impl fmt::Debug for SymbolMatcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymbolMatcher::Swar {
                lookup,
                catchall_position,
                position_to_group,
                ..
            } => f
                .debug_struct("Swar")
                .field("lookup", &format_args!("[{:#010X}, {:#010X}]", lookup[0], lookup[1]))
                .field("catchall_position", catchall_position)
                .field("position_to_group", position_to_group)
                .finish(),
            SymbolMatcher::Table { .. } => f.write_str("Table(..)"),
        }
    }
}

/// A symbol group: the bytes it contains, or the catch-all for every byte
/// not listed elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolGroup {
    pub bytes: Vec<u8>,
    pub catch_all: bool,
}

impl SymbolGroup {
    pub fn bytes(bytes: &[u8]) -> Self {
        SymbolGroup {
            bytes: bytes.to_vec(),
            catch_all: false,
        }
    }

    pub fn catch_all() -> Self {
        SymbolGroup {
            bytes: Vec::new(),
            catch_all: true,
        }
    }
}

/// A validated DFA plus its emission table and symbol matcher.
#[derive(Debug, Clone)]
pub struct DfaSpec {
    state_names: Vec<String>,
    start: StateId,
    accepting: Vec<bool>,
    invalid: StateId,
    groups: Vec<SymbolGroup>,
    catch_all: GroupId,
    // group-major: transitions[group * state_count + state]
    transitions: Vec<StateId>,
    emissions: Vec<EmissionAction>,
    matcher: SymbolMatcher,
}

impl PartialEq for DfaSpec {
    fn eq(&self, other: &Self) -> bool {
        self.state_names == other.state_names
            && self.start == other.start
            && self.accepting == other.accepting
            && self.invalid == other.invalid
            && self.groups == other.groups
            && self.transitions == other.transitions
            && self.emissions == other.emissions
    }
}

impl DfaSpec {
    /// Validates and assembles a DFA. `transitions` and `emissions` are
    /// group-major with one row of `state_names.len()` entries per group.
    pub fn new(
        state_names: Vec<String>,
        start: StateId,
        accepting: &[StateId],
        invalid: StateId,
        groups: Vec<SymbolGroup>,
        transitions: Vec<StateId>,
        emissions: Vec<EmissionAction>,
    ) -> Result<Self> {
        let n = state_names.len();
        if n == 0 {
            return Err(Error::invariant("state_count >= 1", "no states"));
        }
        if n > MAX_STATES {
            return Err(Error::invariant(
                "state_count <= 256",
                format!("{n} states"),
            ));
        }
        if groups.len() < 2 {
            return Err(Error::invariant(
                "group_count >= 2",
                format!("{} groups", groups.len()),
            ));
        }
        if groups.len() > 256 {
            return Err(Error::invariant("group_count <= 256", format!("{} groups", groups.len())));
        }
        for (name, s) in [("start", start), ("invalid", invalid)] {
            if s as usize >= n {
                return Err(Error::invariant(
                    "valid state index",
                    format!("{name} state {s} out of range for {n} states"),
                ));
            }
        }
        let catch_alls: Vec<usize> = groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.catch_all)
            .map(|(i, _)| i)
            .collect();
        if catch_alls.len() != 1 {
            return Err(Error::invariant(
                "exactly one catch-all group",
                format!("{} catch-all groups", catch_alls.len()),
            ));
        }
        let catch_all = catch_alls[0] as GroupId;
        if transitions.len() != n * groups.len() {
            return Err(Error::invariant(
                "transition table shape",
                format!(
                    "expected {} rows of {n} entries, got {} entries",
                    groups.len(),
                    transitions.len()
                ),
            ));
        }
        if emissions.len() != transitions.len() {
            return Err(Error::invariant(
                "emission table shape",
                format!("expected {} entries, got {}", transitions.len(), emissions.len()),
            ));
        }
        if let Some((i, &t)) = transitions.iter().enumerate().find(|(_, &t)| t as usize >= n) {
            return Err(Error::invariant(
                "transition target in range",
                format!("group {} state {} targets state {t}, only {n} states", i / n, i % n),
            ));
        }
        for g in 0..groups.len() {
            if transitions[g * n + invalid as usize] != invalid {
                return Err(Error::invariant(
                    "invalid state is absorbing",
                    format!("group {g} leaves the invalid state"),
                ));
            }
        }
        let mut accept = vec![false; n];
        for &s in accepting {
            if s as usize >= n {
                return Err(Error::invariant(
                    "valid state index",
                    format!("accepting state {s} out of range"),
                ));
            }
            accept[s as usize] = true;
        }

        let mut bytes = Vec::new();
        let mut owners = Vec::new();
        for (g, group) in groups.iter().enumerate() {
            for &b in &group.bytes {
                if bytes.contains(&b) {
                    return Err(Error::invariant(
                        "distinct lookup bytes",
                        format!("byte 0x{b:02X} belongs to more than one group"),
                    ));
                }
                bytes.push(b);
                owners.push(g as GroupId);
            }
        }
        let matcher = SymbolMatcher::new(&bytes, &owners, catch_all)?;

        Ok(DfaSpec {
            state_names,
            start,
            accepting: accept,
            invalid,
            groups,
            catch_all,
            transitions,
            emissions,
            matcher,
        })
    }

    #[inline]
    pub fn state_count(&self) -> usize {
        self.state_names.len()
    }

    #[inline]
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn start_state(&self) -> StateId {
        self.start
    }

    pub fn invalid_state(&self) -> StateId {
        self.invalid
    }

    pub fn is_accepting(&self, state: StateId) -> bool {
        self.accepting[state as usize]
    }

    pub fn accepting_states(&self) -> Vec<StateId> {
        (0..self.state_count())
            .filter(|&s| self.accepting[s])
            .map(|s| s as StateId)
            .collect()
    }

    pub fn state_name(&self, state: StateId) -> &str {
        &self.state_names[state as usize]
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn state_by_name(&self, name: &str) -> Option<StateId> {
        self.state_names
            .iter()
            .position(|s| s == name)
            .map(|i| i as StateId)
    }

    pub fn groups(&self) -> &[SymbolGroup] {
        &self.groups
    }

    pub fn catch_all_group(&self) -> GroupId {
        self.catch_all
    }

    pub fn matcher(&self) -> &SymbolMatcher {
        &self.matcher
    }

    /// Successor states of every state for one symbol group.
    #[inline]
    pub fn row(&self, group: GroupId) -> &[StateId] {
        let n = self.state_count();
        let start = group as usize * n;
        &self.transitions[start..start + n]
    }

    #[inline]
    pub fn emission_row(&self, group: GroupId) -> &[EmissionAction] {
        let n = self.state_count();
        let start = group as usize * n;
        &self.emissions[start..start + n]
    }

    #[inline]
    pub fn transition(&self, state: StateId, group: GroupId) -> StateId {
        self.transitions[group as usize * self.state_count() + state as usize]
    }

    #[inline]
    pub fn emission(&self, state: StateId, group: GroupId) -> EmissionAction {
        self.emissions[group as usize * self.state_count() + state as usize]
    }

    #[inline]
    pub fn group_of(&self, symbol: u8) -> GroupId {
        self.matcher.match_symbol(symbol)
    }

    /// Serializes to the JSON document accepted by [`load_spec`].
    pub fn to_json(&self) -> String {
        let n = self.state_count();
        let name = |s: StateId| serde_json::Value::String(self.state_names[s as usize].clone());
        let groups: Vec<serde_json::Value> = self
            .groups
            .iter()
            .map(|g| {
                serde_json::json!({
                    "bytes": g.bytes.iter().map(|&b| serde_json::Value::from(b)).collect::<Vec<_>>(),
                    "catch_all": g.catch_all,
                })
            })
            .collect();
        let transitions: Vec<Vec<serde_json::Value>> = self
            .transitions
            .chunks(n)
            .map(|row| row.iter().map(|&s| name(s)).collect())
            .collect();
        let emissions: Vec<Vec<serde_json::Value>> = self
            .emissions
            .chunks(n)
            .map(|row| {
                row.iter()
                    .map(|e| {
                        serde_json::json!({
                            "record": e.is_record_delimiter(),
                            "field": e.is_field_delimiter(),
                            "control": e.is_control(),
                        })
                    })
                    .collect()
            })
            .collect();
        let doc = serde_json::json!({
            "states": self.state_names,
            "start": name(self.start),
            "accepting": self.accepting_states().into_iter().map(name).collect::<Vec<_>>(),
            "invalid": name(self.invalid),
            "groups": groups,
            "transitions": transitions,
            "emissions": emissions,
        });
        serde_json::to_string_pretty(&doc).expect("json value serializes")
    }
}

/// State indices of the CSV dialect.
pub mod csv_states {
    use super::StateId;
    /// End of record.
    pub const EOR: StateId = 0;
    /// Inside an enclosed (quoted) field.
    pub const ENC: StateId = 1;
    /// Inside an unquoted field.
    pub const FLD: StateId = 2;
    /// End of field.
    pub const EOF: StateId = 3;
    /// Quote seen inside an enclosed field.
    pub const ESC: StateId = 4;
    /// Invalid input.
    pub const INV: StateId = 5;
}

/// The RFC 4180 style dialect with configurable delimiter and quote bytes.
///
/// Groups: record delimiter 0, quote 1, field delimiter 2, catch-all 3.
pub fn build_csv_dialect(field_delim: u8, quote: u8, record_delim: u8) -> Result<DfaSpec> {
    use csv_states::*;
    if field_delim == quote || field_delim == record_delim || quote == record_delim {
        return Err(Error::Config(format!(
            "dialect bytes must be distinct: field 0x{field_delim:02X}, quote 0x{quote:02X}, record 0x{record_delim:02X}"
        )));
    }
    let names = ["EOR", "ENC", "FLD", "EOF", "ESC", "INV"];
    #[rustfmt::skip]
    let transitions = vec![
        // EOR  ENC  FLD  EOF  ESC  INV
        EOR, ENC, EOR, EOR, EOR, INV, // record delimiter
        ENC, ESC, INV, ENC, ENC, INV, // quote
        EOF, ENC, EOF, EOF, EOF, INV, // field delimiter
        FLD, ENC, FLD, FLD, INV, INV, // catch-all
    ];
    let rec = EmissionAction::RECORD_DELIMITER;
    let fld = EmissionAction::FIELD_DELIMITER;
    let ctl = EmissionAction::CONTROL_ONLY;
    let dat = EmissionAction::DATA;
    #[rustfmt::skip]
    let emissions = vec![
        rec, dat, rec, rec, rec, rec,
        ctl, ctl, ctl, ctl, dat, ctl,
        fld, dat, fld, fld, fld, fld,
        dat, dat, dat, dat, dat, dat,
    ];
    DfaSpec::new(
        names.iter().map(|s| s.to_string()).collect(),
        EOR,
        &[EOR, FLD, EOF, ESC],
        INV,
        vec![
            SymbolGroup::bytes(&[record_delim]),
            SymbolGroup::bytes(&[quote]),
            SymbolGroup::bytes(&[field_delim]),
            SymbolGroup::catch_all(),
        ],
        transitions,
        emissions,
    )
}

/// The default `,` `"` `\n` dialect.
pub fn rfc4180() -> DfaSpec {
    build_csv_dialect(b',', b'"', b'\n').expect("distinct dialect bytes")
}

/// Names accepted by [`builtin_dialect`].
pub const BUILTIN_DIALECTS: &[&str] = &["rfc4180", "csv_comments"];

/// A dialect shipped with the library.
pub fn builtin_dialect(name: &str) -> Option<DfaSpec> {
    let doc = match name {
        "rfc4180" => include_str!("../dialects/rfc4180.json"),
        "csv_comments" => include_str!("../dialects/csv_comments.json"),
        _ => return None,
    };
    Some(load_spec(doc).expect("builtin dialects are valid"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    states: Vec<String>,
    start: String,
    #[serde(default)]
    accepting: Vec<String>,
    invalid: String,
    groups: Vec<GroupDoc>,
    transitions: Vec<Vec<String>>,
    emissions: Vec<Vec<EmissionDoc>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupDoc {
    #[serde(default)]
    bytes: Vec<ByteDoc>,
    #[serde(default)]
    catch_all: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ByteDoc {
    Int(u64),
    Str(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmissionDoc {
    #[serde(default)]
    record: bool,
    #[serde(default)]
    field: bool,
    #[serde(default)]
    control: bool,
}

/// Parses a DFA spec document and validates it.
pub fn load_spec(document: &str) -> Result<DfaSpec> {
    let doc: SpecDoc = serde_json::from_str(document).map_err(|e| Error::SpecParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.states.len() > MAX_STATES {
        return Err(Error::invariant("state_count <= 256", format!("{} states", doc.states.len())));
    }
    let state = |name: &str| -> Result<StateId> {
        doc.states
            .iter()
            .position(|s| s == name)
            .map(|i| i as StateId)
            .ok_or_else(|| {
                Error::invariant("valid state index", format!("unknown state name {name:?}"))
            })
    };
    for (i, s) in doc.states.iter().enumerate() {
        if doc.states[..i].contains(s) {
            return Err(Error::invariant("distinct state names", format!("{s:?} listed twice")));
        }
    }
    let start = state(&doc.start)?;
    let invalid = state(&doc.invalid)?;
    let accepting = doc
        .accepting
        .iter()
        .map(|s| state(s))
        .collect::<Result<Vec<_>>>()?;
    let mut groups = Vec::with_capacity(doc.groups.len());
    for g in &doc.groups {
        let bytes = g
            .bytes
            .iter()
            .map(|b| match b {
                ByteDoc::Int(v) if *v <= 255 => Ok(*v as u8),
                ByteDoc::Int(v) => Err(Error::invariant("byte value 0..=255", format!("{v}"))),
                ByteDoc::Str(s) => {
                    let mut chars = s.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) if (c as u32) <= 255 => Ok(c as u32 as u8),
                        _ => Err(Error::invariant(
                            "byte value 0..=255",
                            format!("{s:?} is not a single-byte character"),
                        )),
                    }
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        groups.push(SymbolGroup {
            bytes,
            catch_all: g.catch_all,
        });
    }
    let n = doc.states.len();
    if doc.transitions.len() != groups.len() || doc.transitions.iter().any(|r| r.len() != n) {
        return Err(Error::invariant(
            "transition table shape",
            format!("expected {} rows of {n} state names", groups.len()),
        ));
    }
    if doc.emissions.len() != groups.len() || doc.emissions.iter().any(|r| r.len() != n) {
        return Err(Error::invariant(
            "emission table shape",
            format!("expected {} rows of {n} emissions", groups.len()),
        ));
    }
    let mut transitions = Vec::with_capacity(n * groups.len());
    for row in &doc.transitions {
        for s in row {
            match state(s) {
                Ok(id) => transitions.push(id),
                Err(_) => {
                    return Err(Error::invariant(
                        "transition target in range",
                        format!("unknown target state {s:?}"),
                    ))
                }
            }
        }
    }
    let emissions = doc
        .emissions
        .iter()
        .flatten()
        .map(|e| EmissionAction::new(e.record, e.field, e.control))
        .collect::<Result<Vec<_>>>()?;
    DfaSpec::new(
        doc.states,
        start,
        &accepting,
        invalid,
        groups,
        transitions,
        emissions,
    )
}
