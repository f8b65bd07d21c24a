//! Typed conversion of column symbol sequences.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunk::{resolve_start_states_with_end, simulate_all};
use crate::columnar::CssIndex;
use crate::dfa::{DfaSpec, EmissionAction, StateId, SymbolGroup};
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::scan::exclusive_scan;

pub const DEFAULT_BIG_FIELD_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogicalType {
    Bool,
    Int64,
    Float64,
    Date,
    Timestamp,
    #[serde(rename = "utf8", alias = "string", alias = "utf8-string")]
    Utf8,
}

impl LogicalType {
    pub fn name(self) -> &'static str {
        match self {
            LogicalType::Bool => "bool",
            LogicalType::Int64 => "int64",
            LogicalType::Float64 => "float64",
            LogicalType::Date => "date",
            LogicalType::Timestamp => "timestamp",
            LogicalType::Utf8 => "utf8",
        }
    }

    /// Bytes per value, `None` for variable width.
    pub fn width(self) -> Option<usize> {
        match self {
            LogicalType::Bool => Some(1),
            LogicalType::Int64 | LogicalType::Float64 | LogicalType::Timestamp => Some(8),
            LogicalType::Date => Some(4),
            LogicalType::Utf8 => None,
        }
    }
}

impl fmt::Display for LogicalType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LogicalType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Schema(format!("unknown type {s:?}")))
    }
}

/// Least upper bound of two inferred types; `None` is the neutral element.
/// Booleans do not parse as numbers, so they only join with themselves.
pub fn join_types(a: Option<LogicalType>, b: Option<LogicalType>) -> Option<LogicalType> {
    use LogicalType::*;
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some(x), Some(y)) if x == y => Some(x),
        (Some(Int64 | Float64), Some(Int64 | Float64)) => Some(Float64),
        _ => Some(Utf8),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bool(bool),
    Int64(i64),
    Float64(f64),
    /// Days since 1970-01-01.
    Date(i32),
    /// Microseconds since 1970-01-01T00:00:00.
    Timestamp(i64),
    Utf8(String),
}

impl Value {
    pub fn logical_type(&self) -> LogicalType {
        match self {
            Value::Bool(_) => LogicalType::Bool,
            Value::Int64(_) => LogicalType::Int64,
            Value::Float64(_) => LogicalType::Float64,
            Value::Date(_) => LogicalType::Date,
            Value::Timestamp(_) => LogicalType::Timestamp,
            Value::Utf8(_) => LogicalType::Utf8,
        }
    }

    fn slot(&self) -> Slot<'static> {
        match self {
            Value::Bool(b) => Slot::Fixed(*b as u64),
            Value::Int64(v) => Slot::Fixed(*v as u64),
            Value::Float64(v) => Slot::Fixed(v.to_bits()),
            Value::Date(v) => Slot::Fixed(*v as u32 as u64),
            Value::Timestamp(v) => Slot::Fixed(*v as u64),
            Value::Utf8(s) => Slot::Text(Cow::Owned(s.clone().into_bytes())),
        }
    }

    fn from_bits(ty: LogicalType, bits: &[u8]) -> Value {
        let mut word = [0u8; 8];
        word[..bits.len()].copy_from_slice(bits);
        let v = u64::from_le_bytes(word);
        match ty {
            LogicalType::Bool => Value::Bool(v != 0),
            LogicalType::Int64 => Value::Int64(v as i64),
            LogicalType::Float64 => Value::Float64(f64::from_bits(v)),
            LogicalType::Date => Value::Date(v as u32 as i32),
            LogicalType::Timestamp => Value::Timestamp(v as i64),
            LogicalType::Utf8 => Value::Utf8(String::from_utf8_lossy(bits).into_owned()),
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Bool(b) => (*b).into(),
            Value::Int64(v) => (*v).into(),
            Value::Float64(v) => (*v).into(),
            Value::Utf8(s) => s.clone().into(),
            other => other.to_string().into(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int64(v) => write!(f, "{v}"),
            Value::Float64(v) => write!(f, "{v:?}"),
            Value::Date(d) => {
                let (y, m, day) = civil_from_days(*d as i64);
                write!(f, "{y:04}-{m:02}-{day:02}")
            }
            Value::Timestamp(us) => {
                let days = us.div_euclid(86_400_000_000);
                let rem = us.rem_euclid(86_400_000_000);
                let (y, m, d) = civil_from_days(days);
                let secs = rem / 1_000_000;
                let frac = rem % 1_000_000;
                write!(
                    f,
                    "{y:04}-{m:02}-{d:02} {:02}:{:02}:{:02}",
                    secs / 3600,
                    secs / 60 % 60,
                    secs % 60
                )?;
                if frac != 0 {
                    write!(f, ".{frac:06}")?;
                }
                Ok(())
            }
            Value::Utf8(s) => f.write_str(s),
        }
    }
}

/// Days since 1970-01-01 of a proleptic Gregorian date.
pub fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let m = m as i64;
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

pub fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (yoe + era * 400 + (m <= 2) as i64, m, d)
}

fn days_in_month(y: i64, m: u32) -> u32 {
    match m {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        _ if (y % 4 == 0 && y % 100 != 0) || y % 400 == 0 => 29,
        _ => 28,
    }
}

fn digits(bytes: &[u8]) -> Option<u32> {
    if bytes.is_empty() || !bytes.iter().all(u8::is_ascii_digit) {
        return None;
    }
    Some(bytes.iter().fold(0u32, |acc, &b| acc * 10 + (b - b'0') as u32))
}

fn parse_date(b: &[u8]) -> Option<i64> {
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return None;
    }
    let y = digits(&b[..4])? as i64;
    let m = digits(&b[5..7])?;
    let d = digits(&b[8..10])?;
    if !(1..=12).contains(&m) || d == 0 || d > days_in_month(y, m) {
        return None;
    }
    Some(days_from_civil(y, m, d))
}

fn parse_timestamp(b: &[u8]) -> Option<i64> {
    if b.len() < 19 || !matches!(b[10], b' ' | b'T') || b[13] != b':' || b[16] != b':' {
        return None;
    }
    let days = parse_date(&b[..10])?;
    let h = digits(&b[11..13])? as i64;
    let mi = digits(&b[14..16])? as i64;
    let s = digits(&b[17..19])? as i64;
    if h > 23 || mi > 59 || s > 59 {
        return None;
    }
    let frac = match &b[19..] {
        [] => 0,
        [b'.', f @ ..] if (1..=6).contains(&f.len()) => {
            digits(f)? as i64 * 10i64.pow(6 - f.len() as u32)
        }
        _ => return None,
    };
    Some(((days * 24 + h) * 60 + mi) * 60_000_000 + s * 1_000_000 + frac)
}

/// Shape of a numeric literal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumberShape {
    /// Optional sign and decimal digits.
    Integer,
    /// Decimal with optional fraction and exponent.
    Decimal,
    Invalid,
}

/// Sequential check of the numeric grammar.
pub fn number_shape(b: &[u8]) -> NumberShape {
    let mut i = 0;
    if matches!(b.first(), Some(b'+' | b'-')) {
        i = 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let int_digits = i - int_start;
    if i == b.len() {
        return if int_digits > 0 { NumberShape::Integer } else { NumberShape::Invalid };
    }
    let mut frac_digits = 0;
    if b[i] == b'.' {
        i += 1;
        let s = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        frac_digits = i - s;
    }
    if int_digits + frac_digits == 0 {
        return NumberShape::Invalid;
    }
    if i < b.len() && matches!(b[i], b'e' | b'E') {
        i += 1;
        if matches!(b.get(i), Some(b'+' | b'-')) {
            i += 1;
        }
        let s = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == s {
            return NumberShape::Invalid;
        }
    }
    if i == b.len() {
        NumberShape::Decimal
    } else {
        NumberShape::Invalid
    }
}

mod num_states {
    pub const START: u8 = 0;
    pub const SIGN: u8 = 1;
    pub const INT: u8 = 2;
    pub const LEAD_DOT: u8 = 3;
    pub const DOT: u8 = 4;
    pub const FRAC: u8 = 5;
    pub const E: u8 = 6;
    pub const E_SIGN: u8 = 7;
    pub const EXP: u8 = 8;
    pub const INV: u8 = 9;
}

/// The numeric grammar as a DFA, for chunk-parallel validation of huge
/// fields.
pub fn number_dfa() -> &'static DfaSpec {
    static SPEC: OnceLock<DfaSpec> = OnceLock::new();
    SPEC.get_or_init(|| {
        use num_states::*;
        let names = ["START", "SIGN", "INT", "LEAD_DOT", "DOT", "FRAC", "E", "E_SIGN", "EXP", "INV"];
        let groups = vec![
            SymbolGroup::bytes(b"0123456789"),
            SymbolGroup::bytes(b"+-"),
            SymbolGroup::bytes(b"."),
            SymbolGroup::bytes(b"eE"),
            SymbolGroup::catch_all(),
        ];
        #[rustfmt::skip]
        let transitions = vec![
            // digit
            INT, INT, INT, FRAC, FRAC, FRAC, EXP, EXP, EXP, INV,
            // sign
            SIGN, INV, INV, INV, INV, INV, E_SIGN, INV, INV, INV,
            // dot
            LEAD_DOT, LEAD_DOT, DOT, INV, INV, INV, INV, INV, INV, INV,
            // exponent marker
            INV, INV, E, INV, E, E, INV, INV, INV, INV,
            // anything else
            INV, INV, INV, INV, INV, INV, INV, INV, INV, INV,
        ];
        DfaSpec::new(
            names.iter().map(|s| s.to_string()).collect(),
            START,
            &[INT, DOT, FRAC, EXP],
            INV,
            groups,
            transitions,
            vec![EmissionAction::DATA; 50],
        )
        .expect("numeric grammar is well formed")
    })
}

/// Numeric grammar check by chunk-parallel simulation.
pub fn number_shape_parallel(b: &[u8], chunk_size: usize, workers: usize) -> NumberShape {
    use num_states::*;
    let spec = number_dfa();
    let stvs = simulate_all(b, spec, Encoding::Ascii, chunk_size);
    let (_, end): (Vec<StateId>, StateId) =
        resolve_start_states_with_end(&stvs, spec.state_count(), START, workers);
    match end {
        INT => NumberShape::Integer,
        DOT | FRAC | EXP => NumberShape::Decimal,
        _ => NumberShape::Invalid,
    }
}

fn bool_literal(b: &[u8]) -> Option<bool> {
    if b.eq_ignore_ascii_case(b"true") || b == b"1" {
        Some(true)
    } else if b.eq_ignore_ascii_case(b"false") || b == b"0" {
        Some(false)
    } else {
        None
    }
}

fn int_from(b: &[u8], shape: NumberShape) -> Option<i64> {
    if shape != NumberShape::Integer {
        return None;
    }
    std::str::from_utf8(b).ok()?.parse().ok()
}

fn float_from(b: &[u8], shape: NumberShape) -> Option<f64> {
    if shape == NumberShape::Invalid {
        return None;
    }
    let v: f64 = std::str::from_utf8(b).ok()?.parse().ok()?;
    v.is_finite().then_some(v)
}

/// Parses UTF-8 field text as `ty`.
pub fn parse_scalar(bytes: &[u8], ty: LogicalType) -> Option<Value> {
    Some(match ty {
        LogicalType::Bool => Value::Bool(bool_literal(bytes)?),
        LogicalType::Int64 => Value::Int64(int_from(bytes, number_shape(bytes))?),
        LogicalType::Float64 => Value::Float64(float_from(bytes, number_shape(bytes))?),
        LogicalType::Date => Value::Date(i32::try_from(parse_date(bytes)?).ok()?),
        LogicalType::Timestamp => Value::Timestamp(parse_timestamp(bytes)?),
        LogicalType::Utf8 => Value::Utf8(std::str::from_utf8(bytes).ok()?.to_owned()),
    })
}

fn parse_bits(bytes: &[u8], ty: LogicalType, shape: impl FnOnce(&[u8]) -> NumberShape) -> Option<u64> {
    Some(match ty {
        LogicalType::Bool => bool_literal(bytes)? as u64,
        LogicalType::Int64 => int_from(bytes, shape(bytes))? as u64,
        LogicalType::Float64 => float_from(bytes, shape(bytes))?.to_bits(),
        LogicalType::Date => i32::try_from(parse_date(bytes)?).ok()? as u32 as u64,
        LogicalType::Timestamp => parse_timestamp(bytes)? as u64,
        LogicalType::Utf8 => unreachable!("text is not fixed width"),
    })
}

/// Narrowest type a single field parses as; `None` for neutral fields.
pub fn infer_field(bytes: &[u8]) -> Option<LogicalType> {
    if bytes.is_empty() {
        return None;
    }
    if bytes.eq_ignore_ascii_case(b"true") || bytes.eq_ignore_ascii_case(b"false") {
        return Some(LogicalType::Bool);
    }
    let shape = number_shape(bytes);
    if int_from(bytes, shape).is_some() {
        Some(LogicalType::Int64)
    } else if float_from(bytes, shape).is_some() {
        Some(LogicalType::Float64)
    } else {
        Some(LogicalType::Utf8)
    }
}

fn default_nullable() -> bool {
    true
}

fn default_null_literals() -> Vec<String> {
    vec![String::new()]
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawColumnSchema {
    name: String,
    #[serde(rename = "type")]
    ty: LogicalType,
    #[serde(default = "default_nullable")]
    nullable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    default: Option<serde_json::Value>,
    #[serde(default = "default_null_literals")]
    null_literals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawColumnSchema", into = "RawColumnSchema")]
pub struct ColumnSchema {
    pub name: String,
    pub ty: LogicalType,
    pub nullable: bool,
    pub default: Option<Value>,
    pub null_literals: Vec<String>,
}

impl ColumnSchema {
    pub fn new(name: impl Into<String>, ty: LogicalType) -> Self {
        ColumnSchema {
            name: name.into(),
            ty,
            nullable: true,
            default: None,
            null_literals: default_null_literals(),
        }
    }

    pub fn with_default(mut self, default: Value) -> Result<Self> {
        if default.logical_type() != self.ty {
            return Err(Error::Schema(format!(
                "default for column {:?} is {}, expected {}",
                self.name,
                default.logical_type(),
                self.ty
            )));
        }
        self.default = Some(default);
        Ok(self)
    }

    pub fn nullable(mut self, nullable: bool) -> Self {
        self.nullable = nullable;
        self
    }

    pub fn null_literals(mut self, literals: Vec<String>) -> Self {
        self.null_literals = literals;
        self
    }

    fn is_null_literal(&self, text: &[u8]) -> bool {
        self.null_literals.iter().any(|l| l.as_bytes() == text)
    }
}

impl TryFrom<RawColumnSchema> for ColumnSchema {
    type Error = Error;

    fn try_from(raw: RawColumnSchema) -> Result<Self> {
        let schema = ColumnSchema::new(raw.name, raw.ty)
            .nullable(raw.nullable)
            .null_literals(raw.null_literals);
        let Some(default) = raw.default else {
            return Ok(schema);
        };
        let value = match (&default, raw.ty) {
            (serde_json::Value::Bool(b), LogicalType::Bool) => Some(Value::Bool(*b)),
            (serde_json::Value::Number(n), LogicalType::Int64) => n.as_i64().map(Value::Int64),
            (serde_json::Value::Number(n), LogicalType::Float64) => n.as_f64().map(Value::Float64),
            (serde_json::Value::String(s), ty) => parse_scalar(s.as_bytes(), ty),
            _ => None,
        };
        let value = value.ok_or_else(|| {
            Error::Schema(format!(
                "default {default} of column {:?} is not a valid {}",
                schema.name, schema.ty
            ))
        })?;
        schema.with_default(value)
    }
}

impl From<ColumnSchema> for RawColumnSchema {
    fn from(s: ColumnSchema) -> Self {
        RawColumnSchema {
            name: s.name,
            ty: s.ty,
            nullable: s.nullable,
            default: s.default.map(|v| v.to_json()),
            null_literals: s.null_literals,
        }
    }
}

/// Parses a schema file: a JSON array of column descriptions.
pub fn parse_schema(json: &str) -> Result<Vec<ColumnSchema>> {
    let schema: Vec<ColumnSchema> =
        serde_json::from_str(json).map_err(|e| Error::Schema(e.to_string()))?;
    Ok(schema)
}

pub fn schema_to_json(schema: &[ColumnSchema]) -> String {
    serde_json::to_string_pretty(schema).expect("schema serializes")
}

/// A typed column: validity bitmap (LSB first), values, and for text a
/// 32-bit offsets array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypedColumn {
    pub ty: LogicalType,
    pub len: usize,
    pub null_count: u64,
    pub validity: Vec<u8>,
    pub offsets: Option<Vec<u32>>,
    pub data: Vec<u8>,
}

impl TypedColumn {
    pub fn empty(ty: LogicalType) -> Self {
        ColumnBuilder::new(ty).finish()
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.validity[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn value(&self, i: usize) -> Option<Value> {
        if !self.is_valid(i) {
            return None;
        }
        Some(match (&self.offsets, self.ty.width()) {
            (Some(offs), _) => Value::Utf8(
                String::from_utf8_lossy(&self.data[offs[i] as usize..offs[i + 1] as usize])
                    .into_owned(),
            ),
            (None, Some(w)) => Value::from_bits(self.ty, &self.data[i * w..(i + 1) * w]),
            (None, None) => unreachable!(),
        })
    }

    /// Raw value bytes of row `i`.
    pub fn bytes(&self, i: usize) -> &[u8] {
        match (&self.offsets, self.ty.width()) {
            (Some(offs), _) => &self.data[offs[i] as usize..offs[i + 1] as usize],
            (None, Some(w)) => &self.data[i * w..(i + 1) * w],
            (None, None) => unreachable!(),
        }
    }

    /// Checks the layout invariants.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invariant("typed column layout", m));
        if self.validity.len() != self.len.div_ceil(8) {
            return bad(format!("validity has {} bytes for {} rows", self.validity.len(), self.len));
        }
        let valid: u64 = self.validity.iter().map(|b| b.count_ones() as u64).sum();
        if valid + self.null_count != self.len as u64 {
            return bad(format!("{valid} valid + {} null != {}", self.null_count, self.len));
        }
        match (&self.offsets, self.ty.width()) {
            (Some(offs), None) => {
                if offs.len() != self.len + 1
                    || offs[0] != 0
                    || offs.windows(2).any(|w| w[0] > w[1])
                    || offs[self.len] as usize != self.data.len()
                {
                    return bad("offsets array malformed".into());
                }
            }
            (None, Some(w)) => {
                if self.data.len() != self.len * w {
                    return bad(format!("{} data bytes for {} rows", self.data.len(), self.len));
                }
            }
            _ => return bad("offsets presence does not match type".into()),
        }
        for i in 0..self.len {
            if !self.is_valid(i) && self.bytes(i).iter().any(|&b| b != 0) {
                return bad(format!("null slot {i} is not zeroed"));
            }
        }
        Ok(())
    }

    /// Appends the rows of `other`.
    pub fn append(&mut self, other: &TypedColumn) -> Result<()> {
        if other.ty != self.ty {
            return Err(Error::Schema(format!("cannot append {} to {}", other.ty, self.ty)));
        }
        let shift = self.len % 8;
        if shift == 0 {
            self.validity.extend_from_slice(&other.validity);
        } else {
            for i in 0..other.len {
                let pos = self.len + i;
                if pos % 8 == 0 {
                    self.validity.push(0);
                }
                if other.is_valid(i) {
                    self.validity[pos / 8] |= 1 << (pos % 8);
                }
            }
        }
        if let (Some(mine), Some(theirs)) = (&mut self.offsets, &other.offsets) {
            let base = *mine.last().expect("offsets non-empty") as u64;
            if base + other.data.len() as u64 > u32::MAX as u64 {
                return Err(Error::Container("text column exceeds 4 GiB".into()));
            }
            mine.extend(theirs[1..].iter().map(|&o| o + base as u32));
        }
        self.data.extend_from_slice(&other.data);
        self.len += other.len;
        self.null_count += other.null_count;
        Ok(())
    }
}

/// Row-at-a-time construction of a [`TypedColumn`].
#[derive(Debug, Clone)]
pub struct ColumnBuilder {
    col: TypedColumn,
}

impl ColumnBuilder {
    pub fn new(ty: LogicalType) -> Self {
        ColumnBuilder {
            col: TypedColumn {
                ty,
                len: 0,
                null_count: 0,
                validity: Vec::new(),
                offsets: ty.width().is_none().then(|| vec![0]),
                data: Vec::new(),
            },
        }
    }

    fn push_slot(&mut self, slot: &Slot<'_>) -> Result<()> {
        let c = &mut self.col;
        if c.len % 8 == 0 {
            c.validity.push(0);
        }
        match slot {
            Slot::Null => c.null_count += 1,
            _ => c.validity[c.len / 8] |= 1 << (c.len % 8),
        }
        match (c.ty.width(), slot) {
            (Some(w), Slot::Fixed(bits)) => c.data.extend_from_slice(&bits.to_le_bytes()[..w]),
            (Some(w), _) => c.data.extend(std::iter::repeat_n(0, w)),
            (None, slot) => {
                if let Slot::Text(t) = slot {
                    c.data.extend_from_slice(t);
                }
                let end = u32::try_from(c.data.len())
                    .map_err(|_| Error::Container("text column exceeds 4 GiB".into()))?;
                c.offsets.as_mut().expect("text column").push(end);
            }
        }
        c.len += 1;
        Ok(())
    }

    pub fn push_null(&mut self) {
        self.push_slot(&Slot::Null).expect("null fits");
    }

    pub fn push_value(&mut self, value: &Value) -> Result<()> {
        if value.logical_type() != self.col.ty {
            return Err(Error::Schema(format!(
                "{} value pushed to {} column",
                value.logical_type(),
                self.col.ty
            )));
        }
        self.push_slot(&value.slot())
    }

    /// Converts one field under `schema`'s policy and appends it. `None`
    /// means the record has no such field. Returns whether a permissive
    /// diagnostic was recorded.
    pub fn push_field(
        &mut self,
        field: Option<&[u8]>,
        schema: &ColumnSchema,
        ctx: &FieldContext,
        record: u64,
        column: usize,
    ) -> Result<bool> {
        let (slot, diag) = resolve(convert_field(field, schema, ctx.encoding), field, schema, ctx, record, column)?;
        self.push_slot(&slot)?;
        Ok(diag)
    }

    pub fn len(&self) -> usize {
        self.col.len
    }

    pub fn is_empty(&self) -> bool {
        self.col.len == 0
    }

    pub fn finish(self) -> TypedColumn {
        self.col
    }
}

/// A converted field before layout.
#[derive(Debug, Clone, PartialEq)]
enum Slot<'a> {
    Null,
    Fixed(u64),
    Text(Cow<'a, [u8]>),
}

impl Slot<'_> {
    fn text_len(&self) -> usize {
        match self {
            Slot::Text(t) => t.len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Failure {
    Missing,
    Malformed,
}

/// Conversion policy shared by every field of a run.
#[derive(Debug, Clone, Copy)]
pub struct FieldContext {
    pub encoding: Encoding,
    pub strict: bool,
}

fn fallback(schema: &ColumnSchema) -> Option<Slot<'static>> {
    match &schema.default {
        Some(v) => Some(v.slot()),
        None if schema.nullable => Some(Slot::Null),
        None => None,
    }
}

fn convert_text<'a>(
    text: Cow<'a, [u8]>,
    schema: &ColumnSchema,
    shape: impl FnOnce(&[u8]) -> NumberShape,
) -> std::result::Result<Slot<'a>, Failure> {
    if schema.is_null_literal(&text) {
        if let Some(slot) = fallback(schema) {
            return Ok(slot);
        }
    }
    match schema.ty {
        LogicalType::Utf8 => Ok(Slot::Text(text)),
        ty => parse_bits(&text, ty, shape).map(Slot::Fixed).ok_or(Failure::Malformed),
    }
}

fn convert_field<'a>(
    field: Option<&'a [u8]>,
    schema: &ColumnSchema,
    encoding: Encoding,
) -> std::result::Result<Slot<'a>, Failure> {
    match field {
        None => fallback(schema).ok_or(Failure::Missing),
        Some(raw) => convert_text(encoding.decode_to_utf8(raw), schema, number_shape),
    }
}

fn excerpt(field: Option<&[u8]>) -> String {
    match field {
        None => "<missing>".into(),
        Some(b) => String::from_utf8_lossy(&b[..b.len().min(32)]).into_owned(),
    }
}

fn resolve<'a>(
    outcome: std::result::Result<Slot<'a>, Failure>,
    field: Option<&[u8]>,
    schema: &ColumnSchema,
    ctx: &FieldContext,
    record: u64,
    column: usize,
) -> Result<(Slot<'a>, bool)> {
    match outcome {
        Ok(slot) => Ok((slot, false)),
        Err(_) if !ctx.strict => Ok((Slot::Null, true)),
        Err(_) => Err(Error::Conversion {
            record,
            column,
            ty: schema.ty.name(),
            excerpt: excerpt(field),
        }),
    }
}

/// Knobs for [`convert_column`].
#[derive(Debug, Clone, Copy)]
pub struct ConvertOptions {
    pub encoding: Encoding,
    pub strict: bool,
    pub big_field_threshold: usize,
    pub chunk_size: usize,
    pub workers: usize,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            encoding: Encoding::Utf8,
            strict: false,
            big_field_threshold: DEFAULT_BIG_FIELD_THRESHOLD,
            chunk_size: crate::chunk::DEFAULT_CHUNK_SIZE,
            workers: rayon::current_num_threads(),
        }
    }
}

/// Conversion output plus the number of permissive-mode diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Converted {
    pub column: TypedColumn,
    pub diagnostics: u64,
}

fn convert_big<'a>(
    raw: &'a [u8],
    schema: &ColumnSchema,
    opts: &ConvertOptions,
) -> std::result::Result<Slot<'a>, Failure> {
    match schema.ty {
        LogicalType::Utf8 | LogicalType::Int64 | LogicalType::Float64 => {
            let text = opts.encoding.decode_to_utf8(raw);
            let chunk = opts.chunk_size;
            let workers = opts.workers;
            convert_text(text, schema, |b| number_shape_parallel(b, chunk, workers))
        }
        // No literal of these types is anywhere near the threshold.
        _ => {
            let text = opts.encoding.decode_to_utf8(raw);
            if schema.is_null_literal(&text) {
                if let Some(slot) = fallback(schema) {
                    return Ok(slot);
                }
            }
            Err(Failure::Malformed)
        }
    }
}

/// Converts one column's fields to a typed array. `rows` holds the record
/// index of each entry, for error reporting.
///
/// Fields up to `big_field_threshold` bytes are converted independently in
/// parallel; longer ones are deferred and each handled with all workers.
pub fn convert_column(
    css: &[u8],
    index: &CssIndex,
    rows: &[u64],
    schema: &ColumnSchema,
    column: usize,
    opts: &ConvertOptions,
) -> Result<Converted> {
    let ctx = FieldContext {
        encoding: opts.encoding,
        strict: opts.strict,
    };
    let n = index.len();
    let mut outcomes: Vec<Option<std::result::Result<Slot<'_>, Failure>>> = (0..n)
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| {
            let field = index.field(css, i);
            match field {
                Some(f) if f.len() > opts.big_field_threshold => None,
                _ => Some(convert_field(field, schema, opts.encoding)),
            }
        })
        .collect();
    for (i, slot) in outcomes.iter_mut().enumerate() {
        if slot.is_none() {
            let raw = index.field(css, i).expect("deferred fields are present");
            *slot = Some(convert_big(raw, schema, opts));
        }
    }
    let mut slots = Vec::with_capacity(n);
    let mut diagnostics = 0;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome.expect("all fields converted");
        let (slot, diag) = resolve(outcome, index.field(css, i), schema, &ctx, rows[i], column)?;
        diagnostics += diag as u64;
        slots.push(slot);
    }
    let column = layout(schema.ty, &slots, opts)?;
    Ok(Converted { column, diagnostics })
}

fn layout(ty: LogicalType, slots: &[Slot<'_>], opts: &ConvertOptions) -> Result<TypedColumn> {
    let n = slots.len();
    let mut validity = vec![0u8; n.div_ceil(8)];
    validity
        .par_iter_mut()
        .zip(slots.par_chunks(8))
        .for_each(|(byte, group)| {
            for (j, s) in group.iter().enumerate() {
                if !matches!(s, Slot::Null) {
                    *byte |= 1 << j;
                }
            }
        });
    let null_count = slots.par_iter().filter(|s| matches!(s, Slot::Null)).count() as u64;
    let (offsets, data) = match ty.width() {
        Some(w) => {
            let mut data = vec![0u8; n * w];
            data.par_chunks_mut(w)
                .with_min_len(1024)
                .zip(slots.par_iter())
                .for_each(|(out, s)| {
                    if let Slot::Fixed(bits) = s {
                        out.copy_from_slice(&bits.to_le_bytes()[..w]);
                    }
                });
            (None, data)
        }
        None => {
            let lens: Vec<u64> = slots.par_iter().map(|s| s.text_len() as u64).collect();
            let starts = exclusive_scan(&lens, 0u64, |a, b| a + b, opts.workers);
            let total = starts.last().map_or(0, |s| s + lens[n - 1]);
            if total > u32::MAX as u64 {
                return Err(Error::Container("text column exceeds 4 GiB".into()));
            }
            let mut offsets: Vec<u32> = starts.iter().map(|&s| s as u32).collect();
            offsets.push(total as u32);
            let mut data = vec![0u8; total as usize];
            fill_text(&mut data, slots, &offsets, opts.big_field_threshold);
            (Some(offsets), data)
        }
    };
    Ok(TypedColumn {
        ty,
        len: n,
        null_count,
        validity,
        offsets,
        data,
    })
}

/// Copies text slots into their precomputed disjoint ranges.
fn fill_text(data: &mut [u8], slots: &[Slot<'_>], offsets: &[u32], big: usize) {
    const ROWS: usize = 1024;
    let mut pieces = Vec::with_capacity(slots.len().div_ceil(ROWS));
    let mut rest = data;
    for (b, rows) in slots.chunks(ROWS).enumerate() {
        let start = b * ROWS;
        let len = (offsets[start + rows.len()] - offsets[start]) as usize;
        let (head, tail) = rest.split_at_mut(len);
        pieces.push((head, rows));
        rest = tail;
    }
    pieces.into_par_iter().for_each(|(out, rows)| {
        let mut at = 0;
        for s in rows {
            if let Slot::Text(t) = s {
                let dst = &mut out[at..at + t.len()];
                if t.len() > big {
                    dst.par_chunks_mut(1 << 16)
                        .zip(t.par_chunks(1 << 16))
                        .for_each(|(d, s)| d.copy_from_slice(s));
                } else {
                    dst.copy_from_slice(t);
                }
                at += t.len();
            }
        }
    });
}

/// Joined type of a column's fields, `None` if every field is neutral.
pub fn infer_column(
    css: &[u8],
    index: &CssIndex,
    encoding: Encoding,
    null_literals: &[String],
) -> Option<LogicalType> {
    (0..index.len())
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| {
            let raw = index.field(css, i)?;
            let text = encoding.decode_to_utf8(raw);
            if null_literals.iter().any(|l| l.as_bytes() == &text[..]) {
                return None;
            }
            infer_field(&text)
        })
        .reduce(|| None, join_types)
}

/// Inferred type of a column; all-neutral columns are text.
pub fn infer_type(css: &[u8], index: &CssIndex, encoding: Encoding) -> LogicalType {
    infer_column(css, index, encoding, &default_null_literals()).unwrap_or(LogicalType::Utf8)
}

/// Quotes a text value for CSV output when needed.
pub fn csv_quote(text: &[u8], out: &mut Vec<u8>) {
    let needs = text.is_empty() || text.iter().any(|&b| matches!(b, b',' | b'"' | b'\n' | b'\r'));
    if !needs {
        out.extend_from_slice(text);
        return;
    }
    out.push(b'"');
    for &b in text {
        if b == b'"' {
            out.push(b'"');
        }
        out.push(b);
    }
    out.push(b'"');
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(n: usize) -> Vec<u64> {
        (0..n as u64).collect()
    }

    fn index_of(fields: &[&[u8]]) -> (Vec<u8>, CssIndex) {
        let mut css = Vec::new();
        let mut idx = CssIndex::default();
        for f in fields {
            idx.offsets.push(css.len() as u64);
            idx.lengths.push(f.len() as u64);
            idx.present.push(true);
            css.extend_from_slice(f);
        }
        (css, idx)
    }

    #[test]
    fn scalar_fixtures() {
        assert_eq!(parse_scalar(b"123", LogicalType::Int64), Some(Value::Int64(123)));
        assert_eq!(parse_scalar(b"-42", LogicalType::Int64), Some(Value::Int64(-42)));
        assert_eq!(parse_scalar(b"1e3", LogicalType::Float64), Some(Value::Float64(1000.0)));
        assert_eq!(parse_scalar(b"TRUE", LogicalType::Bool), Some(Value::Bool(true)));
        assert_eq!(parse_scalar(b"0", LogicalType::Bool), Some(Value::Bool(false)));
        for bad in [&b"12x"[..], b"", b"+", b"1e", b"inf", b"nan", b"1.2.3", b" 1", b"1e999"] {
            assert_eq!(parse_scalar(bad, LogicalType::Float64), None, "{bad:?}");
        }
        assert_eq!(parse_scalar(b"9223372036854775808", LogicalType::Int64), None);
        assert_eq!(parse_scalar(b"-9223372036854775808", LogicalType::Int64), Some(Value::Int64(i64::MIN)));
        assert_eq!(parse_scalar(b"2018-02-29", LogicalType::Date), None);
        assert_eq!(parse_scalar(b"2000-02-29", LogicalType::Date), Some(Value::Date(11016)));
        assert_eq!(parse_scalar(b"2018-01-31 23:59:60", LogicalType::Timestamp), None);
        assert_eq!(parse_scalar(b"2018-01-31T23:59:59.1234567", LogicalType::Timestamp), None);
    }

    /// Day count by walking whole years and months from the epoch.
    fn naive_days(y: i64, m: u32, d: u32) -> i64 {
        let leap = |y: i64| (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
        let mut days = 0i64;
        if y >= 1970 {
            for yy in 1970..y {
                days += if leap(yy) { 366 } else { 365 };
            }
        } else {
            for yy in y..1970 {
                days -= if leap(yy) { 366 } else { 365 };
            }
        }
        let months = [31, if leap(y) { 29 } else { 28 }, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
        days + months[..m as usize - 1].iter().sum::<i64>() + d as i64 - 1
    }

    #[test]
    fn timestamp_fixture() {
        let days = naive_days(2018, 1, 31);
        assert_eq!(days, 17562);
        let expect = days * 86_400_000_000 + (23 * 3600 + 59 * 60 + 59) * 1_000_000;
        assert_eq!(
            parse_scalar(b"2018-01-31 23:59:59", LogicalType::Timestamp),
            Some(Value::Timestamp(expect))
        );
        assert_eq!(expect / 1_000_000, 1_517_443_199);
        assert_eq!(
            parse_scalar(b"1969-12-31T23:59:59.5", LogicalType::Timestamp),
            Some(Value::Timestamp(-500_000))
        );
        assert_eq!(Value::Timestamp(-500_000).to_string(), "1969-12-31 23:59:59.500000");
    }

    proptest! {
        #[test]
        fn civil_roundtrip(y in 0i64..10_000, m in 1u32..=12, d in 1u32..=28) {
            let z = days_from_civil(y, m, d);
            prop_assert_eq!(z, naive_days(y, m, d));
            prop_assert_eq!(civil_from_days(z), (y, m, d));
        }

        #[test]
        fn number_grammars_agree(s in "[0-9+\\-.eEx]{0,12}", chunk in 1usize..8) {
            let b = s.as_bytes();
            prop_assert_eq!(number_shape(b), number_shape_parallel(b, chunk, 2));
            if number_shape(b) != NumberShape::Invalid {
                prop_assert!(s.parse::<f64>().is_ok());
            }
        }

        #[test]
        fn inference_is_a_fold(fields in prop::collection::vec("(true|FALSE|[0-9]{1,3}|[0-9]\\.[0-9]|x|)", 0..40)) {
            let refs: Vec<&[u8]> = fields.iter().map(|s| s.as_bytes()).collect();
            let (css, idx) = index_of(&refs);
            let fold = refs.iter().fold(None, |acc, f| join_types(acc, infer_field(f)));
            prop_assert_eq!(infer_column(&css, &idx, Encoding::Utf8, &[String::new()]), fold);
            let mut rev = refs.clone();
            rev.reverse();
            let (css, idx) = index_of(&rev);
            prop_assert_eq!(infer_column(&css, &idx, Encoding::Utf8, &[String::new()]), fold);
        }
    }

    #[test]
    fn join_is_associative_and_commutative() {
        use LogicalType::*;
        let all = [None, Some(Bool), Some(Int64), Some(Float64), Some(Date), Some(Timestamp), Some(Utf8)];
        for a in all {
            for b in all {
                assert_eq!(join_types(a, b), join_types(b, a));
                for c in all {
                    assert_eq!(join_types(join_types(a, b), c), join_types(a, join_types(b, c)));
                }
            }
        }
    }

    #[test]
    fn inference_fixtures() {
        let infer = |fields: &[&[u8]]| {
            let (css, idx) = index_of(fields);
            infer_type(&css, &idx, Encoding::Utf8)
        };
        assert_eq!(infer(&[b"1", b"2", b"3"]), LogicalType::Int64);
        assert_eq!(infer(&[b"1", b"2.5"]), LogicalType::Float64);
        assert_eq!(infer(&[b"1", b"x"]), LogicalType::Utf8);
        assert_eq!(infer(&[b"", b"7", b""]), LogicalType::Int64);
        assert_eq!(infer(&[b"", b""]), LogicalType::Utf8);
        assert_eq!(infer(&[b"true", b"False"]), LogicalType::Bool);
        assert_eq!(infer(&[b"true", b"1"]), LogicalType::Utf8);
    }

    #[test]
    fn defaults_and_nulls() {
        let (css, idx) = index_of(&[b"", b"5"]);
        let opts = ConvertOptions::default();
        let with_default = ColumnSchema::new("n", LogicalType::Int64).with_default(Value::Int64(0)).unwrap();
        let out = convert_column(&css, &idx, &rows(idx.len()), &with_default, 0, &opts).unwrap().column;
        assert_eq!((out.value(0), out.value(1)), (Some(Value::Int64(0)), Some(Value::Int64(5))));
        let nullable = ColumnSchema::new("n", LogicalType::Int64);
        let out = convert_column(&css, &idx, &rows(idx.len()), &nullable, 0, &opts).unwrap().column;
        assert_eq!((out.value(0), out.null_count), (None, 1));
        assert_eq!(&out.data[..8], &[0; 8]);
        out.check().unwrap();
        let strict = ConvertOptions { strict: true, ..opts };
        let err = convert_column(&css, &idx, &rows(idx.len()), &nullable.clone().nullable(false), 3, &strict).unwrap_err();
        assert!(matches!(err, Error::Conversion { record: 0, column: 3, .. }));
        let text = ColumnSchema::new("s", LogicalType::Utf8).nullable(false);
        let out = convert_column(&css, &idx, &rows(idx.len()), &text, 0, &strict).unwrap().column;
        assert_eq!(out.offsets, Some(vec![0, 0, 1]));
        assert_eq!(out.null_count, 0);
    }

    #[test]
    fn permissive_counts_diagnostics() {
        let (css, idx) = index_of(&[b"1", b"oops", b"3"]);
        let schema = ColumnSchema::new("n", LogicalType::Int64).nullable(false);
        let c = convert_column(&css, &idx, &rows(idx.len()), &schema, 0, &ConvertOptions::default()).unwrap();
        assert_eq!(c.diagnostics, 1);
        assert_eq!(c.column.value(1), None);
        let mut missing = idx.clone();
        missing.present[2] = false;
        let c = convert_column(&css, &missing, &rows(missing.len()), &schema, 0, &ConvertOptions::default()).unwrap();
        assert_eq!(c.diagnostics, 2);
    }

    #[test]
    fn paths_agree_around_threshold() {
        let threshold = 64;
        for ty in [LogicalType::Utf8, LogicalType::Int64, LogicalType::Float64, LogicalType::Bool, LogicalType::Date] {
            for len in [threshold - 1, threshold, threshold + 1] {
                let candidates = [
                    vec![b'7'; len],
                    { let mut v = vec![b'0'; len]; v[len / 2] = b'.'; v },
                    { let mut v = vec![b'1'; len]; v[len - 3] = b'e'; v },
                    { let mut v = vec![b'a'; len]; v[0] = b','; v },
                    { let mut v = vec![b'0'; len]; v[len / 3] = b'x'; v },
                ];
                for field in &candidates {
                    let (css, idx) = index_of(&[field, b"1"]);
                    let schema = ColumnSchema::new("c", ty);
                    let big = ConvertOptions { big_field_threshold: threshold, chunk_size: 7, workers: 4, ..Default::default() };
                    let small = ConvertOptions { big_field_threshold: usize::MAX, ..big };
                    let a = convert_column(&css, &idx, &rows(idx.len()), &schema, 0, &big).unwrap();
                    let b = convert_column(&css, &idx, &rows(idx.len()), &schema, 0, &small).unwrap();
                    assert_eq!(a, b, "{ty} len {len}");
                    let mut builder = ColumnBuilder::new(ty);
                    let ctx = FieldContext { encoding: Encoding::Utf8, strict: false };
                    for i in 0..idx.len() {
                        builder.push_field(idx.field(&css, i), &schema, &ctx, i as u64, 0).unwrap();
                    }
                    assert_eq!(builder.finish(), b.column);
                }
            }
        }
    }

    #[test]
    fn huge_text_field() {
        let field: Vec<u8> = (0..10 << 20).map(|i| b'a' + (i % 26) as u8).collect();
        let (css, idx) = index_of(&[&field, b"tail"]);
        let schema = ColumnSchema::new("s", LogicalType::Utf8);
        let opts = ConvertOptions::default();
        let big = convert_column(&css, &idx, &rows(idx.len()), &schema, 0, &opts).unwrap().column;
        let small = convert_column(&css, &idx, &rows(idx.len()), &schema, 0, &ConvertOptions { big_field_threshold: usize::MAX, ..opts }).unwrap().column;
        assert_eq!(big, small);
        assert_eq!(&big.data[..field.len()], &field[..]);
        big.check().unwrap();
    }

    #[test]
    fn utf16_text_is_decoded() {
        let enc = Encoding::Utf16Le;
        let raw = enc.encode_str("héllo");
        let (css, idx) = index_of(&[&raw]);
        let opts = ConvertOptions { encoding: enc, ..Default::default() };
        let out = convert_column(&css, &idx, &rows(idx.len()), &ColumnSchema::new("s", LogicalType::Utf8), 0, &opts).unwrap();
        assert_eq!(out.column.data, "héllo".as_bytes());
        let raw = enc.encode_str("42");
        let (css, idx) = index_of(&[&raw]);
        let out = convert_column(&css, &idx, &rows(idx.len()), &ColumnSchema::new("n", LogicalType::Int64), 0, &opts).unwrap();
        assert_eq!(out.column.value(0), Some(Value::Int64(42)));
    }

    #[test]
    fn append_shifts_validity_and_offsets() {
        let mut a = ColumnBuilder::new(LogicalType::Utf8);
        let mut b = ColumnBuilder::new(LogicalType::Utf8);
        let mut whole = ColumnBuilder::new(LogicalType::Utf8);
        for i in 0..21 {
            let target = if i < 5 { &mut a } else { &mut b };
            if i % 3 == 0 {
                target.push_null();
                whole.push_null();
            } else {
                let v = Value::Utf8(format!("v{i}"));
                target.push_value(&v).unwrap();
                whole.push_value(&v).unwrap();
            }
        }
        let mut a = a.finish();
        a.append(&b.finish()).unwrap();
        assert_eq!(a, whole.finish());
        a.check().unwrap();
    }

    #[test]
    fn schema_json() {
        let json = r#"[
            {"name": "id", "type": "int64", "nullable": false},
            {"name": "when", "type": "date", "default": "2020-01-02"},
            {"name": "label", "type": "string", "null_literals": ["NA"]}
        ]"#;
        let schema = parse_schema(json).unwrap();
        assert_eq!(schema[0].ty, LogicalType::Int64);
        assert!(!schema[0].nullable);
        assert_eq!(schema[1].default, Some(Value::Date(days_from_civil(2020, 1, 2) as i32)));
        assert_eq!(schema[2].ty, LogicalType::Utf8);
        assert_eq!(parse_schema(&schema_to_json(&schema)).unwrap(), schema);
        assert!(parse_schema(r#"[{"name": "x", "type": "int64", "default": "abc"}]"#).is_err());
        assert!(parse_schema(r#"[{"name": "x", "type": "decimal"}]"#).is_err());
    }
}
