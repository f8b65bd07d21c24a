//! Binary columnar container and canonical CSV output.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PPRW" u16 version u32 header_len header_json
//! per column: u64 validity_len [u64 offsets_len] u64 data_len validity [offsets] data
//! ```
//!
//! The offsets length is only present for variable-width columns.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::typeconv::{csv_quote, LogicalType, TypedColumn};

pub const MAGIC: &[u8; 4] = b"PPRW";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: LogicalType,
    pub nullable: bool,
}

/// Named typed columns of equal length.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub fields: Vec<Field>,
    pub columns: Vec<TypedColumn>,
    pub rows: usize,
}

#[derive(Serialize, Deserialize)]
struct HeaderColumn {
    name: String,
    #[serde(rename = "type")]
    ty: LogicalType,
    nullable: bool,
    null_count: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    rows: u64,
    columns: Vec<HeaderColumn>,
}

impl Table {
    pub fn new(fields: Vec<Field>, columns: Vec<TypedColumn>) -> Result<Self> {
        if fields.len() != columns.len() {
            return Err(Error::Container(format!(
                "{} fields for {} columns",
                fields.len(),
                columns.len()
            )));
        }
        let rows = columns.first().map_or(0, |c| c.len);
        for (f, c) in fields.iter().zip(&columns) {
            if c.len != rows || c.ty != f.ty {
                return Err(Error::Container(format!(
                    "column {:?} has {} rows of {}, expected {rows} of {}",
                    f.name, c.len, c.ty, f.ty
                )));
            }
        }
        Ok(Table {
            fields,
            columns,
            rows,
        })
    }

    /// An empty table with the given fields.
    pub fn empty(fields: Vec<Field>) -> Self {
        let columns = fields.iter().map(|f| TypedColumn::empty(f.ty)).collect();
        Table {
            fields,
            columns,
            rows: 0,
        }
    }

    /// Appends the rows of a table with the same fields.
    pub fn append(&mut self, other: &Table) -> Result<()> {
        if self.fields != other.fields {
            return Err(Error::Container("appending a table with different fields".into()));
        }
        for (mine, theirs) in self.columns.iter_mut().zip(&other.columns) {
            mine.append(theirs)?;
        }
        self.rows += other.rows;
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> io::Result<()> {
        let header = Header {
            rows: self.rows as u64,
            columns: self
                .fields
                .iter()
                .zip(&self.columns)
                .map(|(f, c)| HeaderColumn {
                    name: f.name.clone(),
                    ty: f.ty,
                    nullable: f.nullable,
                    null_count: c.null_count,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        for c in &self.columns {
            out.write_all(&(c.validity.len() as u64).to_le_bytes())?;
            if let Some(offs) = &c.offsets {
                out.write_all(&(offs.len() as u64 * 4).to_le_bytes())?;
            }
            out.write_all(&(c.data.len() as u64).to_le_bytes())?;
            out.write_all(&c.validity)?;
            if let Some(offs) = &c.offsets {
                let bytes: Vec<u8> = offs.iter().flat_map(|o| o.to_le_bytes()).collect();
                out.write_all(&bytes)?;
            }
            out.write_all(&c.data)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Container(format!("header: {e}")))?;
        let rows = header.rows as usize;
        let mut fields = Vec::new();
        let mut columns = Vec::new();
        for h in header.columns {
            let validity_len = r.u64()? as usize;
            let offsets_len = match h.ty.width() {
                None => Some(r.u64()? as usize),
                Some(_) => None,
            };
            let data_len = r.u64()? as usize;
            let validity = r.take(validity_len)?.to_vec();
            let offsets = match offsets_len {
                Some(n) => Some(
                    r.take(n)?
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                None => None,
            };
            let column = TypedColumn {
                ty: h.ty,
                len: rows,
                null_count: h.null_count,
                validity,
                offsets,
                data: r.take(data_len)?.to_vec(),
            };
            column
                .check()
                .map_err(|e| Error::Container(format!("column {:?}: {e}", h.name)))?;
            fields.push(Field {
                name: h.name,
                ty: h.ty,
                nullable: h.nullable,
            });
            columns.push(column);
        }
        if r.at != bytes.len() {
            return Err(Error::Container(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Table::new(fields, columns).map(|mut t| {
            t.rows = rows;
            t
        })
    }

    /// Canonical CSV: nulls are empty, empty strings are `""`, text is
    /// quoted only when needed, records end with `\n`.
    pub fn write_csv(&self, out: &mut impl Write, header: bool) -> io::Result<()> {
        let mut line = Vec::new();
        if header {
            for (j, f) in self.fields.iter().enumerate() {
                if j > 0 {
                    line.push(b',');
                }
                csv_quote(f.name.as_bytes(), &mut line);
            }
            line.push(b'\n');
        }
        for i in 0..self.rows {
            for (j, c) in self.columns.iter().enumerate() {
                if j > 0 {
                    line.push(b',');
                }
                if !c.is_valid(i) {
                    continue;
                }
                match c.ty {
                    LogicalType::Utf8 => csv_quote(c.bytes(i), &mut line),
                    _ => {
                        let v = c.value(i).expect("valid slot");
                        line.extend_from_slice(v.to_string().as_bytes());
                    }
                }
            }
            line.push(b'\n');
            if line.len() >= 1 << 16 {
                out.write_all(&line)?;
                line.clear();
            }
        }
        out.write_all(&line)
    }

    pub fn to_csv(&self, header: bool) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_csv(&mut out, header).expect("writing to memory");
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Container(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
