//! Variable-length encodings: which bytes start a symbol, and how many
//! leading bytes of a chunk belong to a symbol started in an earlier chunk.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Encoding {
    /// Every byte is a symbol.
    #[default]
    Ascii,
    Utf8,
    Utf16Le,
    Utf16Be,
}

/// How a byte participates in symbol matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolByte {
    /// Trailing byte of a symbol that started earlier.
    Continuation,
    /// First byte of a symbol; `Some(b)` is matched against the symbol
    /// groups, `None` always falls into the catch-all group.
    Start(Option<u8>),
}

const LOW_SURROGATES: std::ops::RangeInclusive<u16> = 0xDC00..=0xDFFF;

impl Encoding {
    pub fn is_utf16(self) -> bool {
        matches!(self, Encoding::Utf16Le | Encoding::Utf16Be)
    }

    /// Chunk size actually used: UTF-16 chunks are rounded up to whole code
    /// units.
    pub fn chunk_size(self, requested: usize) -> usize {
        if self.is_utf16() {
            (requested + (requested & 1)).max(2)
        } else {
            requested
        }
    }

    #[inline]
    fn unit(self, chunk: &[u8], j: usize) -> Option<u16> {
        let hi_lo = chunk.get(j..j + 2)?;
        Some(match self {
            Encoding::Utf16Le => u16::from_le_bytes([hi_lo[0], hi_lo[1]]),
            _ => u16::from_be_bytes([hi_lo[0], hi_lo[1]]),
        })
    }

    /// Classifies byte `j` of a chunk that starts on a code-unit boundary.
    #[inline]
    pub fn classify(self, chunk: &[u8], j: usize) -> SymbolByte {
        let b = chunk[j];
        match self {
            Encoding::Ascii => SymbolByte::Start(Some(b)),
            Encoding::Utf8 => {
                if b & 0xC0 == 0x80 {
                    SymbolByte::Continuation
                } else {
                    SymbolByte::Start(Some(b))
                }
            }
            Encoding::Utf16Le | Encoding::Utf16Be => {
                if j & 1 == 1 {
                    return SymbolByte::Continuation;
                }
                match self.unit(chunk, j) {
                    Some(u) if LOW_SURROGATES.contains(&u) => SymbolByte::Continuation,
                    Some(u) if u < 0x100 => SymbolByte::Start(Some(u as u8)),
                    _ => SymbolByte::Start(None),
                }
            }
        }
    }

    /// Number of leading bytes of `chunk` that continue a symbol begun in
    /// a preceding chunk. At most 3 for well-formed UTF-8, 0 or 2 for UTF-16.
    pub fn continuation_prefix_len(self, chunk: &[u8]) -> usize {
        match self {
            Encoding::Ascii => 0,
            Encoding::Utf8 => chunk.iter().take_while(|&&b| b & 0xC0 == 0x80).count(),
            Encoding::Utf16Le | Encoding::Utf16Be => match self.unit(chunk, 0) {
                Some(u) if LOW_SURROGATES.contains(&u) => 2,
                _ => 0,
            },
        }
    }

    /// Encodes an ASCII delimiter byte as it appears in this encoding.
    pub fn encode_byte(self, b: u8) -> Vec<u8> {
        match self {
            Encoding::Ascii | Encoding::Utf8 => vec![b],
            Encoding::Utf16Le => vec![b, 0],
            Encoding::Utf16Be => vec![0, b],
        }
    }

    /// Decodes field bytes to UTF-8 for text columns.
    pub fn decode_to_utf8<'a>(self, bytes: &'a [u8]) -> std::borrow::Cow<'a, [u8]> {
        match self {
            Encoding::Ascii | Encoding::Utf8 => std::borrow::Cow::Borrowed(bytes),
            Encoding::Utf16Le | Encoding::Utf16Be => {
                let units = bytes.chunks(2).map(|c| match (self, c) {
                    (Encoding::Utf16Le, [a, b]) => u16::from_le_bytes([*a, *b]),
                    (_, [a, b]) => u16::from_be_bytes([*a, *b]),
                    (_, [a]) => u16::from(*a),
                    _ => unreachable!(),
                });
                let s: String = char::decode_utf16(units)
                    .map(|r| r.unwrap_or(char::REPLACEMENT_CHARACTER))
                    .collect();
                std::borrow::Cow::Owned(s.into_bytes())
            }
        }
    }

    /// Encodes UTF-8 text in this encoding.
    pub fn encode_str(self, s: &str) -> Vec<u8> {
        match self {
            Encoding::Ascii | Encoding::Utf8 => s.as_bytes().to_vec(),
            Encoding::Utf16Le => s.encode_utf16().flat_map(|u| u.to_le_bytes()).collect(),
            Encoding::Utf16Be => s.encode_utf16().flat_map(|u| u.to_be_bytes()).collect(),
        }
    }
}

impl FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ascii" | "ascii-8bit" | "binary" => Ok(Encoding::Ascii),
            "utf8" | "utf-8" => Ok(Encoding::Utf8),
            "utf16le" | "utf-16le" => Ok(Encoding::Utf16Le),
            "utf16be" | "utf-16be" => Ok(Encoding::Utf16Be),
            other => Err(Error::Config(format!("unknown encoding {other:?}"))),
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoding::Ascii => "ascii",
            Encoding::Utf8 => "utf8",
            Encoding::Utf16Le => "utf16le",
            Encoding::Utf16Be => "utf16be",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prefix_fixtures() {
        assert_eq!(Encoding::Utf8.continuation_prefix_len(&[0xA9, 0x64]), 1);
        assert_eq!(Encoding::Utf8.continuation_prefix_len(&[0x41, 0x80]), 0);
        assert_eq!(Encoding::Utf8.continuation_prefix_len(&[0x80, 0x80, 0x80, 0x41]), 3);
        assert_eq!(Encoding::Utf16Le.continuation_prefix_len(&[0x01, 0xDC, 0x41, 0x00]), 2);
        assert_eq!(Encoding::Utf16Le.continuation_prefix_len(&[0x3D, 0xD8]), 0);
        assert_eq!(Encoding::Utf16Be.continuation_prefix_len(&[0xDF, 0xFF]), 2);
        assert_eq!(Encoding::Ascii.continuation_prefix_len(&[0xA9]), 0);
        assert_eq!(Encoding::Utf8.continuation_prefix_len(&[]), 0);
    }

    #[test]
    fn utf16_chunks_are_even() {
        assert_eq!(Encoding::Utf16Le.chunk_size(1), 2);
        assert_eq!(Encoding::Utf16Le.chunk_size(31), 32);
        assert_eq!(Encoding::Utf16Be.chunk_size(64), 64);
        assert_eq!(Encoding::Utf8.chunk_size(31), 31);
    }

    #[test]
    fn utf16_non_latin_units_are_catch_all() {
        // U+012C shares its low byte with ','.
        let bytes = Encoding::Utf16Le.encode_str("\u{12C},");
        assert_eq!(Encoding::Utf16Le.classify(&bytes, 0), SymbolByte::Start(None));
        assert_eq!(Encoding::Utf16Le.classify(&bytes, 1), SymbolByte::Continuation);
        assert_eq!(Encoding::Utf16Le.classify(&bytes, 2), SymbolByte::Start(Some(b',')));
    }

    fn tiles(enc: Encoding, bytes: &[u8], chunk: usize) -> bool {
        // Every symbol start is owned by exactly one chunk, and the bytes
        // each chunk skips are exactly the continuation bytes of a symbol
        // started before it.
        let starts: Vec<usize> = (0..bytes.len())
            .filter(|&j| matches!(enc.classify(bytes, j), SymbolByte::Start(_)))
            .collect();
        let mut owned = Vec::new();
        for (ci, c) in bytes.chunks(chunk).enumerate() {
            let base = ci * chunk;
            let skip = enc.continuation_prefix_len(c);
            for j in skip..c.len() {
                if matches!(enc.classify(c, j), SymbolByte::Start(_)) {
                    owned.push(base + j);
                }
            }
            for j in 0..skip {
                if matches!(enc.classify(bytes, base + j), SymbolByte::Start(_)) {
                    return false;
                }
            }
        }
        owned == starts
    }

    proptest! {
        #[test]
        fn utf8_chunks_tile_code_points(s in "\\PC{0,80}", chunk in 1usize..=64) {
            prop_assert!(tiles(Encoding::Utf8, s.as_bytes(), chunk));
        }

        #[test]
        fn utf16_chunks_tile_code_points(s in "\\PC{0,80}", chunk in 1usize..=32) {
            let chunk = Encoding::Utf16Le.chunk_size(chunk);
            let le = Encoding::Utf16Le.encode_str(&s);
            prop_assert!(tiles(Encoding::Utf16Le, &le, chunk));
            let be = Encoding::Utf16Be.encode_str(&s);
            prop_assert!(tiles(Encoding::Utf16Be, &be, chunk));
            let decoded = Encoding::Utf16Le.decode_to_utf8(&le);
            prop_assert_eq!(decoded.as_ref(), s.as_bytes());
        }
    }
}
