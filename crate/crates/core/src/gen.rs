//! Seeded synthetic CSV generator.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    /// Approximate output size; generation stops after the record that
    /// reaches it.
    pub target_bytes: usize,
    pub columns: usize,
    /// Let records drop or add trailing fields.
    pub ragged: bool,
    /// Longest unquoted text field.
    pub max_field_len: usize,
    /// Chance that a text field is quoted.
    pub quote_density: f64,
    /// Chance that a quoted field contains a comma or line break.
    pub embedded_delimiter_rate: f64,
    /// Chance that a quoted field contains an escaped quote.
    pub doubled_quote_rate: f64,
    pub empty_field_rate: f64,
    pub final_newline: bool,
    /// Mix non-ASCII text into string fields.
    pub multilingual: bool,
    /// Size of one giant quoted field placed in a middle record.
    pub skew_field: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            target_bytes: 1 << 16,
            columns: 5,
            ragged: false,
            max_field_len: 12,
            quote_density: 0.2,
            embedded_delimiter_rate: 0.3,
            doubled_quote_rate: 0.2,
            empty_field_rate: 0.1,
            final_newline: true,
            multilingual: false,
            skew_field: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Int,
    Float,
    Bool,
    Text,
}

const WORDS: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "apples", "pears", "x", "lorem", "ipsum", "data",
];

const MULTILINGUAL: &[&str] = &[
    "größe", "naïve", "日本語", "数据", "Ωmega", "кириллица", "😀", "𝄞clef", "ελληνικά", "عربى",
    "한국어", "ḁ̈",
];

struct Gen {
    rng: ChaCha8Rng,
    cfg: GenConfig,
}

impl Gen {
    fn text(&mut self, out: &mut Vec<u8>) {
        let n = self.rng.gen_range(1..=self.cfg.max_field_len.max(1));
        let start = out.len();
        while out.len() - start < n {
            if self.cfg.multilingual && self.rng.gen_bool(0.4) {
                let w = MULTILINGUAL[self.rng.gen_range(0..MULTILINGUAL.len())];
                out.extend_from_slice(w.as_bytes());
            } else if self.rng.gen_bool(0.2) {
                out.push(b' ');
            } else {
                let w = WORDS[self.rng.gen_range(0..WORDS.len())];
                out.extend_from_slice(w.as_bytes());
            }
        }
    }

    fn quoted_body(&mut self, out: &mut Vec<u8>, len_hint: usize) {
        let start = out.len();
        while out.len() - start < len_hint {
            let r: f64 = self.rng.gen();
            if r < self.cfg.embedded_delimiter_rate / 3.0 {
                out.push(b',');
            } else if r < self.cfg.embedded_delimiter_rate * 2.0 / 3.0 {
                out.push(b'\n');
            } else if r < self.cfg.embedded_delimiter_rate {
                out.extend_from_slice(b"\r\n");
            } else if r < self.cfg.embedded_delimiter_rate + self.cfg.doubled_quote_rate {
                out.extend_from_slice(b"\"\"");
            } else {
                self.text(out);
            }
        }
    }

    fn field(&mut self, kind: Kind, out: &mut Vec<u8>) {
        if self.rng.gen_bool(self.cfg.empty_field_rate) {
            return;
        }
        match kind {
            Kind::Int => {
                let v: i64 = self.rng.gen_range(-1_000_000..1_000_000);
                out.extend_from_slice(v.to_string().as_bytes());
            }
            Kind::Float => {
                let v: f64 = self.rng.gen_range(-1e4..1e4);
                let s = match self.rng.gen_range(0..3) {
                    0 => format!("{v:.3}"),
                    1 => format!("{v:e}"),
                    _ => format!("{}", v.trunc()),
                };
                out.extend_from_slice(s.as_bytes());
            }
            Kind::Bool => {
                let s = if self.rng.gen() { "true" } else { "FALSE" };
                out.extend_from_slice(s.as_bytes());
            }
            Kind::Text => {
                if self.rng.gen_bool(self.cfg.quote_density) {
                    out.push(b'"');
                    let hint = self.rng.gen_range(1..=self.cfg.max_field_len.max(1));
                    self.quoted_body(out, hint);
                    out.push(b'"');
                } else {
                    self.text(out);
                }
            }
        }
    }
}

/// Generates a CSV corpus. The same config always yields the same bytes.
pub fn generate(cfg: &GenConfig) -> Vec<u8> {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        cfg: cfg.clone(),
    };
    let columns = cfg.columns.max(1);
    let kind_weights = WeightedIndex::new([3, 2, 1, 4]).unwrap();
    let kinds: Vec<Kind> = (0..columns)
        .map(|_| [Kind::Int, Kind::Float, Kind::Bool, Kind::Text][kind_weights.sample(&mut g.rng)])
        .collect();
    let mut out = Vec::with_capacity(cfg.target_bytes + cfg.skew_field.unwrap_or(0) + 256);
    let skew_at = cfg.target_bytes / 2;
    let mut skew = cfg.skew_field;
    while out.len() < cfg.target_bytes || skew.is_some() {
        let n = if cfg.ragged {
            g.rng.gen_range(1..=columns + 1)
        } else {
            columns
        };
        for c in 0..n {
            if c > 0 {
                out.push(b',');
            }
            if let Some(size) = skew.filter(|_| out.len() >= skew_at && c == 0) {
                out.push(b'"');
                g.quoted_body(&mut out, size);
                out.push(b'"');
                skew = None;
                continue;
            }
            g.field(kinds[c % columns], &mut out);
        }
        out.push(b'\n');
    }
    if !cfg.final_newline {
        out.pop();
    }
    out
}

/// Fuzz-style config drawn from `seed`: sizes log-uniform up to `max_bytes`,
/// all knobs randomized.
pub fn fuzz_config(seed: u64, max_bytes: usize) -> GenConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let exp = rng.gen_range(0.0..=(max_bytes.max(2) as f64).log2());
    GenConfig {
        seed,
        target_bytes: (2f64.powf(exp) as usize).min(max_bytes).saturating_sub(1),
        columns: rng.gen_range(1..8),
        ragged: rng.gen_bool(0.3),
        max_field_len: rng.gen_range(1..40),
        quote_density: rng.gen_range(0.0..0.9),
        embedded_delimiter_rate: rng.gen_range(0.0..0.6),
        doubled_quote_rate: rng.gen_range(0.0..0.4),
        empty_field_rate: rng.gen_range(0.0..0.5),
        final_newline: rng.gen_bool(0.5),
        multilingual: rng.gen_bool(0.3),
        skew_field: None,
    }
}
