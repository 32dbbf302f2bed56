//! Two-port Touchstone v1 (`.s2p`) reader and writer.

use std::fmt::Write as _;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::SMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum TouchstoneError {
    #[error("line {line}: malformed option line: {reason}")]
    OptionLine { line: usize, reason: String },
    #[error("line {line}: Touchstone v2 keyword `{keyword}` is not supported")]
    Version2 { line: usize, keyword: String },
    #[error("non-increasing frequency at line {line}")]
    NonIncreasing { line: usize },
    #[error("line {line}: frequency must be positive")]
    NonPositiveFrequency { line: usize },
    #[error("line {line}: expected 9 columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: non-numeric token `{token}`")]
    NonNumeric { line: usize, token: String },
    #[error("no data lines")]
    Empty,
    #[error("invalid sweep record: {0}")]
    InvalidRecord(String),
}

/// Frequency axis plus one scattering matrix per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub freqs_hz: Vec<f64>,
    pub s: Vec<SMatrix>,
    pub z0_ohm: f64,
}

impl SweepRecord {
    pub fn new(freqs_hz: Vec<f64>, s: Vec<SMatrix>, z0_ohm: f64) -> Result<Self, TouchstoneError> {
        let rec = Self { freqs_hz, s, z0_ohm };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), TouchstoneError> {
        let bad = |m: &str| Err(TouchstoneError::InvalidRecord(m.to_string()));
        if self.freqs_hz.is_empty() {
            return bad("empty frequency axis");
        }
        if self.freqs_hz.len() != self.s.len() {
            return bad("one S-matrix per frequency point required");
        }
        if !(self.z0_ohm > 0.0) {
            return bad("reference impedance must be positive");
        }
        if self.freqs_hz.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return bad("frequencies must be finite and positive");
        }
        if self.freqs_hz.windows(2).any(|w| w[1] <= w[0]) {
            return bad("frequencies must be strictly increasing");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.freqs_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs_hz.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreqUnit {
    Hz,
    KHz,
    MHz,
    GHz,
}

impl FreqUnit {
    pub fn scale(self) -> f64 {
        match self {
            FreqUnit::Hz => 1.0,
            FreqUnit::KHz => 1e3,
            FreqUnit::MHz => 1e6,
            FreqUnit::GHz => 1e9,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            FreqUnit::Hz => "Hz",
            FreqUnit::KHz => "kHz",
            FreqUnit::MHz => "MHz",
            FreqUnit::GHz => "GHz",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataFormat {
    /// Real / imaginary.
    RI,
    /// Linear magnitude / angle in degrees.
    MA,
    /// 20·log10 magnitude / angle in degrees.
    DB,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TouchstoneOptions {
    pub unit: FreqUnit,
    pub format: DataFormat,
    pub reference: f64,
}

impl Default for TouchstoneOptions {
    /// The v1 defaults applied to fields missing from the option line.
    fn default() -> Self {
        Self { unit: FreqUnit::GHz, format: DataFormat::MA, reference: 50.0 }
    }
}

impl FromStr for TouchstoneOptions {
    type Err = String;

    /// Parses an option line (with or without the leading `#`).
    fn from_str(line: &str) -> Result<Self, String> {
        let body = line.trim_start().strip_prefix('#').unwrap_or(line);
        let mut opts = TouchstoneOptions::default();
        let mut tokens = body.split_whitespace();
        while let Some(tok) = tokens.next() {
            match tok.to_ascii_uppercase().as_str() {
                "HZ" => opts.unit = FreqUnit::Hz,
                "KHZ" => opts.unit = FreqUnit::KHz,
                "MHZ" => opts.unit = FreqUnit::MHz,
                "GHZ" => opts.unit = FreqUnit::GHz,
                "S" => {}
                "Y" | "Z" | "H" | "G" => return Err(format!("unsupported parameter type `{tok}`")),
                "RI" => opts.format = DataFormat::RI,
                "MA" => opts.format = DataFormat::MA,
                "DB" => opts.format = DataFormat::DB,
                "R" => {
                    let v = tokens.next().ok_or("missing value after `R`")?;
                    let r: f64 = v.parse().map_err(|_| format!("bad reference `{v}`"))?;
                    if !(r > 0.0) || !r.is_finite() {
                        return Err(format!("reference must be positive, got `{v}`"));
                    }
                    opts.reference = r;
                }
                _ => return Err(format!("unknown token `{tok}`")),
            }
        }
        Ok(opts)
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('!') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn decode_pair(format: DataFormat, x: f64, y: f64) -> Complex64 {
    match format {
        DataFormat::RI => Complex64::new(x, y),
        DataFormat::MA => Complex64::from_polar(x, y.to_radians()),
        DataFormat::DB => Complex64::from_polar(10f64.powf(x / 20.0), y.to_radians()),
    }
}

fn encode_pair(format: DataFormat, z: Complex64) -> (f64, f64) {
    match format {
        DataFormat::RI => (z.re, z.im),
        DataFormat::MA => (z.norm(), z.arg().to_degrees()),
        DataFormat::DB => (20.0 * z.norm().log10(), z.arg().to_degrees()),
    }
}

/// Parses a two-port Touchstone v1 document. LF and CRLF line endings are
/// accepted; only the first option line is honoured.
pub fn parse_touchstone(text: &str) -> Result<SweepRecord, TouchstoneError> {
    let mut opts: Option<TouchstoneOptions> = None;
    let mut freqs = Vec::new();
    let mut s = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            let keyword = line.split(']').next().unwrap_or(line).to_string() + "]";
            return Err(TouchstoneError::Version2 { line: line_no, keyword });
        }
        if line.starts_with('#') {
            if opts.is_none() {
                let parsed = line
                    .parse::<TouchstoneOptions>()
                    .map_err(|reason| TouchstoneError::OptionLine { line: line_no, reason })?;
                opts = Some(parsed);
            }
            continue;
        }
        let o = *opts.get_or_insert_with(TouchstoneOptions::default);

        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 9 {
            return Err(TouchstoneError::ColumnCount { line: line_no, found: tokens.len() });
        }
        let mut vals = [0.0f64; 9];
        for (v, tok) in vals.iter_mut().zip(&tokens) {
            *v = tok.parse().map_err(|_| TouchstoneError::NonNumeric { line: line_no, token: tok.to_string() })?;
        }
        let f = vals[0] * o.unit.scale();
        if !(f > 0.0) || !f.is_finite() {
            return Err(TouchstoneError::NonPositiveFrequency { line: line_no });
        }
        if freqs.last().is_some_and(|&prev| f <= prev) {
            return Err(TouchstoneError::NonIncreasing { line: line_no });
        }
        freqs.push(f);
        // Column order is S11 S21 S12 S22.
        s.push(SMatrix {
            s11: decode_pair(o.format, vals[1], vals[2]),
            s21: decode_pair(o.format, vals[3], vals[4]),
            s12: decode_pair(o.format, vals[5], vals[6]),
            s22: decode_pair(o.format, vals[7], vals[8]),
        });
    }

    if freqs.is_empty() {
        return Err(TouchstoneError::Empty);
    }
    let z0 = opts.unwrap_or_default().reference;
    Ok(SweepRecord { freqs_hz: freqs, s, z0_ohm: z0 })
}

/// Shortest decimal that parses back to exactly the same `f64`.
fn push_num(out: &mut String, v: f64) {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-5..1e16).contains(&a) {
        write!(out, "{v}").unwrap();
    } else {
        write!(out, "{v:e}").unwrap();
    }
}

/// Serializes a record. Output parses back to the same values up to the
/// polar/dB conversions; zero magnitudes in DB format are written as `-inf`.
pub fn write_touchstone(rec: &SweepRecord, opts: &TouchstoneOptions) -> String {
    let fmt = match opts.format {
        DataFormat::RI => "RI",
        DataFormat::MA => "MA",
        DataFormat::DB => "DB",
    };
    let mut out = String::new();
    out.push_str("# ");
    out.push_str(opts.unit.keyword());
    out.push_str(" S ");
    out.push_str(fmt);
    out.push_str(" R ");
    push_num(&mut out, opts.reference);
    out.push('\n');
    for (f, m) in rec.freqs_hz.iter().zip(&rec.s) {
        push_num(&mut out, f / opts.unit.scale());
        for z in [m.s11, m.s21, m.s12, m.s22] {
            let (x, y) = encode_pair(opts.format, z);
            out.push(' ');
            push_num(&mut out, x);
            out.push(' ');
            push_num(&mut out, y);
        }
        out.push('\n');
    }
    out
}
