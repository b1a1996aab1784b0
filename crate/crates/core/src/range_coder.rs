//! 32-bit renormalizing range coder with byte-wise output and carry
//! propagation.
//!
//! The encoder keeps a 33-bit `low` and a 32-bit `range`; a pending byte and
//! a run of `0xFF` bytes are held back until a carry can no longer reach them.
//! Renormalization emits one byte whenever `range` drops below 2^24, so with
//! tables of at most 16-bit precision the per-symbol quantization of `range`
//! costs a fraction of a bit per thousand symbols. Bytes are emitted
//! most-significant first; the stream is not self-delimiting.

use crate::entropy::CdfTable;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const FLUSH_BYTES: usize = 5;

/// Coded bytes plus the number of symbols they hold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedStream {
    pub bytes: Vec<u8>,
    pub symbols: usize,
}

struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low >> 32 != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode(&mut self, start: u32, freq: u32, precision: u32) {
        let r = self.range >> precision;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..FLUSH_BYTES {
            self.shift_low();
        }
        self.out
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> Decoder<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            bytes,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..FLUSH_BYTES {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or(Error::Truncated { position: self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        let precision = table.precision();
        let r = self.range >> precision;
        let value = self.code / r;
        if value >= 1 << precision {
            return Err(Error::Corrupt(format!(
                "code value out of range near byte {}",
                self.pos
            )));
        }
        let index = table.locate(value);
        let start = table.cdf()[index];
        let freq = table.cdf()[index + 1] - start;
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(table.s_min() + index as i32)
    }
}

fn check_lengths(symbols: usize, tables: usize) -> Result<()> {
    if symbols != tables {
        return Err(Error::Shape(format!(
            "{symbols} symbols but {tables} tables"
        )));
    }
    Ok(())
}

/// Codes `symbols[i]` under `tables[i]`.
pub fn encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<CodedStream> {
    check_lengths(symbols.len(), tables.len())?;
    let mut enc = Encoder::new();
    for (index, (&s, table)) in symbols.iter().zip(tables).enumerate() {
        let (start, freq) = table.interval(s).ok_or(Error::SymbolOutOfRange {
            index,
            symbol: s,
            min: table.s_min(),
            max: table.s_max(),
        })?;
        enc.encode(start, freq, table.precision());
    }
    Ok(CodedStream {
        bytes: enc.finish(),
        symbols: symbols.len(),
    })
}

/// Decodes `stream.symbols` symbols using the same table sequence given to
/// [`encode`]. Fails if the bytes run out, or if bytes are left over.
pub fn decode(stream: &CodedStream, tables: &[&CdfTable]) -> Result<Vec<i32>> {
    check_lengths(stream.symbols, tables.len())?;
    let mut dec = Decoder::new(&stream.bytes)?;
    let symbols = tables
        .iter()
        .map(|t| dec.decode(t))
        .collect::<Result<Vec<_>>>()?;
    if dec.pos != stream.bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} unused bytes after the last symbol",
            stream.bytes.len() - dec.pos
        )));
    }
    Ok(symbols)
}

/// Σ −log2 p̂ of the symbols under their tables' quantized probabilities.
pub fn ideal_bits(symbols: &[i32], tables: &[&CdfTable]) -> Result<f64> {
    check_lengths(symbols.len(), tables.len())?;
    symbols
        .iter()
        .zip(tables)
        .enumerate()
        .map(|(index, (&s, t))| {
            t.bits(s).ok_or(Error::SymbolOutOfRange {
                index,
                symbol: s,
                min: t.s_min(),
                max: t.s_max(),
            })
        })
        .sum()
}
