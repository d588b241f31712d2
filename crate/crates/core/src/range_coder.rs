//! Integer range coder over static 16-bit CDF tables.
//!
//! The coder keeps a 56-bit window of the low end of the interval in a `u64`
//! (bit 56 catches carries) and renormalizes byte-wise whenever the range
//! drops below 2^48, so every symbol is coded with at least 32 bits of range
//! resolution. Carries are resolved with the cache/pending-0xFF scheme known
//! from LZMA. The first emitted byte is always zero and is dropped; the
//! decoder reads zeros past the end of the buffer, which lets the encoder trim
//! the zero tail of its flush.

use crate::error::{HscError, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
/// Largest symbol range a single table may cover.
pub const MAX_TABLE_SYMBOLS: usize = 1 << 15;
/// Default coded symbol range for latent tensors.
pub const SYMBOL_MIN: i32 = -127;
pub const SYMBOL_MAX: i32 = 128;

const WINDOW_BITS: u32 = 56;
const WINDOW_MASK: u64 = (1 << WINDOW_BITS) - 1;
const RENORM_BELOW: u64 = 1 << (WINDOW_BITS - 8);
const STATE_BYTES: usize = (WINDOW_BITS / 8) as usize;
/// Escaped symbols are sent raw as two 16-bit halves.
const RAW_HALVES: usize = 2;

/// Quantized cumulative frequency table over `[offset, offset + n_symbols)`,
/// optionally followed by an escape slot for symbols outside that range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
    symbol_offset: i32,
    n_symbols: usize,
    escape: bool,
}

impl CdfTable {
    /// Quantizes `probs` (for symbols `lo, lo+1, ...`) plus an escape slot
    /// carrying `tail_mass` to a total of 2^16. Every slot gets at least one
    /// count; the rest is assigned by largest remainder. A zero `tail_mass`
    /// builds a table without an escape slot.
    pub fn build(lo: i32, probs: &[f64], tail_mass: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(HscError::CdfTable("no symbols".into()));
        }
        if probs.len() > MAX_TABLE_SYMBOLS {
            return Err(HscError::CdfTable(format!(
                "{} symbols exceeds the limit of {MAX_TABLE_SYMBOLS}",
                probs.len()
            )));
        }
        if !(tail_mass >= 0.0 && tail_mass.is_finite()) {
            return Err(HscError::CdfTable(format!("tail mass {tail_mass}")));
        }
        let mut total = 0.0;
        for &p in probs {
            if !(p.is_finite() && p >= 0.0) {
                return Err(HscError::CdfTable(format!("probability {p}")));
            }
            total += p;
        }
        let escape = tail_mass > 0.0;
        total += tail_mass;
        if total <= 0.0 {
            return Err(HscError::CdfTable("zero total mass".into()));
        }
        let tail = if escape { Some(tail_mass) } else { None };
        let freqs = quantize_largest_remainder(probs, tail, total);
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        cdf.push(0);
        let mut acc = 0;
        for f in freqs {
            acc += f;
            cdf.push(acc);
        }
        debug_assert_eq!(acc, PROB_TOTAL);
        Ok(CdfTable {
            cdf,
            symbol_offset: lo,
            n_symbols: probs.len(),
            escape,
        })
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn symbol_offset(&self) -> i32 {
        self.symbol_offset
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn has_escape(&self) -> bool {
        self.escape
    }

    fn n_slots(&self) -> usize {
        self.cdf.len() - 1
    }

    fn in_range_slot(&self, symbol: i64) -> Option<usize> {
        let idx = symbol - self.symbol_offset as i64;
        (idx >= 0 && (idx as usize) < self.n_symbols).then_some(idx as usize)
    }

    pub fn freq(&self, slot: usize) -> u32 {
        self.cdf[slot + 1] - self.cdf[slot]
    }

    /// Code length of `symbol` under the quantized table, including raw bits
    /// for escapes.
    pub fn quantized_bits(&self, symbol: i64) -> Option<f64> {
        let slot_bits = |s: usize| (PROB_TOTAL as f64 / self.freq(s) as f64).log2();
        match self.in_range_slot(symbol) {
            Some(s) => Some(slot_bits(s)),
            None if self.escape && i32::try_from(symbol).is_ok() => {
                Some(slot_bits(self.n_symbols) + (RAW_HALVES as u32 * PROB_BITS) as f64)
            }
            None => None,
        }
    }

    fn slot_for_value(&self, value: u32) -> usize {
        // last slot whose start is <= value
        self.cdf.partition_point(|&c| c <= value) - 1
    }
}

fn quantize_largest_remainder(probs: &[f64], tail: Option<f64>, total: f64) -> Vec<u32> {
    let scale = PROB_TOTAL as f64 / total;
    let weights = || probs.iter().chain(tail.as_ref());
    let mut freqs = Vec::with_capacity(probs.len() + 1);
    let mut assigned = 0i64;
    for &w in weights() {
        // truncation is floor for the nonnegative scaled weights
        let f = ((w * scale) as u32).max(1);
        assigned += f as i64;
        freqs.push(f);
    }
    let mut deficit = PROB_TOTAL as i64 - assigned;
    if deficit > 0 {
        let n = freqs.len() as i64;
        let rounds = deficit / n;
        if rounds > 0 {
            freqs.iter_mut().for_each(|f| *f += rounds as u32);
            deficit -= rounds * n;
        }
        if deficit > 0 {
            // only the set of the `deficit` largest remainders matters
            // zero weights hold the smallest remainder, so they only take
            // a count once every positive weight has one
            let k = deficit as usize;
            let mut cand: Vec<(f64, usize)> = weights()
                .zip(&freqs)
                .enumerate()
                .filter(|(_, (&w, _))| w > 0.0)
                .map(|(i, (&w, &f))| (w * scale - f as f64, i))
                .collect();
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                cand.truncate(k);
            }
            let mut extra = k.saturating_sub(cand.len());
            for &(_, i) in &cand {
                freqs[i] += 1;
            }
            for (f, &w) in freqs.iter_mut().zip(weights()) {
                if extra == 0 {
                    break;
                }
                if w == 0.0 {
                    *f += 1;
                    extra -= 1;
                }
            }
        }
    }
    while deficit < 0 {
        // floor bumps overshot: take counts back from the largest slot, at
        // most half of it at a time
        let (i, &f) = freqs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("nonempty");
        let take = (-deficit).min(f as i64 / 2).max(1);
        freqs[i] -= take as u32;
        deficit += take;
    }
    freqs
}

pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    pending: u64,
    first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: WINDOW_MASK,
            cache: 0,
            pending: 1,
            first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, byte: u8) {
        if self.first {
            debug_assert_eq!(byte, 0);
            self.first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> WINDOW_BITS) as u8;
        if (self.low & WINDOW_MASK) < (0xFF << (WINDOW_BITS - 8)) || carry != 0 {
            let mut byte = self.cache;
            while self.pending > 0 {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = ((self.low >> (WINDOW_BITS - 8)) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & (RENORM_BELOW - 1)) << 8;
    }

    fn encode_span(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PROB_BITS;
        self.low += r * cum as u64;
        if cum + freq == PROB_TOTAL {
            self.range -= r * cum as u64;
        } else {
            self.range = r * freq as u64;
        }
        while self.range < RENORM_BELOW {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, symbol: i64, table: &CdfTable, position: usize) -> Result<()> {
        match table.in_range_slot(symbol) {
            Some(slot) => self.encode_span(table.cdf[slot], table.freq(slot)),
            None => {
                let raw = i32::try_from(symbol).ok().filter(|_| table.escape).ok_or(
                    HscError::SymbolOutOfRange {
                        symbol,
                        table: position,
                    },
                )? as u32;
                let esc = table.n_symbols;
                self.encode_span(table.cdf[esc], table.freq(esc));
                self.encode_span(raw >> 16, 1);
                self.encode_span(raw & 0xFFFF, 1);
            }
        }
        Ok(())
    }

    /// Terminates the stream with the shortest tail that still identifies the
    /// final interval.
    pub fn finish(mut self) -> Vec<u8> {
        let hi = self.low + self.range - 1;
        for k in (0..=WINDOW_BITS).rev() {
            let step = 1u64 << k;
            let v = (self.low + step - 1) & !(step - 1);
            if v <= hi {
                self.low = v;
                break;
            }
        }
        for _ in 0..=STATE_BYTES {
            self.shift_low();
        }
        // the decoder pads with zeros; it never reads more than STATE_BYTES past the data
        let mut trimmed = 0;
        while trimmed < STATE_BYTES && self.out.last() == Some(&0) {
            self.out.pop();
            trimmed += 1;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: WINDOW_MASK,
        };
        for _ in 0..STATE_BYTES {
            let b = d.next_byte()?;
            d.code = (d.code << 8) | b as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos >= self.data.len() + STATE_BYTES {
            return Err(HscError::SourceExhausted {
                consumed: self.pos,
                available: self.data.len(),
            });
        }
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        Ok(b)
    }

    fn decode_value(&self) -> u32 {
        let r = self.range >> PROB_BITS;
        (self.code / r).min(PROB_TOTAL as u64 - 1) as u32
    }

    fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        let r = self.range >> PROB_BITS;
        self.code -= r * cum as u64;
        if cum + freq == PROB_TOTAL {
            self.range -= r * cum as u64;
        } else {
            self.range = r * freq as u64;
        }
        if self.code >= self.range {
            return Err(HscError::Coder {
                position: self.pos,
                reason: "code value outside interval".into(),
            });
        }
        while self.range < RENORM_BELOW {
            self.code = (self.code << 8) | self.next_byte()? as u64;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i64> {
        let slot = table.slot_for_value(self.decode_value());
        if slot >= table.n_slots() {
            return Err(HscError::Coder {
                position: self.pos,
                reason: "slot beyond table".into(),
            });
        }
        self.consume(table.cdf[slot], table.freq(slot))?;
        if slot < table.n_symbols {
            return Ok(table.symbol_offset as i64 + slot as i64);
        }
        let hi = self.decode_value();
        self.consume(hi, 1)?;
        let lo = self.decode_value();
        self.consume(lo, 1)?;
        Ok(((hi << 16) | lo) as i32 as i64)
    }
}

/// Encodes `symbols[i]` with `tables[i]` into one self-terminating chunk.
pub fn encode_symbols(symbols: &[i64], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(HscError::Coder {
            position: symbols.len().min(tables.len()),
            reason: format!("{} symbols but {} tables", symbols.len(), tables.len()),
        });
    }
    let mut enc = RangeEncoder::new();
    for (i, (&s, t)) in symbols.iter().zip(tables).enumerate() {
        enc.encode(s, t, i)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<i64>> {
    let mut dec = RangeDecoder::new(bytes)?;
    tables.iter().map(|t| dec.decode(t)).collect()
}

/// Sum of quantized-table code lengths; the reference for coded-size bounds.
pub fn quantized_code_length(symbols: &[i64], tables: &[&CdfTable]) -> Option<f64> {
    symbols
        .iter()
        .zip(tables)
        .map(|(&s, t)| t.quantized_bits(s))
        .sum()
}

/// Appends `payload` with a 4-byte little-endian length prefix.
pub fn write_chunk(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Reads one length-prefixed chunk at `offset`; returns it and the next offset.
pub fn read_chunk(data: &[u8], offset: usize) -> Result<(&[u8], usize)> {
    let truncated = |needed| HscError::Truncated {
        offset,
        needed,
        available: data.len().saturating_sub(offset),
    };
    let header = data.get(offset..offset + 4).ok_or_else(|| truncated(4))?;
    let len = u32::from_le_bytes(header.try_into().expect("4 bytes")) as usize;
    let start = offset + 4;
    let payload = data
        .get(start..start.checked_add(len).ok_or_else(|| truncated(len))?)
        .ok_or_else(|| truncated(4 + len))?;
    Ok((payload, start + len))
}
