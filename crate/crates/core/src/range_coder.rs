//! Carry-less 32-bit range coder with 16-bit probabilities and quantized CDF tables.
//!
//! The encoder keeps `low + range <= 2^32` at all times, so no carry ever
//! propagates into bytes already written. When the interval straddles a
//! 2^24 boundary while `range < 2^16`, the range is cut back to end at the next
//! 2^16 multiple, which costs a little efficiency but keeps both ends exact.

use crate::error::{MdvcError, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

#[derive(Clone, Debug)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Codes the symbol occupying `[cum, cum + freq)` of a `2^16` total.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Terminates the stream. The final value is the point of `[low, low + range)`
    /// with the most trailing zero bytes; trailing zero bytes are then dropped
    /// because the decoder reads zeros past the end.
    pub fn finish(mut self) -> Vec<u8> {
        let low = self.low as u64;
        let high = low + self.range as u64;
        for n in 0..=4u32 {
            let unit = 1u64 << (32 - 8 * n);
            let v = low.div_ceil(unit) * unit;
            if v < high {
                for i in 0..n {
                    self.out.push((v >> (24 - 8 * i)) as u8);
                }
                break;
            }
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }

    /// Length `finish` would return now.
    pub fn flushed_len(&self) -> usize {
        self.clone().finish().len()
    }
}

#[derive(Clone, Debug)]
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    r: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self {
            low: 0,
            range: u32::MAX,
            code: 0,
            r: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative-frequency target of the next symbol.
    pub fn target(&mut self) -> Result<u32> {
        self.r = self.range >> PROB_BITS;
        let v = self.code.wrapping_sub(self.low) / self.r;
        if v >= PROB_TOTAL {
            return Err(MdvcError::Corruption("range decoder target outside the probability table".into()));
        }
        Ok(v)
    }

    /// Consumes the symbol found for the last [`RangeDecoder::target`].
    pub fn consume(&mut self, cum: u32, freq: u32) {
        self.low = self.low.wrapping_add(self.r * cum);
        self.range = self.r * freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}

/// Quantized CDF over `n` symbols with total `2^16` and every frequency at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cdf {
    cum: Vec<u32>,
}

impl Cdf {
    /// `freq_i = 1 + floor(p_i * (2^16 - n))`; the rounding remainder goes to the
    /// most probable symbol (lowest index on ties). `probs` need not be normalized.
    pub fn from_probabilities(probs: &[f64]) -> Self {
        let n = probs.len();
        assert!(n >= 1 && n as u32 <= PROB_TOTAL / 2, "unsupported alphabet size {n}");
        let total: f64 = probs.iter().map(|p| p.max(0.0)).sum();
        let spare = (PROB_TOTAL - n as u32) as f64;
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|&p| {
                let q = if total > 0.0 { p.max(0.0) / total } else { 1.0 / n as f64 };
                1 + (q * spare).floor() as u32
            })
            .collect();
        let used: u32 = freqs.iter().sum();
        let mut best = 0;
        for i in 1..n {
            if freqs[i] > freqs[best] {
                best = i;
            }
        }
        freqs[best] += PROB_TOTAL - used;
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0;
        cum.push(0);
        for f in freqs {
            acc += f;
            cum.push(acc);
        }
        Self { cum }
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.cum[symbol + 1] - self.cum[symbol]
    }

    pub fn cum(&self, symbol: usize) -> u32 {
        self.cum[symbol]
    }

    /// Probability the coder actually assigns to `symbol`.
    pub fn prob(&self, symbol: usize) -> f64 {
        self.freq(symbol) as f64 / PROB_TOTAL as f64
    }

    pub fn encode(&self, enc: &mut RangeEncoder, symbol: usize) {
        enc.encode(self.cum[symbol], self.freq(symbol));
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<usize> {
        let t = dec.target()?;
        // Largest symbol whose cumulative start is <= t.
        let s = self.cum.partition_point(|&c| c <= t) - 1;
        dec.consume(self.cum[s], self.freq(s));
        Ok(s)
    }
}
