//! Carry-propagating range coder with 16-bit frequency totals, adaptive
//! binary contexts and bypass bits.

use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
const TOP: u32 = 1 << 24;
const PROB_BITS: u32 = 11;
const PROB_ONE: u16 = 1 << PROB_BITS;
const ADAPT_SHIFT: u32 = 5;

/// A discrete distribution over `0..num_symbols()` expressed as cumulative
/// 16-bit frequencies: `cum(0) = 0`, `cum(n) = 65536`.
pub trait SymbolModel {
    fn num_symbols(&self) -> usize;
    fn cum(&self, symbol: usize) -> u32;
}

/// Explicit cumulative frequency table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedCdf {
    /// `n + 1` entries, strictly increasing where every symbol is codable.
    pub table: Vec<u32>,
}

impl CodedCdf {
    /// Quantizes a probability vector so that every symbol keeps a
    /// frequency of at least one.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        let n = probs.len();
        if n == 0 || n > TOTAL as usize {
            return Err(Error::InvalidArgument(format!("alphabet of {n} symbols cannot be coded")));
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidArgument("probabilities must be non-negative with positive sum".into()));
        }
        let spare = (TOTAL as usize - n) as f64;
        let mut table = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        let mut prev = 0u32;
        table.push(0);
        for (i, p) in probs.iter().enumerate().take(n - 1) {
            acc += p / total;
            let c = ((i + 1) as u32 + (acc.min(1.0) * spare).floor() as u32).max(prev + 1);
            table.push(c);
            prev = c;
        }
        table.push(TOTAL);
        Ok(Self { table })
    }

    /// Checks the table invariants: starts at 0, ends at 65536, strictly increasing.
    pub fn validate(&self) -> Result<()> {
        let t = &self.table;
        if t.len() < 2 || t[0] != 0 || *t.last().unwrap() != TOTAL || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("malformed cumulative frequency table".into()));
        }
        Ok(())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_probabilities(&vec![1.0; n])
    }

    /// Bits spent on `symbol` by an ideal coder using this table.
    pub fn cost(&self, symbol: usize) -> f64 {
        let f = self.table[symbol + 1] - self.table[symbol];
        (TOTAL as f64 / f as f64).log2()
    }
}

impl SymbolModel for CodedCdf {
    fn num_symbols(&self) -> usize {
        self.table.len() - 1
    }

    fn cum(&self, symbol: usize) -> u32 {
        self.table[symbol]
    }
}

impl<M: SymbolModel + ?Sized> SymbolModel for &M {
    fn num_symbols(&self) -> usize {
        (**self).num_symbols()
    }

    fn cum(&self, symbol: usize) -> u32 {
        (**self).cum(symbol)
    }
}

/// Adaptive probability of a zero bit, 11-bit fixed point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitContext(u16);

impl Default for BitContext {
    fn default() -> Self {
        Self(PROB_ONE / 2)
    }
}

impl BitContext {
    fn update(&mut self, bit: bool) {
        if bit {
            self.0 -= self.0 >> ADAPT_SHIFT;
        } else {
            self.0 += (PROB_ONE - self.0) >> ADAPT_SHIFT;
        }
    }
}

#[derive(Debug)]
pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes `symbol` with a model; zero-frequency symbols are an error.
    pub fn encode<M: SymbolModel + ?Sized>(&mut self, model: &M, symbol: usize) -> Result<()> {
        let n = model.num_symbols();
        if symbol >= n {
            return Err(Error::IndexOutOfRange { index: symbol, len: n });
        }
        let lo = model.cum(symbol);
        let hi = model.cum(symbol + 1);
        if hi <= lo {
            return Err(Error::ZeroProbability { symbol, alphabet: n });
        }
        let r = self.range >> PRECISION;
        self.low += r as u64 * lo as u64;
        self.range = r * (hi - lo);
        self.normalize();
        Ok(())
    }

    pub fn encode_bit(&mut self, ctx: &mut BitContext, bit: bool) {
        let bound = (self.range >> PROB_BITS) * ctx.0 as u32;
        if bit {
            self.low += bound as u64;
            self.range -= bound;
        } else {
            self.range = bound;
        }
        ctx.update(bit);
        self.normalize();
    }

    /// Equiprobable bits, most significant first.
    pub fn encode_bypass(&mut self, value: u64, bits: u32) {
        for i in (0..bits).rev() {
            self.range >>= 1;
            if (value >> i) & 1 == 1 {
                self.low += self.range as u64;
            }
            self.normalize();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self { data, pos: 0, range: u32::MAX, code: 0 };
        if d.next_byte()? != 0 {
            return Err(Error::Corrupt("range coder stream must start with a zero byte".into()));
        }
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or(Error::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(())
    }

    pub fn decode<M: SymbolModel + ?Sized>(&mut self, model: &M) -> Result<usize> {
        let r = self.range >> PRECISION;
        let v = self.code / r;
        if v >= TOTAL {
            return Err(Error::Corrupt("range coder value out of range".into()));
        }
        let n = model.num_symbols();
        // Largest symbol with cum(symbol) <= v.
        let (mut lo, mut hi) = (0usize, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if model.cum(mid) <= v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (c0, c1) = (model.cum(lo), model.cum(lo + 1));
        if c1 <= c0 || v >= c1 {
            return Err(Error::Corrupt("decoded a zero-probability symbol".into()));
        }
        self.code -= r * c0;
        self.range = r * (c1 - c0);
        self.normalize()?;
        Ok(lo)
    }

    pub fn decode_bit(&mut self, ctx: &mut BitContext) -> Result<bool> {
        let bound = (self.range >> PROB_BITS) * ctx.0 as u32;
        let bit = if self.code < bound {
            self.range = bound;
            false
        } else {
            self.code -= bound;
            self.range -= bound;
            true
        };
        ctx.update(bit);
        self.normalize()?;
        Ok(bit)
    }

    pub fn decode_bypass(&mut self, bits: u32) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..bits {
            self.range >>= 1;
            let bit = if self.code >= self.range {
                self.code -= self.range;
                1
            } else {
                0
            };
            v = (v << 1) | bit;
            self.normalize()?;
        }
        Ok(v)
    }
}

/// Encodes one symbol per model.
pub fn ac_encode<M: SymbolModel>(symbols: &[usize], models: &[M]) -> Result<Vec<u8>> {
    if symbols.len() != models.len() {
        return Err(Error::DimensionMismatch { expected: models.len(), got: symbols.len() });
    }
    let mut enc = Encoder::new();
    for (s, m) in symbols.iter().zip(models) {
        enc.encode(m, *s)?;
    }
    Ok(enc.finish())
}

pub fn ac_decode<M: SymbolModel>(bytes: &[u8], models: &[M], count: usize) -> Result<Vec<usize>> {
    if count > models.len() {
        return Err(Error::DimensionMismatch { expected: models.len(), got: count });
    }
    let mut dec = Decoder::new(bytes)?;
    models[..count].iter().map(|m| dec.decode(m)).collect()
}

const MAX_PREFIX: usize = 128;

/// Adaptive Exp-Golomb binarization of unsigned integers: unary prefix on
/// adaptive contexts, the two leading suffix bits on contexts keyed by the
/// prefix length, remaining suffix bits bypassed.
#[derive(Clone, Debug)]
pub struct ExpGolombContexts {
    prefix: Vec<BitContext>,
    suffix: Vec<[BitContext; 3]>,
}

impl Default for ExpGolombContexts {
    fn default() -> Self {
        Self { prefix: vec![BitContext::default(); MAX_PREFIX + 1], suffix: vec![[BitContext::default(); 3]; MAX_PREFIX + 1] }
    }
}

impl ExpGolombContexts {
    pub fn encode(&mut self, enc: &mut Encoder, value: u128) {
        let v = value + 1;
        let len = 127 - v.leading_zeros() as usize;
        for i in 0..len {
            enc.encode_bit(&mut self.prefix[i], true);
        }
        if len < MAX_PREFIX {
            enc.encode_bit(&mut self.prefix[len], false);
        }
        let mut node = 0usize;
        for i in (0..len).rev() {
            let bit = (v >> i) & 1 == 1;
            let depth = len - 1 - i;
            if depth < 2 {
                enc.encode_bit(&mut self.suffix[len][node], bit);
                node = if depth == 0 { 1 + bit as usize } else { node };
            } else if i >= 64 {
                enc.encode_bypass(((v >> i) & 1) as u64, 1);
            } else {
                enc.encode_bypass((v & ((1u128 << (i + 1)) - 1)) as u64, i as u32 + 1);
                break;
            }
        }
    }

    pub fn decode(&mut self, dec: &mut Decoder<'_>) -> Result<u128> {
        let mut len = 0usize;
        while len < MAX_PREFIX && dec.decode_bit(&mut self.prefix[len])? {
            len += 1;
        }
        if len >= MAX_PREFIX {
            return Err(Error::Corrupt("exp-golomb prefix too long".into()));
        }
        let mut v: u128 = 1;
        let mut node = 0usize;
        let mut i = len;
        while i > 0 {
            i -= 1;
            let depth = len - 1 - i;
            if depth < 2 {
                let bit = dec.decode_bit(&mut self.suffix[len][node])?;
                v = (v << 1) | bit as u128;
                node = if depth == 0 { 1 + bit as usize } else { node };
            } else if i >= 64 {
                v = (v << 1) | dec.decode_bypass(1)? as u128;
            } else {
                let rest = dec.decode_bypass(i as u32 + 1)?;
                v = (v << (i + 1)) | rest as u128;
                break;
            }
        }
        Ok(v - 1)
    }
}

/// Signed integers: adaptive zero flag and sign, Exp-Golomb magnitude.
#[derive(Clone, Debug, Default)]
pub struct SignedContexts {
    pub zero: BitContext,
    pub sign: BitContext,
    pub magnitude: ExpGolombContexts,
}

impl SignedContexts {
    pub fn encode(&mut self, enc: &mut Encoder, value: i64) {
        enc.encode_bit(&mut self.zero, value != 0);
        if value != 0 {
            enc.encode_bit(&mut self.sign, value < 0);
            self.magnitude.encode(enc, value.unsigned_abs() as u128 - 1);
        }
    }

    pub fn decode(&mut self, dec: &mut Decoder<'_>) -> Result<i64> {
        if !dec.decode_bit(&mut self.zero)? {
            return Ok(0);
        }
        let neg = dec.decode_bit(&mut self.sign)?;
        let m = self.magnitude.decode(dec)? + 1;
        let m = i64::try_from(m).map_err(|_| Error::Corrupt("signed value overflows".into()))?;
        Ok(if neg { -m } else { m })
    }
}

/// Exp-Golomb order 0 with bypass bits only.
pub fn encode_bypass_golomb(enc: &mut Encoder, value: u64) {
    let v = value as u128 + 1;
    let len = 127 - v.leading_zeros();
    enc.encode_bypass(0, len);
    enc.encode_bypass(1, 1);
    if len > 0 {
        enc.encode_bypass((v & ((1u128 << len) - 1)) as u64, len);
    }
}

pub fn decode_bypass_golomb(dec: &mut Decoder<'_>) -> Result<u64> {
    let mut len = 0u32;
    while dec.decode_bypass(1)? == 0 {
        len += 1;
        if len > 63 {
            return Err(Error::Corrupt("bypass golomb prefix too long".into()));
        }
    }
    let rest = if len > 0 { dec.decode_bypass(len)? } else { 0 };
    Ok((((1u128 << len) | rest as u128) - 1) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_256_costs_one_byte_per_symbol() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cdf = CodedCdf::uniform(256).unwrap();
        let syms: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..256)).collect();
        let models = vec![&cdf; 1000];
        let bytes = ac_encode(&syms, &models).unwrap();
        let ideal: f64 = syms.iter().map(|s| cdf.cost(*s)).sum::<f64>() / 8.0;
        assert!((bytes.len() as f64 - 1000.0).abs() <= 8.0, "{} bytes", bytes.len());
        assert!(bytes.len() as f64 <= ideal + 32.0);
        assert_eq!(ac_decode(&bytes, &models, 1000).unwrap(), syms);
    }

    #[test]
    fn single_symbol_alphabet_is_nearly_free() {
        let cdf = CodedCdf::from_probabilities(&[1.0]).unwrap();
        assert_eq!(cdf.table, vec![0, TOTAL]);
        let models = vec![&cdf; 500];
        let bytes = ac_encode(&vec![0; 500], &models).unwrap();
        assert!(bytes.len() <= 8);
        assert_eq!(ac_decode(&bytes, &models, 500).unwrap(), vec![0; 500]);
    }

    #[test]
    fn zero_probability_symbol_is_rejected() {
        let cdf = CodedCdf { table: vec![0, 100, 100, TOTAL] };
        let mut enc = Encoder::new();
        assert!(matches!(enc.encode(&cdf, 1), Err(Error::ZeroProbability { .. })));
        assert!(enc.encode(&cdf, 3).is_err());
    }

    #[test]
    fn quantized_tables_are_valid() {
        let t = CodedCdf::from_probabilities(&[1e-12, 0.5, 1e-30, 0.5, 0.0]).unwrap();
        t.validate().unwrap();
        assert!(CodedCdf::from_probabilities(&[]).is_err());
        assert!(CodedCdf::from_probabilities(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn truncated_stream_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cdf = CodedCdf::from_probabilities(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let syms: Vec<usize> = (0..400).map(|_| rng.gen_range(0..4)).collect();
        let models = vec![&cdf; 400];
        let bytes = ac_encode(&syms, &models).unwrap();
        for cut in [0, 1, 3, bytes.len() / 2, bytes.len() - 1] {
            let r = ac_decode(&bytes[..cut], &models, 400);
            assert!(r.is_err(), "cut {cut} decoded");
        }
    }

    #[test]
    fn mixed_streams_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cdf = CodedCdf::from_probabilities(&[0.7, 0.2, 0.05, 0.05]).unwrap();
        let mut enc = Encoder::new();
        let mut ctx = BitContext::default();
        let mut eg = ExpGolombContexts::default();
        let mut sg = SignedContexts::default();
        let mut log = Vec::new();
        for _ in 0..2000 {
            let s = rng.gen_range(0..4);
            let b = rng.gen_bool(0.1);
            let by = rng.gen::<u64>() >> rng.gen_range(0..64);
            let e = if rng.gen_bool(0.01) { u128::MAX >> 40 } else { rng.gen_range(0..50) as u128 };
            let sv = rng.gen_range(-1000i64..1000);
            let bg = rng.gen::<u32>() as u64;
            enc.encode(&cdf, s).unwrap();
            enc.encode_bit(&mut ctx, b);
            enc.encode_bypass(by, 64);
            eg.encode(&mut enc, e);
            sg.encode(&mut enc, sv);
            encode_bypass_golomb(&mut enc, bg);
            log.push((s, b, by, e, sv, bg));
        }
        let bytes = enc.finish();
        let mut dec = Decoder::new(&bytes).unwrap();
        let mut ctx = BitContext::default();
        let mut eg = ExpGolombContexts::default();
        let mut sg = SignedContexts::default();
        for (s, b, by, e, sv, bg) in log {
            assert_eq!(dec.decode(&cdf).unwrap(), s);
            assert_eq!(dec.decode_bit(&mut ctx).unwrap(), b);
            assert_eq!(dec.decode_bypass(64).unwrap(), by);
            assert_eq!(eg.decode(&mut dec).unwrap(), e);
            assert_eq!(sg.decode(&mut dec).unwrap(), sv);
            assert_eq!(decode_bypass_golomb(&mut dec).unwrap(), bg);
        }
    }

    #[test]
    fn ten_thousand_random_streams_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let n = rng.gen_range(1..40);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(4)).collect();
            let Ok(cdf) = CodedCdf::from_probabilities(&probs) else { continue };
            let len = rng.gen_range(0..30);
            let syms: Vec<usize> = (0..len).map(|_| rng.gen_range(0..n)).collect();
            let models = vec![&cdf; len];
            let bytes = ac_encode(&syms, &models).unwrap();
            let ideal: f64 = syms.iter().map(|s| cdf.cost(*s)).sum();
            assert!(bytes.len() as f64 <= ideal / 8.0 + 32.0);
            assert_eq!(ac_decode(&bytes, &models, len).unwrap(), syms);
        }
    }

    proptest! {
        #[test]
        fn arbitrary_streams_round_trip(
            probs in prop::collection::vec(0.0f64..1.0, 1..20),
            picks in prop::collection::vec(0usize..1000, 0..200),
        ) {
            prop_assume!(probs.iter().sum::<f64>() > 0.0);
            let cdf = CodedCdf::from_probabilities(&probs).unwrap();
            let syms: Vec<usize> = picks.iter().map(|p| p % probs.len()).collect();
            let models = vec![&cdf; syms.len()];
            let bytes = ac_encode(&syms, &models).unwrap();
            prop_assert_eq!(ac_decode(&bytes, &models, syms.len()).unwrap(), syms);
        }

        #[test]
        fn corrupt_streams_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let cdf = CodedCdf::from_probabilities(&[0.3, 0.3, 0.4]).unwrap();
            let models = vec![&cdf; 100];
            let _ = ac_decode(&bytes, &models, 100);
            if let Ok(mut d) = Decoder::new(&bytes) {
                let mut eg = ExpGolombContexts::default();
                for _ in 0..20 {
                    if eg.decode(&mut d).is_err() {
                        break;
                    }
                }
            }
        }
    }
}
