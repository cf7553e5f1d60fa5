//! Coding models derived from the entropy model: a windowed discretized
//! Gaussian with an escape symbol, and the per-dimension latent tables.

use crate::entropy_model::{discrete_gaussian_prob, FactorizedBottleneck, LATENT_BOUND};
use crate::error::{Error, Result};

use super::range_coder::{decode_bypass_golomb, encode_bypass_golomb, CodedCdf, Decoder, Encoder};

/// Window half-widths are capped so the alphabet stays well inside 16 bits.
pub const MAX_HALF_WIDTH: i64 = 4096;
/// Window half-width in units of the scale-to-step ratio.
const WINDOW_SIGMAS: f32 = 6.0;
const MAX_CENTER: f32 = (1u64 << 40) as f32;

/// Quantization indices `center - half ..= center + half` plus an escape
/// symbol for everything outside, which is then sent as a sign bit and an
/// order-0 Exp-Golomb distance in bypass mode.
#[derive(Clone, Debug)]
pub struct GaussianWindow {
    center: i64,
    half: i64,
    cdf: CodedCdf,
}

impl GaussianWindow {
    /// Table for a value modeled as `N(mean, scale^2)` quantized with `step`.
    /// With `exclude_zero` the index 0 gets no probability mass.
    pub fn new(mean: f32, scale: f32, step: f32, exclude_zero: bool) -> Result<Self> {
        if !(step > 0.0) || !(scale > 0.0) || !mean.is_finite() || !scale.is_finite() {
            return Err(Error::Corrupt(format!("invalid coding distribution (mean {mean}, scale {scale}, step {step})")));
        }
        let c = (mean / step).round_ties_even();
        if !(c.abs() < MAX_CENTER) {
            return Err(Error::Corrupt("coding distribution center out of range".into()));
        }
        let center = c as i64;
        let ratio = (WINDOW_SIGMAS * scale / step).ceil();
        let half = if ratio.is_finite() && ratio < MAX_HALF_WIDTH as f32 { ratio as i64 + 1 } else { MAX_HALF_WIDTH };
        let half = half.min(MAX_HALF_WIDTH);
        let mut probs = Vec::with_capacity(2 * half as usize + 2);
        let mut inside = 0.0f64;
        // The escape keeps only the mass outside the window; excluded zero
        // mass is spread over the other symbols by normalization.
        for q in center - half..=center + half {
            let p = discrete_gaussian_prob(q as f32 * step, mean, scale, step);
            let p = if p.is_finite() && p > 0.0 { p as f64 } else { 0.0 };
            inside += p;
            probs.push(if exclude_zero && q == 0 { 0.0 } else { p });
        }
        probs.push((1.0 - inside).max(0.0));
        if probs.iter().all(|p| *p == 0.0) {
            *probs.last_mut().unwrap() = 1.0;
        }
        Ok(Self { center, half, cdf: CodedCdf::from_probabilities(&probs)? })
    }

    fn escape(&self) -> usize {
        2 * self.half as usize + 1
    }

    pub fn encode(&self, enc: &mut Encoder, q: i64) -> Result<()> {
        let d = q - self.center;
        if d.abs() <= self.half {
            return enc.encode(&self.cdf, (d + self.half) as usize);
        }
        enc.encode(&self.cdf, self.escape())?;
        enc.encode_bypass((d < 0) as u64, 1);
        encode_bypass_golomb(enc, d.unsigned_abs() - self.half as u64 - 1);
        Ok(())
    }

    pub fn decode(&self, dec: &mut Decoder<'_>) -> Result<i64> {
        let s = dec.decode(&self.cdf)?;
        if s != self.escape() {
            return Ok(self.center + s as i64 - self.half);
        }
        let neg = dec.decode_bypass(1)? == 1;
        let m = decode_bypass_golomb(dec)?;
        let m = i64::try_from(m)
            .ok()
            .and_then(|m| m.checked_add(self.half + 1))
            .filter(|m| *m < 1 << 50)
            .ok_or_else(|| Error::Corrupt("escaped value out of range".into()))?;
        Ok(if neg { self.center - m } else { self.center + m })
    }

    /// Ideal cost of `q` under the quantized table.
    pub fn cost(&self, q: i64) -> f64 {
        let d = q - self.center;
        if d.abs() <= self.half {
            self.cdf.cost((d + self.half) as usize)
        } else {
            let m = d.unsigned_abs() - self.half as u64;
            self.cdf.cost(self.escape()) + 1.0 + (2 * (64 - m.leading_zeros()) - 1) as f64
        }
    }
}

/// One coding table per latent dimension over `-8..=8`.
pub fn latent_tables(b: &FactorizedBottleneck<f32>) -> Result<Vec<CodedCdf>> {
    (0..b.dims())
        .map(|d| {
            let probs: Vec<f64> = (-LATENT_BOUND..=LATENT_BOUND).map(|y| b.interval_prob(d, y as f32).max(0.0) as f64).collect();
            CodedCdf::from_probabilities(&probs)
        })
        .collect()
}

pub fn latent_symbol(v: i8) -> Result<usize> {
    let v = v as i32;
    if v.abs() > LATENT_BOUND {
        return Err(Error::InvalidArgument(format!("latent {v} outside [-{LATENT_BOUND}, {LATENT_BOUND}]")));
    }
    Ok((v + LATENT_BOUND) as usize)
}

pub fn symbol_latent(s: usize) -> i8 {
    (s as i32 - LATENT_BOUND) as i8
}
