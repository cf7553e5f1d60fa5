//! Anchor location coding: lattice quantization, Morton ordering and
//! adaptive Exp-Golomb coding of the Morton-code deltas.

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::range_coder::{decode_bypass_golomb, encode_bypass_golomb, Decoder, Encoder, ExpGolombContexts, SignedContexts};

pub const AXIS_BITS: u32 = 30;
const MAX_EXTENT: i64 = 1 << AXIS_BITS;

/// Integer lattice index of every position.
pub fn quantize_positions(positions: &[Vec3<f64>], step: f64) -> Result<Vec<[i64; 3]>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("location step must be positive, got {step}")));
    }
    positions
        .iter()
        .map(|p| {
            let mut l = [0i64; 3];
            for a in 0..3 {
                let v = (p[a] / step).round_ties_even();
                if !(v.abs() < 4.0e18) {
                    return Err(Error::NonFinite("anchor location".into()));
                }
                l[a] = v as i64;
            }
            Ok(l)
        })
        .collect()
}

/// World position of a lattice index.
pub fn lattice_position(l: &[i64; 3], step: f64) -> Vec3<f64> {
    [l[0] as f64 * step, l[1] as f64 * step, l[2] as f64 * step]
}

fn spread(v: u64) -> u128 {
    let mut out = 0u128;
    for b in 0..AXIS_BITS {
        out |= (((v >> b) & 1) as u128) << (3 * b);
    }
    out
}

fn compact(m: u128) -> u64 {
    let mut out = 0u64;
    for b in 0..AXIS_BITS {
        out |= (((m >> (3 * b)) & 1) as u64) << b;
    }
    out
}

/// Interleaves three 30-bit coordinates, x in the lowest bit.
pub fn morton_encode(v: [u64; 3]) -> u128 {
    spread(v[0]) | (spread(v[1]) << 1) | (spread(v[2]) << 2)
}

pub fn morton_decode(m: u128) -> [u64; 3] {
    [compact(m), compact(m >> 1), compact(m >> 2)]
}

/// Per-axis minimum and the origin-relative coordinates; errors when the
/// extent does not fit the Morton code.
pub fn relative_lattice(lattice: &[[i64; 3]]) -> Result<([i64; 3], Vec<[u64; 3]>)> {
    let mut origin = [0i64; 3];
    if let Some(first) = lattice.first() {
        origin = *first;
        for l in lattice {
            for a in 0..3 {
                origin[a] = origin[a].min(l[a]);
            }
        }
    }
    let mut rel = Vec::with_capacity(lattice.len());
    for l in lattice {
        let mut r = [0u64; 3];
        for a in 0..3 {
            let d = l[a].checked_sub(origin[a]).filter(|d| *d < MAX_EXTENT);
            r[a] = d.ok_or_else(|| Error::InvalidArgument(format!("lattice extent exceeds 2^{AXIS_BITS}")))? as u64;
        }
        rel.push(r);
    }
    Ok((origin, rel))
}

/// Permutation sorting the points by Morton code, ties by original index.
pub fn morton_order(lattice: &[[i64; 3]]) -> Result<Vec<usize>> {
    let (_, rel) = relative_lattice(lattice)?;
    let codes: Vec<u128> = rel.iter().map(|r| morton_encode(*r)).collect();
    let mut order: Vec<usize> = (0..lattice.len()).collect();
    order.sort_by_key(|i| (codes[*i], *i));
    Ok(order)
}

/// Codes a Morton-sorted lattice (count known to the decoder).
pub fn encode_lattice(enc: &mut Encoder, lattice: &[[i64; 3]]) -> Result<()> {
    let (origin, rel) = relative_lattice(lattice)?;
    let mut sc = SignedContexts::default();
    for o in origin {
        sc.encode(enc, o);
    }
    let mut eg = ExpGolombContexts::default();
    let mut prev = 0u128;
    for r in &rel {
        let m = morton_encode(*r);
        if m < prev {
            return Err(Error::InvalidArgument("lattice is not in Morton order".into()));
        }
        eg.encode(enc, m - prev);
        prev = m;
    }
    Ok(())
}

pub fn decode_lattice(dec: &mut Decoder<'_>, count: usize) -> Result<Vec<[i64; 3]>> {
    let mut sc = SignedContexts::default();
    let mut origin = [0i64; 3];
    for o in &mut origin {
        *o = sc.decode(dec)?;
        if o.abs() > 1 << 60 {
            return Err(Error::Corrupt("location origin out of range".into()));
        }
    }
    let mut eg = ExpGolombContexts::default();
    let mut prev = 0u128;
    let mut out = Vec::new();
    for _ in 0..count {
        let d = eg.decode(dec)?;
        prev = prev.checked_add(d).filter(|m| *m < 1u128 << (3 * AXIS_BITS)).ok_or_else(|| Error::Corrupt("Morton code overflow".into()))?;
        let r = morton_decode(prev);
        out.push([origin[0] + r[0] as i64, origin[1] + r[1] as i64, origin[2] + r[2] as i64]);
    }
    Ok(out)
}

/// Standalone location stream: count, then the Morton-sorted lattice.
/// Positions come back quantized and in Morton order.
pub fn encode_anchor_locations(positions: &[Vec3<f64>], step: f64) -> Result<Vec<u8>> {
    let lattice = quantize_positions(positions, step)?;
    let order = morton_order(&lattice)?;
    let sorted: Vec<[i64; 3]> = order.iter().map(|i| lattice[*i]).collect();
    let mut enc = Encoder::new();
    encode_bypass_golomb(&mut enc, sorted.len() as u64);
    encode_lattice(&mut enc, &sorted)?;
    Ok(enc.finish())
}

pub fn decode_anchor_locations(bytes: &[u8], step: f64) -> Result<Vec<Vec3<f64>>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("location step must be positive, got {step}")));
    }
    let mut dec = Decoder::new(bytes)?;
    let n = decode_bypass_golomb(&mut dec)?;
    if n > 1 << 28 {
        return Err(Error::Corrupt("implausible location count".into()));
    }
    Ok(decode_lattice(&mut dec, n as usize)?.iter().map(|l| lattice_position(l, step)).collect())
}
