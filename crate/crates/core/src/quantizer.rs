//! Unbiased scalar quantizers and their analytic error models.
//!
//! Both quantizers use stochastic rounding between the two centroids that
//! bracket a value, so `E[dequantize(quantize(v))] = v`.
//!
//! * PQ: `2^y` centroids uniform on `[lo, hi]`, the block range.
//! * QSGD: one sign bit plus a `(y-1)`-bit magnitude level, levels uniform
//!   on `[0, ||v||_2]`. With `y = 1` the only bit is the sign and the value
//!   is `±||v||_2`, picked so that the mean is `v`.
//!
//! Centroid metadata travels as binary32. Ranges are rounded outward when
//! narrowed to binary32 so every value stays inside its centroid grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    Pq,
    Qsgd,
}

impl QuantizerKind {
    pub fn wire_id(self) -> u8 {
        match self {
            QuantizerKind::Pq => 0,
            QuantizerKind::Qsgd => 1,
        }
    }

    pub fn from_wire_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(QuantizerKind::Pq),
            1 => Some(QuantizerKind::Qsgd),
            _ => None,
        }
    }
}

impl std::str::FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pq" => Ok(QuantizerKind::Pq),
            "qsgd" => Ok(QuantizerKind::Qsgd),
            other => Err(Error::InvalidInput(format!("unknown quantizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CentroidMeta {
    Pq { lo: f32, hi: f32 },
    Qsgd { l2_norm: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub kind: QuantizerKind,
    pub y: u32,
    pub cids: Vec<u32>,
    pub meta: CentroidMeta,
}

pub fn check_bits(y: u32) -> Result<()> {
    if (1..=32).contains(&y) {
        Ok(())
    } else {
        Err(Error::InvalidBits(y))
    }
}

/// Largest value representable in `y` bits.
#[inline]
pub(crate) fn max_code(y: u32) -> u64 {
    (1u64 << y) - 1
}

fn f32_down(x: f64) -> f32 {
    let r = x as f32;
    if (r as f64) > x {
        next_toward_neg_inf(r)
    } else {
        r
    }
}

fn f32_up(x: f64) -> f32 {
    let r = x as f32;
    if (r as f64) < x {
        -next_toward_neg_inf(-r)
    } else {
        r
    }
}

fn next_toward_neg_inf(x: f32) -> f32 {
    if x.is_nan() || x == f32::NEG_INFINITY {
        return x;
    }
    if x == 0.0 {
        return -f32::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f32::from_bits(bits - 1)
    } else {
        f32::from_bits(bits + 1)
    }
}

/// Quantizes `values` with the stochastic rounding stream derived from `seed`.
pub fn quantize(kind: QuantizerKind, values: &[f64], y: u32, seed: u64) -> Result<QuantizedBlock> {
    let mut rng = rng::stream(seed, &[rng::TAG_QUANT]);
    quantize_with(kind, values, y, &mut rng)
}

pub fn quantize_with<R: Rng + ?Sized>(
    kind: QuantizerKind,
    values: &[f64],
    y: u32,
    rng: &mut R,
) -> Result<QuantizedBlock> {
    check_bits(y)?;
    if values.is_empty() {
        return Err(Error::InvalidInput("cannot quantize an empty block".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in block".into()));
    }
    let (cids, meta) = match kind {
        QuantizerKind::Pq => quantize_pq(values, y, rng),
        QuantizerKind::Qsgd => quantize_qsgd(values, y, rng),
    };
    Ok(QuantizedBlock {
        kind,
        y,
        cids,
        meta,
    })
}

/// Rounds `t` (in level units, `0 <= t <= top`) to `floor(t)` or
/// `floor(t) + 1` with probability equal to the fractional part.
fn stochastic_level<R: Rng + ?Sized>(t: f64, top: u64, rng: &mut R) -> u64 {
    let t = t.clamp(0.0, top as f64);
    let floor = t.floor();
    let frac = t - floor;
    let level = floor as u64;
    if level >= top {
        return top;
    }
    if frac > 0.0 && rng.gen::<f64>() < frac {
        level + 1
    } else {
        level
    }
}

fn quantize_pq<R: Rng + ?Sized>(values: &[f64], y: u32, rng: &mut R) -> (Vec<u32>, CentroidMeta) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = f32_down(min);
    let hi = f32_up(max);
    let meta = CentroidMeta::Pq { lo, hi };
    if lo == hi {
        return (vec![0; values.len()], meta);
    }
    let top = max_code(y);
    let (lo, hi) = (lo as f64, hi as f64);
    let scale = top as f64 / (hi - lo);
    let cids = values
        .iter()
        .map(|&v| stochastic_level((v - lo) * scale, top, rng) as u32)
        .collect();
    (cids, meta)
}

fn quantize_qsgd<R: Rng + ?Sized>(values: &[f64], y: u32, rng: &mut R) -> (Vec<u32>, CentroidMeta) {
    let norm = f32_up(values.iter().map(|v| v * v).sum::<f64>().sqrt());
    let meta = CentroidMeta::Qsgd { l2_norm: norm };
    let norm = norm as f64;

    if y == 1 {
        // cid 1 = +norm, cid 0 = -norm; P(+) = (1 + v / norm) / 2.
        let cids = values
            .iter()
            .map(|&v| {
                if norm == 0.0 {
                    return 1;
                }
                let p_plus = (0.5 * (1.0 + v / norm)).clamp(0.0, 1.0);
                (rng.gen::<f64>() < p_plus) as u32
            })
            .collect();
        return (cids, meta);
    }

    let top = max_code(y - 1);
    let sign_bit = 1u64 << (y - 1);
    let cids = values
        .iter()
        .map(|&v| {
            let level = if norm == 0.0 {
                0
            } else {
                stochastic_level(v.abs() / norm * top as f64, top, rng)
            };
            let sign = if v >= 0.0 { sign_bit } else { 0 };
            (sign | level) as u32
        })
        .collect();
    (cids, meta)
}

/// Decodes one centroid ID against the block metadata.
pub fn dequantize_one(kind: QuantizerKind, y: u32, meta: &CentroidMeta, cid: u32) -> f64 {
    match (kind, meta) {
        (QuantizerKind::Pq, CentroidMeta::Pq { lo, hi }) => {
            let (lo, hi) = (*lo as f64, *hi as f64);
            if lo == hi {
                lo
            } else {
                lo + cid as f64 * (hi - lo) / max_code(y) as f64
            }
        }
        (QuantizerKind::Qsgd, CentroidMeta::Qsgd { l2_norm }) => {
            let norm = *l2_norm as f64;
            if y == 1 {
                return if cid & 1 == 1 { norm } else { -norm };
            }
            let top = max_code(y - 1);
            let cid = cid as u64;
            let level = cid & top;
            let sign = if cid >> (y - 1) & 1 == 1 { 1.0 } else { -1.0 };
            sign * level as f64 * norm / top as f64
        }
        _ => panic!("centroid metadata does not match quantizer kind"),
    }
}

pub fn dequantize(block: &QuantizedBlock) -> Vec<f64> {
    block
        .cids
        .iter()
        .map(|&cid| dequantize_one(block.kind, block.y, &block.meta, cid))
        .collect()
}

/// Relative quantization error `Q(z, y)` for `z` values at `y` bits, with
/// `y` allowed to be fractional.
///
/// PQ: `z / (2^y - 1)^2`. QSGD: `min(z / 2^(2y), sqrt(z) / 2^y)`.
pub fn quant_error(kind: QuantizerKind, z: f64, y: f64) -> f64 {
    let two_y = y.exp2();
    match kind {
        QuantizerKind::Pq => {
            let g = two_y - 1.0;
            z / (g * g)
        }
        QuantizerKind::Qsgd => (z / (two_y * two_y)).min(z.sqrt() / two_y),
    }
}

/// [`quant_error`] at integral arguments.
pub fn quant_error_model(kind: QuantizerKind, z: usize, y: u32) -> f64 {
    quant_error(kind, z as f64, y as f64)
}
