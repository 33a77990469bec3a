//! Model-update vectors, magnitude ranking and the power-law decay fit.
//!
//! Ranked magnitudes of a typical update decay roughly as `phi * l^alpha`
//! (`l` the 1-based rank, `alpha < 0`). The fit drives the error bound in
//! [`crate::optimizer`] through `beta = 2 * alpha + 1`.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// Ranks whose magnitude is below this are left out of the log-log fit.
pub const MAGNITUDE_FLOOR: f64 = 1e-12;

/// `beta` is kept at least this far from zero so `d^beta - 1` never vanishes.
pub const BETA_EPSILON: f64 = 1e-6;

const UVEC_MAGIC: &[u8; 4] = b"UVEC";

/// Dense model-update vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector {
    values: Vec<f64>,
}

impl UpdateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("update vector must have d >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            values: vec![0.0; d.max(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Reads the little-endian `UVEC` file format: magic, `u64` dimension,
    /// then `d` binary32 values.
    pub fn read_from<R: Read>(mut reader: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != UVEC_MAGIC {
            return Err(Error::InvalidInput("missing UVEC magic".into()));
        }
        let mut dim = [0u8; 8];
        reader.read_exact(&mut dim)?;
        let d = u64::from_le_bytes(dim) as usize;
        let mut raw = vec![
            0u8;
            d.checked_mul(4).ok_or_else(|| {
                Error::InvalidInput("dimension overflows".into())
            })?
        ];
        reader.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(values)
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> Result<()> {
        writer.write_all(UVEC_MAGIC)?;
        writer.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for &v in &self.values {
            writer.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Coordinates of an update ordered by non-increasing magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedUpdates {
    /// `order[l]` is the index of the `(l+1)`-th largest magnitude.
    pub order: Vec<usize>,
    pub source_norm_sq: f64,
}

impl RankedUpdates {
    pub fn top(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }
}

/// Sorts coordinates by descending `|value|`, ties by ascending index.
pub fn rank_by_magnitude(u: &UpdateVector) -> Result<RankedUpdates> {
    let values = u.values();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite update value".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then_with(|| a.cmp(&b))
    });
    Ok(RankedUpdates {
        order,
        source_norm_sq: u.norm_sq(),
    })
}

/// Fitted decay `|U{l}| ~ phi * l^alpha`, with `beta = 2 * alpha + 1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub phi: f64,
    pub beta: f64,
}

impl PowerLawFit {
    /// Builds a fit from `alpha` and `phi`, clamping `beta` away from zero.
    pub fn from_alpha(alpha: f64, phi: f64) -> Self {
        Self {
            alpha,
            phi,
            beta: clamp_beta(2.0 * alpha + 1.0),
        }
    }
}

fn clamp_beta(beta: f64) -> f64 {
    if beta.abs() >= BETA_EPSILON {
        beta
    } else if beta >= 0.0 {
        BETA_EPSILON
    } else {
        -BETA_EPSILON
    }
}

/// Ordinary least squares of `ln |U{l}|` on `ln l` over ranks above
/// [`MAGNITUDE_FLOOR`].
///
/// The slope is reported as-is. Ranked magnitudes are non-increasing, so it
/// is never positive; a flat vector yields `alpha = 0` (`beta = 1`).
pub fn fit_power_law(ranked: &RankedUpdates, u: &UpdateVector) -> Result<PowerLawFit> {
    let values = u.values();
    if values.len() < 2 {
        return Err(Error::DegenerateDistribution(format!(
            "need d >= 2 to fit a decay, got d = {}",
            values.len()
        )));
    }
    if ranked.order.len() != values.len() {
        return Err(Error::InvalidInput("ranking does not match vector".into()));
    }

    let points: Vec<(f64, f64)> = ranked
        .order
        .iter()
        .map(|&idx| values[idx].abs())
        // Everything after the first tiny rank is at most as large.
        .take_while(|&m| m > MAGNITUDE_FLOOR)
        .enumerate()
        .map(|(l, m)| (((l + 1) as f64).ln(), m.ln()))
        .collect();
    if points.len() < 2 {
        return Err(Error::DegenerateDistribution(
            "fewer than two nonzero magnitudes".into(),
        ));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (sxx, sxy) = points.iter().fold((0.0, 0.0), |(sxx, sxy), &(x, y)| {
        let dx = x - mean_x;
        (sxx + dx * dx, sxy + dx * (y - mean_y))
    });
    let mut slope = sxy / sxx;
    // Flat data can leave a rounding-level positive slope behind.
    if slope > 0.0 {
        slope = 0.0;
    }
    let intercept = mean_y - slope * mean_x;
    Ok(PowerLawFit::from_alpha(slope, intercept.exp()))
}
