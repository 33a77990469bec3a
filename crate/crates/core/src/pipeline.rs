//! Sparsify, quantize and scale one model update into packets, and rebuild it
//! at the receiver.
//!
//! The top `k` coordinates, in descending magnitude order, are cut into
//! consecutive groups of `P_1..P_R`. Group `r` is quantized at `y_r` bits and
//! written to packet `r`. Centroid IDs carry the unscaled quantized value;
//! the receiver divides by `B`, which travels next to the packets as 8 bytes
//! of per-round metadata. Coordinates outside the top `k` decode to zero.

use serde::{Deserialize, Serialize};

use crate::optimizer::{self, BudgetConfig, PartitionPlan, ScaleState};
use crate::packet::{self, Packet, PacketEntry, HEADER_BITS};
use crate::quantizer::{self, QuantizerKind};
use crate::rng;
use crate::update::{self, PowerLawFit, RankedUpdates, UpdateVector};
use crate::{Error, Result};

/// Bytes of out-of-band metadata per client per round (the scale factor `B`).
pub const SCALE_METADATA_BYTES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub kind: QuantizerKind,
    pub budget: BudgetConfig,
    pub k_stride: usize,
    pub error_feedback: bool,
}

impl CompressionConfig {
    pub fn new(kind: QuantizerKind, budget: BudgetConfig) -> Result<Self> {
        let cfg = Self {
            kind,
            budget,
            k_stride: 1,
            error_feedback: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_k_stride(mut self, k_stride: usize) -> Self {
        self.k_stride = k_stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget.h != HEADER_BITS {
            return Err(Error::InvalidInput(format!(
                "header is {HEADER_BITS} bits, budget says {}",
                self.budget.h
            )));
        }
        if !self.budget.b.is_multiple_of(8) {
            return Err(Error::InvalidInput(format!(
                "packet size {} bits is not a whole number of bytes",
                self.budget.b
            )));
        }
        if self.k_stride == 0 {
            return Err(Error::InvalidInput("k_stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedRound {
    pub packets: Vec<Vec<u8>>,
    pub plan: PartitionPlan,
    pub fit: PowerLawFit,
    /// Out-of-band bytes sent alongside the packets.
    pub metadata_bytes: usize,
    /// Filled in once the receiver side has been evaluated.
    pub measured_rel_error: Option<f64>,
}

impl CompressedRound {
    pub fn packet_bytes(&self) -> usize {
        self.packets.iter().map(Vec::len).sum()
    }

    pub fn uplink_bytes(&self) -> usize {
        self.packet_bytes() + self.metadata_bytes
    }

    /// Scale factor the receiver divides by.
    pub fn scale_b(&self) -> f64 {
        self.plan.scale.b
    }
}

/// Per-round metadata that travels next to a packet file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMeta {
    pub client_id: u64,
    pub round: u64,
    #[serde(rename = "B")]
    pub b: f64,
    pub gamma: f64,
    pub bytes: usize,
    pub d: usize,
}

fn check_dim(u: &UpdateVector, cfg: &CompressionConfig) -> Result<()> {
    if u.dim() != cfg.budget.d {
        return Err(Error::InvalidInput(format!(
            "update has d = {}, budget expects {}",
            u.dim(),
            cfg.budget.d
        )));
    }
    Ok(())
}

/// Full compression of one update: rank, fit, optimize the plan, packetize.
pub fn compress(
    u: &UpdateVector,
    cfg: &CompressionConfig,
    scale: &ScaleState,
    seed: u64,
) -> Result<CompressedRound> {
    cfg.validate()?;
    check_dim(u, cfg)?;
    let ranked = update::rank_by_magnitude(u)?;
    let fit = update::fit_power_law(&ranked, u)?;
    compress_with_fit(u, &ranked, fit, cfg, scale, seed)
}

/// Compression with an already computed ranking and fit.
pub fn compress_with_fit(
    u: &UpdateVector,
    ranked: &RankedUpdates,
    fit: PowerLawFit,
    cfg: &CompressionConfig,
    scale: &ScaleState,
    seed: u64,
) -> Result<CompressedRound> {
    let plan = optimizer::optimize_plan(&fit, &cfg.budget, scale, cfg.kind, cfg.k_stride)?;
    let packets = packetize(u, ranked, &plan, &cfg.budget, seed)?;
    Ok(CompressedRound {
        packets,
        plan,
        fit,
        metadata_bytes: SCALE_METADATA_BYTES,
        measured_rel_error: None,
    })
}

/// Fixed-length baseline: `y_fixed` bits for every value, no scaling.
pub fn compress_fixed(
    u: &UpdateVector,
    ranked: &RankedUpdates,
    fit: PowerLawFit,
    y_fixed: u32,
    cfg: &CompressionConfig,
    seed: u64,
) -> Result<CompressedRound> {
    check_dim(u, cfg)?;
    let plan =
        optimizer::fixed_length_plan(y_fixed, &fit, &cfg.budget, &ScaleState::unit(), cfg.kind)?;
    let packets = packetize(u, ranked, &plan, &cfg.budget, seed)?;
    Ok(CompressedRound {
        packets,
        plan,
        fit,
        metadata_bytes: 0,
        measured_rel_error: None,
    })
}

/// Writes the plan's groups of top-ranked coordinates into packets.
pub fn packetize(
    u: &UpdateVector,
    ranked: &RankedUpdates,
    plan: &PartitionPlan,
    budget: &BudgetConfig,
    seed: u64,
) -> Result<Vec<Vec<u8>>> {
    let values = u.values();
    let top = ranked.top(plan.k);
    if top.len() != plan.k {
        return Err(Error::InvalidInput(format!(
            "plan keeps {} updates, vector has {}",
            plan.k,
            top.len()
        )));
    }
    let mut packets = Vec::with_capacity(plan.parts.len());
    let mut start = 0;
    for (r, (&p, &y)) in plan.parts.iter().zip(&plan.code_bits).enumerate() {
        if p == 0 {
            continue;
        }
        let idx = &top[start..start + p];
        start += p;
        let group: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        let block = quantizer::quantize(plan.kind, &group, y, rng::derive_seed(seed, &[r as u64]))?;
        let entries = idx
            .iter()
            .zip(&block.cids)
            .map(|(&i, &cid)| PacketEntry { pid: i as u32, cid })
            .collect();
        let pkt = Packet {
            kind: plan.kind,
            s: budget.s,
            y,
            meta: block.meta,
            entries,
        };
        packets.push(pkt.encode(budget.b)?);
    }
    Ok(packets)
}

/// Rebuilds the dense update: dequantized values divided by `scale_b` at the
/// transmitted positions, zero elsewhere.
pub fn decompress(packets: &[Vec<u8>], d: usize, scale_b: f64) -> Result<UpdateVector> {
    if !(scale_b.is_finite() && scale_b > 0.0) {
        return Err(Error::InvalidInput(format!("bad scale factor {scale_b}")));
    }
    let mut out = vec![0.0; d];
    let mut seen = vec![false; d];
    for bytes in packets {
        let pkt = packet::decode_packet(bytes)?;
        for e in &pkt.entries {
            let pid = e.pid as usize;
            if pid >= d {
                return Err(Error::CorruptPacket(format!(
                    "position {pid} outside d = {d}"
                )));
            }
            if std::mem::replace(&mut seen[pid], true) {
                return Err(Error::CorruptPacket(format!("position {pid} sent twice")));
            }
            out[pid] = quantizer::dequantize_one(pkt.kind, pkt.y, &pkt.meta, e.cid) / scale_b;
        }
    }
    UpdateVector::new(out)
}

/// `||u - u_hat||² / ||u||²`.
pub fn measured_error(u: &UpdateVector, u_hat: &UpdateVector) -> Result<f64> {
    if u.dim() != u_hat.dim() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch {} vs {}",
            u.dim(),
            u_hat.dim()
        )));
    }
    let norm = u.norm_sq();
    let err: f64 = u
        .values()
        .iter()
        .zip(u_hat.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if norm == 0.0 {
        return if err == 0.0 {
            Ok(0.0)
        } else {
            Err(Error::InvalidInput("reference update is zero".into()))
        };
    }
    Ok(err / norm)
}

/// Residual accumulator for error-compensated compression.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorFeedback {
    residual: Vec<f64>,
}

impl ErrorFeedback {
    pub fn new(d: usize) -> Self {
        Self {
            residual: vec![0.0; d],
        }
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }

    /// The vector actually handed to the compressor: `u + residual`.
    pub fn corrected(&self, u: &UpdateVector) -> Result<UpdateVector> {
        UpdateVector::new(
            u.values()
                .iter()
                .zip(&self.residual)
                .map(|(a, e)| a + e)
                .collect(),
        )
    }

    /// Stores what the receiver did not get: `corrected - u_hat`.
    pub fn absorb(&mut self, corrected: &UpdateVector, u_hat: &UpdateVector) {
        for ((e, c), h) in self
            .residual
            .iter_mut()
            .zip(corrected.values())
            .zip(u_hat.values())
        {
            *e = c - h;
        }
    }
}
