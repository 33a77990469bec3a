//! Compression-error bound and the per-packet code-length optimizer.
//!
//! The top `k` coordinates, in descending magnitude order, are split into `R`
//! packets of `P_1..P_R` entries. Every packet has the same bit budget `b`,
//! so packet `r` spends `y_r = floor((b - H) / P_r) - s` bits per value. The
//! error bound is
//!
//! ```text
//! gamma = (d^β - (k+1)^β) / (d^β - 1)
//!       + Σ_r (Q(P_r, y_r) / B² + 1 / B_c²) · (Z_r^β - Z_{r-1}^β) / (d^β - 1)
//! ```
//!
//! with `Z_r = P_1 + .. + P_r`, the boundary `Z_0` taken as 1, and
//! `1/B + 1/B_c = 1`. For a fixed `k` the split is found by sequential
//! minimal optimization: repeatedly re-split two adjacent packets to
//! minimize their share of the bound until nothing moves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::quantizer::{quant_error_model, QuantizerKind};
use crate::update::PowerLawFit;
use crate::{Error, Result};

/// Cap on full SMO sweeps; the fixed-point check normally stops far earlier.
pub const MAX_SWEEPS: usize = 100;

/// Relative difference below which two objective values are a tie. Keeps
/// rounding noise from flipping splits back and forth when the bound is flat.
pub const TIE_REL: f64 = 1e-13;

/// Times the scale factor may be raised and the plan re-solved in one call.
const MAX_RESCALE: usize = 4;

/// k values per parallel work item in the k search.
const K_CHUNK: usize = 64;

/// Bits needed for a position ID in a `d`-dimensional vector: `ceil(log2 d)`.
pub fn position_bits(d: usize) -> u32 {
    if d <= 1 {
        0
    } else {
        usize::BITS - (d - 1).leading_zeros()
    }
}

/// Per-client uplink budget for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Bits per packet.
    pub b: usize,
    /// Packets per client per round.
    pub r: usize,
    /// Header bits per packet.
    pub h: usize,
    /// Bits per position ID.
    pub s: u32,
    /// Model dimension.
    pub d: usize,
}

impl BudgetConfig {
    pub fn new(d: usize, b: usize, r: usize, h: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidInput(format!("model dimension {d} < 2")));
        }
        if r == 0 {
            return Err(Error::InvalidInput("need at least one packet".into()));
        }
        let s = position_bits(d);
        if b <= h + s as usize + 1 {
            return Err(Error::Infeasible(format!(
                "packet of {b} bits cannot hold a {h}-bit header and one {s}+1-bit entry"
            )));
        }
        Ok(Self { b, r, h, s, d })
    }

    pub fn payload_bits(&self) -> usize {
        self.b - self.h
    }

    /// Most entries one packet can carry (every value at 1 bit).
    pub fn max_per_packet(&self) -> usize {
        self.payload_bits() / (self.s as usize + 1)
    }

    pub fn k_min(&self) -> usize {
        self.r
    }

    /// `R * floor((b - H) / (s + 1))`, capped at `d`.
    pub fn k_max(&self) -> usize {
        (self.r * self.max_per_packet()).min(self.d)
    }

    /// Code length for a packet of `p` entries, `None` when even one bit per
    /// value does not fit.
    pub fn code_bits(&self, p: usize) -> Option<u32> {
        if p == 0 {
            return None;
        }
        let per_entry = self.payload_bits() / p;
        let y = per_entry.checked_sub(self.s as usize)?;
        if y == 0 {
            None
        } else {
            Some(y.min(32) as u32)
        }
    }
}

/// Scale factor `B` applied to quantized values, and its companion `B_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleState {
    #[serde(rename = "B")]
    pub b: f64,
    pub prev_max_q: f64,
}

impl ScaleState {
    /// `B = prev_max_q + 1`, the previous round's worst packet error plus one.
    pub fn from_prev_max_q(prev_max_q: f64) -> Self {
        Self {
            b: prev_max_q + 1.0,
            prev_max_q,
        }
    }

    /// Round-zero state: the error of a full packet at one bit per value.
    pub fn initial(kind: QuantizerKind, cfg: &BudgetConfig) -> Self {
        let worst = cfg.k_max().div_ceil(cfg.r).max(1);
        Self::from_prev_max_q(quant_error_model(kind, worst, 1))
    }

    /// No scaling (`B = 1`).
    pub fn unit() -> Self {
        Self::from_prev_max_q(0.0)
    }

    pub fn b_c(&self) -> f64 {
        self.b / (self.b - 1.0)
    }

    /// `1 / B_c² = ((B - 1) / B)²`, finite at `B = 1`.
    pub fn inv_bc_sq(&self) -> f64 {
        let t = (self.b - 1.0) / self.b;
        t * t
    }
}

/// Output of the optimizer: how many updates to keep and how to pack them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub kind: QuantizerKind,
    pub k: usize,
    pub parts: Vec<usize>,
    pub code_bits: Vec<u32>,
    pub gamma: f64,
    /// Scale the bound was evaluated under.
    pub scale: ScaleState,
}

impl PartitionPlan {
    pub fn packet_errors(&self) -> Vec<f64> {
        self.parts
            .iter()
            .zip(&self.code_bits)
            .map(|(&p, &y)| quant_error_model(self.kind, p, y))
            .collect()
    }

    pub fn max_q(&self) -> f64 {
        self.packet_errors().into_iter().fold(0.0, f64::max)
    }

    /// Scale to use in the client's next round.
    pub fn next_scale(&self) -> ScaleState {
        ScaleState::from_prev_max_q(self.max_q())
    }

    /// Payload bits of packet `r` (header excluded).
    pub fn payload_bits(&self, s: u32) -> Vec<usize> {
        self.parts
            .iter()
            .zip(&self.code_bits)
            .map(|(&p, &y)| p * (s + y) as usize)
            .collect()
    }
}

/// The bound for one `(fit, budget, scale, quantizer)` with the power and
/// per-packet-size coefficient tables precomputed, so the optimizer only does
/// lookups.
#[derive(Debug, Clone)]
pub struct ErrorModel {
    beta: f64,
    d_beta: f64,
    denom: f64,
    b_sq: f64,
    inv_bc_sq: f64,
    kind: QuantizerKind,
    cfg: BudgetConfig,
    /// `pow[z] = z^β`, with `pow[0] = 1` for the `Z_0` boundary.
    pow: Vec<f64>,
    /// `coef[p] = Q(p, y(p)) / B² + 1 / B_c²`; `coef[0]` unused.
    coef: Vec<f64>,
}

impl ErrorModel {
    pub fn new(
        fit: &PowerLawFit,
        cfg: &BudgetConfig,
        scale: &ScaleState,
        kind: QuantizerKind,
    ) -> Result<Self> {
        if !(fit.beta.is_finite() && fit.beta != 0.0) {
            return Err(Error::InvalidInput(format!("unusable beta {}", fit.beta)));
        }
        if !(scale.b >= 1.0 && scale.b.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "scale factor B = {} < 1",
                scale.b
            )));
        }
        let beta = fit.beta;
        let d_beta = (cfg.d as f64).powf(beta);
        let denom = d_beta - 1.0;
        let zmax = cfg.k_max() + 1;
        let pow = (0..=zmax).map(|z| boundary_pow(z, beta)).collect();
        let b_sq = scale.b * scale.b;
        let inv_bc_sq = scale.inv_bc_sq();
        let pmax = cfg.max_per_packet();
        let mut coef = vec![f64::NAN; pmax + 1];
        for (p, c) in coef.iter_mut().enumerate().skip(1) {
            let y = cfg.code_bits(p).expect("p <= max_per_packet is feasible");
            *c = quant_error_model(kind, p, y) / b_sq + inv_bc_sq;
        }
        Ok(Self {
            beta,
            d_beta,
            denom,
            b_sq,
            inv_bc_sq,
            kind,
            cfg: *cfg,
            pow,
            coef,
        })
    }

    pub fn cfg(&self) -> &BudgetConfig {
        &self.cfg
    }

    pub fn kind(&self) -> QuantizerKind {
        self.kind
    }

    #[inline]
    fn pow_z(&self, z: usize) -> f64 {
        match self.pow.get(z) {
            Some(&v) => v,
            None => boundary_pow(z, self.beta),
        }
    }

    /// Share of the bound from dropping ranks `k+1..d`.
    pub fn sparsification_term(&self, k: usize) -> f64 {
        (self.d_beta - self.pow_z(k + 1)) / self.denom
    }

    /// Share of the bound from a packet of `p` entries covering ranks after
    /// `z_lo`, at the packet's own code length.
    #[inline]
    pub fn packet_term(&self, z_lo: usize, p: usize) -> f64 {
        self.coef[p] * (self.pow_z(z_lo + p) - self.pow_z(z_lo)) / self.denom
    }

    /// Same as [`Self::packet_term`] at an explicit code length.
    pub fn packet_term_at(&self, z_lo: usize, p: usize, y: u32) -> f64 {
        if p == 0 {
            return 0.0;
        }
        let c = quant_error_model(self.kind, p, y) / self.b_sq + self.inv_bc_sq;
        c * (self.pow_z(z_lo + p) - self.pow_z(z_lo)) / self.denom
    }

    /// Objective of the atomic operation: the two packets' share of the bound
    /// when `x` entries after prefix `z_left` are split `x - p_right | p_right`.
    #[inline]
    pub fn pair_objective(&self, x: usize, z_left: usize, p_right: usize) -> f64 {
        let p_left = x - p_right;
        self.packet_term(z_left, p_left) + self.packet_term(z_left + p_left, p_right)
    }

    pub fn is_feasible_part(&self, p: usize) -> bool {
        (1..self.coef.len()).contains(&p)
    }

    /// Bound for a partition at the code lengths it implies.
    pub fn gamma(&self, parts: &[usize]) -> Result<f64> {
        let k: usize = parts.iter().sum();
        if k > self.cfg.d {
            return Err(Error::InvalidInput(format!(
                "k = {k} exceeds d = {}",
                self.cfg.d
            )));
        }
        let mut g = self.sparsification_term(k);
        let mut z = 0;
        for &p in parts {
            if p == 0 {
                continue;
            }
            if !self.is_feasible_part(p) {
                return Err(Error::Infeasible(format!(
                    "packet of {p} entries does not fit in {} bits",
                    self.cfg.b
                )));
            }
            g += self.packet_term(z, p);
            z += p;
        }
        Ok(g)
    }

    /// Bound for a partition at explicit code lengths.
    pub fn gamma_at(&self, parts: &[usize], code_bits: &[u32]) -> Result<f64> {
        if parts.len() != code_bits.len() {
            return Err(Error::InvalidInput(
                "parts and code_bits differ in length".into(),
            ));
        }
        let k: usize = parts.iter().sum();
        if k > self.cfg.d {
            return Err(Error::InvalidInput(format!(
                "k = {k} exceeds d = {}",
                self.cfg.d
            )));
        }
        let mut g = self.sparsification_term(k);
        let mut z = 0;
        for (&p, &y) in parts.iter().zip(code_bits) {
            g += self.packet_term_at(z, p, y);
            z += p;
        }
        Ok(g)
    }
}

#[inline]
fn boundary_pow(z: usize, beta: f64) -> f64 {
    if z == 0 {
        1.0
    } else {
        (z as f64).powf(beta)
    }
}

/// Error bound of `parts` at explicit `code_bits`.
pub fn gamma(
    fit: &PowerLawFit,
    parts: &[usize],
    code_bits: &[u32],
    cfg: &BudgetConfig,
    scale: &ScaleState,
    kind: QuantizerKind,
) -> Result<f64> {
    ErrorModel::new(fit, cfg, scale, kind)?.gamma_at(parts, code_bits)
}

/// Re-splits `x` entries between two adjacent packets, the left one starting
/// after `z_left` ranks. Returns `(p_left, p_right)` with `p_right >= p_left`.
///
/// The right packet holds smaller magnitudes, so its optimal size lies in
/// `[ceil(x/2), x-1]`; that range is scanned exhaustively because integral
/// code lengths make the objective only piecewise smooth. Ties go to the
/// smallest `p_right`, where values within [`TIE_REL`] relative count as
/// ties.
pub fn atomic_optimize(model: &ErrorModel, x: usize, z_left: usize) -> Result<(usize, usize)> {
    if x < 2 {
        return Err(Error::InvalidInput(format!(
            "cannot split {x} entries in two"
        )));
    }
    let pmax = model.cfg.max_per_packet();
    let lo = x.div_ceil(2).max(x.saturating_sub(pmax));
    let hi = (x - 1).min(pmax);
    if lo > hi {
        return Err(Error::Infeasible(format!(
            "{x} entries do not fit in two packets of at most {pmax}"
        )));
    }
    let mut best = (model.pair_objective(x, z_left, lo), lo);
    for p_right in lo + 1..=hi {
        let f = model.pair_objective(x, z_left, p_right);
        if f < best.0 - TIE_REL * best.0.abs() {
            best = (f, p_right);
        }
    }
    Ok((x - best.1, best.1))
}

/// Equal split of `k` over `r` packets, remainder on the last packets.
pub fn equal_split(k: usize, r: usize) -> Vec<usize> {
    let base = k / r;
    let extra = k % r;
    (0..r).map(|i| base + usize::from(i >= r - extra)).collect()
}

fn check_k(model: &ErrorModel, k: usize) -> Result<()> {
    let cfg = &model.cfg;
    let cap = cfg.r * cfg.max_per_packet();
    if k < cfg.r || k > cap || k > cfg.d {
        return Err(Error::Infeasible(format!(
            "k = {k} outside [{}, {}]",
            cfg.r,
            cap.min(cfg.d)
        )));
    }
    Ok(())
}

/// A pair moves when it is out of order or when the new split is better by
/// more than a tie.
fn should_move(
    model: &ErrorModel,
    x: usize,
    z_left: usize,
    cur_right: usize,
    new_right: usize,
) -> bool {
    if cur_right < x - cur_right
        || !model.is_feasible_part(cur_right)
        || !model.is_feasible_part(x - cur_right)
    {
        return true;
    }
    let cur = model.pair_objective(x, z_left, cur_right);
    model.pair_objective(x, z_left, new_right) < cur - TIE_REL * cur.abs()
}

/// Runs SMO sweeps over adjacent packet pairs from `parts` until a sweep
/// changes nothing (or [`MAX_SWEEPS`]).
pub fn smo_refine(model: &ErrorModel, parts: &mut [usize]) -> Result<usize> {
    for sweep in 1..=MAX_SWEEPS {
        let mut changed = false;
        let mut z_left = 0;
        for r in 1..parts.len() {
            let x = parts[r - 1] + parts[r];
            let (left, right) = atomic_optimize(model, x, z_left)?;
            if right != parts[r] && should_move(model, x, z_left, parts[r], right) {
                parts[r - 1] = left;
                parts[r] = right;
                changed = true;
            }
            z_left += parts[r - 1];
        }
        if !changed {
            return Ok(sweep);
        }
    }
    Ok(MAX_SWEEPS)
}

/// Splits the top `k` updates over the model's `R` packets: SMO started from
/// the equal split.
pub fn smo_partition(model: &ErrorModel, k: usize) -> Result<Vec<usize>> {
    check_k(model, k)?;
    let mut parts = equal_split(k, model.cfg.r);
    smo_refine(model, &mut parts)?;
    Ok(parts)
}

/// Best split for one `k`: SMO from the equal split, and SMO from each warm
/// start built by adding `k - k_prev` entries to one packet of the previous
/// `k`'s split. Lowest bound wins; ties keep the equal-split result.
fn best_partition_for_k(
    model: &ErrorModel,
    k: usize,
    prev: Option<(usize, &[usize])>,
) -> Result<(Vec<usize>, f64)> {
    let mut best = smo_partition(model, k)?;
    let mut best_g = model.gamma(&best)?;
    if let Some((k_prev, prev_parts)) = prev {
        let delta = k - k_prev;
        let pmax = model.cfg.max_per_packet();
        for j in 0..prev_parts.len() {
            let mut start = prev_parts.to_vec();
            start[j] += delta;
            if start[j] > pmax {
                continue;
            }
            start.sort_unstable();
            smo_refine(model, &mut start)?;
            let g = model.gamma(&start)?;
            if g < best_g {
                best = start;
                best_g = g;
            }
        }
    }
    Ok((best, best_g))
}

/// `(k, parts, gamma)` for one value of `k`.
type Candidate = (usize, Vec<usize>, f64);

/// Search over `k` for the plan with the smallest bound at a fixed scale.
fn search_plan(model: &ErrorModel, k_stride: usize, scale: &ScaleState) -> Result<PartitionPlan> {
    let cfg = model.cfg;
    let ks: Vec<usize> = (cfg.k_min()..=cfg.k_max()).step_by(k_stride).collect();
    if ks.is_empty() {
        return Err(Error::Infeasible(format!(
            "no k in [{}, {}]",
            cfg.k_min(),
            cfg.k_max()
        )));
    }

    // Warm starts chain consecutive k values. The k range is cut into
    // fixed-size chunks that run in parallel; each chunk seeds its chain with
    // the plain SMO split of the k just before it. Chunking does not depend
    // on the thread count and the reduction below is ordered by k.
    let results: Vec<Result<Vec<Candidate>>> = ks
        .par_chunks(K_CHUNK)
        .map(|ks| {
            let mut out = Vec::with_capacity(ks.len());
            let mut prev: Option<(usize, Vec<usize>)> = match ks[0].checked_sub(k_stride) {
                Some(k) if k >= cfg.k_min() => Some((k, smo_partition(model, k)?)),
                _ => None,
            };
            for &k in ks {
                let (parts, g) =
                    best_partition_for_k(model, k, prev.as_ref().map(|(k, p)| (*k, p.as_slice())))?;
                prev = Some((k, parts.clone()));
                out.push((k, parts, g));
            }
            Ok(out)
        })
        .collect();

    let mut best: Option<Candidate> = None;
    for chunk in results {
        for (k, parts, g) in chunk? {
            if !(g > 0.0 && g < 1.0) {
                continue;
            }
            if best.as_ref().is_none_or(|b| g < b.2) {
                best = Some((k, parts, g));
            }
        }
    }
    let (k, parts, g) =
        best.ok_or_else(|| Error::Infeasible("no k yields an error bound inside (0, 1)".into()))?;
    let code_bits = parts
        .iter()
        .map(|&p| cfg.code_bits(p).expect("feasible part"))
        .collect();
    Ok(PartitionPlan {
        kind: model.kind,
        k,
        parts,
        code_bits,
        gamma: g,
        scale: *scale,
    })
}

/// Chooses `k` and the packet split minimizing the error bound.
///
/// If the winning plan's worst packet error violates `B > (Q + 1) / 2`, `B`
/// is raised to that error plus one and the search is repeated, a bounded
/// number of times; after that the last plan is re-evaluated at the raised
/// `B` as is.
pub fn optimize_plan(
    fit: &PowerLawFit,
    cfg: &BudgetConfig,
    scale: &ScaleState,
    kind: QuantizerKind,
    k_stride: usize,
) -> Result<PartitionPlan> {
    if k_stride == 0 {
        return Err(Error::InvalidInput("k_stride must be >= 1".into()));
    }
    let mut scale = *scale;
    let mut plan = search_plan(&ErrorModel::new(fit, cfg, &scale, kind)?, k_stride, &scale)?;
    for _ in 0..MAX_RESCALE {
        let max_q = plan.max_q();
        if scale.b > (max_q + 1.0) / 2.0 {
            return Ok(plan);
        }
        scale = ScaleState::from_prev_max_q(max_q);
        plan = search_plan(&ErrorModel::new(fit, cfg, &scale, kind)?, k_stride, &scale)?;
    }
    let max_q = plan.max_q();
    if scale.b <= (max_q + 1.0) / 2.0 {
        scale = ScaleState::from_prev_max_q(max_q);
        plan.gamma = ErrorModel::new(fit, cfg, &scale, kind)?.gamma(&plan.parts)?;
        plan.scale = scale;
    }
    Ok(plan)
}

/// Fixed-length baseline: every packet carries `floor((b - H) / (s + y))`
/// values at `y` bits (`y = 32` for plain top-k). When that would exceed `d`
/// the `d` coordinates are split evenly instead.
pub fn fixed_length_plan(
    y_fixed: u32,
    fit: &PowerLawFit,
    cfg: &BudgetConfig,
    scale: &ScaleState,
    kind: QuantizerKind,
) -> Result<PartitionPlan> {
    crate::quantizer::check_bits(y_fixed)?;
    let per_packet = cfg.payload_bits() / (cfg.s + y_fixed) as usize;
    if per_packet == 0 {
        return Err(Error::Infeasible(format!(
            "a {y_fixed}-bit entry does not fit in a packet"
        )));
    }
    let parts = if per_packet * cfg.r > cfg.d {
        equal_split(cfg.d, cfg.r)
    } else {
        vec![per_packet; cfg.r]
    };
    let code_bits = vec![y_fixed; cfg.r];
    let g = gamma(fit, &parts, &code_bits, cfg, scale, kind)?;
    Ok(PartitionPlan {
        kind,
        k: parts.iter().sum(),
        parts,
        code_bits,
        gamma: g,
        scale: *scale,
    })
}
