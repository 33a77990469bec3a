//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls into the optimizer's error model: the bound is
//! re-derived term by term from its closed form.

#![allow(dead_code)]

use fedcvlc::optimizer::{BudgetConfig, ScaleState};
use fedcvlc::quantizer::{quant_error_model, QuantizerKind};
use fedcvlc::update::{PowerLawFit, UpdateVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `z^beta` with the convention `0^beta = 1`.
fn zpow(z: usize, beta: f64) -> f64 {
    if z == 0 {
        1.0
    } else {
        (z as f64).powf(beta)
    }
}

/// Code length of a packet of `p` entries, straight from the packet budget.
pub fn code_len(cfg: &BudgetConfig, p: usize) -> Option<u32> {
    if p == 0 {
        return None;
    }
    let y = ((cfg.b - cfg.h) / p) as i64 - cfg.s as i64;
    (y >= 1).then(|| y.min(32) as u32)
}

/// Error bound of `parts` evaluated term by term:
/// sparsification share plus, per packet, `(Q/B^2 + ((B-1)/B)^2)` times the
/// packet's power-law mass, all over `d^beta - 1`.
pub fn gamma_oracle(
    fit: &PowerLawFit,
    parts: &[usize],
    code_bits: &[u32],
    cfg: &BudgetConfig,
    b: f64,
    kind: QuantizerKind,
) -> f64 {
    let beta = fit.beta;
    let d = cfg.d;
    let denom = (d as f64).powf(beta) - 1.0;
    let k: usize = parts.iter().sum();
    let mut g = ((d as f64).powf(beta) - ((k + 1) as f64).powf(beta)) / denom;
    let bc = ((b - 1.0) / b).powi(2);
    let mut z = 0usize;
    for (&p, &y) in parts.iter().zip(code_bits) {
        if p == 0 {
            continue;
        }
        let q = quant_error_model(kind, p, y);
        g += (q / (b * b) + bc) * (zpow(z + p, beta) - zpow(z, beta)) / denom;
        z += p;
    }
    g
}

/// Bound of `parts` at the code lengths the budget implies, `None` if some
/// packet cannot hold its entries.
pub fn gamma_of_parts(
    fit: &PowerLawFit,
    parts: &[usize],
    cfg: &BudgetConfig,
    b: f64,
    kind: QuantizerKind,
) -> Option<f64> {
    let bits: Option<Vec<u32>> = parts.iter().map(|&p| code_len(cfg, p)).collect();
    Some(gamma_oracle(fit, parts, &bits?, cfg, b, kind))
}

/// Every composition of `k` into `r` positive parts.
pub fn compositions(k: usize, r: usize, out: &mut Vec<Vec<usize>>) {
    fn rec(left: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            if left >= 1 {
                cur.push(left);
                out.push(cur.clone());
                cur.pop();
            }
            return;
        }
        for p in 1..=left.saturating_sub(slots - 1) {
            cur.push(p);
            rec(left - p, slots - 1, cur, out);
            cur.pop();
        }
    }
    rec(k, r, &mut Vec::new(), out);
}

/// Smallest bound over all compositions of `k` into `R` packets.
pub fn brute_force_k(
    fit: &PowerLawFit,
    k: usize,
    cfg: &BudgetConfig,
    b: f64,
    kind: QuantizerKind,
) -> Option<(f64, Vec<usize>)> {
    let mut all = Vec::new();
    compositions(k, cfg.r, &mut all);
    all.into_iter()
        .filter_map(|p| gamma_of_parts(fit, &p, cfg, b, kind).map(|g| (g, p)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Smallest bound in (0, 1) over every `k` in `[R, k_max]` and every
/// composition; ties go to the smaller `k`.
pub fn brute_force(
    fit: &PowerLawFit,
    cfg: &BudgetConfig,
    b: f64,
    kind: QuantizerKind,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for k in cfg.r..=cfg.k_max() {
        if let Some((g, _)) = brute_force_k(fit, k, cfg, b, kind) {
            if g > 0.0 && g < 1.0 && best.is_none_or(|(_, bg)| g < bg) {
                best = Some((k, g));
            }
        }
    }
    best
}

/// `phi * l^alpha` magnitudes at shuffled positions with random signs.
pub fn power_law_vector(d: usize, alpha: f64, phi: f64, seed: u64) -> UpdateVector {
    let mut r = rng(seed);
    let mut pos: Vec<usize> = (0..d).collect();
    pos.shuffle(&mut r);
    let mut v = vec![0.0; d];
    for (l, &i) in pos.iter().enumerate() {
        let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        v[i] = sign * phi * ((l + 1) as f64).powf(alpha);
    }
    UpdateVector::new(v).unwrap()
}

/// Scale state after `rounds` rounds of re-optimizing the same fit.
pub fn settled_scale(
    fit: &PowerLawFit,
    cfg: &BudgetConfig,
    kind: QuantizerKind,
    rounds: usize,
) -> ScaleState {
    let mut s = ScaleState::initial(kind, cfg);
    for _ in 0..rounds {
        s = fedcvlc::optimizer::optimize_plan(fit, cfg, &s, kind, 1)
            .unwrap()
            .next_scale();
    }
    s
}

/// Writes a line straight to stderr so it shows even when the harness
/// captures test output.
pub fn report(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr(), "{line}");
}

pub fn verdict(criterion: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    report(&format!(
        "[{tag}] criterion {criterion}: {name} -- {detail}"
    ));
}
