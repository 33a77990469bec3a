//! Small classifiers with hand-written gradients.
//!
//! Parameters live in one flat vector so that a model update is just the
//! difference of two such vectors.
//!
//! * Logistic (softmax) regression: `[W (C×D), b (C)]`.
//! * One-hidden-layer tanh MLP: `[W1 (H×D), b1 (H), W2 (C×H), b2 (C)]`.
//!
//! The loss is mean softmax cross-entropy over the batch.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::data::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Logistic,
    Mlp { hidden: usize },
}

/// A model spec bound to input and output sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Model {
    pub spec: ModelSpec,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Model {
    pub fn new(spec: ModelSpec, n_features: usize, n_classes: usize) -> Self {
        Self {
            spec,
            n_features,
            n_classes,
        }
    }

    pub fn num_params(&self) -> usize {
        let (d, c) = (self.n_features, self.n_classes);
        match self.spec {
            ModelSpec::Logistic => c * d + c,
            ModelSpec::Mlp { hidden: h } => h * d + h + c * h + c,
        }
    }

    /// Logistic weights start at zero; MLP weights are Glorot-uniform.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut w = vec![0.0; self.num_params()];
        if let ModelSpec::Mlp { hidden: h } = self.spec {
            let (d, c) = (self.n_features, self.n_classes);
            let a1 = (6.0 / (d + h) as f64).sqrt();
            let a2 = (6.0 / (h + c) as f64).sqrt();
            let u1 = Uniform::new_inclusive(-a1, a1);
            let u2 = Uniform::new_inclusive(-a2, a2);
            let (w1, rest) = w.split_at_mut(h * d);
            w1.iter_mut().for_each(|x| *x = u1.sample(rng));
            let w2 = &mut rest[h..h + c * h];
            w2.iter_mut().for_each(|x| *x = u2.sample(rng));
        }
        w
    }

    /// Class scores for one sample.
    fn logits(&self, w: &[f64], x: &[f64], hidden_out: Option<&mut Vec<f64>>) -> Vec<f64> {
        let (d, c) = (self.n_features, self.n_classes);
        match self.spec {
            ModelSpec::Logistic => {
                let (wm, b) = w.split_at(c * d);
                (0..c)
                    .map(|j| dot(&wm[j * d..(j + 1) * d], x) + b[j])
                    .collect()
            }
            ModelSpec::Mlp { hidden: h } => {
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let hid: Vec<f64> = (0..h)
                    .map(|j| (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh())
                    .collect();
                let out = (0..c)
                    .map(|j| dot(&w2[j * h..(j + 1) * h], &hid) + b2[j])
                    .collect();
                if let Some(slot) = hidden_out {
                    *slot = hid;
                }
                out
            }
        }
    }

    /// Mean cross-entropy over `idx` and its gradient.
    pub fn loss_and_grad(&self, w: &[f64], data: &Dataset, idx: &[usize]) -> (f64, Vec<f64>) {
        let (d, c) = (self.n_features, self.n_classes);
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        let inv_n = 1.0 / idx.len() as f64;
        let mut hid = Vec::new();
        for &i in idx {
            let x = data.row(i);
            let label = data.labels[i];
            let z = self.logits(w, x, Some(&mut hid));
            let (p, lse) = softmax(&z);
            loss += lse - z[label];
            // dL/dz = (p - onehot) / n
            let dz: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(j, &pj)| (pj - f64::from(u8::from(j == label))) * inv_n)
                .collect();
            match self.spec {
                ModelSpec::Logistic => {
                    let (gw, gb) = grad.split_at_mut(c * d);
                    for j in 0..c {
                        axpy(dz[j], x, &mut gw[j * d..(j + 1) * d]);
                        gb[j] += dz[j];
                    }
                }
                ModelSpec::Mlp { hidden: h } => {
                    let w2 = &w[h * d + h..h * d + h + c * h];
                    let (gw1, rest) = grad.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    let mut dh = vec![0.0; h];
                    for j in 0..c {
                        axpy(dz[j], &hid, &mut gw2[j * h..(j + 1) * h]);
                        gb2[j] += dz[j];
                        axpy(dz[j], &w2[j * h..(j + 1) * h], &mut dh);
                    }
                    for m in 0..h {
                        let da = dh[m] * (1.0 - hid[m] * hid[m]);
                        axpy(da, x, &mut gw1[m * d..(m + 1) * d]);
                        gb1[m] += da;
                    }
                }
            }
        }
        (loss * inv_n, grad)
    }

    pub fn loss(&self, w: &[f64], data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let total: f64 = (0..data.len())
            .map(|i| {
                let z = self.logits(w, data.row(i), None);
                let (_, lse) = softmax(&z);
                lse - z[data.labels[i]]
            })
            .sum();
        total / data.len() as f64
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let z = self.logits(w, x, None);
        z.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                if v > best.1 {
                    (j, v)
                } else {
                    best
                }
            })
            .0
    }

    pub fn accuracy(&self, w: &[f64], data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = (0..data.len())
            .filter(|&i| self.predict(w, data.row(i)) == data.labels[i])
            .count();
        hits as f64 / data.len() as f64
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Probabilities and log-sum-exp of `z`.
fn softmax(z: &[f64]) -> (Vec<f64>, f64) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (e.iter().map(|v| v / s).collect(), m + s.ln())
}
