//! The FedAvg round loop with pluggable uplink compression.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{DataSpec, Dataset, FederatedData};
use super::model::{Model, ModelSpec};
use crate::optimizer::{self, BudgetConfig, PartitionPlan, ScaleState};
use crate::packet::HEADER_BITS;
use crate::pipeline::{self, CompressedRound, CompressionConfig, ErrorFeedback};
use crate::quantizer::QuantizerKind;
use crate::rng::{self, TAG_INIT, TAG_QUANT, TAG_SAMPLE, TAG_TRAIN};
use crate::update::{self, PowerLawFit, UpdateVector, MAGNITUDE_FLOOR};
use crate::{Error, Result};

/// Code length of the plain top-k baseline.
pub const TOPK_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressorSpec {
    None,
    FedCvlc,
    Topk,
    Fixed { y: u32 },
}

impl CompressorSpec {
    pub fn label(&self) -> String {
        match self {
            CompressorSpec::None => "none".into(),
            CompressorSpec::FedCvlc => "fed_cvlc".into(),
            CompressorSpec::Topk => "topk".into(),
            CompressorSpec::Fixed { y } => format!("fixed{y}"),
        }
    }
}

/// Packet budget as written in a config file; `d` comes from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub b_bits: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "H_bits", default = "default_header_bits")]
    pub h_bits: usize,
}

fn default_header_bits() -> usize {
    HEADER_BITS
}

fn default_k_stride() -> usize {
    1
}

fn default_quantizer() -> QuantizerKind {
    QuantizerKind::Pq
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FLConfig {
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub compressor: CompressorSpec,
    pub budget: BudgetSpec,
    #[serde(default = "default_quantizer")]
    pub quantizer: QuantizerKind,
    #[serde(default = "default_k_stride")]
    pub k_stride: usize,
    #[serde(default)]
    pub error_feedback: bool,
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.clients_per_round == 0 {
            return Err(Error::InvalidInput(
                "need at least one client per round".into(),
            ));
        }
        if self.clients_per_round > self.n_clients {
            return Err(Error::InvalidInput(format!(
                "clients_per_round {} > n_clients {}",
                self.clients_per_round, self.n_clients
            )));
        }
        if self.local_iters == 0 || self.rounds == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput(
                "local_iters, rounds and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidInput(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn compression(&self, d: usize) -> Result<CompressionConfig> {
        let budget = BudgetConfig::new(d, self.budget.b_bits, self.budget.r, self.budget.h_bits)?;
        let mut c = CompressionConfig::new(self.quantizer, budget)?.with_k_stride(self.k_stride);
        c.error_feedback = self.error_feedback;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub uplink_bytes_total: u64,
    pub mean_gamma: f64,
    pub mean_measured_error: f64,
}

impl RoundMetrics {
    pub const CSV_HEADER: &'static str =
        "round,test_accuracy,train_loss,uplink_bytes_total,mean_gamma,mean_measured_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.round,
            self.test_accuracy,
            self.train_loss,
            self.uplink_bytes_total,
            self.mean_gamma,
            self.mean_measured_error
        )
    }
}

/// What one client sent in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub client: usize,
    pub bytes: usize,
    pub packet_sizes: Vec<usize>,
    pub gamma: f64,
    pub measured_error: f64,
    pub fit: Option<PowerLawFit>,
    pub plan: Option<PartitionPlan>,
    /// Bound of the fixed-length baselines at the same fit, budget and scale
    /// (Fed-CVLC rounds only): `(6 bits, 32 bits)`.
    pub baseline_gammas: Option<(f64, f64)>,
}

/// Everything observable about one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub metrics: RoundMetrics,
    pub clients: Vec<ClientRecord>,
    /// Global parameters after aggregation.
    pub params: Vec<f64>,
}

/// Runs `local_iters` mini-batch SGD steps and returns `w_start - w_end`.
///
/// Batches walk a shuffled order of the client's samples, reshuffling each
/// time it is used up. A batch at least as large as the dataset is the full
/// dataset.
pub fn local_train(
    model: &Model,
    w: &[f64],
    data: &Dataset,
    local_iters: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<UpdateVector> {
    if data.is_empty() {
        return Err(Error::InvalidInput("client has no samples".into()));
    }
    if local_iters == 0 || batch_size == 0 {
        return Err(Error::InvalidInput(
            "local_iters and batch_size must be >= 1".into(),
        ));
    }
    if w.len() != model.num_params() {
        return Err(Error::InvalidInput(format!(
            "model has {} parameters, got {}",
            model.num_params(),
            w.len()
        )));
    }
    let n = data.len();
    let mut rng = rng::stream(seed, &[]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut cur = w.to_vec();
    for _ in 0..local_iters {
        let batch: &[usize] = if batch_size >= n {
            &order
        } else {
            if cursor + batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch_size;
            &order[cursor - batch_size..cursor]
        };
        let (_, g) = model.loss_and_grad(&cur, data, batch);
        for (wi, gi) in cur.iter_mut().zip(&g) {
            *wi -= lr * gi;
        }
    }
    UpdateVector::new(w.iter().zip(&cur).map(|(a, b)| a - b).collect())
}

/// `w - mean(updates)`, summing in the order given.
pub fn aggregate(w: &[f64], updates: &[UpdateVector]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::InvalidInput("no updates to aggregate".into()));
    }
    let mut sum = vec![0.0; w.len()];
    for u in updates {
        if u.dim() != w.len() {
            return Err(Error::InvalidInput(format!(
                "update has d = {}, model has {}",
                u.dim(),
                w.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(u.values()) {
            *s += v;
        }
    }
    let m = updates.len() as f64;
    Ok(w.iter().zip(&sum).map(|(wi, s)| wi - s / m).collect())
}

/// Seeded client sample without replacement, in ascending id order.
pub fn sample_clients(n_clients: usize, per_round: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, &[TAG_SAMPLE, round as u64]);
    let mut ids = index::sample(&mut rng, n_clients, per_round).into_vec();
    ids.sort_unstable();
    ids
}

/// Seed of client `client`'s local training in `round`.
pub fn train_seed(seed: u64, round: usize, client: usize) -> u64 {
    rng::derive_seed(seed, &[TAG_TRAIN, round as u64, client as u64])
}

pub fn initial_params(model: &Model, seed: u64) -> Vec<f64> {
    model.init_params(&mut rng::stream(seed, &[TAG_INIT]))
}

/// Fit used when an update has too few nonzero entries to fit a line.
fn fallback_fit(u: &UpdateVector) -> PowerLawFit {
    let peak = u.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    PowerLawFit::from_alpha(0.0, peak.max(MAGNITUDE_FLOOR))
}

#[derive(Debug, Clone)]
struct ClientState {
    scale: Option<ScaleState>,
    feedback: Option<ErrorFeedback>,
}

struct ClientOutput {
    u_hat: UpdateVector,
    record: ClientRecord,
    state: ClientState,
}

fn compress_client(
    spec: CompressorSpec,
    comp: &CompressionConfig,
    u: UpdateVector,
    mut state: ClientState,
    client: usize,
    seed: u64,
) -> Result<ClientOutput> {
    let d = u.dim();
    if spec == CompressorSpec::None {
        return Ok(ClientOutput {
            u_hat: u,
            record: ClientRecord {
                client,
                bytes: 4 * d,
                packet_sizes: Vec::new(),
                gamma: 0.0,
                measured_error: 0.0,
                fit: None,
                plan: None,
                baseline_gammas: None,
            },
            state,
        });
    }
    let sent = match (&state.feedback, comp.error_feedback) {
        (Some(fb), true) => fb.corrected(&u)?,
        _ => u,
    };
    let ranked = update::rank_by_magnitude(&sent)?;
    let fit = update::fit_power_law(&ranked, &sent).unwrap_or_else(|_| fallback_fit(&sent));
    let (round, baseline_gammas) = match spec {
        CompressorSpec::FedCvlc => {
            let scale = state
                .scale
                .unwrap_or_else(|| ScaleState::initial(comp.kind, &comp.budget));
            let round = pipeline::compress_with_fit(&sent, &ranked, fit, comp, &scale, seed)?;
            state.scale = Some(round.plan.next_scale());
            let at = round.plan.scale;
            let g6 = optimizer::fixed_length_plan(6, &fit, &comp.budget, &at, comp.kind)?.gamma;
            let g32 =
                optimizer::fixed_length_plan(TOPK_BITS, &fit, &comp.budget, &at, comp.kind)?.gamma;
            (round, Some((g6, g32)))
        }
        CompressorSpec::Topk => (
            pipeline::compress_fixed(&sent, &ranked, fit, TOPK_BITS, comp, seed)?,
            None,
        ),
        CompressorSpec::Fixed { y } => (
            pipeline::compress_fixed(&sent, &ranked, fit, y, comp, seed)?,
            None,
        ),
        CompressorSpec::None => unreachable!(),
    };
    let CompressedRound {
        packets, plan, fit, ..
    } = &round;
    let u_hat = pipeline::decompress(packets, d, round.scale_b())?;
    let measured = pipeline::measured_error(&sent, &u_hat).unwrap_or(f64::NAN);
    if comp.error_feedback {
        state
            .feedback
            .get_or_insert_with(|| ErrorFeedback::new(d))
            .absorb(&sent, &u_hat);
    }
    Ok(ClientOutput {
        record: ClientRecord {
            client,
            bytes: round.uplink_bytes(),
            packet_sizes: packets.iter().map(Vec::len).collect(),
            gamma: plan.gamma,
            measured_error: measured,
            fit: Some(*fit),
            plan: Some(plan.clone()),
            baseline_gammas,
        },
        u_hat,
        state,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean training loss over every client's samples.
fn train_loss(model: &Model, w: &[f64], data: &FederatedData) -> f64 {
    let (total, n) = data
        .clients
        .iter()
        .filter(|c| !c.is_empty())
        .fold((0.0, 0usize), |(t, n), c| {
            (t + model.loss(w, c) * c.len() as f64, n + c.len())
        });
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Runs the full simulation, calling `observe` after every round.
pub fn run_federated_traced(
    cfg: &FLConfig,
    mut observe: impl FnMut(&RoundTrace),
) -> Result<Vec<RoundMetrics>> {
    cfg.validate()?;
    let data = cfg.data.build(cfg.n_clients, cfg.seed)?;
    if data.clients.len() != cfg.n_clients {
        return Err(Error::InvalidInput(format!(
            "data has {} clients, config expects {}",
            data.clients.len(),
            cfg.n_clients
        )));
    }
    let model = Model::new(cfg.model, data.n_features, data.n_classes);
    let d = model.num_params();
    let comp = cfg.compression(d)?;
    let mut w = initial_params(&model, cfg.seed);
    let mut states = vec![
        ClientState {
            scale: None,
            feedback: None,
        };
        cfg.n_clients
    ];
    let mut out = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let selected = sample_clients(cfg.n_clients, cfg.clients_per_round, cfg.seed, t);
        let results: Vec<ClientOutput> = selected
            .par_iter()
            .map(|&c| {
                let u = local_train(
                    &model,
                    &w,
                    &data.clients[c],
                    cfg.local_iters,
                    cfg.batch_size,
                    cfg.learning_rate,
                    train_seed(cfg.seed, t, c),
                )?;
                let qseed = rng::derive_seed(cfg.seed, &[TAG_QUANT, t as u64, c as u64]);
                compress_client(cfg.compressor, &comp, u, states[c].clone(), c, qseed)
            })
            .collect::<Result<_>>()?;
        let mut updates = Vec::with_capacity(results.len());
        let mut records = Vec::with_capacity(results.len());
        for r in results {
            states[r.record.client] = r.state;
            updates.push(r.u_hat);
            records.push(r.record);
        }
        w = aggregate(&w, &updates)?;
        let metrics = RoundMetrics {
            round: t + 1,
            test_accuracy: model.accuracy(&w, &data.test),
            train_loss: train_loss(&model, &w, &data),
            uplink_bytes_total: records.iter().map(|r| r.bytes as u64).sum(),
            mean_gamma: mean(records.iter().map(|r| r.gamma)),
            mean_measured_error: mean(records.iter().map(|r| r.measured_error)),
        };
        observe(&RoundTrace {
            metrics,
            clients: records,
            params: w.clone(),
        });
        out.push(metrics);
    }
    Ok(out)
}

pub fn run_federated(cfg: &FLConfig) -> Result<Vec<RoundMetrics>> {
    run_federated_traced(cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> Dataset {
        Dataset {
            n_features: 2,
            features: vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5],
            labels: vec![0, 1, 1],
        }
    }

    #[test]
    fn zero_learning_rate_gives_zero_update() {
        let m = Model::new(ModelSpec::Logistic, 2, 2);
        let w = vec![0.3; m.num_params()];
        let u = local_train(&m, &w, &data(), 3, 2, 0.0, 1).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_dataset_rejected() {
        let m = Model::new(ModelSpec::Logistic, 2, 2);
        let w = vec![0.0; m.num_params()];
        let empty = Dataset {
            n_features: 2,
            ..Default::default()
        };
        assert!(matches!(
            local_train(&m, &w, &empty, 1, 1, 0.1, 1),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let m = Model::new(ModelSpec::Mlp { hidden: 3 }, 2, 2);
        let w = initial_params(&m, 4);
        let a = local_train(&m, &w, &data(), 5, 2, 0.1, 77).unwrap();
        let b = local_train(&m, &w, &data(), 5, 2, 0.1, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_examples() {
        let w = vec![1.0, 2.0];
        let u = UpdateVector::new(vec![0.5, -1.0]).unwrap();
        let neg = UpdateVector::new(vec![-0.5, 1.0]).unwrap();
        assert_eq!(
            aggregate(&w, std::slice::from_ref(&u)).unwrap(),
            vec![0.5, 3.0]
        );
        assert_eq!(aggregate(&w, &[UpdateVector::zeros(2)]).unwrap(), w);
        assert_eq!(aggregate(&w, &[u, neg]).unwrap(), w);
        assert!(aggregate(&w, &[UpdateVector::zeros(3)]).is_err());
    }

    #[test]
    fn sampling_is_sorted_and_distinct() {
        let s = sample_clients(20, 5, 3, 7);
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(s, sample_clients(20, 5, 3, 7));
    }

    #[test]
    fn labels() {
        assert_eq!(CompressorSpec::Fixed { y: 6 }.label(), "fixed6");
        let c: CompressorSpec = serde_json::from_str(r#"{"kind":"fed_cvlc"}"#).unwrap();
        assert_eq!(c, CompressorSpec::FedCvlc);
    }
}
