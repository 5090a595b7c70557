//! Federated learning core: local training, staleness weighting,
//! asynchronous aggregation and the synchronous baseline.
//!
//! One slot of asynchronous FL proceeds as: every selected vehicle downloads
//! the slot-start global model, runs `l` minibatch SGD iterations locally,
//! and uploads. Arrivals are ordered by total delay (training + upload,
//! ties broken by vehicle index) and the RSU folds each one into the global
//! model immediately: `w_new = beta * w_old + (1 - beta) * w_kw`, where
//! `w_kw` is the local model scaled by the staleness weights
//! `m1^(T_l - 0.5) * m2^(T_u - 0.5)`. A delay of exactly half a slot leaves
//! the model untouched; slower vehicles count less, faster ones slightly
//! more.
//!
//! The synchronous baseline instead waits for every selected vehicle and
//! replaces the global model with a data-size-weighted average; its round
//! delay is the slowest vehicle's total delay.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, UploadNoise};
use crate::error::{Error, Result};
use crate::nn::{
    self, combine_params, scale_params, softmax_cross_entropy, NetSpec, ParamVector,
};
use crate::seeds;

/// Hyperparameters of the federated pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    /// Local SGD iterations per slot.
    pub local_iterations: usize,
    /// Classifier learning rate.
    pub eta: f64,
    /// Base of the training (local-delay) staleness weight, in (0, 1).
    pub m1: f64,
    /// Base of the transmission (upload-delay) staleness weight, in (0, 1).
    pub m2: f64,
    /// Share of the old global model kept per aggregation, in (0, 1).
    pub beta: f64,
    /// Minibatch size for local SGD.
    pub batch_size: usize,
    /// Architecture of the local/global classifier.
    pub model_spec: NetSpec,
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(format!("fl: {msg}")));
        if self.local_iterations == 0 {
            return fail("local_iterations must be >= 1");
        }
        if self.eta <= 0.0 {
            return fail("eta must be > 0");
        }
        for (name, v) in [("m1", self.m1), ("m2", self.m2), ("beta", self.beta)] {
            if !(0.0 < v && v < 1.0) {
                return fail(&format!("{name} must lie in (0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        self.model_spec.validate()
    }
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            local_iterations: 5,
            eta: 0.05,
            m1: 0.9,
            m2: 0.9,
            beta: 0.3,
            batch_size: 32,
            model_spec: NetSpec::new(
                784,
                vec![(32, nn::Activation::Relu)],
                (10, nn::Activation::Identity),
            ),
        }
    }
}

/// The RSU-side model together with its aggregation counter.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub params: ParamVector,
    pub update_count: u64,
}

impl GlobalModel {
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        Self {
            params: nn::init_params(spec, seed),
            update_count: 0,
        }
    }
}

/// Whether uploads are scaled by the delay-derived staleness weights or
/// taken as-is (the plain-AFL comparator).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Staleness,
    Plain,
}

/// One selected vehicle's contribution to a slot.
#[derive(Debug, Clone)]
pub struct Participant<'a> {
    pub vehicle_index: usize,
    pub training_delay_s: f64,
    pub upload_delay_s: f64,
    pub dataset: &'a ClientDataset,
    pub upload_noise: UploadNoise,
}

impl Participant<'_> {
    pub fn total_delay(&self) -> f64 {
        self.training_delay_s + self.upload_delay_s
    }
}

/// Outcome of one asynchronous slot.
#[derive(Debug, Clone)]
pub struct SlotOutcome {
    /// Average post-training local loss over the selected vehicles.
    pub loss: f64,
    /// Per-aggregation records in arrival order.
    pub arrivals: Vec<Arrival>,
}

#[derive(Debug, Clone, Copy)]
pub struct Arrival {
    pub vehicle_index: usize,
    /// Time from slot start until this upload was folded in, s.
    pub delay_s: f64,
}

/// Outcome of one synchronous (wait-for-all) slot.
#[derive(Debug, Clone)]
pub struct SyncOutcome {
    pub loss: f64,
    /// Slowest selected vehicle's total delay, s.
    pub round_delay_s: f64,
}

/// Mean cross-entropy of `params` over a whole dataset.
pub fn dataset_loss(params: &ParamVector, spec: &NetSpec, data: &ClientDataset) -> Result<f64> {
    let (logits, _) = nn::forward(params, spec, &data.features)?;
    let (sum, _) = softmax_cross_entropy(&logits, &data.labels)?;
    Ok(sum / data.len() as f64)
}

/// Trains a local model from the downloaded global parameters: exactly
/// `local_iterations` minibatch SGD steps of softmax cross-entropy
/// (gradients averaged over the minibatch), sampling without replacement
/// within each step. Returns the trained parameters and their mean loss
/// over the vehicle's full dataset.
pub fn local_train(
    global: &ParamVector,
    data: &ClientDataset,
    cfg: &FlConfig,
    seed: u64,
) -> Result<(ParamVector, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = global.clone();
    let batch = cfg.batch_size.min(data.len());
    for _ in 0..cfg.local_iterations {
        let picks = rand::seq::index::sample(&mut rng, data.len(), batch).into_vec();
        let minibatch = data.subset(&picks);
        let (logits, trace) = nn::forward(&params, &cfg.model_spec, &minibatch.features)?;
        let (_, mut grad_logits) = softmax_cross_entropy(&logits, &minibatch.labels)?;
        grad_logits /= batch as f64;
        let (grad, _) = nn::backward(&params, &cfg.model_spec, trace, &grad_logits)?;
        params = nn::sgd_step(&params, &grad, cfg.eta)?;
    }
    let loss = dataset_loss(&params, &cfg.model_spec, data)?;
    Ok((params, loss))
}

/// Training weight `m1^(T_l - 0.5)`; strictly decreasing in the delay and
/// exactly 1 at half a slot.
pub fn training_weight(training_delay_s: f64, m1: f64) -> f64 {
    m1.powf(training_delay_s - 0.5)
}

/// Transmission weight `m2^(T_u - 0.5)`; same shape as [`training_weight`].
pub fn transmission_weight(upload_delay_s: f64, m2: f64) -> f64 {
    m2.powf(upload_delay_s - 0.5)
}

/// Scales the whole local model by both staleness weights.
pub fn weight_optimize(local: &ParamVector, beta1: f64, beta2: f64) -> ParamVector {
    scale_params(local, beta1 * beta2)
}

/// Folds one weighted upload into the global model:
/// `beta * w_old + (1 - beta) * w_kw`, bumping the update counter.
pub fn aggregate_async(
    global: &mut GlobalModel,
    weighted_upload: &ParamVector,
    beta: f64,
) -> Result<()> {
    global.params = combine_params(&global.params, weighted_upload, beta, 1.0 - beta)?;
    global.update_count += 1;
    Ok(())
}

fn arrival_order<'a, 'b>(participants: &'b [Participant<'a>]) -> Vec<&'b Participant<'a>> {
    let mut order: Vec<&Participant> = participants.iter().collect();
    order.sort_by(|a, b| {
        a.total_delay()
            .partial_cmp(&b.total_delay())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.vehicle_index.cmp(&b.vehicle_index))
    });
    order
}

/// Runs one asynchronous slot over the selected vehicles.
///
/// Every participant trains from the same slot-start snapshot; uploads are
/// applied in ascending total-delay order (stable tie-break by index). Bad
/// vehicles' models are perturbed by their upload noise before the loss is
/// read and the upload weighted, so a polluted model reports its own
/// degraded loss.
pub fn run_afl_slot(
    global: &mut GlobalModel,
    participants: &[Participant<'_>],
    cfg: &FlConfig,
    weighting: Weighting,
    seed: u64,
) -> Result<SlotOutcome> {
    if participants.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let snapshot = global.params.clone();
    let mut losses = Vec::with_capacity(participants.len());
    let mut arrivals = Vec::with_capacity(participants.len());
    for p in arrival_order(participants) {
        let train_seed = seeds::derive(seed, p.vehicle_index as u64);
        let (mut local, mut loss) = local_train(&snapshot, p.dataset, cfg, train_seed)?;
        if p.upload_noise.std > 0.0 {
            p.upload_noise
                .apply(&mut local, seeds::derive(seed, 0x1000 + p.vehicle_index as u64));
            loss = dataset_loss(&local, &cfg.model_spec, p.dataset)?;
        }
        let weighted = match weighting {
            Weighting::Staleness => {
                let b1 = training_weight(p.training_delay_s, cfg.m1);
                let b2 = transmission_weight(p.upload_delay_s, cfg.m2);
                weight_optimize(&local, b1, b2)
            }
            Weighting::Plain => local,
        };
        aggregate_async(global, &weighted, cfg.beta)?;
        losses.push(loss);
        arrivals.push(Arrival {
            vehicle_index: p.vehicle_index,
            delay_s: p.total_delay(),
        });
    }
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(SlotOutcome { loss, arrivals })
}

/// Runs one synchronous round: all selected vehicles train from the same
/// snapshot, the RSU waits for the slowest and replaces the global model
/// with the data-size-weighted average of the local models.
pub fn run_sync_fl_slot(
    global: &mut GlobalModel,
    participants: &[Participant<'_>],
    cfg: &FlConfig,
    seed: u64,
) -> Result<SyncOutcome> {
    if participants.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let snapshot = global.params.clone();
    let total_data: f64 = participants.iter().map(|p| p.dataset.len() as f64).sum();
    let mut average = ParamVector::zeros(snapshot.layout().to_vec());
    let mut losses = Vec::with_capacity(participants.len());
    let mut round_delay = 0.0f64;
    for p in participants {
        let train_seed = seeds::derive(seed, p.vehicle_index as u64);
        let (mut local, mut loss) = local_train(&snapshot, p.dataset, cfg, train_seed)?;
        if p.upload_noise.std > 0.0 {
            p.upload_noise
                .apply(&mut local, seeds::derive(seed, 0x1000 + p.vehicle_index as u64));
            loss = dataset_loss(&local, &cfg.model_spec, p.dataset)?;
        }
        let share = p.dataset.len() as f64 / total_data;
        average = combine_params(&average, &local, 1.0, share)?;
        losses.push(loss);
        round_delay = round_delay.max(p.total_delay());
    }
    global.params = average;
    global.update_count += 1;
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(SyncOutcome {
        loss,
        round_delay_s: round_delay,
    })
}

/// Fraction of argmax-correct predictions over a test set.
pub fn evaluate_accuracy(
    params: &ParamVector,
    spec: &NetSpec,
    test: &ClientDataset,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (logits, _) = nn::forward(params, spec, &test.features)?;
    let correct = predicted_labels(&logits)
        .into_iter()
        .zip(&test.labels)
        .filter(|(p, &l)| *p == l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn predicted_labels(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}
