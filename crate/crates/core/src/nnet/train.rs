use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::{AugmentConfig, Augmentation};
use super::loss::{batch_loss, Objective};
use super::network::Network;
use super::optim::{OptimizerConfig, OptimizerState};
use super::tensor::{Real, Tensor};
use super::NnetError;
use crate::rng;

/// Indexed training samples. Implementations materialize inputs on demand so
/// large patch sets never have to live in memory.
pub trait Dataset {
    type Target;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input shape of one sample (without batch dimension).
    fn input_shape(&self) -> Vec<usize>;

    /// Writes sample `index` into `input` and returns its target, transformed
    /// by `aug` when given.
    fn sample(&self, index: usize, aug: Option<&Augmentation>, input: &mut [f32]) -> Self::Target;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    /// Final phase only; `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    /// Final phase only; `None` disables plateau decay.
    pub plateau_patience: Option<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    #[serde(default = "AugmentConfig::disabled")]
    pub augment: AugmentConfig,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), NnetError> {
        let bad = |m: &str| Err(NnetError::InvalidSchedule(m.to_string()));
        if self.phases.is_empty() {
            return bad("at least one phase is required");
        }
        for p in &self.phases {
            p.optimizer.validate()?;
        }
        if self.early_stop_patience == Some(0) || self.plateau_patience == Some(0) {
            return bad("patience must be at least 1");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("decay factor must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }

    /// Stable hash of the schedule, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schedule serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn uses_validation(&self) -> bool {
        self.early_stop_patience.is_some() || self.plateau_patience.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Lowest final-phase validation loss, whose parameters were restored.
    pub best_val_loss: Option<f64>,
    /// Index into `records` of that epoch.
    pub best_record: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn final_train_loss(&self) -> Option<f64> {
        match self.best_record {
            Some(i) => Some(self.records[i].train_loss),
            None => self.records.last().map(|r| r.train_loss),
        }
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.best_val_loss.or_else(|| self.records.last().and_then(|r| r.val_loss))
    }
}

pub(crate) fn gather<D: Dataset>(data: &D, indices: &[usize], augs: Option<&[Augmentation]>) -> (Tensor<f32>, Vec<D::Target>) {
    let shape = data.input_shape();
    let item: usize = shape.iter().product();
    let mut buf = vec![0.0f32; indices.len() * item];
    let mut targets = Vec::with_capacity(indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let aug = augs.map(|a| &a[k]);
        targets.push(data.sample(i, aug, &mut buf[k * item..(k + 1) * item]));
    }
    let mut full = vec![indices.len()];
    full.extend(shape);
    (Tensor::new(full, buf).expect("gathered batch matches input shape"), targets)
}

/// Mean loss and its parameter gradients over one batch.
pub fn gradients<T: Real, O: Objective>(
    net: &Network<T>,
    objective: &O,
    inputs: &Tensor<T>,
    targets: &[&O::Target],
) -> Result<(f64, Vec<Vec<T>>), NnetError> {
    let (outputs, trace) = net.forward_train(inputs)?;
    let (loss, d_out) = batch_loss(objective, &outputs, targets, true);
    let mut grads = net.zero_grads();
    net.backward(trace, &d_out.expect("gradient requested"), &mut grads)?;
    Ok((loss, grads))
}

/// Mean loss over a whole dataset, without augmentation.
pub fn evaluate_loss<D: Dataset, O: Objective<Target = D::Target>>(
    net: &Network<f32>,
    objective: &O,
    data: &D,
    batch_size: usize,
) -> Result<f64, NnetError> {
    if data.is_empty() {
        return Err(NnetError::EmptyData);
    }
    let mut total = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, targets) = gather(data, chunk, None);
        let outputs = net.forward(&x)?;
        let refs: Vec<&D::Target> = targets.iter().collect();
        total += batch_loss(objective, &outputs, &refs, false).0 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Runs the phases in order. Each phase starts with fresh optimizer state. In
/// the final phase the validation loss drives plateau decay and early stopping,
/// and the parameters with the lowest validation loss are restored at the end.
pub fn train<D: Dataset, O: Objective<Target = D::Target>>(
    net: &mut Network<f32>,
    objective: &O,
    schedule: &TrainSchedule,
    train_data: &D,
    val_data: &D,
    seed: u64,
) -> Result<TrainHistory, NnetError> {
    schedule.validate()?;
    if train_data.is_empty() || (schedule.uses_validation() && val_data.is_empty()) {
        return Err(NnetError::EmptyData);
    }
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Vec<Vec<f32>>)> = None;
    let mut stopped_early = false;
    let last_phase = schedule.phases.len() - 1;
    let mut indices: Vec<usize> = (0..train_data.len()).collect();

    for (phase_idx, phase) in schedule.phases.iter().enumerate() {
        let mut opt = OptimizerState::<f32>::new(phase.optimizer);
        let is_final = phase_idx == last_phase;
        let mut since_improvement = 0usize;
        let mut since_decay = 0usize;
        let mut phase_best = f64::INFINITY;
        for epoch in 0..phase.max_epochs {
            let mut epoch_rng = rng::stream(seed, (phase_idx * 1_000_000 + epoch) as u64, "epoch");
            indices.sort_unstable();
            indices.shuffle(&mut epoch_rng);
            let mut loss_sum = 0.0;
            for chunk in indices.chunks(schedule.batch_size) {
                let augs: Option<Vec<Augmentation>> = schedule
                    .augment
                    .enabled
                    .then(|| chunk.iter().map(|_| Augmentation::sample(&schedule.augment, &mut epoch_rng)).collect());
                let (x, targets) = gather(train_data, chunk, augs.as_deref());
                let refs: Vec<&D::Target> = targets.iter().collect();
                let (loss, grads) = gradients(net, objective, &x, &refs)?;
                if !loss.is_finite() {
                    return Err(NnetError::Diverged { phase: phase_idx, epoch });
                }
                opt.step(net.params_mut(), &grads)?;
                loss_sum += loss * chunk.len() as f64;
            }
            let train_loss = loss_sum / train_data.len() as f64;
            let val_loss = if val_data.is_empty() { None } else { Some(evaluate_loss(net, objective, val_data, schedule.batch_size)?) };
            records.push(EpochRecord { phase: phase_idx, epoch, train_loss, val_loss, lr: opt.learning_rate });

            if !is_final {
                continue;
            }
            let Some(v) = val_loss else { continue };
            if v < phase_best {
                phase_best = v;
                since_improvement = 0;
                since_decay = 0;
                best = Some((v, records.len() - 1, net.params().to_vec()));
            } else {
                since_improvement += 1;
                since_decay += 1;
            }
            if let Some(p) = schedule.early_stop_patience {
                if since_improvement >= p {
                    stopped_early = true;
                    break;
                }
            }
            if let Some(p) = schedule.plateau_patience {
                if since_decay >= p {
                    opt.learning_rate *= schedule.decay_factor;
                    since_decay = 0;
                }
            }
        }
    }

    let (best_val_loss, best_record) = match best {
        Some((v, idx, params)) => {
            net.params_mut().clone_from_slice(&params);
            (Some(v), Some(idx))
        }
        None => (None, None),
    };
    Ok(TrainHistory { records, best_val_loss, best_record, stopped_early })
}
