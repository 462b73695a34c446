//! Minibatch Adagrad training with seeded initialization and shuffling.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{Example, ModelConfig, ModelError, ModelParams, ModelVariant};
use crate::tensor::{ParamRole, ParamStore, Tape};

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Model(ModelError),
    InvalidConfig(String),
    NonFiniteGradient { name: String },
    Misaligned { instances: usize, path_sets: usize },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::InvalidConfig(msg) => write!(f, "invalid training config: {msg}"),
            TrainError::NonFiniteGradient { name } => write!(f, "non-finite gradient in parameter `{name}`"),
            TrainError::Misaligned { instances, path_sets } => {
                write!(f, "{instances} instances but {path_sets} path records")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_range: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub variant: ModelVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            seed: 0,
            init_range: DEFAULT_INIT_RANGE,
            learning_rate: DEFAULT_LEARNING_RATE,
            epsilon: DEFAULT_EPSILON,
            variant: ModelVariant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return Err(TrainError::InvalidConfig("init_range must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(TrainError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a, used to derive a per-parameter stream from the run seed.
fn fnv1a(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Fills weights and embeddings from `Uniform(-range, range)` and sets biases
/// to zero. Each parameter draws from its own stream keyed by seed and name,
/// so adding a parameter does not shift the others.
pub fn init_store(store: &mut ParamStore, seed: u64, range: f64) {
    let dist = Uniform::new_inclusive(-range, range).expect("finite positive range");
    for p in store.iter_mut() {
        if p.role == ParamRole::Bias {
            p.value.data_mut().fill(0.0);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, &p.name));
        for v in p.value.data_mut() {
            *v = dist.sample(&mut rng);
        }
    }
}

pub fn init_params(config: &TrainConfig, dims: ModelConfig) -> Result<ModelParams, TrainError> {
    config.validate()?;
    let mut params = ModelParams::new(dims)?;
    init_store(&mut params.store, config.seed, config.init_range);
    Ok(params)
}

/// Per-element squared-gradient accumulators, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub accumulators: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl AdagradState {
    pub fn new(store: &ParamStore, learning_rate: f64, epsilon: f64) -> Self {
        Self {
            accumulators: store.iter().map(|(_, p)| alloc::vec![0.0; p.value.len()]).collect(),
            learning_rate,
            epsilon,
        }
    }

    /// Applies one update from the gradients held in `store`, then zeroes
    /// them. Elements with a zero gradient are left untouched. The store is
    /// unchanged if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TrainError> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(TrainError::NonFiniteGradient { name: p.name.clone() });
        }
        let lr = self.learning_rate;
        let eps = self.epsilon;
        for (p, acc) in store.iter_mut().zip(&mut self.accumulators) {
            let grads = p.grad.data_mut();
            for ((v, g), a) in p.value.data_mut().iter_mut().zip(grads.iter_mut()).zip(acc.iter_mut()) {
                if *g != 0.0 {
                    *a += *g * *g;
                    *v -= lr * *g / libm::sqrt(*a + eps);
                    *g = 0.0;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub mean_loss: f64,
}

/// Mean loss over `examples` in `batch_size` chunks, without gradients.
pub fn mean_loss(
    params: &ModelParams,
    examples: &[Example<'_>],
    variant: ModelVariant,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let mut tape = Tape::without_grad();
        let loss = params.loss(&mut tape, chunk, variant)?;
        total += tape.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Trains in place. The log starts with an epoch-0 row holding the loss at
/// initialization; each later row is the mean per-instance training loss
/// seen during that epoch.
pub fn train(
    params: &mut ModelParams,
    examples: &[Example<'_>],
    config: &TrainConfig,
) -> Result<Vec<LossRecord>, TrainError> {
    train_with(params, examples, config, |_| {})
}

/// [`train`] with a callback after each logged epoch.
pub fn train_with(
    params: &mut ModelParams,
    examples: &[Example<'_>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>, TrainError> {
    config.validate()?;
    let mut log = Vec::with_capacity(config.epochs + 1);
    if examples.is_empty() {
        return Ok(log);
    }
    let initial = LossRecord {
        epoch: 0,
        step: 0,
        mean_loss: mean_loss(params, examples, config.variant, config.batch_size)?,
    };
    on_epoch(&initial);
    log.push(initial);

    let mut state = AdagradState::new(&params.store, config.learning_rate, config.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    let mut batch = Vec::with_capacity(config.batch_size);
    params.store.zero_grads();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i]));
            let mut tape = Tape::new();
            let loss = params.loss(&mut tape, &batch, config.variant)?;
            total += tape.value(loss).data()[0] * batch.len() as f64;
            tape.backward(loss, &mut params.store)?;
            drop(tape);
            state.step(&mut params.store)?;
            step += 1;
        }
        let record = LossRecord { epoch, step, mean_loss: total / examples.len() as f64 };
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}

/// Click probabilities for every example, in order.
pub fn predict_all(
    params: &ModelParams,
    examples: &[Example<'_>],
    variant: ModelVariant,
    batch_size: usize,
) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        out.extend(params.predict_batch(chunk, variant)?);
    }
    Ok(out)
}
