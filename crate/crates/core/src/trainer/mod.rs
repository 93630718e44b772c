//! Seeded minibatch training of the prompting parameters with AdamW and a
//! linear warmup.


use alloc::format;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{EncoderMode, Features, PtpModel};
use crate::rng::{self, purpose, EngineRng};
use crate::tensorad::{Gradients, ParameterSet, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: AdamW,
    /// Fraction of all steps spent ramping the learning rate up.
    pub warmup: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Also apply weight decay to the image prototypes.
    pub decay_prototypes: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            optimizer: AdamW::default(),
            warmup: 0.1,
            batch_size: 32,
            epochs: 200,
            decay_prototypes: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the epoch budget for `mode` at `shots`.
    pub fn for_shots(mode: EncoderMode, shots: usize) -> Self {
        Self {
            epochs: default_epochs(mode, shots),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let positive = [self.lr, o.eps].iter().all(|v| *v > 0.0 && v.is_finite());
        let betas = [o.beta1, o.beta2].iter().all(|b| (0.0..1.0).contains(b));
        if !positive || !betas || !(o.weight_decay >= 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::contract(format!("invalid training configuration {self:?}")));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::contract("warmup fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Epoch budget: long runs for 8 and 16 shots, half as long below.
pub fn default_epochs(mode: EncoderMode, shots: usize) -> usize {
    let long = shots >= 8;
    match (mode, long) {
        (EncoderMode::SingleEncoder, true) => 1000,
        (EncoderMode::SingleEncoder, false) => 500,
        (_, true) => 200,
        (_, false) => 100,
    }
}

/// Learning rate at optimizer step `step` (0-based) of `total`.
///
/// Over the first `W = ceil(warmup · total)` steps the rate climbs linearly,
/// reaching `lr · max(step, 1) / W`; from step `W` on it stays at `lr`.
pub fn lr_at(step: usize, total: usize, config: &TrainConfig) -> f64 {
    let w = math::ceil(config.warmup * total as f64) as usize;
    if step >= w {
        config.lr
    } else {
        config.lr * step.max(1) as f64 / w as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    param: usize,
    decay: bool,
    first: Vec<f64>,
    second: Vec<f64>,
}

/// AdamW moments for a chosen subset of a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    slots: Vec<Slot>,
    step: u64,
}

impl OptimState {
    /// Tracks the parameters listed as `(position, apply weight decay)`.
    pub fn new(params: &ParameterSet, selected: &[(usize, bool)]) -> Self {
        let slots = selected
            .iter()
            .map(|&(param, decay)| {
                let n = params.get(param).len();
                Slot {
                    param,
                    decay,
                    first: alloc::vec![0.0; n],
                    second: alloc::vec![0.0; n],
                }
            })
            .collect();
        Self { slots, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Positions of the parameters this state updates.
    pub fn tracked(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.param).collect()
    }

    /// First and second moments of parameter `param`, if tracked.
    pub fn moments(&self, param: usize) -> Option<(&[f64], &[f64])> {
        self.slots
            .iter()
            .find(|s| s.param == param)
            .map(|s| (s.first.as_slice(), s.second.as_slice()))
    }
}

/// One decoupled-weight-decay Adam update. `vars` are the parameters' tape
/// handles; a parameter without a gradient entry is treated as having a zero
/// gradient.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &Gradients,
    vars: &[Var],
    state: &mut OptimState,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    let step = state.step + 1;
    for slot in &state.slots {
        if let Some(g) = grads.get(vars[slot.param]) {
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{}` at step {step}",
                    params.get(slot.param).name()
                )));
            }
        }
    }
    state.step = step;
    let c1 = 1.0 - math::pow(opt.beta1, step as f64);
    let c2 = 1.0 - math::pow(opt.beta2, step as f64);
    for slot in &mut state.slots {
        let g = grads.get(vars[slot.param]).map(|t| t.data());
        let p = params.get_mut(slot.param).values_mut();
        let decay = if slot.decay { 1.0 - lr * opt.weight_decay } else { 1.0 };
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            slot.first[i] = opt.beta1 * slot.first[i] + (1.0 - opt.beta1) * gi;
            slot.second[i] = opt.beta2 * slot.second[i] + (1.0 - opt.beta2) * gi * gi;
            let m = slot.first[i] / c1;
            let v = slot.second[i] / c2;
            p[i] = p[i] * decay - lr * m / (math::sqrt(v) + opt.eps);
        }
    }
    Ok(())
}

/// Shuffles `0..n` and cuts it into batches, keeping the last partial one.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut EngineRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Mean losses over one epoch's minibatches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub r1: f64,
    pub r2: f64,
    /// Cross-entropy or binary cross-entropy term.
    pub data_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<EpochStats>,
    pub steps: usize,
    /// Scores clamped before a log, summed over all steps.
    pub clamped: usize,
    pub optimizer: OptimState,
}

/// A failed run together with the epochs that completed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainFailure {
    pub error: Error,
    pub trace: Vec<EpochStats>,
}

impl core::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{} (after {} completed epochs)", self.error, self.trace.len())
    }
}

impl core::error::Error for TrainFailure {}

/// Trains `model` on the support features and labels. Only the model's
/// trainable parameters change; the encoders are never touched.
pub fn train(
    model: &mut PtpModel,
    features: &Features,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainFailure> {
    let fail = |error, trace| TrainFailure { error, trace };
    if let Err(e) = config.validate() {
        return Err(fail(e, Vec::new()));
    }
    let n = features.len();
    if n == 0 || labels.len() != n {
        return Err(fail(Error::contract("one label per support example is required"), Vec::new()));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= model.categories()) {
        return Err(fail(
            Error::contract(format!("label {y} outside the model's {} categories", model.categories())),
            Vec::new(),
        ));
    }
    let selected: Vec<(usize, bool)> = (0..model.params().len())
        .filter(|&i| model.is_trainable(i))
        .map(|i| (i, config.decay_prototypes || !model.is_prototype(i)))
        .collect();
    let mut state = OptimState::new(model.params(), &selected);
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total = batches_per_epoch * config.epochs;
    let mut shuffle = rng::stream(config.seed, purpose::SHUFFLE);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut clamped = 0;
    let mut step = 0;

    for epoch in 0..config.epochs {
        let mut sums = [0.0; 4];
        let batches = epoch_batches(n, config.batch_size, &mut shuffle);
        for rows in &batches {
            let batch_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let mut tape = Tape::new();
            let vars = model.params().register(&mut tape);
            let result = model
                .loss(&mut tape, &vars, features, rows, &batch_labels)
                .and_then(|terms| {
                    let values = [terms.total, terms.r1, terms.r2, terms.data].map(|v| tape.value(v).item());
                    tape.backward(terms.total)?;
                    Ok((values, terms.clamped))
                })
                .and_then(|(values, c)| {
                    let lr = lr_at(step, total, config);
                    adamw_step(model.params_mut(), tape.gradients(), &vars, &mut state, lr, &config.optimizer)?;
                    Ok((values, c))
                });
            let (values, c) = match result {
                Ok(v) => v,
                Err(e) => {
                    let e = match e {
                        Error::NonFinite { kernel } => {
                            Error::Numeric(format!("non-finite value in `{kernel}` at epoch {epoch}, step {step}"))
                        }
                        other => other,
                    };
                    return Err(fail(e, trace));
                }
            };
            clamped += c;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            step += 1;
        }
        let b = batches.len() as f64;
        trace.push(EpochStats {
            epoch,
            mean_loss: sums[0] / b,
            r1: sums[1] / b,
            r2: sums[2] / b,
            data_loss: sums[3] / b,
        });
    }
    Ok(TrainOutcome {
        trace,
        steps: step,
        clamped,
        optimizer: state,
    })
}
