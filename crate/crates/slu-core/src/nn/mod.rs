//! Neural-network primitives on top of the autodiff tape: named parameters,
//! dropout, batch normalization, the learning-rate schedule and optimizers.

pub mod rnn;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Result, SluError};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use std::collections::BTreeMap;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics update momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Named trainable tensors with accumulated gradient buffers.
pub struct ParamSet<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
    by_name: BTreeMap<String, usize>,
}

pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(SluError::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
        let slot = self.entries.len() - 1;
        self.by_name.insert(name.to_string(), slot);
        Ok(slot)
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, slot: usize) -> &ParamEntry<F> {
        &self.entries[slot]
    }

    pub fn entry_mut(&mut self, slot: usize) -> &mut ParamEntry<F> {
        &mut self.entries[slot]
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<F>> {
        self.slot(name).map(|s| &self.entries[s].value)
    }

    /// Iterate entries in lexicographic name order.
    pub fn iter_sorted(&self) -> impl Iterator<Item = &ParamEntry<F>> {
        self.by_name.values().map(|&s| &self.entries[s])
    }

    pub fn accumulate_grad(&mut self, slot: usize, grad: &Tensor<F>) {
        let entry = &mut self.entries[slot];
        debug_assert_eq!(entry.grad.shape(), grad.shape());
        for (o, &x) in entry.grad.data_mut().iter_mut().zip(grad.data()) {
            *o += x;
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            for g in entry.grad.data_mut() {
                *g = F::zero();
            }
        }
    }

    /// Bind a named parameter onto the tape, returning the leaf node.
    pub fn bind(&self, tape: &mut Tape<F>, name: &str) -> NodeId {
        let slot = self
            .slot(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        tape.param(self.entries[slot].value.clone(), slot)
    }

    /// Fold a backward sweep's leaf gradients into the grad buffers.
    pub fn apply_backward(&mut self, tape: &Tape<F>, grads: &[Option<Tensor<F>>]) {
        for (slot, grad) in tape.leaf_grads(grads) {
            self.accumulate_grad(slot, &grad);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate). Eval mode and rate 0 return the input node unchanged.
pub fn dropout_apply<F: Scalar, R: Rng>(
    tape: &mut Tape<F>,
    x: NodeId,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(SluError::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let n = tape.value(x).len();
    let keep_scale = F::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<F> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    Ok(tape.scale_elems(x, mask))
}

/// Running statistics for one batch-norm site.
#[derive(Debug, Clone)]
pub struct BnState<F: Scalar> {
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
}

impl<F: Scalar> BnState<F> {
    pub fn new(features: usize) -> Self {
        BnState {
            running_mean: Tensor::zeros(vec![features]),
            running_var: Tensor::full(vec![features], F::one()),
        }
    }
}

/// Batch normalization over the batch dim of a B×F node. Train mode uses
/// batch statistics (B >= 2) and updates the running stats; eval mode uses
/// the running stats.
pub fn batch_norm<F: Scalar>(
    tape: &mut Tape<F>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    state: &mut BnState<F>,
    mode: Mode,
) -> Result<NodeId> {
    let xv = tape.value(x);
    let (rows, cols) = (xv.rows(), xv.cols());
    let train = mode == Mode::Train;
    if train && rows < 2 {
        return Err(SluError::InvalidArgument(format!(
            "batch_norm in train mode needs a batch of at least 2, got {rows}"
        )));
    }

    let (mean, var): (Vec<F>, Vec<F>) = if train {
        let n = F::from_f64(rows as f64);
        let mut mean = vec![F::zero(); cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![F::zero(); cols];
        for r in 0..rows {
            for (c, (vv, &v)) in var.iter_mut().zip(xv.row(r)).enumerate() {
                let d = v - mean[c];
                *vv += d * d;
            }
        }
        for v in &mut var {
            *v /= n;
        }
        (mean, var)
    } else {
        (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
        )
    };

    let eps = F::from_f64(BN_EPS);
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            xhat[r * cols + c] = (xv.row(r)[c] - mean[c]) * inv_std[c];
        }
    }

    if train {
        let mom = F::from_f64(BN_MOMENTUM);
        let keep = F::one() - mom;
        for (rm, &m) in state.running_mean.data_mut().iter_mut().zip(&mean) {
            *rm = keep * *rm + mom * m;
        }
        for (rv, &v) in state.running_var.data_mut().iter_mut().zip(&var) {
            *rv = keep * *rv + mom * v;
        }
    }

    Ok(tape.batch_norm_node(x, gamma, beta, xhat, inv_std, train))
}

/// Softmax with max-subtraction over a plain slice (no tape).
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / denom).collect()
}

/// Step schedule: full rate through epoch 6, halved at epoch 7 and again
/// every two epochs after that.
pub fn lr_at_epoch(epoch: usize, base: f64) -> Result<f64> {
    if epoch < 1 {
        return Err(SluError::InvalidArgument(format!(
            "epoch must be >= 1, got {epoch}"
        )));
    }
    if base <= 0.0 {
        return Err(SluError::InvalidArgument(format!(
            "base learning rate must be positive, got {base}"
        )));
    }
    let halvings = if epoch >= 7 { (epoch - 5) / 2 } else { 0 };
    Ok(base * 0.5f64.powi(halvings as i32))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn adam_default() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct OptimizerState<F: Scalar> {
    pub rule: UpdateRule,
    pub base_lr: f64,
    /// 1-based training epoch used by the learning-rate schedule.
    pub epoch: usize,
    pub grad_clip: Option<f64>,
    step: u64,
    moments_m: Vec<Tensor<F>>,
    moments_v: Vec<Tensor<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(rule: UpdateRule, base_lr: f64) -> Self {
        OptimizerState {
            rule,
            base_lr,
            epoch: 1,
            grad_clip: Some(5.0),
            step: 0,
            moments_m: Vec::new(),
            moments_v: Vec::new(),
        }
    }

    pub fn effective_lr(&self) -> Result<f64> {
        lr_at_epoch(self.epoch, self.base_lr)
    }
}

/// Apply one update from the accumulated gradients, then clear them.
pub fn optimizer_step<F: Scalar>(
    params: &mut ParamSet<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    for slot in 0..params.len() {
        let entry = params.entry(slot);
        if entry.grad.data().iter().any(|v| !v.is_finite()) {
            return Err(SluError::Numeric(format!(
                "non-finite gradient in parameter `{}`",
                entry.name
            )));
        }
    }

    if let Some(clip) = state.grad_clip {
        let mut sq = 0.0f64;
        for slot in 0..params.len() {
            for &g in params.entry(slot).grad.data() {
                let g = g.to_f64();
                sq += g * g;
            }
        }
        let norm = sq.sqrt();
        if norm > clip {
            let scale = F::from_f64(clip / norm);
            for slot in 0..params.len() {
                for g in params.entry_mut(slot).grad.data_mut() {
                    *g *= scale;
                }
            }
        }
    }

    let lr = state.effective_lr()?;
    match state.rule {
        UpdateRule::Sgd => {
            let lr = F::from_f64(lr);
            for slot in 0..params.len() {
                let entry = params.entry_mut(slot);
                let (value, grad) = (&mut entry.value, &entry.grad);
                for (p, &g) in value.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
        }
        UpdateRule::Adam { beta1, beta2, eps } => {
            if state.moments_m.is_empty() {
                for slot in 0..params.len() {
                    let shape = params.entry(slot).value.shape().to_vec();
                    state.moments_m.push(Tensor::zeros(shape.clone()));
                    state.moments_v.push(Tensor::zeros(shape));
                }
            }
            state.step += 1;
            let t = state.step as i32;
            let b1 = F::from_f64(beta1);
            let b2 = F::from_f64(beta2);
            let eps = F::from_f64(eps);
            let corr1 = F::from_f64(1.0 - beta1.powi(t));
            let corr2 = F::from_f64(1.0 - beta2.powi(t));
            let lr = F::from_f64(lr);
            for slot in 0..params.len() {
                let entry = params.entry_mut(slot);
                let m = state.moments_m[slot].data_mut();
                let v = state.moments_v[slot].data_mut();
                for ((p, &g), (m, v)) in entry
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(entry.grad.data())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mhat = *m / corr1;
                    let vhat = *v / corr2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    params.zero_grads();
    Ok(())
}
