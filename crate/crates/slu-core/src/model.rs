//! The intent-classification architecture: a stack of (bi)recurrent layers,
//! a representation layer with average pooling, and three slot classifiers
//! that are either independent softmax heads or a conditional chain.
//!
//! Conditioning on an earlier slot concatenates the representation with the
//! column of that head's weight matrix for the chosen label (bias excluded),
//! so those columns receive gradient both as classifier weights and as
//! inputs to later heads. During scheduled sampling the chosen label per
//! utterance and slot is the ground truth with probability p, otherwise the
//! model's own argmax.

use crate::autodiff::{NodeId, Tape};
use crate::config::{format_kv, parse_kv, require, KvMap};
use crate::data::{Batch, Slot, SlotVocab};
use crate::error::{Result, SluError};
use crate::nn::rnn::{register_layer, rnn_layer_forward, CellKind};
use crate::nn::{batch_norm, dropout_apply, softmax_f64, BnState, Mode, ParamSet};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connections {
    Sequential,
    Residual,
}

impl Connections {
    pub fn as_str(self) -> &'static str {
        match self {
            Connections::Sequential => "sequential",
            Connections::Residual => "residual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReprKind {
    SingleLstm,
    SingleGru,
    TripleLstm,
}

impl ReprKind {
    pub fn cell(self) -> CellKind {
        match self {
            ReprKind::SingleLstm | ReprKind::TripleLstm => CellKind::Lstm,
            ReprKind::SingleGru => CellKind::Gru,
        }
    }

    pub fn is_triple(self) -> bool {
        self == ReprKind::TripleLstm
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReprKind::SingleLstm => "single_lstm",
            ReprKind::SingleGru => "single_gru",
            ReprKind::TripleLstm => "triple_lstm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Unconditional,
    Conditional,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Unconditional => "unconditional",
            ClassifierKind::Conditional => "conditional",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stack_layers: usize,
    pub cell_kind: CellKind,
    pub hidden: usize,
    pub bidirectional: bool,
    pub connections: Connections,
    pub representation: ReprKind,
    pub classifier: ClassifierKind,
    pub slot_order: [Slot; 3],
    pub dropout_rate: f64,
    pub input_dim: usize,
    pub slot_sizes: [usize; 3],
}

impl ModelConfig {
    /// Full-scale defaults around the given slot sizes: 3-layer
    /// bidirectional LSTM stack, H=512, single-LSTM representation,
    /// conditional classifier.
    pub fn recipe_default(slot_sizes: [usize; 3]) -> Self {
        ModelConfig {
            stack_layers: 3,
            cell_kind: CellKind::Lstm,
            hidden: 512,
            bidirectional: true,
            connections: Connections::Sequential,
            representation: ReprKind::SingleLstm,
            classifier: ClassifierKind::Conditional,
            slot_order: [Slot::Action, Slot::Object, Slot::Location],
            dropout_rate: 0.3,
            input_dim: 40,
            slot_sizes,
        }
    }

    pub fn rep_width(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    /// Position of each slot identity in the conditioning chain.
    pub fn position_of(&self, slot: Slot) -> usize {
        self.slot_order
            .iter()
            .position(|&s| s == slot)
            .expect("slot_order is a permutation")
    }

    /// Classifier input width at each chain position. In the conditional
    /// chain, position k consumes the representation plus the conditioning
    /// columns of every earlier head.
    pub fn head_input_dims(&self) -> [usize; 3] {
        let r = self.rep_width();
        match self.classifier {
            ClassifierKind::Unconditional => [r, r, r],
            ClassifierKind::Conditional => {
                let mut dims = [0usize; 3];
                for k in 0..3 {
                    dims[k] = r + dims[..k].iter().sum::<usize>();
                }
                dims
            }
        }
    }

    pub fn classes_of(&self, slot: Slot) -> usize {
        self.slot_sizes[slot.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stack_layers < 1 {
            return Err(SluError::Config("stack_layers must be >= 1".into()));
        }
        if self.hidden < 1 || self.input_dim < 1 {
            return Err(SluError::Config("hidden and input_dim must be >= 1".into()));
        }
        if self.slot_sizes.iter().any(|&c| c == 0) {
            return Err(SluError::Config("slot sizes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(SluError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let mut seen = [false; 3];
        for s in self.slot_order {
            seen[s.index()] = true;
        }
        if seen != [true; 3] {
            return Err(SluError::Config("slot_order must be a permutation".into()));
        }
        if self.connections == Connections::Residual {
            // every summed pair of layer outputs must share a width; with a
            // uniform hidden size this holds for all layers past the first
            let widths: Vec<usize> = (0..self.stack_layers).map(|_| self.rep_width()).collect();
            for pair in widths.windows(2) {
                if pair[0] != pair[1] {
                    return Err(SluError::Config(format!(
                        "residual connection would sum widths {} and {}",
                        pair[0], pair[1]
                    )));
                }
            }
        }
        Ok(())
    }

    fn rep_keys(&self) -> Vec<(String, Slot)> {
        if self.representation.is_triple() {
            Slot::ALL
                .iter()
                .map(|&s| (s.as_str().to_string(), s))
                .collect()
        } else {
            vec![("single".to_string(), Slot::Action)]
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut map = KvMap::new();
        map.insert("stack_layers".into(), self.stack_layers.to_string());
        map.insert("cell_kind".into(), self.cell_kind.as_str().into());
        map.insert("hidden".into(), self.hidden.to_string());
        map.insert("bidirectional".into(), self.bidirectional.to_string());
        map.insert("connections".into(), self.connections.as_str().into());
        map.insert("representation".into(), self.representation.as_str().into());
        map.insert("classifier".into(), self.classifier.as_str().into());
        map.insert(
            "slot_order".into(),
            self.slot_order
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("dropout_rate".into(), self.dropout_rate.to_string());
        map.insert("input_dim".into(), self.input_dim.to_string());
        map.insert(
            "slot_sizes".into(),
            self.slot_sizes
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map
    }

    pub fn from_kv(map: &mut KvMap) -> Result<Self> {
        let cell_kind = match require::<String>(map, "cell_kind")?.as_str() {
            "lstm" => CellKind::Lstm,
            "gru" => CellKind::Gru,
            other => return Err(SluError::Config(format!("unknown cell_kind `{other}`"))),
        };
        let connections = match require::<String>(map, "connections")?.as_str() {
            "sequential" => Connections::Sequential,
            "residual" => Connections::Residual,
            other => return Err(SluError::Config(format!("unknown connections `{other}`"))),
        };
        let representation = match require::<String>(map, "representation")?.as_str() {
            "single_lstm" => ReprKind::SingleLstm,
            "single_gru" => ReprKind::SingleGru,
            "triple_lstm" => ReprKind::TripleLstm,
            other => {
                return Err(SluError::Config(format!(
                    "unknown representation `{other}`"
                )))
            }
        };
        let classifier = match require::<String>(map, "classifier")?.as_str() {
            "unconditional" => ClassifierKind::Unconditional,
            "conditional" => ClassifierKind::Conditional,
            other => return Err(SluError::Config(format!("unknown classifier `{other}`"))),
        };
        let order_raw = require::<String>(map, "slot_order")?;
        let parts: Vec<&str> = order_raw.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(SluError::Config(format!("bad slot_order `{order_raw}`")));
        }
        let mut slot_order = [Slot::Action; 3];
        for (i, p) in parts.iter().enumerate() {
            slot_order[i] = parse_slot(p)?;
        }
        let sizes_raw = require::<String>(map, "slot_sizes")?;
        let sizes: Vec<usize> = sizes_raw
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| SluError::Config(format!("bad slot_sizes `{sizes_raw}`")))?;
        if sizes.len() != 3 {
            return Err(SluError::Config(format!("bad slot_sizes `{sizes_raw}`")));
        }
        let config = ModelConfig {
            stack_layers: require(map, "stack_layers")?,
            cell_kind,
            hidden: require(map, "hidden")?,
            bidirectional: require(map, "bidirectional")?,
            connections,
            representation,
            classifier,
            slot_order,
            dropout_rate: require(map, "dropout_rate")?,
            input_dim: require(map, "input_dim")?,
            slot_sizes: [sizes[0], sizes[1], sizes[2]],
        };
        config.validate()?;
        Ok(config)
    }
}

pub fn parse_slot(name: &str) -> Result<Slot> {
    match name {
        "action" => Ok(Slot::Action),
        "object" => Ok(Slot::Object),
        "location" => Ok(Slot::Location),
        other => Err(SluError::Config(format!("unknown slot `{other}`"))),
    }
}

/// Sigmoid-shaped teacher-forcing schedule from 1.0 down to a 0.5 floor.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSchedule {
    pub start: f64,
    pub floor: f64,
    pub midpoint_epoch: f64,
    pub steepness: f64,
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        SamplingSchedule {
            start: 1.0,
            floor: 0.5,
            midpoint_epoch: 5.0,
            steepness: 1.0,
        }
    }
}

impl SamplingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steepness <= 0.0 {
            return Err(SluError::InvalidArgument(
                "sampling schedule steepness must be positive".into(),
            ));
        }
        if !(self.floor <= self.start && (0.0..=1.0).contains(&self.floor)
            && (0.0..=1.0).contains(&self.start))
        {
            return Err(SluError::InvalidArgument(
                "sampling schedule endpoints must satisfy 0 <= floor <= start <= 1".into(),
            ));
        }
        Ok(())
    }
}

/// p(e) = floor + (start - floor) * sigmoid(k * (e0 - e)).
pub fn teacher_forcing_prob(epoch: usize, schedule: &SamplingSchedule) -> f64 {
    let z = schedule.steepness * (schedule.midpoint_epoch - epoch as f64);
    let sig = 1.0 / (1.0 + (-z).exp());
    schedule.floor + (schedule.start - schedule.floor) * sig
}

pub struct SluModel<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    pub bn: BTreeMap<String, BnState<F>>,
}

impl<F: Scalar> SluModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut in_dim = config.input_dim;
        for layer in 0..config.stack_layers {
            register_layer(
                &mut params,
                &format!("stack.{layer}"),
                config.cell_kind,
                in_dim,
                config.hidden,
                config.bidirectional,
                &mut rng,
            )?;
            in_dim = config.rep_width();
        }
        let mut bn = BTreeMap::new();
        for (key, _) in config.rep_keys() {
            register_layer(
                &mut params,
                &format!("rep.{key}"),
                config.representation.cell(),
                config.rep_width(),
                config.hidden,
                config.bidirectional,
                &mut rng,
            )?;
            params.add(
                &format!("bn.{key}.gamma"),
                Tensor::full(vec![config.rep_width()], F::one()),
            )?;
            params.add(
                &format!("bn.{key}.beta"),
                Tensor::zeros(vec![config.rep_width()]),
            )?;
            bn.insert(key, BnState::new(config.rep_width()));
        }
        let dims = config.head_input_dims();
        for slot in Slot::ALL {
            let d = dims[config.position_of(slot)];
            let c = config.classes_of(slot);
            params.add(
                &format!("head.{}.weight", slot.as_str()),
                Tensor::uniform(vec![d, c], 1.0 / (d as f64).sqrt(), &mut rng),
            )?;
            params.add(
                &format!("head.{}.bias", slot.as_str()),
                Tensor::zeros(vec![c]),
            )?;
        }
        Ok(SluModel { config, params, bn })
    }
}

/// Stack forward: per-timestep outputs of the last layer. Residual mode sums
/// the two previous layers' outputs as the input to each layer past the
/// second; the first two layers run sequentially.
pub fn forward_stack<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamSet<F>,
    config: &ModelConfig,
    xs: &[NodeId],
    lengths: &[usize],
) -> Result<Vec<NodeId>> {
    let mut outputs: Vec<Vec<NodeId>> = Vec::with_capacity(config.stack_layers);
    for layer in 0..config.stack_layers {
        let input: Vec<NodeId> = if layer == 0 {
            xs.to_vec()
        } else if layer == 1 || config.connections == Connections::Sequential {
            outputs[layer - 1].clone()
        } else {
            let (a, b) = (&outputs[layer - 1], &outputs[layer - 2]);
            a.iter().zip(b).map(|(&x, &y)| tape.add(x, y)).collect()
        };
        let out = rnn_layer_forward(
            tape,
            &input,
            params,
            &format!("stack.{layer}"),
            config.cell_kind,
            config.hidden,
            config.bidirectional,
            lengths,
        )?;
        outputs.push(out);
    }
    Ok(outputs.pop().expect("at least one layer"))
}

/// Pooled representations keyed like the model's BN states.
pub enum PooledReps {
    Single(NodeId),
    Triple([NodeId; 3]),
}

/// Representation layer: one more recurrent pass (or three, one per slot)
/// followed by average pooling over each utterance's valid frames.
pub fn representation_layer<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamSet<F>,
    config: &ModelConfig,
    stack_out: &[NodeId],
    lengths: &[usize],
) -> Result<PooledReps> {
    if lengths.iter().any(|&l| l == 0) {
        return Err(SluError::InvalidArgument(
            "zero-length utterance in representation layer".into(),
        ));
    }
    if lengths.iter().any(|&l| l > stack_out.len()) {
        return Err(SluError::InvalidArgument(format!(
            "length exceeds {} available frames",
            stack_out.len()
        )));
    }
    let run = |tape: &mut Tape<F>, key: &str| -> Result<NodeId> {
        let out = rnn_layer_forward(
            tape,
            stack_out,
            params,
            &format!("rep.{key}"),
            config.representation.cell(),
            config.hidden,
            config.bidirectional,
            lengths,
        )?;
        Ok(tape.mean_over_time(&out, lengths))
    };
    if config.representation.is_triple() {
        let a = run(tape, "action")?;
        let o = run(tape, "object")?;
        let l = run(tape, "location")?;
        Ok(PooledReps::Triple([a, o, l]))
    } else {
        Ok(PooledReps::Single(run(tape, "single")?))
    }
}

struct EncodedReps {
    /// Post-batchnorm, post-dropout representation per slot identity.
    by_slot: [NodeId; 3],
}

#[allow(clippy::too_many_arguments)]
fn encode<F: Scalar>(
    params: &ParamSet<F>,
    config: &ModelConfig,
    bn: &mut BTreeMap<String, BnState<F>>,
    tape: &mut Tape<F>,
    batch: &Batch,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<EncodedReps> {
    let xs: Vec<NodeId> = (0..batch.max_len)
        .map(|t| {
            let step: Vec<F> = batch
                .step(t)
                .into_iter()
                .map(|v| F::from_f64(v as f64))
                .collect();
            tape.constant(Tensor::new(vec![batch.batch, batch.dim], step))
        })
        .collect();
    let stack_out = forward_stack(tape, params, config, &xs, &batch.lengths)?;
    let pooled = representation_layer(tape, params, config, &stack_out, &batch.lengths)?;

    let mut normalize = |tape: &mut Tape<F>, key: &str, pooled: NodeId| -> Result<NodeId> {
        let gamma = params.bind(tape, &format!("bn.{key}.gamma"));
        let beta = params.bind(tape, &format!("bn.{key}.beta"));
        let state = bn
            .get_mut(key)
            .ok_or_else(|| SluError::InvalidState(format!("missing bn state `{key}`")))?;
        let normed = batch_norm(tape, pooled, gamma, beta, state, mode)?;
        dropout_apply(tape, normed, config.dropout_rate, mode, rng)
    };

    let by_slot = match pooled {
        PooledReps::Single(node) => {
            let post = normalize(tape, "single", node)?;
            [post, post, post]
        }
        PooledReps::Triple([a, o, l]) => {
            let pa = normalize(tape, "action", a)?;
            let po = normalize(tape, "object", o)?;
            let pl = normalize(tape, "location", l)?;
            [pa, po, pl]
        }
    };
    Ok(EncodedReps { by_slot })
}

fn argmax_row<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Summed slot cross-entropy on a training batch with scheduled sampling at
/// probability `teacher_prob`. Returns the scalar loss node; call
/// `tape.backward` plus `params.apply_backward` to accumulate gradients.
pub fn training_loss<F: Scalar>(
    model: &mut SluModel<F>,
    tape: &mut Tape<F>,
    batch: &Batch,
    teacher_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    for (b, &[a, o, l]) in batch.targets.iter().enumerate() {
        let sizes = model.config.slot_sizes;
        if a >= sizes[0] || o >= sizes[1] || l >= sizes[2] {
            return Err(SluError::InvalidArgument(format!(
                "target indices ({a},{o},{l}) out of range for sizes {sizes:?} at row {b}"
            )));
        }
    }
    let SluModel {
        ref params,
        ref config,
        ref mut bn,
    } = *model;
    let reps = encode(params, config, bn, tape, batch, Mode::Train, rng)?;
    let order = config.slot_order;
    let dropout = config.dropout_rate;

    let mut losses = Vec::with_capacity(3);
    let mut cond_cols: Vec<NodeId> = Vec::new();
    for position in 0..3 {
        let slot = order[position];
        let rep = reps.by_slot[slot.index()];
        let weight = params.bind(tape, &format!("head.{}.weight", slot.as_str()));
        let bias = params.bind(tape, &format!("head.{}.bias", slot.as_str()));

        let raw_input = if config.classifier == ClassifierKind::Conditional && position > 0 {
            let mut parts = vec![rep];
            parts.extend_from_slice(&cond_cols);
            tape.concat(&parts)
        } else {
            rep
        };
        let input = dropout_apply(tape, raw_input, dropout, Mode::Train, rng)?;
        let scores = tape.matmul(input, weight);
        let logits = tape.add_bias(scores, bias);
        let targets: Vec<usize> = batch.targets.iter().map(|t| t[slot.index()]).collect();
        losses.push(tape.cross_entropy(logits, &targets)?);

        if config.classifier == ClassifierKind::Conditional && position < 2 {
            // scheduled sampling: ground truth with probability p, else the
            // model's own prediction, per utterance
            let chosen: Vec<usize> = (0..batch.batch)
                .map(|b| {
                    if rng.random::<f64>() < teacher_prob {
                        targets[b]
                    } else {
                        argmax_row(tape.value(logits).row(b))
                    }
                })
                .collect();
            cond_cols.push(tape.gather_columns(weight, chosen));
        }
    }
    let loss = tape.add_n(&losses);
    tape.value(loss).assert_finite("training loss")?;
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Posteriors for inference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HeadWeights {
    /// in_dim × classes, row-major, f64.
    pub w: Vec<f64>,
    pub in_dim: usize,
    pub classes: usize,
    pub bias: Vec<f64>,
}

impl HeadWeights {
    /// Column of the weight matrix for one label (bias excluded).
    fn column(&self, label: usize) -> Vec<f64> {
        (0..self.in_dim)
            .map(|d| self.w[d * self.classes + label])
            .collect()
    }

    fn probs(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_dim);
        let mut logits = self.bias.clone();
        for (d, &x) in input.iter().enumerate() {
            let row = &self.w[d * self.classes..(d + 1) * self.classes];
            for (l, &w) in logits.iter_mut().zip(row) {
                *l += x * w;
            }
        }
        softmax_f64(&logits)
    }
}

/// Per-utterance slot distributions: three independent marginals, or a
/// conditional-chain evaluator that yields p(slot_k | earlier labels, D)
/// for any assignment of the earlier slots.
#[derive(Debug, Clone)]
pub enum SlotPosteriors {
    Unconditional {
        /// Indexed by slot identity (action, object, location).
        probs: [Vec<f64>; 3],
    },
    Conditional(ConditionalPosteriors),
}

#[derive(Debug, Clone)]
pub struct ConditionalPosteriors {
    pub order: [Slot; 3],
    /// Representation consumed by the head at each chain position.
    rep: [Vec<f64>; 3],
    /// Head weights at each chain position.
    heads: [HeadWeights; 3],
}

impl ConditionalPosteriors {
    pub fn new(order: [Slot; 3], rep: [Vec<f64>; 3], heads: [HeadWeights; 3]) -> Result<Self> {
        let mut cond_width = 0;
        for k in 0..3 {
            let expect = rep[k].len() + cond_width;
            if heads[k].in_dim != expect {
                return Err(SluError::Shape(format!(
                    "head {k} input dim {} but representation plus conditioning is {expect}",
                    heads[k].in_dim
                )));
            }
            if heads[k].w.len() != heads[k].in_dim * heads[k].classes
                || heads[k].bias.len() != heads[k].classes
            {
                return Err(SluError::Shape(format!("head {k} weight sizes inconsistent")));
            }
            cond_width += heads[k].in_dim;
        }
        Ok(ConditionalPosteriors { order, rep, heads })
    }
    /// Distribution of the slot at `position` given the labels chosen at the
    /// earlier positions.
    pub fn probs_at(&self, position: usize, earlier: &[usize]) -> Result<Vec<f64>> {
        assert!(position < 3 && earlier.len() == position);
        let mut input = self.rep[position].clone();
        for (k, &label) in earlier.iter().enumerate() {
            if label >= self.heads[k].classes {
                return Err(SluError::InvalidArgument(format!(
                    "conditioning label {label} out of range for {} classes",
                    self.heads[k].classes
                )));
            }
            input.extend(self.heads[k].column(label));
        }
        Ok(self.heads[position].probs(&input))
    }

    pub fn classes_at(&self, position: usize) -> usize {
        self.heads[position].classes
    }
}

impl SlotPosteriors {
    /// Slot sizes by identity.
    pub fn sizes(&self) -> [usize; 3] {
        match self {
            SlotPosteriors::Unconditional { probs } => {
                [probs[0].len(), probs[1].len(), probs[2].len()]
            }
            SlotPosteriors::Conditional(c) => {
                let mut sizes = [0; 3];
                for (pos, slot) in c.order.iter().enumerate() {
                    sizes[slot.index()] = c.heads[pos].classes;
                }
                sizes
            }
        }
    }

    pub fn order(&self) -> [Slot; 3] {
        match self {
            SlotPosteriors::Unconditional { .. } => [Slot::Action, Slot::Object, Slot::Location],
            SlotPosteriors::Conditional(c) => c.order,
        }
    }

    /// log p(action, object, location | D) for a tuple indexed by identity.
    pub fn log_joint(&self, tuple: [usize; 3]) -> Result<f64> {
        match self {
            SlotPosteriors::Unconditional { probs } => Ok((0..3)
                .map(|s| probs[s][tuple[s]].max(f64::MIN_POSITIVE).ln())
                .sum()),
            SlotPosteriors::Conditional(c) => {
                let mut earlier = Vec::new();
                let mut total = 0.0;
                for pos in 0..3 {
                    let label = tuple[c.order[pos].index()];
                    let p = c.probs_at(pos, &earlier)?;
                    total += p[label].max(f64::MIN_POSITIVE).ln();
                    earlier.push(label);
                }
                Ok(total)
            }
        }
    }
}

/// Inference-mode posteriors for every utterance in the batch. Batch norm
/// uses running statistics and dropout is inactive, so this is a pure
/// function of the model and input.
pub fn posteriors<F: Scalar>(model: &SluModel<F>, batch: &Batch) -> Result<Vec<SlotPosteriors>> {
    let mut tape = Tape::new();
    // rng is unused on the eval path; seeded constantly for the signature
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // eval never updates running stats; the clone keeps the signature &self
    let mut bn = model.bn.clone();
    let reps = encode(
        &model.params,
        &model.config,
        &mut bn,
        &mut tape,
        batch,
        Mode::Eval,
        &mut rng,
    )?;

    let head = |slot: Slot| -> HeadWeights {
        let w = model
            .params
            .value(&format!("head.{}.weight", slot.as_str()))
            .expect("head weight");
        let b = model
            .params
            .value(&format!("head.{}.bias", slot.as_str()))
            .expect("head bias");
        HeadWeights {
            w: w.to_f64_vec(),
            in_dim: w.rows(),
            classes: w.cols(),
            bias: b.to_f64_vec(),
        }
    };

    let mut out = Vec::with_capacity(batch.batch);
    for b in 0..batch.batch {
        let rep_of = |slot: Slot| -> Vec<f64> {
            tape.value(reps.by_slot[slot.index()])
                .row(b)
                .iter()
                .map(|&v| v.to_f64())
                .collect()
        };
        match model.config.classifier {
            ClassifierKind::Unconditional => {
                let probs = [
                    head(Slot::Action).probs(&rep_of(Slot::Action)),
                    head(Slot::Object).probs(&rep_of(Slot::Object)),
                    head(Slot::Location).probs(&rep_of(Slot::Location)),
                ];
                out.push(SlotPosteriors::Unconditional { probs });
            }
            ClassifierKind::Conditional => {
                let order = model.config.slot_order;
                out.push(SlotPosteriors::Conditional(ConditionalPosteriors {
                    order,
                    rep: [rep_of(order[0]), rep_of(order[1]), rep_of(order[2])],
                    heads: [head(order[0]), head(order[1]), head(order[2])],
                }));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 4] = b"SLUM";
const MODEL_VERSION: u32 = 1;

fn vocab_to_kv(map: &mut KvMap, vocab: &SlotVocab) {
    for slot in Slot::ALL {
        map.insert(
            format!("vocab.{}s", slot.as_str()),
            vocab.labels_for(slot).join("|"),
        );
    }
    map.insert(
        "vocab.valid_intents".into(),
        vocab
            .valid_intents
            .iter()
            .map(|t| format!("{}:{}:{}", t[0], t[1], t[2]))
            .collect::<Vec<_>>()
            .join("|"),
    );
}

fn vocab_from_kv(map: &mut KvMap) -> Result<Option<SlotVocab>> {
    let actions = map.remove("vocab.actions");
    let objects = map.remove("vocab.objects");
    let locations = map.remove("vocab.locations");
    let intents = map.remove("vocab.valid_intents");
    match (actions, objects, locations, intents) {
        (None, None, None, None) => Ok(None),
        (Some(a), Some(o), Some(l), Some(i)) => {
            let split = |s: &str| -> Vec<String> {
                if s.is_empty() {
                    Vec::new()
                } else {
                    s.split('|').map(String::from).collect()
                }
            };
            let mut intents_set = std::collections::BTreeSet::new();
            if !i.is_empty() {
                for triple in i.split('|') {
                    let parts: Vec<usize> = triple
                        .split(':')
                        .map(|x| x.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| {
                            SluError::Format(format!("bad valid_intents entry `{triple}`"))
                        })?;
                    if parts.len() != 3 {
                        return Err(SluError::Format(format!(
                            "bad valid_intents entry `{triple}`"
                        )));
                    }
                    intents_set.insert([parts[0], parts[1], parts[2]]);
                }
            }
            SlotVocab::from_parts(split(&a), split(&o), split(&l), intents_set).map(Some)
        }
        _ => Err(SluError::Format(
            "checkpoint carries a partial vocabulary".into(),
        )),
    }
}

/// Serialize a model (and optionally its vocabulary) to the self-describing
/// "SLUM" container. Tensors are stored as little-endian f32; the round trip
/// is bit-exact.
pub fn serialize_model(model: &SluModel<f32>, vocab: Option<&SlotVocab>) -> Vec<u8> {
    let mut kv = model.config.to_kv();
    if let Some(v) = vocab {
        vocab_to_kv(&mut kv, v);
    }
    let config_text = format_kv(&kv);

    let mut tensors: Vec<(String, &Tensor<f32>)> = model
        .params
        .iter_sorted()
        .map(|e| (e.name.clone(), &e.value))
        .collect();
    for (key, state) in &model.bn {
        tensors.push((format!("bnstate.{key}.running_mean"), &state.running_mean));
        tensors.push((format!("bnstate.{key}.running_var"), &state.running_var));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SluError::Format("truncated model container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn deserialize_model(bytes: &[u8]) -> Result<(SluModel<f32>, Option<SlotVocab>)> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(SluError::Format("bad model magic".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(SluError::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| SluError::Format("config block is not UTF-8".into()))?;
    let mut kv = parse_kv(config_text)?;
    let vocab = vocab_from_kv(&mut kv)?;
    let config = ModelConfig::from_kv(&mut kv)?;
    crate::config::reject_unknown(&kv).map_err(|e| SluError::Format(e.to_string()))?;

    let count = r.u32()? as usize;
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| SluError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data));
    }
    if r.pos != bytes.len() {
        return Err(SluError::Format("trailing bytes in model container".into()));
    }

    // rebuild the model skeleton, then overwrite every tensor from the file
    let mut model = SluModel::<f32>::new(config, 0)?;
    for slot in 0..model.params.len() {
        let name = model.params.entry(slot).name.clone();
        let tensor = tensors.remove(&name).ok_or_else(|| {
            SluError::Format(format!("model container is missing tensor `{name}`"))
        })?;
        if tensor.shape() != model.params.entry(slot).value.shape() {
            return Err(SluError::Format(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                tensor.shape(),
                model.params.entry(slot).value.shape()
            )));
        }
        model.params.entry_mut(slot).value = tensor;
    }
    let keys: Vec<String> = model.bn.keys().cloned().collect();
    for key in keys {
        let mean = tensors
            .remove(&format!("bnstate.{key}.running_mean"))
            .ok_or_else(|| SluError::Format(format!("missing bn state `{key}`")))?;
        let var = tensors
            .remove(&format!("bnstate.{key}.running_var"))
            .ok_or_else(|| SluError::Format(format!("missing bn state `{key}`")))?;
        let state = model.bn.get_mut(&key).unwrap();
        state.running_mean = mean;
        state.running_var = var;
    }
    if let Some(name) = tensors.keys().next() {
        return Err(SluError::Format(format!(
            "model container has unexpected tensor `{name}`"
        )));
    }
    Ok((model, vocab))
}

pub fn save_model(path: &Path, model: &SluModel<f32>, vocab: Option<&SlotVocab>) -> Result<()> {
    std::fs::write(path, serialize_model(model, vocab)).map_err(|e| SluError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(SluModel<f32>, Option<SlotVocab>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| SluError::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| SluError::io(path, e))?;
    deserialize_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pad_batch;
    use crate::features::FeatureSequence;

    fn small_config(classifier: ClassifierKind, representation: ReprKind) -> ModelConfig {
        ModelConfig {
            stack_layers: 2,
            cell_kind: CellKind::Lstm,
            hidden: 4,
            bidirectional: true,
            connections: Connections::Sequential,
            representation,
            classifier,
            slot_order: [Slot::Action, Slot::Object, Slot::Location],
            dropout_rate: 0.3,
            input_dim: 5,
            slot_sizes: [3, 4, 2],
        }
    }

    fn random_batch(seed: u64, lengths: &[usize], dim: usize, sizes: [usize; 3]) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<FeatureSequence> = lengths
            .iter()
            .map(|&t| {
                let rows: Vec<Vec<f32>> = (0..t)
                    .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                    .collect();
                FeatureSequence::from_rows(rows, true).unwrap()
            })
            .collect();
        let targets: Vec<[usize; 3]> = lengths
            .iter()
            .map(|_| {
                [
                    rng.random_range(0..sizes[0]),
                    rng.random_range(0..sizes[1]),
                    rng.random_range(0..sizes[2]),
                ]
            })
            .collect();
        pad_batch(&feats, &targets).unwrap()
    }

    fn copy_param(dst: &mut SluModel<f64>, dst_name: &str, src: &SluModel<f64>, src_name: &str) {
        let tensor = src.params.value(src_name).unwrap().clone();
        let slot = dst.params.slot(dst_name).unwrap();
        dst.params.entry_mut(slot).value = tensor;
    }

    #[test]
    fn single_layer_residual_equals_sequential() {
        let mut cfg = small_config(ClassifierKind::Unconditional, ReprKind::SingleLstm);
        cfg.stack_layers = 1;
        let seq = SluModel::<f64>::new(cfg.clone(), 42).unwrap();
        cfg.connections = Connections::Residual;
        let res = SluModel::<f64>::new(cfg, 42).unwrap();
        let batch = random_batch(1, &[4, 6], 5, [3, 4, 2]);
        let pa = posteriors(&seq, &batch).unwrap();
        let pb = posteriors(&res, &batch).unwrap();
        for (a, b) in pa.iter().zip(&pb) {
            match (a, b) {
                (
                    SlotPosteriors::Unconditional { probs: x },
                    SlotPosteriors::Unconditional { probs: y },
                ) => {
                    for s in 0..3 {
                        for (p, q) in x[s].iter().zip(&y[s]) {
                            assert!((p - q).abs() < 1e-12);
                        }
                    }
                }
                _ => panic!("expected unconditional posteriors"),
            }
        }
    }

    #[test]
    fn residual_with_zeroed_middle_layer_skips_it() {
        let mut cfg = small_config(ClassifierKind::Unconditional, ReprKind::SingleLstm);
        cfg.stack_layers = 3;
        cfg.connections = Connections::Residual;
        cfg.dropout_rate = 0.0;
        let mut three = SluModel::<f64>::new(cfg.clone(), 7).unwrap();
        // zero out layer 1 (the middle one)
        for dir in ["fwd", "bwd"] {
            for part in ["w_ih", "w_hh", "bias"] {
                let name = format!("stack.1.{dir}.{part}");
                let slot = three.params.slot(&name).unwrap();
                let shape = three.params.entry(slot).value.shape().to_vec();
                three.params.entry_mut(slot).value = Tensor::zeros(shape);
            }
        }
        // an equivalent 2-layer sequential model: L1 feeds L3 directly, since
        // out(L2)=0 makes the residual input out(L2)+out(L1) = out(L1)
        let mut cfg2 = cfg.clone();
        cfg2.stack_layers = 2;
        cfg2.connections = Connections::Sequential;
        let mut two = SluModel::<f64>::new(cfg2, 7).unwrap();
        for dir in ["fwd", "bwd"] {
            for part in ["w_ih", "w_hh", "bias"] {
                copy_param(
                    &mut two,
                    &format!("stack.0.{dir}.{part}"),
                    &three,
                    &format!("stack.0.{dir}.{part}"),
                );
                copy_param(
                    &mut two,
                    &format!("stack.1.{dir}.{part}"),
                    &three,
                    &format!("stack.2.{dir}.{part}"),
                );
            }
            for part in ["w_ih", "w_hh", "bias"] {
                copy_param(
                    &mut two,
                    &format!("rep.single.{dir}.{part}"),
                    &three,
                    &format!("rep.single.{dir}.{part}"),
                );
            }
        }
        for key in ["bn.single.gamma", "bn.single.beta"] {
            copy_param(&mut two, key, &three, key);
        }
        for slot in Slot::ALL {
            for part in ["weight", "bias"] {
                let name = format!("head.{}.{part}", slot.as_str());
                copy_param(&mut two, &name, &three, &name);
            }
        }
        let batch = random_batch(3, &[5, 7], 5, [3, 4, 2]);
        let pa = posteriors(&three, &batch).unwrap();
        let pb = posteriors(&two, &batch).unwrap();
        for (a, b) in pa.iter().zip(&pb) {
            match (a, b) {
                (
                    SlotPosteriors::Unconditional { probs: x },
                    SlotPosteriors::Unconditional { probs: y },
                ) => {
                    for s in 0..3 {
                        for (p, q) in x[s].iter().zip(&y[s]) {
                            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
                        }
                    }
                }
                _ => panic!("expected unconditional posteriors"),
            }
        }
    }

    #[test]
    fn stack_output_width_is_2h_per_step() {
        let mut cfg = small_config(ClassifierKind::Unconditional, ReprKind::SingleLstm);
        cfg.stack_layers = 3;
        cfg.hidden = 512;
        cfg.input_dim = 40;
        let model = SluModel::<f32>::new(cfg.clone(), 0).unwrap();
        let batch = random_batch(5, &[7], 40, [3, 4, 2]);
        let mut tape = Tape::<f32>::new();
        let xs: Vec<NodeId> = (0..batch.max_len)
            .map(|t| {
                let step: Vec<f32> = batch.step(t);
                tape.constant(Tensor::new(vec![1, 40], step))
            })
            .collect();
        let out = forward_stack(&mut tape, &model.params, &cfg, &xs, &batch.lengths).unwrap();
        assert_eq!(out.len(), 7);
        for &o in &out {
            assert_eq!(tape.value(o).shape(), &[1, 1024]);
        }
    }

    #[test]
    fn triple_representation_gives_three_full_width_vectors() {
        let cfg = small_config(ClassifierKind::Unconditional, ReprKind::TripleLstm);
        let model = SluModel::<f64>::new(cfg.clone(), 3).unwrap();
        let batch = random_batch(4, &[5, 3], 5, [3, 4, 2]);
        let mut tape = Tape::<f64>::new();
        let xs: Vec<NodeId> = (0..batch.max_len)
            .map(|t| {
                let step: Vec<f64> = batch.step(t).iter().map(|&v| v as f64).collect();
                tape.constant(Tensor::new(vec![2, 5], step))
            })
            .collect();
        let stack = forward_stack(&mut tape, &model.params, &cfg, &xs, &batch.lengths).unwrap();
        match representation_layer(&mut tape, &model.params, &cfg, &stack, &batch.lengths).unwrap()
        {
            PooledReps::Triple(nodes) => {
                for n in nodes {
                    assert_eq!(tape.value(n).shape(), &[2, 8]);
                }
            }
            _ => panic!("expected triple representation"),
        }
    }

    #[test]
    fn representation_rejects_zero_length() {
        let cfg = small_config(ClassifierKind::Unconditional, ReprKind::SingleLstm);
        let model = SluModel::<f64>::new(cfg.clone(), 3).unwrap();
        let mut tape = Tape::<f64>::new();
        let xs = vec![tape.constant(Tensor::zeros(vec![1, 5]))];
        let stack = forward_stack(&mut tape, &model.params, &cfg, &xs, &[1]).unwrap();
        assert!(representation_layer(&mut tape, &model.params, &cfg, &stack, &[0]).is_err());
    }

    #[test]
    fn padded_and_unpadded_posteriors_agree() {
        for repr in [ReprKind::SingleLstm, ReprKind::TripleLstm] {
            let cfg = small_config(ClassifierKind::Unconditional, repr);
            let model = SluModel::<f64>::new(cfg, 11).unwrap();
            let alone = random_batch(21, &[5], 5, [3, 4, 2]);
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            // same utterance plus a longer companion forcing padding
            let first = FeatureSequence::from_rows(
                (0..5).map(|t| alone.step(t)[..5].to_vec()).collect(),
                true,
            )
            .unwrap();
            let second = FeatureSequence::from_rows(
                (0..9)
                    .map(|_| (0..5).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                    .collect(),
                true,
            )
            .unwrap();
            let padded = pad_batch(&[first, second], &[alone.targets[0], [0, 0, 0]]).unwrap();
            let pa = posteriors(&model, &alone).unwrap();
            let pb = posteriors(&model, &padded).unwrap();
            match (&pa[0], &pb[0]) {
                (
                    SlotPosteriors::Unconditional { probs: x },
                    SlotPosteriors::Unconditional { probs: y },
                ) => {
                    for s in 0..3 {
                        for (p, q) in x[s].iter().zip(&y[s]) {
                            assert!((p - q).abs() < 1e-6, "slot {s}: {p} vs {q}");
                        }
                    }
                }
                _ => panic!("expected unconditional"),
            }
        }
    }

    #[test]
    fn unconditional_joint_is_product_and_normalized() {
        let cfg = small_config(ClassifierKind::Unconditional, ReprKind::SingleLstm);
        let model = SluModel::<f64>::new(cfg, 13).unwrap();
        let batch = random_batch(31, &[6], 5, [3, 4, 2]);
        let p = &posteriors(&model, &batch).unwrap()[0];
        let sizes = p.sizes();
        let mut total = 0.0;
        for a in 0..sizes[0] {
            for o in 0..sizes[1] {
                for l in 0..sizes[2] {
                    total += p.log_joint([a, o, l]).unwrap().exp();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "joint total {total}");
        if let SlotPosteriors::Unconditional { probs } = p {
            // product structure and factorized argmax
            let lj = p.log_joint([1, 2, 0]).unwrap();
            let direct = probs[0][1].ln() + probs[1][2].ln() + probs[2][0].ln();
            assert!((lj - direct).abs() < 1e-12);
            let argmaxes: Vec<usize> = (0..3)
                .map(|s| {
                    probs[s]
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect();
            let mut best = ([9, 9, 9], f64::NEG_INFINITY);
            for a in 0..sizes[0] {
                for o in 0..sizes[1] {
                    for l in 0..sizes[2] {
                        let s = p.log_joint([a, o, l]).unwrap();
                        if s > best.1 {
                            best = ([a, o, l], s);
                        }
                    }
                }
            }
            assert_eq!(best.0.to_vec(), argmaxes);
        }
    }

    #[test]
    fn literal_marginal_product_example() {
        let p = SlotPosteriors::Unconditional {
            probs: [
                vec![0.5, 0.5],
                vec![0.4, 0.6],
                vec![0.2, 0.8],
            ],
        };
        let joint = p.log_joint([0, 0, 0]).unwrap().exp();
        assert!((joint - 0.04).abs() < 1e-12);
    }

    #[test]
    fn conditional_chain_sums_to_one() {
        for order in [
            [Slot::Action, Slot::Object, Slot::Location],
            [Slot::Location, Slot::Action, Slot::Object],
        ] {
            let mut cfg = small_config(ClassifierKind::Conditional, ReprKind::SingleLstm);
            cfg.slot_order = order;
            let model = SluModel::<f64>::new(cfg, 17).unwrap();
            let batch = random_batch(32, &[5], 5, [3, 4, 2]);
            let p = &posteriors(&model, &batch).unwrap()[0];
            let sizes = p.sizes();
            let mut total = 0.0;
            for a in 0..sizes[0] {
                for o in 0..sizes[1] {
                    for l in 0..sizes[2] {
                        total += p.log_joint([a, o, l]).unwrap().exp();
                    }
                }
            }
            assert!((total - 1.0).abs() < 1e-6, "chain total {total}");
        }
    }

    #[test]
    fn zero_conditioning_rows_make_the_chain_unconditional() {
        let mut cfg = small_config(ClassifierKind::Conditional, ReprKind::SingleLstm);
        cfg.dropout_rate = 0.0;
        let mut model = SluModel::<f64>::new(cfg.clone(), 19).unwrap();
        let repw = cfg.rep_width();
        // zero every weight row that consumes conditioning columns
        for slot in Slot::ALL {
            let pos = cfg.position_of(slot);
            if pos == 0 {
                continue;
            }
            let name = format!("head.{}.weight", slot.as_str());
            let pslot = model.params.slot(&name).unwrap();
            let classes = cfg.classes_of(slot);
            let value = &mut model.params.entry_mut(pslot).value;
            let rows = value.rows();
            for d in repw..rows {
                for c in 0..classes {
                    value.data_mut()[d * classes + c] = 0.0;
                }
            }
        }
        let batch = random_batch(33, &[7], 5, [3, 4, 2]);
        let p = &posteriors(&model, &batch).unwrap()[0];
        if let SlotPosteriors::Conditional(c) = p {
            let base1 = c.probs_at(1, &[0]).unwrap();
            for label in 1..c.classes_at(0) {
                let other = c.probs_at(1, &[label]).unwrap();
                for (x, y) in base1.iter().zip(&other) {
                    assert!((x - y).abs() < 1e-12, "head 2 depends on conditioning");
                }
            }
            let base2 = c.probs_at(2, &[0, 0]).unwrap();
            for l0 in 0..c.classes_at(0) {
                for l1 in 0..c.classes_at(1) {
                    let other = c.probs_at(2, &[l0, l1]).unwrap();
                    for (x, y) in base2.iter().zip(&other) {
                        assert!((x - y).abs() < 1e-12, "head 3 depends on conditioning");
                    }
                }
            }
        } else {
            panic!("expected conditional posteriors");
        }
    }

    #[test]
    fn conditioning_label_changes_downstream_distribution() {
        let cfg = small_config(ClassifierKind::Conditional, ReprKind::SingleLstm);
        let model = SluModel::<f64>::new(cfg, 23).unwrap();
        let batch = random_batch(34, &[6], 5, [3, 4, 2]);
        let p = &posteriors(&model, &batch).unwrap()[0];
        if let SlotPosteriors::Conditional(c) = p {
            let p0 = c.probs_at(1, &[0]).unwrap();
            let p1 = c.probs_at(1, &[1]).unwrap();
            let tv: f64 = p0
                .iter()
                .zip(&p1)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv > 1e-6, "total variation {tv} unexpectedly zero");
        } else {
            panic!("expected conditional posteriors");
        }
    }

    #[test]
    fn teacher_forcing_schedule_endpoints() {
        let s = SamplingSchedule::default();
        s.validate().unwrap();
        assert!(teacher_forcing_prob(0, &s) > 0.99);
        assert!((teacher_forcing_prob(5, &s) - 0.75).abs() < 1e-12);
        assert!(teacher_forcing_prob(1_000_000, &s) < 0.5 + 1e-6);
        let mut prev = 1.0;
        for e in 0..30 {
            let p = teacher_forcing_prob(e, &s);
            assert!((0.5..=1.0).contains(&p));
            assert!(p <= prev + 1e-15, "schedule must be non-increasing");
            prev = p;
        }
    }

    #[test]
    fn uniform_heads_give_sum_of_log_class_counts() {
        let mut cfg = small_config(ClassifierKind::Unconditional, ReprKind::SingleLstm);
        cfg.slot_sizes = [6, 14, 4];
        cfg.dropout_rate = 0.0;
        let mut model = SluModel::<f64>::new(cfg, 29).unwrap();
        for slot in Slot::ALL {
            for part in ["weight", "bias"] {
                let name = format!("head.{}.{part}", slot.as_str());
                let pslot = model.params.slot(&name).unwrap();
                let shape = model.params.entry(pslot).value.shape().to_vec();
                model.params.entry_mut(pslot).value = Tensor::zeros(shape);
            }
        }
        let batch = random_batch(35, &[4, 5], 5, [6, 14, 4]);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = training_loss(&mut model, &mut tape, &batch, 1.0, &mut rng).unwrap();
        let expect = 6.0f64.ln() + 14.0f64.ln() + 4.0f64.ln();
        assert!((expect - 5.817111).abs() < 1e-6);
        assert!(
            (tape.value(loss).item() - expect).abs() < 1e-9,
            "loss {} vs {expect}",
            tape.value(loss).item()
        );
    }

    #[test]
    fn saturated_heads_give_zero_loss() {
        let mut cfg = small_config(ClassifierKind::Unconditional, ReprKind::SingleLstm);
        cfg.dropout_rate = 0.0;
        let mut model = SluModel::<f64>::new(cfg.clone(), 31).unwrap();
        let target = [1usize, 2, 0];
        for slot in Slot::ALL {
            let wname = format!("head.{}.weight", slot.as_str());
            let pslot = model.params.slot(&wname).unwrap();
            let shape = model.params.entry(pslot).value.shape().to_vec();
            model.params.entry_mut(pslot).value = Tensor::zeros(shape);
            let bname = format!("head.{}.bias", slot.as_str());
            let bslot = model.params.slot(&bname).unwrap();
            let mut bias = Tensor::zeros(vec![cfg.classes_of(slot)]);
            bias.data_mut()[target[slot.index()]] = 60.0;
            model.params.entry_mut(bslot).value = bias;
        }
        let mut batch = random_batch(36, &[4, 5], 5, [3, 4, 2]);
        batch.targets = vec![target, target];
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = training_loss(&mut model, &mut tape, &batch, 1.0, &mut rng).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-9);
    }

    #[test]
    fn training_loss_is_deterministic_per_seed() {
        let cfg = small_config(ClassifierKind::Conditional, ReprKind::TripleLstm);
        let batch = random_batch(37, &[5, 6], 5, [3, 4, 2]);
        let run = || {
            let mut model = SluModel::<f64>::new(cfg.clone(), 41).unwrap();
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let loss = training_loss(&mut model, &mut tape, &batch, 0.7, &mut rng).unwrap();
            tape.value(loss).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // compact end-to-end gradient check; the acceptance suite sweeps the
        // full architecture matrix
        let mut cfg = small_config(ClassifierKind::Conditional, ReprKind::SingleLstm);
        cfg.stack_layers = 1;
        cfg.hidden = 3;
        let batch = random_batch(43, &[4, 3], 5, [3, 4, 2]);
        let mut model = SluModel::<f64>::new(cfg, 47).unwrap();

        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let loss = training_loss(&mut model, &mut tape, &batch, 1.0, &mut rng).unwrap();
        let grads = tape.backward(loss);
        model.params.apply_backward(&tape, &grads);

        let h = 1e-5;
        for slot in 0..model.params.len() {
            let name = model.params.entry(slot).name.clone();
            for i in 0..model.params.entry(slot).value.len() {
                let orig = model.params.entry(slot).value.data()[i];
                let eval = |model: &mut SluModel<f64>, v: f64| -> f64 {
                    model.params.entry_mut(slot).value.data_mut()[i] = v;
                    let mut tape = Tape::new();
                    let mut rng = ChaCha8Rng::seed_from_u64(7);
                    let bn_snapshot = model.bn.clone();
                    let loss =
                        training_loss(model, &mut tape, &batch, 1.0, &mut rng).unwrap();
                    let out = tape.value(loss).item();
                    model.bn = bn_snapshot;
                    model.params.entry_mut(slot).value.data_mut()[i] = orig;
                    out
                };
                let fp = eval(&mut model, orig + h);
                let fm = eval(&mut model, orig - h);
                let fd = (fp - fm) / (2.0 * h);
                let ad = model.params.entry(slot).grad.data()[i];
                let denom = ad.abs().max(fd.abs()).max(1e-4);
                assert!(
                    ((ad - fd) / denom).abs() < 1e-4,
                    "{name}[{i}]: ad {ad} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = small_config(ClassifierKind::Conditional, ReprKind::TripleLstm);
        let model = SluModel::<f32>::new(cfg.clone(), 53).unwrap();
        let vocab = SlotVocab::from_parts(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["w".into(), "x".into(), "y".into(), "z".into()],
            vec!["p".into(), "q".into()],
            [[0usize, 1, 0], [2, 3, 1]].into_iter().collect(),
        )
        .unwrap();
        let bytes = serialize_model(&model, Some(&vocab));
        let (loaded, loaded_vocab) = deserialize_model(&bytes).unwrap();
        assert_eq!(loaded.config, cfg, "config must round-trip field for field");
        assert_eq!(loaded_vocab.as_ref(), Some(&vocab));
        for slot in 0..model.params.len() {
            let a = model.params.entry(slot);
            let b = loaded.params.entry(slot);
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data(), "tensor {} differs", a.name);
        }
        // identical forward behaviour on a fixed input
        let batch = random_batch(59, &[5, 4], 5, [3, 4, 2]);
        let pa = posteriors(&model, &batch).unwrap();
        let pb = posteriors(&loaded, &batch).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            let sizes = x.sizes();
            for a in 0..sizes[0] {
                for o in 0..sizes[1] {
                    for l in 0..sizes[2] {
                        let la = x.log_joint([a, o, l]).unwrap();
                        let lb = y.log_joint([a, o, l]).unwrap();
                        assert_eq!(la.to_bits(), lb.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let cfg = small_config(ClassifierKind::Unconditional, ReprKind::SingleLstm);
        let model = SluModel::<f32>::new(cfg, 61).unwrap();
        let mut bytes = serialize_model(&model, None);
        bytes[0] = b'X';
        assert!(matches!(
            deserialize_model(&bytes),
            Err(SluError::Format(_))
        ));
        // truncation is also a format error
        let bytes = serialize_model(&model, None);
        assert!(matches!(
            deserialize_model(&bytes[..bytes.len() - 5]),
            Err(SluError::Format(_))
        ));
    }
}
