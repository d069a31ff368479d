//! Intent decoding: greedy and beam search over the three slot positions,
//! optional valid-intent masking, and the intent-accuracy metric.

use crate::data::Slot;
use crate::error::{Result, SluError};
use crate::model::SlotPosteriors;
use std::collections::BTreeSet;

/// Set of valid (action, object, location) index triples.
pub type IntentMask = BTreeSet<[usize; 3]>;

#[derive(Debug, Clone, PartialEq)]
pub struct IntentPrediction {
    /// Chosen labels by slot identity (action, object, location).
    pub tuple: [usize; 3],
    pub log_prob: f64,
    pub constrained: bool,
}

fn ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

/// Lowest index wins ties.
fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Slot-by-slot argmax; conditional chains condition each head on the
/// labels already chosen.
pub fn greedy_decode(p: &SlotPosteriors) -> Result<IntentPrediction> {
    match p {
        SlotPosteriors::Unconditional { probs } => {
            let tuple = [argmax(&probs[0]), argmax(&probs[1]), argmax(&probs[2])];
            let log_prob = (0..3).map(|s| ln(probs[s][tuple[s]])).sum();
            Ok(IntentPrediction {
                tuple,
                log_prob,
                constrained: false,
            })
        }
        SlotPosteriors::Conditional(c) => {
            let mut earlier = Vec::with_capacity(3);
            let mut log_prob = 0.0;
            let mut tuple = [0usize; 3];
            for pos in 0..3 {
                let probs = c.probs_at(pos, &earlier)?;
                let choice = argmax(&probs);
                log_prob += ln(probs[choice]);
                tuple[c.order[pos].index()] = choice;
                earlier.push(choice);
            }
            Ok(IntentPrediction {
                tuple,
                log_prob,
                constrained: false,
            })
        }
    }
}

/// Can a partial assignment over the first `labels.len()` chain positions
/// still extend to a member of the mask?
fn viable(order: &[Slot; 3], labels: &[usize], mask: &IntentMask) -> bool {
    mask.iter().any(|intent| {
        labels
            .iter()
            .enumerate()
            .all(|(pos, &l)| intent[order[pos].index()] == l)
    })
}

/// Beam search over the three-step slot sequence in chain order. With a
/// mask, partial hypotheses that cannot extend to any valid intent are
/// pruned; the result is exactly the constrained optimum once the width
/// covers the surviving hypothesis count.
pub fn beam_search_decode(
    p: &SlotPosteriors,
    width: usize,
    mask: Option<&IntentMask>,
) -> Result<IntentPrediction> {
    if width < 1 {
        return Err(SluError::InvalidArgument("beam width must be >= 1".into()));
    }
    if let Some(m) = mask {
        if m.is_empty() {
            return Err(SluError::InvalidArgument("empty valid-intent mask".into()));
        }
    }
    let order = p.order();
    let sizes = p.sizes();

    // hypotheses hold labels by chain position
    let mut beam: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for pos in 0..3 {
        let classes = sizes[order[pos].index()];
        let mut next: Vec<(Vec<usize>, f64)> = Vec::with_capacity(beam.len() * classes);
        for (labels, score) in &beam {
            let probs = match p {
                SlotPosteriors::Unconditional { probs } => probs[order[pos].index()].clone(),
                SlotPosteriors::Conditional(c) => c.probs_at(pos, labels)?,
            };
            for (label, &prob) in probs.iter().enumerate() {
                let mut extended = labels.clone();
                extended.push(label);
                if let Some(m) = mask {
                    if !viable(&order, &extended, m) {
                        continue;
                    }
                }
                next.push((extended, score + ln(prob)));
            }
        }
        if next.is_empty() {
            return Err(SluError::InvalidArgument(
                "no hypothesis survives the valid-intent mask".into(),
            ));
        }
        next.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        next.truncate(width);
        beam = next;
    }
    let (labels, log_prob) = beam.into_iter().next().expect("non-empty beam");
    let mut tuple = [0usize; 3];
    for (pos, &l) in labels.iter().enumerate() {
        tuple[order[pos].index()] = l;
    }
    Ok(IntentPrediction {
        tuple,
        log_prob,
        constrained: mask.is_some(),
    })
}

/// Intent error plus per-slot errors, in percent. An intent counts correct
/// only when all three slots match; a `None` target (label unseen in
/// training) is an automatic error for that slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub intent_error_pct: f64,
    pub slot_error_pct: [f64; 3],
    pub n_utterances: usize,
    pub oov_label_slots: usize,
}

pub fn intent_accuracy(
    predictions: &[[usize; 3]],
    targets: &[[Option<usize>; 3]],
) -> Result<Metrics> {
    if predictions.len() != targets.len() {
        return Err(SluError::InvalidArgument(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(SluError::InvalidArgument(
            "cannot score an empty prediction set".into(),
        ));
    }
    let n = predictions.len();
    let mut intent_errors = 0usize;
    let mut slot_errors = [0usize; 3];
    let mut oov = 0usize;
    for (pred, target) in predictions.iter().zip(targets) {
        let mut any_wrong = false;
        for s in 0..3 {
            let ok = match target[s] {
                Some(t) => pred[s] == t,
                None => {
                    oov += 1;
                    false
                }
            };
            if !ok {
                slot_errors[s] += 1;
                any_wrong = true;
            }
        }
        if any_wrong {
            intent_errors += 1;
        }
    }
    let pct = |e: usize| 100.0 * e as f64 / n as f64;
    Ok(Metrics {
        intent_error_pct: pct(intent_errors),
        slot_error_pct: [pct(slot_errors[0]), pct(slot_errors[1]), pct(slot_errors[2])],
        n_utterances: n,
        oov_label_slots: oov,
    })
}

/// Exhaustive argmax over the full tuple space; the oracle beam search is
/// checked against.
pub fn brute_force_decode(
    p: &SlotPosteriors,
    mask: Option<&IntentMask>,
) -> Result<IntentPrediction> {
    let sizes = p.sizes();
    let mut best: Option<IntentPrediction> = None;
    for a in 0..sizes[0] {
        for o in 0..sizes[1] {
            for l in 0..sizes[2] {
                let tuple = [a, o, l];
                if let Some(m) = mask {
                    if !m.contains(&tuple) {
                        continue;
                    }
                }
                let lp = p.log_joint(tuple)?;
                if best.as_ref().map(|b| lp > b.log_prob).unwrap_or(true) {
                    best = Some(IntentPrediction {
                        tuple,
                        log_prob: lp,
                        constrained: mask.is_some(),
                    });
                }
            }
        }
    }
    best.ok_or_else(|| SluError::InvalidArgument("empty valid-intent mask".into()))
}
