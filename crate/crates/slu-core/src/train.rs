//! Training loop: seeded shuffling, scheduled sampling, the halving LR
//! schedule, per-epoch greedy validation, and best-epoch checkpointing.

use crate::autodiff::Tape;
use crate::data::{pad_batch, parse_manifest, SlotVocab, UtteranceRecord};
use crate::decode::{beam_search_decode, greedy_decode, intent_accuracy, IntentPrediction};
use crate::derive_seed;
use crate::error::{Result, SluError};
use crate::features::{extract_features, read_feature_cache, write_feature_cache, FeatureSequence};
use crate::model::{
    load_model, posteriors, save_model, teacher_forcing_prob, training_loss, ModelConfig,
    SamplingSchedule, SluModel,
};
use crate::nn::{lr_at_epoch, optimizer_step, OptimizerState, UpdateRule};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub optimizer: UpdateRule,
    pub grad_clip: Option<f64>,
    pub schedule: SamplingSchedule,
    pub seed: u64,
    pub resume: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 15,
            batch_size: 32,
            base_lr: 0.001,
            optimizer: UpdateRule::adam_default(),
            grad_clip: Some(5.0),
            schedule: SamplingSchedule::default(),
            seed: 0,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_intent_error_pct: f64,
    pub lr: f64,
    pub teacher_prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_validation_error: f64,
    pub best_checkpoint_path: PathBuf,
    pub seed: u64,
    pub history: Vec<EpochMetrics>,
}

pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub state: TrainState,
    pub vocab: SlotVocab,
}

/// Stable cache file name for one audio path (double FNV-1a).
fn cache_name(path: &Path) -> String {
    let bytes = path.to_string_lossy();
    let mut h1: u64 = 0xcbf2_9ce4_8422_2325;
    let mut h2: u64 = 0x6c62_272e_07bb_0142;
    for b in bytes.as_bytes() {
        h1 = (h1 ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        h2 = (h2 ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b5);
    }
    format!("{h1:016x}{h2:016x}.sluf")
}

/// Extract CMN-normalized MFCCs for every record, reading/writing the disk
/// cache when a directory is given. Record order is preserved.
pub fn load_features(
    records: &[UtteranceRecord],
    cache_dir: Option<&Path>,
) -> Result<Vec<FeatureSequence>> {
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| SluError::io(dir, e))?;
    }
    records
        .par_iter()
        .map(|r| {
            if let Some(dir) = cache_dir {
                let path = dir.join(cache_name(&r.audio_path));
                if path.exists() {
                    return read_feature_cache(&path);
                }
                let feats = extract_features(&r.audio_path)?;
                write_feature_cache(&path, &feats)?;
                Ok(feats)
            } else {
                extract_features(&r.audio_path)
            }
        })
        .collect()
}

fn resolve_targets(records: &[UtteranceRecord], vocab: &SlotVocab) -> Vec<[Option<usize>; 3]> {
    records.iter().map(|r| vocab.resolve(r)).collect()
}

/// Deterministic batch index plan: seeded shuffle, fixed-size chunks, with a
/// trailing singleton folded into the previous batch (batch norm needs at
/// least two rows in train mode).
fn batch_plan(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut plan: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    if plan.len() >= 2 && plan.last().map(|b| b.len()).unwrap_or(0) == 1 {
        let last = plan.pop().unwrap();
        plan.last_mut().unwrap().extend(last);
    }
    plan
}

/// Greedy validation pass (inference conditioning only), returning the
/// intent error percentage.
fn validation_error(
    model: &SluModel<f32>,
    features: &[FeatureSequence],
    targets: &[[Option<usize>; 3]],
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(features.len());
    for chunk in features.chunks(64) {
        let dummy_targets = vec![[0usize; 3]; chunk.len()];
        let batch = pad_batch(chunk, &dummy_targets)?;
        for p in posteriors(model, &batch)? {
            predictions.push(greedy_decode(&p)?.tuple);
        }
    }
    Ok(intent_accuracy(&predictions, targets)?.intent_error_pct)
}

/// Train per the recipe: `epochs` passes with scheduled sampling at
/// `teacher_forcing_prob(epoch-1)`, Adam (default) at `lr_at_epoch`, global
/// gradient clipping, and a checkpoint whenever validation improves.
///
/// `config.slot_sizes` is overwritten from the training vocabulary and
/// `config.input_dim` from the features.
pub fn train_model(
    train_manifest: &Path,
    valid_manifest: &Path,
    mut config: ModelConfig,
    hp: &Hyperparams,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| SluError::io(out_dir, e))?;
    let train_records = parse_manifest(train_manifest)?;
    let valid_records = parse_manifest(valid_manifest)?;
    if train_records.is_empty() || valid_records.is_empty() {
        return Err(SluError::Data("empty train or validation manifest".into()));
    }
    let vocab = SlotVocab::build(&train_records)?;
    config.slot_sizes = vocab.sizes();

    let cache_dir = out_dir.join("feature_cache");
    let train_feats = load_features(&train_records, Some(&cache_dir))?;
    let valid_feats = load_features(&valid_records, Some(&cache_dir))?;
    config.input_dim = train_feats[0].dim();

    let train_targets: Vec<[usize; 3]> = train_records
        .iter()
        .map(|r| {
            vocab.resolve(r).map(|o| o.expect("train labels are in the train vocab"))
        })
        .collect();
    let valid_targets = resolve_targets(&valid_records, &vocab);

    let best_path = out_dir.join("best.slum");
    let last_path = out_dir.join("last.slum");
    let state_path = out_dir.join("state.json");
    let log_path = out_dir.join("train.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| SluError::io(&log_path, e))?;

    let (mut model, mut state) = if hp.resume && last_path.exists() && state_path.exists() {
        let (model, _) = load_model(&last_path)?;
        let text = std::fs::read_to_string(&state_path).map_err(|e| SluError::io(&state_path, e))?;
        let state: TrainState = serde_json::from_str(&text)
            .map_err(|e| SluError::Format(format!("{}: {e}", state_path.display())))?;
        (model, state)
    } else {
        let model = SluModel::<f32>::new(config.clone(), derive_seed(hp.seed, 1))?;
        let state = TrainState {
            epoch: 0,
            best_validation_error: f64::INFINITY,
            best_checkpoint_path: best_path.clone(),
            seed: hp.seed,
            history: Vec::new(),
        };
        (model, state)
    };

    let mut optimizer = OptimizerState::<f32>::new(hp.optimizer, hp.base_lr);
    optimizer.grad_clip = hp.grad_clip;
    hp.schedule.validate()?;

    let start_epoch = state.epoch + 1;
    for epoch in start_epoch..=hp.epochs {
        let lr = lr_at_epoch(epoch, hp.base_lr)?;
        optimizer.epoch = epoch;
        let tf_prob = teacher_forcing_prob(epoch - 1, &hp.schedule);

        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, 1000 + epoch as u64));
        let plan = batch_plan(train_records.len(), hp.batch_size, &mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for (batch_idx, indices) in plan.iter().enumerate() {
            if indices.is_empty() {
                let _ = writeln!(log, "epoch {epoch} batch {batch_idx}: empty batch skipped");
                continue;
            }
            let feats: Vec<FeatureSequence> =
                indices.iter().map(|&i| train_feats[i].clone()).collect();
            let targets: Vec<[usize; 3]> = indices.iter().map(|&i| train_targets[i]).collect();
            let batch = pad_batch(&feats, &targets)?;

            let mut tape = Tape::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                hp.seed,
                ((epoch as u64) << 32) | batch_idx as u64,
            ));
            let loss = training_loss(&mut model, &mut tape, &batch, tf_prob, &mut rng)
                .map_err(|e| {
                    SluError::Numeric(format!("epoch {epoch} batch {batch_idx}: {e}"))
                })?;
            let loss_value = tape.value(loss).item() as f64;
            let grads = tape.backward(loss);
            model.params.apply_backward(&tape, &grads);
            optimizer_step(&mut model.params, &mut optimizer)
                .map_err(|e| SluError::Numeric(format!("epoch {epoch} batch {batch_idx}: {e}")))?;
            loss_sum += loss_value * indices.len() as f64;
            loss_count += indices.len();
        }
        let train_loss = loss_sum / loss_count.max(1) as f64;

        let val_error = validation_error(&model, &valid_feats, &valid_targets)?;
        state.history.push(EpochMetrics {
            epoch,
            train_loss,
            validation_intent_error_pct: val_error,
            lr,
            teacher_prob: tf_prob,
        });
        state.epoch = epoch;
        if val_error < state.best_validation_error {
            state.best_validation_error = val_error;
            save_model(&best_path, &model, Some(&vocab))?;
        }
        save_model(&last_path, &model, Some(&vocab))?;
        let state_json = serde_json::to_string_pretty(&state)
            .map_err(|e| SluError::Format(e.to_string()))?;
        std::fs::write(&state_path, state_json).map_err(|e| SluError::io(&state_path, e))?;
        let line = format!(
            "epoch {epoch:>3}  lr {lr:.6}  p_teacher {tf_prob:.3}  train_loss {train_loss:.4}  valid_intent_err {val_error:.2}%"
        );
        let _ = writeln!(log, "{line}");
        println!("{line}");
    }

    let history_path = out_dir.join("history.json");
    let json =
        serde_json::to_string_pretty(&state).map_err(|e| SluError::Format(e.to_string()))?;
    std::fs::write(&history_path, json).map_err(|e| SluError::io(&history_path, e))?;
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        state,
        vocab,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SlotErrors {
    pub action: f64,
    pub object: f64,
    pub location: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub intent_error: f64,
    pub slot_errors: SlotErrors,
    pub n_utterances: usize,
    pub constrained: bool,
    pub beam_width: usize,
    pub checkpoint: String,
    pub manifest: String,
    pub seed: u64,
    pub oov_label_slots: usize,
}

#[derive(Debug, Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    action: &'a str,
    object: &'a str,
    location: &'a str,
    log_prob: f64,
    correct: bool,
}

/// Deterministic evaluation pass. Labels in the manifest that are absent
/// from the checkpoint's vocabulary count as automatic slot errors.
pub fn evaluate_model(
    checkpoint: &Path,
    manifest: &Path,
    constrained: bool,
    beam_width: usize,
    jsonl_out: Option<&Path>,
    cache_dir: Option<&Path>,
) -> Result<EvalReport> {
    let (model, vocab) = load_model(checkpoint)?;
    let vocab = vocab.ok_or_else(|| {
        SluError::Format(format!(
            "checkpoint {} carries no vocabulary; cannot resolve labels",
            checkpoint.display()
        ))
    })?;
    let records = parse_manifest(manifest)?;
    if records.is_empty() {
        return Err(SluError::Data(format!(
            "empty evaluation manifest {}",
            manifest.display()
        )));
    }
    let features = load_features(&records, cache_dir)?;
    let targets = resolve_targets(&records, &vocab);

    let mask = if constrained {
        Some(&vocab.valid_intents)
    } else {
        None
    };
    let mut predictions: Vec<IntentPrediction> = Vec::with_capacity(records.len());
    for chunk_start in (0..features.len()).step_by(64) {
        let chunk = &features[chunk_start..(chunk_start + 64).min(features.len())];
        let dummy = vec![[0usize; 3]; chunk.len()];
        let batch = pad_batch(chunk, &dummy)?;
        for p in posteriors(&model, &batch)? {
            let pred = if beam_width == 1 && mask.is_none() {
                greedy_decode(&p)?
            } else {
                beam_search_decode(&p, beam_width, mask)?
            };
            predictions.push(pred);
        }
    }
    let tuples: Vec<[usize; 3]> = predictions.iter().map(|p| p.tuple).collect();
    let metrics = intent_accuracy(&tuples, &targets)?;

    if let Some(path) = jsonl_out {
        let mut file = std::fs::File::create(path).map_err(|e| SluError::io(path, e))?;
        for (record, (pred, target)) in records.iter().zip(predictions.iter().zip(&targets)) {
            let correct = (0..3).all(|s| target[s] == Some(pred.tuple[s]));
            let line = PredictionLine {
                id: &record.audio_path.to_string_lossy(),
                action: vocab.label(crate::data::Slot::Action, pred.tuple[0]),
                object: vocab.label(crate::data::Slot::Object, pred.tuple[1]),
                location: vocab.label(crate::data::Slot::Location, pred.tuple[2]),
                log_prob: pred.log_prob,
                correct,
            };
            let json = serde_json::to_string(&line).map_err(|e| SluError::Format(e.to_string()))?;
            writeln!(file, "{json}").map_err(|e| SluError::io(path, e))?;
        }
    }

    Ok(EvalReport {
        intent_error: metrics.intent_error_pct,
        slot_errors: SlotErrors {
            action: metrics.slot_error_pct[0],
            object: metrics.slot_error_pct[1],
            location: metrics.slot_error_pct[2],
        },
        n_utterances: metrics.n_utterances,
        constrained,
        beam_width,
        checkpoint: checkpoint.to_string_lossy().into_owned(),
        manifest: manifest.to_string_lossy().into_owned(),
        seed: 0,
        oov_label_slots: metrics.oov_label_slots,
    })
}

/// Evaluate a subset of records against an already-loaded model (used by the
/// split experiments where several test sets share one checkpoint).
pub fn evaluate_records(
    model: &SluModel<f32>,
    vocab: &SlotVocab,
    records: &[UtteranceRecord],
    cache_dir: Option<&Path>,
) -> Result<crate::decode::Metrics> {
    if records.is_empty() {
        return Err(SluError::Data("no records to evaluate".into()));
    }
    let features = load_features(records, cache_dir)?;
    let targets = resolve_targets(records, vocab);
    let mut predictions = Vec::with_capacity(records.len());
    for chunk_start in (0..features.len()).step_by(64) {
        let chunk = &features[chunk_start..(chunk_start + 64).min(features.len())];
        let dummy = vec![[0usize; 3]; chunk.len()];
        let batch = pad_batch(chunk, &dummy)?;
        for p in posteriors(model, &batch)? {
            predictions.push(greedy_decode(&p)?.tuple);
        }
    }
    intent_accuracy(&predictions, &targets)
}
