//! Python bindings for the spoken-intent classification toolkit.
//!
//! Exposes the front-end, schedules, toy-corpus generation, training,
//! evaluation and decoding, plus a loaded-checkpoint classifier class.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use slu_core::data::{
    generate_toy_dataset, make_unseen_wording_split, pad_batch, parse_manifest, write_manifest,
    Slot, SlotVocab, SplitMode, ToySpec,
};
use slu_core::decode::{beam_search_decode, greedy_decode, IntentMask};
use slu_core::error::SluError;
use slu_core::model::{posteriors, SlotPosteriors};
use slu_core::train::{evaluate_model as core_evaluate, train_model as core_train};
use std::path::{Path, PathBuf};

fn to_py_err(e: SluError) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyIOError::new_err(e.to_string()),
    }
}

/// CMN-normalized 40-dim MFCC frames of a 16 kHz WAV file, as a list of rows.
#[pyfunction]
fn extract_features(path: &str) -> PyResult<Vec<Vec<f32>>> {
    let feats = slu_core::features::extract_features(Path::new(path)).map_err(to_py_err)?;
    Ok((0..feats.num_frames()).map(|t| feats.frame(t).to_vec()).collect())
}

/// Learning rate at a 1-based epoch: halved at epoch 7, then every 2 epochs.
#[pyfunction]
fn lr_at_epoch(epoch: usize, base: f64) -> PyResult<f64> {
    slu_core::nn::lr_at_epoch(epoch, base).map_err(to_py_err)
}

/// Scheduled-sampling ground-truth probability at an epoch (0-based).
#[pyfunction]
#[pyo3(signature = (epoch, midpoint_epoch = 5.0, steepness = 1.0))]
fn teacher_forcing_prob(epoch: usize, midpoint_epoch: f64, steepness: f64) -> PyResult<f64> {
    let schedule = slu_core::model::SamplingSchedule {
        midpoint_epoch,
        steepness,
        ..Default::default()
    };
    schedule.validate().map_err(to_py_err)?;
    Ok(slu_core::model::teacher_forcing_prob(epoch, &schedule))
}

#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, actions = None, objects = None, locations = None,
                    wordings_per_intent = None, train_utterances_per_wording = None,
                    test_utterances_per_wording = None))]
#[allow(clippy::too_many_arguments)]
fn generate_toy_corpus(
    py: Python<'_>,
    out_dir: &str,
    seed: u64,
    actions: Option<Vec<String>>,
    objects: Option<Vec<String>>,
    locations: Option<Vec<String>>,
    wordings_per_intent: Option<usize>,
    train_utterances_per_wording: Option<usize>,
    test_utterances_per_wording: Option<usize>,
) -> PyResult<Py<PyDict>> {
    let mut spec = ToySpec::default_spec(seed);
    if let Some(v) = actions {
        spec.actions = v;
    }
    if let Some(v) = objects {
        spec.objects = v;
    }
    if let Some(v) = locations {
        spec.locations = v;
    }
    if let Some(v) = wordings_per_intent {
        spec.wordings_per_intent = v;
    }
    if let Some(v) = train_utterances_per_wording {
        spec.train_utterances_per_wording = v;
    }
    if let Some(v) = test_utterances_per_wording {
        spec.test_utterances_per_wording = v;
    }
    let ds = generate_toy_dataset(&spec, Path::new(out_dir)).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("train_manifest", ds.train_manifest.to_string_lossy())?;
    out.set_item("test_manifest", ds.test_manifest.to_string_lossy())?;
    out.set_item("train_count", ds.train.len())?;
    out.set_item("test_count", ds.test.len())?;
    Ok(out.into())
}

/// Write the 5x augmented manifest (reverb, music, babble, noise copies).
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, seed = 0))]
fn augment_manifest(
    py: Python<'_>,
    manifest: &str,
    out_dir: &str,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let records = parse_manifest(Path::new(manifest)).map_err(to_py_err)?;
    let config = slu_core::augment::AugmentConfig::new(seed);
    let augmented =
        slu_core::augment::augment_manifest(&records, &config, Path::new(out_dir))
            .map_err(to_py_err)?;
    let out_manifest = Path::new(out_dir).join("augmented.csv");
    write_manifest(&out_manifest, &augmented).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("manifest", out_manifest.to_string_lossy())?;
    out.set_item("input_count", records.len())?;
    out.set_item("output_count", augmented.len())?;
    Ok(out.into())
}

/// Unseen-wording split. `mode` is "remove-k" (with k) or "most-frequent".
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, mode = "remove-k", k = None, seed = 0))]
fn split_manifest(
    py: Python<'_>,
    manifest: &str,
    out_dir: &str,
    mode: &str,
    k: Option<usize>,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let records = parse_manifest(Path::new(manifest)).map_err(to_py_err)?;
    let mode = match mode {
        "remove-k" => SplitMode::RemoveK(
            k.ok_or_else(|| PyValueError::new_err("mode remove-k requires k"))?,
        ),
        "most-frequent" => SplitMode::MostFrequentOnly,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown split mode `{other}`"
            )))
        }
    };
    let split = make_unseen_wording_split(&records, mode, seed).map_err(to_py_err)?;
    let dir = Path::new(out_dir);
    std::fs::create_dir_all(dir)
        .map_err(|e| PyIOError::new_err(format!("{}: {e}", dir.display())))?;
    write_manifest(&dir.join("train.csv"), &split.train).map_err(to_py_err)?;
    write_manifest(&dir.join("test_unseen.csv"), &split.test_unseen).map_err(to_py_err)?;
    write_manifest(&dir.join("test_seen.csv"), &split.test_seen).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("train", split.train.len())?;
    out.set_item("test_unseen", split.test_unseen.len())?;
    out.set_item("test_seen", split.test_seen.len())?;
    out.set_item("train_wordings", split.train_wordings)?;
    out.set_item("removed_wordings", split.removed_wordings)?;
    Ok(out.into())
}

/// Train per the recipe. `config_text` takes the same flat `key = value`
/// document as `slu train --config`.
#[pyfunction]
#[pyo3(signature = (train_manifest, valid_manifest, out_dir, config_text = None))]
fn train(
    py: Python<'_>,
    train_manifest: &str,
    valid_manifest: &str,
    out_dir: &str,
    config_text: Option<&str>,
) -> PyResult<Py<PyDict>> {
    let rc = match config_text {
        Some(text) => slu_core::cli::RunConfig::parse(text).map_err(to_py_err)?,
        None => slu_core::cli::RunConfig::default(),
    };
    let outcome = core_train(
        Path::new(train_manifest),
        Path::new(valid_manifest),
        rc.model,
        &rc.hp,
        Path::new(out_dir),
    )
    .map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item(
        "best_checkpoint",
        outcome.best_checkpoint.to_string_lossy(),
    )?;
    out.set_item(
        "best_validation_error",
        outcome.state.best_validation_error,
    )?;
    let history = PyList::empty(py);
    for m in &outcome.state.history {
        let row = PyDict::new(py);
        row.set_item("epoch", m.epoch)?;
        row.set_item("train_loss", m.train_loss)?;
        row.set_item("validation_intent_error_pct", m.validation_intent_error_pct)?;
        row.set_item("lr", m.lr)?;
        row.set_item("teacher_prob", m.teacher_prob)?;
        history.append(row)?;
    }
    out.set_item("history", history)?;
    Ok(out.into())
}

/// Evaluate a checkpoint on a manifest; returns the metrics report.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, constrained = false, beam_width = 1))]
fn evaluate(
    py: Python<'_>,
    checkpoint: &str,
    manifest: &str,
    constrained: bool,
    beam_width: usize,
) -> PyResult<Py<PyDict>> {
    let report = core_evaluate(
        Path::new(checkpoint),
        Path::new(manifest),
        constrained,
        beam_width,
        None,
        None,
    )
    .map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("intent_error", report.intent_error)?;
    let slots = PyDict::new(py);
    slots.set_item("action", report.slot_errors.action)?;
    slots.set_item("object", report.slot_errors.object)?;
    slots.set_item("location", report.slot_errors.location)?;
    out.set_item("slot_errors", slots)?;
    out.set_item("n_utterances", report.n_utterances)?;
    out.set_item("constrained", report.constrained)?;
    out.set_item("beam_width", report.beam_width)?;
    out.set_item("oov_label_slots", report.oov_label_slots)?;
    Ok(out.into())
}

fn unconditional_posteriors(probs: [Vec<f64>; 3]) -> SlotPosteriors {
    SlotPosteriors::Unconditional { probs }
}

/// Greedy decode of three independent slot distributions.
#[pyfunction]
fn greedy_intent(
    action_probs: Vec<f64>,
    object_probs: Vec<f64>,
    location_probs: Vec<f64>,
) -> PyResult<((usize, usize, usize), f64)> {
    let p = unconditional_posteriors([action_probs, object_probs, location_probs]);
    let pred = greedy_decode(&p).map_err(to_py_err)?;
    Ok(((pred.tuple[0], pred.tuple[1], pred.tuple[2]), pred.log_prob))
}

/// Beam decode with an optional valid-intent mask of (a, o, l) triples.
#[pyfunction]
#[pyo3(signature = (action_probs, object_probs, location_probs, width = 1, valid_intents = None))]
fn beam_intent(
    action_probs: Vec<f64>,
    object_probs: Vec<f64>,
    location_probs: Vec<f64>,
    width: usize,
    valid_intents: Option<Vec<(usize, usize, usize)>>,
) -> PyResult<((usize, usize, usize), f64)> {
    let p = unconditional_posteriors([action_probs, object_probs, location_probs]);
    let mask: Option<IntentMask> =
        valid_intents.map(|v| v.into_iter().map(|(a, o, l)| [a, o, l]).collect());
    let pred = beam_search_decode(&p, width, mask.as_ref()).map_err(to_py_err)?;
    Ok(((pred.tuple[0], pred.tuple[1], pred.tuple[2]), pred.log_prob))
}

/// A loaded checkpoint ready to classify WAV files.
#[pyclass]
struct IntentClassifier {
    model: slu_core::model::SluModel<f32>,
    vocab: SlotVocab,
    path: PathBuf,
}

#[pymethods]
impl IntentClassifier {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (model, vocab) = slu_core::model::load_model(Path::new(path)).map_err(to_py_err)?;
        let vocab = vocab.ok_or_else(|| {
            PyIOError::new_err(format!("checkpoint {path} carries no vocabulary"))
        })?;
        Ok(IntentClassifier {
            model,
            vocab,
            path: PathBuf::from(path),
        })
    }

    /// Slot label inventories as {"action": [...], "object": [...], "location": [...]}.
    fn labels(&self, py: Python<'_>) -> PyResult<Py<PyDict>> {
        let out = PyDict::new(py);
        for slot in Slot::ALL {
            out.set_item(slot.as_str(), self.vocab.labels_for(slot).to_vec())?;
        }
        Ok(out.into())
    }

    /// Classify one 16 kHz WAV file into (action, object, location) labels.
    #[pyo3(signature = (wav_path, constrained = false, beam_width = 1))]
    fn classify(
        &self,
        py: Python<'_>,
        wav_path: &str,
        constrained: bool,
        beam_width: usize,
    ) -> PyResult<Py<PyDict>> {
        let feats =
            slu_core::features::extract_features(Path::new(wav_path)).map_err(to_py_err)?;
        let batch = pad_batch(&[feats], &[[0, 0, 0]]).map_err(to_py_err)?;
        let p = &posteriors(&self.model, &batch).map_err(to_py_err)?[0];
        let mask = if constrained {
            Some(&self.vocab.valid_intents)
        } else {
            None
        };
        let pred = if beam_width == 1 && mask.is_none() {
            greedy_decode(p).map_err(to_py_err)?
        } else {
            beam_search_decode(p, beam_width, mask).map_err(to_py_err)?
        };
        let out = PyDict::new(py);
        out.set_item("action", self.vocab.label(Slot::Action, pred.tuple[0]))?;
        out.set_item("object", self.vocab.label(Slot::Object, pred.tuple[1]))?;
        out.set_item("location", self.vocab.label(Slot::Location, pred.tuple[2]))?;
        out.set_item("log_prob", pred.log_prob)?;
        out.set_item("constrained", pred.constrained)?;
        Ok(out.into())
    }

    fn __repr__(&self) -> String {
        let sizes = self.vocab.sizes();
        format!(
            "IntentClassifier(path='{}', slots=({}, {}, {}))",
            self.path.display(),
            sizes[0],
            sizes[1],
            sizes[2]
        )
    }
}

#[pymodule]
fn slu_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(teacher_forcing_prob, m)?)?;
    m.add_function(wrap_pyfunction!(generate_toy_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(augment_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(split_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_intent, m)?)?;
    m.add_function(wrap_pyfunction!(beam_intent, m)?)?;
    m.add_class::<IntentClassifier>()?;
    Ok(())
}
