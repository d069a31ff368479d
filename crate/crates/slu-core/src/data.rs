//! Dataset plumbing: manifest CSV, slot vocabularies, batching with padding,
//! unseen-wording splits, and a synthetic tone-token toy corpus.

use crate::derive_seed;
use crate::error::{Result, SluError};
use crate::features::{write_wav, FeatureSequence, Waveform, SAMPLE_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

pub const NUM_SLOTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Action,
    Object,
    Location,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Action, Slot::Object, Slot::Location];

    pub fn index(self) -> usize {
        match self {
            Slot::Action => 0,
            Slot::Object => 1,
            Slot::Location => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Action => "action",
            Slot::Object => "object",
            Slot::Location => "location",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub audio_path: PathBuf,
    pub speaker_id: String,
    pub transcription: String,
    pub action: String,
    pub object: String,
    pub location: String,
}

impl UtteranceRecord {
    pub fn slot(&self, s: Slot) -> &str {
        match s {
            Slot::Action => &self.action,
            Slot::Object => &self.object,
            Slot::Location => &self.location,
        }
    }

    pub fn labels(&self) -> [&str; 3] {
        [&self.action, &self.object, &self.location]
    }
}

pub type Manifest = Vec<UtteranceRecord>;

const REQUIRED_COLUMNS: [&str; 6] = [
    "path",
    "speakerId",
    "transcription",
    "action",
    "object",
    "location",
];

/// Parse an FSC-format manifest. Columns are located by header name; extra
/// columns (like the unnamed index FSC ships) are ignored. Relative audio
/// paths are resolved against the manifest's directory.
pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| SluError::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| SluError::Data(format!("{}: {e}", path.display())))?
        .clone();
    let mut col = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        col.insert(h.to_string(), i);
    }
    for required in REQUIRED_COLUMNS {
        if !col.contains_key(required) {
            return Err(SluError::Schema(required.to_string()));
        }
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| SluError::Data(format!("{}: {e}", path.display())))?;
        let line = row_idx + 2; // header is line 1
        let get = |name: &str| row.get(col[name]).unwrap_or("").trim().to_string();
        let rec = UtteranceRecord {
            audio_path: resolve_path(base, &get("path")),
            speaker_id: get("speakerId"),
            transcription: get("transcription"),
            action: get("action"),
            object: get("object"),
            location: get("location"),
        };
        for slot in Slot::ALL {
            if rec.slot(slot).is_empty() {
                return Err(SluError::Row {
                    line,
                    msg: format!("empty {} cell", slot.as_str()),
                });
            }
        }
        records.push(rec);
    }
    Ok(records)
}

fn resolve_path(base: &Path, raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Write a manifest. Audio paths under the manifest's directory are written
/// relative so generated corpora are location-independent; anything else is
/// written absolute so the manifest stays valid from any directory.
pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let abs_base = std::path::absolute(base).map_err(|e| SluError::io(base, e))?;
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| SluError::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_record(REQUIRED_COLUMNS)
        .map_err(|e| SluError::Data(format!("{}: {e}", path.display())))?;
    for r in records {
        let abs = std::path::absolute(&r.audio_path).map_err(|e| SluError::io(&r.audio_path, e))?;
        let rel = abs
            .strip_prefix(&abs_base)
            .map(|p| p.to_path_buf())
            .unwrap_or(abs);
        writer
            .write_record([
                rel.to_string_lossy().as_ref(),
                &r.speaker_id,
                &r.transcription,
                &r.action,
                &r.object,
                &r.location,
            ])
            .map_err(|e| SluError::Data(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| SluError::io(path, e))?;
    Ok(())
}

/// Per-slot label inventories plus the set of intents observed in training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotVocab {
    labels: [Vec<String>; 3],
    index: [HashMap<String, usize>; 3],
    pub valid_intents: BTreeSet<[usize; 3]>,
}

impl SlotVocab {
    /// Sorted unique labels per slot; valid intents are the distinct
    /// observed (action, object, location) triples.
    pub fn build(manifest: &[UtteranceRecord]) -> Result<Self> {
        if manifest.is_empty() {
            return Err(SluError::Data("cannot build vocab from empty manifest".into()));
        }
        let mut sets: [BTreeSet<String>; 3] = Default::default();
        for r in manifest {
            for slot in Slot::ALL {
                sets[slot.index()].insert(r.slot(slot).to_string());
            }
        }
        let labels: [Vec<String>; 3] = sets.map(|s| s.into_iter().collect());
        let index = [0, 1, 2].map(|i: usize| {
            labels[i]
                .iter()
                .enumerate()
                .map(|(j, l)| (l.clone(), j))
                .collect::<HashMap<_, _>>()
        });
        let mut vocab = SlotVocab {
            labels,
            index,
            valid_intents: BTreeSet::new(),
        };
        for r in manifest {
            let triple = vocab
                .resolve(r)
                .map(|o| o.expect("label must be present in freshly built vocab"));
            vocab.valid_intents.insert(triple);
        }
        Ok(vocab)
    }

    /// Rebuild a vocabulary from stored parts (checkpoint loading).
    pub fn from_parts(
        actions: Vec<String>,
        objects: Vec<String>,
        locations: Vec<String>,
        valid_intents: BTreeSet<[usize; 3]>,
    ) -> Result<Self> {
        let labels = [actions, objects, locations];
        let sizes = [labels[0].len(), labels[1].len(), labels[2].len()];
        for t in &valid_intents {
            for s in 0..3 {
                if t[s] >= sizes[s] {
                    return Err(SluError::Data(format!(
                        "valid intent {t:?} out of range for sizes {sizes:?}"
                    )));
                }
            }
        }
        let index = [0, 1, 2].map(|i: usize| {
            labels[i]
                .iter()
                .enumerate()
                .map(|(j, l)| (l.clone(), j))
                .collect::<HashMap<_, _>>()
        });
        Ok(SlotVocab {
            labels,
            index,
            valid_intents,
        })
    }

    pub fn sizes(&self) -> [usize; 3] {
        [0, 1, 2].map(|i: usize| self.labels[i].len())
    }

    pub fn labels_for(&self, slot: Slot) -> &[String] {
        &self.labels[slot.index()]
    }

    pub fn lookup(&self, slot: Slot, label: &str) -> Option<usize> {
        self.index[slot.index()].get(label).copied()
    }

    pub fn label(&self, slot: Slot, idx: usize) -> &str {
        &self.labels[slot.index()][idx]
    }

    /// Map a record's labels to indices; None for labels absent from the vocab.
    pub fn resolve(&self, r: &UtteranceRecord) -> [Option<usize>; 3] {
        [
            self.lookup(Slot::Action, &r.action),
            self.lookup(Slot::Object, &r.object),
            self.lookup(Slot::Location, &r.location),
        ]
    }
}

/// A zero-padded feature batch with true lengths and target triples.
pub struct Batch {
    pub features: Vec<f32>, // B×Tmax×dim row-major
    pub batch: usize,
    pub max_len: usize,
    pub dim: usize,
    pub lengths: Vec<usize>,
    pub targets: Vec<[usize; 3]>,
}

pub fn pad_batch(features: &[FeatureSequence], targets: &[[usize; 3]]) -> Result<Batch> {
    if features.is_empty() {
        return Err(SluError::InvalidArgument("empty batch".into()));
    }
    if features.len() != targets.len() {
        return Err(SluError::InvalidArgument(format!(
            "{} feature sequences but {} target triples",
            features.len(),
            targets.len()
        )));
    }
    let dim = features[0].dim();
    for f in features {
        if f.dim() != dim {
            return Err(SluError::Shape(format!(
                "feature dim {} differs from {}",
                f.dim(),
                dim
            )));
        }
    }
    let max_len = features.iter().map(|f| f.num_frames()).max().unwrap();
    let batch = features.len();
    let mut data = vec![0.0f32; batch * max_len * dim];
    for (b, f) in features.iter().enumerate() {
        for t in 0..f.num_frames() {
            let dst = (b * max_len + t) * dim;
            data[dst..dst + dim].copy_from_slice(f.frame(t));
        }
    }
    Ok(Batch {
        features: data,
        batch,
        max_len,
        dim,
        lengths: features.iter().map(|f| f.num_frames()).collect(),
        targets: targets.to_vec(),
    })
}

impl Batch {
    /// Frame `t` across the batch as a B×dim row-major slice copy.
    pub fn step(&self, t: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; self.batch * self.dim];
        for b in 0..self.batch {
            let src = (b * self.max_len + t) * self.dim;
            out[b * self.dim..(b + 1) * self.dim]
                .copy_from_slice(&self.features[src..src + self.dim]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    RemoveK(usize),
    MostFrequentOnly,
}

#[derive(Debug)]
pub struct SplitOutput {
    pub train: Manifest,
    pub test_unseen: Manifest,
    pub test_seen: Manifest,
    pub removed_wordings: Vec<String>,
    pub train_wordings: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitSummary {
    pub removed_wordings: Vec<String>,
    pub counts: SplitCounts,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test_unseen: usize,
    pub test_seen: usize,
    pub train_wordings: usize,
}

impl SplitOutput {
    pub fn summary(&self) -> SplitSummary {
        SplitSummary {
            removed_wordings: self.removed_wordings.clone(),
            counts: SplitCounts {
                train: self.train.len(),
                test_unseen: self.test_unseen.len(),
                test_seen: self.test_seen.len(),
                train_wordings: self.train_wordings,
            },
        }
    }
}

fn intent_set(records: &[UtteranceRecord]) -> BTreeSet<[String; 3]> {
    records
        .iter()
        .map(|r| {
            [
                r.action.clone(),
                r.object.clone(),
                r.location.clone(),
            ]
        })
        .collect()
}

/// Per-wording holdout: records of kept wordings go to train, except the last
/// ceil(n/10) records of each wording (only when it has at least 2), which
/// form the seen-wording test set.
fn holdout_seen(
    kept: Vec<UtteranceRecord>,
) -> (Manifest, Manifest) {
    let mut per_wording: BTreeMap<String, Vec<UtteranceRecord>> = BTreeMap::new();
    for r in kept {
        per_wording.entry(r.transcription.clone()).or_default().push(r);
    }
    let mut train = Vec::new();
    let mut seen = Vec::new();
    for (_, records) in per_wording {
        let n = records.len();
        let hold = if n >= 2 { n.div_ceil(10) } else { 0 };
        for (i, r) in records.into_iter().enumerate() {
            if i < n - hold {
                train.push(r);
            } else {
                seen.push(r);
            }
        }
    }
    (train, seen)
}

/// Remove wordings from the pool and partition the remainder. Records of
/// removed wordings become the unseen test set; a small per-wording holdout
/// of the kept records becomes the seen test set. The train set must keep
/// the full valid-intent set; failing draws are retried with an incremented
/// seed up to 1000 times.
pub fn make_unseen_wording_split(
    manifest: &[UtteranceRecord],
    mode: SplitMode,
    seed: u64,
) -> Result<SplitOutput> {
    let mut wordings: Vec<String> = manifest
        .iter()
        .map(|r| r.transcription.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    wordings.sort();
    let full_intents = intent_set(manifest);

    match mode {
        SplitMode::RemoveK(k) => {
            if k >= wordings.len() {
                return Err(SluError::InvalidArgument(format!(
                    "cannot remove {k} of {} unique wordings",
                    wordings.len()
                )));
            }
            for attempt in 0..1000u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
                let mut pool = wordings.clone();
                // Fisher-Yates prefix of size k
                for i in 0..k {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                }
                let removed: HashSet<String> = pool[..k].iter().cloned().collect();
                let (kept, unseen): (Vec<_>, Vec<_>) = manifest
                    .iter()
                    .cloned()
                    .partition(|r| !removed.contains(&r.transcription));
                let (train, seen) = holdout_seen(kept);
                if intent_set(&train) == full_intents {
                    let mut removed: Vec<String> = removed.into_iter().collect();
                    removed.sort();
                    return Ok(SplitOutput {
                        train_wordings: wordings.len() - k,
                        train,
                        test_unseen: unseen,
                        test_seen: seen,
                        removed_wordings: removed,
                    });
                }
            }
            Err(SluError::Constraint(format!(
                "no draw of {k} wordings preserves the valid-intent set after 1000 retries"
            )))
        }
        SplitMode::MostFrequentOnly => {
            // keep, per intent, only its most frequent wording (ties broken
            // toward the lexicographically smaller wording)
            let mut counts: BTreeMap<[String; 3], BTreeMap<String, usize>> = BTreeMap::new();
            for r in manifest {
                *counts
                    .entry([r.action.clone(), r.object.clone(), r.location.clone()])
                    .or_default()
                    .entry(r.transcription.clone())
                    .or_default() += 1;
            }
            let mut kept_wordings: BTreeSet<String> = BTreeSet::new();
            for (_, per_wording) in counts {
                let best = per_wording
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(w, _)| w.clone())
                    .expect("intent with no wording");
                kept_wordings.insert(best);
            }
            let (kept, unseen): (Vec<_>, Vec<_>) = manifest
                .iter()
                .cloned()
                .partition(|r| kept_wordings.contains(&r.transcription));
            let (train, seen) = holdout_seen(kept);
            if intent_set(&train) != full_intents {
                return Err(SluError::Constraint(
                    "most-frequent-wording split lost part of the intent set".into(),
                ));
            }
            let removed: Vec<String> = wordings
                .iter()
                .filter(|w| !kept_wordings.contains(*w))
                .cloned()
                .collect();
            Ok(SplitOutput {
                train_wordings: kept_wordings.len(),
                train,
                test_unseen: unseen,
                test_seen: seen,
                removed_wordings: removed,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Toy corpus
// ---------------------------------------------------------------------------

/// Synthetic corpus spec. Each slot value is voiced by a distinct pure-tone
/// token; a wording is a fixed token sequence for its intent (optionally with
/// distractor tokens), and utterances of a wording differ only in seeded
/// timing/amplitude jitter. A slot value named "none" has no token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySpec {
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub locations: Vec<String>,
    pub wordings_per_intent: usize,
    pub train_utterances_per_wording: usize,
    pub test_utterances_per_wording: usize,
    pub seed: u64,
}

impl ToySpec {
    /// The desk-scale default: (3, 4, 2) inventories, 2 wordings per intent.
    pub fn default_spec(seed: u64) -> Self {
        ToySpec {
            actions: ["bring", "decrease", "increase"]
                .map(String::from)
                .to_vec(),
            objects: ["heat", "lamp", "music", "newspaper"]
                .map(String::from)
                .to_vec(),
            locations: ["bedroom", "kitchen"].map(String::from).to_vec(),
            wordings_per_intent: 2,
            train_utterances_per_wording: 10,
            test_utterances_per_wording: 2,
            seed,
        }
    }

    fn inventories(&self) -> [&[String]; 3] {
        [&self.actions, &self.objects, &self.locations]
    }
}

pub struct ToyDataset {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train: Manifest,
    pub test: Manifest,
}

/// One voiced token: a slot value or a filler distractor.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    name: String,
    freq_index: usize,
}

const NUM_FILLER_TOKENS: usize = 2;

/// Distinct log-spaced token frequencies in 350..3600 Hz.
fn token_frequency(index: usize, total: usize) -> f64 {
    let lo = 350.0f64;
    let hi = 3600.0f64;
    if total <= 1 {
        return lo;
    }
    lo * (hi / lo).powf(index as f64 / (total - 1) as f64)
}

struct TokenTable {
    /// (slot, value index) -> token; None for "none" values.
    slot_tokens: [Vec<Option<Token>>; 3],
    fillers: Vec<Token>,
    total: usize,
}

fn build_token_table(spec: &ToySpec) -> Result<TokenTable> {
    let mut next = 0usize;
    let mut slot_tokens: [Vec<Option<Token>>; 3] = Default::default();
    for (s, inventory) in spec.inventories().iter().enumerate() {
        let mut seen = HashSet::new();
        for value in inventory.iter() {
            if !seen.insert(value.clone()) {
                return Err(SluError::InvalidArgument(format!(
                    "duplicate {} value `{value}` would collide on one token",
                    Slot::ALL[s].as_str()
                )));
            }
            if value == "none" {
                slot_tokens[s].push(None);
            } else {
                slot_tokens[s].push(Some(Token {
                    name: value.clone(),
                    freq_index: next,
                }));
                next += 1;
            }
        }
    }
    let fillers = (0..NUM_FILLER_TOKENS)
        .map(|i| {
            let t = Token {
                name: format!("uh{i}"),
                freq_index: next,
            };
            next += 1;
            t
        })
        .collect();
    Ok(TokenTable {
        slot_tokens,
        fillers,
        total: next,
    })
}

/// Same-slot distractor pairing: even indices pair with the next value, odd
/// with the previous, so paired intents share a token multiset and differ
/// only in token order. The true token always comes last within its slot.
fn distractor_index(j: usize, n: usize) -> Option<usize> {
    if n < 2 {
        return None;
    }
    if j % 2 == 0 {
        if j + 1 < n {
            Some(j + 1)
        } else {
            Some(j - 1)
        }
    } else {
        Some(j - 1)
    }
}

/// The fixed token sequence realizing wording `w` of an intent.
fn wording_tokens(
    table: &TokenTable,
    intent: [usize; 3],
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Token> {
    // (token, slot it belongs to or None for fillers)
    let mut slot_positions: Vec<(Token, usize)> = Vec::new();
    for s in 0..3 {
        if let Some(tok) = &table.slot_tokens[s][intent[s]] {
            slot_positions.push((tok.clone(), s));
        }
    }
    // seeded permutation of the true tokens
    for i in (1..slot_positions.len()).rev() {
        let j = rng.random_range(0..=i);
        slot_positions.swap(i, j);
    }
    let mut seq: Vec<Token> = Vec::new();
    let distractor_slot = if w >= 1 { Some((w - 1) % 3) } else { None };
    for (tok, s) in &slot_positions {
        if Some(*s) == distractor_slot {
            let n = table.slot_tokens[*s].len();
            if let Some(d) = distractor_index(intent[*s], n) {
                if let Some(dtok) = &table.slot_tokens[*s][d] {
                    seq.push(dtok.clone());
                }
            }
        }
        seq.push(tok.clone());
    }
    // occasional filler token at a random position
    if rng.random::<f64>() < 0.5 {
        let filler = table.fillers[rng.random_range(0..table.fillers.len())].clone();
        let pos = rng.random_range(0..=seq.len());
        seq.insert(pos, filler);
    }
    seq
}

fn render_utterance(tokens: &[Token], total_tokens: usize, rng: &mut ChaCha8Rng) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let speaker_gain = rng.random_range(0.7..1.0);
    let mut samples: Vec<f32> = Vec::new();
    let lead = (rng.random_range(0.015..0.03) * sr) as usize;
    samples.resize(lead, 0.0);
    for tok in tokens {
        let dur = rng.random_range(0.07..0.095);
        let amp = rng.random_range(0.25..0.5) * speaker_gain;
        let freq = token_frequency(tok.freq_index, total_tokens);
        let n = (dur * sr) as usize;
        let ramp = (0.006 * sr) as usize;
        for i in 0..n {
            let env = if i < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos()
            } else if i + ramp > n {
                0.5 - 0.5 * (std::f64::consts::PI * (n - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let v = amp * env * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin();
            samples.push(v as f32);
        }
        let gap = (rng.random_range(0.025..0.045) * sr) as usize;
        samples.extend(std::iter::repeat_n(0.0f32, gap));
    }
    let tail = (rng.random_range(0.015..0.03) * sr) as usize;
    samples.extend(std::iter::repeat_n(0.0f32, tail));
    Waveform::new(samples, SAMPLE_RATE).expect("toy waveform is non-empty")
}

/// Generate the corpus under `out_dir`: WAVs in `audio/`, plus `train.csv`
/// and `test.csv`. Fully deterministic in the spec's seed.
pub fn generate_toy_dataset(spec: &ToySpec, out_dir: &Path) -> Result<ToyDataset> {
    if spec.wordings_per_intent == 0 || spec.train_utterances_per_wording == 0 {
        return Err(SluError::InvalidArgument(
            "toy spec needs at least one wording per intent and one utterance per wording".into(),
        ));
    }
    let table = build_token_table(spec)?;
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| SluError::io(&audio_dir, e))?;

    let sizes = [spec.actions.len(), spec.objects.len(), spec.locations.len()];
    if sizes.iter().any(|&n| n == 0) {
        return Err(SluError::InvalidArgument("empty slot inventory".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut wording_strings: HashSet<String> = HashSet::new();
    let mut intent_idx = 0usize;
    for a in 0..sizes[0] {
        for o in 0..sizes[1] {
            for l in 0..sizes[2] {
                let intent = [a, o, l];
                for w in 0..spec.wordings_per_intent {
                    // redraw on an intra-corpus wording-string collision so
                    // wording ↔ token sequence stays one-to-one
                    let mut tokens = Vec::new();
                    let mut transcription = String::new();
                    for retry in 0..64u64 {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            spec.seed,
                            (intent_idx as u64) << 20 | (w as u64) << 8 | retry,
                        ));
                        tokens = wording_tokens(&table, intent, w, &mut rng);
                        transcription = tokens
                            .iter()
                            .map(|t| t.name.as_str())
                            .collect::<Vec<_>>()
                            .join(" ");
                        if wording_strings.insert(transcription.clone()) {
                            break;
                        }
                        if retry == 63 {
                            return Err(SluError::Constraint(
                                "could not draw a distinct wording".into(),
                            ));
                        }
                    }
                    let total_utts =
                        spec.train_utterances_per_wording + spec.test_utterances_per_wording;
                    for u in 0..total_utts {
                        let is_test = u >= spec.train_utterances_per_wording;
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            spec.seed.wrapping_add(0x7775),
                            ((intent_idx as u64) << 24) | ((w as u64) << 16) | u as u64,
                        ));
                        let wave = render_utterance(&tokens, table.total, &mut rng);
                        let file = format!(
                            "utt_a{a}_o{o}_l{l}_w{w}_{}{u:03}.wav",
                            if is_test { "te" } else { "tr" }
                        );
                        let path = audio_dir.join(&file);
                        write_wav(&path, &wave)?;
                        let rec = UtteranceRecord {
                            audio_path: path,
                            speaker_id: format!("spk{}", u % 10),
                            transcription: transcription.clone(),
                            action: spec.actions[a].clone(),
                            object: spec.objects[o].clone(),
                            location: spec.locations[l].clone(),
                        };
                        if is_test {
                            test.push(rec);
                        } else {
                            train.push(rec);
                        }
                    }
                }
                intent_idx += 1;
            }
        }
    }
    let train_manifest = out_dir.join("train.csv");
    let test_manifest = out_dir.join("test.csv");
    write_manifest(&train_manifest, &train)?;
    write_manifest(&test_manifest, &test)?;
    Ok(ToyDataset {
        train_manifest,
        test_manifest,
        train,
        test,
    })
}
