//! Operator surface: the `slu` subcommands wiring the pipeline together.
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use crate::augment::{augment_manifest, AugmentConfig};
use crate::config::{format_kv, parse_kv, reject_unknown, take_parsed, KvMap};
use crate::data::{
    generate_toy_dataset, make_unseen_wording_split, parse_manifest, write_manifest, SplitMode,
    ToySpec,
};
use crate::error::{Result, SluError};
use crate::model::{parse_slot, ModelConfig};
use crate::nn::rnn::CellKind;
use crate::model::{ClassifierKind, Connections, ReprKind};
use crate::nn::UpdateRule;
use crate::train::{evaluate_model, load_features, train_model, EvalReport, Hyperparams};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "slu",
    about = "Spoken-intent classification: featurize, augment, split, train, eval, toy-gen",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract and cache MFCC+CMN features for every manifest record.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache_dir: PathBuf,
    },
    /// Write the 5x augmented copy of a manifest (reverb, music, babble, noise).
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory of user WAVs replacing the synthetic additive noises.
        #[arg(long)]
        noise_dir: Option<PathBuf>,
    },
    /// Unseen-wording split: remove-k or most-frequent.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// `remove-k` (needs --k) or `most-frequent`.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model per the config file (flat key = value lines).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from out-dir/last.slum + state.json.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict decoding to the checkpoint's valid-intent set.
        #[arg(long, default_value_t = false)]
        constrained: bool,
        #[arg(long, default_value_t = 1)]
        beam_width: usize,
        /// Write the metrics report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Report format: json or text.
        #[arg(long, default_value = "json")]
        format: String,
        /// Write per-utterance predictions as JSON lines here.
        #[arg(long)]
        jsonl: Option<PathBuf>,
        /// Feature cache directory (optional).
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Generate the synthetic tone-token toy corpus.
    ToyGen {
        /// Toy spec file (flat key = value); defaults to the built-in (3,4,2) spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Architecture + hyperparameters parsed from the run config document.
/// Unknown keys are rejected.
#[derive(Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub hp: Hyperparams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::recipe_default([1, 1, 1]),
            hp: Hyperparams::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut map = parse_kv(text)?;
        let mut rc = RunConfig::default();
        if let Some(v) = take_parsed::<usize>(&mut map, "stack_layers")? {
            rc.model.stack_layers = v;
        }
        if let Some(v) = take_parsed::<String>(&mut map, "cell_kind")? {
            rc.model.cell_kind = match v.as_str() {
                "lstm" => CellKind::Lstm,
                "gru" => CellKind::Gru,
                other => return Err(SluError::Config(format!("unknown cell_kind `{other}`"))),
            };
        }
        if let Some(v) = take_parsed::<usize>(&mut map, "hidden")? {
            rc.model.hidden = v;
        }
        if let Some(v) = take_parsed::<bool>(&mut map, "bidirectional")? {
            rc.model.bidirectional = v;
        }
        if let Some(v) = take_parsed::<String>(&mut map, "connections")? {
            rc.model.connections = match v.as_str() {
                "sequential" => Connections::Sequential,
                "residual" => Connections::Residual,
                other => return Err(SluError::Config(format!("unknown connections `{other}`"))),
            };
        }
        if let Some(v) = take_parsed::<String>(&mut map, "representation")? {
            rc.model.representation = match v.as_str() {
                "single_lstm" => ReprKind::SingleLstm,
                "single_gru" => ReprKind::SingleGru,
                "triple_lstm" => ReprKind::TripleLstm,
                other => {
                    return Err(SluError::Config(format!("unknown representation `{other}`")))
                }
            };
        }
        if let Some(v) = take_parsed::<String>(&mut map, "classifier")? {
            rc.model.classifier = match v.as_str() {
                "unconditional" => ClassifierKind::Unconditional,
                "conditional" => ClassifierKind::Conditional,
                other => return Err(SluError::Config(format!("unknown classifier `{other}`"))),
            };
        }
        if let Some(v) = take_parsed::<String>(&mut map, "slot_order")? {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(SluError::Config(format!("bad slot_order `{v}`")));
            }
            for (i, p) in parts.iter().enumerate() {
                rc.model.slot_order[i] = parse_slot(p)?;
            }
        }
        if let Some(v) = take_parsed::<f64>(&mut map, "dropout_rate")? {
            rc.model.dropout_rate = v;
        }
        if let Some(v) = take_parsed::<usize>(&mut map, "epochs")? {
            rc.hp.epochs = v;
        }
        if let Some(v) = take_parsed::<usize>(&mut map, "batch_size")? {
            rc.hp.batch_size = v;
        }
        if let Some(v) = take_parsed::<f64>(&mut map, "base_lr")? {
            rc.hp.base_lr = v;
        }
        if let Some(v) = take_parsed::<String>(&mut map, "optimizer")? {
            rc.hp.optimizer = match v.as_str() {
                "adam" => UpdateRule::adam_default(),
                "sgd" => UpdateRule::Sgd,
                other => return Err(SluError::Config(format!("unknown optimizer `{other}`"))),
            };
        }
        if let Some(v) = take_parsed::<String>(&mut map, "grad_clip")? {
            rc.hp.grad_clip = if v == "none" {
                None
            } else {
                Some(v.parse::<f64>().map_err(|_| {
                    SluError::Config(format!("grad_clip must be a number or `none`, got `{v}`"))
                })?)
            };
        }
        if let Some(v) = take_parsed::<f64>(&mut map, "sampling_midpoint_epoch")? {
            rc.hp.schedule.midpoint_epoch = v;
        }
        if let Some(v) = take_parsed::<f64>(&mut map, "sampling_steepness")? {
            rc.hp.schedule.steepness = v;
        }
        if let Some(v) = take_parsed::<u64>(&mut map, "seed")? {
            rc.hp.seed = v;
        }
        reject_unknown(&map)?;
        rc.model.validate()?;
        rc.hp.schedule.validate()?;
        Ok(rc)
    }

    /// The full effective configuration, defaults included.
    pub fn effective_kv(&self) -> KvMap {
        let mut map = self.model.to_kv();
        // slot sizes and input width are derived from the data at train time
        map.remove("slot_sizes");
        map.remove("input_dim");
        map.insert("epochs".into(), self.hp.epochs.to_string());
        map.insert("batch_size".into(), self.hp.batch_size.to_string());
        map.insert("base_lr".into(), self.hp.base_lr.to_string());
        map.insert(
            "optimizer".into(),
            match self.hp.optimizer {
                UpdateRule::Sgd => "sgd".to_string(),
                UpdateRule::Adam { .. } => "adam".to_string(),
            },
        );
        map.insert(
            "grad_clip".into(),
            self.hp
                .grad_clip
                .map(|c| c.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        map.insert(
            "sampling_midpoint_epoch".into(),
            self.hp.schedule.midpoint_epoch.to_string(),
        );
        map.insert(
            "sampling_steepness".into(),
            self.hp.schedule.steepness.to_string(),
        );
        map.insert("seed".into(), self.hp.seed.to_string());
        map
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

/// Write the metrics report. Text format is one `key = value` line per field.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    let body = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)
            .map_err(|e| SluError::Format(e.to_string()))?,
        ReportFormat::Text => {
            let mut map = KvMap::new();
            map.insert("intent_error".into(), format!("{:.2}", report.intent_error));
            map.insert(
                "slot_errors.action".into(),
                format!("{:.2}", report.slot_errors.action),
            );
            map.insert(
                "slot_errors.object".into(),
                format!("{:.2}", report.slot_errors.object),
            );
            map.insert(
                "slot_errors.location".into(),
                format!("{:.2}", report.slot_errors.location),
            );
            map.insert("n_utterances".into(), report.n_utterances.to_string());
            map.insert("constrained".into(), report.constrained.to_string());
            map.insert("beam_width".into(), report.beam_width.to_string());
            map.insert("checkpoint".into(), report.checkpoint.clone());
            map.insert("manifest".into(), report.manifest.clone());
            map.insert("seed".into(), report.seed.to_string());
            map.insert(
                "oov_label_slots".into(),
                report.oov_label_slots.to_string(),
            );
            format_kv(&map)
        }
    };
    std::fs::write(path, body).map_err(|e| SluError::io(path, e))
}

fn parse_toy_spec(path: &Path, seed: u64) -> Result<ToySpec> {
    let text = std::fs::read_to_string(path).map_err(|e| SluError::io(path, e))?;
    let mut map = parse_kv(&text)?;
    let mut spec = ToySpec::default_spec(seed);
    let labels = |v: String| -> Vec<String> { v.split('|').map(|s| s.trim().to_string()).collect() };
    if let Some(v) = take_parsed::<String>(&mut map, "actions")? {
        spec.actions = labels(v);
    }
    if let Some(v) = take_parsed::<String>(&mut map, "objects")? {
        spec.objects = labels(v);
    }
    if let Some(v) = take_parsed::<String>(&mut map, "locations")? {
        spec.locations = labels(v);
    }
    if let Some(v) = take_parsed::<usize>(&mut map, "wordings_per_intent")? {
        spec.wordings_per_intent = v;
    }
    if let Some(v) = take_parsed::<usize>(&mut map, "train_utterances_per_wording")? {
        spec.train_utterances_per_wording = v;
    }
    if let Some(v) = take_parsed::<usize>(&mut map, "test_utterances_per_wording")? {
        spec.test_utterances_per_wording = v;
    }
    reject_unknown(&map)?;
    Ok(spec)
}

fn configure_threads() {
    if let Ok(v) = std::env::var("SLU_NUM_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Featurize {
            manifest,
            cache_dir,
        } => {
            let records = parse_manifest(&manifest)?;
            let feats = load_features(&records, Some(&cache_dir))?;
            let frames: usize = feats.iter().map(|f| f.num_frames()).sum();
            println!(
                "featurized {} utterances ({} frames) into {}",
                records.len(),
                frames,
                cache_dir.display()
            );
            Ok(())
        }
        Command::Augment {
            manifest,
            out_dir,
            seed,
            noise_dir,
        } => {
            let records = parse_manifest(&manifest)?;
            let mut config = AugmentConfig::new(seed);
            config.noise_dir = noise_dir;
            let augmented = augment_manifest(&records, &config, &out_dir)?;
            let out_manifest = out_dir.join("augmented.csv");
            write_manifest(&out_manifest, &augmented)?;
            println!(
                "augmented {} records to {} ({})",
                records.len(),
                augmented.len(),
                out_manifest.display()
            );
            Ok(())
        }
        Command::Split {
            manifest,
            mode,
            k,
            seed,
            out_dir,
        } => {
            let records = parse_manifest(&manifest)?;
            let mode = match mode.as_str() {
                "remove-k" => SplitMode::RemoveK(k.ok_or_else(|| {
                    SluError::InvalidArgument("--mode remove-k requires --k".into())
                })?),
                "most-frequent" => SplitMode::MostFrequentOnly,
                other => {
                    return Err(SluError::InvalidArgument(format!(
                        "unknown split mode `{other}` (use remove-k or most-frequent)"
                    )))
                }
            };
            let out = make_unseen_wording_split(&records, mode, seed)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| SluError::io(&out_dir, e))?;
            write_manifest(&out_dir.join("train.csv"), &out.train)?;
            write_manifest(&out_dir.join("test_unseen.csv"), &out.test_unseen)?;
            write_manifest(&out_dir.join("test_seen.csv"), &out.test_seen)?;
            let summary = out.summary();
            let json = serde_json::to_string_pretty(&summary)
                .map_err(|e| SluError::Format(e.to_string()))?;
            std::fs::write(out_dir.join("summary.json"), json)
                .map_err(|e| SluError::io(&out_dir, e))?;
            println!(
                "split kept {} training wordings: train {} / test_unseen {} / test_seen {}",
                out.train_wordings,
                out.train.len(),
                out.test_unseen.len(),
                out.test_seen.len()
            );
            Ok(())
        }
        Command::Train {
            config,
            train,
            valid,
            out_dir,
            resume,
        } => {
            let mut rc = match config {
                Some(path) => {
                    let text =
                        std::fs::read_to_string(&path).map_err(|e| SluError::io(&path, e))?;
                    RunConfig::parse(&text)?
                }
                None => RunConfig::default(),
            };
            rc.hp.resume = resume;
            std::fs::create_dir_all(&out_dir).map_err(|e| SluError::io(&out_dir, e))?;
            let echo = out_dir.join("config.effective");
            std::fs::write(&echo, format_kv(&rc.effective_kv()))
                .map_err(|e| SluError::io(&echo, e))?;
            let outcome = train_model(&train, &valid, rc.model, &rc.hp, &out_dir)?;
            println!(
                "best validation intent error {:.2}% (checkpoint {})",
                outcome.state.best_validation_error,
                outcome.best_checkpoint.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            constrained,
            beam_width,
            report,
            format,
            jsonl,
            cache_dir,
        } => {
            let format = match format.as_str() {
                "json" => ReportFormat::Json,
                "text" => ReportFormat::Text,
                other => {
                    return Err(SluError::InvalidArgument(format!(
                        "unknown report format `{other}`"
                    )))
                }
            };
            let result = evaluate_model(
                &checkpoint,
                &manifest,
                constrained,
                beam_width,
                jsonl.as_deref(),
                cache_dir.as_deref(),
            )?;
            if let Some(path) = report {
                emit_report(&result, format, &path)?;
            }
            println!("intent error: {:.2}%", result.intent_error);
            Ok(())
        }
        Command::ToyGen { spec, out_dir, seed } => {
            let toy_spec = match spec {
                Some(path) => parse_toy_spec(&path, seed)?,
                None => ToySpec::default_spec(seed),
            };
            let ds = generate_toy_dataset(&toy_spec, &out_dir)?;
            println!(
                "toy corpus: {} train / {} test utterances under {}",
                ds.train.len(),
                ds.test.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    configure_threads();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through here as well
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
