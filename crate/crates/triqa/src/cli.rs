//! Command-line entry point: feature extraction, synthetic data generation,
//! training, evaluation, the ablation and audio-feature comparison runners,
//! and the pipeline gradient check.
//!
//! Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure.

use crate::audio::{load_waveform, logmel, MelConfig};
use crate::data::{
    generate_synthetic, generate_weak_corpus, load_checkpoint, load_dataset, load_vocab,
    save_checkpoint, write_tensor_file, DecidingModality, LoadOptions, QAItem, SyntheticSpec,
    ToneCoding,
};
use crate::error::{Error, Result};
use crate::harness::{
    compare_audio_features, comparison_rows, evaluate_model, metrics_rows, prediction_rows,
    render_markdown_table, run_ablation, split_dataset, train_model, write_csv, ablation_rows,
    AudioVariant, TrainOptions, ABLATION_HEADER, COMPARISON_HEADER, METRICS_HEADER,
    PREDICTIONS_HEADER,
};
use crate::model::{load_model, pipeline_gradient_check, save_model, ModelConfig};
use crate::numerics::Tensor;
use crate::walnet::{
    extract_segment_features, init_walnet_params, train_weak_labels, WalnetConfig,
    WeakTrainOptions,
};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "triqa",
    version,
    about = "Multimodal movie question answering with learned audio event features"
)]
struct Cli {
    /// Seed for every random choice the subcommand makes
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output file or directory (which one depends on the subcommand)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

/// Training knobs shared by `train`, `ablate`, and `compare-audio`.
#[derive(Args, Debug)]
struct TrainFlags {
    /// Maximum training epochs
    #[arg(long, default_value_t = 50)]
    epochs: usize,

    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,

    /// Mini-batch size
    #[arg(long, default_value_t = 16)]
    batch: usize,

    /// Dropout probability on encoder outputs and the scorer hidden layer
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,

    /// Attention hops
    #[arg(long, default_value_t = 2)]
    hops: usize,

    /// Hidden dimension of encoders, attention, and scorer
    #[arg(long, default_value_t = 32)]
    hidden: usize,

    /// Word embedding dimension
    #[arg(long, default_value_t = 128)]
    embed: usize,

    /// Modality weights as three comma-separated values: video,subtitle,audio
    /// (ignored by `ablate` and `compare-audio`, which fix their own)
    #[arg(long, value_parser = parse_lambda, default_value = "1,1,1")]
    lambda: [f64; 3],

    /// Stop early once validation accuracy reaches this fraction
    #[arg(long)]
    target_acc: Option<f64>,

    /// Stop early after this many epochs without a new best validation
    /// accuracy
    #[arg(long)]
    patience: Option<usize>,
}

impl TrainFlags {
    fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch,
            dropout: self.dropout,
            seed,
            target_acc: self.target_acc,
            patience: self.patience,
        }
    }

    fn config(&self, vocab_size: usize, video_in_dim: usize, audio_in_dim: usize) -> ModelConfig {
        ModelConfig {
            lambda1: self.lambda[0],
            lambda2: self.lambda[1],
            lambda3: self.lambda[2],
            hops: self.hops,
            embed_dim: self.embed,
            hidden_dim: self.hidden,
            video_in_dim,
            audio_in_dim,
            vocab_size,
            n_answers: 5,
        }
    }
}

fn parse_lambda(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!(
            "expected three comma-separated values, got {} in {s:?}",
            parts.len()
        ));
    }
    let mut out = [0.0f64; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bad λ value {part:?}: {e}"))?;
    }
    Ok(out)
}

fn parse_variant(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((label, dir)) if !label.is_empty() && !dir.is_empty() => {
            Ok((label.to_string(), PathBuf::from(dir)))
        }
        _ => Err(format!("expected LABEL=DIR, got {s:?}")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute a 128-band log-mel spectrogram of a WAV file and write it as
    /// a tensor file
    Logmel {
        /// Input RIFF/WAVE file (PCM-16, mono or stereo)
        input: PathBuf,
    },

    /// Pretrain the audio event network on a synthetic weakly labeled corpus
    /// and save a checkpoint
    WalnetTrain {
        /// Number of synthetic recordings
        #[arg(long, default_value_t = 200)]
        recordings: usize,

        /// Number of event classes occurring in the corpus
        #[arg(long, default_value_t = 10)]
        classes: usize,

        /// Output width of the network (event vocabulary size)
        #[arg(long, default_value_t = 10)]
        cs: usize,

        /// Maximum training epochs
        #[arg(long, default_value_t = 30)]
        epochs: usize,

        /// Adam learning rate
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,

        /// Mini-batch size
        #[arg(long, default_value_t = 8)]
        batch: usize,

        /// Stop early once the training-split mean average precision
        /// reaches this value
        #[arg(long)]
        target_map: Option<f64>,

        /// Event coding of the corpus: spectral (per-class tone frequency)
        /// or rate (shared carrier, per-class pip rate)
        #[arg(long, default_value = "spectral")]
        coding: ToneCoding,
    },

    /// Run a trained audio event network over a dataset's WAV files and
    /// write per-item segment feature tensors
    WalnetExtract {
        /// Checkpoint directory produced by walnet-train
        #[arg(long)]
        model: PathBuf,

        /// Dataset JSONL whose sibling wav/ directory holds the recordings
        #[arg(long)]
        dataset: PathBuf,
    },

    /// Generate a synthetic five-option QA dataset with WAVs, feature
    /// tensors, a vocabulary, and a JSONL index
    Synth {
        /// Which modality carries the answer: video, subtitle, audio, or none
        #[arg(long, default_value = "audio")]
        deciding: DecidingModality,

        /// Number of items
        #[arg(long, default_value_t = 600)]
        n: usize,

        /// Number of latent event classes
        #[arg(long, default_value_t = 10)]
        classes: usize,

        /// Vocabulary capacity
        #[arg(long, default_value_t = 96)]
        vocab_size: usize,

        /// Video feature width
        #[arg(long, default_value_t = 64)]
        video_dim: usize,

        /// Event coding of the audio stream: spectral (per-class tone
        /// frequency) or rate (shared carrier, per-class pip rate)
        #[arg(long, default_value = "spectral")]
        coding: ToneCoding,
    },

    /// Train the QA model on a dataset and save the best-validation
    /// checkpoint with its run manifest and metrics
    Train {
        /// Dataset JSONL file
        #[arg(long)]
        dataset: PathBuf,

        /// Vocabulary file
        #[arg(long)]
        vocab: PathBuf,

        /// Replace audio features with {DIR}/{qid}.audio.tnsr
        #[arg(long)]
        audio_features: Option<PathBuf>,

        #[command(flatten)]
        flags: TrainFlags,
    },

    /// Evaluate a checkpoint on a dataset and export per-item predictions
    Eval {
        /// Checkpoint directory produced by train
        #[arg(long)]
        model: PathBuf,

        /// Dataset JSONL file
        #[arg(long)]
        dataset: PathBuf,

        /// Vocabulary file
        #[arg(long)]
        vocab: PathBuf,

        /// Replace audio features with {DIR}/{qid}.audio.tnsr
        #[arg(long)]
        audio_features: Option<PathBuf>,
    },

    /// Train all six modality combinations under identical seeds and budget
    /// and emit the ablation table
    Ablate {
        /// Dataset JSONL file
        #[arg(long)]
        dataset: PathBuf,

        /// Vocabulary file
        #[arg(long)]
        vocab: PathBuf,

        /// Replace audio features with {DIR}/{qid}.audio.tnsr
        #[arg(long)]
        audio_features: Option<PathBuf>,

        #[command(flatten)]
        flags: TrainFlags,
    },

    /// Train the question+audio model once per audio feature variant and
    /// emit the comparison table
    CompareAudio {
        /// Dataset JSONL file
        #[arg(long)]
        dataset: PathBuf,

        /// Vocabulary file
        #[arg(long)]
        vocab: PathBuf,

        /// Extra feature source as LABEL=DIR, repeatable; the dataset's own
        /// features always appear as the first row (Q+MelSpec)
        #[arg(long, value_parser = parse_variant)]
        variant: Vec<(String, PathBuf)>,

        #[command(flatten)]
        flags: TrainFlags,
    },

    /// Gradient-check the full pipeline in 64-bit mode; exits 0 iff the
    /// maximum relative error is below 1e-4
    Gradcheck,
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn require_out(out: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Config(format!("--out is required: {what}")))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

/// Width of the first present stream, or a fallback for streams the λ mask
/// never touches (the config demands a positive dimension either way).
fn infer_dim<F>(items: &[QAItem], pick: F, fallback: usize) -> usize
where
    F: Fn(&QAItem) -> Option<&Tensor<f32>>,
{
    items
        .iter()
        .find_map(|item| pick(item).map(|t| t.shape()[1]))
        .unwrap_or(fallback)
}

fn load_items(
    dataset: &Path,
    vocab_path: &Path,
    audio_features: Option<PathBuf>,
) -> Result<(crate::data::Vocab, Vec<QAItem>)> {
    let vocab = load_vocab(vocab_path)?;
    let opts = LoadOptions {
        audio_override: audio_features,
        ..LoadOptions::default()
    };
    let items = load_dataset(dataset, &vocab, &opts)?;
    if items.is_empty() {
        return Err(Error::Config(format!(
            "dataset {} has no usable items",
            dataset.display()
        )));
    }
    Ok((vocab, items))
}

fn write_table(dir: &Path, stem: &str, header: &[&str], csv: &[Vec<String>], md: &[Vec<String>]) -> Result<()> {
    write_csv(&dir.join(format!("{stem}.csv")), header, csv)?;
    fs::write(
        dir.join(format!("{stem}.md")),
        render_markdown_table(header, md),
    )?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Logmel { input } => {
            let out = require_out(cli.out, "path of the tensor file to write")?;
            let waveform = load_waveform(&input)?;
            let spec = logmel(&waveform, &MelConfig::default(), &input.display().to_string())?;
            let manifest = serde_json::json!({
                "kind": "logmel",
                "bands": spec.frames.shape()[1],
                "frame_hop_seconds": spec.frame_hop_seconds,
                "source": input.display().to_string(),
            });
            write_tensor_file(&out, &spec.frames, &manifest)?;
            println!(
                "{} frames x {} bands -> {}",
                spec.frames.shape()[0],
                spec.frames.shape()[1],
                out.display()
            );
            Ok(0)
        }

        Command::WalnetTrain {
            recordings,
            classes,
            cs,
            epochs,
            lr,
            batch,
            target_map,
            coding,
        } => {
            let out = require_out(cli.out, "checkpoint directory to create")?;
            ensure_dir(&out)?;
            let corpus = generate_weak_corpus(recordings, classes, cs, cli.seed, coding)?;
            let cfg = WalnetConfig::new(cs)?;
            let mut params = init_walnet_params(&cfg, cli.seed)?;
            let opts = WeakTrainOptions {
                epochs,
                lr,
                batch,
                seed: cli.seed,
                target_map,
                min_epochs: 1,
            };
            let report = train_weak_labels(&corpus, &cfg, &mut params, &opts)?;
            save_checkpoint(
                &out,
                &params,
                &serde_json::json!({ "kind": "walnet", "cs": cs, "seed": cli.seed }),
            )?;
            let rows: Vec<Vec<String>> = report
                .losses
                .iter()
                .zip(&report.maps)
                .enumerate()
                .map(|(i, (loss, map))| {
                    vec![(i + 1).to_string(), format!("{loss}"), format!("{map}")]
                })
                .collect();
            write_table(&out, "metrics", &["epoch", "train_loss", "train_map"], &rows, &rows)?;
            println!(
                "trained {} epochs on {} recordings; final mAP {:.4} -> {}",
                report.epochs_run,
                corpus.len(),
                report.maps.last().copied().unwrap_or(0.0),
                out.display()
            );
            Ok(0)
        }

        Command::WalnetExtract { model, dataset } => {
            let out = require_out(cli.out, "directory for the feature tensors")?;
            ensure_dir(&out)?;
            let (params, config) = load_checkpoint(&model)?;
            let cs = config
                .get("cs")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| {
                    Error::Config(format!(
                        "checkpoint {} does not record an event vocabulary size",
                        model.display()
                    ))
                })? as usize;
            let cfg = WalnetConfig::new(cs)?;
            let text = fs::read_to_string(&dataset)
                .map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", dataset.display())))?;
            let base = dataset.parent().unwrap_or(Path::new(".")).to_path_buf();
            let mut count = 0usize;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Data {
                    line: i + 1,
                    msg: format!("bad JSON: {e}"),
                })?;
                let qid = value
                    .get("qid")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| Error::Data {
                        line: i + 1,
                        msg: "missing qid".into(),
                    })?;
                let wav_path = base.join("wav").join(format!("{qid}.wav"));
                let waveform = load_waveform(&wav_path)?;
                let spec = logmel(&waveform, &MelConfig::default(), qid)?;
                let features = extract_segment_features(&spec, &cfg, &params)?;
                let manifest = serde_json::json!({
                    "kind": "walnet-segment",
                    "cs": cs,
                    "segment_hop_frames": features.segment_hop_frames,
                    "segment_len_frames": features.segment_len_frames,
                    "source": wav_path.display().to_string(),
                });
                write_tensor_file(
                    &out.join(format!("{qid}.audio.tnsr")),
                    &features.features,
                    &manifest,
                )?;
                count += 1;
            }
            println!("extracted features for {count} items -> {}", out.display());
            Ok(0)
        }

        Command::Synth {
            deciding,
            n,
            classes,
            vocab_size,
            video_dim,
            coding,
        } => {
            let out = require_out(cli.out, "directory for the dataset")?;
            let spec = SyntheticSpec {
                n_items: n,
                vocab_size,
                deciding,
                n_event_classes: classes,
                seed: cli.seed,
                video_dim,
                coding,
            };
            let output = generate_synthetic(&spec, &out)?;
            println!(
                "{} items -> {} (vocab {})",
                output.n_items,
                output.dataset.display(),
                output.vocab.display()
            );
            Ok(0)
        }

        Command::Train {
            dataset,
            vocab,
            audio_features,
            flags,
        } => {
            let out = require_out(cli.out, "run directory to create")?;
            ensure_dir(&out)?;
            let (vocab, items) = load_items(&dataset, &vocab, audio_features)?;
            let video_dim = infer_dim(&items, |i| i.video.as_ref(), 1);
            let audio_dim = infer_dim(&items, |i| i.audio.as_ref(), 128);
            let cfg = flags.config(vocab.size(), video_dim, audio_dim);
            let opts = flags.options(cli.seed);
            let (train, val) = split_dataset(items);
            let label = dataset.display().to_string();
            let result = train_model(&train, &val, &cfg, &opts, &label)?;
            save_model(&out.join("checkpoint"), &result.params, &cfg)?;
            result.manifest.save(&out.join("manifest.json"))?;
            let rows = metrics_rows(&result.manifest.metrics);
            write_table(&out, "metrics", &METRICS_HEADER, &rows, &rows)?;
            let (val_acc, predictions) = evaluate_model(&result.params, &cfg, &val)?;
            let rows = prediction_rows(&predictions);
            write_table(&out, "predictions", &PREDICTIONS_HEADER, &rows, &rows)?;
            println!(
                "best validation accuracy {:.4} at epoch {} ({} epochs run); checkpoint accuracy {:.4} -> {}",
                result.best_val_acc,
                result.best_epoch,
                result.manifest.metrics.len(),
                val_acc,
                out.display()
            );
            Ok(0)
        }

        Command::Eval {
            model,
            dataset,
            vocab,
            audio_features,
        } => {
            let out = require_out(cli.out, "directory for the prediction export")?;
            ensure_dir(&out)?;
            let (params, cfg) = load_model(&model)?;
            let (_, items) = load_items(&dataset, &vocab, audio_features)?;
            let (accuracy, predictions) = evaluate_model(&params, &cfg, &items)?;
            let rows = prediction_rows(&predictions);
            write_table(&out, "predictions", &PREDICTIONS_HEADER, &rows, &rows)?;
            println!(
                "accuracy {:.4} over {} items -> {}",
                accuracy,
                predictions.len(),
                out.display()
            );
            Ok(0)
        }

        Command::Ablate {
            dataset,
            vocab,
            audio_features,
            flags,
        } => {
            let out = require_out(cli.out, "directory for the ablation table")?;
            ensure_dir(&out)?;
            let (vocab, items) = load_items(&dataset, &vocab, audio_features)?;
            let video_dim = infer_dim(&items, |i| i.video.as_ref(), 1);
            let audio_dim = infer_dim(&items, |i| i.audio.as_ref(), 128);
            let cfg = flags.config(vocab.size(), video_dim, audio_dim);
            let opts = flags.options(cli.seed);
            let (train, val) = split_dataset(items);
            let label = dataset.display().to_string();
            let rows = run_ablation(&train, &val, &cfg, &opts, &label)?;
            write_table(
                &out,
                "ablation",
                &ABLATION_HEADER,
                &ablation_rows(&rows, false),
                &ablation_rows(&rows, true),
            )?;
            print!(
                "{}",
                render_markdown_table(&ABLATION_HEADER, &ablation_rows(&rows, true))
            );
            Ok(0)
        }

        Command::CompareAudio {
            dataset,
            vocab,
            variant,
            flags,
        } => {
            let out = require_out(cli.out, "directory for the comparison table")?;
            ensure_dir(&out)?;
            let vocab = load_vocab(&vocab)?;
            let mut variants = vec![AudioVariant {
                label: "Q+MelSpec".to_string(),
                override_dir: None,
            }];
            variants.extend(variant.into_iter().map(|(label, dir)| AudioVariant {
                label,
                override_dir: Some(dir),
            }));
            // video width only matters to config validation here (λ1 = 0)
            let base_cfg = flags.config(vocab.size(), 1, 128);
            let opts = flags.options(cli.seed);
            let rows = compare_audio_features(&dataset, &vocab, &variants, &base_cfg, &opts)?;
            write_table(
                &out,
                "comparison",
                &COMPARISON_HEADER,
                &comparison_rows(&rows, false),
                &comparison_rows(&rows, true),
            )?;
            print!(
                "{}",
                render_markdown_table(&COMPARISON_HEADER, &comparison_rows(&rows, true))
            );
            Ok(0)
        }

        Command::Gradcheck => {
            let report = pipeline_gradient_check(cli.seed)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst: {} [{}])",
                report.max_rel_err,
                report.checked,
                report.worst_param.as_deref().unwrap_or("-"),
                report.worst_index
            );
            Ok(if report.max_rel_err < 1e-4 { 0 } else { 1 })
        }
    }
}
