//! Training and evaluation harness: run manifests, mini-batch training with
//! per-epoch option shuffling, the Table-1-style ablation runner, the audio
//! feature comparison, and CSV / Markdown export.

use crate::data::{load_dataset, LoadOptions, QAItem, Vocab};
use crate::error::{Error, Result};
use crate::model::{forward_qa, init_model_params, ForwardOptions, ModelConfig};
use crate::numerics::{seeded_rng, AdamState, ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// The six ablation combinations in their fixed emission order, with the
/// λ triple each one stands for.
pub const ABLATION_COMBOS: [(&str, [f64; 3]); 6] = [
    ("Q+V", [1.0, 0.0, 0.0]),
    ("Q+S", [0.0, 1.0, 0.0]),
    ("Q+A", [0.0, 0.0, 1.0]),
    ("Q+V+S", [1.0, 1.0, 0.0]),
    ("Q+S+A", [0.0, 1.0, 1.0]),
    ("Q+V+S+A", [1.0, 1.0, 1.0]),
];

/// Accuracy of the random-guess baseline row.
pub const RANDOM_BASELINE: f64 = 0.20;

/// Knobs for one training run. `target_acc` and `patience` give deterministic
/// early stopping: reaching the target validation accuracy, or going
/// `patience` epochs without improving on the best, ends the run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub target_acc: Option<f64>,
    pub patience: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            lr: 1e-3,
            batch_size: 16,
            dropout: 0.5,
            seed: 0,
            target_acc: None,
            patience: None,
        }
    }
}

/// One metrics row; the CSV schema is `epoch, train_loss, val_acc`.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Everything needed to reproduce a run, serialized alongside it. The number
/// of metrics rows equals the number of epochs actually completed.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub lambdas: [f64; 3],
    pub hops: usize,
    pub dataset: String,
    pub config_hash: String,
    pub metrics: Vec<EpochMetrics>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }
}

/// Short content hash over every knob that shapes a run, so manifests can be
/// told apart at a glance.
fn config_hash(cfg: &ModelConfig, opts: &TrainOptions, dataset: &str) -> String {
    #[derive(Serialize)]
    struct Hashed<'a> {
        cfg: &'a ModelConfig,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        dropout: f64,
        seed: u64,
        dataset: &'a str,
    }
    let json = serde_json::to_string(&Hashed {
        cfg,
        epochs: opts.epochs,
        lr: opts.lr,
        batch_size: opts.batch_size,
        dropout: opts.dropout,
        seed: opts.seed,
        dataset,
    })
    .expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// A trained model plus its provenance.
#[derive(Debug)]
pub struct TrainResult {
    /// Parameters from the epoch with the best validation accuracy.
    pub params: ParamSet<f32>,
    pub manifest: RunManifest,
    pub best_val_acc: f64,
    /// 1-based epoch the retained parameters come from.
    pub best_epoch: usize,
}

/// FNV-1a, the split hash: tiny, stable, and good enough to cut 1/6 off a
/// qid population.
pub fn fnv1a_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic 5/6 train, 1/6 validation split by qid hash.
pub fn split_dataset(items: Vec<QAItem>) -> (Vec<QAItem>, Vec<QAItem>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for item in items {
        if fnv1a_hash(item.qid.as_bytes()) % 6 == 5 {
            val.push(item);
        } else {
            train.push(item);
        }
    }
    (train, val)
}

/// Permute the five options of `item`, remapping `correct` so it still names
/// the same answer text.
pub fn shuffle_options<R: Rng>(item: &QAItem, rng: &mut R) -> QAItem {
    let mut perm: [usize; 5] = [0, 1, 2, 3, 4];
    perm.shuffle(rng);
    let answers: [Vec<u32>; 5] = std::array::from_fn(|i| item.answers[perm[i]].clone());
    let correct = perm
        .iter()
        .position(|&src| src == item.correct)
        .expect("permutation covers all indices");
    QAItem {
        qid: item.qid.clone(),
        question: item.question.clone(),
        answers,
        correct,
        subtitle: item.subtitle.clone(),
        video: item.video.clone(),
        audio: item.audio.clone(),
    }
}

/// Check that every stream a positive λ asks for is actually present, so a
/// run fails up front with the modality's name instead of mid-epoch.
fn check_modalities(items: &[QAItem], cfg: &ModelConfig) -> Result<()> {
    for item in items {
        if cfg.lambda1 > 0.0 && item.video.is_none() {
            return Err(Error::MissingModality(format!("video (item {})", item.qid)));
        }
        if cfg.lambda2 > 0.0 && item.subtitle.is_empty() {
            return Err(Error::MissingModality(format!("subtitle (item {})", item.qid)));
        }
        if cfg.lambda3 > 0.0 && item.audio.is_none() {
            return Err(Error::MissingModality(format!("audio (item {})", item.qid)));
        }
    }
    Ok(())
}

/// Train starting from freshly initialized parameters.
pub fn train_model(
    train: &[QAItem],
    val: &[QAItem],
    cfg: &ModelConfig,
    opts: &TrainOptions,
    dataset_label: &str,
) -> Result<TrainResult> {
    let params = init_model_params(cfg, opts.seed)?;
    train_model_from(params, train, val, cfg, opts, dataset_label)
}

/// Train starting from the given parameters (resume, or pre-arranged
/// initializations in tests).
pub fn train_model_from(
    mut params: ParamSet<f32>,
    train: &[QAItem],
    val: &[QAItem],
    cfg: &ModelConfig,
    opts: &TrainOptions,
    dataset_label: &str,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty splits, got {} train / {} val items",
            train.len(),
            val.len()
        )));
    }
    check_modalities(train, cfg)?;
    check_modalities(val, cfg)?;
    let batch = opts.batch_size.max(1);
    let mut adam = AdamState::new(opts.lr);
    let mut metrics: Vec<EpochMetrics> = Vec::new();
    let mut best_params = params.clone();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let fwd = ForwardOptions {
        training: true,
        dropout: opts.dropout,
    };
    for epoch in 1..=opts.epochs {
        // Substreams per purpose and epoch keep runs bit-reproducible while
        // still varying batches, option orders, and dropout masks over time.
        let mut order_rng = seeded_rng(opts.seed, 0x0e00_0000 + epoch as u64);
        let mut option_rng = seeded_rng(opts.seed, 0x0f00_0000 + epoch as u64);
        let mut dropout_rng = seeded_rng(opts.seed, 0x1000_0000 + epoch as u64);
        let shuffled: Vec<QAItem> = train
            .iter()
            .map(|item| shuffle_options(item, &mut option_rng))
            .collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0f64;
        for (batch_idx, chunk) in order.chunks(batch).enumerate() {
            let mut accum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            let inv = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let item = &shuffled[idx];
                let tape: Tape<f32> = Tape::new();
                let (logits, _) = forward_qa(&tape, &params, cfg, item, &fwd, &mut dropout_rng)?;
                let (loss, _) = logits.softmax_crossentropy(item.correct)?;
                let loss_val = loss.value().data()[0] as f64;
                if !loss_val.is_finite() {
                    return Err(Error::NanLoss {
                        epoch,
                        batch: batch_idx + 1,
                    });
                }
                epoch_loss += loss_val;
                tape.backward(loss)?;
                for (name, grad) in tape.param_grads() {
                    let mut g = grad;
                    g.scale_assign(inv as f32);
                    match accum.entry(name) {
                        Entry::Vacant(e) => {
                            e.insert(g);
                        }
                        Entry::Occupied(mut e) => {
                            e.get_mut().add_assign(&g);
                        }
                    }
                }
            }
            adam.step(&mut params, &accum)?;
        }
        let (val_acc, _) = evaluate_model(&params, cfg, val)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_acc,
        });
        if val_acc > best_val_acc {
            best_val_acc = val_acc;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if let Some(target) = opts.target_acc {
            if val_acc >= target {
                break;
            }
        }
        if let Some(patience) = opts.patience {
            if epoch - best_epoch > patience {
                break;
            }
        }
    }
    let manifest = RunManifest {
        seed: opts.seed,
        epochs: opts.epochs,
        lr: opts.lr,
        batch_size: opts.batch_size,
        dropout: opts.dropout,
        lambdas: [cfg.lambda1, cfg.lambda2, cfg.lambda3],
        hops: cfg.hops,
        dataset: dataset_label.to_string(),
        config_hash: config_hash(cfg, opts, dataset_label),
        metrics,
    };
    Ok(TrainResult {
        params: best_params,
        manifest,
        best_val_acc,
        best_epoch,
    })
}

/// One evaluated item; the CSV schema is
/// `qid, pred, correct, logit0..logit4`.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub qid: String,
    pub pred: usize,
    pub correct: usize,
    pub logits: [f32; 5],
}

/// Argmax over the five logits; ties resolve to the lowest index.
pub fn argmax_logits(logits: &[f32; 5]) -> usize {
    let mut best = 0usize;
    for i in 1..5 {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

/// Accuracy (correct / total) plus per-item predictions, in dataset order.
pub fn evaluate_model(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    items: &[QAItem],
) -> Result<(f64, Vec<Prediction>)> {
    if items.is_empty() {
        return Err(Error::Config("evaluation needs at least one item".into()));
    }
    let mut rng = seeded_rng(0, 0); // eval mode draws nothing from it
    let fwd = ForwardOptions::default();
    let mut predictions = Vec::with_capacity(items.len());
    let mut n_correct = 0usize;
    for item in items {
        let tape: Tape<f32> = Tape::new();
        let (logits_var, _) = forward_qa(&tape, params, cfg, item, &fwd, &mut rng)?;
        let values = logits_var.value();
        let data = values.data();
        let logits: [f32; 5] = [data[0], data[1], data[2], data[3], data[4]];
        let pred = argmax_logits(&logits);
        if pred == item.correct {
            n_correct += 1;
        }
        predictions.push(Prediction {
            qid: item.qid.clone(),
            pred,
            correct: item.correct,
            logits,
        });
    }
    Ok((n_correct as f64 / items.len() as f64, predictions))
}

/// One row of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub combo: String,
    pub lambdas: [f64; 3],
    pub accuracy: f64,
}

/// Train the six λ combinations under identical seeds and budget. Rows come
/// back in the fixed `ABLATION_COMBOS` order; accuracy is the best validation
/// accuracy of each run.
pub fn run_ablation(
    train: &[QAItem],
    val: &[QAItem],
    base_cfg: &ModelConfig,
    opts: &TrainOptions,
    dataset_label: &str,
) -> Result<Vec<AblationRow>> {
    let all = ModelConfig {
        lambda1: 1.0,
        lambda2: 1.0,
        lambda3: 1.0,
        ..base_cfg.clone()
    };
    check_modalities(train, &all)?;
    check_modalities(val, &all)?;
    let mut rows = Vec::with_capacity(ABLATION_COMBOS.len());
    for (combo, [l1, l2, l3]) in ABLATION_COMBOS {
        let cfg = ModelConfig {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            ..base_cfg.clone()
        };
        let result = train_model(train, val, &cfg, opts, dataset_label)?;
        rows.push(AblationRow {
            combo: combo.to_string(),
            lambdas: [l1, l2, l3],
            accuracy: result.best_val_acc,
        });
    }
    Ok(rows)
}

/// One audio feature source for the comparison table: `None` uses the
/// features the dataset itself points at; a directory overrides them with
/// `{dir}/{qid}.audio.tnsr`.
#[derive(Debug, Clone)]
pub struct AudioVariant {
    pub label: String,
    pub override_dir: Option<PathBuf>,
}

/// One row of the feature comparison table.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub label: String,
    pub accuracy: f64,
}

/// Audio feature width shared by every item, or an error naming the odd one
/// out.
fn audio_dim(items: &[QAItem], label: &str) -> Result<usize> {
    let mut dim: Option<usize> = None;
    for item in items {
        let t = item
            .audio
            .as_ref()
            .ok_or_else(|| Error::MissingModality(format!("audio (item {})", item.qid)))?;
        let d = t.shape()[1];
        match dim {
            None => dim = Some(d),
            Some(existing) if existing != d => {
                return Err(Error::Shape(format!(
                    "variant {label}: item {} has {d}-dim audio features, others have {existing}",
                    item.qid
                )))
            }
            _ => {}
        }
    }
    dim.ok_or_else(|| Error::Config(format!("variant {label}: no items")))
}

/// Train Q+A (λ = (0,0,1)) once per audio feature variant under identical
/// seeds and budget.
pub fn compare_audio_features(
    dataset_path: &Path,
    vocab: &Vocab,
    variants: &[AudioVariant],
    base_cfg: &ModelConfig,
    opts: &TrainOptions,
) -> Result<Vec<ComparisonRow>> {
    if variants.is_empty() {
        return Err(Error::Config("comparison needs at least one variant".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let load = LoadOptions {
            audio_override: variant.override_dir.clone(),
            ..LoadOptions::default()
        };
        let items = load_dataset(dataset_path, vocab, &load)?;
        let dim = audio_dim(&items, &variant.label)?;
        let cfg = ModelConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 1.0,
            audio_in_dim: dim,
            ..base_cfg.clone()
        };
        let (train, val) = split_dataset(items);
        let label = format!("{} [{}]", dataset_path.display(), variant.label);
        let result = train_model(&train, &val, &cfg, opts, &label)?;
        rows.push(ComparisonRow {
            label: variant.label.clone(),
            accuracy: result.best_val_acc,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Table export
// ---------------------------------------------------------------------------

/// Write a CSV file: header row, then `rows`, one line each, `\n` endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Render a GitHub-style Markdown table.
pub fn render_markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(
        out,
        "|{}|",
        header.iter().map(|_| " --- ").collect::<Vec<_>>().join("|")
    );
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out
}

fn fmt_lambda(l: f64) -> String {
    format!("{l}")
}

fn fmt_percent(acc: f64) -> String {
    format!("{:.2}", acc * 100.0)
}

/// Metrics CSV rows (`epoch, train_loss, val_acc`).
pub fn metrics_rows(metrics: &[EpochMetrics]) -> Vec<Vec<String>> {
    metrics
        .iter()
        .map(|m| {
            vec![
                m.epoch.to_string(),
                format!("{}", m.train_loss),
                format!("{}", m.val_acc),
            ]
        })
        .collect()
}

pub const METRICS_HEADER: [&str; 3] = ["epoch", "train_loss", "val_acc"];

/// Prediction CSV rows (`qid, pred, correct, logit0..logit4`).
pub fn prediction_rows(predictions: &[Prediction]) -> Vec<Vec<String>> {
    predictions
        .iter()
        .map(|p| {
            let mut row = vec![p.qid.clone(), p.pred.to_string(), p.correct.to_string()];
            row.extend(p.logits.iter().map(|l| format!("{l}")));
            row
        })
        .collect()
}

pub const PREDICTIONS_HEADER: [&str; 8] = [
    "qid", "pred", "correct", "logit0", "logit1", "logit2", "logit3", "logit4",
];

/// Ablation table rows: the Random baseline first (mirroring the reference
/// table layout), then the six combos in fixed order. Accuracy is a fraction
/// in CSV and a percentage in Markdown.
pub fn ablation_rows(rows: &[AblationRow], percent: bool) -> Vec<Vec<String>> {
    let acc = |a: f64| {
        if percent {
            fmt_percent(a)
        } else {
            format!("{a}")
        }
    };
    let mut out = vec![vec![
        "Random".to_string(),
        fmt_lambda(0.0),
        fmt_lambda(0.0),
        fmt_lambda(0.0),
        acc(RANDOM_BASELINE),
    ]];
    for row in rows {
        out.push(vec![
            row.combo.clone(),
            fmt_lambda(row.lambdas[0]),
            fmt_lambda(row.lambdas[1]),
            fmt_lambda(row.lambdas[2]),
            acc(row.accuracy),
        ]);
    }
    out
}

pub const ABLATION_HEADER: [&str; 5] = ["combo", "lambda1", "lambda2", "lambda3", "accuracy"];

/// Comparison table rows, one per variant, in input order.
pub fn comparison_rows(rows: &[ComparisonRow], percent: bool) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.label.clone(),
                if percent {
                    fmt_percent(r.accuracy)
                } else {
                    format!("{}", r.accuracy)
                },
            ]
        })
        .collect()
}

pub const COMPARISON_HEADER: [&str; 2] = ["method", "accuracy"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::expected_param_shapes;
    use crate::numerics::seeded_rng;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            hops: 2,
            embed_dim: 8,
            hidden_dim: 4,
            video_in_dim: 5,
            audio_in_dim: 3,
            vocab_size: 12,
            n_answers: 5,
        }
    }

    fn tiny_items(n: usize, seed: u64, cfg: &ModelConfig) -> Vec<QAItem> {
        let mut rng = seeded_rng(seed, 90);
        (0..n)
            .map(|i| {
                let mut tokens =
                    |len: usize| -> Vec<u32> { (0..len).map(|_| rng.random_range(2..12)).collect() };
                let question = tokens(4);
                let answers = [tokens(2), tokens(1), tokens(3), tokens(2), tokens(1)];
                let subtitle = tokens(6);
                let mut feats = |rows: usize, d: usize| -> Tensor<f32> {
                    Tensor::new(
                        vec![rows, d],
                        (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                    .unwrap()
                };
                QAItem {
                    qid: format!("item{i:03}"),
                    question,
                    answers,
                    correct: i % 5,
                    subtitle,
                    video: Some(feats(3, cfg.video_in_dim)),
                    audio: Some(feats(2, cfg.audio_in_dim)),
                }
            })
            .collect()
    }

    fn quick_opts() -> TrainOptions {
        TrainOptions {
            epochs: 2,
            batch_size: 4,
            dropout: 0.0,
            seed: 3,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn split_is_deterministic_and_roughly_one_sixth() {
        let cfg = tiny_config();
        let mut items = Vec::new();
        for i in 0..3000 {
            let mut it = tiny_items(1, i as u64, &cfg).pop().unwrap();
            it.qid = format!("q{i:05}");
            items.push(it);
        }
        let (train_a, val_a) = split_dataset(items.clone());
        let (train_b, val_b) = split_dataset(items);
        let ids = |v: &[QAItem]| v.iter().map(|i| i.qid.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train_a), ids(&train_b));
        assert_eq!(ids(&val_a), ids(&val_b));
        let frac = val_a.len() as f64 / 3000.0;
        assert!(
            (0.13..0.21).contains(&frac),
            "validation fraction {frac} far from 1/6"
        );
    }

    #[test]
    fn option_shuffle_preserves_correct_answer_over_many_draws() {
        let cfg = tiny_config();
        let items = tiny_items(10, 4, &cfg);
        let mut rng = seeded_rng(11, 0);
        for round in 0..10_000 {
            let item = &items[round % items.len()];
            let shuffled = shuffle_options(item, &mut rng);
            assert_eq!(
                shuffled.answers[shuffled.correct], item.answers[item.correct],
                "round {round}: correct index no longer names the same answer"
            );
            let mut sorted_a = shuffled.answers.to_vec();
            let mut sorted_b = item.answers.to_vec();
            sorted_a.sort();
            sorted_b.sort();
            assert_eq!(sorted_a, sorted_b, "round {round}: answer multiset changed");
        }
    }

    #[test]
    fn all_equal_logits_predict_index_zero() {
        let cfg = tiny_config();
        let mut params = init_model_params(&cfg, 5).unwrap();
        // zero the scorer output layer: every answer scores exactly 0
        for name in ["scorer.fc2.w", "scorer.fc2.b"] {
            let shape = params.tensor(name).unwrap().shape().to_vec();
            params
                .set_tensor(name, Tensor::zeros(&shape))
                .unwrap();
        }
        let items = tiny_items(6, 6, &cfg);
        let (_, predictions) = evaluate_model(&params, &cfg, &items).unwrap();
        for p in &predictions {
            assert_eq!(p.logits, [0.0; 5]);
            assert_eq!(p.pred, 0, "tie must resolve to the lowest index");
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_logits(&[1.0, 1.0, 1.0, 1.0, 1.0]), 0);
        assert_eq!(argmax_logits(&[0.0, 2.0, 2.0, 1.0, 0.0]), 1);
        assert_eq!(argmax_logits(&[0.0, -1.0, 3.0, 3.0, 3.0]), 2);
    }

    #[test]
    fn evaluation_is_invariant_to_option_shuffling() {
        let cfg = tiny_config();
        let params = init_model_params(&cfg, 7).unwrap();
        let items = tiny_items(20, 8, &cfg);
        let (acc, _) = evaluate_model(&params, &cfg, &items).unwrap();
        let mut rng = seeded_rng(9, 0);
        let shuffled: Vec<QAItem> = items.iter().map(|i| shuffle_options(i, &mut rng)).collect();
        let (acc_shuffled, _) = evaluate_model(&params, &cfg, &shuffled).unwrap();
        assert_eq!(acc, acc_shuffled);
    }

    #[test]
    fn epoch_one_loss_starts_near_ln5_with_zeroed_scorer_output() {
        let cfg = tiny_config();
        let mut params = init_model_params(&cfg, 10).unwrap();
        for name in ["scorer.fc2.w", "scorer.fc2.b"] {
            let shape = params.tensor(name).unwrap().shape().to_vec();
            params.set_tensor(name, Tensor::zeros(&shape)).unwrap();
        }
        let items = tiny_items(24, 11, &cfg);
        let (train, val) = (&items[..20], &items[20..]);
        let opts = TrainOptions {
            epochs: 1,
            ..quick_opts()
        };
        let result = train_model_from(params, train, val, &cfg, &opts, "inline").unwrap();
        let ln5 = (5.0f64).ln();
        let loss = result.manifest.metrics[0].train_loss;
        assert!(
            (loss - ln5).abs() / ln5 < 0.05,
            "epoch-1 loss {loss} not within 5% of ln 5 = {ln5}"
        );
    }

    #[test]
    fn training_is_deterministic_given_the_seed() {
        let cfg = tiny_config();
        let items = tiny_items(18, 12, &cfg);
        let (train, val) = (&items[..15], &items[15..]);
        let opts = TrainOptions {
            dropout: 0.5,
            ..quick_opts()
        };
        let a = train_model(train, val, &cfg, &opts, "inline").unwrap();
        let b = train_model(train, val, &cfg, &opts, "inline").unwrap();
        let rows_a = metrics_rows(&a.manifest.metrics);
        let rows_b = metrics_rows(&b.manifest.metrics);
        assert_eq!(rows_a, rows_b);
        assert_eq!(a.manifest.config_hash, b.manifest.config_hash);
        assert_eq!(a.params.max_abs_diff(&b.params).unwrap(), 0.0);
    }

    #[test]
    fn manifest_rows_match_completed_epochs_and_early_stop_works() {
        let cfg = tiny_config();
        let items = tiny_items(18, 13, &cfg);
        let (train, val) = (&items[..15], &items[15..]);
        let opts = TrainOptions {
            epochs: 30,
            target_acc: Some(0.0), // first epoch always reaches 0.0
            ..quick_opts()
        };
        let result = train_model(train, val, &cfg, &opts, "inline").unwrap();
        assert_eq!(result.manifest.metrics.len(), 1);
        assert_eq!(result.best_epoch, 1);
        assert_eq!(result.manifest.config_hash.len(), 12);
    }

    #[test]
    fn nan_loss_reports_epoch_and_batch() {
        let cfg = tiny_config();
        let mut params = init_model_params(&cfg, 14).unwrap();
        let shape = params.tensor("scorer.fc2.b").unwrap().shape().to_vec();
        params
            .set_tensor("scorer.fc2.b", Tensor::new(shape, vec![f32::NAN]).unwrap())
            .unwrap();
        let items = tiny_items(12, 15, &cfg);
        let (train, val) = (&items[..10], &items[10..]);
        let err = train_model_from(params, train, val, &cfg, &quick_opts(), "inline").unwrap_err();
        match err {
            Error::NanLoss { epoch, batch } => {
                assert_eq!((epoch, batch), (1, 1));
            }
            other => panic!("expected NanLoss, got {other:?}"),
        }
    }

    #[test]
    fn missing_audio_with_positive_lambda3_is_named() {
        let cfg = tiny_config();
        let mut items = tiny_items(12, 16, &cfg);
        items[3].audio = None;
        let (train, val) = (&items[..10], &items[10..]);
        let err = run_ablation(train, val, &cfg, &quick_opts(), "inline").unwrap_err();
        match err {
            Error::MissingModality(msg) => assert!(msg.contains("audio"), "got: {msg}"),
            other => panic!("expected MissingModality, got {other:?}"),
        }
    }

    #[test]
    fn ablation_rows_come_in_fixed_order_with_random_first() {
        let rows: Vec<AblationRow> = ABLATION_COMBOS
            .iter()
            .map(|(combo, lambdas)| AblationRow {
                combo: combo.to_string(),
                lambdas: *lambdas,
                accuracy: 0.5,
            })
            .collect();
        let table = ablation_rows(&rows, true);
        assert_eq!(table.len(), 7);
        assert_eq!(table[0], vec!["Random", "0", "0", "0", "20.00"]);
        let combos: Vec<&str> = table[1..].iter().map(|r| r[0].as_str()).collect();
        assert_eq!(combos, vec!["Q+V", "Q+S", "Q+A", "Q+V+S", "Q+S+A", "Q+V+S+A"]);
        assert_eq!(table[3], vec!["Q+A", "0", "0", "1", "50.00"]);
    }

    #[test]
    fn csv_and_markdown_emitters_produce_expected_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            vec!["a".to_string(), "1".to_string()],
            vec!["b".to_string(), "2".to_string()],
        ];
        write_csv(&path, &["name", "value"], &rows).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "name,value\na,1\nb,2\n"
        );
        assert_eq!(
            render_markdown_table(&["name", "value"], &rows),
            "| name | value |\n| --- | --- |\n| a | 1 |\n| b | 2 |\n"
        );
    }

    #[test]
    fn expected_shapes_match_across_lambda_masks() {
        // all combos share one parameter space, so ablation checkpoints are
        // interchangeable with the full model's
        let base = tiny_config();
        let shapes = expected_param_shapes(&base);
        for (_, lambdas) in ABLATION_COMBOS {
            let cfg = ModelConfig {
                lambda1: lambdas[0],
                lambda2: lambdas[1],
                lambda3: lambdas[2],
                ..base.clone()
            };
            assert_eq!(expected_param_shapes(&cfg), shapes);
        }
    }
}
