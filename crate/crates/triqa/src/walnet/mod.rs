//! The audio event network: six conv blocks (two 3x3 convolutions with
//! batch norm and ReLU, then a 2x2 max pool), a 2x2 convolution L7, a 1x1
//! segment output layer L8, and recording-level mean pooling P. Segment
//! features for the QA pipeline are the sigmoid of L8, one row per 128-frame
//! segment hopping 64 frames.

use crate::audio::LogMelSpectrogram;
use crate::error::{Error, Result};
use crate::numerics::{
    seeded_rng, AdamState, BnBatchStats, ParamSet, Scalar, Tape, Tensor, Var,
};
use rand::seq::SliceRandom;

pub const BLOCK_FILTERS: [usize; 6] = [16, 32, 64, 128, 256, 512];
pub const L7_FILTERS: usize = 1024;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct WalnetConfig {
    /// Segment output channels (= number of classes for weak-label training).
    pub cs: usize,
}

impl WalnetConfig {
    pub fn new(cs: usize) -> Result<Self> {
        if cs == 0 {
            return Err(Error::Config("C_s must be at least 1".into()));
        }
        Ok(WalnetConfig { cs })
    }
}

/// Segment-level features extracted at L8: `features` is `[S, C_s]`, row s
/// covering frames `[64s, 64s + 128)` of the source spectrogram.
#[derive(Debug, Clone)]
pub struct SegmentFeatureMatrix {
    pub features: Tensor<f32>,
    pub segment_hop_frames: usize,
    pub segment_len_frames: usize,
    pub source_id: String,
}

/// One weak-label training recording: spectrogram plus recording-level
/// multi-hot labels (length C_s, entries in {0, 1}).
#[derive(Debug, Clone)]
pub struct WeakLabelExample {
    pub spectrogram: LogMelSpectrogram,
    pub labels: Vec<f32>,
}

/// Whether batch norm uses this pass's own statistics (training) or the
/// stored running estimates (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Segment count for a T-frame input: six floor-halvings then the 2x2 L7
/// convolution drops one; equals the number of 128-frame windows at hop 64
/// after truncating T to a multiple of 64.
pub fn expected_segments(t: usize) -> usize {
    let mut v = t;
    for _ in 0..6 {
        v /= 2;
    }
    v.saturating_sub(1)
}

/// Initialize a fresh parameter set. Convolutions inside the blocks carry no
/// bias (batch norm's beta provides the shift, and a bias feeding
/// training-mode batch norm has an identically zero gradient); L7 and L8
/// keep theirs.
pub fn init_walnet_params(cfg: &WalnetConfig, seed: u64) -> Result<ParamSet<f32>> {
    let mut rng = seeded_rng(seed, 0x77_616c);
    let mut ps = ParamSet::new();
    let mut c_in = 1usize;
    for (b, &c_out) in BLOCK_FILTERS.iter().enumerate() {
        let b = b + 1;
        for j in 1..=2 {
            let cin = if j == 1 { c_in } else { c_out };
            ps.insert_glorot(
                &format!("walnet.l{b}.conv{j}.w"),
                &[c_out, cin, 3, 3],
                cin * 9,
                c_out * 9,
                &mut rng,
            )?;
            ps.insert_full(&format!("walnet.l{b}.bn{j}.gamma"), &[c_out], 1.0, true)?;
            ps.insert_zeros(&format!("walnet.l{b}.bn{j}.beta"), &[c_out], true)?;
            ps.insert_zeros(&format!("walnet.l{b}.bn{j}.running_mean"), &[c_out], false)?;
            ps.insert_full(&format!("walnet.l{b}.bn{j}.running_var"), &[c_out], 1.0, false)?;
        }
        c_in = c_out;
    }
    ps.insert_glorot(
        "walnet.l7.w",
        &[L7_FILTERS, 512, 2, 2],
        512 * 4,
        L7_FILTERS * 4,
        &mut rng,
    )?;
    ps.insert_zeros("walnet.l7.b", &[L7_FILTERS], true)?;
    ps.insert_glorot(
        "walnet.l8.w",
        &[cfg.cs, L7_FILTERS, 1, 1],
        L7_FILTERS,
        cfg.cs,
        &mut rng,
    )?;
    ps.insert_zeros("walnet.l8.b", &[cfg.cs], true)?;
    Ok(ps)
}

/// Everything one graph construction produces: segment logits `[S, C_s]`,
/// the batch statistics each training-mode batch norm observed (for folding
/// into the running estimates), and the shape at every block boundary.
pub struct WalnetPass<'t, S: Scalar> {
    pub segment_logits: Var<'t, S>,
    pub bn_stats: Vec<(String, BnBatchStats<S>)>,
    pub shape_trace: Vec<(String, Vec<usize>)>,
}

/// Build the L1..L8 graph over a `[T, 128]` spectrogram tensor.
pub fn walnet_graph<'t, S: Scalar>(
    tape: &'t Tape<S>,
    params: &ParamSet<S>,
    frames: &Tensor<S>,
    cfg: &WalnetConfig,
    mode: BnMode,
) -> Result<WalnetPass<'t, S>> {
    if frames.rank() != 2 || frames.shape()[1] != 128 {
        return Err(Error::Shape(format!(
            "walnet expects a [T, 128] spectrogram, got {:?}",
            frames.shape()
        )));
    }
    let t = frames.shape()[0];
    if t < 128 {
        return Err(Error::Config(format!(
            "walnet needs at least 128 frames for one segment, got {t}; \
             pad the spectrogram with log-floor values to reach 128"
        )));
    }
    let mut x = tape
        .constant(frames.clone())
        .reshape(vec![1, t, 128])?;
    let mut bn_stats = Vec::new();
    let mut shape_trace = Vec::new();
    for (b, &c_out) in BLOCK_FILTERS.iter().enumerate() {
        let b = b + 1;
        for j in 1..=2 {
            let w = tape.param(params, &format!("walnet.l{b}.conv{j}.w"))?;
            let zero_bias = tape.constant(Tensor::zeros(&[c_out]));
            x = x.conv2d(w, zero_bias, 1, 1)?;
            let gamma = tape.param(params, &format!("walnet.l{b}.bn{j}.gamma"))?;
            let beta = tape.param(params, &format!("walnet.l{b}.bn{j}.beta"))?;
            x = match mode {
                BnMode::Train => {
                    let (y, stats) = x.batchnorm_train(gamma, beta, BN_EPS)?;
                    bn_stats.push((format!("walnet.l{b}.bn{j}"), stats));
                    y
                }
                BnMode::Eval => x.batchnorm_eval(
                    gamma,
                    beta,
                    params.tensor(&format!("walnet.l{b}.bn{j}.running_mean"))?,
                    params.tensor(&format!("walnet.l{b}.bn{j}.running_var"))?,
                    BN_EPS,
                )?,
            };
            x = x.relu();
        }
        x = x.maxpool2d(2)?;
        shape_trace.push((format!("l{b}"), x.shape()));
    }
    let w7 = tape.param(params, "walnet.l7.w")?;
    let b7 = tape.param(params, "walnet.l7.b")?;
    x = x.conv2d(w7, b7, 1, 0)?.relu();
    shape_trace.push(("l7".into(), x.shape()));
    let w8 = tape.param(params, "walnet.l8.w")?;
    let b8 = tape.param(params, "walnet.l8.b")?;
    x = x.conv2d(w8, b8, 1, 0)?;
    shape_trace.push(("l8".into(), x.shape()));
    // [C_s, S, 1] -> [S, C_s]
    let s = x.shape()[1];
    let logits = x.reshape(vec![cfg.cs, s])?.transpose2d();
    Ok(WalnetPass {
        segment_logits: logits,
        bn_stats,
        shape_trace,
    })
}

/// Inference-mode forward pass: segment logits `[S, C_s]` plus the shape at
/// every block boundary.
pub fn walnet_forward(
    x: &LogMelSpectrogram,
    cfg: &WalnetConfig,
    params: &ParamSet<f32>,
) -> Result<(Tensor<f32>, Vec<(String, Vec<usize>)>)> {
    let tape = Tape::new();
    let pass = walnet_graph(&tape, params, &x.frames, cfg, BnMode::Eval)?;
    Ok(((*pass.segment_logits.value()).clone(), pass.shape_trace))
}

/// The QA pipeline's audio features: sigmoid of the segment logits,
/// transposed to `[S, C_s]`.
pub fn extract_segment_features(
    x: &LogMelSpectrogram,
    cfg: &WalnetConfig,
    params: &ParamSet<f32>,
) -> Result<SegmentFeatureMatrix> {
    let tape = Tape::new();
    let pass = walnet_graph(&tape, params, &x.frames, cfg, BnMode::Eval)?;
    let probs = pass.segment_logits.sigmoid();
    Ok(SegmentFeatureMatrix {
        features: (*probs.value()).clone(),
        segment_hop_frames: 64,
        segment_len_frames: 128,
        source_id: x.source_id.clone(),
    })
}

/// Recording-level pooling P: arithmetic mean over the segment axis.
pub fn recording_pool(segment_outputs: &Tensor<f32>) -> Result<Tensor<f32>> {
    if segment_outputs.rank() != 2 || segment_outputs.shape()[0] == 0 {
        return Err(Error::Shape(format!(
            "recording_pool expects a non-empty [S, C_s] matrix, got {:?}",
            segment_outputs.shape()
        )));
    }
    let (s, c) = (segment_outputs.shape()[0], segment_outputs.shape()[1]);
    let mut out = vec![0.0f32; c];
    for (i, &v) in segment_outputs.data().iter().enumerate() {
        out[i % c] += v;
    }
    for o in out.iter_mut() {
        *o /= s as f32;
    }
    Tensor::new(vec![c], out)
}

fn fold_running_stats(params: &mut ParamSet<f32>, stats: &[(String, BnBatchStats<f32>)]) -> Result<()> {
    for (prefix, st) in stats {
        let n = st.count as f64;
        let unbias = if st.count > 1 { n / (n - 1.0) } else { 1.0 };
        params.update(&format!("{prefix}.running_mean"), |t| {
            for (r, &m) in t.data_mut().iter_mut().zip(&st.mean) {
                *r = (1.0 - BN_MOMENTUM as f32) * *r + BN_MOMENTUM as f32 * m;
            }
        })?;
        params.update(&format!("{prefix}.running_var"), |t| {
            for (r, &v) in t.data_mut().iter_mut().zip(&st.var_biased) {
                *r = (1.0 - BN_MOMENTUM as f32) * *r + BN_MOMENTUM as f32 * (v as f64 * unbias) as f32;
            }
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct WeakTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Stop once the training-split mAP reaches this, but never before
    /// `min_epochs` epochs have run.
    pub target_map: Option<f64>,
    pub min_epochs: usize,
}

impl Default for WeakTrainOptions {
    fn default() -> Self {
        WeakTrainOptions {
            epochs: 30,
            lr: 1e-3,
            batch: 8,
            seed: 0,
            target_map: None,
            min_epochs: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeakTrainReport {
    /// Mean BCE per epoch.
    pub losses: Vec<f64>,
    /// Recording-level mAP per epoch, from the training-pass pooled scores.
    pub maps: Vec<f64>,
    pub epochs_run: usize,
}

/// Minimize mean binary cross-entropy between the mean-pooled sigmoid of L8
/// and the recording-level labels with Adam.
pub fn train_weak_labels(
    dataset: &[WeakLabelExample],
    cfg: &WalnetConfig,
    params: &mut ParamSet<f32>,
    opts: &WeakTrainOptions,
) -> Result<WeakTrainReport> {
    if dataset.is_empty() {
        return Err(Error::Config("weak-label training needs a non-empty dataset".into()));
    }
    for (i, ex) in dataset.iter().enumerate() {
        if ex.labels.len() != cfg.cs {
            return Err(Error::Config(format!(
                "recording {i} has {} labels but C_s = {}",
                ex.labels.len(),
                cfg.cs
            )));
        }
        if ex.labels.iter().any(|&l| l != 0.0 && l != 1.0) {
            return Err(Error::Config(format!("recording {i} has labels outside {{0, 1}}")));
        }
    }
    let batch = opts.batch.max(1);
    let mut adam = AdamState::new(opts.lr);
    let mut report = WeakTrainReport {
        losses: Vec::new(),
        maps: Vec::new(),
        epochs_run: 0,
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..opts.epochs {
        let mut rng = seeded_rng(opts.seed, 0x8000 + epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        // pooled scores in dataset order, for the epoch's mAP
        let mut scores: Vec<Vec<f32>> = vec![Vec::new(); dataset.len()];
        for chunk in order.chunks(batch) {
            let mut accum: std::collections::BTreeMap<String, Tensor<f32>> =
                std::collections::BTreeMap::new();
            let inv = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let ex = &dataset[idx];
                let tape = Tape::new();
                let pass = walnet_graph(&tape, params, &ex.spectrogram.frames, cfg, BnMode::Train)?;
                let pooled = pass.segment_logits.sigmoid().mean_rows();
                scores[idx] = pooled.value().data().to_vec();
                let labels = Tensor::new(vec![cfg.cs], ex.labels.clone())?;
                let loss = pooled.bce(&labels)?;
                epoch_loss += loss.value().data()[0] as f64;
                tape.backward(loss)?;
                for (name, grad) in tape.param_grads() {
                    let mut g = grad;
                    g.scale_assign(inv as f32);
                    match accum.entry(name) {
                        std::collections::btree_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                        std::collections::btree_map::Entry::Occupied(mut e) => {
                            e.get_mut().add_assign(&g);
                        }
                    }
                }
                fold_running_stats(params, &pass.bn_stats)?;
            }
            adam.step(params, &accum)?;
        }
        report.losses.push(epoch_loss / dataset.len() as f64);
        let map = weak_map(&scores, dataset);
        report.maps.push(map);
        report.epochs_run = epoch + 1;
        if let Some(target) = opts.target_map {
            if map >= target && report.epochs_run >= opts.min_epochs {
                break;
            }
        }
    }
    Ok(report)
}

fn weak_map(scores: &[Vec<f32>], dataset: &[WeakLabelExample]) -> f64 {
    let cs = dataset[0].labels.len();
    let mut aps = Vec::new();
    for c in 0..cs {
        let s: Vec<f32> = scores.iter().map(|row| row[c]).collect();
        let l: Vec<f32> = dataset.iter().map(|ex| ex.labels[c]).collect();
        if let Some(ap) = average_precision(&s, &l) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Average precision of `scores` against binary `labels`; `None` when there
/// are no positives. Ties rank by ascending example index for determinism.
pub fn average_precision(scores: &[f32], labels: &[f32]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0f64;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] == 1.0 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(ap / n_pos as f64)
}

/// Recording-level mAP over a dataset using inference-mode extraction.
pub fn evaluate_weak_map(
    dataset: &[WeakLabelExample],
    cfg: &WalnetConfig,
    params: &ParamSet<f32>,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let feats = extract_segment_features(&ex.spectrogram, cfg, params)?;
        scores.push(recording_pool(&feats.features)?.into_data());
    }
    Ok(weak_map(&scores, dataset))
}
