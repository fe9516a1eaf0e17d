//! Loss, optimization, checkpoints, early stopping and the mean-IoU protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split, SplitReader};
use crate::engine::{Tape, Var};
use crate::error::{DatasetError, IoContext, TrainError};
use crate::models::{ModelSpec, Network, N_CLASSES};
use crate::params::{ParamKind, ParamStore, Session};
use crate::scene::SequenceSample;
use crate::tensor::{Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFCNETCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Mean per-pixel softmax cross-entropy of `scores` (B, 14, H, W) against the
/// last-frame labels (B * H * W).
pub fn loss<F: Float>(tape: &mut Tape<F>, scores: &Var<F>, labels: &[u8]) -> Result<Var<F>, TrainError> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
        return Err(TrainError::LabelOutOfRange(bad));
    }
    Ok(tape.softmax_cross_entropy(scores, labels)?)
}

/// Per-pixel arg-max class of `scores` (B, K, H, W), row-major per item.
pub fn predict<F: Float>(scores: &Tensor<F>) -> Result<Vec<u8>, TrainError> {
    let (b, k, h, w) = scores.dims4()?;
    let cells = h * w;
    let d = scores.data();
    let mut out = Vec::with_capacity(b * cells);
    for item in 0..b {
        let base = item * k * cells;
        for p in 0..cells {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * cells + p] > d[base + best * cells + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<(), TrainError> {
        if truth.len() != pred.len() {
            return Err(TrainError::DataMissing(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            for v in [t, p] {
                if v as usize >= self.classes {
                    return Err(TrainError::LabelOutOfRange(v));
                }
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs in
    /// either labels or predictions.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let fn_: u64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    /// Mean over the classes with a defined IoU; 0 for an empty matrix.
    pub fn mean_iou(&self) -> f64 {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub sequences: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(split: &str, sequences: usize, confusion: ConfusionMatrix) -> Self {
        Self {
            split: split.to_string(),
            sequences,
            per_class_iou: confusion.per_class_iou(),
            mean_iou: confusion.mean_iou(),
            confusion,
        }
    }
}

pub fn class_name(c: usize) -> String {
    match c {
        0 => "background".into(),
        1 => "border/wall".into(),
        2 => "static square".into(),
        3 => "circle".into(),
        d => format!("digit {}", d - 4),
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split {} ({} sequences)", self.split, self.sequences)?;
        writeln!(f, "{:<4} {:<16} {:>8}", "id", "class", "IoU %")?;
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let v = iou.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
            writeln!(f, "{:<4} {:<16} {:>8}", c, class_name(c), v)?;
        }
        writeln!(f, "{:<21} {:>8.2}", "mean IoU", 100.0 * self.mean_iou)?;
        write!(
            f,
            "(one confusion matrix over the split; classes absent from labels and predictions are left out of the mean)"
        )
    }
}

/// Random access to a list of sequences.
pub trait SequenceSource {
    fn len(&self) -> usize;
    fn fetch(&mut self, index: usize) -> Result<SequenceSample, TrainError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SequenceSource for Vec<SequenceSample> {
    fn len(&self) -> usize {
        <[SequenceSample]>::len(self)
    }

    fn fetch(&mut self, index: usize) -> Result<SequenceSample, TrainError> {
        self.get(index)
            .cloned()
            .ok_or_else(|| TrainError::DataMissing(format!("sequence {index} out of range")))
    }
}

impl SequenceSource for SplitReader {
    fn len(&self) -> usize {
        SplitReader::len(self)
    }

    fn fetch(&mut self, index: usize) -> Result<SequenceSample, TrainError> {
        Ok(self.get(index)?)
    }
}

/// Frames of `samples` as `T` tensors `(B, 1, H, W)` plus the stacked labels.
pub fn make_batch<F: Float>(samples: &[SequenceSample], clean: bool) -> Result<(Vec<Tensor<F>>, Vec<u8>), TrainError> {
    let first = samples
        .first()
        .ok_or_else(|| TrainError::DataMissing("empty batch".into()))?;
    let (t, n) = (first.steps, first.size);
    let cells = n * n;
    let mut frames = Vec::with_capacity(t);
    for step in 0..t {
        let mut data = Vec::with_capacity(samples.len() * cells);
        for s in samples {
            if s.steps != t || s.size != n {
                return Err(TrainError::DataMissing("sequences in a batch differ in shape".into()));
            }
            let src = if clean { s.clean_frame(step) } else { s.frame(step) };
            data.extend(src.iter().map(|&v| F::of(v as f64)));
        }
        frames.push(Tensor::from_vec(&[samples.len(), 1, n, n], data)?);
    }
    let labels = samples.iter().flat_map(|s| s.label.iter().copied()).collect();
    Ok((frames, labels))
}

/// Class scores for one batch in inference mode.
pub fn infer(net: &Network, store: &mut ParamStore<f32>, frames: Vec<Tensor<f32>>) -> Result<Tensor<f32>, TrainError> {
    let mut s = Session::eval(store);
    let vars: Vec<Var<f32>> = frames.into_iter().map(Var::constant).collect();
    Ok(net.forward_sequence(&mut s, &vars)?.value().clone())
}

/// Confusion matrix of `net` over every sequence of `source`.
pub fn evaluate(
    net: &Network,
    store: &mut ParamStore<f32>,
    source: &mut dyn SequenceSource,
    batch_size: usize,
) -> Result<ConfusionMatrix, TrainError> {
    let mut cm = ConfusionMatrix::new(N_CLASSES);
    let n = source.len();
    for start in (0..n).step_by(batch_size.max(1)) {
        let batch = (start..(start + batch_size).min(n))
            .map(|i| source.fetch(i))
            .collect::<Result<Vec<_>, _>>()?;
        let (frames, labels) = make_batch::<f32>(&batch, false)?;
        let scores = infer(net, store, frames)?;
        cm.add(&labels, &predict(&scores)?)?;
    }
    Ok(cm)
}

/// Evaluates a split of a dataset on disk.
pub fn evaluate_split(
    net: &Network,
    store: &mut ParamStore<f32>,
    data: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    let mut reader = data.open_split(split, None)?;
    if reader.is_empty() {
        return Err(TrainError::DataMissing(format!("split {split} is empty")));
    }
    let cm = evaluate(net, store, &mut reader, batch_size)?;
    Ok(EvalReport::from_confusion(split.as_str(), reader.len(), cm))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation mean IoU before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Only `cpu` is available.
    pub device: String,
    /// Wall-clock budget in seconds; training stops after the epoch that
    /// exceeds it.
    pub time_budget_secs: Option<f64>,
    /// Checkpoint whose parameters initialize matching entries of the model.
    pub init_from: Option<PathBuf>,
    pub eval_batch_size: usize,
    /// Stop as soon as the validation mean IoU reaches this value.
    pub target_val_miou: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            device: "cpu".into(),
            time_budget_secs: None,
            init_from: None,
            eval_batch_size: 16,
            target_val_miou: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.device != "cpu" {
            return bad(format!("device `{}` is not available; only `cpu` is", self.device));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || self.weight_decay < 0.0 {
            return bad("learning rate and weight decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter with a gradient.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) -> Result<(), TrainError> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = (1.0 - self.lr * self.weight_decay) as f32;
        let eps = self.eps as f32;
        for (name, g) in grads {
            if store.get(name)?.kind != ParamKind::Trainable {
                continue;
            }
            let p = store.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w = *w * decay - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Stops after `patience` consecutive epochs without a strictly better score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records the score of `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if self.best.map_or(true, |b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub wall_time_secs: f64,
}

/// Model spec, parameters and training progress.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW>,
    pub epoch: usize,
    pub best_val_miou: f64,
    /// Seed of the per-epoch shuffling and dropout streams; with `epoch` it
    /// fixes the random state of a resumed run.
    pub rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    /// Parameter names with moment tensors, in blob order.
    moments: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    epoch: usize,
    best_val_miou: f64,
    rng_seed: u64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

fn ck_err(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Layout: magic, `u32` version, `u32` header length, JSON header, then
    /// every tensor as little-endian `f32` in header order (parameters first,
    /// then the first and second optimizer moments).
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let tensors: Vec<TensorEntry> = self
            .params
            .iter()
            .map(|(name, p)| TensorEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                kind: p.kind,
            })
            .collect();
        let optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            step: o.step,
            moments: o.moments.keys().cloned().collect(),
        });
        let header = CheckpointHeader {
            spec: self.spec.clone(),
            epoch: self.epoch,
            best_val_miou: self.best_val_miou,
            rng_seed: self.rng_seed,
            tensors,
            optimizer,
        };
        let json = serde_json::to_vec(&header).map_err(|e| ck_err(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |data: &[f32]| data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for (_, p) in self.params.iter() {
            put(p.value.data());
        }
        if let Some(o) = &self.optimizer {
            for (m, _) in o.moments.values() {
                put(m);
            }
            for (_, v) in o.moments.values() {
                put(v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(ck_err("missing RFCNETCK magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ck_err(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| ck_err("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| ck_err(e.to_string()))?;
        let mut blob = &bytes[16 + hlen..];
        let mut take = |n: usize| -> Result<Vec<f32>, TrainError> {
            if blob.len() < 4 * n {
                return Err(ck_err("truncated tensor data"));
            }
            let (head, rest) = blob.split_at(4 * n);
            blob = rest;
            Ok(head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let mut params = ParamStore::new();
        for t in &header.tensors {
            let n = t.shape.iter().product();
            params.insert(t.name.clone(), Tensor::from_vec(&t.shape, take(n)?)?, t.kind)?;
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let sizes = o
                    .moments
                    .iter()
                    .map(|name| Ok(params.get(name)?.value.len()))
                    .collect::<Result<Vec<usize>, TrainError>>()?;
                let ms = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
                let vs = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
                Some(AdamW {
                    lr: o.lr,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                    step: o.step,
                    moments: o.moments.into_iter().zip(ms.into_iter().zip(vs)).collect(),
                })
            }
        };
        if !blob.is_empty() {
            return Err(ck_err(format!("{} trailing bytes", blob.len())));
        }
        Ok(Self {
            spec: header.spec,
            params,
            optimizer,
            epoch: header.epoch,
            best_val_miou: header.best_val_miou,
            rng_seed: header.rng_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).at(&tmp)?;
        fs::rename(&tmp, path).at(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}

/// Copies every parameter of `from` whose name, shape and kind exist in
/// `to`, for example a trained `fcd` into an `rfcd` of the same widths.
pub fn transfer_weights(from: &ParamStore<f32>, to: &mut ParamStore<f32>) -> usize {
    to.load_matching(from)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn append_line(path: &Path, line: &str) -> Result<(), TrainError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    writeln!(f, "{line}").at(path)?;
    Ok(())
}

/// Seeds of epoch `epoch`: one for the shuffle, one per batch for dropout.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains `spec` with full backpropagation through all frames. The best
/// checkpoint by validation mean IoU is kept; when `out_dir` is given the
/// metric log and the best and last checkpoints are written there.
pub fn train(
    spec: &ModelSpec,
    train_data: &mut dyn SequenceSource,
    val_data: &mut dyn SequenceSource,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(TrainError::DataMissing(format!(
            "{} training and {} validation sequences",
            train_data.len(),
            val_data.len()
        )));
    }
    let net = Network::build(spec)?;
    let mut store = net.init_params::<f32>(cfg.seed)?;
    if let Some(path) = &cfg.init_from {
        let source = Checkpoint::load(path)?;
        transfer_weights(&source.params, &mut store);
    }
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let started = Instant::now();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let seed = epoch_seed(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples = idx.iter().map(|&i| train_data.fetch(i)).collect::<Result<Vec<_>, _>>()?;
            let (frames, labels) = make_batch::<f32>(&samples, false)?;
            let mut s = Session::train(&mut store, seed.wrapping_add(bi as u64 + 1));
            let vars: Vec<Var<f32>> = frames.into_iter().map(Var::constant).collect();
            let scores = net.forward_sequence(&mut s, &vars)?;
            let l = loss(&mut s.tape, &scores, &labels)?;
            let value = l.value().data()[0] as f64;
            if !value.is_finite() {
                if let Some(dir) = out_dir {
                    let dump = serde_json::json!({ "epoch": epoch, "batch": bi, "sequences": idx, "loss": value.to_string() });
                    append_line(&dir.join("nonfinite.json"), &dump.to_string())?;
                }
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = s.tape.backward(&l)?;
            let grads = s.param_grads(&grads);
            drop(s);
            opt.update(&mut store, &grads)?;
            total += value;
            batches += 1;
        }
        let val = evaluate(&net, &mut store, val_data, cfg.eval_batch_size)?.mean_iou();
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_miou: val,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        let improved = stopper.observe(epoch, val);
        let snapshot = Checkpoint {
            spec: spec.clone(),
            params: store.clone(),
            optimizer: Some(opt.clone()),
            epoch,
            best_val_miou: stopper.best.unwrap_or(val),
            rng_seed: cfg.seed,
        };
        if let Some(dir) = out_dir {
            let line = serde_json::to_string(&record).map_err(|e| ck_err(e.to_string()))?;
            append_line(&dir.join(METRICS_FILE), &line)?;
            snapshot.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                snapshot.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if improved {
            best = Some(snapshot);
        }
        history.push(record);
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
        if cfg.time_budget_secs.is_some_and(|b| started.elapsed().as_secs_f64() >= b)
            || cfg.target_val_miou.is_some_and(|t| val >= t)
        {
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.ok_or_else(|| TrainError::DataMissing("no epoch completed".into()))?,
        history,
        stopped_early,
    })
}

/// Trains on the `train` split of `data`, validating on `val`.
pub fn train_on_dataset(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let missing = |e: DatasetError| TrainError::DataMissing(e.to_string());
    let mut tr = data.open_split(Split::Train, None).map_err(missing)?;
    let mut va = data.open_split(Split::Val, None).map_err(missing)?;
    train(spec, &mut tr, &mut va, cfg, out_dir)
}
