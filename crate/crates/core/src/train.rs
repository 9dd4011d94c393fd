//! Adam optimization, the mini-batch training loop, evaluation, and
//! checkpointing.
//!
//! Training is bitwise deterministic for a fixed seed regardless of thread
//! count: shuffling and augmentation decisions are drawn up front from
//! per-epoch streams, batch members run on independent tapes (possibly in
//! parallel), and gradients plus batch-norm statistics are reduced in batch
//! order before the single serialized Adam step.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::GradientMap;
use crate::data::{flip_horizontal, load_manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::nn::model::{Ablation, ForwardOpts, HeadMean, Model, ModelConfig, Normalization};
use crate::nn::{apply_bn_update, BnUpdate, Graph, Mode, Params};
use crate::scalar::Scalar;
use crate::tensor::io::{read_tensor_from, write_tensor_to};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam optimizer state: first/second moments per parameter plus the step
/// count used for bias correction.
#[derive(Clone)]
pub struct AdamState<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &Params<S>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        let v = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m,
            v,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient anywhere rejects the
/// whole step (no parameter is touched), reporting the offending parameter.
pub fn adam_step<S: Scalar>(
    params: &mut Params<S>,
    grads: &GradientMap<S>,
    state: &mut AdamState<S>,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { param: name.clone() });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (name, g) in grads {
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("adam state missing `{name}`")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("adam state missing `{name}`")))?;
        let p = params.get_mut(name)?;
        for ((pv, mv), (vv, gv)) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(g.data()))
        {
            let g = gv.to_f64();
            let m_new = state.beta1 * mv.to_f64() + (1.0 - state.beta1) * g;
            let v_new = state.beta2 * vv.to_f64() + (1.0 - state.beta2) * g * g;
            *mv = S::from_f64(m_new);
            *vv = S::from_f64(v_new);
            let update = state.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + state.eps);
            *pv = S::from_f64(pv.to_f64() - update);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    End2end,
    TwoStage,
}

impl Schedule {
    pub fn parse(s: &str) -> Result<Schedule> {
        match s {
            "end2end" => Ok(Schedule::End2end),
            "two-stage" => Ok(Schedule::TwoStage),
            other => Err(Error::InvalidConfig(format!(
                "unknown schedule `{other}` (expected end2end|two-stage)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::End2end => "end2end",
            Schedule::TwoStage => "two-stage",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Epochs per individual-branch stage under the two-stage schedule.
    pub stage_epochs: usize,
    /// Per-sequence probability of horizontal flip augmentation.
    pub flip_prob: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop once validation accuracy reaches this value.
    pub target_val_acc: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 40,
            batch: 8,
            lr: 1e-4,
            stage_epochs: 8,
            flip_prob: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            target_val_acc: None,
        }
    }
}

/// On-disk run configuration: the model preset plus an optional `[train]`
/// table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
}

impl ConfigFile {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_acc,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.val_acc, self.seconds
        )
    }
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Top-1 accuracy restricted to samples of the given true classes.
    pub fn subset_accuracy(&self, classes: &[usize]) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for &c in classes {
            correct += self.confusion[c][c];
            total += self.confusion[c].iter().sum::<usize>();
        }
        correct as f64 / total.max(1) as f64
    }
}

pub fn argmax<S: Scalar>(scores: &Tensor<S>) -> usize {
    let mut best = 0usize;
    for (i, v) in scores.data().iter().enumerate() {
        if *v > scores.data()[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy and the per-class confusion matrix on a labeled set.
pub fn evaluate(model: &Model<f32>, samples: &[SampleRecord]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".to_string()));
    }
    let k = model.config.head.k;
    let preds: Vec<(usize, usize)> = samples
        .par_iter()
        .map(|rec| -> Result<(usize, usize)> {
            if rec.label >= k {
                return Err(Error::ClassCountMismatch(format!(
                    "label {} outside the model's {k} classes",
                    rec.label
                )));
            }
            let scores = model.forward(&rec.frames, Mode::Eval, ForwardOpts::default())?;
            Ok((rec.label, argmax(&scores)))
        })
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (label, pred) in preds {
        confusion[label][pred] += 1;
        if label == pred {
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / samples.len() as f64,
        confusion,
    })
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct StepOut {
    loss: f64,
    correct: bool,
    grads: GradientMap<f32>,
    bn: Vec<BnUpdate>,
}

fn forward_backward(model: &Model<f32>, rec: &SampleRecord) -> Result<StepOut> {
    let mut g = Graph::new(&model.params, Mode::Train);
    let scores = model.forward_on(&mut g, &rec.frames, ForwardOpts::default())?;
    let loss = match model.config.head.mean {
        HeadMean::Logits => g.tape.cross_entropy(scores, rec.label)?,
        HeadMean::Probs => g.tape.neg_log_at(scores, rec.label)?,
    };
    let loss_v = g.tape.value(loss).item()?.to_f64();
    let correct = argmax(g.tape.value(scores)) == rec.label;
    let grads = g.gradient_map(loss)?;
    Ok(StepOut {
        loss: loss_v,
        correct,
        grads,
        bn: g.bn_updates,
    })
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e3779b97f4a7c15)
            ^ (epoch as u64).wrapping_mul(0xff51afd7ed558ccd)
            ^ stream,
    )
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Pixel mean and standard deviation over a sample set, in fixed order.
pub fn dataset_normalization(samples: &[SampleRecord]) -> Normalization {
    let mut sum = 0f64;
    let mut count = 0f64;
    for rec in samples {
        for &v in rec.frames.data() {
            sum += v as f64;
        }
        count += rec.frames.len() as f64;
    }
    let mean = sum / count.max(1.0);
    let mut q = 0f64;
    for rec in samples {
        for &v in rec.frames.data() {
            q += (v as f64 - mean).powi(2);
        }
    }
    let std = (q / count.max(1.0)).sqrt().max(1e-6);
    Normalization { mean, std }
}

/// A resumable training run.
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub settings: TrainSettings,
    pub schedule: Schedule,
    pub seed: u64,
    pub epochs_done: usize,
    /// Ablation requested by the configuration (the two-stage schedule
    /// temporarily overrides it during branch pre-training).
    configured_ablation: Ablation,
}

impl Trainer {
    pub fn new(
        config: ModelConfig,
        settings: TrainSettings,
        schedule: Schedule,
        seed: u64,
    ) -> Result<Self> {
        if schedule == Schedule::TwoStage && 2 * settings.stage_epochs >= settings.epochs {
            return Err(Error::InvalidConfig(format!(
                "two-stage schedule needs epochs > 2*stage_epochs ({} vs {})",
                settings.epochs, settings.stage_epochs
            )));
        }
        let configured_ablation = config.ablation;
        let model = Model::build(config, seed)?;
        let adam = AdamState::new(&model.params, settings.lr, settings.beta1, settings.beta2, settings.eps);
        Ok(Trainer {
            model,
            adam,
            settings,
            schedule,
            seed,
            epochs_done: 0,
            configured_ablation,
        })
    }

    /// Ablation wiring used during a given epoch.
    fn stage_ablation(&self, epoch: usize) -> Ablation {
        match self.schedule {
            Schedule::End2end => self.configured_ablation,
            Schedule::TwoStage => {
                let e1 = self.settings.stage_epochs;
                if epoch < e1 {
                    Ablation::TwoDOnly
                } else if epoch < 2 * e1 {
                    Ablation::ThreeDOnly
                } else {
                    self.configured_ablation
                }
            }
        }
    }

    fn stage_index(&self, epoch: usize) -> usize {
        match self.schedule {
            Schedule::End2end => 0,
            Schedule::TwoStage => {
                let e1 = self.settings.stage_epochs;
                if epoch < e1 {
                    0
                } else if epoch < 2 * e1 {
                    1
                } else {
                    2
                }
            }
        }
    }

    /// Runs epochs until `settings.epochs` (or the validation target) is
    /// reached, invoking `on_epoch` after each. Returns the new metrics.
    pub fn run(
        &mut self,
        train_set: &[SampleRecord],
        val_set: &[SampleRecord],
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        if train_set.is_empty() {
            return Err(Error::EmptyDataset("training set".to_string()));
        }
        let k = self.model.config.head.k;
        if let Some(bad) = train_set.iter().chain(val_set).find(|r| r.label >= k) {
            return Err(Error::ClassCountMismatch(format!(
                "label {} outside the configured {k} classes",
                bad.label
            )));
        }
        if self.epochs_done == 0 {
            self.model.norm = dataset_normalization(train_set);
        }

        let mut metrics = Vec::new();
        while self.epochs_done < self.settings.epochs {
            let epoch = self.epochs_done;
            // fresh optimizer at stage boundaries
            if epoch > 0 && self.stage_index(epoch) != self.stage_index(epoch - 1) {
                self.adam = AdamState::new(
                    &self.model.params,
                    self.settings.lr,
                    self.settings.beta1,
                    self.settings.beta2,
                    self.settings.eps,
                );
            }
            self.model.config.ablation = self.stage_ablation(epoch);

            let started = Instant::now();
            let (train_loss, train_acc) = self.train_epoch(train_set, epoch)?;
            let val_acc = if val_set.is_empty() {
                0.0
            } else {
                evaluate(&self.model, val_set)?.accuracy
            };
            let m = EpochMetrics {
                epoch: epoch + 1,
                train_loss,
                train_acc,
                val_acc,
                seconds: started.elapsed().as_secs_f64(),
            };
            self.epochs_done += 1;
            on_epoch(&m);
            metrics.push(m);
            if let Some(target) = self.settings.target_val_acc {
                if self.stage_ablation(self.epochs_done.saturating_sub(1)) == self.configured_ablation
                    && metrics.last().unwrap().val_acc >= target
                {
                    break;
                }
            }
        }
        self.model.config.ablation = self.configured_ablation;
        Ok(metrics)
    }

    fn train_epoch(&mut self, train_set: &[SampleRecord], epoch: usize) -> Result<(f64, f64)> {
        let n = train_set.len();
        let order = shuffled_indices(n, &mut epoch_rng(self.seed, epoch, 3));
        let mut flip_rng = epoch_rng(self.seed, epoch, 4);
        let flips: Vec<bool> = (0..n)
            .map(|_| flip_rng.random::<f64>() < self.settings.flip_prob)
            .collect();

        let mut loss_sum = 0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(self.settings.batch.max(1)).map(|c| c.to_vec()) {
            let model = &self.model;
            let flips = &flips;
            let outs: Vec<StepOut> = chunk
                .par_iter()
                .map(|&idx| {
                    let rec = &train_set[idx];
                    if flips[idx] {
                        forward_backward(model, &flip_horizontal(rec))
                    } else {
                        forward_backward(model, rec)
                    }
                })
                .collect::<Result<_>>()?;

            // fixed-order reduction
            let inv = 1.0 / outs.len() as f64;
            let mut summed: GradientMap<f32> = GradientMap::new();
            for out in &outs {
                loss_sum += out.loss;
                correct += out.correct as usize;
                for (name, g) in &out.grads {
                    match summed.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        }
                        None => {
                            summed.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
            for g in summed.values_mut() {
                for v in g.data_mut() {
                    *v = ((*v as f64) * inv) as f32;
                }
            }
            for out in &outs {
                for u in &out.bn {
                    apply_bn_update(&mut self.model.params, u)?;
                }
            }
            adam_step(&mut self.model.params, &summed, &mut self.adam)?;
        }
        Ok((loss_sum / n as f64, correct as f64 / n as f64))
    }
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-exactly.
#[derive(Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub settings: TrainSettings,
    pub schedule: Schedule,
    pub norm: Normalization,
    pub seed: u64,
    pub epochs_done: u32,
    pub params: Params<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Checkpoint {
        Checkpoint {
            config: t.model.config.clone(),
            settings: t.settings.clone(),
            schedule: t.schedule,
            norm: t.model.norm,
            seed: t.seed,
            epochs_done: t.epochs_done as u32,
            params: t.model.params.clone(),
            adam: t.adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        let configured_ablation = self.config.ablation;
        Trainer {
            model: Model {
                config: self.config,
                params: self.params,
                norm: self.norm,
                seed: self.seed,
            },
            adam: self.adam,
            settings: self.settings,
            schedule: self.schedule,
            seed: self.seed,
            epochs_done: self.epochs_done as usize,
            configured_ablation,
        }
    }

    pub fn into_model(self) -> Model<f32> {
        Model {
            config: self.config,
            params: self.params,
            norm: self.norm,
            seed: self.seed,
        }
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R, path: &str, what: &str) -> Result<String> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| trunc(path, what))?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| trunc(path, what))?;
    String::from_utf8(buf).map_err(|_| Error::ExtentMismatch {
        path: path.to_string(),
        detail: format!("{what} is not valid utf-8"),
    })
}

fn trunc(path: &str, what: &str) -> Error {
    Error::TruncatedPayload {
        path: path.to_string(),
        detail: format!("file ended while reading {what}"),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_str(&mut w, &ckpt.config.to_toml_string())?;
    write_str(&mut w, &toml::to_string(&ckpt.settings).expect("settings serialize"))?;
    w.write_all(&[match ckpt.schedule {
        Schedule::End2end => 0u8,
        Schedule::TwoStage => 1u8,
    }])?;
    w.write_all(&ckpt.norm.mean.to_le_bytes())?;
    w.write_all(&ckpt.norm.std.to_le_bytes())?;
    w.write_all(&ckpt.seed.to_le_bytes())?;
    w.write_all(&ckpt.epochs_done.to_le_bytes())?;

    let sections: Vec<(&String, &Tensor<f32>)> = ckpt.params.iter().collect();
    w.write_all(&(sections.len() as u32).to_le_bytes())?;
    for (name, t) in &sections {
        write_str(&mut w, name)?;
        write_tensor_to(&mut w, t)?;
    }
    let buffers: Vec<(String, Tensor<f32>)> = ckpt
        .params
        .iter_buffers()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    w.write_all(&(buffers.len() as u32).to_le_bytes())?;
    for (name, t) in &buffers {
        write_str(&mut w, name)?;
        write_tensor_to(&mut w, t)?;
    }
    w.write_all(&ckpt.adam.t.to_le_bytes())?;
    w.write_all(&ckpt.adam.lr.to_le_bytes())?;
    for (name, _) in &sections {
        write_tensor_to(&mut w, &ckpt.adam.m[*name])?;
        write_tensor_to(&mut w, &ckpt.adam.v[*name])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let pathstr = path.display().to_string();
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| trunc(&pathstr, "magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: pathstr,
            expected: "MGCK",
        });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| trunc(&pathstr, "version"))?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion {
            path: pathstr,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = ModelConfig::from_toml_str(&read_str(&mut r, &pathstr, "config")?)?;
    let settings: TrainSettings = toml::from_str(&read_str(&mut r, &pathstr, "settings")?)
        .map_err(|e| Error::InvalidConfig(format!("checkpoint settings: {e}")))?;
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(|_| trunc(&pathstr, "schedule"))?;
    let schedule = match b1[0] {
        0 => Schedule::End2end,
        1 => Schedule::TwoStage,
        other => {
            return Err(Error::ExtentMismatch {
                path: pathstr,
                detail: format!("unknown schedule tag {other}"),
            })
        }
    };
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| trunc(&pathstr, "norm mean"))?;
    let mean = f64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(|_| trunc(&pathstr, "norm std"))?;
    let std = f64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(|_| trunc(&pathstr, "seed"))?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b4).map_err(|_| trunc(&pathstr, "epoch"))?;
    let epochs_done = u32::from_le_bytes(b4);

    let mut params = Params::new();
    r.read_exact(&mut b4).map_err(|_| trunc(&pathstr, "param count"))?;
    let n_params = u32::from_le_bytes(b4) as usize;
    let mut names = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = read_str(&mut r, &pathstr, "param name")?;
        let t: Tensor<f32> = read_tensor_from(&mut r, &pathstr)?;
        params.insert(name.clone(), t);
        names.push(name);
    }
    r.read_exact(&mut b4).map_err(|_| trunc(&pathstr, "buffer count"))?;
    let n_buf = u32::from_le_bytes(b4) as usize;
    for _ in 0..n_buf {
        let name = read_str(&mut r, &pathstr, "buffer name")?;
        let t: Tensor<f32> = read_tensor_from(&mut r, &pathstr)?;
        params.insert_buffer(name, t);
    }
    r.read_exact(&mut b8).map_err(|_| trunc(&pathstr, "adam step"))?;
    let t_step = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(|_| trunc(&pathstr, "adam lr"))?;
    let lr = f64::from_le_bytes(b8);
    let mut adam = AdamState::new(&params, lr, settings.beta1, settings.beta2, settings.eps);
    adam.t = t_step;
    for name in &names {
        let m: Tensor<f32> = read_tensor_from(&mut r, &pathstr)?;
        let v: Tensor<f32> = read_tensor_from(&mut r, &pathstr)?;
        adam.m.insert(name.clone(), m);
        adam.v.insert(name.clone(), v);
    }

    Ok(Checkpoint {
        config,
        settings,
        schedule,
        norm: Normalization { mean, std },
        seed,
        epochs_done,
        params,
        adam,
    })
}

// ---------------------------------------------------------------------------
// high-level entry points
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub csv: PathBuf,
}

/// Loads manifests, trains from scratch, writes `metrics.csv` and
/// `model.ckpt` under `out_dir`.
pub fn run_training(
    config: ModelConfig,
    settings: TrainSettings,
    schedule: Schedule,
    seed: u64,
    train_manifest: &Path,
    val_manifest: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let train_set = load_manifest(train_manifest)?;
    let val_set = match val_manifest {
        Some(p) => load_manifest(p)?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(config, settings, schedule, seed)?;
    let metrics = trainer.run(&train_set, &val_set, |m| {
        eprintln!(
            "epoch {:>3}: train_loss {:.4} train_acc {:.3} val_acc {:.3} ({:.1}s)",
            m.epoch, m.train_loss, m.train_acc, m.val_acc, m.seconds
        );
    })?;
    let csv = out_dir.join("metrics.csv");
    write_metrics_csv(&csv, &metrics)?;
    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &Checkpoint::from_trainer(&trainer))?;
    Ok(TrainOutcome {
        metrics,
        checkpoint: ckpt_path,
        csv,
    })
}

/// Loads a checkpoint and evaluates it on a manifest.
pub fn run_evaluation(ckpt_path: &Path, manifest: &Path) -> Result<EvalReport> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = ckpt.into_model();
    let samples = load_manifest(manifest)?;
    let d = model.config.input;
    for rec in &samples {
        if rec.frames.shape() != [1, d.t, d.h, d.w] {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint preset `{}` expects [1,{},{},{}] sequences, manifest has {:?}",
                model.config.preset,
                d.t,
                d.h,
                d.w,
                rec.frames.shape()
            )));
        }
    }
    evaluate(&model, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, DatasetSpec};

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = Params::<f32>::new();
        params.insert("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let mut adam = AdamState::new(&params, 0.1, 0.9, 0.999, 1e-8);
        let mut grads = GradientMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[3]));
        adam_step(&mut params, &grads, &mut adam).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0, 3.0]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // bias correction makes m_hat = v_hat = 1 for a constant unit gradient
        let mut params = Params::<f32>::new();
        params.insert("w", Tensor::scalar(0.0));
        let lr = 0.01;
        let mut adam = AdamState::new(&params, lr, 0.9, 0.999, 1e-8);
        let mut grads = GradientMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        adam_step(&mut params, &grads, &mut adam).unwrap();
        let p1 = params.get("w").unwrap().data()[0] as f64;
        assert!((p1 + lr).abs() < lr * 1e-4, "step 1 moved {p1}");
        // second step with the same gradient: still about lr
        adam_step(&mut params, &grads, &mut adam).unwrap();
        let p2 = params.get("w").unwrap().data()[0] as f64;
        assert!(((p2 - p1) + lr).abs() < lr * 1e-3, "step 2 moved {}", p2 - p1);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = Params::<f32>::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&params, 0.1, 0.9, 0.999, 1e-8);
        let mut grads = GradientMap::new();
        grads.insert("w".to_string(), Tensor::scalar(f32::NAN));
        let err = adam_step(&mut params, &grads, &mut adam).unwrap_err();
        assert_eq!(err.code(), "non_finite_gradient");
        assert!(err.to_string().contains("w"));
        // rejected: parameter untouched, step count untouched
        assert_eq!(params.get("w").unwrap().data()[0], 1.0);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn adam_descends_convex_quadratic() {
        // f(p) = 0.5 * lambda * p^2; for lr below the curvature scale each
        // step strictly decreases f
        let lambda = 4.0f64;
        let mut params = Params::<f32>::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&params, 0.05, 0.9, 0.999, 1e-8);
        let mut f_prev = f64::INFINITY;
        for _ in 0..20 {
            let p = params.get("w").unwrap().data()[0] as f64;
            let f = 0.5 * lambda * p * p;
            assert!(f < f_prev || f == 0.0, "f did not decrease: {f} >= {f_prev}");
            f_prev = f;
            let mut grads = GradientMap::new();
            grads.insert("w".to_string(), Tensor::scalar((lambda * p) as f32));
            adam_step(&mut params, &grads, &mut adam).unwrap();
        }
    }

    fn mini_spec() -> DatasetSpec {
        DatasetSpec {
            train_per_class: 2,
            val_per_class: 1,
            ..DatasetSpec::default()
        }
    }

    fn micro_train_config() -> (ModelConfig, TrainSettings) {
        let spec = mini_spec();
        let mut cfg = ModelConfig::micro();
        cfg.input = crate::nn::model::InputDims {
            t: spec.t,
            h: spec.h,
            w: spec.w,
        };
        cfg.stem.upsample = [8, 8];
        cfg.head.k = spec.classes;
        cfg.preset = "micro-corpus".to_string();
        let settings = TrainSettings {
            epochs: 2,
            batch: 4,
            lr: 1e-3,
            ..TrainSettings::default()
        };
        (cfg, settings)
    }

    #[test]
    fn smoke_train_writes_metrics_and_checkpoint() {
        let spec = mini_spec();
        let dir = tempfile::tempdir().unwrap();
        let (train_m, val_m) = crate::data::write_corpus(&spec, dir.path()).unwrap();
        let (cfg, settings) = micro_train_config();
        let out = run_training(
            cfg,
            settings,
            Schedule::End2end,
            9,
            &train_m,
            Some(&val_m),
            &dir.path().join("run"),
        )
        .unwrap();
        assert_eq!(out.metrics.len(), 2);
        assert!(out.metrics.iter().all(|m| m.train_loss.is_finite()));
        let csv = std::fs::read_to_string(&out.csv).unwrap();
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert!(out.checkpoint.exists());
    }

    #[test]
    fn initial_loss_is_ln_k() {
        let spec = mini_spec();
        let (cfg, _) = micro_train_config();
        let model = Model::<f32>::build(cfg, 3).unwrap();
        let rec = generate_sample(&spec, 0, 0).unwrap();
        let mut g = Graph::new(&model.params, Mode::Train);
        let scores = model.forward_on(&mut g, &rec.frames, ForwardOpts::default()).unwrap();
        let loss = g.tape.cross_entropy(scores, 0).unwrap();
        let lk = (spec.classes as f64).ln();
        let got = g.tape.value(loss).item().unwrap() as f64;
        assert!((got - lk).abs() < 0.1, "initial loss {got} vs ln K {lk}");
    }

    #[test]
    fn untrained_model_scores_at_chance_with_exact_confusion() {
        let spec = mini_spec();
        let (cfg, _) = micro_train_config();
        let (_, val) = crate::data::generate_corpus(&spec).unwrap();
        for seed in 0..5 {
            let model = Model::<f32>::build(cfg.clone(), seed).unwrap();
            let report = evaluate(&model, &val).unwrap();
            // zero head: all scores equal, argmax picks class 0
            assert!((report.accuracy - 1.0 / spec.classes as f64).abs() <= 0.1);
            let total: usize = report.confusion.iter().flatten().sum();
            assert_eq!(total, val.len());
            let trace: usize = (0..spec.classes).map(|c| report.confusion[c][c]).sum();
            assert!((trace as f64 / total as f64 - report.accuracy).abs() < 1e-12);
            // determinism
            let again = evaluate(&model, &val).unwrap();
            assert_eq!(report, again);
        }
    }

    #[test]
    fn fixed_seed_training_is_bit_reproducible() {
        let spec = mini_spec();
        let (train, val) = crate::data::generate_corpus(&spec).unwrap();
        let (cfg, settings) = micro_train_config();
        let run = || {
            let mut t = Trainer::new(cfg.clone(), settings.clone(), Schedule::End2end, 5).unwrap();
            t.run(&train, &val, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.train_acc.to_bits(), y.train_acc.to_bits());
            assert_eq!(x.val_acc.to_bits(), y.val_acc.to_bits());
        }
    }

    #[test]
    fn checkpoint_roundtrip_resume_matches_uninterrupted() {
        let spec = mini_spec();
        let (train, val) = crate::data::generate_corpus(&spec).unwrap();
        let (cfg, mut settings) = micro_train_config();
        settings.epochs = 3;

        // uninterrupted
        let mut t_full = Trainer::new(cfg.clone(), settings.clone(), Schedule::End2end, 5).unwrap();
        let full = t_full.run(&train, &val, |_| {}).unwrap();

        // stop after one epoch, checkpoint, resume
        let mut settings1 = settings.clone();
        settings1.epochs = 1;
        let mut t_half = Trainer::new(cfg.clone(), settings1, Schedule::End2end, 5).unwrap();
        let first = t_half.run(&train, &val, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&p, &Checkpoint::from_trainer(&t_half)).unwrap();
        let mut resumed = load_checkpoint(&p).unwrap().into_trainer();
        resumed.settings.epochs = 3;
        let rest = resumed.run(&train, &val, |_| {}).unwrap();

        let seq: Vec<&EpochMetrics> = first.iter().chain(rest.iter()).collect();
        assert_eq!(seq.len(), full.len());
        for (a, b) in seq.iter().zip(&full) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits(), "epoch {}", b.epoch);
            assert_eq!(a.val_acc.to_bits(), b.val_acc.to_bits());
        }
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let (cfg, settings) = micro_train_config();
        let t = Trainer::new(cfg, settings, Schedule::End2end, 7).unwrap();
        let ckpt = Checkpoint::from_trainer(&t);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b, "save -> load -> save must be byte-identical");
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let code = |r: Result<Checkpoint>| match r {
            Ok(_) => "ok",
            Err(e) => e.code(),
        };
        let (cfg, settings) = micro_train_config();
        let t = Trainer::new(cfg, settings, Schedule::End2end, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&p, &Checkpoint::from_trainer(&t)).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'Q';
        std::fs::write(&p, &bad).unwrap();
        assert_eq!(code(load_checkpoint(&p)), "bad_magic");

        let mut vbad = bytes.clone();
        vbad[4] = 77;
        std::fs::write(&p, &vbad).unwrap();
        assert_eq!(code(load_checkpoint(&p)), "bad_version");

        let mut cut = bytes.clone();
        cut.truncate(bytes.len() / 2);
        std::fs::write(&p, &cut).unwrap();
        assert_eq!(code(load_checkpoint(&p)), "truncated_payload");
    }

    #[test]
    fn eval_rejects_wrong_shape_data() {
        let spec = mini_spec();
        let dir = tempfile::tempdir().unwrap();
        let (train_m, _) = crate::data::write_corpus(&spec, dir.path()).unwrap();
        let (cfg, settings) = micro_train_config();
        let mut cfg = cfg;
        cfg.input = crate::nn::model::InputDims { t: 4, h: 32, w: 32 };
        let t = Trainer::new(cfg, settings, Schedule::End2end, 7).unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&p, &Checkpoint::from_trainer(&t)).unwrap();
        let err = run_evaluation(&p, &train_m).unwrap_err();
        assert_eq!(err.code(), "incompatible_checkpoint");
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let spec = mini_spec();
        let (train, val) = crate::data::generate_corpus(&spec).unwrap();
        let (mut cfg, settings) = micro_train_config();
        cfg.head.k = 4; // corpus has 8 classes
        let mut t = Trainer::new(cfg, settings, Schedule::End2end, 5).unwrap();
        let err = t.run(&train, &val, |_| {}).unwrap_err();
        assert_eq!(err.code(), "class_count_mismatch");
    }
}
