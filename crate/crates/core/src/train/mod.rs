//! Loss, metrics, noise injection and the staged training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dataio::Sample;
use crate::mesh::Field;
use crate::net::{forward_batch, ControlParams, ImageBatch, Mode, NetConfig, NetError};
use crate::tape::{Tape, TapeError, CE_CLAMP};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at stage {stage} (sd {sd}), epoch {epoch}, batch {batch}: {what}")]
    Diverged { stage: usize, sd: f64, epoch: usize, batch: usize, what: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// How the noise level of a stage is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSetting {
    /// Each pixel draws its own standard deviation from `U[0, sd]`.
    #[default]
    PerPixelUniform,
    /// Every pixel has standard deviation `sd`.
    Constant,
}

impl NoiseSetting {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" | "uniform" | "per-pixel" => Some(NoiseSetting::PerPixelUniform),
            "2" | "constant" => Some(NoiseSetting::Constant),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseSetting::PerPixelUniform => "uniform",
            NoiseSetting::Constant => "constant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent.
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Noise standard deviation of each stage, non-decreasing.
    pub schedule: Vec<f64>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub setting: NoiseSetting,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: vec![0.0, 0.3, 0.5],
            epochs: 50,
            batch: 16,
            lr: 1e-3,
            optimizer: Optimizer::default(),
            setting: NoiseSetting::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.schedule.is_empty() {
            return err("the noise schedule is empty".into());
        }
        if self.schedule.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return err("noise levels must be finite and non-negative".into());
        }
        if self.schedule.windows(2).any(|w| w[1] < w[0]) {
            return err(format!("noise schedule {:?} decreases", self.schedule));
        }
        if self.epochs == 0 || self.batch == 0 {
            return err("epochs and batch must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err(format!("learning rate {} is invalid", self.lr));
        }
        Ok(())
    }
}

fn check_pair(pred: &Field, target: &Field) -> Result<(), TrainError> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(TrainError::Shape(format!(
            "prediction {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    Ok(())
}

/// Mean of `−[t ln p + (1 − t) ln(1 − p)]` with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn cross_entropy(pred: &Field, target: &Field) -> Result<f64, TrainError> {
    check_pair(pred, target)?;
    let total: f64 = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| {
            let p = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub dice: f64,
}

/// Pixel accuracy and dice of `pred > 0.5` against `target > 0.5`; dice is 1 when both are empty.
pub fn metrics(pred: &Field, target: &Field) -> Result<Metrics, TrainError> {
    check_pair(pred, target)?;
    Ok(binary_metrics(pred.values(), target.values()))
}

fn binary_metrics(pred: &[f64], target: &[f64]) -> Metrics {
    let (mut agree, mut both, mut p_count, mut t_count) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p > 0.5, t > 0.5);
        agree += (p == t) as usize;
        both += (p && t) as usize;
        p_count += p as usize;
        t_count += t as usize;
    }
    let dice = if p_count + t_count == 0 { 1.0 } else { 2.0 * both as f64 / (p_count + t_count) as f64 };
    Metrics { accuracy: agree as f64 / pred.len() as f64, dice }
}

/// Per-pixel noise standard deviations of one image under `setting`.
pub fn noise_sd_map<R: Rng>(pixels: usize, sd: f64, setting: NoiseSetting, rng: &mut R) -> Vec<f64> {
    match setting {
        NoiseSetting::Constant => vec![sd; pixels],
        NoiseSetting::PerPixelUniform => (0..pixels).map(|_| rng.gen_range(0.0..=sd)).collect(),
    }
}

/// Adds `N(0, sds[i]²)` noise to pixel `i` of every channel.
pub fn add_noise_with<R: Rng>(image: &[Field; 3], sds: &[f64], rng: &mut R) -> [Field; 3] {
    image.clone().map(|mut f| {
        for (v, s) in f.values_mut().iter_mut().zip(sds) {
            let z: f64 = rng.sample(StandardNormal);
            *v += s * z;
        }
        f
    })
}

/// Adds zero-mean Gaussian noise to every channel. Nothing is clamped afterwards.
///
/// In the per-pixel setting a fresh standard deviation map is drawn for the call
/// and shared by the three channels.
pub fn add_noise<R: Rng>(image: &[Field; 3], sd: f64, setting: NoiseSetting, rng: &mut R) -> [Field; 3] {
    if sd == 0.0 {
        return image.clone();
    }
    let sds = noise_sd_map(image[0].len(), sd, setting, rng);
    add_noise_with(image, &sds, rng)
}

/// Per-tensor moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((x, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub stage_sd: f64,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub dice: f64,
}

pub const LOG_HEADER: &str = "stage_sd,epoch,loss,accuracy,dice";

/// CSV text with [`LOG_HEADER`] and one row per epoch.
pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{:.10},{:.10},{:.10}", r.stage_sd, r.epoch, r.loss, r.accuracy, r.dice).expect("string write");
    }
    s
}

fn check_data(cfg: &NetConfig, data: &[Sample]) -> Result<(), TrainError> {
    let first = data.first().ok_or_else(|| TrainError::Config("the dataset is empty".into()))?;
    let (rows, cols) = (first.mask.rows(), first.mask.cols());
    for s in data {
        if s.image.iter().chain([&s.mask]).any(|f| f.rows() != rows || f.cols() != cols) {
            return Err(TrainError::Shape(format!("sample {} differs from {rows}x{cols}", s.id)));
        }
    }
    cfg.check_image(rows, cols)?;
    Ok(())
}

fn stack(images: &[[Field; 3]]) -> Result<ImageBatch, TrainError> {
    Ok(ImageBatch::from_images(images)?)
}

/// Result of one batch: `(loss, gradient, probabilities, batch-norm statistics)`.
type BatchPass = (f64, Vec<f64>, Vec<f64>, Vec<(usize, f64, f64)>);

fn batch_pass(cfg: &NetConfig, theta: &ControlParams, images: &[[Field; 3]], masks: &[&Field]) -> Result<BatchPass, TrainError> {
    let batch = stack(images)?;
    let mut tape = Tape::new(theta.values.clone());
    let out = forward_batch(&mut tape, cfg, theta, &batch, Mode::Train, None)?;
    let target: Vec<f64> = masks.iter().flat_map(|m| m.values().iter().copied()).collect();
    let loss = match out.logit {
        Some(z) => tape.cross_entropy_logits(z, target)?,
        None => tape.cross_entropy(out.prob, target)?,
    };
    let value = tape.value(loss)[0];
    let grad = tape.backward(loss)?;
    let count = batch.batch * batch.rows * batch.cols;
    let stats = out
        .batch_norm
        .iter()
        .map(|&(slot, v)| {
            let (mean, var) = tape.batch_stats(v).expect("batch-norm node");
            let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
            (slot, mean, unbiased)
        })
        .collect();
    Ok((value, grad, tape.value(out.prob).to_vec(), stats))
}

/// Mean loss of `theta` on a fixed batch in training mode, with its gradient.
pub fn batch_loss(cfg: &NetConfig, theta: &ControlParams, samples: &[Sample]) -> Result<(f64, Vec<f64>), TrainError> {
    let images: Vec<[Field; 3]> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<&Field> = samples.iter().map(|s| &s.mask).collect();
    let (loss, grad, _, _) = batch_pass(cfg, theta, &images, &masks)?;
    Ok((loss, grad))
}

/// Trains one noise stage in place and returns its log rows. The optimizer state starts fresh.
///
/// `stage` only labels errors; the random stream is derived from `(tcfg.seed, stage)`.
pub fn train_stage(
    cfg: &NetConfig,
    theta: &mut ControlParams,
    data: &[Sample],
    tcfg: &TrainConfig,
    stage: usize,
) -> Result<Vec<EpochLog>, TrainError> {
    tcfg.validate()?;
    check_data(cfg, data)?;
    let sd = *tcfg
        .schedule
        .get(stage)
        .ok_or_else(|| TrainError::Config(format!("stage {stage} is past the schedule")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(stage as u64);
    let mut adam = Adam::new(theta.len());
    let momentum = cfg.bn_momentum;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum, mut dice_sum) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(tcfg.batch).enumerate() {
            let diverged = |what: String| TrainError::Diverged { stage, sd, epoch, batch: b, what };
            let images: Vec<[Field; 3]> =
                chunk.iter().map(|&i| add_noise(&data[i].image, sd, tcfg.setting, &mut rng)).collect();
            let masks: Vec<&Field> = chunk.iter().map(|&i| &data[i].mask).collect();
            let (loss, grad, prob, stats) = batch_pass(cfg, theta, &images, &masks)?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(diverged(format!("gradient entry {i} is not finite")));
            }
            match tcfg.optimizer {
                Optimizer::Adam { beta1, beta2, eps } => adam.step(&mut theta.values, &grad, tcfg.lr, beta1, beta2, eps),
                Optimizer::Sgd => theta.values.iter_mut().zip(&grad).for_each(|(x, g)| *x -= tcfg.lr * g),
            }
            for (slot, mean, var) in stats {
                theta.running_mean[slot] = (1.0 - momentum) * theta.running_mean[slot] + momentum * mean;
                theta.running_var[slot] = (1.0 - momentum) * theta.running_var[slot] + momentum * var;
            }
            if !theta.all_finite() {
                return Err(diverged("parameters left the finite range".into()));
            }
            let plane = masks[0].len();
            loss_sum += loss * chunk.len() as f64;
            for (k, m) in masks.iter().enumerate() {
                let mt = binary_metrics(&prob[k * plane..(k + 1) * plane], m.values());
                acc_sum += mt.accuracy;
                dice_sum += mt.dice;
            }
        }
        let n = data.len() as f64;
        rows.push(EpochLog { stage_sd: sd, epoch, loss: loss_sum / n, accuracy: acc_sum / n, dice: dice_sum / n });
    }
    Ok(rows)
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub theta: ControlParams,
    pub log: Vec<EpochLog>,
}

/// Progressive training: each stage warm-starts from the previous stage's parameters.
pub fn train(cfg: &NetConfig, theta: ControlParams, data: &[Sample], tcfg: &TrainConfig) -> Result<Trained, TrainError> {
    tcfg.validate()?;
    let mut theta = theta;
    let mut log = Vec::new();
    for stage in 0..tcfg.schedule.len() {
        log.extend(train_stage(cfg, &mut theta, data, tcfg, stage)?);
    }
    Ok(Trained { theta, log })
}

/// Mean metrics of inference-mode predictions on noisy copies of `data`.
pub fn evaluate(
    cfg: &NetConfig,
    theta: &ControlParams,
    data: &[Sample],
    sd: f64,
    setting: NoiseSetting,
    seed: u64,
) -> Result<Metrics, TrainError> {
    check_data(cfg, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut acc, mut dice) = (0.0, 0.0);
    for chunk in data.chunks(16) {
        let images: Vec<[Field; 3]> = chunk.iter().map(|s| add_noise(&s.image, sd, setting, &mut rng)).collect();
        let prob = predict(cfg, theta, &images)?;
        for (p, s) in prob.iter().zip(chunk) {
            let m = metrics(p, &s.mask)?;
            acc += m.accuracy;
            dice += m.dice;
        }
    }
    let n = data.len() as f64;
    Ok(Metrics { accuracy: acc / n, dice: dice / n })
}

/// Inference-mode probabilities for a batch of images.
pub fn predict(cfg: &NetConfig, theta: &ControlParams, images: &[[Field; 3]]) -> Result<Vec<Field>, TrainError> {
    let batch = stack(images)?;
    let mut tape = Tape::new(theta.values.clone());
    let out = forward_batch(&mut tape, cfg, theta, &batch, Mode::Infer, None)?;
    let plane = batch.rows * batch.cols;
    Ok(tape
        .value(out.prob)
        .chunks(plane)
        .map(|c| Field::from_vec(1, batch.rows, batch.cols, c.to_vec()).expect("finite probabilities"))
        .collect())
}
