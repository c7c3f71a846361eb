//! Losses, the budgeted confidence weight, the optimizer and the two-phase
//! training loop.
//!
//! Phase one fits every parameter of a network without the confidence
//! branch to the illuminant with MSE. Phase two attaches a fresh confidence
//! branch, freezes everything else and minimizes
//! `c^2 ||L* - L||^2 - lambda ln c`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::colorlib::{self, ErrorStats, Illuminant};
use crate::datagen::{self, AugmentConfig, LabeledImage};
use crate::error::{Error, Result};
use crate::network::{self, Mode, NamedTensor, NetworkSpec, NetworkWeights, Trainable};
use crate::rng::{self, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(op: &'static str, v: &[f64; 3]) -> Result<()> {
    if v.iter().any(|x| !(*x >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::contract(op, alloc::format!("{v:?} is not l1-normalized")));
    }
    Ok(())
}

fn check_confidence(op: &'static str, c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::contract(op, alloc::format!("confidence {c} outside (0, 1]")));
    }
    Ok(())
}

fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared componentwise difference of two normalized illuminants.
pub fn mse_loss(estimate: &[f64; 3], truth: &[f64; 3]) -> Result<f64> {
    check_simplex("mse_loss", estimate)?;
    check_simplex("mse_loss", truth)?;
    Ok(squared_distance(estimate, truth) / 3.0)
}

/// `||L* - (c L + (1 - c) L*)||^2`, which equals `c^2 ||L* - L||^2`.
pub fn task_loss(estimate: &[f64; 3], truth: &[f64; 3], c: f64) -> Result<f64> {
    check_simplex("task_loss", estimate)?;
    check_simplex("task_loss", truth)?;
    check_confidence("task_loss", c)?;
    Ok((0..3)
        .map(|i| {
            let adjusted = c * estimate[i] + (1.0 - c) * truth[i];
            (truth[i] - adjusted) * (truth[i] - adjusted)
        })
        .sum())
}

pub fn regularization_loss(c: f64) -> Result<f64> {
    check_confidence("regularization_loss", c)?;
    Ok(-libm::log(c))
}

pub fn total_loss(task: f64, reg: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::contract("total_loss", "lambda must be positive"));
    }
    Ok(task + lambda * reg)
}

// -------------------------------------------------------------------------
// lambda schedule
// -------------------------------------------------------------------------

pub const DEFAULT_BETA: f64 = 0.6;
pub const DEFAULT_LAMBDA_BAND: f64 = 0.2;
pub const DEFAULT_LAMBDA_STEP: f64 = 0.05;
/// Used when the initial task loss is zero.
pub const LAMBDA_FLOOR: f64 = 1e-6;

/// Weight of the regularization term, kept inside
/// `[(1 - band) lambda0, (1 + band) lambda0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda0: f64,
    pub lambda: f64,
    pub beta: f64,
    pub lambda_band: f64,
    pub lambda_step: f64,
}

impl LossConfig {
    pub fn new(lambda0: f64) -> Result<Self> {
        if !(lambda0 > 0.0) || !lambda0.is_finite() {
            return Err(Error::contract("LossConfig", "lambda0 must be positive"));
        }
        Ok(LossConfig {
            lambda0,
            lambda: lambda0,
            beta: DEFAULT_BETA,
            lambda_band: DEFAULT_LAMBDA_BAND,
            lambda_step: DEFAULT_LAMBDA_STEP,
        })
    }

    pub fn bounds(&self) -> (f64, f64) {
        (
            (1.0 - self.lambda_band) * self.lambda0,
            (1.0 + self.lambda_band) * self.lambda0,
        )
    }

    /// Raises lambda when the observed regularization loss is over budget,
    /// lowers it when under, keeps it on a tie.
    pub fn update_lambda(&self, observed_reg_loss: f64) -> LossConfig {
        let lambda = if observed_reg_loss > self.beta {
            self.lambda * (1.0 + self.lambda_step)
        } else if observed_reg_loss < self.beta {
            self.lambda * (1.0 - self.lambda_step)
        } else {
            self.lambda
        };
        let (lo, hi) = self.bounds();
        LossConfig {
            lambda: lambda.clamp(lo, hi),
            ..*self
        }
    }
}

/// Mean task loss at `c = 0.5` divided by `ln 2`, floored at
/// [`LAMBDA_FLOOR`].
pub fn lambda_from_task_losses(estimates: &[[f64; 3]], truths: &[[f64; 3]]) -> Result<f64> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(Error::contract("init_lambda", "empty or mismatched batch"));
    }
    let mut sum = 0.0;
    for (e, t) in estimates.iter().zip(truths) {
        sum += task_loss(e, t, 0.5)?;
    }
    let lambda = sum / estimates.len() as f64 / core::f64::consts::LN_2;
    Ok(if lambda > 0.0 { lambda } else { LAMBDA_FLOOR })
}

/// [`lambda_from_task_losses`] with estimates from `weights`.
pub fn init_lambda(weights: &NetworkWeights, batch: &[(Tensor, Illuminant)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("init_lambda", "empty batch"));
    }
    let mut estimates = Vec::with_capacity(batch.len());
    for (img, _) in batch {
        estimates.push(network::forward(weights, img, Mode::Eval)?.illuminant);
    }
    let truths: Vec<_> = batch.iter().map(|(_, l)| l.rgb()).collect();
    lambda_from_task_losses(&estimates, &truths)
}

// -------------------------------------------------------------------------
// Optimizer
// -------------------------------------------------------------------------

/// Nesterov-accelerated Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Nadam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

pub const FULL_SCALE_LEARNING_RATE: f64 = 5e-5;

impl Nadam {
    /// Moments for parameters of the given lengths.
    pub fn new(lengths: impl IntoIterator<Item = usize>, learning_rate: f64) -> Self {
        let m: Vec<Vec<f64>> = lengths.into_iter().map(|n| vec![0.0; n]).collect();
        Nadam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `None` gradients leave that parameter and its moments
    /// untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract("Nadam::step", "parameter count changed"));
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - libm::pow(b1, t);
        let bias1_next = 1.0 - libm::pow(b1, t + 1.0);
        let bias2 = 1.0 - libm::pow(b2, t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.len() != p.len() || p.len() != self.m[i].len() {
                return Err(Error::contract("Nadam::step", "gradient length differs from parameter"));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = b1 * m[j] / bias1_next + (1.0 - b1) * g[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= self.learning_rate * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning-rate decay when the monitored loss stops improving.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub threshold: f64,
    pub patience: usize,
    pub factor: f64,
    best: f64,
    stale: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau {
            threshold: 1e-5,
            patience: 5,
            factor: 0.9,
            best: f64::INFINITY,
            stale: 0,
        }
    }
}

impl Plateau {
    /// Records one evaluation; returns the factor to apply to the learning
    /// rate (1 unless a plateau was just detected).
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.stale = 0;
            return 1.0;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            self.factor
        } else {
            1.0
        }
    }
}

// -------------------------------------------------------------------------
// Training loops
// -------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    /// `1 - cos` between estimate and truth.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Crop, rotate and jitter each sample; `None` feeds images unchanged.
    pub augment: Option<AugmentConfig>,
    pub beta: f64,
    pub lambda_band: f64,
    pub lambda_step: f64,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-3,
            seed,
            loss: LossKind::Mse,
            augment: None,
            beta: DEFAULT_BETA,
            lambda_band: DEFAULT_LAMBDA_BAND,
            lambda_step: DEFAULT_LAMBDA_STEP,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::contract("train", "epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("train", "learning rate must be positive"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub phase: &'static str,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub loss: f64,
    pub task_loss: f64,
    pub reg_loss: f64,
    /// Zero in the naive phase.
    pub lambda: f64,
    pub learning_rate: f64,
    pub validation: Option<ErrorStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: NetworkWeights,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Clone, Copy)]
enum Phase {
    Naive(LossKind),
    Confidence { lambda: f64 },
}

struct SampleLoss {
    loss: f64,
    task: f64,
    reg: f64,
}

fn sample_input(img: &LabeledImage, cfg: &TrainConfig, rng: &mut Rng) -> Result<(Tensor, Illuminant)> {
    match &cfg.augment {
        Some(a) => {
            let out = datagen::augment(img, a, rng)?;
            Ok((out.patch.pixels, out.patch.illuminant))
        }
        None => Ok((img.pixels.clone(), img.illuminant)),
    }
}

/// Adds the gradient of one sample into `acc`.
fn accumulate_sample(
    weights: &NetworkWeights,
    image: &Tensor,
    truth: &Illuminant,
    phase: Phase,
    rng: &mut Rng,
    acc: &mut [Option<Vec<f64>>],
) -> Result<SampleLoss> {
    let mut tape = Tape::new();
    let trainable = match phase {
        Phase::Naive(_) => Trainable::All,
        Phase::Confidence { .. } => Trainable::ConfidenceOnly,
    };
    let g = network::forward_graph(&mut tape, weights, image, Mode::Train(rng), trainable)?;
    let target = tape.constant(Tensor::vector(&truth.rgb()));
    let (loss, task, reg) = match phase {
        Phase::Naive(LossKind::Mse) => {
            let l = tape.mse(g.illuminant, target)?;
            (l, l, None)
        }
        Phase::Naive(LossKind::Cosine) => {
            let l = tape.cosine_loss(g.illuminant, target)?;
            (l, l, None)
        }
        Phase::Confidence { lambda } => {
            let c = g
                .confidence
                .ok_or_else(|| Error::SpecMismatch("network has no confidence branch".into()))?;
            let task = tape.task_loss(g.illuminant, target, c)?;
            let reg = tape.neg_log(c)?;
            (tape.add_scaled(task, reg, lambda)?, task, Some(reg))
        }
    };
    tape.backward(loss)?;
    for (slot, v) in acc.iter_mut().zip(&g.params) {
        if let Some(grad) = tape.grad(*v) {
            match slot {
                Some(s) => s.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
                None => *slot = Some(grad.to_vec()),
            }
        }
    }
    Ok(SampleLoss {
        loss: tape.value(loss).item(),
        task: tape.value(task).item(),
        reg: reg.map_or(0.0, |r| tape.value(r).item()),
    })
}

/// Runs one epoch; returns the mean losses.
fn run_epoch(
    weights: &mut NetworkWeights,
    optimizer: &mut Nadam,
    data: &[LabeledImage],
    cfg: &TrainConfig,
    phase: Phase,
    epoch: usize,
) -> Result<SampleLoss> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, 0x5eed_0000 + epoch as u64);
    order.shuffle(&mut shuffle);
    let mut totals = SampleLoss {
        loss: 0.0,
        task: 0.0,
        reg: 0.0,
    };
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; weights.params().len()];
        for (j, &i) in batch.iter().enumerate() {
            let index = ((epoch as u64) << 40) | ((b as u64) << 16) | j as u64;
            let mut r = rng::stream(cfg.seed ^ 0xa5a5_a5a5, index);
            let (image, truth) = sample_input(&data[i], cfg, &mut r)?;
            let s = accumulate_sample(weights, &image, &truth, phase, &mut r, &mut acc)?;
            if !s.loss.is_finite() {
                return Err(Error::contract("train", "loss diverged"));
            }
            totals.loss += s.loss;
            totals.task += s.task;
            totals.reg += s.reg;
        }
        let inv = 1.0 / batch.len() as f64;
        let grads: Vec<Option<Vec<f64>>> = acc
            .into_iter()
            .map(|g| g.map(|g| g.into_iter().map(|x| x * inv).collect()))
            .collect();
        let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        let mut slices: Vec<&mut [f64]> = weights
            .params_mut()
            .iter_mut()
            .map(|p| p.tensor.data_mut())
            .collect();
        optimizer.step(&mut slices, &grad_refs)?;
    }
    let n = data.len() as f64;
    Ok(SampleLoss {
        loss: totals.loss / n,
        task: totals.task / n,
        reg: totals.reg / n,
    })
}

/// Angular errors of whole-image estimates, in dataset order.
pub fn angular_errors(weights: &NetworkWeights, data: &[LabeledImage]) -> Result<Vec<f64>> {
    data.iter()
        .map(|img| {
            let e = network::forward(weights, &img.pixels, Mode::Eval)?;
            colorlib::angular_error(e.illuminant, img.illuminant.rgb())
        })
        .collect()
}

fn validation_stats(weights: &NetworkWeights, data: &[LabeledImage]) -> Result<Option<ErrorStats>> {
    if data.is_empty() {
        return Ok(None);
    }
    colorlib::error_stats(&angular_errors(weights, data)?).map(Some)
}

fn learnable_lengths(weights: &NetworkWeights) -> impl Iterator<Item = usize> + '_ {
    weights.params().iter().map(|p| p.tensor.len())
}

/// Fits every parameter of a network without a confidence branch.
pub fn train_naive(
    spec: &NetworkSpec,
    train: &[LabeledImage],
    validation: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if spec.with_confidence_branch {
        return Err(Error::SpecMismatch(
            "the naive phase trains a network without the confidence branch".into(),
        ));
    }
    let weights = network::build_network(spec, cfg.seed)?;
    continue_naive(weights, train, validation, cfg)
}

/// [`train_naive`] starting from existing weights.
pub fn continue_naive(
    mut weights: NetworkWeights,
    train: &[LabeledImage],
    validation: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut optimizer = Nadam::new(learnable_lengths(&weights), cfg.learning_rate);
    let mut plateau = Plateau::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let l = run_epoch(&mut weights, &mut optimizer, train, cfg, Phase::Naive(cfg.loss), epoch)?;
        let val = validation_stats(&weights, validation)?;
        metrics.push(EpochMetrics {
            phase: "naive",
            epoch,
            step: optimizer.steps(),
            loss: l.loss,
            task_loss: l.task,
            reg_loss: 0.0,
            lambda: 0.0,
            learning_rate: optimizer.learning_rate,
            validation: val,
        });
        let monitored = val.map_or(l.loss, |s| s.mean);
        optimizer.learning_rate *= plateau.observe(monitored);
    }
    Ok(TrainOutcome { weights, metrics })
}

/// Copies a naive network into the matching spec with a confidence branch;
/// the new branch is initialized from `seed`.
pub fn attach_confidence_branch(naive: &NetworkWeights, seed: u64) -> Result<NetworkWeights> {
    if naive.spec().with_confidence_branch {
        return Err(Error::SpecMismatch("network already has a confidence branch".into()));
    }
    let mut spec = naive.spec().clone();
    spec.with_confidence_branch = true;
    let fresh = network::build_network(&spec, seed)?;
    let params: Vec<NamedTensor> = fresh
        .params()
        .iter()
        .map(|p| match naive.get(&p.name) {
            Some(t) if !network::is_confidence_param(&p.name) => NamedTensor {
                name: p.name.clone(),
                tensor: t.clone(),
            },
            _ => p.clone(),
        })
        .collect();
    NetworkWeights::from_parts(spec, params)
}

/// Trains only the confidence branch; every other tensor is returned
/// bit-identical.
pub fn train_confidence(
    mut weights: NetworkWeights,
    train: &[LabeledImage],
    validation: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !weights.spec().with_confidence_branch {
        return Err(Error::SpecMismatch("confidence training needs the confidence branch".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut first = Vec::with_capacity(cfg.batch_size);
    let mut r = rng::stream(cfg.seed ^ 0xa5a5_a5a5, u64::MAX);
    for img in train.iter().take(cfg.batch_size) {
        first.push(sample_input(img, cfg, &mut r)?);
    }
    let mut losses = LossConfig::new(init_lambda(&weights, &first)?)?;
    losses.beta = cfg.beta;
    losses.lambda_band = cfg.lambda_band;
    losses.lambda_step = cfg.lambda_step;

    let mut optimizer = Nadam::new(learnable_lengths(&weights), cfg.learning_rate);
    let mut plateau = Plateau::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let phase = Phase::Confidence {
            lambda: losses.lambda,
        };
        let l = run_epoch(&mut weights, &mut optimizer, train, cfg, phase, epoch)?;
        let val = validation_stats(&weights, validation)?;
        metrics.push(EpochMetrics {
            phase: "confidence",
            epoch,
            step: optimizer.steps(),
            loss: l.loss,
            task_loss: l.task,
            reg_loss: l.reg,
            lambda: losses.lambda,
            learning_rate: optimizer.learning_rate,
            validation: val,
        });
        losses = losses.update_lambda(l.reg);
        optimizer.learning_rate *= plateau.observe(l.loss);
    }
    Ok(TrainOutcome { weights, metrics })
}

/// Names of parameters that differ bitwise between two weight sets of the
/// same spec.
pub fn changed_parameters(a: &NetworkWeights, b: &NetworkWeights) -> Vec<String> {
    a.params()
        .iter()
        .zip(b.params())
        .filter(|(x, y)| {
            x.tensor
                .data()
                .iter()
                .zip(y.tensor.data())
                .any(|(p, q)| p.to_bits() != q.to_bits())
        })
        .map(|(x, _)| x.name.clone())
        .collect()
}
